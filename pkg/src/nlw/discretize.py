"""Finite-volume discretization of a kernel/measure pair on the torus.

The level-n system replaces the continuum pair (eta, pi) with

  pi_n(j)     = pi(cell_j)                      (pushforward under the
                                                 nearest-center map)
  eta_n(j,k)  = 1/(pi_n(j) pi_n(k)) *
                iint_{cell_j x cell_k} 1{|x-y| >= delta_n/2} eta(x,y) dpi dpi

with delta_n = sqrt(d)/n the cell diameter.  Removing pairs closer than
delta_n/2 keeps every entry finite even for singular kernels, while the
elementary bound (1 ^ |x_j - x_k|^2) <= 4 (1 ^ |x - y|^2) for x, y in
the respective cells makes the discrete truncated second moment

  M_n = max_j sum_k (1 ^ |x_j - x_k|^2) eta_n(j,k) pi_n(k)

at most 4x its continuum counterpart, uniformly in n; `verify_moment_bound`
checks that inequality numerically.

Quadrature.  Cell-pair integrals where the cutoff is inactive (the
minimal distance between the two cells is >= delta_n/2, so the indicator
is identically 1) use a tensor-product midpoint rule, with the per-axis
subdivision count doubled until the relative change drops below
``quad.pair_tol``.  Pairs where the cutoff cuts through the domain are
integrated in displacement coordinates: with t = y - x the double
integral becomes an integral over the displacement window of
eta evaluated at radius |t| times an inner integral over the exact
overlap segment/box; in d = 1 every breakpoint (overlap kink, cutoff
radius, wrap-around) is located exactly and each smooth piece gets a
Gauss rule, so adjacent-pair entries are accurate to near machine
precision.  In d >= 2 the displacement box is handled by a midpoint
lattice whose subcells get exact-geometry mask fractions from a fixed
sub-lattice; accuracy there is the doubling tolerance, not machine
precision.

All cell-pair integrals are independent; they are evaluated in batches
with a deterministic write order, so two builds from the same config are
bit-identical.  Systems serialize to a self-describing JSON document
(schema "nlw-system/v1") with arrays in row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import (
    KernelSpec,
    MeasureSpec,
    QuadratureConfig,
    _gauss_nodes,
    _values_with_radius,
    kernel_from_dict,
    measure_from_dict,
)
from .torus import GridSpec, build_grid

__all__ = [
    "DiscreteSystem",
    "QuadratureError",
    "ZeroCellError",
    "pushforward_measure",
    "discretize_kernel",
    "build_system",
    "verify_moment_bound",
    "MomentBoundReport",
    "save_system",
    "load_system",
    "SYSTEM_SCHEMA",
]

SYSTEM_SCHEMA = "nlw-system/v1"


class QuadratureError(RuntimeError):
    """A cell-pair or per-cell integral failed to converge."""


class ZeroCellError(ValueError):
    """A cell carries (numerically) no reference mass.

    Entropy, Fisher information and the kernel normalization all divide
    by pi_n, so near-empty cells are rejected rather than clamped; mixing
    in a sliver of Lebesgue measure (MixedMeasure) is the supported fix.
    """


# ---------------------------------------------------------------------------
# Discrete system container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteSystem:
    """An immutable weighted-graph system (grid, pi_n, eta_n).

    Invariants (enforced at construction): pi sums to 1 within 1e-12
    with nonnegative entries; eta is exactly symmetric, has an exactly
    zero diagonal, and is finite and nonnegative; delta equals the grid
    cell diameter.
    """

    grid: GridSpec
    pi: np.ndarray
    eta: np.ndarray
    delta: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        n = self.grid.n_points
        if pi.shape != (n,):
            raise ValueError(f"pi has shape {pi.shape}, expected ({n},)")
        if eta.shape != (n, n):
            raise ValueError(f"eta has shape {eta.shape}, expected ({n}, {n})")
        if not np.all(np.isfinite(pi)) or np.any(pi < 0):
            raise ValueError("pi entries must be finite and nonnegative")
        if abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError(f"pi sums to {pi.sum()!r}, not 1")
        if not np.all(np.isfinite(eta)) or np.any(eta < 0):
            raise ValueError("eta entries must be finite and nonnegative")
        if not np.array_equal(eta, eta.T):
            raise ValueError("eta must be exactly symmetric")
        if np.any(np.diagonal(eta) != 0.0):
            raise ValueError("eta must have an exactly zero diagonal")
        if abs(self.delta - self.grid.cell_diameter) > 1e-15:
            raise ValueError("delta does not match the grid cell diameter")
        pi.setflags(write=False)
        eta.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "eta", eta)

    @property
    def n_points(self) -> int:
        return self.grid.n_points

    @classmethod
    def from_arrays(cls, grid: GridSpec, pi, eta, delta=None, provenance=None) -> "DiscreteSystem":
        return cls(
            grid=grid,
            pi=np.array(pi, dtype=float),
            eta=np.array(eta, dtype=float),
            delta=grid.cell_diameter if delta is None else float(delta),
            provenance=dict(provenance or {}),
        )


# ---------------------------------------------------------------------------
# Pushforward measure
# ---------------------------------------------------------------------------


def _cell_nodes(grid: GridSpec, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss nodes/weights per cell, shapes (N, order^d, d) and (order^d,)."""
    w = grid.cell_width
    t1, w1 = _gauss_nodes(-0.5 * w, 0.5 * w, order)
    d = grid.dim
    offs = np.stack(np.meshgrid(*([t1] * d), indexing="ij"), axis=-1).reshape(-1, d)
    wts = np.prod(np.stack(np.meshgrid(*([w1] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    nodes = np.mod(grid.points[:, None, :] + offs[None, :, :], 1.0)
    return nodes, wts


def pushforward_measure(
    pi: MeasureSpec,
    grid: GridSpec,
    quad: QuadratureConfig | None = None,
    return_factor: bool = False,
):
    """Cell masses pi_n(j) = pi(cell_j), renormalized to sum exactly 1.

    Per-cell tensor Gauss quadrature of the density, with the order
    doubled until the weights stop moving (relative change below
    ``quad.cell_tol``).  The renormalization factor must lie within
    1e-8 of 1 — a larger defect means the quadrature, not the measure,
    is wrong.  Weights below 1e-14 raise ZeroCellError.
    """
    quad = quad or QuadratureConfig()
    order = 16 if grid.dim == 1 else (8 if grid.dim == 2 else 5)
    prev = None
    weights = None
    for _ in range(quad.max_doublings + 1):
        nodes, wts = _cell_nodes(grid, order)
        dens = pi.density(nodes.reshape(-1, grid.dim)).reshape(grid.n_points, -1)
        weights = dens @ wts
        if prev is not None:
            scale = np.maximum(np.abs(weights), 1e-300)
            if float(np.max(np.abs(weights - prev) / scale)) <= quad.cell_tol:
                break
        prev = weights
        order *= 2
    else:
        raise QuadratureError("pushforward quadrature did not converge; is the density wildly oscillatory?")

    total = float(weights.sum())
    if abs(total - 1.0) > 1e-8:
        raise QuadratureError(
            f"pushforward weights sum to {total!r}; the measure does not integrate to 1 "
            "at quadrature accuracy"
        )
    weights = weights / total
    bad = np.nonzero(weights < 1e-14)[0]
    if bad.size:
        raise ZeroCellError(
            f"cells {bad[:8].tolist()} carry mass below 1e-14; mix in Lebesgue measure "
            "or coarsen the grid"
        )
    if return_factor:
        return weights, total
    return weights


# ---------------------------------------------------------------------------
# Cell-pair classification
# ---------------------------------------------------------------------------


def _wrapped_signed(a: np.ndarray) -> np.ndarray:
    """Wrap center offsets to the fundamental window [-1/2, 1/2)."""
    return np.mod(a + 0.5, 1.0) - 0.5


def _pair_min_distance_sq(grid: GridSpec) -> np.ndarray:
    """Min squared distance between any two points of each cell pair."""
    pts = grid.points
    w = grid.cell_width
    diff = np.abs(pts[:, None, :] - pts[None, :, :])
    diff = np.minimum(diff, 1.0 - diff)
    gaps = np.maximum(diff - w, 0.0)
    return np.sum(gaps * gaps, axis=-1)


# ---------------------------------------------------------------------------
# Cutoff-inactive pairs: tensor midpoint over cell x cell
# ---------------------------------------------------------------------------


def _midpoint_offsets(w: float, m: int, d: int) -> np.ndarray:
    g1 = ((np.arange(m) + 0.5) / m - 0.5) * w
    return np.stack(np.meshgrid(*([g1] * d), indexing="ij"), axis=-1).reshape(-1, d)


def _inactive_batch(spec, meas, centers_j, centers_k, w, m, d, chunk_bytes=2**25):
    """Unmasked cell-pair integrals for a batch of pairs at m points/axis."""
    offs = _midpoint_offsets(w, m, d)
    q = offs.shape[0]
    out = np.empty(centers_j.shape[0])
    rows_per_pair = q * q
    chunk = max(1, int(chunk_bytes / (rows_per_pair * 8 * (d + 2))))
    for lo in range(0, centers_j.shape[0], chunk):
        hi = min(lo + chunk, centers_j.shape[0])
        X = np.mod(centers_j[lo:hi, None, :] + offs[None, :, :], 1.0)  # (P, q, d)
        Y = np.mod(centers_k[lo:hi, None, :] + offs[None, :, :], 1.0)
        dx = meas.density(X.reshape(-1, d)).reshape(-1, q)
        dy = meas.density(Y.reshape(-1, d)).reshape(-1, q)
        XX = np.repeat(X, q, axis=1)  # (P, q*q, d): x varies slow
        YY = np.tile(Y, (1, q, 1))  # y varies fast
        P = hi - lo
        flatX = XX.reshape(-1, d)
        flatY = YY.reshape(-1, d)
        diff = np.abs(flatX - flatY)
        diff = np.minimum(diff, 1.0 - diff)
        r = np.sqrt(np.sum(diff * diff, axis=1))
        vals = _values_with_radius(spec, flatX, flatY, r).reshape(P, q, q)
        out[lo:hi] = np.einsum("pab,pa,pb->p", vals, dx, dy) * (w / m) ** (2 * d)
    return out


# ---------------------------------------------------------------------------
# Cutoff-active pairs, d = 1: exact-breakpoint displacement integral
# ---------------------------------------------------------------------------


def _active_pair_1d(spec, meas, xj, xk, w, dhalf, order):
    """iint_{cell_j x cell_k} 1{r >= dhalf} eta rho rho, exact piecewise form.

    In displacement coordinates t = y - x the domain is the window
    [s - w, s + w] around the wrapped center offset s; for fixed t the
    x-integration runs over the exact overlap segment of length
    w - |t - s|.  Breakpoints: overlap kink at t = s, cutoff at
    |t| = dhalf and |t| = 1 - dhalf, wrap kink at |t| = 1/2.
    """
    s = float(_wrapped_signed(np.array([xk - xj]))[0])
    lo, hi = s - w, s + w
    cuts = {lo, hi, s}
    for b in (dhalf, -dhalf, 0.5, -0.5, 1.0 - dhalf, -(1.0 - dhalf)):
        if lo < b < hi:
            cuts.add(b)
    pts = sorted(cuts)
    total = 0.0
    for a, b in zip(pts, pts[1:]):
        if b - a <= 1e-15:
            continue
        tm = 0.5 * (a + b)
        r_mid = min(abs(tm), 1.0 - abs(tm))
        if r_mid < dhalf:
            continue  # masked out
        t_nodes, t_wts = _gauss_nodes(a, b, order)
        # x runs over cell_j intersected with (cell_k - t), an exact segment
        a_x = xj + np.maximum(-0.5 * w, s - t_nodes - 0.5 * w)
        b_x = xj + np.minimum(0.5 * w, s - t_nodes + 0.5 * w)
        lengths = b_x - a_x
        u_nodes, u_wts = _gauss_nodes(0.0, 1.0, order)  # reference segment
        X = a_x[:, None] + lengths[:, None] * u_nodes[None, :]
        T = np.broadcast_to(t_nodes[:, None], X.shape)
        Y = X + T
        r = np.minimum(np.abs(T), 1.0 - np.abs(T))
        Xf = np.mod(X.reshape(-1, 1), 1.0)
        Yf = np.mod(Y.reshape(-1, 1), 1.0)
        vals = _values_with_radius(spec, Xf, Yf, r.reshape(-1))
        dens = meas.density(Xf) * meas.density(Yf)
        inner = (vals * dens).reshape(X.shape) @ u_wts  # integral over reference u
        total += float(np.dot(t_wts, inner * lengths))
    return total


# ---------------------------------------------------------------------------
# Cutoff-active pairs, d >= 2: displacement lattice with mask fractions
# ---------------------------------------------------------------------------


def _active_pair_nd(spec, meas, cj, ck, w, dhalf, m, d, frac_sub):
    """Displacement-lattice value of the masked pair integral (d >= 2)."""
    s = _wrapped_signed(ck - cj)
    t1 = ((np.arange(m) + 0.5) / m - 0.5) * (2.0 * w)
    axes = [s[i] + t1 for i in range(d)]
    T = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)  # (m^d, d)
    h = 2.0 * w / m
    # mask fraction per displacement subcell from a fixed sub-lattice
    sub1 = ((np.arange(frac_sub) + 0.5) / frac_sub - 0.5) * h
    sub = np.stack(np.meshgrid(*([sub1] * d), indexing="ij"), axis=-1).reshape(-1, d)
    TS = T[:, None, :] + sub[None, :, :]
    TSw = np.abs(_wrapped_signed(TS))
    rr = np.sqrt(np.sum(TSw * TSw, axis=-1))
    frac = np.mean(rr >= dhalf, axis=1)
    keep = frac > 0.0
    if not np.any(keep):
        return 0.0
    T = T[keep]
    frac = frac[keep]
    # overlap box per displacement: per-axis segment of length w - |t_i - s_i|
    a_x = cj[None, :] + np.maximum(-0.5 * w, (s - T) - 0.5 * w)
    b_x = cj[None, :] + np.minimum(0.5 * w, (s - T) + 0.5 * w)
    lengths = np.clip(b_x - a_x, 0.0, None)  # (K, d)
    vol = np.prod(lengths, axis=1)
    u_nodes, u_wts = _gauss_nodes(0.0, 1.0, 4)
    UN = np.stack(np.meshgrid(*([u_nodes] * d), indexing="ij"), axis=-1).reshape(-1, d)  # (q, d)
    UW = np.prod(np.stack(np.meshgrid(*([u_wts] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    X = a_x[:, None, :] + lengths[:, None, :] * UN[None, :, :]  # (K, q, d)
    Y = X + T[:, None, :]
    Tw = np.abs(_wrapped_signed(Y - X))
    r = np.sqrt(np.sum(Tw * Tw, axis=-1))
    Xf = np.mod(X.reshape(-1, d), 1.0)
    Yf = np.mod(Y.reshape(-1, d), 1.0)
    vals = _values_with_radius(spec, Xf, Yf, r.reshape(-1))
    dens = meas.density(Xf) * meas.density(Yf)
    inner = ((vals * dens).reshape(X.shape[0], -1) @ UW) * vol  # (K,)
    return float(np.sum(inner * frac) * h**d)


# ---------------------------------------------------------------------------
# Kernel discretization
# ---------------------------------------------------------------------------


def discretize_kernel(
    spec: KernelSpec,
    pi: MeasureSpec,
    grid: GridSpec,
    quad: QuadratureConfig | None = None,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Cutoff cell-averaged kernel matrix eta_n.

    Entry (j, k) is the pair integral of eta * 1{distance >= delta/2}
    against the product measure, divided by pi_n(j) pi_n(k).  Computed
    for j < k and mirrored, so the result is exactly symmetric with a
    zero diagonal.
    """
    quad = quad or QuadratureConfig()
    if weights is None:
        weights = pushforward_measure(pi, grid, quad)
    if np.any(weights <= 0):
        raise ZeroCellError("kernel normalization requires strictly positive cell masses")
    N, d, w = grid.n_points, grid.dim, grid.cell_width
    dhalf = 0.5 * grid.cell_diameter
    min_d2 = _pair_min_distance_sq(grid)
    jj, kk = np.triu_indices(N, k=1)
    active = min_d2[jj, kk] < dhalf * dhalf
    integrals = np.zeros(jj.shape[0])

    # --- inactive pairs: tensor midpoint with doubling -------------------
    idx = np.nonzero(~active)[0]
    pending = idx
    m = quad.cell_points
    prev_vals = {}
    for step in range(quad.max_doublings + 1):
        if pending.size == 0:
            break
        cj = grid.points[jj[pending]]
        ck = grid.points[kk[pending]]
        vals = _inactive_batch(spec, pi, cj, ck, w, m, d)
        if step == 0:
            for i, p in enumerate(pending):
                prev_vals[p] = vals[i]
            m *= 2
            continue
        still = []
        for i, p in enumerate(pending):
            ref = max(abs(vals[i]), 1e-300)
            if abs(vals[i] - prev_vals[p]) <= quad.pair_tol * ref:
                integrals[p] = vals[i]
            else:
                prev_vals[p] = vals[i]
                still.append(p)
        pending = np.array(still, dtype=int)
        m *= 2
    if pending.size:
        j0, k0 = jj[pending[0]], kk[pending[0]]
        raise QuadratureError(
            f"cell-pair quadrature did not converge for {int(pending.size)} pairs; "
            f"first offender ({j0}, {k0})"
        )

    # --- active pairs: displacement coordinates --------------------------
    for p in np.nonzero(active)[0]:
        j0, k0 = int(jj[p]), int(kk[p])
        if d == 1:
            prev = None
            order = 16
            for _ in range(quad.max_doublings + 1):
                val = _active_pair_1d(spec, pi, grid.points[j0, 0], grid.points[k0, 0], w, dhalf, order)
                if prev is not None and abs(val - prev) <= quad.pair_tol * max(abs(val), 1e-300):
                    integrals[p] = val
                    break
                prev = val
                order *= 2
            else:
                raise QuadratureError(f"adjacent-pair quadrature did not converge for cells ({j0}, {k0})")
        else:
            prev = None
            m2 = 8
            frac_sub = 8 if d == 2 else 4
            for _ in range(quad.max_doublings + 1):
                val = _active_pair_nd(spec, pi, grid.points[j0], grid.points[k0], w, dhalf, m2, d, frac_sub)
                if prev is not None and abs(val - prev) <= quad.pair_tol * max(abs(val), 1e-300):
                    integrals[p] = val
                    break
                prev = val
                m2 *= 2
            else:
                raise QuadratureError(f"adjacent-pair quadrature did not converge for cells ({j0}, {k0})")

    eta = np.zeros((N, N))
    eta[jj, kk] = integrals / (weights[jj] * weights[kk])
    eta[kk, jj] = eta[jj, kk]
    return eta


def build_system(
    spec: KernelSpec,
    pi: MeasureSpec,
    grid: GridSpec,
    quad: QuadratureConfig | None = None,
) -> DiscreteSystem:
    """Assemble (pi_n, eta_n) into a validated DiscreteSystem."""
    quad = quad or QuadratureConfig()
    weights, factor = pushforward_measure(pi, grid, quad, return_factor=True)
    eta = discretize_kernel(spec, pi, grid, quad, weights=weights)
    provenance = {
        "kernel": spec.to_dict(),
        "measure": pi.to_dict(),
        "quadrature": quad.to_dict(),
        "renormalization": factor,
    }
    return DiscreteSystem(grid=grid, pi=weights, eta=eta, delta=grid.cell_diameter, provenance=provenance)


# ---------------------------------------------------------------------------
# Moment bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentBoundReport:
    """Outcome of the factor-4 moment comparison."""

    m_n: float
    continuum_sup: float
    bound: float
    ratio: float
    worst_row: int
    slack: float
    passes: bool


def verify_moment_bound(sys: DiscreteSystem, continuum_sup: float, slack: float = 0.01) -> MomentBoundReport:
    """Check M_n <= 4 * continuum_sup (with relative quadrature slack).

    M_n is the discrete truncated second moment
    max_j sum_k (1 ^ |x_j - x_k|^2) eta_n(j,k) pi_n(k).
    """
    pts = sys.grid.points
    diff = np.abs(pts[:, None, :] - pts[None, :, :])
    diff = np.minimum(diff, 1.0 - diff)
    r2 = np.sum(diff * diff, axis=-1)
    rows = (np.minimum(1.0, r2) * sys.eta) @ sys.pi
    worst = int(np.argmax(rows))
    m_n = float(rows[worst])
    bound = 4.0 * continuum_sup * (1.0 + slack)
    return MomentBoundReport(
        m_n=m_n,
        continuum_sup=continuum_sup,
        bound=bound,
        ratio=m_n / (4.0 * continuum_sup) if continuum_sup > 0 else np.inf,
        worst_row=worst,
        slack=slack,
        passes=m_n <= bound,
    )


# ---------------------------------------------------------------------------
# Serialization: "nlw-system/v1"
# ---------------------------------------------------------------------------


def save_system(sys: DiscreteSystem, path) -> None:
    """Write the system as a self-describing JSON document."""
    doc = {
        "schema": SYSTEM_SCHEMA,
        "dim": sys.grid.dim,
        "level": sys.grid.level,
        "delta": sys.delta,
        "pi": sys.pi.tolist(),
        "eta": sys.eta.tolist(),
        "provenance": sys.provenance,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_system(path) -> DiscreteSystem:
    """Read and validate a system written by save_system."""
    doc = json.loads(Path(path).read_text())
    schema = doc.get("schema")
    if schema != SYSTEM_SCHEMA:
        raise ValueError(f"unsupported system schema {schema!r} (expected {SYSTEM_SCHEMA!r})")
    grid = build_grid(int(doc["dim"]), int(doc["level"]))
    sys = DiscreteSystem(
        grid=grid,
        pi=np.array(doc["pi"], dtype=float),
        eta=np.array(doc["eta"], dtype=float),
        delta=float(doc["delta"]),
        provenance=doc.get("provenance", {}),
    )
    return sys
