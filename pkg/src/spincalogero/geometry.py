"""Sheet tracking, action integrals, holomorphic differentials, Abel sums.

The spectral curve is an N-sheeted cover of the base torus; everything here
is built on analytic continuation of the eigenvalue fibre along paths of z.
Cycles are closed lifts of base-torus loops and of loops around branch-point
pairs; the homology labels are our own choice (recorded in the outputs), and
any such choice supports the checks performed: A-normalization of the
regular differentials, flow-invariance of the actions a_l = loop-integral of
k dz, additivity of Abel sums, and linearity of the Abel image of the
divisor along the integrable flow.

Holomorphic differentials are sought in the pool c(z) k^j dz / (dR/dk) with
c in {1, wp, wp'} and j < N; regularity is decided numerically (extrapolated
boundedness at branch points and above z = 0), not symbolically.  The fully
supported case is (N, l) = (2, 1); larger cases run best-effort.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import qr as _qr
from scipy.optimize import linear_sum_assignment

from . import elliptic as el
from . import orbits as ob
from . import spectral as sp
from . import sepvars as sv
from .dynamics import PhasePoint, Trajectory

__all__ = [
    "GeometryError",
    "BranchCollisionError",
    "RegularitySelectionError",
    "LineSegment",
    "ArcSegment",
    "CyclePath",
    "torus_cycle",
    "pair_loop",
    "path_clearance",
    "track_fibre",
    "sheet_track",
    "action_integral",
    "HolomorphicBasis",
    "holomorphic_basis",
    "abel_sum",
    "abel_increment",
    "LinearFlowResult",
    "linear_flow_check",
]

MIN_STEP = 1e-7


class GeometryError(Exception):
    pass


class BranchCollisionError(GeometryError):
    """Adaptive halving hit the minimum step: path too close to a branch point."""


class RegularitySelectionError(GeometryError):
    """The numerically regular differential pool has the wrong dimension."""


@dataclass(frozen=True)
class LineSegment:
    z0: complex
    z1: complex

    def at(self, t: float) -> complex:
        return self.z0 + t * (self.z1 - self.z0)

    def velocity(self, t: float) -> complex:
        return self.z1 - self.z0


@dataclass(frozen=True)
class ArcSegment:
    center: complex
    radius: float
    a0: float
    a1: float

    def at(self, t: float) -> complex:
        return self.center + self.radius * np.exp(1j * (self.a0 + t * (self.a1 - self.a0)))

    def velocity(self, t: float) -> complex:
        return 1j * (self.a1 - self.a0) * (self.at(t) - self.center)


@dataclass(frozen=True)
class CyclePath:
    """Closed oriented base path plus a starting sheet."""

    segments: tuple
    start_sheet: int = 0
    label: str = ""

    def at(self, s: float) -> complex:
        i = min(int(s), len(self.segments) - 1)
        return self.segments[i].at(s - i)

    def velocity(self, s: float) -> complex:
        i = min(int(s), len(self.segments) - 1)
        return self.segments[i].velocity(s - i)

    @property
    def n_segments(self) -> int:
        return len(self.segments)


def torus_cycle(lat: el.LatticeParams, which: str, anchor: complex, sheet: int = 0) -> CyclePath:
    """Lift of a base-torus period loop: z(t) = anchor + t * period."""
    period = 2.0 * (lat.omega1 if which == "a" else lat.omega2)
    return CyclePath(
        segments=(LineSegment(anchor, anchor + period),),
        start_sheet=sheet,
        label=f"{which}-lift[{sheet}]",
    )


def pair_loop(z1: complex, z2: complex, pad: float, sheet: int = 0, label: str = "") -> CyclePath:
    """Circle enclosing the two points, split in two arcs."""
    center = 0.5 * (z1 + z2)
    radius = 0.5 * abs(z2 - z1) + pad
    return CyclePath(
        segments=(
            ArcSegment(center, radius, 0.0, np.pi),
            ArcSegment(center, radius, np.pi, 2.0 * np.pi),
        ),
        start_sheet=sheet,
        label=label or "pair-loop",
    )


def path_clearance(
    path_points: np.ndarray, avoid: Sequence[complex], lat: el.LatticeParams
) -> float:
    """Minimum lattice-reduced distance from the sampled path to the avoid set."""
    if len(avoid) == 0:
        return np.inf
    best = np.inf
    for w in avoid:
        d = el._reduce_cell(np.asarray(path_points) - w, lat)[0]
        best = min(best, float(np.min(np.abs(d))))
    return best


def _sample_path(path: CyclePath, per_segment: int = 64) -> np.ndarray:
    ts = np.concatenate(
        [i + np.linspace(0, 1, per_segment, endpoint=False) for i in range(path.n_segments)]
    )
    return np.array([path.at(t) for t in ts])


def _fibre_at(pp: PhasePoint, z: complex, lat, gauge: bool = False) -> np.ndarray:
    mat = sp.gauge_regularized_lax(pp, z, lat) if gauge else sp.lax(pp, z, lat)
    k = -np.linalg.eigvals(mat) / 2.0
    return k[np.lexsort((k.imag, k.real))]


def _match(fibre_old: np.ndarray, fibre_new: np.ndarray):
    cost = np.abs(fibre_old[:, None] - fibre_new[None, :])
    rows, cols = linear_sum_assignment(cost)
    matched = np.empty_like(fibre_new)
    matched[rows] = fibre_new[cols]
    motion = float(np.max(cost[rows, cols]))
    return matched, motion


def _min_gap(fibre: np.ndarray) -> float:
    n = fibre.size
    if n < 2:
        return np.inf
    d = np.abs(fibre[:, None] - fibre[None, :]) + np.diag(np.full(n, np.inf))
    return float(np.min(d))


def track_fibre(
    pp: PhasePoint,
    lat: el.LatticeParams,
    zfun: Callable[[float], complex],
    t_nodes: np.ndarray,
    fibre0: Optional[np.ndarray] = None,
):
    """Continue the whole eigenvalue fibre along zfun, hitting every node.

    A step is accepted only when each matched root moved by less than a
    quarter of the smallest root separation at the new point; otherwise the
    step is halved, down to MIN_STEP (then BranchCollisionError).  Returns
    the (len(t_nodes), N) array of sheet-consistent k values.
    """
    t_nodes = np.asarray(t_nodes, dtype=float)
    fibre = _fibre_at(pp, zfun(t_nodes[0]), lat) if fibre0 is None else np.asarray(fibre0)
    out = [fibre]
    t_cur = t_nodes[0]
    span = t_nodes[-1] - t_nodes[0]
    for t_next in t_nodes[1:]:
        dt = t_next - t_cur
        while t_cur < t_next - 1e-15:
            t_try = min(t_cur + dt, t_next)
            new = _fibre_at(pp, zfun(t_try), lat)
            matched, motion = _match(fibre, new)
            if 4.0 * motion < _min_gap(new) or motion == 0.0:
                fibre = matched
                t_cur = t_try
                dt = min(1.5 * dt, max(t_next - t_cur, 1e-15))
            else:
                dt *= 0.5
                if dt < MIN_STEP * max(span, 1.0):
                    raise BranchCollisionError(
                        f"fibre continuation stalled at t={t_cur:.6f}"
                    )
        out.append(fibre)
    return np.array(out)


def sheet_track(
    pp: PhasePoint,
    lat: el.LatticeParams,
    path: CyclePath,
    nodes_per_segment: int = 64,
):
    """(z, k) samples along the tracked start sheet, plus the monodromy.

    The permutation maps starting sheet index to the index (in canonical
    fibre order at the anchor) reached after one traversal.
    """
    t_nodes = np.concatenate(
        [i + np.linspace(0, 1, nodes_per_segment, endpoint=(i == path.n_segments - 1))
         for i in range(path.n_segments)]
    )
    zs = np.array([path.at(t) for t in t_nodes])
    fibres = track_fibre(pp, lat, path.at, t_nodes)
    start = fibres[0]
    end = fibres[-1]
    cost = np.abs(end[:, None] - start[None, :])
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(start.size, dtype=int)
    perm[rows] = cols
    return zs, fibres[:, path.start_sheet], perm


def _gauss_nodes(panels: int, order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    edges = np.linspace(0.0, 1.0, panels + 1)
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (a + b) + 0.5 * (b - a) * x)
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _integrate_sheets(
    pp: PhasePoint,
    lat,
    path: CyclePath,
    values: Callable[[complex, np.ndarray], np.ndarray],
    panels: int,
    order: int,
    fibre0: Optional[np.ndarray] = None,
):
    """Quadrature of values(z, fibre) * dz/dt over the path, all sheets at once.

    ``values`` maps (z, fibre) to an array whose first axis is the sheet; the
    return keeps that shape.  Also returns the end fibre for closure logic.
    """
    base_nodes, base_w = _gauss_nodes(panels, order)
    total = None
    fibre = fibre0
    for i, seg in enumerate(path.segments):
        t_nodes = np.concatenate([[0.0], base_nodes, [1.0]])
        ordidx = np.argsort(t_nodes)
        t_sorted = t_nodes[ordidx]
        fibres = track_fibre(pp, lat, seg.at, t_sorted, fibre0=fibre)
        # undo the sort to align with the weights
        fib_nodes = fibres[np.argsort(ordidx)][1:-1]
        fibre = fibres[-1]
        contrib = None
        for t, w, fib in zip(base_nodes, base_w, fib_nodes):
            z = seg.at(t)
            val = values(z, fib) * (w * seg.velocity(t))
            contrib = val if contrib is None else contrib + val
        total = contrib if total is None else total + contrib
    return total, fibre


def action_integral(
    pp: PhasePoint,
    lat: el.LatticeParams,
    path: CyclePath,
    panels: int = 8,
    order: int = 12,
):
    """Closed-lift integral of k dz along the tracked start sheet.

    Returns (value, error_estimate); the estimate is the change under panel
    doubling.
    """

    def values(z, fib):
        return fib

    coarse, _ = _closed_lift_integral(pp, lat, path, values, panels, order)
    fine, _ = _closed_lift_integral(pp, lat, path, values, 2 * panels, order)
    return fine, abs(fine - coarse)


_CAND_NAMES = {"1": lambda z, lat: 1.0, "wp": el.wp, "wpd": el.wp_dz}


@dataclass
class HolomorphicBasis:
    """Numerically normalized regular differentials on the curve.

    Each basis element is sum_m coeffs[m, k] * c_m(z) k^j_m / (dR/dk), the
    coefficient of dz; cycles[j] are the chosen A-cycles with
    loop-integral(A_j, omega_k) = delta_jk.
    """

    pp: PhasePoint
    lat: el.LatticeParams
    l: int
    candidates: list  # [(name, j)]
    coeffs: np.ndarray  # (n_candidates, g)
    cycles: list
    norm_residual: float
    period_vectors: np.ndarray  # rows: periods of the basis over all probe cycles
    cycle_labels: list = field(default_factory=list)

    @property
    def genus(self) -> int:
        return sp.genus(self.pp.n, self.l)

    def candidate_values(self, z: complex, fibre: np.ndarray) -> np.ndarray:
        """(n_sheets, n_candidates) raw candidate coefficients at (z, fibre)."""
        c = sp.char_poly(self.pp, z, self.lat)
        rk = sp.curve_rhs_dk(c, fibre)
        cols = []
        for name, j in self.candidates:
            cz = _CAND_NAMES[name](z, self.lat) if name != "1" else 1.0
            cols.append(cz * fibre**j / rk)
        return np.stack(cols, axis=-1)

    def eval(self, z: complex, fibre: np.ndarray) -> np.ndarray:
        """(n_sheets, g) normalized differential coefficients against dz."""
        return self.candidate_values(z, fibre) @ self.coeffs


def _candidate_pool(n: int):
    pool = [("1", j) for j in range(n)]
    pool += [("wp", j) for j in range(n)]
    pool += [("wpd", j) for j in range(n)]
    return pool


def _regular_candidates(pp, lat, pool, branch_pts, reg_threshold=1e3):
    """Filter the pool by extrapolated boundedness at z->0 and branch points."""
    scale = lat.guard_scale()
    # generic magnitude per candidate, for the relative threshold
    probe_z = sp.default_z_grid(lat, 4)
    mags = {cand: [] for cand in pool}

    def raw(cand, z, k, gauge=False):
        name, j = cand
        c = sp.char_poly(pp, z, lat, gauge=gauge)
        rk = sp.curve_rhs_dk(c, k)
        cz = _CAND_NAMES[name](z, lat) if name != "1" else 1.0
        return cz * k**j / rk

    for z in probe_z:
        fib = _fibre_at(pp, z, lat)
        for cand in pool:
            mags[cand].append(np.median(np.abs(raw(cand, z, fib))))
    keep = []
    for cand in pool:
        med = np.median(mags[cand])
        ok = True
        # above z = 0: z is the local parameter on each sheet; the gauge
        # matrix sidesteps the essential singularity of the raw Lax entries
        for frac in (3e-3, 1e-3, 3e-4):
            z = frac * scale * np.exp(0.41j)
            fib = _fibre_at(pp, z, lat, gauge=True)
            if np.max(np.abs(raw(cand, z, fib, gauge=True))) > reg_threshold * med:
                ok = False
                break
        # branch points: local parameter w with z - z* ~ w^2
        if ok:
            for bp in branch_pts:
                for frac in (1e-2, 1e-3):
                    z = bp.z + frac * scale * np.exp(0.7j)
                    fib = _fibre_at(pp, z, lat)
                    ks = fib[np.argsort(np.abs(fib - bp.k))[:2]]
                    v = np.abs(raw(cand, z, ks)) * np.sqrt(frac * scale)
                    if np.max(v) > reg_threshold * med:
                        ok = False
                        break
                if not ok:
                    break
        if ok:
            keep.append(cand)
    return keep


def holomorphic_basis(
    pp: PhasePoint,
    lat: el.LatticeParams,
    l: int,
    branch_pts: Optional[list] = None,
    panels: int = 6,
    order: int = 12,
    clearance: float = 0.02,
) -> HolomorphicBasis:
    """Construct and A-normalize the g-dimensional regular differential space.

    Designed for (N, l) = (2, 1); other cases run best-effort with the same
    candidate pool and raise RegularitySelectionError when the numerically
    regular span has the wrong dimension.
    """
    n = pp.n
    g = sp.genus(n, l)
    if branch_pts is None:
        branch_pts = sp.branch_points(pp, lat, l=l)
    pool = _candidate_pool(n)
    regular = _regular_candidates(pp, lat, pool, branch_pts)
    if len(regular) < g:
        raise RegularitySelectionError(
            f"only {len(regular)} regular candidates for genus {g}"
        )
    # independence on generic curve points; prune to exactly g by pivoted QR
    probe_z = sp.default_z_grid(lat, max(4, g))
    rows = []
    for z in probe_z:
        fib = _fibre_at(pp, z, lat)
        c = sp.char_poly(pp, z, lat)
        rk = sp.curve_rhs_dk(c, fib)
        row = []
        for name, j in regular:
            cz = _CAND_NAMES[name](z, lat) if name != "1" else 1.0
            row.append(cz * fib**j / rk)
        rows.append(np.stack(row, axis=-1))
    vmat = np.concatenate(rows, axis=0)  # (n_probe*n_sheets, n_regular)
    _, rdiag, piv = _qr(vmat, pivoting=True, mode="economic")
    rank = int(np.count_nonzero(np.abs(np.diag(rdiag)) > 1e-10 * abs(rdiag[0, 0])))
    if rank < g:
        raise RegularitySelectionError(f"regular span has rank {rank} < genus {g}")
    chosen = [regular[i] for i in sorted(piv[:g])]

    scale = lat.guard_scale()
    avoid = [bp.z for bp in branch_pts] + [0.0]
    cycles = _candidate_cycles(pp, lat, branch_pts, avoid, clearance * scale)
    if len(cycles) < g:
        raise GeometryError("not enough admissible probe cycles")

    basis_stub = HolomorphicBasis(
        pp=pp, lat=lat, l=l, candidates=chosen,
        coeffs=np.eye(len(chosen), dtype=complex),
        cycles=[], norm_residual=np.nan,
        period_vectors=np.zeros((0, g)),
    )

    def values(z, fib):
        return basis_stub.candidate_values(z, fib)

    periods = []
    for cyc in cycles:
        vals, _ = _closed_lift_integral(pp, lat, cyc, values, panels, order)
        periods.append(vals)
    pmat = np.array(periods)  # (n_cycles, g)

    best = None
    for combo in itertools.combinations(range(len(cycles)), g):
        sub = pmat[list(combo)]
        smin = np.linalg.svd(sub, compute_uv=False)[-1]
        if best is None or smin > best[0]:
            best = (smin, combo)
    _, combo = best
    sel = list(combo)
    # with P = pmat[sel] and W = P^-1, (P W)_{jk} = delta_jk: column k of W
    # holds the candidate weights of the k-th normalized differential
    coeffs = np.linalg.inv(pmat[sel])
    basis = HolomorphicBasis(
        pp=pp, lat=lat, l=l, candidates=chosen, coeffs=coeffs,
        cycles=[cycles[i] for i in sel],
        norm_residual=np.nan,
        period_vectors=pmat @ coeffs,
        cycle_labels=[cycles[i].label for i in sel],
    )
    # re-verify the normalization by independent re-integration, finer panels
    resid = 0.0
    for jj, cyc in enumerate(basis.cycles):
        vals, _ = _closed_lift_integral(
            pp, lat, cyc, lambda z, f: basis.eval(z, f), panels + 3, order
        )
        resid = max(resid, float(np.max(np.abs(vals - np.eye(g)[jj]))))
    basis.norm_residual = resid
    return basis


def _closed_lift_integral(pp, lat, path, values, panels, order, max_loops=None):
    """Integral of per-sheet values over the closed lift of path's start sheet.

    track_fibre keeps a continued lift at a fixed index, so the accumulation
    index never changes; traversals repeat until that lift returns to its
    anchor value.
    """
    n = pp.n
    max_loops = max_loops or n
    anchor_fibre = _fibre_at(pp, path.at(0.0), lat)
    sheet = path.start_sheet
    total = 0.0
    fibre = anchor_fibre
    for loop in range(max_loops):
        vals, fibre_end = _integrate_sheets(pp, lat, path, values, panels, order, fibre0=fibre)
        total = total + vals[sheet]
        pos = int(np.argmin(np.abs(anchor_fibre - fibre_end[sheet])))
        fibre = fibre_end
        if pos == path.start_sheet:
            return total, loop + 1
    raise GeometryError(f"lift of {path.label} did not close in {max_loops} loops")


def _candidate_cycles(pp, lat, branch_pts, avoid, clearance):
    """Torus-cycle lifts per sheet plus loops around branch-point pairs."""
    n = pp.n
    scale = lat.guard_scale()
    cycles = []
    for which in ("a", "b"):
        anchor = None
        for t0 in (0.17, 0.31, 0.43, 0.57, 0.69):
            cand = t0 * 2.0 * (lat.omega2 if which == "a" else lat.omega1) + \
                0.11 * 2.0 * (lat.omega1 if which == "a" else lat.omega2)
            probe = torus_cycle(lat, which, cand)
            if path_clearance(_sample_path(probe), avoid, lat) > clearance:
                anchor = cand
                break
        if anchor is None:
            continue
        for sheet in range(n):
            cycles.append(torus_cycle(lat, which, anchor, sheet))
    bps = sorted(branch_pts, key=lambda b: (b.z.real, b.z.imag))
    for i in range(0, len(bps) - 1, 2):
        z1, z2 = bps[i].z, bps[i + 1].z
        pad = max(0.12 * abs(z2 - z1), 0.04 * scale)
        for bump in (1.0, 1.3, 0.75):
            loop = pair_loop(z1, z2, pad * bump, label=f"branch-pair[{i},{i+1}]")
            pts = _sample_path(loop)
            others = [b.z for b in bps if b.z not in (z1, z2)] + [0.0]
            inner = min(
                float(np.min(np.abs(pts - z1))), float(np.min(np.abs(pts - z2)))
            )
            if path_clearance(pts, others, lat) > clearance and inner > clearance:
                cycles.append(loop)
                break
    # single-branch-point loops (closed after two traversals); these are the
    # cycles a tracking slip at a divisor-through-branch crossing produces,
    # so their periods must be in the unwinding pool
    for i, bp in enumerate(bps):
        rad = 0.05 * scale
        for bump in (1.0, 0.6, 1.5):
            loop = pair_loop(bp.z, bp.z, rad * bump, label=f"branch-loop[{i}]")
            pts = _sample_path(loop)
            others = [b.z for j, b in enumerate(bps) if j != i] + [0.0]
            if path_clearance(pts, others, lat) > clearance:
                cycles.append(loop)
                break
    return cycles


def abel_increment(
    pp_frozen: PhasePoint,
    lat: el.LatticeParams,
    basis: HolomorphicBasis,
    z_from: complex,
    k_from: complex,
    z_to: complex,
    panels: int = 2,
    order: int = 10,
):
    """Integral of the basis along the frozen-curve lift of z_from -> z_to.

    The start sheet is the frozen-curve fibre value nearest k_from; returns
    (theta_increment (g,), k_end) with k_end the continued sheet value at
    z_to (for continuity bookkeeping by the caller).
    """
    seg = LineSegment(z_from, z_to)
    path = CyclePath(segments=(seg,), start_sheet=0, label="abel-step")
    fibre0 = _fibre_at(pp_frozen, z_from, lat)
    sheet = int(np.argmin(np.abs(fibre0 - k_from)))

    base_nodes, base_w = _gauss_nodes(panels, order)
    t_nodes = np.concatenate([[0.0], base_nodes, [1.0]])
    ordidx = np.argsort(t_nodes)
    fibres = track_fibre(pp_frozen, lat, seg.at, t_nodes[ordidx], fibre0=fibre0)
    fib_sorted = fibres[np.argsort(ordidx)]
    inc = np.zeros(basis.genus, dtype=complex)
    for t, w, fib in zip(base_nodes, base_w, fib_sorted[1:-1]):
        inc = inc + basis.eval(seg.at(t), fib)[sheet] * (w * seg.velocity(t))
    return inc, fib_sorted[-1][sheet]


def abel_sum(
    pp: PhasePoint,
    lat: el.LatticeParams,
    basis: HolomorphicBasis,
    divisor_pts: Sequence[sv.DivisorPoint],
    base_point: complex,
    branch_pts: Optional[list] = None,
    clearance: float = 0.015,
    panels: int = 4,
    order: int = 12,
) -> np.ndarray:
    """Abel transform: theta_k = sum_i integral(base -> gamma_i) omega_k.

    Integration paths are straight z-segments from the base point, bent once
    if they pass too close to a branch-point projection; path-dependence mod
    the period lattice is inherent and not resolved here.
    """
    if branch_pts is None:
        branch_pts = sp.branch_points(pp, lat, l=basis.l)
    avoid = [bp.z for bp in branch_pts] + [0.0]
    scale = lat.guard_scale()
    theta = np.zeros(basis.genus, dtype=complex)
    for pt in divisor_pts:
        segs = _clear_path(base_point, pt.z, avoid, lat, clearance * scale)
        fib0 = _fibre_at(pp, base_point, lat)
        # choose the start sheet whose continuation lands on k_i
        chosen = None
        for sheet0 in range(pp.n):
            k_cur = fib0[sheet0]
            inc_total = np.zeros(basis.genus, dtype=complex)
            z_cur = base_point
            for seg in segs:
                inc, k_cur = abel_increment(
                    pp, lat, basis, seg.z0, k_cur, seg.z1, panels=panels, order=order
                )
                inc_total = inc_total + inc
            if abs(k_cur - pt.k) < 1e-6 * max(1.0, abs(pt.k)):
                chosen = inc_total
                break
        if chosen is None:
            raise sv.TrackingError(
                f"no start sheet reaches divisor point k={pt.k:.6g}"
            )
        theta = theta + chosen
    return theta


def _segments_admissible(segs, avoid, lat, clearance):
    """Clearance check with a relaxed margin near unavoidable endpoints.

    A divisor point may legitimately sit close to a branch projection; the
    path is then allowed to approach that projection down to a fraction of
    the endpoint's own distance (adaptive tracking handles the approach).
    """
    z_from = segs[0].z0
    z_to = segs[-1].z1
    pts = np.concatenate(
        [np.array([seg.at(t) for t in np.linspace(0, 1, 48)]) for seg in segs]
    )
    for w in avoid:
        d = np.abs(el._reduce_cell(pts - w, lat)[0])
        d_end = min(
            abs(el._reduce_cell(np.asarray(z_from - w), lat)[0]),
            abs(el._reduce_cell(np.asarray(z_to - w), lat)[0]),
        )
        if float(np.min(d)) < min(clearance, 0.7 * d_end):
            return False
    return True


def _clear_path(z_from, z_to, avoid, lat, clearance):
    """One or two line segments from z_from to z_to avoiding the given points."""
    direct = [LineSegment(z_from, z_to)]
    if _segments_admissible(direct, avoid, lat, clearance):
        return direct
    mid = 0.5 * (z_from + z_to)
    direction = (z_to - z_from) / max(abs(z_to - z_from), 1e-30)
    for side in (1j, -1j, 2j, -2j):
        via = mid + side * 3.0 * clearance * direction
        segs = [LineSegment(z_from, via), LineSegment(via, z_to)]
        if _segments_admissible(segs, avoid, lat, clearance):
            return segs
    raise sv.TrackingError("could not route an integration path clear of branch points")


@dataclass
class LinearFlowResult:
    times: np.ndarray
    theta: np.ndarray  # (n_times, g), theta(t0) = 0
    second_over_first: float
    max_first_diff: float
    curve_consistency: float
    unwound_steps: int
    step_violations: int = 0  # steps with |dtheta| > 1/4 shortest period
    sheet_mismatches: int = 0  # corrected tracking slips at branch crossings


def linear_flow_check(
    traj: Trajectory,
    lat: el.LatticeParams,
    l: int,
    basis: Optional[HolomorphicBasis] = None,
    check_on_curve: bool = True,
    clearance: float = 0.01,
    seeds: Optional[Sequence[sv.DivisorPoint]] = None,
) -> LinearFlowResult:
    """Certify linear motion of the Abel image of the divisor along the flow.

    The divisor is tracked through the trajectory states; theta increments
    are integrals of the t=0 (frozen) curve's normalized differentials along
    the z-paths of the divisor points, with the sheet continued on the frozen
    curve.  For the integrable flow the instantaneous divisor stays on the
    frozen curve (checked when ``check_on_curve``); the returned ratio
    max|second difference| / max|first difference| of theta certifies
    linearity when small.  Period jumps are unwound by minimizing each step
    over integer shifts of the recorded period vectors.
    """
    pp0 = traj.states[0]
    if basis is None:
        basis = holomorphic_basis(pp0, lat, l)
    g = basis.genus
    if seeds is None:
        seeds = sv.divisor(pp0, lat, l)
    m = len(seeds)
    thetas = [np.zeros(g, dtype=complex)]
    k_frozen = [pt.k for pt in seeds]
    current = list(seeds)
    consistency = 0.0
    mismatches = 0
    unwound = 0
    violations = 0
    period_pool = _period_lattice(basis)
    shortest = (
        float(np.min(np.linalg.norm(period_pool, axis=1)))
        if period_pool.size
        else np.inf
    )
    for state in traj.states[1:]:
        new_pts = sv.polish_divisor(state, lat, current, max_move=np.inf)
        step = np.zeros(g, dtype=complex)
        for i in range(m):
            inc, k_end = abel_increment(
                pp0, lat, basis, current[i].z, k_frozen[i], new_pts[i].z
            )
            step = step + inc
            if check_on_curve:
                # the instantaneous divisor lies on the frozen curve for the
                # integrable flow: pin the sheet there, so a tracking slip at
                # a divisor-through-branch crossing stays a single-step
                # period jump (handled by the unwinding below) instead of a
                # permanently wrong lift
                err = abs(k_end - new_pts[i].k)
                if err > 1e-4 * max(1.0, abs(new_pts[i].k)):
                    mismatches += 1
                else:
                    consistency = max(consistency, err)
                k_frozen[i] = new_pts[i].k
            else:
                k_frozen[i] = k_end
        if period_pool.size:
            step, shifted = _unwind(step, period_pool)
            unwound += int(shifted > 0)
        if np.linalg.norm(step) > 0.25 * shortest:
            violations += 1
        thetas.append(thetas[-1] + step)
        current = new_pts
    if violations:
        warnings.warn(
            f"{violations} step(s) exceed a quarter of the shortest period: "
            "unwinding is not certifiable; sample the trajectory more densely"
        )
    theta = np.array(thetas)
    d1 = np.diff(theta, axis=0)
    d2 = np.diff(theta, n=2, axis=0)
    max1 = float(np.max(np.abs(d1)))
    ratio = float(np.max(np.abs(d2)) / max(max1, 1e-30))
    return LinearFlowResult(
        times=traj.times,
        theta=theta,
        second_over_first=ratio,
        max_first_diff=max1,
        curve_consistency=consistency,
        unwound_steps=unwound,
        step_violations=violations,
        sheet_mismatches=mismatches,
    )


def _period_lattice(basis: HolomorphicBasis) -> np.ndarray:
    rows = [r for r in np.atleast_2d(basis.period_vectors) if np.max(np.abs(r)) > 1e-8]
    return np.array(rows) if rows else np.zeros((0, basis.genus))


def _unwind(step: np.ndarray, periods: np.ndarray):
    """Minimize |step| over integer shifts of the period vectors (greedy)."""
    best = step
    best_norm = float(np.linalg.norm(step))
    shifted = 0
    improved = True
    while improved and shifted < 32:
        improved = False
        for row in periods:
            for s in (1.0, -1.0):
                cand = best + s * row
                nrm = float(np.linalg.norm(cand))
                if nrm < best_norm - 1e-12:
                    best = cand
                    best_norm = nrm
                    shifted += 1
                    improved = True
    return best, shifted
