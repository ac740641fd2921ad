"""Lax matrix, spectral curve R(k,z) = det(2kI + L(z)), branch structure.

The curve is represented by samples of the coefficients r_j(z) of (2k)^(N-j)
in det(2kI + L(z)) plus on-demand evaluation; no symbolic expansion in a
wp-basis is attempted.  The essential singularity of L at z = 0 is handled by
the gauge-regularized matrix

    Ltilde_ij = p_i delta_ij + f_ij phi(x_i - x_j, z) exp(-(x_i - x_j)/z)

which is meromorphic near z = 0 with Ltilde = -(f - 2I)/z + O(1) on the
constraint surface f_ii = 2; limits as z -> 0 are taken along rays with
Richardson extrapolation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import elliptic as el
from . import orbits as ob
from .dynamics import PhasePoint

__all__ = [
    "SearchError",
    "SearchIncompleteError",
    "BranchPoint",
    "BranchSearchConfig",
    "SpectralCurve",
    "lax",
    "char_poly",
    "char_poly_grid",
    "curve_rhs",
    "curve_rhs_dk",
    "genus",
    "discriminant",
    "branch_points",
    "gauge_regularized_lax",
    "z0_asymptotics",
    "independent_integrals_rank",
    "default_z_grid",
    "richardson",
]


class SearchError(Exception):
    pass


class SearchIncompleteError(SearchError):
    """Grid refinement budget exhausted before the root count stabilized."""


def lax(pp: PhasePoint, z, lat: el.LatticeParams) -> np.ndarray:
    """L_ij(z) = p_i delta_ij + (1 - delta_ij) f_ij phi(x_i - x_j, z).

    z may be a scalar or an array; the matrix axes come last two.
    """
    z = np.asarray(z, dtype=complex)
    n = pp.n
    dx = pp.x[:, None] - pp.x[None, :]
    off = ~np.eye(n, dtype=bool)
    out = np.zeros(z.shape + (n, n), dtype=complex)
    vals = el.phi(dx[off], z[..., None], lat)  # (..., n*(n-1))
    out[..., off] = pp.f[off] * vals
    out[..., np.arange(n), np.arange(n)] = pp.p
    return out


def gauge_regularized_lax(
    pp: PhasePoint, z, lat: el.LatticeParams, x0: Optional[complex] = None
) -> np.ndarray:
    """The conjugated matrix D^-1 L D with D = diag(exp((x_i - x0)/z)).

    The scalar part of D cancels in the similarity, so the value does not
    depend on x0; the parameter is kept for interface parity with the
    Diag(exp((x_k - x0)/z)) presentation.
    """
    z = np.asarray(z, dtype=complex)
    n = pp.n
    dx = pp.x[:, None] - pp.x[None, :]
    off = ~np.eye(n, dtype=bool)
    out = np.zeros(z.shape + (n, n), dtype=complex)
    vals = el.phi_gauge(dx[off], z[..., None], lat)
    out[..., off] = pp.f[off] * vals
    out[..., np.arange(n), np.arange(n)] = pp.p
    return out


def char_poly(pp: PhasePoint, z, lat: el.LatticeParams, gauge: bool = False) -> np.ndarray:
    """Coefficients r_j of det(2kI + L(z)) = sum_j r_j (2k)^(N-j), r_0 = 1.

    Computed by the Faddeev-LeVerrier trace recursion, which is independent
    of any eigenvalue solve (the roots-vs-eigenvalues agreement is a test).
    With ``gauge`` the similar matrix Ltilde is used instead of L: identical
    coefficients, but evaluable close to the essential singularity at z = 0.
    """
    return char_poly_grid(pp, np.asarray([z], dtype=complex), lat, gauge=gauge)[0]


def char_poly_grid(pp: PhasePoint, zs, lat: el.LatticeParams, gauge: bool = False) -> np.ndarray:
    """char_poly sampled on a z-grid; returns shape (len(zs), N+1)."""
    zs = np.asarray(zs, dtype=complex)
    mat = gauge_regularized_lax(pp, zs, lat) if gauge else lax(pp, zs, lat)
    a = -mat  # det(uI + L) = det(uI - (-L))
    m = zs.size
    n = pp.n
    eye = np.broadcast_to(np.eye(n, dtype=complex), (m, n, n))
    coeffs = np.empty((m, n + 1), dtype=complex)
    coeffs[:, 0] = 1.0
    mk = np.array(eye)
    ck = np.full(m, 1.0 + 0j)
    for k in range(1, n + 1):
        if k > 1:
            mk = a @ mk + ck[:, None, None] * eye
        ck = -np.einsum("mij,mji->m", a, mk) / k
        coeffs[:, k] = ck
    return coeffs.reshape(zs.shape + (n + 1,)) if zs.ndim else coeffs


def curve_rhs(coeffs: np.ndarray, k) -> np.ndarray:
    """R(k, z) evaluated from coefficient vector(s): polynomial in u = 2k."""
    u = 2.0 * np.asarray(k, dtype=complex)
    c = np.asarray(coeffs)
    out = c[..., 0]
    for j in range(1, c.shape[-1]):
        out = out * u + c[..., j]
    return out


def curve_rhs_dk(coeffs: np.ndarray, k) -> np.ndarray:
    """dR/dk = 2 dR/du."""
    u = 2.0 * np.asarray(k, dtype=complex)
    c = np.asarray(coeffs)
    deg = c.shape[-1] - 1
    out = deg * c[..., 0]
    for j in range(1, deg):
        out = out * u + (deg - j) * c[..., j]
    return 2.0 * out


def genus(N: int, l: int) -> int:
    """g = N*l - l*(l+1)/2 + 1."""
    if not 1 <= l <= N - 1:
        raise ValueError("need 1 <= l <= N-1")
    return N * l - l * (l + 1) // 2 + 1


@dataclass(frozen=True)
class SpectralCurve:
    """Sample-based curve data bound to one phase point."""

    N: int
    l: int
    genus: int
    z_grid: np.ndarray
    coeff_samples: np.ndarray  # (len(z_grid), N+1)

    @classmethod
    def from_phase_point(cls, pp: PhasePoint, lat, l: int, z_grid) -> "SpectralCurve":
        z_grid = np.asarray(z_grid, dtype=complex)
        return cls(
            N=pp.n,
            l=l,
            genus=genus(pp.n, l),
            z_grid=z_grid,
            coeff_samples=char_poly_grid(pp, z_grid, lat),
        )


def default_z_grid(lat: el.LatticeParams, count: int = 5) -> np.ndarray:
    """Generic sample points in the fundamental cell, away from z=0."""
    t1 = 2.0 * (lat.omega1 if lat.omega1 is not None else 1.0)
    t2 = 2.0 * (lat.omega2 if lat.omega2 is not None else 1.0j)
    ss = np.linspace(0.13, 0.82, count)
    tt = (0.37 + 0.41 * np.arange(count)) % 0.93 + 0.035
    return ss * t1 + tt * t2


def discriminant(coeffs: np.ndarray) -> complex:
    """Resultant of R(u) and dR/du in u = 2k; vanishes at branch z's."""
    p = np.asarray(coeffs, dtype=complex)
    deg = p.shape[-1] - 1
    dp = p[:-1] * np.arange(deg, 0, -1)
    m, n = deg, deg - 1
    s = np.zeros((m + n, m + n), dtype=complex)
    for i in range(n):
        s[i, i : i + m + 1] = p
    for i in range(m):
        s[n + i, i : i + n + 1] = dp
    return complex(np.linalg.det(s))


@dataclass(frozen=True)
class BranchPoint:
    z: complex
    k: complex
    multiplicity: int = 1
    res_curve: float = 0.0
    res_dk: float = 0.0


@dataclass(frozen=True)
class BranchSearchConfig:
    grid_n: int = 45
    exclude_origin: float = 0.055
    tol_curve: float = 1e-11
    tol_dk: float = 1e-9
    newton_iter: int = 60
    max_refine: int = 2
    dedupe_tol: float = 1e-6


def _cell_reduce_z(z, lat):
    z0, _, _, _ = el._reduce_cell(np.asarray(z, dtype=complex), lat)
    return z0


def _double_root_seed(coeffs, z):
    u = np.roots(coeffs)
    if u.size < 2:
        return None
    d = np.abs(u[:, None] - u[None, :]) + np.eye(u.size) * 1e30
    i, j = np.unravel_index(np.argmin(d), d.shape)
    return 0.25 * (u[i] + u[j])  # (u_i + u_j)/2 in u, halved again for k


def _joint_newton(pp, lat, z0, k0, cfg):
    """Newton for R = 0, dR/dk = 0 in (z, k) with finite-difference Jacobian."""
    scale = lat.guard_scale()
    hz = 1e-7 * scale
    hk = 1e-7 * max(1.0, abs(k0))
    z, k = complex(z0), complex(k0)
    for _ in range(cfg.newton_iter):
        c0 = char_poly(pp, z, lat)
        g = np.array([curve_rhs(c0, k), curve_rhs_dk(c0, k)])
        if abs(g[0]) < cfg.tol_curve and abs(g[1]) < cfg.tol_dk:
            return z, k, abs(g[0]), abs(g[1])
        cp = char_poly(pp, z + hz, lat)
        cm = char_poly(pp, z - hz, lat)
        dz = (np.array([curve_rhs(cp, k), curve_rhs_dk(cp, k)]) -
              np.array([curve_rhs(cm, k), curve_rhs_dk(cm, k)])) / (2 * hz)
        dk = np.array(
            [
                (curve_rhs(c0, k + hk) - curve_rhs(c0, k - hk)) / (2 * hk),
                (curve_rhs_dk(c0, k + hk) - curve_rhs_dk(c0, k - hk)) / (2 * hk),
            ]
        )
        jac = np.column_stack([dz, dk])
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            return None
        z += step[0]
        k += step[1]
        if not (np.isfinite(z) and np.isfinite(k)):
            return None
    return None


def branch_points(
    pp: PhasePoint,
    lat: el.LatticeParams,
    cfg: BranchSearchConfig = BranchSearchConfig(),
    l: Optional[int] = None,
) -> List[BranchPoint]:
    """All simple branch points (R = dR/dk = 0) in the fundamental cell.

    Coarse modulus-of-discriminant grid, local minima, then joint Newton
    polishing.  Expects 2g - 2 points for generic data when l is supplied;
    raises SearchIncompleteError if refinement cannot reach that count.
    """
    expected = 2 * genus(pp.n, l) - 2 if l is not None else None
    t1, t2 = 2.0 * lat.omega1, 2.0 * lat.omega2
    grid_n = cfg.grid_n
    for attempt in range(cfg.max_refine + 1):
        found = _branch_sweep(pp, lat, cfg, grid_n, t1, t2)
        if expected is None or len(found) == expected:
            return found
        grid_n = int(grid_n * 1.7)
    raise SearchIncompleteError(
        f"found {len(found)} branch points, expected {expected}"
    )


def _branch_sweep(pp, lat, cfg, grid_n, t1, t2):
    ss = (np.arange(grid_n) + 0.5) / grid_n
    tt = (np.arange(grid_n) + 0.5) / grid_n
    sg, tg = np.meshgrid(ss, tt, indexing="ij")
    zg = sg * t1 + tg * t2
    _, _, _, frac = el._reduce_cell(zg, lat)
    coeffs = char_poly_grid(pp, zg.reshape(-1), lat).reshape(grid_n, grid_n, -1)
    dvals = np.empty((grid_n, grid_n), dtype=complex)
    for i in range(grid_n):
        for j in range(grid_n):
            dvals[i, j] = discriminant(coeffs[i, j])
    mag = np.abs(dvals)
    mag[frac < cfg.exclude_origin] = np.inf
    pad = np.pad(mag, 1, constant_values=np.inf)
    neigh = np.stack(
        [
            pad[1 + di : 1 + di + grid_n, 1 + dj : 1 + dj + grid_n]
            for di in (-1, 0, 1)
            for dj in (-1, 0, 1)
            if (di, dj) != (0, 0)
        ]
    )
    is_min = (mag < neigh.min(axis=0)) & np.isfinite(mag)
    cands = list(zip(zg[is_min], coeffs[is_min]))
    points = []
    for z0, c0 in cands:
        seed = _double_root_seed(c0, z0)
        if seed is None:
            continue
        res = _joint_newton(pp, lat, z0, seed, cfg)
        if res is None:
            continue
        z, k, r_c, r_dk = res
        z = _cell_reduce_z(z, lat)
        _, _, _, fz = el._reduce_cell(z, lat)
        if fz < cfg.exclude_origin / 2:
            continue
        points.append(BranchPoint(z=z, k=k, res_curve=r_c, res_dk=r_dk))
    return _dedupe_branch(points, lat, cfg.dedupe_tol)


def _dedupe_branch(points, lat, tol):
    scale = lat.guard_scale()
    kept: List[BranchPoint] = []
    for bp in sorted(points, key=lambda b: (round(b.z.real, 9), round(b.z.imag, 9))):
        dup = False
        for other in kept:
            dz = _cell_reduce_z(bp.z - other.z, lat)
            if abs(dz) < tol * scale and abs(bp.k - other.k) < tol * max(
                1.0, abs(other.k)
            ):
                dup = True
                break
        if not dup:
            kept.append(bp)
    return kept


def richardson(values: np.ndarray, ratio: float = 0.5) -> np.ndarray:
    """Extrapolate a sequence v(r0 * ratio^j) -> v(0), assuming a power series."""
    t = [np.asarray(values, dtype=complex)]
    j = 1
    while t[-1].shape[0] > 1:
        prev = t[-1]
        fac = ratio ** (-j)
        t.append((fac * prev[1:] - prev[:-1]) / (fac - 1.0))
        j += 1
    return t[-1][0]


def z0_asymptotics(
    pp: PhasePoint,
    lat: el.LatticeParams,
    ray_angle: float = 0.37,
    r0: Optional[float] = None,
    n_steps: int = 7,
) -> np.ndarray:
    """Limits of k*z along a ray z -> 0 on all N sheets.

    Uses the gauge-regularized matrix; the limit multiset is
    {lambda/2 - 1 : lambda in eig(f)} including N - l copies of -1.
    """
    scale = lat.guard_scale()
    if r0 is None:
        r0 = 0.02 * scale
    radii = r0 * 0.5 ** np.arange(n_steps)
    zs = radii * np.exp(1j * ray_angle)
    seq = np.empty((n_steps, pp.n), dtype=complex)
    prev = None
    for m, z in enumerate(zs):
        lt = gauge_regularized_lax(pp, z, lat)
        kz = -np.linalg.eigvals(lt) * z / 2.0
        if prev is not None:
            cost = np.abs(kz[:, None] - prev[None, :])
            rows, cols = linear_sum_assignment(cost)
            ordered = np.empty_like(kz)
            ordered[cols] = kz[rows]
            kz = ordered
        seq[m] = kz
        prev = kz
    out = np.array([richardson(seq[:, a]) for a in range(pp.n)])
    return out[np.lexsort((out.imag, out.real))]


def independent_integrals_rank(
    pp: PhasePoint,
    lat: el.LatticeParams,
    z_grid: Sequence[complex],
    fd_step: float = 1e-5,
    gap_warn: float = 1e2,
) -> int:
    """Rank of the Jacobian of {r_j(z_m)} along constraint-surface directions.

    Directions: all x_i and p_i steps, plus orbit tangents with zero diagonal
    (so the moment constraint and the Casimirs are respected to first order).
    The singular-value profile of the finite-difference Jacobian gives the
    number of independent integrals of motion sampled by the curve.
    """
    z_grid = np.asarray(list(z_grid), dtype=complex)
    n = pp.n
    h = fd_step * lat.guard_scale()

    def samples(x, p, f):
        q = PhasePoint(x=x, p=p, f=f)
        return char_poly_grid(q, z_grid, lat)[:, 1:].reshape(-1)

    rows = []
    for i in range(n):
        dx = np.zeros(n, dtype=complex)
        dx[i] = h
        rows.append((samples(pp.x + dx, pp.p, pp.f) - samples(pp.x - dx, pp.p, pp.f)) / (2 * h))
    for i in range(n):
        dp = np.zeros(n, dtype=complex)
        dp[i] = h
        rows.append((samples(pp.x, pp.p + dp, pp.f) - samples(pp.x, pp.p - dp, pp.f)) / (2 * h))
    for u in ob.orbit_tangent_basis(pp.f, zero_diagonal=True):
        rows.append((samples(pp.x, pp.p, pp.f + h * u) - samples(pp.x, pp.p, pp.f - h * u)) / (2 * h))
    jac = np.array(rows).T
    s = np.linalg.svd(jac, compute_uv=False)
    s = s[s > 0]
    floor = s[0] * 1e-13
    ratios = s[:-1] / np.maximum(s[1:], floor)
    cut = int(np.argmax(ratios))
    if ratios[cut] < gap_warn:
        warnings.warn(
            f"ill-conditioned integral-rank Jacobian: best gap {ratios[cut]:.2e}"
        )
    return cut + 1
