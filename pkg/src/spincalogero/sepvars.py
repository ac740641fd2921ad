"""Eigenvector sections, divisor extraction, and the Darboux-structure check.

The normalized eigenvector C (C_1 = 1) of 2kI + L(z) has poles where the
first minor of the matrix vanishes on the curve.  Those g - 1 points
gamma_i = (z_i, k_i) are the separation variables: the checks in this module
measure the Poisson brackets among them and compare the canonical two-form
against sum_i dk_i ^ dz_i evaluated through finite-difference gradients of
the divisor.

Conventions fixed here and used by the checks:

* pairings are bilinear, <a, b> = sum_i a_i b_i, no conjugation;
* phase-space coordinates are packed as xi = (x_1..x_N, p_1..p_N, f_11..f_NN)
  (f row-major), and all gradients are holomorphic partials in these;
* the canonical two-form on tangent vectors u, v is evaluated as

      omega_can(u, v) = sum_i [dx_i(v) dp_i(u) - dp_i(v) dx_i(u)]
                        - Tr(f [X_u, X_v])

  which is the unique combination inverting the Poisson tensor
  {p_i, x_j} = delta_ij plus the Kirillov bracket (the spin block carries a
  minus sign relative to Tr(f[X,Y]); the consistency test in the suite pins
  this).  Wedge convention: (a ^ b)(u, v) = a(u) b(v) - a(v) b(u).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import elliptic as el
from . import orbits as ob
from . import spectral as sp
from .dynamics import PhasePoint

__all__ = [
    "SepvarsError",
    "NormalizationError",
    "CurvePointError",
    "TrackingError",
    "DivisorPoint",
    "DivisorSearchConfig",
    "BracketMatrix",
    "DivisorDerivatives",
    "ReducedFormResult",
    "pairing",
    "eigenvector",
    "adjoint_eigenvector",
    "decompose",
    "minor11",
    "divisor",
    "polish_divisor",
    "divisor_gradients",
    "darboux_check",
    "constrained_tangent",
    "reduced_form_check",
    "pairing_zero_check",
    "colliding_sheet_angle",
]


class SepvarsError(Exception):
    pass


class NormalizationError(SepvarsError):
    """|C_1| too small to normalize: the point sits at/near a divisor pole."""


class CurvePointError(SepvarsError):
    """(z, k) does not satisfy the curve equation to working precision."""


class TrackingError(SepvarsError):
    """Divisor points could not be matched across perturbed phase points."""


def pairing(a: np.ndarray, b: np.ndarray) -> complex:
    """Bilinear pairing sum_i a_i b_i (no conjugation)."""
    return complex(np.sum(np.asarray(a) * np.asarray(b)))


def _shifted(pp: PhasePoint, z, k, lat) -> np.ndarray:
    return 2.0 * k * np.eye(pp.n) + sp.lax(pp, z, lat)


def _right_null(a: np.ndarray):
    u, s, vh = np.linalg.svd(a)
    return vh[-1].conj(), s


def _left_null(a: np.ndarray):
    u, s, vh = np.linalg.svd(a)
    return u[:, -1].conj(), s


def _check_on_curve(s: np.ndarray, tol: float = 1e-6):
    if s[-1] > tol * s[0]:
        raise CurvePointError(
            f"smallest singular value {s[-1]:.2e} vs largest {s[0]:.2e}"
        )


def eigenvector(
    pp: PhasePoint, z: complex, k: complex, lat: el.LatticeParams
) -> np.ndarray:
    """Right null vector C of 2kI + L(z), rescaled so C_1 = 1."""
    v, s = _right_null(_shifted(pp, z, k, lat))
    _check_on_curve(s)
    if abs(v[0]) < 1e-10:
        raise NormalizationError("C_1 vanishes: divisor point")
    return v / v[0]


def adjoint_eigenvector(
    pp: PhasePoint, z: complex, k: complex, lat: el.LatticeParams
) -> np.ndarray:
    """Left null row vector C+ of 2kI + L(z), rescaled so C+_1 = 1."""
    w, s = _left_null(_shifted(pp, z, k, lat))
    _check_on_curve(s)
    if abs(w[0]) < 1e-10:
        raise NormalizationError("C+_1 vanishes: adjoint divisor point")
    return w / w[0]


def curve_fibre(pp: PhasePoint, z: complex, lat) -> np.ndarray:
    """The N values of k above z, canonically ordered."""
    k = -np.linalg.eigvals(sp.lax(pp, z, lat)) / 2.0
    return k[np.lexsort((k.imag, k.real))]


def decompose(
    pp: PhasePoint, z: complex, lat, v: np.ndarray
) -> np.ndarray:
    """Reassemble v from the eigenvector basis above z.

    Returns sum_a <C+_a, v>/<C+_a, C_a> * C_a, which must reproduce v away
    from branch points.
    """
    out = np.zeros_like(np.asarray(v, dtype=complex))
    for k in curve_fibre(pp, z, lat):
        c = eigenvector(pp, z, k, lat)
        cp = adjoint_eigenvector(pp, z, k, lat)
        out = out + pairing(cp, v) / pairing(cp, c) * c
    return out


def minor11(a: np.ndarray) -> complex:
    """Determinant of the matrix with first row and column removed."""
    return complex(np.linalg.det(a[1:, 1:]))


@dataclass(frozen=True)
class DivisorPoint:
    z: complex
    k: complex
    sheet: int
    residual: float  # achieved |minor|
    res_curve: float = 0.0


@dataclass(frozen=True)
class DivisorSearchConfig:
    grid_n: int = 41
    exclude_origin: float = 0.05
    tol_curve: float = 1e-11
    tol_minor: float = 1e-11
    newton_iter: int = 60
    pole_filter: float = 1e-3
    dedupe_tol: float = 1e-6
    max_refine: int = 2
    strict: bool = True


def _minor_newton(pp, lat, z0, k0, cfg):
    """Newton on (R(k,z), minor11(2kI+L)) = 0 in the two unknowns (z, k)."""
    scale = lat.guard_scale()
    hz = 1e-7 * scale
    hk = 1e-7 * max(1.0, abs(k0))
    z, k = complex(z0), complex(k0)

    def system(zz, kk):
        a = _shifted(pp, zz, kk, lat)
        c = sp.char_poly(pp, zz, lat)
        return np.array([sp.curve_rhs(c, kk), minor11(a)])

    for _ in range(cfg.newton_iter):
        g = system(z, k)
        if abs(g[0]) < cfg.tol_curve and abs(g[1]) < cfg.tol_minor:
            return z, k, abs(g[1]), abs(g[0])
        jz = (system(z + hz, k) - system(z - hz, k)) / (2 * hz)
        jk = (system(z, k + hk) - system(z, k - hk)) / (2 * hk)
        try:
            step = np.linalg.solve(np.column_stack([jz, jk]), -g)
        except np.linalg.LinAlgError:
            return None
        z += step[0]
        k += step[1]
        if not (np.isfinite(z) and np.isfinite(k)):
            return None
    return None


def _is_pole(pp, lat, z, k, threshold) -> bool:
    """True when the unit null vector has (near-)vanishing first component."""
    v, s = _right_null(_shifted(pp, z, k, lat))
    return abs(v[0]) < threshold


def divisor(
    pp: PhasePoint,
    lat: el.LatticeParams,
    l: int,
    cfg: DivisorSearchConfig = DivisorSearchConfig(),
) -> List[DivisorPoint]:
    """All poles (z_i, k_i) of the normalized eigenvector in the cell.

    Zeros of the first minor on the curve are located by a sheet-product grid
    sweep plus joint Newton polishing, then filtered to genuine eigenvector
    poles (the minor also vanishes at mirror points where a different row of
    the shifted matrix degenerates; those have a well-normalizable C).
    Expected count is g - 1 for generic data.
    """
    expected = sp.genus(pp.n, l) - 1
    t1, t2 = 2.0 * lat.omega1, 2.0 * lat.omega2
    grid_n = cfg.grid_n
    for attempt in range(cfg.max_refine + 1):
        pts = _divisor_sweep(pp, lat, cfg, grid_n, t1, t2)
        if len(pts) == expected:
            return pts
        grid_n = int(grid_n * 1.7)
    msg = f"found {len(pts)} divisor points, expected {expected}"
    if cfg.strict:
        raise sp.SearchIncompleteError(msg)
    warnings.warn(msg)
    return pts


def _divisor_sweep(pp, lat, cfg, grid_n, t1, t2):
    n = pp.n
    ss = (np.arange(grid_n) + 0.5) / grid_n
    tt = (np.arange(grid_n) + 0.5) / grid_n
    sg, tg = np.meshgrid(ss, tt, indexing="ij")
    zg = sg * t1 + tg * t2
    _, _, _, frac = el._reduce_cell(zg, lat)
    lmats = sp.lax(pp, zg.reshape(-1), lat).reshape(grid_n, grid_n, n, n)
    mag = np.empty((grid_n, grid_n))
    kbest = np.empty((grid_n, grid_n), dtype=complex)
    eye = np.eye(n)
    for i in range(grid_n):
        for j in range(grid_n):
            ks = -np.linalg.eigvals(lmats[i, j]) / 2.0
            minors = [abs(minor11(2.0 * k * eye + lmats[i, j])) for k in ks]
            a = int(np.argmin(minors))
            mag[i, j] = minors[a]
            kbest[i, j] = ks[a]
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
    points = []
    for z0, k0 in zip(zg[is_min], kbest[is_min]):
        res = _minor_newton(pp, lat, z0, k0, cfg)
        if res is None:
            continue
        z, k, r_m, r_c = res
        z0c, _, _, fz = el._reduce_cell(z, lat)
        if fz < cfg.exclude_origin / 2:
            continue
        if not _is_pole(pp, lat, z0c, k, cfg.pole_filter):
            continue
        points.append((z0c, k, r_m, r_c))
    return _dedupe_divisor(pp, lat, points, cfg.dedupe_tol)


def _dedupe_divisor(pp, lat, points, tol):
    scale = lat.guard_scale()
    kept = []
    for z, k, r_m, r_c in sorted(
        points, key=lambda t: (round(t[0].real, 9), round(t[0].imag, 9))
    ):
        dup = False
        for zz, kk, *_ in kept:
            dz = el._reduce_cell(np.asarray(z - zz), lat)[0]
            if abs(dz) < tol * scale and abs(k - kk) < tol * max(1.0, abs(kk)):
                dup = True
                break
        if not dup:
            kept.append((z, k, r_m, r_c))
    out = []
    for z, k, r_m, r_c in kept:
        fib = curve_fibre(pp, z, lat)
        sheet = int(np.argmin(np.abs(fib - k)))
        out.append(DivisorPoint(z=z, k=k, sheet=sheet, residual=r_m, res_curve=r_c))
    return out


def polish_divisor(
    pp: PhasePoint,
    lat: el.LatticeParams,
    seeds: Sequence[DivisorPoint],
    cfg: DivisorSearchConfig = DivisorSearchConfig(),
    max_move: Optional[float] = None,
) -> List[DivisorPoint]:
    """Re-solve the divisor near known seeds (point tracking).

    Rejects the solve when a point moves further than ``max_move`` (defaults
    to 0.2x the minimum pairwise separation of the seeds).
    """
    if max_move is None:
        if len(seeds) > 1:
            sepmin = min(
                abs(a.z - b.z) + abs(a.k - b.k)
                for i, a in enumerate(seeds)
                for b in seeds[i + 1 :]
            )
            max_move = 0.2 * sepmin
        else:
            max_move = 0.2 * lat.guard_scale()
    out = []
    for pt in seeds:
        res = _minor_newton(pp, lat, pt.z, pt.k, cfg)
        if res is None:
            raise TrackingError(f"polish failed from seed {pt}")
        z, k, r_m, r_c = res
        if abs(z - pt.z) + abs(k - pt.k) > max_move:
            raise TrackingError(
                f"divisor point moved {abs(z - pt.z) + abs(k - pt.k):.3e} "
                f"(> {max_move:.3e}) during tracking"
            )
        out.append(
            DivisorPoint(z=z, k=k, sheet=pt.sheet, residual=r_m, res_curve=r_c)
        )
    return out


def _pack_coords(pp: PhasePoint) -> np.ndarray:
    return np.concatenate([pp.x, pp.p, pp.f.reshape(-1)])


def _unpack_coords(xi: np.ndarray, n: int) -> PhasePoint:
    return PhasePoint(x=xi[:n], p=xi[n : 2 * n], f=xi[2 * n :].reshape(n, n))


@dataclass
class DivisorDerivatives:
    """Holomorphic gradients of z_i, k_i in packed phase-space coordinates."""

    points: List[DivisorPoint]
    dz: np.ndarray  # (g-1, 2N + N^2)
    dk: np.ndarray
    n: int

    def directional(self, delta: np.ndarray):
        """(dz_i(u), dk_i(u)) for a packed tangent vector u."""
        return self.dz @ delta, self.dk @ delta


def divisor_gradients(
    pp: PhasePoint,
    lat: el.LatticeParams,
    seeds: Sequence[DivisorPoint],
    fd_step: float = 1e-5,
    use_richardson: bool = True,
    cfg: DivisorSearchConfig = DivisorSearchConfig(),
) -> DivisorDerivatives:
    """Central-difference gradients of the divisor with point tracking.

    Two step sizes (h and h/2) are combined by Richardson extrapolation to
    suppress the O(h^2) truncation error on top of the root-solver noise.
    """
    n = pp.n
    xi0 = _pack_coords(pp)
    m = len(seeds)
    nxi = xi0.size
    scale = lat.guard_scale()

    def solve_at(xi):
        q = _unpack_coords(xi, n)
        pts = polish_divisor(q, lat, seeds, cfg=cfg)
        return (
            np.array([p.z for p in pts]),
            np.array([p.k for p in pts]),
        )

    def central(h):
        dz = np.empty((m, nxi), dtype=complex)
        dk = np.empty((m, nxi), dtype=complex)
        for a in range(nxi):
            step = np.zeros(nxi, dtype=complex)
            step[a] = h
            zp, kp = solve_at(xi0 + step)
            zm, km = solve_at(xi0 - step)
            dz[:, a] = (zp - zm) / (2 * h)
            dk[:, a] = (kp - km) / (2 * h)
        return dz, dk

    h = fd_step * scale
    dz_h, dk_h = central(h)
    if use_richardson:
        dz_h2, dk_h2 = central(h / 2)
        dz = (4.0 * dz_h2 - dz_h) / 3.0
        dk = (4.0 * dk_h2 - dk_h) / 3.0
    else:
        dz, dk = dz_h, dk_h
    return DivisorDerivatives(points=list(seeds), dz=dz, dk=dk, n=n)


def _poisson_bracket(grads_a: np.ndarray, grads_b: np.ndarray, pp: PhasePoint) -> complex:
    """{a, b} from packed gradients: canonical block plus Kirillov block."""
    n = pp.n
    ax, ap, af = grads_a[:n], grads_a[n : 2 * n], grads_a[2 * n :].reshape(n, n)
    bx, bp, bf = grads_b[:n], grads_b[n : 2 * n], grads_b[2 * n :].reshape(n, n)
    canonical = np.sum(ap * bx - ax * bp)
    return complex(canonical + ob.kirillov_bracket(af, bf, pp.f))


@dataclass
class BracketMatrix:
    """Pairwise Poisson brackets of the separation variables."""

    zz: np.ndarray  # {z_i, z_j}
    kk: np.ndarray  # {k_i, k_j}
    kz: np.ndarray  # {k_i, z_j}

    def structure_residuals(self) -> dict:
        diag = np.diag(self.kz)
        off = self.kz - np.diag(diag)
        c = complex(np.mean(diag))
        return {
            "zz_max": float(np.max(np.abs(self.zz))) if self.zz.size else 0.0,
            "kk_max": float(np.max(np.abs(self.kk))) if self.kk.size else 0.0,
            "kz_offdiag_max": float(np.max(np.abs(off))) if off.size else 0.0,
            "kz_diag_spread": float(np.max(np.abs(diag - c))) if diag.size else 0.0,
            "c": c,
        }


def darboux_check(
    pp: PhasePoint,
    lat: el.LatticeParams,
    l: int,
    fd_step: float = 1e-5,
    seeds: Optional[Sequence[DivisorPoint]] = None,
    grads: Optional[DivisorDerivatives] = None,
) -> BracketMatrix:
    """Brackets among the (z_i, k_i); the claim is zz = kk = 0, kz = c*I."""
    if grads is None:
        if seeds is None:
            seeds = divisor(pp, lat, l)
        grads = divisor_gradients(pp, lat, seeds, fd_step=fd_step)
    m = len(grads.points)
    zz = np.empty((m, m), dtype=complex)
    kk = np.empty((m, m), dtype=complex)
    kz = np.empty((m, m), dtype=complex)
    for i in range(m):
        for j in range(m):
            zz[i, j] = _poisson_bracket(grads.dz[i], grads.dz[j], pp)
            kk[i, j] = _poisson_bracket(grads.dk[i], grads.dk[j], pp)
            kz[i, j] = _poisson_bracket(grads.dk[i], grads.dz[j], pp)
    return BracketMatrix(zz=zz, kk=kk, kz=kz)


def constrained_tangent(pp: PhasePoint, rng: np.random.Generator):
    """Random tangent to the reduced phase space at pp.

    Translation-reduced (sum dx = sum dp = 0) and moment-preserving
    (df = [f, X] with vanishing diagonal).  Returns (packed_delta, X).
    """
    n = pp.n
    dx = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    dp = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    dx -= dx.mean()
    dp -= dp.mean()
    basis = ob.orbit_tangent_basis(pp.f, zero_diagonal=True)
    df = np.zeros((n, n), dtype=complex)
    for u in basis:
        df = df + (rng.standard_normal() + 1j * rng.standard_normal()) * u
    x_gen = ob.solve_generator(pp.f, df)
    return np.concatenate([dx, dp, df.reshape(-1)]), x_gen


@dataclass
class ReducedFormResult:
    c_hat: complex
    residual: float
    n_pairs: int
    omega_canonical: np.ndarray
    omega_algebraic: np.ndarray


def reduced_form_check(
    pp: PhasePoint,
    lat: el.LatticeParams,
    l: int,
    trials: int = 20,
    seed: int = 0,
    grads: Optional[DivisorDerivatives] = None,
) -> ReducedFormResult:
    """Fit omega_canonical = c * sum_i dk_i ^ dz_i on random reduced tangents.

    Returns the least-squares scalar c and the relative residual of the fit;
    a small residual with a single c across phase points is the numerical
    content of the separation-variable Darboux claim.
    """
    if grads is None:
        grads = divisor_gradients(pp, lat, divisor(pp, lat, l))
    rng = ob.make_rng(seed)
    n = pp.n
    w_can = np.empty(trials, dtype=complex)
    w_alg = np.empty(trials, dtype=complex)
    for t in range(trials):
        u, xu = constrained_tangent(pp, rng)
        v, xv = constrained_tangent(pp, rng)
        ux, up = u[:n], u[n : 2 * n]
        vx, vp = v[:n], v[n : 2 * n]
        canonical = np.sum(vx * up - vp * ux)
        spin = -np.trace(pp.f @ (xu @ xv - xv @ xu))
        w_can[t] = canonical + spin
        dz_u, dk_u = grads.directional(u)
        dz_v, dk_v = grads.directional(v)
        w_alg[t] = np.sum(dk_u * dz_v - dk_v * dz_u)
    denom = np.sum(np.conj(w_alg) * w_alg)
    c_hat = complex(np.sum(np.conj(w_alg) * w_can) / denom)
    resid = float(
        np.max(np.abs(w_can - c_hat * w_alg)) / max(np.max(np.abs(w_can)), 1e-30)
    )
    return ReducedFormResult(
        c_hat=c_hat,
        residual=resid,
        n_pairs=trials,
        omega_canonical=w_can,
        omega_algebraic=w_alg,
    )


def _approach_sequence(bp: sp.BranchPoint, lat, angle: float, d0: float, count: int):
    scale = lat.guard_scale()
    return bp.z + d0 * scale * np.exp(1j * angle) * 0.25 ** np.arange(count)


def pairing_zero_check(
    pp: PhasePoint,
    bp: sp.BranchPoint,
    lat: el.LatticeParams,
    angle: float = 0.9,
    d0: float = 1e-3,
    count: int = 8,
) -> float:
    """Extrapolated |<C+, C>| along a curve approach to the branch point.

    The pairing vanishes like sqrt(z - z*) at a simple branch point; the
    sequence is extrapolated in sqrt(distance) and the limit magnitude is
    returned (0 for a genuine branch point).
    """
    vals = []
    k_prev = bp.k
    for z in _approach_sequence(bp, lat, angle, d0, count):
        fib = curve_fibre(pp, z, lat)
        # follow one of the two colliding branches by continuity in k,
        # otherwise the sqrt-branch sign flips and wrecks the extrapolation
        k_prev = fib[np.argmin(np.abs(fib - k_prev))]
        c = eigenvector(pp, z, k_prev, lat)
        cp = adjoint_eigenvector(pp, z, k_prev, lat)
        vals.append(pairing(cp, c))
    # ratio 1/4 in distance is ratio 1/2 in the local parameter sqrt(distance)
    return float(abs(sp.richardson(np.array(vals), ratio=0.5)))


def colliding_sheet_angle(
    pp: PhasePoint,
    bp: sp.BranchPoint,
    lat: el.LatticeParams,
    angle: float = 0.9,
    d0: float = 1e-3,
    count: int = 8,
) -> float:
    """Extrapolated Hermitian angle between the two colliding eigenvectors."""
    angles = []
    for z in _approach_sequence(bp, lat, angle, d0, count):
        fib = curve_fibre(pp, z, lat)
        order = np.argsort(np.abs(fib - bp.k))
        vs = []
        for k in fib[order[:2]]:
            v, _ = _right_null(_shifted(pp, z, k, lat))
            vs.append(v)
        cosang = min(1.0, abs(np.vdot(vs[0], vs[1])))
        angles.append(np.arccos(cosang))
    return float(abs(sp.richardson(np.array(angles, dtype=complex), ratio=0.5)))
