"""Rank-l coadjoint orbits of the spin matrix, Kirillov bracket and form.

The spin variables form an N x N complex matrix ``f`` carrying the Poisson
structure

    {f_ij, f_kl} = delta_jk * f_il - delta_il * f_kj

whose symplectic leaves are the orbits ``{g^-1 Lambda g}`` of a diagonal
``Lambda`` with ``l`` distinct nonzero eigenvalues.  The dynamical constraint
fixes every diagonal entry, ``f_ii = 2``, which forces ``sum(lambdas) = 2N``.

Everything here is complex-holomorphic: no reality condition is imposed and
no conjugations appear in any pairing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "OrbitSpec",
    "OrbitError",
    "ConstraintSolveError",
    "sample_orbit",
    "spin_matrix_residuals",
    "kirillov_bracket",
    "hamiltonian_flow_direction",
    "kirillov_form",
    "kirillov_form_diag",
    "orbit_dimension",
    "casimirs",
    "numerical_rank",
    "adjoint_map",
    "orbit_tangent_basis",
    "solve_generator",
    "make_rng",
]

DIAGONAL_VALUE = 2.0
CONSTRAINT_TOL = 1e-12
RANK_RTOL = 1e-9


class OrbitError(Exception):
    pass


class ConstraintSolveError(OrbitError):
    """Newton correction for the diagonal constraint did not converge."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based PRNG (Philox4x32-10) so runs replay identically."""
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass(frozen=True)
class OrbitSpec:
    """Casimir data of an orbit: size N, rank l, nonzero eigenvalues."""

    N: int
    l: int
    lambdas: tuple

    def __post_init__(self):
        if not 1 <= self.l <= self.N - 1:
            raise ValueError(f"need 1 <= l <= N-1, got N={self.N}, l={self.l}")
        lam = tuple(complex(v) for v in self.lambdas)
        if len(lam) != self.l:
            raise ValueError("need exactly l eigenvalues")
        if any(abs(v) < 1e-12 for v in lam):
            raise ValueError("eigenvalues must be nonzero")
        for i in range(self.l):
            for j in range(i + 1, self.l):
                if abs(lam[i] - lam[j]) < 1e-10:
                    raise ValueError("eigenvalues must be pairwise distinct")
        if abs(sum(lam) - DIAGONAL_VALUE * self.N) > 1e-9:
            raise ValueError(
                f"sum(lambdas) must equal {DIAGONAL_VALUE}*N = {DIAGONAL_VALUE * self.N}"
            )
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def default(cls, N: int, l: int) -> "OrbitSpec":
        """Evenly spread eigenvalues summing to 2N."""
        lam = [DIAGONAL_VALUE * N / l + (a - (l - 1) / 2.0) for a in range(l)]
        return cls(N=N, l=l, lambdas=tuple(lam))

    def full_spectrum(self) -> np.ndarray:
        """All N eigenvalues of f, including the N-l zeros."""
        return np.concatenate([np.asarray(self.lambdas), np.zeros(self.N - self.l)])


def _newton_directions(spec: OrbitSpec):
    """Index pairs (a, b) with distinct Lambda eigenvalues; these span ad_Lambda."""
    lam_full = np.concatenate(
        [np.asarray(spec.lambdas), np.zeros(spec.N - spec.l)]
    )
    pairs = [
        (a, b)
        for a in range(spec.N)
        for b in range(spec.N)
        if a != b and abs(lam_full[a] - lam_full[b]) > 1e-10
    ]
    return pairs, lam_full


def sample_orbit(
    spec: OrbitSpec,
    seed: int,
    constraint_tol: float = CONSTRAINT_TOL,
    max_attempts: int = 8,
) -> np.ndarray:
    """Draw f = g^-1 Lambda g with f_ii = 2, deterministic in the seed.

    A random invertible g is corrected by Newton iteration in the group
    directions that move Lambda, which keeps the result exactly on the orbit
    while driving the diagonal onto the constraint.
    """
    rng = make_rng(seed)
    pairs, lam_full = _newton_directions(spec)
    Lam = np.diag(lam_full.astype(complex))
    n = spec.N
    for attempt in range(max_attempts):
        g = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        try:
            f = _newton_diagonal(g, Lam, pairs, constraint_tol)
        except ConstraintSolveError:
            continue
        return f
    raise ConstraintSolveError(
        f"no admissible f after {max_attempts} attempts (spec={spec})"
    )


def orbit_from_gauge(
    spec: OrbitSpec, g: np.ndarray, constraint_tol: float = CONSTRAINT_TOL
) -> np.ndarray:
    """Diagonal-constrained orbit point seeded from a given gauge matrix g.

    Useful for differentiating along Casimir directions: nearby lambda data
    with the same g gives nearby points f(lambda).
    """
    pairs, lam_full = _newton_directions(spec)
    Lam = np.diag(lam_full.astype(complex))
    return _newton_diagonal(np.asarray(g, dtype=complex), Lam, pairs, constraint_tol)


def _newton_diagonal(g, Lam, pairs, tol, max_iter=60):
    n = g.shape[0]
    lam_diag = np.diag(Lam)
    for _ in range(max_iter):
        ginv = np.linalg.inv(g)
        f = ginv @ Lam @ g
        r = np.diag(f) - DIAGONAL_VALUE
        rnorm = np.max(np.abs(r))
        if rnorm < tol:
            return f
        # columns: d(diag f) along g -> (I + eps E_ab) g
        J = np.empty((n, len(pairs)), dtype=complex)
        for col, (a, b) in enumerate(pairs):
            J[:, col] = (lam_diag[a] - lam_diag[b]) * ginv[:, a] * g[b, :]
        xi, *_ = np.linalg.lstsq(J, -r, rcond=None)
        step = 1.0
        for _ in range(12):
            X = np.zeros((n, n), dtype=complex)
            for col, (a, b) in enumerate(pairs):
                X[a, b] = step * xi[col]
            g_new = (np.eye(n) + X) @ g
            f_new = np.linalg.inv(g_new) @ Lam @ g_new
            if np.max(np.abs(np.diag(f_new) - DIAGONAL_VALUE)) < rnorm or rnorm < 1e-10:
                g = g_new
                break
            step *= 0.5
        else:
            raise ConstraintSolveError("diagonal Newton stalled")
    raise ConstraintSolveError("diagonal Newton did not converge")


def numerical_rank(m: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank with singular values below rtol * s_max counted as zero."""
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def spin_matrix_residuals(f: np.ndarray, spec: OrbitSpec) -> dict:
    """Deviations of f from the orbit invariants (diagonal, rank, spectrum)."""
    diag_dev = float(np.max(np.abs(np.diag(f) - DIAGONAL_VALUE)))
    rank = numerical_rank(f)
    eig = np.linalg.eigvals(f)
    target = spec.full_spectrum()
    cost = np.abs(eig[:, None] - target[None, :])
    rows, cols = linear_sum_assignment(cost)
    eig_dev = float(np.max(cost[rows, cols]))
    return {"diag": diag_dev, "rank": rank, "eig": eig_dev}


def kirillov_bracket(grad_f: np.ndarray, grad_g: np.ndarray, f: np.ndarray) -> complex:
    """{F, G}(f) assembled from the elementary brackets by bilinearity.

    With A = dF/df and B = dG/df (entrywise partials), the contraction of
    {f_ij, f_kl} = delta_jk f_il - delta_il f_kj gives sum(f * (AB - BA)).
    """
    a = np.asarray(grad_f)
    b = np.asarray(grad_g)
    return complex(np.sum(f * (a @ b - b @ a)))


def hamiltonian_flow_direction(grad_h: np.ndarray, f: np.ndarray) -> np.ndarray:
    """df/dt = {H, f} = [grad_h^T, f] for the bracket above."""
    a = np.asarray(grad_h).T
    return a @ f - f @ a


def kirillov_form(f: np.ndarray, x_gen: np.ndarray, y_gen: np.ndarray) -> complex:
    """Orbit symplectic form on tangents [f, X], [f, Y]: Tr(f [X, Y])."""
    return complex(np.trace(f @ (x_gen @ y_gen - y_gen @ x_gen)))


def kirillov_form_diag(
    f: np.ndarray, u_tan: np.ndarray, v_tan: np.ndarray, pair_tol: float = 1e-8
) -> complex:
    """The eigenbasis expression sum_{i,j} df_ij ^ df_ji / (lambda_i - lambda_j).

    Evaluated on tangent vectors U, V after diagonalizing f.  The wedge is
    normalized so that the value coincides with Tr(f[X, Y]); with the ordered
    double sum written out this means a factor -1/2 in front.
    """
    w, s = np.linalg.eig(f)
    sinv = np.linalg.inv(s)
    ut = sinv @ u_tan @ s
    vt = sinv @ v_tan @ s
    scale = max(1.0, float(np.max(np.abs(w))))
    diff = w[:, None] - w[None, :]
    mask = np.abs(diff) > pair_tol * scale
    total = 0.0 + 0.0j
    n = f.shape[0]
    for i in range(n):
        for j in range(n):
            if mask[i, j]:
                total += (ut[i, j] * vt[j, i] - vt[i, j] * ut[j, i]) / diff[i, j]
    return complex(-0.5 * total)


def orbit_dimension(spec: OrbitSpec) -> int:
    return 2 * spec.N * spec.l - spec.l**2 - spec.l


def casimirs(f: np.ndarray, max_m: int) -> list:
    """[Tr f, Tr f^2, ..., Tr f^max_m]; central for the Kirillov bracket."""
    out = []
    power = np.eye(f.shape[0], dtype=complex)
    for _ in range(max_m):
        power = power @ f
        out.append(complex(np.trace(power)))
    return out


def adjoint_map(f: np.ndarray) -> np.ndarray:
    """Matrix of X -> [f, X] acting on row-major vectorized matrices."""
    n = f.shape[0]
    eye = np.eye(n)
    return np.kron(f, eye) - np.kron(eye, f.T)


def orbit_tangent_basis(
    f: np.ndarray, zero_diagonal: bool = False, rtol: float = RANK_RTOL
):
    """Orthonormal basis of the orbit tangent space at f, as a list of matrices.

    With ``zero_diagonal`` the basis is restricted to tangents preserving the
    diagonal moment (U_ii = 0), which drops N-1 dimensions.
    """
    n = f.shape[0]
    ad = adjoint_map(f)
    u, s, _ = np.linalg.svd(ad)
    dim = int(np.count_nonzero(s > rtol * s[0]))
    basis = u[:, :dim]
    if zero_diagonal:
        diag_rows = basis.reshape(n, n, dim)[np.arange(n), np.arange(n), :]
        _, sd, vh = np.linalg.svd(diag_rows)
        rank_d = int(np.count_nonzero(sd > max(sd[0], 1.0) * 1e-12)) if sd.size else 0
        null = vh[rank_d:].conj().T
        basis = basis @ null
    return [basis[:, k].reshape(n, n) for k in range(basis.shape[1])]


def solve_generator(f: np.ndarray, u_tan: np.ndarray) -> np.ndarray:
    """A generator X with [f, X] = U (least-squares; defined up to centralizer)."""
    n = f.shape[0]
    ad = adjoint_map(f)
    x, res, *_ = np.linalg.lstsq(ad, u_tan.reshape(-1), rcond=None)
    x_mat = x.reshape(n, n)
    resid = np.linalg.norm((f @ x_mat - x_mat @ f) - u_tan)
    if resid > 1e-8 * max(1.0, np.linalg.norm(u_tan)):
        warnings.warn(f"generator solve residual {resid:.2e}: U not tangent?")
    return x_mat
