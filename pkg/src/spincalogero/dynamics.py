"""Hamiltonian, equations of motion, time integration, conservation audits.

The Hamiltonian is

    H = 1/2 sum_i p_i^2 - 1/2 sum_{i != j} f_ij f_ji V(x_i - x_j)

with V(x) = 1/x^2 for the rational variant and V(x) = wp(x) for the elliptic
one (the latter is what Tr L(z)^2 produces once the z-dependent Casimir piece
proportional to wp(z) is discarded; the z-independence of that subtraction is
exercised in the tests).

The flow is generated directly from H through the canonical bracket
{p_i, x_j} = delta_ij on (x, p) and the Kirillov bracket on f; no second Lax
matrix is postulated.  In closed form

    xdot_i = p_i
    pdot_i = sum_{j != i} f_ij f_ji V'(x_i - x_j)
    fdot   = [A, f],   A_ij = -f_ij V(x_i - x_j)  (i != j),  A_ii = 0

and fdot_ii = 0 identically, so the moment constraint f_ii = 2 is preserved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import linear_sum_assignment

from . import elliptic as el
from . import orbits as ob

__all__ = [
    "COLLISION_GUARD",
    "CollisionError",
    "PhasePoint",
    "IntegratorConfig",
    "Trajectory",
    "pair_potential",
    "hamiltonian",
    "hamiltonian_f_gradient",
    "eom",
    "integrate",
    "conservation_report",
    "trajectory_to_csv",
]

#: minimal particle separation, in reduced lattice coordinates
COLLISION_GUARD = 1e-6


class CollisionError(Exception):
    """Two particles closer than the collision guard (or on the lattice)."""


@dataclass(frozen=True)
class PhasePoint:
    """Positions x, momenta p, spin matrix f; the dynamical state."""

    x: np.ndarray
    p: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=complex).copy())
        object.__setattr__(self, "p", np.asarray(self.p, dtype=complex).copy())
        object.__setattr__(self, "f", np.asarray(self.f, dtype=complex).copy())
        n = self.x.size
        if self.p.size != n or self.f.shape != (n, n):
            raise ValueError("inconsistent shapes for x, p, f")

    @property
    def n(self) -> int:
        return self.x.size

    def separations(self) -> np.ndarray:
        """Strictly upper-triangular differences x_i - x_j."""
        n = self.n
        i, j = np.triu_indices(n, k=1)
        return self.x[i] - self.x[j]

    def check_separation(self, lat: el.LatticeParams, guard: float = COLLISION_GUARD):
        d = self.separations()
        scale = lat.guard_scale()
        if np.any(np.abs(d) < guard * scale):
            raise CollisionError("particles closer than the collision guard")
        if lat.kind == "elliptic":
            _, _, _, frac = el._reduce_cell(d, lat)
            if np.any(frac < guard):
                raise CollisionError("particle difference too close to the lattice")


def pair_potential(dx, lat: el.LatticeParams, variant: str):
    """V(dx) and V'(dx) for the chosen variant."""
    dx = np.asarray(dx, dtype=complex)
    if variant == "rational":
        return dx**-2.0, -2.0 * dx**-3.0
    if variant == "elliptic":
        return el.wp(dx, lat), el.wp_dz(dx, lat)
    raise ValueError(f"unknown variant {variant!r}")


def _coupling_and_potential(pp: PhasePoint, lat, variant):
    n = pp.n
    dx = pp.x[:, None] - pp.x[None, :]
    off = ~np.eye(n, dtype=bool)
    v = np.zeros((n, n), dtype=complex)
    vp = np.zeros((n, n), dtype=complex)
    v[off], vp[off] = pair_potential(dx[off], lat, variant)
    return dx, off, v, vp


def hamiltonian(pp: PhasePoint, lat: el.LatticeParams, variant: str = "elliptic") -> complex:
    pp.check_separation(lat)
    _, off, v, _ = _coupling_and_potential(pp, lat, variant)
    kinetic = 0.5 * np.sum(pp.p**2)
    interaction = -0.5 * np.sum((pp.f * pp.f.T * v)[off])
    return complex(kinetic + interaction)


def hamiltonian_f_gradient(pp: PhasePoint, lat, variant: str) -> np.ndarray:
    """Entrywise dH/df_ij; vanishes on the diagonal."""
    _, off, v, _ = _coupling_and_potential(pp, lat, variant)
    grad = np.zeros_like(pp.f)
    grad[off] = -(pp.f.T * v)[off]
    return grad


def eom(pp: PhasePoint, lat: el.LatticeParams, variant: str = "elliptic"):
    """Time derivatives (xdot, pdot, fdot) of the bracket-generated flow."""
    pp.check_separation(lat)
    _, off, v, vp = _coupling_and_potential(pp, lat, variant)
    xdot = pp.p.copy()
    pdot = np.sum(np.where(off, pp.f * pp.f.T * vp, 0.0), axis=1)
    a = np.where(off, -pp.f * v, 0.0)
    fdot = a @ pp.f - pp.f @ a
    return xdot, pdot, fdot


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-10
    atol: float = 1e-12
    method: str = "DOP853"
    t_final: float = 10.0
    n_samples: int = 41
    max_step: float = np.inf

    def sample_times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_samples)


@dataclass
class Trajectory:
    times: np.ndarray
    states: List[PhasePoint]
    stats: dict = field(default_factory=dict)
    failed: bool = False
    failure_reason: str = ""

    def __len__(self):
        return len(self.states)


def _pack(pp: PhasePoint) -> np.ndarray:
    z = np.concatenate([pp.x, pp.p, pp.f.reshape(-1)])
    return z.view(np.float64)


def _unpack(y: np.ndarray, n: int) -> PhasePoint:
    z = np.ascontiguousarray(y).view(np.complex128)
    return PhasePoint(x=z[:n], p=z[n : 2 * n], f=z[2 * n :].reshape(n, n))


def integrate(
    pp0: PhasePoint,
    lat: el.LatticeParams,
    cfg: IntegratorConfig = IntegratorConfig(),
    variant: str = "elliptic",
) -> Trajectory:
    """Adaptive explicit integration (DOP853, order 8) with dense sampling.

    Integrates segment by segment between the requested sample times so a
    collision mid-run still returns the partial trajectory, flagged failed.
    """
    n = pp0.n
    times = cfg.sample_times()
    states = [pp0]
    recorded = [times[0]]
    nfev = 0
    failed = False
    reason = ""

    def rhs(t, y):
        pp = _unpack(y, n)
        xd, pd, fd = eom(pp, lat, variant)
        return np.concatenate([xd, pd, fd.reshape(-1)]).view(np.float64)

    y = _pack(pp0)
    for t0, t1 in zip(times[:-1], times[1:]):
        try:
            sol = solve_ivp(
                rhs,
                (t0, t1),
                y,
                method=cfg.method,
                rtol=cfg.rtol,
                atol=cfg.atol,
                max_step=cfg.max_step,
                dense_output=False,
            )
        except (CollisionError, el.EllipticError) as exc:
            failed, reason = True, f"{type(exc).__name__}: {exc}"
            break
        nfev += sol.nfev
        if not sol.success:
            failed, reason = True, f"integrator: {sol.message}"
            break
        y = sol.y[:, -1]
        states.append(_unpack(y, n))
        recorded.append(t1)
    stats = {
        "nfev": int(nfev),
        "n_segments": len(recorded) - 1,
        "rtol": cfg.rtol,
        "atol": cfg.atol,
        "method": cfg.method,
    }
    return Trajectory(
        times=np.asarray(recorded),
        states=states,
        stats=stats,
        failed=failed,
        failure_reason=reason,
    )


def _matched_eigvals(f: np.ndarray, ref: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvals(f)
    cost = np.abs(eig[:, None] - ref[None, :])
    rows, cols = linear_sum_assignment(cost)
    out = np.empty_like(ref)
    out[cols] = eig[rows]
    return out


def conservation_report(
    traj: Trajectory,
    lat: el.LatticeParams,
    z_grid: Sequence[complex],
    variant: str = "elliptic",
) -> dict:
    """Max relative drift of H, f_ii, eig(f) and the curve coefficients.

    Drifts are |q(t) - q(0)| / max(|q(0)|, 1), maximized over the trajectory
    and, for gridded quantities, over the grid.
    """
    from .spectral import char_poly

    z_grid = np.asarray(list(z_grid), dtype=complex)
    first = traj.states[0]
    h0 = hamiltonian(first, lat, variant)
    diag0 = np.diag(first.f).copy()
    eig0 = np.linalg.eigvals(first.f)
    coeff0 = np.array([char_poly(first, z, lat) for z in z_grid])  # (M, N+1)

    def rel(a, b):
        return np.abs(a - b) / np.maximum(np.abs(b), 1.0)

    drift_h = 0.0
    drift_diag = 0.0
    drift_eig = 0.0
    drift_coeff = np.zeros_like(coeff0, dtype=float)
    for pp in traj.states[1:]:
        drift_h = max(drift_h, float(rel(hamiltonian(pp, lat, variant), h0)))
        drift_diag = max(drift_diag, float(np.max(rel(np.diag(pp.f), diag0))))
        drift_eig = max(
            drift_eig, float(np.max(rel(_matched_eigvals(pp.f, eig0), eig0)))
        )
        coeff = np.array([char_poly(pp, z, lat) for z in z_grid])
        drift_coeff = np.maximum(drift_coeff, rel(coeff, coeff0))
    return {
        "H": drift_h,
        "f_diag": drift_diag,
        "f_eigenvalues": drift_eig,
        "char_poly_max": float(np.max(drift_coeff)) if drift_coeff.size else 0.0,
        "char_poly_by_degree": [float(v) for v in np.max(drift_coeff, axis=0)],
        "n_states": len(traj.states),
        "t_final": float(traj.times[-1]),
    }


def _fmt(v: float) -> str:
    return repr(float(v))


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """CSV columns: t, Re/Im of each x_i, p_i, f_ij (row-major)."""
    n = traj.states[0].n
    cols = ["t"]
    for name, count in (("x", n), ("p", n)):
        for i in range(count):
            cols += [f"re_{name}{i}", f"im_{name}{i}"]
    for i in range(n):
        for j in range(n):
            cols += [f"re_f{i}{j}", f"im_f{i}{j}"]
    lines = [",".join(cols)]
    for t, pp in zip(traj.times, traj.states):
        vals = [_fmt(t)]
        for arr in (pp.x, pp.p, pp.f.reshape(-1)):
            for v in arr:
                vals += [_fmt(v.real), _fmt(v.imag)]
        lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
