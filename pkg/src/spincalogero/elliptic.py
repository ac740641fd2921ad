r"""Weierstrass elliptic functions and the spectral-parameter propagator Phi.

Conventions used throughout the package:

* the period lattice is generated by ``2*omega1`` and ``2*omega2`` with
  ``Im(omega2/omega1) > 0``;
* ``eta1 = zeta(omega1)``, ``eta2 = zeta(omega2)`` are the quasi-period
  constants, satisfying ``eta1*omega2 - eta2*omega1 = i*pi/2``;
* ``sigma``, ``zeta``, ``wp`` are the standard Weierstrass functions,
  ``wp = -zeta'``, ``zeta = sigma'/sigma``;
* the propagator entering the Lax matrix is

      phi(x, z) = sigma(z - x) / (sigma(z) * sigma(x)) * exp(zeta(z) * x)

  which is elliptic in ``z`` and pseudo-periodic in ``x``, and satisfies
  ``phi(x, z) * phi(-x, z) = wp(z) - wp(x)``.

Evaluation strategy: arguments are reduced to the fundamental cell
(coefficients in ``[-1/2, 1/2)`` with respect to the periods) and the cell
values are computed from Jacobi theta q-series, which converge geometrically.
Truncated lattice sums are deliberately *not* used here; they serve as the
independent oracle in the test suite.

Degenerate lattices (one or both periods at infinity) are supported through
dedicated closed forms (``sin``/``cot`` for the trigonometric case, powers of
``1/z`` for the rational case) selected by ``LatticeParams.kind``.

All functions are pure, accept scalars or ndarrays, and work in complex
double precision.  ``precision_target`` controls series truncation depth; an
extended-precision backend can be substituted by reimplementing this module's
functions against the same signatures.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as _dc_replace
from typing import Optional

import numpy as np

__all__ = [
    "EllipticError",
    "PoleProximityError",
    "PrecisionError",
    "ExponentOverflowError",
    "LatticeParams",
    "sigma",
    "zeta",
    "wp",
    "wp_dz",
    "phi",
    "phi_dx",
    "phi_gauge",
]

#: distance from a lattice point, in reduced (period) coordinates, below
#: which pole-bearing evaluations refuse to proceed
GUARD_RADIUS = 1e-8

#: largest |Re| we allow in an exponent before calling the value unrepresentable
EXP_BUDGET = 700.0


class EllipticError(Exception):
    """Base class for elliptic-kernel failures."""


class PoleProximityError(EllipticError):
    """Argument within the guard radius of a lattice point."""


class PrecisionError(EllipticError):
    """Series truncation cannot meet the requested precision target."""


class ExponentOverflowError(EllipticError):
    """An exponential factor exceeds the double-precision exponent budget."""


def _theta_nmax(im_tau: float, precision_target: float) -> int:
    # terms decay like exp(-pi*Im(tau)*(n^2 - 1/4)) after cell reduction
    budget = -np.log(min(precision_target, 1e-12) * 1e-4)
    n = int(np.ceil(np.sqrt(budget / (np.pi * im_tau) + 0.25))) + 2
    if n > 200:
        raise PrecisionError(
            f"theta series too slow for Im(tau)={im_tau:.3g}; "
            "choose a less degenerate period basis"
        )
    return n


def _theta1_suite(v, q: complex, nmax: int):
    """theta1 and its first three v-derivatives at v, as broadcast arrays."""
    v = np.asarray(v, dtype=complex)
    n = np.arange(nmax)
    a = 2 * n + 1
    coeff = (-1.0) ** n * q ** ((n + 0.5) ** 2)
    av = a * v[..., None]
    s = np.sin(av)
    c = np.cos(av)
    th1 = 2.0 * (coeff * s).sum(axis=-1)
    th1p = 2.0 * (coeff * a * c).sum(axis=-1)
    th1pp = -2.0 * (coeff * a**2 * s).sum(axis=-1)
    th1ppp = -2.0 * (coeff * a**3 * c).sum(axis=-1)
    return th1, th1p, th1pp, th1ppp


def _theta1_consts(q: complex, nmax: int):
    """theta1'(0) and theta1'''(0)."""
    n = np.arange(nmax)
    a = 2 * n + 1
    coeff = (-1.0) ** n * q ** ((n + 0.5) ** 2)
    return 2.0 * (coeff * a).sum(), -2.0 * (coeff * a**3).sum()


@dataclass(frozen=True)
class LatticeParams:
    """Half-periods and derived constants of a Weierstrass lattice.

    Instances are immutable and safe to share across threads.  Use the
    factory methods; the raw constructor does not validate consistency.
    """

    omega1: Optional[complex]
    omega2: Optional[complex]
    eta1: complex
    eta2: Optional[complex]
    g2: complex
    g3: complex
    precision_target: float = 1e-12
    kind: str = "elliptic"
    q: complex = 0j
    nmax: int = 0

    @classmethod
    def from_half_periods(
        cls, omega1: complex, omega2: complex, precision_target: float = 1e-12
    ) -> "LatticeParams":
        omega1 = complex(omega1)
        omega2 = complex(omega2)
        tau = omega2 / omega1
        if not tau.imag > 0:
            raise ValueError("need Im(omega2/omega1) > 0")
        nmax = _theta_nmax(tau.imag, precision_target)
        q = np.exp(1j * np.pi * tau)
        th1p0, th1ppp0 = _theta1_consts(q, nmax)
        eta1 = -(np.pi**2) / (12.0 * omega1) * th1ppp0 / th1p0
        provisional = cls(
            omega1=omega1,
            omega2=omega2,
            eta1=complex(eta1),
            eta2=0j,
            g2=0j,
            g3=0j,
            precision_target=precision_target,
            kind="elliptic",
            q=complex(q),
            nmax=nmax,
        )
        # eta2 from zeta(omega2); the Legendre relation then becomes a testable
        # consistency statement instead of a definition
        eta2 = zeta(omega2, provisional)
        lat = _replace(provisional, eta2=complex(eta2))
        e1 = wp(omega1, lat)
        e2 = wp(omega1 + omega2, lat)
        e3 = wp(omega2, lat)
        g2 = 2.0 * (e1**2 + e2**2 + e3**2)
        g3 = 4.0 * e1 * e2 * e3
        return _replace(lat, g2=complex(g2), g3=complex(g3))

    @classmethod
    def rational(cls, precision_target: float = 1e-12) -> "LatticeParams":
        """Both periods at infinity: sigma=z, zeta=1/z, wp=1/z^2."""
        return cls(
            omega1=None,
            omega2=None,
            eta1=0j,
            eta2=None,
            g2=0j,
            g3=0j,
            precision_target=precision_target,
            kind="rational",
        )

    @classmethod
    def trigonometric(
        cls, omega1: complex, precision_target: float = 1e-12
    ) -> "LatticeParams":
        """omega2 at infinity: one real period 2*omega1 survives."""
        omega1 = complex(omega1)
        a = np.pi / (2.0 * omega1)
        return cls(
            omega1=omega1,
            omega2=None,
            eta1=complex(np.pi**2 / (12.0 * omega1)),
            eta2=None,
            g2=complex(4.0 * a**4 / 3.0),
            g3=complex(8.0 * a**6 / 27.0),
            precision_target=precision_target,
            kind="trigonometric",
        )

    @property
    def tau(self) -> complex:
        return self.omega2 / self.omega1

    def guard_scale(self) -> float:
        """Absolute length corresponding to one unit of reduced coordinates."""
        if self.kind == "rational":
            return 1.0
        return abs(2.0 * self.omega1)


def _replace(lat: LatticeParams, **kw) -> LatticeParams:
    return _dc_replace(lat, **kw)


def _reduce_cell(z, lat: LatticeParams):
    """Split z = z0 + m*2omega1 + n*2omega2 with cell coefficients in [-1/2, 1/2)."""
    z = np.asarray(z, dtype=complex)
    t1 = 2.0 * lat.omega1
    t2 = 2.0 * lat.omega2
    det = t1.real * t2.imag - t2.real * t1.imag
    s = (t2.imag * z.real - t2.real * z.imag) / det
    t = (-t1.imag * z.real + t1.real * z.imag) / det
    m = np.round(s)
    n = np.round(t)
    z0 = z - m * t1 - n * t2
    frac = np.hypot(s - m, t - n)
    return z0, m, n, frac


def _check_guard(frac, what: str):
    frac = np.asarray(frac)
    bad = (frac < GUARD_RADIUS) & (frac > 0)
    if np.any(bad):
        raise PoleProximityError(
            f"{what}: {int(np.count_nonzero(bad))} argument(s) within guard "
            f"radius {GUARD_RADIUS:g} of a lattice point"
        )


def _trig_reduce(z, lat: LatticeParams):
    z = np.asarray(z, dtype=complex)
    t1 = 2.0 * lat.omega1
    s = np.real(z / t1)
    m = np.round(s)
    frac = np.abs(z / t1 - m)
    return m, frac


def sigma(z, lat: LatticeParams):
    """Weierstrass sigma.  Odd entire function, simple zeros on the lattice."""
    z = np.asarray(z, dtype=complex)
    if lat.kind == "rational":
        out = z
        return out[()] if out.ndim == 0 else out
    if lat.kind == "trigonometric":
        a = np.pi / (2.0 * lat.omega1)
        _overflow_check(np.abs(np.imag(a * z)), "sigma")
        out = np.sin(a * z) / a * np.exp(a**2 * z**2 / 6.0)
        return out[()] if out.ndim == 0 else out
    z0, m, n, frac = _reduce_cell(z, lat)
    # sigma is entire: lattice points are honest zeros, and near-lattice
    # arguments evaluate accurately (no guard here, unlike zeta/wp)
    on_lattice = frac == 0
    v = np.pi * z0 / (2.0 * lat.omega1)
    th1, _, _, _ = _theta1_suite(v, lat.q, lat.nmax)
    th1p0, _ = _theta1_consts(lat.q, lat.nmax)
    cell = (2.0 * lat.omega1 / np.pi) * np.exp(
        lat.eta1 * z0**2 / (2.0 * lat.omega1)
    ) * th1 / th1p0
    expo = (2 * m * lat.eta1 + 2 * n * lat.eta2) * (
        z0 + m * lat.omega1 + n * lat.omega2
    )
    _overflow_check(np.abs(np.real(expo)), "sigma quasi-period factor")
    out = np.where(
        on_lattice,
        0.0,
        (-1.0) ** (m + n + m * n) * np.exp(expo) * cell,
    )
    return out[()] if out.ndim == 0 else out


def zeta(z, lat: LatticeParams):
    """Weierstrass zeta = sigma'/sigma.  Odd, simple poles on the lattice."""
    z = np.asarray(z, dtype=complex)
    if lat.kind == "rational":
        _check_guard(np.abs(z), "zeta")
        if np.any(z == 0):
            raise PoleProximityError("zeta: argument at the origin")
        out = 1.0 / z
        return out[()] if out.ndim == 0 else out
    if lat.kind == "trigonometric":
        a = np.pi / (2.0 * lat.omega1)
        m, frac = _trig_reduce(z, lat)
        _check_guard(frac, "zeta")
        if np.any(frac == 0):
            raise PoleProximityError("zeta: argument on the lattice")
        _overflow_check(np.abs(np.imag(a * z)), "zeta")
        out = a / np.tan(a * z) + a**2 * z / 3.0
        return out[()] if out.ndim == 0 else out
    z0, m, n, frac = _reduce_cell(z, lat)
    _check_guard(frac, "zeta")
    if np.any(frac == 0):
        raise PoleProximityError("zeta: argument on the lattice")
    v = np.pi * z0 / (2.0 * lat.omega1)
    th1, th1p, _, _ = _theta1_suite(v, lat.q, lat.nmax)
    cell = lat.eta1 * z0 / lat.omega1 + (np.pi / (2.0 * lat.omega1)) * th1p / th1
    out = cell + 2 * m * lat.eta1 + 2 * n * lat.eta2
    return out[()] if out.ndim == 0 else out


def wp(z, lat: LatticeParams):
    """Weierstrass p-function, wp = -zeta'.  Even, double poles on the lattice."""
    z = np.asarray(z, dtype=complex)
    if lat.kind == "rational":
        _check_guard(np.abs(z), "wp")
        if np.any(z == 0):
            raise PoleProximityError("wp: argument at the origin")
        out = z**-2.0
        return out[()] if out.ndim == 0 else out
    if lat.kind == "trigonometric":
        a = np.pi / (2.0 * lat.omega1)
        m, frac = _trig_reduce(z, lat)
        _check_guard(frac, "wp")
        if np.any(frac == 0):
            raise PoleProximityError("wp: argument on the lattice")
        _overflow_check(np.abs(np.imag(a * z)), "wp")
        out = a**2 / np.sin(a * z) ** 2 - a**2 / 3.0
        return out[()] if out.ndim == 0 else out
    z0, m, n, frac = _reduce_cell(z, lat)
    _check_guard(frac, "wp")
    if np.any(frac == 0):
        raise PoleProximityError("wp: argument on the lattice")
    v = np.pi * z0 / (2.0 * lat.omega1)
    th1, th1p, th1pp, _ = _theta1_suite(v, lat.q, lat.nmax)
    r = th1p / th1
    out = -lat.eta1 / lat.omega1 - (np.pi / (2.0 * lat.omega1)) ** 2 * (
        th1pp / th1 - r**2
    )
    return out[()] if out.ndim == 0 else out


def wp_dz(z, lat: LatticeParams):
    """Derivative wp'.  Odd, triple poles on the lattice."""
    z = np.asarray(z, dtype=complex)
    if lat.kind == "rational":
        _check_guard(np.abs(z), "wp_dz")
        if np.any(z == 0):
            raise PoleProximityError("wp_dz: argument at the origin")
        out = -2.0 * z**-3.0
        return out[()] if out.ndim == 0 else out
    if lat.kind == "trigonometric":
        a = np.pi / (2.0 * lat.omega1)
        m, frac = _trig_reduce(z, lat)
        _check_guard(frac, "wp_dz")
        if np.any(frac == 0):
            raise PoleProximityError("wp_dz: argument on the lattice")
        _overflow_check(np.abs(np.imag(a * z)), "wp_dz")
        out = -2.0 * a**3 * np.cos(a * z) / np.sin(a * z) ** 3
        return out[()] if out.ndim == 0 else out
    z0, m, n, frac = _reduce_cell(z, lat)
    _check_guard(frac, "wp_dz")
    if np.any(frac == 0):
        raise PoleProximityError("wp_dz: argument on the lattice")
    v = np.pi * z0 / (2.0 * lat.omega1)
    th1, th1p, th1pp, th1ppp = _theta1_suite(v, lat.q, lat.nmax)
    r = th1p / th1
    out = -((np.pi / (2.0 * lat.omega1)) ** 3) * (
        th1ppp / th1 - 3.0 * r * th1pp / th1 + 2.0 * r**3
    )
    return out[()] if out.ndim == 0 else out


def _overflow_check(mag, what: str):
    mag = np.asarray(mag)
    if np.any(mag > EXP_BUDGET):
        raise ExponentOverflowError(
            f"{what}: exponent magnitude {float(np.max(mag)):.3g} exceeds budget"
        )


def _lattice_guard(x, lat: LatticeParams, what: str):
    """Refuse arguments that sit in a pole-bearing position on the lattice."""
    x = np.asarray(x, dtype=complex)
    if lat.kind == "rational":
        _check_guard(np.abs(x), what)
        if np.any(x == 0):
            raise PoleProximityError(f"{what}: argument at the origin")
        return
    if lat.kind == "trigonometric":
        _, frac = _trig_reduce(x, lat)
    else:
        _, _, _, frac = _reduce_cell(x, lat)
    _check_guard(frac, what)
    if np.any(frac == 0):
        raise PoleProximityError(f"{what}: argument on the lattice")


def phi(x, z, lat: LatticeParams):
    """Propagator phi(x, z) = sigma(z-x)/(sigma(z)sigma(x)) * exp(zeta(z)x).

    Elliptic in z; under x -> x + 2*omega_a the value picks up the factor
    exp(2*(omega_a*zeta(z) - eta_a*z)) (pseudo-periodicity; see tests).
    Zeros of the numerator (z - x on the lattice) are regular values; poles
    of the denominator (x or z on the lattice) are guarded.
    """
    x = np.asarray(x, dtype=complex)
    z = np.asarray(z, dtype=complex)
    _lattice_guard(x, lat, "phi(x)")
    zx = zeta(z, lat) * x
    _overflow_check(np.abs(np.real(zx)), "phi exponential")
    out = sigma(z - x, lat) / (sigma(z, lat) * sigma(x, lat)) * np.exp(zx)
    return out[()] if np.ndim(out) == 0 else out


def phi_gauge(x, z, lat: LatticeParams):
    """phi(x, z) * exp(-x/z): the gauge-regularized propagator, finite as z -> 0."""
    x = np.asarray(x, dtype=complex)
    z = np.asarray(z, dtype=complex)
    _lattice_guard(x, lat, "phi_gauge(x)")
    expo = (zeta(z, lat) - 1.0 / z) * x
    _overflow_check(np.abs(np.real(expo)), "phi_gauge exponential")
    out = sigma(z - x, lat) / (sigma(z, lat) * sigma(x, lat)) * np.exp(expo)
    return out[()] if np.ndim(out) == 0 else out


def phi_dx(x, z, lat: LatticeParams):
    """d/dx of phi(x, z).

    Logarithmic differentiation of the sigma-quotient definition gives

        phi_dx(x, z) = phi(x, z) * (zeta(z) - zeta(z - x) - zeta(x)).

    The bracket is the closed form that matches the definition of phi used
    here; the finite-difference test in the suite pins this down.
    """
    x = np.asarray(x, dtype=complex)
    z = np.asarray(z, dtype=complex)
    out = phi(x, z, lat) * (zeta(z, lat) - zeta(z - x, lat) - zeta(x, lat))
    return out[()] if np.ndim(out) == 0 else out
