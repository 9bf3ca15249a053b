"""Named function families referenced by scenario configurations.

Each family is a factory taking keyword parameters and returning a callable
with the signature the solver expects:

* drivers ``f(t, x, y, z)`` and ``g(t, x, y)``,
* terminal values and barriers ``h(t, x)``,

where ``x`` is the ``(n, d)`` Brownian state.  Only the first Brownian
component enters the scalar families.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .errors import ConfigurationError


def _b1(x):
    return np.asarray(x)[:, 0]


def _znorm(z):
    return np.sqrt(np.sum(np.asarray(z) ** 2, axis=1))


# drivers f(t, x, y, z)

def _f_zero():
    return lambda t, x, y, z: np.zeros_like(y)


def _f_constant(c: float):
    return lambda t, x, y, z: np.full_like(y, float(c))


def _f_linear_quadratic(a: float = 0.0, b: float = 0.0, c: float = 0.0, R: float = 0.0, kz: float = 0.0):
    """``a y + b + kz z_1 + c/2 |z|^2 + R |z|``."""

    def f(t, x, y, z):
        zz = np.asarray(z)
        out = a * y + b
        if kz:
            out = out + kz * zz[:, 0]
        if c:
            out = out + 0.5 * c * np.sum(zz**2, axis=1)
        if R:
            out = out + R * _znorm(zz)
        return out

    return f


def _f_quadratic(gamma: float):
    return _f_linear_quadratic(c=gamma)


def _f_abs_z(R: float):
    return _f_linear_quadratic(R=R)


def _f_phi_growth(
    phi: str = "linear",
    psi: str = "zero",
    D: float = 1.0,
    alpha: float = 0.0,
    C: float = 0.0,
    R: float = 0.0,
    phi_scale: float = 1.0,
):
    """``alpha phi(y) + C psi(y)/2 |z|^2 + R |z|``: the growth bound itself.

    ``phi`` is only defined on ``[D, inf)``; below ``D`` it is continued by
    its tangent at ``D`` so the driver stays C^1 in ``y``.  The bound only
    matters at the envelope, which never goes below ``D``.
    """
    from .transforms import EnvelopeSpec

    env = EnvelopeSpec(D=D, phi=phi, psi=psi, phi_scale=phi_scale)
    phi_D, dphi_D = float(env.phi_fn(D)), float(env.dphi_fn(D))

    def f(t, x, y, z):
        y = np.asarray(y, dtype=float)
        above = y >= D
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            phi_y = np.where(above, env.phi_fn(np.where(above, y, D)), phi_D + dphi_D * (y - D))
        zz = np.asarray(z)
        out = alpha * phi_y
        if C:
            out = out + 0.5 * C * env.psi_fn(y) * np.sum(zz**2, axis=1)
        if R:
            out = out + R * _znorm(zz)
        return out

    return f


DRIVERS: Dict[str, Callable] = {
    "phi_growth": _f_phi_growth,
    "zero": _f_zero,
    "constant": _f_constant,
    "linear_quadratic": _f_linear_quadratic,
    "quadratic": _f_quadratic,
    "abs_z": _f_abs_z,
}


# drivers g(t, x, y) for the dA integrator

def _g_zero():
    return lambda t, x, y: np.zeros_like(y)


def _g_constant(c: float):
    return lambda t, x, y: np.full_like(y, float(c))


def _g_linear(beta: float = 0.0, b: float = 0.0):
    return lambda t, x, y: beta * y + b


G_DRIVERS: Dict[str, Callable] = {"zero": _g_zero, "constant": _g_constant, "linear": _g_linear}


# path functionals h(t, x): terminal values and barriers

def _h_constant(value: float):
    return lambda t, x: np.full(np.asarray(x).shape[0], float(value))


def _h_brownian(a: float = 1.0, b: float = 0.0, rate: float = 0.0):
    return lambda t, x: a * _b1(x) + b + rate * t


def _h_abs(scale: float = 1.0, shift: float = 0.0, rate: float = 0.0):
    return lambda t, x: scale * np.abs(_b1(x)) - shift + rate * t


def _h_min_zero(shift: float = 1.0):
    return lambda t, x: np.minimum(_b1(x), 0.0) - shift


def _h_max(level: float = 0.0, a: float = 1.0, b: float = 0.0):
    return lambda t, x: np.maximum(a * _b1(x) + b, level)


def _h_clip(lo: float = -1.0, hi: float = 1.0, a: float = 1.0, b: float = 0.0):
    return lambda t, x: np.clip(a * _b1(x) + b, lo, hi)


def _h_step(level: float = 0.0, lo: float = 0.0, hi: float = 1.0):
    return lambda t, x: np.where(_b1(x) > level, hi, lo)


def _h_put(strike: float = 0.0):
    return lambda t, x: np.maximum(strike - _b1(x), 0.0)


def _h_square(shift: float = 0.0, rate: float = 0.0):
    return lambda t, x: _b1(x) ** 2 - shift + rate * t


def _h_exp(k: float = 1.0):
    return lambda t, x: np.exp(k * _b1(x))


def _h_linear_time(a: float = 0.0, b: float = 0.0):
    return lambda t, x: np.full(np.asarray(x).shape[0], a + b * t)


PATH_FUNCTIONALS: Dict[str, Callable] = {
    "constant": _h_constant,
    "brownian": _h_brownian,
    "abs": _h_abs,
    "min_zero": _h_min_zero,
    "max": _h_max,
    "step": _h_step,
    "clip": _h_clip,
    "put": _h_put,
    "square": _h_square,
    "exp": _h_exp,
    "linear_time": _h_linear_time,
}


# Brownian-integrand parts of barrier decompositions

def _chi_sign():
    return lambda t, x: np.sign(np.asarray(x))


def _chi_scaled_state(k: float = 1.0):
    return lambda t, x: k * np.asarray(x)


CHI_FAMILIES: Dict[str, Callable] = {"sign": _chi_sign, "scaled_state": _chi_scaled_state}


def build(registry: Dict[str, Callable], spec, what: str):
    """Instantiate ``{"family": name, **params}`` from ``registry``.

    Bare numbers are accepted for families with a ``constant`` member.
    """
    if isinstance(spec, (int, float)):
        if "constant" not in registry:
            raise ConfigurationError(f"{what}: a bare number is not accepted here")
        key = "c" if registry is DRIVERS or registry is G_DRIVERS else "value"
        return registry["constant"](**{key: float(spec)})
    if not isinstance(spec, dict) or "family" not in spec:
        raise ConfigurationError(f"{what}: expected an object with a 'family' key, got {spec!r}")
    params = {k: v for k, v in spec.items() if k != "family"}
    name = spec["family"]
    if name not in registry:
        raise ConfigurationError(f"{what}: unknown family {name!r}; expected one of {sorted(registry)}")
    try:
        return registry[name](**params)
    except TypeError as exc:
        raise ConfigurationError(f"{what}: bad parameters for family {name!r}: {exc}") from None


def build_decomposition_part(spec, what: str):
    """Number or ``{"family": ...}`` for ``rho``, ``theta`` or ``chi``."""
    if isinstance(spec, (int, float)):
        return float(spec)
    if isinstance(spec, dict) and spec.get("family") in CHI_FAMILIES:
        return build(CHI_FAMILIES, spec, what)
    return build(PATH_FUNCTIONALS, spec, what)
