"""Dispersive material model: Debye permittivity and Lorentz permeability terms.

Complex quantities use the engineering convention ``eps = eps' - i eps''``
(time dependence ``exp(+i w t)``), so lossy media have ``eps'' >= 0`` and
``mu'' >= 0``. The radioelectric state at one frequency stacks
``[eps' 1_N, eps'' 1_N, mu' 1_N, mu'' 1_N]`` over ``N`` zones.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEBYE_FIELDS = ("eps_inf", "eps_s", "f_d")
LORENTZ_FIELDS = ("mu_s", "f_r", "gamma")


class DomainError(ValueError):
    """Raised for frequencies or parameters outside the model's domain."""


def _check_freq(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(~(f > 0)):
        raise DomainError("frequency must be strictly positive")
    return f


@dataclass(frozen=True)
class DebyeTerm:
    eps_inf: float
    eps_s: float
    f_d: float

    def __post_init__(self):
        if not self.eps_inf >= 1.0:
            raise DomainError(f"eps_inf must be >= 1, got {self.eps_inf}")
        if not self.eps_s >= self.eps_inf:
            raise DomainError(f"eps_s must be >= eps_inf, got {self.eps_s} < {self.eps_inf}")
        if not self.f_d > 0:
            raise DomainError(f"f_d must be > 0, got {self.f_d}")


@dataclass(frozen=True)
class LorentzTerm:
    mu_s: float
    f_r: float
    gamma: float

    def __post_init__(self):
        if not self.mu_s >= 1.0:
            raise DomainError(f"mu_s must be >= 1, got {self.mu_s}")
        if not self.f_r > 0:
            raise DomainError(f"f_r must be > 0, got {self.f_r}")
        if not self.gamma > 0:
            raise DomainError(f"gamma must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class MaterialParams:
    """Hyperparameters of the material model (the PMMH target)."""

    debye: tuple[DebyeTerm, ...] = field(default_factory=tuple)
    lorentz: tuple[LorentzTerm, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "debye", tuple(self.debye))
        object.__setattr__(self, "lorentz", tuple(self.lorentz))
        if not self.debye and not self.lorentz:
            raise DomainError("material model needs at least one term")

    # flat parameter view used by the sampler -------------------------------

    @property
    def names(self) -> list[str]:
        out = [f"debye[{i}].{f}" for i in range(len(self.debye)) for f in DEBYE_FIELDS]
        out += [f"lorentz[{i}].{f}" for i in range(len(self.lorentz)) for f in LORENTZ_FIELDS]
        return out

    def to_vector(self) -> np.ndarray:
        vals = [getattr(t, f) for t in self.debye for f in DEBYE_FIELDS]
        vals += [getattr(t, f) for t in self.lorentz for f in LORENTZ_FIELDS]
        return np.array(vals, dtype=np.float64)

    def with_vector(self, values: Sequence[float]) -> "MaterialParams":
        values = [float(v) for v in values]
        if len(values) != 3 * (len(self.debye) + len(self.lorentz)):
            raise ValueError("parameter vector has the wrong length")
        nd = len(self.debye)
        debye = [DebyeTerm(*values[3 * i:3 * i + 3]) for i in range(nd)]
        lorentz = [LorentzTerm(*values[3 * nd + 3 * i:3 * nd + 3 * i + 3])
                   for i in range(len(self.lorentz))]
        return MaterialParams(tuple(debye), tuple(lorentz))

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "debye": [{f: getattr(t, f) for f in DEBYE_FIELDS} for t in self.debye],
            "lorentz": [{f: getattr(t, f) for f in LORENTZ_FIELDS} for t in self.lorentz],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MaterialParams":
        try:
            debye = tuple(DebyeTerm(**{f: float(d[f]) for f in DEBYE_FIELDS})
                          for d in data.get("debye", []))
            lorentz = tuple(LorentzTerm(**{f: float(d[f]) for f in LORENTZ_FIELDS})
                            for d in data.get("lorentz", []))
        except KeyError as exc:
            raise ValueError(f"missing material field {exc}") from None
        return cls(debye, lorentz)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MaterialParams":
        return cls.from_dict(json.loads(text))


def debye_eval(term: DebyeTerm, f):
    """Complex relative permittivity of one Debye relaxation at frequency ``f``."""
    f = _check_freq(f)
    return term.eps_inf + (term.eps_s - term.eps_inf) / (1.0 + 1j * f / term.f_d)


def lorentz_eval(term: LorentzTerm, f):
    """Complex relative permeability of one Lorentz resonance at ``f``."""
    f = _check_freq(f)
    fr2 = term.f_r * term.f_r
    return 1.0 + (term.mu_s - 1.0) * fr2 / (fr2 - f * f + 1j * term.gamma * f)


def permittivity(params: MaterialParams, f):
    # Each Debye term carries its own eps_inf baseline; no terms means vacuum.
    f = _check_freq(f)
    if not params.debye:
        return np.ones_like(f, dtype=np.complex128)
    return sum(debye_eval(t, f) for t in params.debye)


def permeability(params: MaterialParams, f):
    f = _check_freq(f)
    mu = np.ones_like(f, dtype=np.complex128)
    for t in params.lorentz:
        mu = mu + (lorentz_eval(t, f) - 1.0)
    return mu


def material_eval(params: MaterialParams, f: float, n_zones: int) -> np.ndarray:
    """Deterministic state mean ``g(f, psi)`` of length ``4 * n_zones``."""
    if n_zones < 1:
        raise ValueError("n_zones must be >= 1")
    eps = complex(permittivity(params, float(f)))
    mu = complex(permeability(params, float(f)))
    vals = np.array([eps.real, -eps.imag, mu.real, -mu.imag])
    return np.repeat(vals, n_zones)


def material_eval_many(params: MaterialParams, freqs, n_zones: int) -> np.ndarray:
    """Stack :func:`material_eval` over frequencies, shape ``(K, 4 * n_zones)``."""
    freqs = _check_freq(freqs)
    eps = np.asarray(permittivity(params, freqs))
    mu = np.asarray(permeability(params, freqs))
    vals = np.stack([eps.real, -eps.imag, mu.real, -mu.imag], axis=-1)
    return np.repeat(vals, n_zones, axis=-1)


def material_jacobian(params: MaterialParams, f: float, n_zones: int) -> np.ndarray:
    """Analytic derivative of :func:`material_eval` w.r.t. ``params.to_vector()``.

    Returns an array of shape ``(4 * n_zones, n_params)``.
    """
    f = float(_check_freq(f))
    cols = []
    for t in params.debye:
        d = 1.0 + 1j * f / t.f_d
        delta = t.eps_s - t.eps_inf
        d_eps_inf = 1.0 - 1.0 / d
        d_eps_s = 1.0 / d
        d_f_d = delta * (1j * f / t.f_d ** 2) / d ** 2
        cols += [(d_eps_inf, 0j), (d_eps_s, 0j), (d_f_d, 0j)]
    for t in params.lorentz:
        fr2 = t.f_r ** 2
        den = fr2 - f * f + 1j * t.gamma * f
        d_mu_s = fr2 / den
        d_f_r = (t.mu_s - 1.0) * (2 * t.f_r * den - fr2 * 2 * t.f_r) / den ** 2
        d_gamma = -(t.mu_s - 1.0) * fr2 * 1j * f / den ** 2
        cols += [(0j, d_mu_s), (0j, d_f_r), (0j, d_gamma)]
    jac = np.empty((4, len(cols)))
    for j, (de, dm) in enumerate(cols):
        jac[:, j] = [de.real, -de.imag, dm.real, -dm.imag]
    return np.repeat(jac, n_zones, axis=0)
