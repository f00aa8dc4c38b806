"""Conditionally linear-Gaussian state-space model indexed by frequency.

State deviation ``dx_k`` (length 4N) follows a scalar AR(1) with shared
coefficient ``rho_k``; ``rho`` itself performs a Gaussian random walk in logit
space. Observations are affine in ``x_k = g(f_k, psi) + dx_k``::

    dx_1 ~ N(0, Sigma)
    dx_{k+1} = rho_{k+1} dx_k + w_k,   w_k ~ N(0, (1 - rho_{k+1}^2) Sigma)
    y_k = A_k x_k + y0_k + v_k,        v_k ~ N(0, R_k)
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import expit, logit

from .kernels import ar1_along_zones

N_BLOCKS = 4
BLOCK_NAMES = ("eps_real", "eps_imag", "mu_real", "mu_imag")
DATASET_FORMAT = "rbpmmh-dataset"


class ContractError(ValueError):
    """Inputs with inconsistent dimensions or invalid structure."""


@dataclass(frozen=True)
class SpatialCovariance:
    """Exponential kernel over zones, block-diagonal across the four blocks."""

    sigma: float
    length_scale: float
    n_zones: int

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ContractError("sigma must be non-negative")
        if not self.length_scale > 0:
            raise ContractError("length_scale must be positive")
        if self.n_zones < 1:
            raise ContractError("n_zones must be >= 1")

    @property
    def dim(self) -> int:
        return N_BLOCKS * self.n_zones

    @property
    def lag_coefficient(self) -> float:
        """Correlation between neighbouring zones, ``exp(-1/length_scale)``."""
        return float(np.exp(-1.0 / self.length_scale))

    def block(self) -> np.ndarray:
        idx = np.arange(self.n_zones)
        return self.sigma ** 2 * np.exp(-np.abs(idx[:, None] - idx[None, :]) / self.length_scale)

    def matrix(self) -> np.ndarray:
        return np.kron(np.eye(N_BLOCKS), self.block())

    def sample(self, rng: np.random.Generator, size=()) -> np.ndarray:
        """Draw ``N(0, Sigma)`` vectors, shape ``size + (4N,)``, in O(4N) each."""
        size = (size,) if np.isscalar(size) else tuple(size)
        eps = rng.standard_normal(size + (N_BLOCKS, self.n_zones))
        return self.transform(eps)

    def transform(self, eps: np.ndarray) -> np.ndarray:
        """Map standard normals of shape ``(..., 4N)`` or ``(..., 4, N)`` to ``N(0, Sigma)``."""
        eps = np.asarray(eps, dtype=np.float64)
        lead = eps.shape[:-2] if eps.shape[-2:] == (N_BLOCKS, self.n_zones) else eps.shape[:-1]
        eps = eps.reshape(lead + (N_BLOCKS, self.n_zones))
        out = self.sigma * ar1_along_zones(eps, self.lag_coefficient)
        return out.reshape(lead + (self.dim,))


def spatial_cov(spec: SpatialCovariance) -> np.ndarray:
    """Dense ``4N x 4N`` deviation covariance."""
    return spec.matrix()


@dataclass(frozen=True)
class DeviationModel:
    """Prior on the deviation process: spatial covariance plus the rho walk.

    ``rho_init=None`` draws ``rho_1`` uniformly on (0, 1); a number pins it.
    """

    spatial: SpatialCovariance
    sigma_rho: float = 0.05
    rho_init: float | None = None

    def __post_init__(self):
        if not self.sigma_rho >= 0:
            raise ContractError("sigma_rho must be non-negative")
        if self.rho_init is not None and not 0.0 < self.rho_init < 1.0:
            raise ContractError("rho_init must lie in (0, 1)")

    @property
    def n_zones(self) -> int:
        return self.spatial.n_zones

    @property
    def dim(self) -> int:
        return self.spatial.dim

    def replace(self, **changes) -> "DeviationModel":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "n_zones": self.spatial.n_zones,
            "sigma": self.spatial.sigma,
            "length_scale": self.spatial.length_scale,
            "sigma_rho": self.sigma_rho,
            "rho_init": self.rho_init,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeviationModel":
        spatial = SpatialCovariance(float(data["sigma"]), float(data["length_scale"]),
                                    int(data["n_zones"]))
        rho_init = data.get("rho_init")
        return cls(spatial, float(data.get("sigma_rho", 0.05)),
                   None if rho_init is None else float(rho_init))


@dataclass(frozen=True)
class DeviationState:
    delta_x: np.ndarray
    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ContractError("rho must lie in (0, 1)")


def rho_walk(rho, sigma_rho: float, eps):
    """One logit-space random-walk step; exact identity when ``sigma_rho == 0``."""
    if sigma_rho == 0:
        return np.array(rho, dtype=np.float64, copy=True)
    return expit(logit(rho) + sigma_rho * np.asarray(eps))


def sample_rho_init(model: DeviationModel, rng: np.random.Generator, size=None):
    if model.rho_init is not None:
        return model.rho_init if size is None else np.full(size, model.rho_init)
    # keep strictly inside (0, 1) so logit stays finite
    u = rng.uniform(size=size)
    return np.clip(u, 1e-12, 1 - 1e-12)


def initial_state(model: DeviationModel, rng: np.random.Generator) -> DeviationState:
    return DeviationState(model.spatial.sample(rng), float(sample_rho_init(model, rng)))


def transition(prev: DeviationState, model: DeviationModel, rng: np.random.Generator,
               *, noise: bool = True) -> DeviationState:
    """Draw ``(dx_{k+1}, rho_{k+1})`` given ``(dx_k, rho_k)``.

    ``noise=False`` suppresses the state noise ``w`` (the rho walk still runs).
    """
    rho = float(rho_walk(prev.rho, model.sigma_rho, rng.standard_normal()))
    dx = rho * np.asarray(prev.delta_x, dtype=np.float64)
    if noise:
        dx = dx + np.sqrt(1.0 - rho * rho) * model.spatial.sample(rng)
    return DeviationState(dx, rho)


@dataclass(frozen=True)
class Metamodel:
    """Per-frequency affine operators: ``A (K, d_y, n)``, ``y0 (K, d_y)``, ``R (K, d_y, d_y)``."""

    A: np.ndarray
    y0: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        y0 = np.asarray(self.y0, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        if A.ndim != 3 or y0.shape != A.shape[:2] or R.shape != (A.shape[0], A.shape[1], A.shape[1]):
            raise ContractError(f"inconsistent metamodel shapes A{A.shape} y0{y0.shape} R{R.shape}")
        if not np.allclose(R, np.swapaxes(R, 1, 2), rtol=0, atol=1e-12 * max(1.0, np.abs(R).max())):
            raise ContractError("R_k must be symmetric")
        if np.linalg.eigvalsh(R).min() < -1e-10 * max(1.0, np.abs(R).max()):
            raise ContractError("R_k must be positive semi-definite")
        for name, val in (("A", A), ("y0", y0), ("R", R)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_freqs(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.A.shape[1]

    @property
    def state_dim(self) -> int:
        return self.A.shape[2]

    @property
    def diagonal_noise(self) -> bool:
        off = self.R - np.einsum("kii->ki", self.R)[:, :, None] * np.eye(self.obs_dim)
        return not np.any(off)

    def r_diag(self) -> np.ndarray:
        return np.einsum("kii->ki", self.R).copy()


def observe(metamodel: Metamodel, k: int, x, rng: np.random.Generator | None = None) -> np.ndarray:
    """``A_k x + y0_k + v_k``; the noiseless mean when ``rng`` is None."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (metamodel.state_dim,):
        raise ContractError(f"state has shape {x.shape}, metamodel expects ({metamodel.state_dim},)")
    y = metamodel.A[k] @ x + metamodel.y0[k]
    if rng is not None:
        R = metamodel.R[k]
        try:
            L = np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            # singular (e.g. noiseless) R: factor through the eigendecomposition
            w, v = np.linalg.eigh(R)
            L = v * np.sqrt(np.clip(w, 0.0, None))
        y = y + L @ rng.standard_normal(metamodel.obs_dim)
    return y


@dataclass(frozen=True)
class Dataset:
    frequencies: np.ndarray
    observations: np.ndarray
    metamodel: Metamodel
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.float64)
        y = np.asarray(self.observations, dtype=np.float64)
        if f.ndim != 1 or f.size < 1:
            raise ContractError("need at least one frequency")
        if np.any(np.diff(f) <= 0) or np.any(f <= 0):
            raise ContractError("frequencies must be positive and strictly increasing")
        if y.shape != (f.size, self.metamodel.obs_dim) or self.metamodel.n_freqs != f.size:
            raise ContractError(f"observations {y.shape} do not match K={f.size}, "
                                f"d_y={self.metamodel.obs_dim}")
        for name, val in (("frequencies", f), ("observations", y)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_freqs(self) -> int:
        return self.frequencies.size

    @property
    def obs_dim(self) -> int:
        return self.metamodel.obs_dim

    @property
    def state_dim(self) -> int:
        return self.metamodel.state_dim


# ---------------------------------------------------------------------------
# directory format


def _write_column(path: Path, values) -> None:
    path.write_text("".join(f"{float(v)!r}\n" for v in values))


def _read_column(path: Path) -> np.ndarray:
    return np.array([float(line) for line in path.read_text().split()], dtype=np.float64)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(ds: Dataset, path, *, seed: int | None = None, extra: dict | None = None) -> Path:
    """Write ``ds`` as a directory of CSV/NPY files plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    K = ds.n_freqs
    width = max(2, len(str(K)))
    _write_column(path / "frequencies.csv", ds.frequencies)
    files = ["frequencies.csv"]
    diagonal = ds.metamodel.diagonal_noise
    for k in range(K):
        tag = f"{k + 1:0{width}d}"
        _write_column(path / f"y_{tag}.csv", ds.observations[k])
        np.save(path / f"A_{tag}.npy", np.ascontiguousarray(ds.metamodel.A[k]))
        np.save(path / f"y0_{tag}.npy", np.ascontiguousarray(ds.metamodel.y0[k]))
        files += [f"y_{tag}.csv", f"A_{tag}.npy", f"y0_{tag}.npy"]
        if not diagonal:
            np.save(path / f"R_{tag}.npy", np.ascontiguousarray(ds.metamodel.R[k]))
            files.append(f"R_{tag}.npy")
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "n_freqs": K,
        "obs_dim": ds.obs_dim,
        "state_dim": ds.state_dim,
        "seed": seed,
        "R_diag": ds.metamodel.r_diag().tolist() if diagonal else None,
        "checksums": {name: sha256_file(path / name) for name in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest in {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ContractError(f"{manifest_path} is not a dataset manifest")
    K = int(manifest["n_freqs"])
    width = max(2, len(str(K)))
    freqs = _read_column(path / "frequencies.csv")
    ys, As, y0s, Rs = [], [], [], []
    for k in range(K):
        tag = f"{k + 1:0{width}d}"
        ys.append(_read_column(path / f"y_{tag}.csv"))
        As.append(np.load(path / f"A_{tag}.npy"))
        y0s.append(np.load(path / f"y0_{tag}.npy"))
        if manifest.get("R_diag") is None:
            Rs.append(np.load(path / f"R_{tag}.npy"))
        else:
            Rs.append(np.diag(np.asarray(manifest["R_diag"][k], dtype=np.float64)))
    meta = {k: v for k, v in manifest.items() if k not in ("R_diag", "checksums")}
    return Dataset(freqs, np.array(ys), Metamodel(np.array(As), np.array(y0s), np.array(Rs)), meta)
