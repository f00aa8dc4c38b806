"""Synthetic scattering experiment: ground truth, random metamodel, observations."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .material import DebyeTerm, LorentzTerm, MaterialParams, material_eval_many
from .ssm import (BLOCK_NAMES, N_BLOCKS, ContractError, Dataset, DeviationModel, DeviationState,
                  Metamodel, SpatialCovariance, observe, sample_rho_init, save_dataset, transition)


@dataclass(frozen=True)
class PlantedDeviation:
    """Constant offset of ``amplitude * sigma`` added to ``zones`` of one block at every k."""

    block: str
    zones: tuple[int, ...]
    amplitude: float

    def __post_init__(self):
        if self.block not in BLOCK_NAMES:
            raise ContractError(f"unknown block {self.block!r}; expected one of {BLOCK_NAMES}")
        object.__setattr__(self, "zones", tuple(int(z) for z in self.zones))


@dataclass(frozen=True)
class ScenarioSpec:
    n_zones: int
    n_freqs: int
    freq_band: tuple[float, float]
    n_angles: int
    true_psi: MaterialParams
    sigma: float
    length_scale: float
    sigma_rho: float
    noise_level: float
    seed: int
    rho_init: float | None = None
    planted: tuple[PlantedDeviation, ...] = ()
    null_deviation: bool = False

    def __post_init__(self):
        lo, hi = self.freq_band
        if not (0 < lo < hi) and not (self.n_freqs == 1 and 0 < lo <= hi):
            raise ContractError("frequency band must be positive and increasing")
        if self.n_zones < 1 or self.n_freqs < 1 or self.n_angles < 1:
            raise ContractError("counts must be positive")
        if self.noise_level < 0:
            raise ContractError("noise_level must be non-negative")
        object.__setattr__(self, "freq_band", (float(lo), float(hi)))
        object.__setattr__(self, "planted", tuple(self.planted))

    @property
    def obs_dim(self) -> int:
        # real/imag x HH/VV per angle
        return 4 * self.n_angles

    @property
    def state_dim(self) -> int:
        return N_BLOCKS * self.n_zones

    @property
    def model(self) -> DeviationModel:
        return DeviationModel(SpatialCovariance(self.sigma, self.length_scale, self.n_zones),
                              self.sigma_rho, self.rho_init)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_psi"] = self.true_psi.to_dict()
        d["freq_band"] = list(self.freq_band)
        d["planted"] = [{"block": p.block, "zones": list(p.zones), "amplitude": p.amplitude}
                        for p in self.planted]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        data = dict(data)
        try:
            data["true_psi"] = MaterialParams.from_dict(data["true_psi"])
            data["freq_band"] = tuple(data["freq_band"])
            data["planted"] = tuple(PlantedDeviation(p["block"], tuple(p["zones"]), float(p["amplitude"]))
                                    for p in data.get("planted", []))
            return cls(**data)
        except (KeyError, TypeError) as exc:
            raise ContractError(f"bad scenario spec: {exc}") from None


def default_true_psi() -> MaterialParams:
    """Two-term truth (one Debye, one Lorentz) inside the 0.1-10 GHz band."""
    return MaterialParams((DebyeTerm(3.0, 9.0, 2.0e9),), (LorentzTerm(2.5, 3.0e9, 1.5e9),))


def paper_spec(seed: int = 0, **overrides) -> ScenarioSpec:
    """50 zones, 20 frequencies over 0.1-10 GHz, 100 angles (d_y = 400)."""
    base = dict(n_zones=50, n_freqs=20, freq_band=(0.1e9, 10e9), n_angles=100,
                true_psi=default_true_psi(), sigma=0.1, length_scale=3.0, sigma_rho=0.05,
                noise_level=0.05, seed=seed, rho_init=0.9)
    base.update(overrides)
    return ScenarioSpec(**base)


@dataclass
class GroundTruth:
    psi: MaterialParams
    delta_x: np.ndarray
    rho: np.ndarray
    spec: ScenarioSpec | None = field(default=None, repr=False)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        doc = {"psi": self.psi.to_dict(), "rho": [float(r) for r in self.rho],
               "spec": None if self.spec is None else self.spec.to_dict()}
        (path / "ground_truth.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        np.savetxt(path / "ground_truth_delta_x.csv", self.delta_x, fmt="%.17g", delimiter=",")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        path = Path(path)
        doc = json.loads((path / "ground_truth.json").read_text())
        dx = np.loadtxt(path / "ground_truth_delta_x.csv", delimiter=",", ndmin=2)
        spec = None if doc.get("spec") is None else ScenarioSpec.from_dict(doc["spec"])
        return cls(MaterialParams.from_dict(doc["psi"]), dx, np.asarray(doc["rho"]), spec)


def generate(spec: ScenarioSpec) -> tuple[Dataset, GroundTruth]:
    """Simulate one dataset; independent seeded streams for operator, deviation and noise."""
    ss_op, ss_dev, ss_noise = np.random.SeedSequence(spec.seed).spawn(3)
    rng_op = np.random.default_rng(ss_op)
    rng_dev = np.random.default_rng(ss_dev)
    rng_noise = np.random.default_rng(ss_noise)
    K, n, d_y = spec.n_freqs, spec.state_dim, spec.obs_dim
    lo, hi = spec.freq_band
    freqs = np.geomspace(lo, hi, K) if K > 1 else np.array([lo])

    A = rng_op.normal(0.0, 1.0 / np.sqrt(n), size=(K, d_y, n))
    y0 = rng_op.standard_normal((K, d_y))
    R = np.broadcast_to(spec.noise_level ** 2 * np.eye(d_y), (K, d_y, d_y)).copy()
    metamodel = Metamodel(A, y0, R)

    model = spec.model
    rho = np.empty(K)
    dx = np.empty((K, n))
    state = DeviationState(model.spatial.sample(rng_dev), float(sample_rho_init(model, rng_dev)))
    for k in range(K):
        if k > 0:
            state = transition(state, model, rng_dev)
        rho[k] = state.rho
        dx[k] = state.delta_x
    if spec.null_deviation:
        dx[:] = 0.0
    for p in spec.planted:
        b = BLOCK_NAMES.index(p.block)
        dx[:, b * spec.n_zones + np.asarray(p.zones, dtype=int)] += p.amplitude * spec.sigma

    g = material_eval_many(spec.true_psi, freqs, spec.n_zones)
    noise_rng = rng_noise if spec.noise_level > 0 else None
    y = np.array([observe(metamodel, k, g[k] + dx[k], noise_rng) for k in range(K)])
    ds = Dataset(freqs, y, metamodel, {"model": model.to_dict(), "seed": spec.seed})
    return ds, GroundTruth(spec.true_psi, dx, rho, spec)


def write_scenario(spec: ScenarioSpec, out_dir) -> tuple[Dataset, GroundTruth]:
    ds, truth = generate(spec)
    save_dataset(ds, out_dir, seed=spec.seed,
                 extra={"model": spec.model.to_dict(), "scenario": spec.to_dict()})
    truth.save(out_dir)
    return ds, truth


# ---------------------------------------------------------------------------
# deviation report


@dataclass
class DeviationReport:
    """One row per (frequency, state component)."""

    columns: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.columns["k"])

    def to_csv(self, path) -> None:
        names = list(self.columns)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in zip(*(self.columns[c] for c in names)):
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else
                            int(v) if isinstance(v, (bool, np.bool_)) else v for v in row])


def deviation_report(truth_delta_x, paths, *, n_zones: int, threshold: float = 2.0) -> DeviationReport:
    """Compare true deviations with posterior draws ``paths`` of shape ``(S, K, 4N)``.

    ``detectable``: ``|true| > threshold * post_std`` (the truth stands out of
    the posterior uncertainty). ``detected``: ``|post_mean| > threshold * post_std``
    (the data alone flag a non-zero deviation).
    """
    paths = np.asarray(paths, dtype=np.float64)
    if paths.ndim != 3 or paths.shape[0] == 0:
        raise ValueError("deviation report needs at least one posterior path")
    truth = np.asarray(truth_delta_x, dtype=np.float64)
    S, K, n = paths.shape
    if truth.shape != (K, n) or n != N_BLOCKS * n_zones:
        raise ContractError(f"truth {truth.shape} and paths {paths.shape} disagree")
    mean = paths.mean(axis=0)
    std = paths.std(axis=0, ddof=1) if S > 1 else np.zeros_like(mean)
    lower, upper = np.quantile(paths, [0.025, 0.975], axis=0)
    kk, ii = np.meshgrid(np.arange(K), np.arange(n), indexing="ij")
    cols = {
        "k": (kk + 1).ravel(),
        "block": np.array([BLOCK_NAMES[i // n_zones] for i in ii.ravel()]),
        "zone": (ii % n_zones).ravel(),
        "index": ii.ravel(),
        "true": truth.ravel(),
        "post_mean": mean.ravel(),
        "post_std": std.ravel(),
        "lower95": lower.ravel(),
        "upper95": upper.ravel(),
        "detectable": (np.abs(truth) > threshold * std).ravel(),
        "detected": (np.abs(mean) > threshold * std).ravel(),
    }
    return DeviationReport(cols)
