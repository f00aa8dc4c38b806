"""Command-line entry point: ``rbpmmh generate | infer | diagnose``.

Exit codes: 0 ok, 2 configuration error, 3 dimension mismatch, 4 missing
artifact, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .kalman import NumericalError, kf_filter
from .kernels import KernelError
from .material import DomainError
from .pmmh import Chain, ConfigError, PmmhConfig, pmmh_run
from .rbsmc import DegenerateLikelihoodError
from .scenario import GroundTruth, ScenarioSpec, default_true_psi, deviation_report, paper_spec, write_scenario
from .ssm import BLOCK_NAMES, ContractError, DeviationModel, load_dataset

log = logging.getLogger("rbpmmh")

EXIT_OK, EXIT_CONFIG, EXIT_DIMENSION, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4, 5

RUN_MANIFEST = "run_manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise CliError(EXIT_MISSING, f"{path}: no such file") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: "
                                    f"{exc.msg}") from None
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, f"{path}: expected a JSON object")
    return data


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_MISSING, f"{path}: no such file")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(EXIT_MISSING, f"{path}: empty file")
    return rows[0], rows[1:]


def version_string() -> str:
    from . import __version__

    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def state_column_names(n_zones: int) -> list[str]:
    return [f"{b}_{z}" for b in BLOCK_NAMES for z in range(n_zones)]


# ---------------------------------------------------------------------------
# generate


def scenario_from_json(data: dict) -> ScenarioSpec:
    data = dict(data)
    preset = data.pop("preset", None)
    if preset == "paper":
        data = {**paper_spec().to_dict(), **data}
    elif preset is not None:
        raise CliError(EXIT_CONFIG, f"unknown preset {preset!r}")
    data.setdefault("true_psi", default_true_psi().to_dict())
    data.setdefault("seed", 0)
    try:
        return ScenarioSpec.from_dict(data)
    except (ContractError, DomainError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad scenario spec: {exc}") from None


def cmd_generate(args) -> int:
    data = read_json(args.spec)
    if args.seed is not None:
        data["seed"] = args.seed
    spec = scenario_from_json(data)
    out = Path(args.out_dir)
    ds, _ = write_scenario(spec, out)
    print(f"wrote dataset with K={ds.n_freqs}, d_y={ds.obs_dim}, dim(x)={ds.state_dim} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _load_config(args, dataset) -> PmmhConfig:
    data = read_json(args.config)
    overrides = {"seed": args.seed, "n_threads": args.threads, "thin": args.thin, "n_iters": args.iters}
    data.update({k: v for k, v in overrides.items() if v is not None})
    model = None
    if "model" not in data:
        if "model" not in dataset.meta:
            raise CliError(EXIT_CONFIG, "config has no 'model' section and the dataset records none")
        model = DeviationModel.from_dict(dataset.meta["model"])
    try:
        return PmmhConfig.from_dict(data, model=model)
    except (ConfigError, ContractError, DomainError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad inference config: {exc}") from None


def write_chain(chain: Chain, out: Path) -> None:
    header = ["iter", *chain.names, "log_lik_hat", "log_prior", "accepted", "acceptance_rate", "beta"]
    write_csv(out / "chain.csv", header,
              ([r.iter, *r.psi.to_vector(), r.log_lik_hat, r.log_prior, r.accepted, r.acceptance_rate, r.beta]
               for r in chain.records))


def write_paths(chain: Chain, n_zones: int, out: Path) -> None:
    header = ["iter", "k", "rho", *state_column_names(n_zones)]

    def rows():
        for r in chain.records:
            if r.rho_path is None:
                continue
            for k in range(len(r.rho_path)):
                yield [r.iter, k + 1, r.rho_path[k], *r.delta_x[k]]

    write_csv(out / "paths.csv", header, rows())


def write_diagnostics(chain: Chain, out: Path, per_step: bool) -> None:
    by_iter = {r.iter: r for r in chain.records}
    rows = []
    for s in chain.smc_summary:
        r = by_iter.get(s["iter"])
        rows.append([s["iter"], "" if r is None else r.accepted, "" if r is None else r.acceptance_rate,
                     "" if r is None else r.beta, s["log_lik_hat"], s["ess_min"], s["n_resample"]])
    write_csv(out / "diagnostics.csv",
              ["iter", "accepted", "acceptance_rate", "beta", "log_lik_proposal", "ess_min", "n_resample"], rows)
    if per_step:
        spread = any("spread" in d for d in chain.diagnostics)
        header = ["iter", "k", "ess", "resampled"] + (["spread"] if spread else [])
        write_csv(out / "ess_trace.csv", header, ([d[h] for h in header] for d in chain.diagnostics))


def write_beliefs(chain: Chain, config: PmmhConfig, dataset, out: Path) -> None:
    psi = chain.records[-1].psi if chain.records else config.initial
    hist = kf_filter(psi, chain.final_rho_path, dataset, config.model)
    names = state_column_names(config.model.n_zones)
    rows = ([k + 1, names[i], hist.rho_path[k], hist.means[k, i], hist.covs[k, i, i]]
            for k in range(hist.means.shape[0]) for i in range(len(names)))
    write_csv(out / "beliefs.csv", ["k", "component", "rho", "mean", "var"], rows)


def cmd_infer(args) -> int:
    dataset_dir = Path(args.dataset)
    try:
        dataset = load_dataset(dataset_dir)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from None
    except ContractError as exc:
        raise CliError(EXIT_DIMENSION, f"dataset {dataset_dir}: {exc}") from None
    config = _load_config(args, dataset)
    if config.model.dim != dataset.state_dim:
        raise CliError(EXIT_DIMENSION, f"config model has state dimension {config.model.dim} "
                                       f"(n_zones={config.model.n_zones}) but the dataset has {dataset.state_dim}")
    if config.backend == "enkf" and not dataset.metamodel.diagonal_noise:
        raise CliError(EXIT_DIMENSION, "the enkf backend needs a dataset with diagonal R_k")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_doc = config.to_dict()
    manifest = {
        "config": config_doc,
        "config_hash": hashlib.sha256(canonical_json(config_doc).encode()).hexdigest(),
        "seed": config.seed,
        "backend": config.backend,
        "version": version_string(),
        "dataset": str(dataset_dir.resolve()),
        "dataset_manifest_sha256": hashlib.sha256((dataset_dir / "manifest.json").read_bytes()).hexdigest(),
        "started": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    t0 = time.perf_counter()
    if config.n_iters == 0:
        # nothing to sample: an empty chain and the manifest, no SMC work
        chain = Chain([], config.initial.names, sorted(config.priors, key=config.initial.names.index),
                      config.backend, {"smc_calls": 0})
        write_chain(chain, out)
    else:
        try:
            chain = pmmh_run(config, dataset, diagnostics=args.diagnostics)
        except (DegenerateLikelihoodError, NumericalError, KernelError, FloatingPointError) as exc:
            raise CliError(EXIT_NUMERICAL, f"numerical failure: {exc}") from None
        write_chain(chain, out)
        write_paths(chain, config.model.n_zones, out)
        write_diagnostics(chain, out, args.diagnostics)
        if args.dump_beliefs:
            write_beliefs(chain, config, dataset, out)
    wall = time.perf_counter() - t0
    manifest.update({
        "wall_time_s": wall,
        "n_records": len(chain.records),
        "parameters": chain.names,
        "free_parameters": chain.free,
        "counters": chain.counters,
        "acceptance_rate": chain.acceptance_rate,
    })
    (out / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{len(chain.records)} iterations, acceptance {chain.acceptance_rate:.3f}, "
          f"{chain.counters['smc_calls']} SMC runs, {wall:.1f} s -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def autocorrelation(x, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags 0..max_lag (NaN beyond lag 0 for a constant series)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    max_lag = min(max_lag, n - 1)
    out = np.full(max_lag + 1, np.nan)
    if n == 0:
        return out
    out[0] = 1.0
    d = x - x.mean()
    var = d @ d
    if var == 0.0:
        return out
    m = 1 << int(2 * n - 1).bit_length()
    f = np.fft.rfft(d, m)
    acov = np.fft.irfft(f * np.conj(f), m)[: max_lag + 1]
    return acov / var


def effective_sample_size(x) -> float:
    """Geyer initial-positive-sequence estimate."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return float("nan")
    rho = autocorrelation(x, n - 1)
    tau = -1.0
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


QUANTILES = (0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975)


def cmd_diagnose(args) -> int:
    out = Path(args.out_dir)
    manifest_path = out / RUN_MANIFEST
    if not manifest_path.exists():
        raise CliError(EXIT_MISSING, f"{manifest_path}: no such file")
    manifest = read_json(manifest_path)
    header, rows = read_csv(out / "chain.csv")
    if not rows:
        raise CliError(EXIT_MISSING, f"{out / 'chain.csv'} holds no iterations")
    table = np.array([[float(v) for v in row] for row in rows])
    col = {h: table[:, i] for i, h in enumerate(header)}
    keep = col["iter"] > args.burn_in
    if not np.any(keep):
        raise CliError(EXIT_CONFIG, f"burn-in {args.burn_in} discards every iteration")
    free = manifest.get("free_parameters") or [h for h in header[1:] if "[" in h]
    series = {name: col[name][keep] for name in free}
    series["log_lik_hat"] = col["log_lik_hat"][keep]

    accept = float(col["accepted"][keep].mean())
    write_csv(out / "traces.csv", ["iter", *series], zip(col["iter"][keep].astype(int), *series.values()))
    lags = min(args.max_lag, int(keep.sum()) - 1)
    acfs = [autocorrelation(v, lags) for v in series.values()]
    write_csv(out / "autocorr.csv", ["lag", *series], zip(range(lags + 1), *acfs))
    qrows = []
    for name, v in series.items():
        qs = np.quantile(v, QUANTILES)
        qrows.append([name, v.mean(), v.std(ddof=1) if v.size > 1 else 0.0, *qs, effective_sample_size(v)])
    write_csv(out / "quantiles.csv",
              ["parameter", "mean", "sd", *[f"q{q:g}" for q in QUANTILES], "ess"], qrows)
    write_csv(out / "summary.csv", ["key", "value"], [
        ["n_iters", int(col["iter"].max())],
        ["burn_in", args.burn_in],
        ["n_kept", int(keep.sum())],
        ["acceptance_rate", accept],
        ["backend", manifest.get("backend", "")],
    ])

    truth_dir = Path(args.truth) if args.truth else Path(manifest.get("dataset", ""))
    if (truth_dir / "ground_truth.json").exists():
        truth = GroundTruth.load(truth_dir)
        paths = _read_paths(out / "paths.csv", args.burn_in)
        if paths is None:
            log.warning("no thinned paths after burn-in; deviation table skipped")
        else:
            n_zones = truth.delta_x.shape[1] // len(BLOCK_NAMES)
            try:
                report = deviation_report(truth.delta_x, paths, n_zones=n_zones)
            except ContractError as exc:
                raise CliError(EXIT_DIMENSION, f"ground truth does not match the chain: {exc}") from None
            report.to_csv(out / "deviations.csv")
    else:
        log.warning("no ground truth found in %s; deviation table skipped", truth_dir)
    print(f"acceptance {accept:.3f} over {int(keep.sum())} iterations after burn-in {args.burn_in}")
    return EXIT_OK


def _read_paths(path: Path, burn_in: int):
    header, rows = read_csv(path)
    if not rows:
        return None
    table = np.array([[float(v) for v in row] for row in rows])
    table = table[table[:, 0] > burn_in]
    if table.size == 0:
        return None
    K = int(table[:, 1].max())
    return table[:, 3:].reshape(-1, K, table.shape[1] - 3)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rbpmmh", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic dataset")
    g.add_argument("spec", help="scenario spec JSON")
    g.add_argument("out_dir")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("infer", help="run PMMH on a dataset")
    i.add_argument("dataset", help="dataset directory")
    i.add_argument("config", help="inference config JSON")
    i.add_argument("out_dir")
    i.add_argument("--seed", type=int, help="override the config seed")
    i.add_argument("--threads", type=int, help="worker threads for the particle bank")
    i.add_argument("--iters", type=int, help="override n_iters")
    i.add_argument("--thin", type=int, metavar="T", help="store sampled paths every T iterations")
    i.add_argument("--diagnostics", action="store_true", help="also write per-frequency ESS traces")
    i.add_argument("--dump-beliefs", action="store_true",
                   help="write filtered means/variances at the final state to beliefs.csv")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("diagnose", help="summarize an inference output directory")
    d.add_argument("out_dir")
    d.add_argument("--burn-in", type=int, default=0)
    d.add_argument("--max-lag", type=int, default=200)
    d.add_argument("--truth", help="directory holding ground_truth.json (default: the run's dataset)")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except (NumericalError, KernelError, DegenerateLikelihoodError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
