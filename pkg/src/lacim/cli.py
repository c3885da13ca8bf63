"""Reproducible experiment runner.

Config ingestion, pipeline orchestration (generate -> train -> infer ->
evaluate -> theory checks), and persistence.  Every artifact embeds the
fully resolved config and the effective seed so any output can be
regenerated bitwise from its own header.  Subcommands:

* ``simulate``  write per-environment CSV datasets
* ``train``     fit one model mode on persisted datasets
* ``infer``     test-time latent optimization on persisted artifacts
* ``mcc``       identifiability score of a persisted checkpoint
* ``theory``    the four theoretical side-condition checks
* ``suite``     repeats x {lacim, lacim_m3, pooled} with aggregate.csv
* ``toy-ood``   spurious-correlation toy comparison against ERM

Exit code 0 means all requested stages completed; failed *checks* are
data, not process errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from lacim.evaluation import accuracy, evaluate_identifiability, export_latent_scatter, mse
from lacim.inference import InferConfig, infer_latents, predict_batch
from lacim.model import (
    LacimModel,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    merge_datasets,
    save_checkpoint,
    train,
    train_erm_baseline,
)
from lacim.numeric import RngStream
from lacim.scm import (
    ScmDims,
    ToyParams,
    build_scm,
    build_toy_spurious,
    domain_offset,
    export_dataset,
    import_dataset,
    sample_env,
)
from lacim.theory import (
    GaussianPosteriorPair,
    check_diversity,
    check_nonempty_open_set,
    ood_bound_check,
    scm_expfam_specs,
    stein_kernel,
)

SUITE_MODES = ("lacim", "lacim_m3", "pooled")
FLOAT_FMT = "%.17g"  # bitwise-stable float serialization for CSV artifacts


@dataclass
class ToyConfig:
    """Spurious-correlation toy preset.

    The class-mean defaults deliberately make the spurious feature stronger
    than the invariant one in-domain (see ToyParams): that is what makes a
    discriminative baseline prefer it and collapse when the test alignment
    flips.
    """

    m: int = 2
    correlation_strengths: tuple[float, ...] = (0.95, 0.99)
    test_strength: float = 0.1
    samples_per_env: int = 2000
    test_samples: int = 2000
    s_mean: float = 0.7
    z_mean: float = 1.5
    s_std: float = 1.0
    z_std: float = 1.0
    obs_std: float = 0.1

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("toy preset needs at least two training environments")
        if len(self.correlation_strengths) != self.m:
            raise ValueError("need one correlation strength per training environment")

    def params(self) -> ToyParams:
        return ToyParams(
            s_mean=self.s_mean,
            z_mean=self.z_mean,
            s_std=self.s_std,
            z_std=self.z_std,
            obs_std=self.obs_std,
        )


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/exp"
    n_repeats: int = 1
    m: int = 5
    samples_per_env: int = 1000
    modes: tuple[str, ...] = ("lacim", "pooled")
    dims: ScmDims = field(default_factory=ScmDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        if self.samples_per_env < 1:
            raise ValueError("samples_per_env must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        bad = set(self.modes) - {"lacim", "pooled", "erm"}
        if bad:
            raise ValueError(f"unknown modes {sorted(bad)}")

    def to_dict(self) -> dict:
        def section(obj) -> dict:
            return {
                f.name: (list(v) if isinstance(v := getattr(obj, f.name), tuple) else v)
                for f in dataclasses.fields(obj)
            }

        return {
            "seed": self.seed,
            "out": self.out,
            "n_repeats": self.n_repeats,
            "m": self.m,
            "samples_per_env": self.samples_per_env,
            "modes": list(self.modes),
            "dims": section(self.dims),
            "train": section(self.train),
            "infer": section(self.infer),
            "toy": section(self.toy),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")

        def build(section_cls, payload, name):
            if payload is None:
                return section_cls()
            if not isinstance(payload, dict):
                raise ValueError(f"config section {name!r} must be an object")
            names = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(payload) - names
            if bad:
                raise ValueError(f"unknown keys {sorted(bad)} in config section {name!r}")
            coerced = {
                k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()
            }
            return section_cls(**coerced)

        kwargs = {k: v for k, v in data.items() if k in known - {"dims", "train", "infer", "toy", "modes"}}
        if "modes" in data:
            kwargs["modes"] = tuple(data["modes"])
        kwargs["dims"] = build(ScmDims, data.get("dims"), "dims")
        kwargs["train"] = build(TrainConfig, data.get("train"), "train")
        kwargs["infer"] = build(InferConfig, data.get("infer"), "infer")
        kwargs["toy"] = build(ToyConfig, data.get("toy"), "toy")
        return cls(**kwargs)


def load_config(path: Optional[str], seed: Optional[int], out: Optional[str],
                repeats: Optional[int]) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        with open(path) as fh:
            cfg = ExperimentConfig.from_dict(json.load(fh))
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out"] = out
    if repeats is not None:
        updates["n_repeats"] = repeats
    return dataclasses.replace(cfg, **updates) if updates else cfg


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def stamp(cfg: ExperimentConfig, seed: int, **payload) -> dict:
    """Standard artifact envelope: resolved config + effective seed first."""
    return {"config": cfg.to_dict(), "seed": seed, **payload}


# ---------------------------------------------------------------------------
# model construction and dataset IO shared by the stages
# ---------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig, mode: str, m: int, seed: int) -> LacimModel:
    d = cfg.dims
    return LacimModel(
        m=1 if mode == "pooled" else m,
        q_x=d.q_x,
        q_s=d.q_s,
        q_z=d.q_z,
        q_y=d.q_y,
        task="regression",
        seed=seed,
    )


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "data"


def simulate_envs(cfg: ExperimentConfig, seed: int, m: int, samples: int):
    scm = build_scm(seed, m=m, dims=cfg.dims)
    rng = RngStream(seed, (50, 0))
    return scm, [sample_env(scm, e, samples, rng.substream(e)) for e in range(1, m + 1)]


def load_envs(cfg: ExperimentConfig) -> list:
    paths = sorted(data_dir(cfg).glob("env_*.csv"))
    if not paths:
        raise FileNotFoundError(
            f"no datasets under {data_dir(cfg)}; run the simulate stage first"
        )
    return [import_dataset(p) for p in paths]


def checkpoint_path(cfg: ExperimentConfig, mode: str) -> Path:
    return Path(cfg.out) / "checkpoints" / f"{mode}.json"


def train_mode(cfg: ExperimentConfig, mode: str, datasets: list, seed: int, m: int):
    """Train one mode and return (result, trained object)."""
    train_cfg = dataclasses.replace(
        cfg.train, mode="lacim" if mode == "lacim_m3" else mode, seed=seed
    )
    if mode == "erm":
        return train_erm_baseline(datasets, train_cfg, task="regression")
    model = build_model(cfg, mode, m, seed)
    return train(model, datasets, train_cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig) -> int:
    _, datasets = simulate_envs(cfg, cfg.seed, cfg.m, cfg.samples_per_env)
    out = data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        export_dataset(ds, out / f"env_{ds.env}.csv")
    write_json(Path(cfg.out) / "config.json", stamp(cfg, cfg.seed))
    print(f"wrote {len(datasets)} environment datasets to {out}")
    return 0


def cmd_train(cfg: ExperimentConfig, mode: str) -> int:
    datasets = load_envs(cfg)
    result = train_mode(cfg, mode, datasets, cfg.seed, cfg.m)
    if mode != "erm":
        ckpt = checkpoint_path(cfg, mode)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.model, ckpt)
    write_json(
        Path(cfg.out) / f"train_{mode}.json",
        stamp(
            cfg,
            cfg.seed,
            mode=mode,
            final_loss=result.loss_trace[-1] if result.loss_trace else None,
            loss_trace=result.loss_trace,
        ),
    )
    print(f"trained {mode}: final loss {result.loss_trace[-1]:.4f}")
    return 0


def cmd_infer(cfg: ExperimentConfig, mode: str) -> int:
    datasets = load_envs(cfg)
    model = load_checkpoint(checkpoint_path(cfg, mode))
    merged = merge_datasets(datasets)
    rng = RngStream(cfg.seed, (60, 0))
    preds, latents = predict_batch(model, merged.x, cfg.infer, rng)
    out = Path(cfg.out)
    header = (
        [f"s{i}" for i in range(model.q_s)]
        + [f"z{i}" for i in range(model.q_z)]
        + ["objective"]
    )
    table = np.column_stack([latents.s, latents.z, latents.objective])
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(
        out / f"inferred_{mode}.csv",
        table,
        delimiter=",",
        header=",".join(header),
        comments="",
        fmt=FLOAT_FMT,
    )
    write_json(
        out / f"infer_{mode}.json",
        stamp(
            cfg,
            cfg.seed,
            mode=mode,
            mean_objective=float(np.mean(latents.objective)),
            prediction_mse=mse(preds, merged.y),
        ),
    )
    print(f"inferred latents for {merged.n} samples ({mode})")
    return 0


def cmd_mcc(cfg: ExperimentConfig, mode: str) -> int:
    datasets = load_envs(cfg)
    model = load_checkpoint(checkpoint_path(cfg, mode))
    report = evaluate_identifiability(model, datasets)
    out = Path(cfg.out)
    write_json(out / f"mcc_{mode}.json", stamp(cfg, cfg.seed, mode=mode, **report.to_json()))
    export_latent_scatter(model, datasets, out / f"scatter_{mode}.csv")
    print(f"mcc ({mode}): S={report.mcc_s:.3f} Z={report.mcc_z:.3f}")
    return 0


def run_theory_checks(cfg: ExperimentConfig, seed: int) -> list[dict]:
    """The four side-condition checks on the configured simulator."""
    scm = build_scm(seed, m=cfg.m, dims=cfg.dims)
    spec_s, spec_z = scm_expfam_specs(scm)
    rng = RngStream(seed, (95, 0))
    c_grid = [rng.normal((cfg.dims.q_c,)).ravel() for _ in range(8)]
    env_values = [domain_offset(e, np.zeros(cfg.dims.q_d)) for e in range(1, cfg.m + 1)]
    reports = [check_diversity(spec_s, spec_z, env_values, c_grid).to_json()]

    # Stein identities on the simulator's Gaussian latent conditionals.
    worst = 0.0
    tau_ok = True
    for c in c_grid[:5]:
        mean, log_std = scm.latent_params(c[None, :])
        for j in range(mean.shape[1]):
            mu, sigma = float(mean[0, j]), float(np.exp(log_std[0, j]))
            grid = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 4001)
            pdf = np.exp(-0.5 * ((grid - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
            res = stein_kernel(grid, pdf)
            rel = abs(res.expected_tau - res.variance) / res.variance
            worst = max(worst, rel)
            if np.any(res.tau[res.reliable] < -1e-10):
                tau_ok = False
    reports.append(
        {
            "check": "stein_identity",
            "pass": bool(worst < 1e-4 and tau_ok),
            "margin": 1e-4 - worst,
            "details": {"max_rel_error": worst, "kernel_nonnegative": tau_ok},
        }
    )

    # Prediction-gap bound on Gaussian latent-conditional pairs drawn from
    # different confounder values; only width-ordered pairs are applicable.
    applicable = 0
    held = 0
    min_slack = np.inf
    pair_rng = RngStream(seed, (96, 0))
    for _ in range(200):
        c1 = pair_rng.normal((cfg.dims.q_c,))
        c2 = pair_rng.normal((cfg.dims.q_c,))
        m1, ls1 = scm.latent_params(c1[None, :])
        m2, ls2 = scm.latent_params(c2[None, :])
        j = int(pair_rng.integers(0, m1.shape[1], 1)[0])
        pair = GaussianPosteriorPair(
            mu1=float(m1[0, j]),
            sigma1=float(np.exp(ls1[0, j])),
            mu2=float(m2[0, j]),
            sigma2=float(np.exp(ls2[0, j])),
            g=np.tanh,
            g_deriv=lambda s: 1.0 / np.cosh(s) ** 2,
        )
        res = ood_bound_check(pair)
        if res.applicable:
            applicable += 1
            held += int(bool(res.holds))
            min_slack = min(min_slack, res.slack)
    reports.append(
        {
            "check": "ood_bound",
            "pass": bool(applicable > 0 and held == applicable),
            "margin": float(min_slack if applicable else np.nan),
            "details": {"applicable": applicable, "held": held, "total_pairs": 200},
        }
    )

    # Interior-point proxy: sufficient statistics of simulated latents must
    # span a full-dimensional set.  The property is affine-invariant, so the
    # columns are standardized before the eigenvalue test.
    ds = sample_env(scm, 1, 400, RngStream(seed, (97, 0)))
    stats = np.hstack([ds.s, ds.s**2, ds.z, ds.z**2])
    stats = (stats - stats.mean(0)) / np.maximum(stats.std(0), 1e-300)
    reports.append(check_nonempty_open_set(stats, threshold=1e-6).to_json())
    return reports


def cmd_theory(cfg: ExperimentConfig) -> int:
    reports = run_theory_checks(cfg, cfg.seed)
    payload = stamp(
        cfg,
        cfg.seed,
        checks=reports,
        all_pass=all(r["pass"] for r in reports),
    )
    write_json(Path(cfg.out) / "theory.json", payload)
    for r in reports:
        print(f"theory {r['check']}: {'PASS' if r['pass'] else 'FAIL'}")
    return 0


def write_aggregate(path: Path, cfg: ExperimentConfig, rows: list[tuple[str, str, list[float]]]) -> None:
    """aggregate.csv: mode, metric, mean, std, n; config embedded as a comment.

    The output directory is omitted from the embedded config so the same
    experiment aggregated into different directories is byte-identical;
    reproduction supplies --out.
    """
    embedded = cfg.to_dict()
    embedded.pop("out")
    lines = ["# config " + json.dumps(embedded, sort_keys=True, separators=(",", ":")),
             "mode,metric,mean,std,n"]
    for mode, metric, values in rows:
        arr = np.asarray(values, dtype=np.float64)
        if arr.size:
            mean = FLOAT_FMT % arr.mean()
            std = FLOAT_FMT % arr.std()
        else:
            mean = std = "nan"
        lines.append(f"{mode},{metric},{mean},{std},{arr.size}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def suite_mode_plan(cfg: ExperimentConfig, mode: str) -> tuple[int, int]:
    """(environment count, samples per env) keeping total samples fixed."""
    if mode == "lacim_m3":
        m = 3
        total = cfg.m * cfg.samples_per_env
        return m, max(1, round(total / m))
    return cfg.m, cfg.samples_per_env


def cmd_suite(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    runs = []
    metrics: dict[tuple[str, str], list[float]] = {}
    for repeat in range(cfg.n_repeats):
        seed = cfg.seed + repeat
        for mode in SUITE_MODES:
            m, samples = suite_mode_plan(cfg, mode)
            record = {"repeat": repeat, "mode": mode, "seed": seed, "m": m,
                      "samples_per_env": samples}
            try:
                _, datasets = simulate_envs(cfg, seed, m, samples)
                result = train_mode(cfg, mode, datasets, seed, m)
                report = evaluate_identifiability(result.model, datasets)
                record.update(
                    mcc_s=report.mcc_s,
                    mcc_z=report.mcc_z,
                    final_loss=result.loss_trace[-1],
                    per_env={str(e): v for e, v in report.per_env.items()},
                )
                ckpt = out / f"repeat_{repeat}" / f"{mode}.json"
                ckpt.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(result.model, ckpt)
                for metric in ("mcc_s", "mcc_z", "final_loss"):
                    metrics.setdefault((mode, metric), []).append(record[metric])
            except (TrainingDiverged, FloatingPointError, ValueError) as exc:
                record["error"] = f"{type(exc).__name__}: {exc}"
            runs.append(record)
            write_json(out / f"repeat_{repeat}" / f"{mode}_run.json",
                       stamp(cfg, seed, **{k: v for k, v in record.items() if k != "seed"}))
            label = record.get("error") or (
                f"S={record['mcc_s']:.3f} Z={record['mcc_z']:.3f}"
            )
            print(f"suite repeat {repeat} {mode}: {label}")

    rows = [
        (mode, metric, metrics.get((mode, metric), []))
        for mode in SUITE_MODES
        for metric in ("mcc_s", "mcc_z", "final_loss")
    ]
    write_aggregate(out / "aggregate.csv", cfg, rows)
    write_json(out / "suite.json", stamp(cfg, cfg.seed, runs=runs))
    print(f"suite complete: {len(runs)} runs, aggregate at {out / 'aggregate.csv'}")
    return 0


def run_toy_repeat(cfg: ExperimentConfig, seed: int) -> dict:
    toy = cfg.toy
    params = toy.params()
    train_sets, test_set = build_toy_spurious(
        seed,
        m=toy.m,
        correlation_strengths=toy.correlation_strengths,
        test_strength=toy.test_strength,
        n_per_env=toy.samples_per_env,
        n_test=toy.test_samples,
        params=params,
    )
    train_cfg = dataclasses.replace(cfg.train, mode="lacim", seed=seed)
    model = LacimModel(
        m=toy.m,
        q_x=params.q_x,
        q_s=params.q_s,
        q_z=params.q_z,
        q_y=1,
        task="classification",
        n_classes=2,
        seed=seed,
    )
    lacim_result = train(model, train_sets, train_cfg)
    erm_result = train_erm_baseline(train_sets, dataclasses.replace(train_cfg, mode="erm"),
                                    task="classification")

    def erm_acc(ds):
        logits = erm_result.model.predict(ds.x)
        return accuracy(np.argmax(logits, axis=1), ds.y)

    rng = RngStream(seed, (61, 0))
    preds_test, _ = predict_batch(model, test_set.x, cfg.infer, rng)
    merged_train = merge_datasets(train_sets)
    rng_train = RngStream(seed, (62, 0))
    preds_train, _ = predict_batch(model, merged_train.x, cfg.infer, rng_train)
    return {
        "seed": seed,
        "erm_train_accuracy": erm_acc(merged_train),
        "erm_test_accuracy": erm_acc(test_set),
        "lacim_train_accuracy": accuracy(preds_train, merged_train.y),
        "lacim_test_accuracy": accuracy(preds_test, test_set.y),
    }


def cmd_toy_ood(cfg: ExperimentConfig) -> int:
    repeats = [run_toy_repeat(cfg, cfg.seed + r) for r in range(cfg.n_repeats)]
    keys = [k for k in repeats[0] if k != "seed"]
    summary = {k: float(np.mean([r[k] for r in repeats])) for k in keys}
    payload = stamp(cfg, cfg.seed, repeats=repeats, mean=summary)
    write_json(Path(cfg.out) / "toy.json", payload)
    for r in repeats:
        print(
            f"toy seed {r['seed']}: ERM test {r['erm_test_accuracy']:.3f} "
            f"vs latent-inference test {r['lacim_test_accuracy']:.3f}"
        )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lacim", description="multi-environment latent causal modeling pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "infer", "mcc", "theory", "suite", "toy-ood"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--repeats", type=int, default=None)
        if name in ("train", "infer", "mcc"):
            p.add_argument(
                "--mode", default="lacim", choices=("lacim", "pooled", "erm")
            )
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out, args.repeats)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.mode)
        if args.command == "infer":
            return cmd_infer(cfg, args.mode)
        if args.command == "mcc":
            return cmd_mcc(cfg, args.mode)
        if args.command == "theory":
            return cmd_theory(cfg)
        if args.command == "suite":
            return cmd_suite(cfg)
        if args.command == "toy-ood":
            return cmd_toy_ood(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
