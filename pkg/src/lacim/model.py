"""Environment-indexed variational model with shared invariant decoders.

Per environment e the model has its own latent prior net and encoder head,
both conditioned on nothing but the one-hot environment indicator; the
decoders p(x | s, z) and p(y | s) are single networks shared by every
environment.  That sharing is the causal-invariance constraint: whatever
the environments do to the latent distribution, the mechanism from latents
to observations stays put.

The training objective for one environment (all in the minimization sense,
averaged over the batch) is

    loss = -log q(y|x) - E_{q(s,z|x)}[ (p(y|s) / q(y|x)) *
                                       log( p(x|s,z) p_e(s,z) / q(s,z|x) ) ]

with q(y|x) = E_{q(s,z|x)}[p(y|s)] estimated from the same L reparameterized
draws.  The total loss is the sum over environments.  x (and y, in the
regression case) are standardized with statistics frozen from the training
split, so the densities above live in standardized units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .numeric import (
    Adam,
    Mlp,
    Parameter,
    RngStream,
    gaussian_logpdf_rows,
)
from .scm import EnvDataset

RATIO_CLAMP_LO = 1e-6
RATIO_CLAMP_HI = 1e6

# Guard on the per-draw log densities inside the objective.  Honest draws sit
# around -10..-1e3; a Monte Carlo tail draw through a confident decoder can
# reach -1e18 and would otherwise trip the divergence abort in a single batch.
# The floor never binds in ordinary operation and can be switched off, which
# reproduces the raw objective (same contract as the ratio clamp).
DENSITY_CLAMP_LO = -1e6
DENSITY_CLAMP_HI = 1e6
DIVERGENCE_LIMIT = 1e10

MODES = ("lacim", "pooled", "erm")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite or past the divergence limit; carries the trace."""

    def __init__(self, message: str, loss_trace: list[float]):
        super().__init__(message)
        self.loss_trace = loss_trace


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.0
    batch_size: int = 512
    iterations: int = 2000
    mc_samples: int = 8
    mode: str = "lacim"
    seed: int = 0
    clamp_ratio: bool = True
    clamp_density: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class PosteriorParams:
    mean_s: np.ndarray
    mean_z: np.ndarray
    log_std_s: np.ndarray
    log_std_z: np.ndarray


class LacimModel:
    """Variational model over m environments.

    task is "regression" (dec_y emits Gaussian mean/log-std over q_y
    coordinates) or "classification" (dec_y emits n_classes logits).
    """

    def __init__(
        self,
        m: int,
        q_x: int,
        q_s: int,
        q_z: int,
        q_y: int = 1,
        task: str = "regression",
        n_classes: int = 2,
        seed: int = 0,
        trunk_width: int = 64,
        head_width: int = 64,
        dec_width: int = 32,
        slope: float = 0.5,
    ):
        if m < 1:
            raise ValueError(f"need m >= 1 environments, got {m}")
        if task not in ("regression", "classification"):
            raise ValueError(f"unknown task {task!r}")
        self.m = int(m)
        self.q_x = int(q_x)
        self.q_s = int(q_s)
        self.q_z = int(q_z)
        self.q_y = int(q_y)
        self.q_lat = self.q_s + self.q_z
        self.task = task
        self.n_classes = int(n_classes)
        self.seed = int(seed)
        self.trunk_width = int(trunk_width)
        self.head_width = int(head_width)
        self.dec_width = int(dec_width)
        self.slope = float(slope)

        rng = RngStream(seed, (20, 0))
        two_q = 2 * self.q_lat
        self.priors = [
            Mlp(f"prior{e}", [m, head_width, head_width, two_q], rng.substream(1, e), slope)
            for e in range(m)
        ]
        self.trunk = Mlp("trunk", [q_x, trunk_width], rng.substream(2), slope, activate_final=True)
        self.heads = [
            Mlp(f"head{e}", [trunk_width, head_width, two_q], rng.substream(3, e), slope)
            for e in range(m)
        ]
        self.dec_x = Mlp("dec_x", [self.q_lat, dec_width, dec_width, 2 * q_x], rng.substream(4), slope)
        y_out = 2 * q_y if task == "regression" else n_classes
        self.dec_y = Mlp("dec_y", [q_s, dec_width, dec_width, y_out], rng.substream(5), slope)

        # frozen training-split statistics; identity until train() sets them
        self.x_mean = np.zeros((1, q_x))
        self.x_std = np.ones((1, q_x))
        self.y_mean = np.zeros((1, q_y))
        self.y_std = np.ones((1, q_y))

    # -- parameter bookkeeping ---------------------------------------------

    def param_groups(self) -> dict[str, list[Parameter]]:
        groups = {"trunk": self.trunk.params(), "dec_x": self.dec_x.params(), "dec_y": self.dec_y.params()}
        for e in range(self.m):
            groups[f"prior{e}"] = self.priors[e].params()
            groups[f"head{e}"] = self.heads[e].params()
        return groups

    def params(self) -> list[Parameter]:
        out = []
        for name in sorted(self.param_groups()):
            out.extend(self.param_groups()[name])
        return out

    def env_onehot(self, e: int) -> np.ndarray:
        if not (1 <= e <= self.m):
            raise ValueError(f"environment label {e} out of range 1..{self.m}")
        onehot = np.zeros((1, self.m))
        onehot[0, e - 1] = 1.0
        return onehot

    # -- standardization -----------------------------------------------------

    def fit_standardization(self, datasets: list[EnvDataset]) -> None:
        x = np.concatenate([ds.x for ds in datasets], axis=0)
        self.x_mean = x.mean(axis=0, keepdims=True)
        self.x_std = np.maximum(x.std(axis=0, keepdims=True), 1e-8)
        if self.task == "regression":
            y = np.concatenate([np.atleast_2d(ds.y.T).T for ds in datasets], axis=0)
            self.y_mean = y.mean(axis=0, keepdims=True)
            self.y_std = np.maximum(y.std(axis=0, keepdims=True), 1e-8)

    def standardize_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def standardize_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    # -- posterior and prior parameter maps ----------------------------------

    def posterior_nodes(self, tape: ad.Tape, x_std: np.ndarray, e: int) -> tuple[ad.Node, ad.Node]:
        h = self.trunk.forward(tape, tape.constant(x_std))
        out = self.heads[e - 1].forward(tape, h)
        return ad.slice_cols(out, 0, self.q_lat), ad.slice_cols(out, self.q_lat, 2 * self.q_lat)

    def prior_nodes(self, tape: ad.Tape, e: int) -> tuple[ad.Node, ad.Node]:
        out = self.priors[e - 1].forward(tape, tape.constant(self.env_onehot(e)))
        return ad.slice_cols(out, 0, self.q_lat), ad.slice_cols(out, self.q_lat, 2 * self.q_lat)

    def encode(self, x: np.ndarray, e: int) -> PosteriorParams:
        """Posterior parameters for raw (unstandardized) x under head e."""
        h = self.trunk.forward_plain(self.standardize_x(np.atleast_2d(x)))
        out = self.heads[e - 1].forward_plain(h)
        mean, log_std = out[:, : self.q_lat], out[:, self.q_lat :]
        return PosteriorParams(
            mean_s=mean[:, : self.q_s],
            mean_z=mean[:, self.q_s :],
            log_std_s=log_std[:, : self.q_s],
            log_std_z=log_std[:, self.q_s :],
        )

    # -- decoder densities ----------------------------------------------------

    def decode_x_nodes(self, tape: ad.Tape, sz: ad.Node) -> tuple[ad.Node, ad.Node]:
        out = self.dec_x.forward(tape, sz)
        return ad.slice_cols(out, 0, self.q_x), ad.slice_cols(out, self.q_x, 2 * self.q_x)

    def log_py_nodes(self, tape: ad.Tape, s: ad.Node, y_std_rep: np.ndarray) -> ad.Node:
        """Row-wise log p(y | s); y_std_rep is standardized y (regression)
        or integer labels as a one-hot matrix (classification)."""
        out = self.dec_y.forward(tape, s)
        if self.task == "regression":
            mu = ad.slice_cols(out, 0, self.q_y)
            ls = ad.slice_cols(out, self.q_y, 2 * self.q_y)
            return gaussian_logpdf_rows(tape.constant(y_std_rep), mu, ls)
        log_softmax = ad.sub(out, ad.logsumexp_rows(out))
        return ad.sum_rows(ad.mul(log_softmax, tape.constant(y_std_rep)))

    def predict_y_plain(self, s: np.ndarray) -> np.ndarray:
        """Decoder-mean prediction (regression, raw units) or logits (classification)."""
        out = self.dec_y.forward_plain(np.atleast_2d(s))
        if self.task == "regression":
            return out[:, : self.q_y] * self.y_std + self.y_mean
        return out


def merge_datasets(datasets: list[EnvDataset]) -> EnvDataset:
    """Pool environments into a single dataset labeled env 1."""
    return EnvDataset(
        x=np.concatenate([ds.x for ds in datasets], axis=0),
        y=np.concatenate([ds.y for ds in datasets], axis=0),
        s=np.concatenate([ds.s for ds in datasets], axis=0),
        z=np.concatenate([ds.z for ds in datasets], axis=0),
        c=np.concatenate([ds.c for ds in datasets], axis=0),
        env=1,
    )


def _labels_to_onehot(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y).astype(np.int64).ravel()
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels outside 0..{n_classes - 1}")
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def elbo_env(
    model: LacimModel,
    tape: ad.Tape,
    x: np.ndarray,
    y: np.ndarray,
    e: int,
    rng: RngStream,
    mc_samples: int = 8,
    clamp_ratio: bool = True,
    clamp_density: bool = True,
) -> ad.Node:
    """Monte Carlo estimate of one environment's loss, mean over the batch.

    The same L draws serve both the q(y|x) estimate and the weighted
    reconstruction term, with the weights p(y|s)/q(y|x) computed in the
    log domain and passed through exp (optionally clamped).  With
    clamp_density on, each draw's log densities are clipped to
    [DENSITY_CLAMP_LO, DENSITY_CLAMP_HI] so a single tail draw cannot
    blow up the batch loss; the clip is far outside the range honest
    draws occupy.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("elbo_env: empty batch")
    L = int(mc_samples)
    x_std = model.standardize_x(x)

    mu_q, ls_q = model.posterior_nodes(tape, x_std, e)
    mu_p, ls_p = model.prior_nodes(tape, e)

    # draw L samples per row; rows are sample-major (row i*L+l is draw l of sample i)
    mu_rep = ad.repeat_rows(mu_q, L)
    ls_rep = ad.repeat_rows(ls_q, L)
    eps = rng.normal((n * L, model.q_lat))
    sz = ad.gaussian(mu_rep, ls_rep, eps)

    log_q = gaussian_logpdf_rows(sz, mu_rep, ls_rep)
    log_prior = gaussian_logpdf_rows(sz, mu_p, ls_p)

    mu_x, ls_x = model.decode_x_nodes(tape, sz)
    x_rep = np.repeat(x_std, L, axis=0)
    log_px = gaussian_logpdf_rows(tape.constant(x_rep), mu_x, ls_x)

    s_part = ad.slice_cols(sz, 0, model.q_s)
    if model.task == "regression":
        y2d = np.atleast_2d(y.T).T
        y_rep = np.repeat(model.standardize_y(y2d), L, axis=0)
    else:
        y_rep = np.repeat(_labels_to_onehot(y, model.n_classes), L, axis=0)
    log_py = model.log_py_nodes(tape, s_part, y_rep)

    if clamp_density:
        log_px = ad.clamp(log_px, DENSITY_CLAMP_LO, DENSITY_CLAMP_HI)
        log_prior = ad.clamp(log_prior, DENSITY_CLAMP_LO, DENSITY_CLAMP_HI)
        log_py = ad.clamp(log_py, DENSITY_CLAMP_LO, DENSITY_CLAMP_HI)

    log_qy = ad.add(ad.logsumexp_rows(ad.reshape(log_py, n, L)), -np.log(L))
    log_w = ad.sub(log_py, ad.repeat_rows(log_qy, L))
    w = ad.exp(log_w)
    if clamp_ratio:
        w = ad.clamp(w, RATIO_CLAMP_LO, RATIO_CLAMP_HI)

    inner = ad.add(log_px, ad.sub(log_prior, log_q))
    weighted = ad.reshape(ad.mul(w, inner), n, L)
    recon = ad.scale(ad.sum_rows(weighted), 1.0 / L)

    per_sample = ad.neg(ad.add(log_qy, recon))
    return ad.mean_all(per_sample)


def total_loss(
    model: LacimModel,
    tape: ad.Tape,
    batches: list[tuple[np.ndarray, np.ndarray, int]],
    rng: RngStream,
    mc_samples: int = 8,
    clamp_ratio: bool = True,
    clamp_density: bool = True,
) -> ad.Node:
    """Sum of per-environment losses, in the fixed order given."""
    if not batches:
        raise ValueError("total_loss: no batches")
    total = None
    for x, y, e in batches:
        term = elbo_env(
            model, tape, x, y, e, rng.substream(e), mc_samples, clamp_ratio, clamp_density
        )
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class TrainResult:
    model: object
    loss_trace: list[float]
    config: TrainConfig


def train(model: LacimModel, datasets: list[EnvDataset], cfg: TrainConfig) -> TrainResult:
    """Minibatch Adam on the summed multi-environment loss.

    Training touches only (x, y, env) from the datasets; latent ground
    truth stays evaluation-only.  Pooled mode expects the caller to have
    built an m=1 model and merged the data (same code path after that).
    """
    if cfg.mode == "erm":
        raise ValueError("use train_erm_baseline for erm mode")
    if cfg.mode == "pooled":
        if model.m != 1:
            raise ValueError("pooled mode trains an m=1 model on merged data")
        datasets = [merge_datasets(datasets)]
    envs = [ds.env for ds in datasets]
    if sorted(envs) != list(range(1, model.m + 1)):
        raise ValueError(f"expected env labels 1..{model.m}, got {envs}")

    model.fit_standardization(datasets)
    params = model.params()
    opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
    batch_rngs = {ds.env: RngStream(cfg.seed, (41, ds.env)) for ds in datasets}
    eps_rng = RngStream(cfg.seed, (42,))
    trace: list[float] = []

    for it in range(cfg.iterations):
        tape = ad.Tape()
        batches = []
        for ds in datasets:
            take = min(cfg.batch_size, ds.n)
            idx = batch_rngs[ds.env].integers(0, ds.n, take)
            batches.append((ds.x[idx], ds.y[idx], ds.env))
        try:
            loss = total_loss(
                model,
                tape,
                batches,
                eps_rng.substream(it),
                cfg.mc_samples,
                cfg.clamp_ratio,
                cfg.clamp_density,
            )
            value = float(loss.value[0, 0])
            trace.append(value)
            if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {value} at iteration {it}", trace)
            tape.backward(loss)
            grads = {p.name: tape.grad_for(p) for p in params}
        except FloatingPointError as exc:
            raise TrainingDiverged(f"numeric failure at iteration {it}: {exc}", trace) from exc
        opt.step(grads)
    return TrainResult(model=model, loss_trace=trace, config=cfg)


# ---------------------------------------------------------------------------
# ERM baseline: plain x -> y network, no latent structure
# ---------------------------------------------------------------------------


class ErmModel:
    def __init__(self, q_x: int, q_y: int, task: str, n_classes: int = 2, seed: int = 0, width: int = 64, slope: float = 0.5):
        self.task = task
        self.q_x = q_x
        self.q_y = q_y
        self.n_classes = n_classes
        out = q_y if task == "regression" else n_classes
        self.net = Mlp("erm", [q_x, width, width, out], RngStream(seed, (21, 0)), slope)
        self.x_mean = np.zeros((1, q_x))
        self.x_std = np.ones((1, q_x))
        self.y_mean = np.zeros((1, q_y))
        self.y_std = np.ones((1, q_y))

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self.net.forward_plain((np.atleast_2d(x) - self.x_mean) / self.x_std)
        if self.task == "regression":
            return out * self.y_std + self.y_mean
        return out  # logits


def train_erm_baseline(datasets: list[EnvDataset], cfg: TrainConfig, task: str = "classification") -> TrainResult:
    """Pooled supervised baseline: cross-entropy for labels, squared error
    for continuous targets, same optimizer protocol as the main model."""
    merged = merge_datasets(datasets)
    q_x = merged.x.shape[1]
    if task == "classification":
        n_classes = int(merged.y.max()) + 1 if merged.n else 2
        model = ErmModel(q_x, 1, task, n_classes=max(n_classes, 2), seed=cfg.seed)
    else:
        q_y = merged.y.shape[1]
        model = ErmModel(q_x, q_y, task, seed=cfg.seed)
    model.x_mean = merged.x.mean(axis=0, keepdims=True)
    model.x_std = np.maximum(merged.x.std(axis=0, keepdims=True), 1e-8)
    if task == "regression":
        model.y_mean = merged.y.mean(axis=0, keepdims=True)
        model.y_std = np.maximum(merged.y.std(axis=0, keepdims=True), 1e-8)

    params = model.net.params()
    opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
    batch_rng = RngStream(cfg.seed, (43,))
    x_all = (merged.x - model.x_mean) / model.x_std
    trace: list[float] = []
    for it in range(cfg.iterations):
        take = min(cfg.batch_size, merged.n)
        idx = batch_rng.integers(0, merged.n, take)
        tape = ad.Tape()
        out = model.net.forward(tape, tape.constant(x_all[idx]))
        if task == "classification":
            onehot = _labels_to_onehot(merged.y[idx], model.n_classes)
            log_softmax = ad.sub(out, ad.logsumexp_rows(out))
            loss = ad.neg(ad.mean_all(ad.sum_rows(ad.mul(log_softmax, tape.constant(onehot)))))
        else:
            y_std = (merged.y[idx] - model.y_mean) / model.y_std
            loss = ad.mean_all(ad.square(ad.sub(out, tape.constant(y_std))))
        value = float(loss.value[0, 0])
        trace.append(value)
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"loss {value} at iteration {it}", trace)
        tape.backward(loss)
        opt.step({p.name: tape.grad_for(p) for p in params})
    return TrainResult(model=model, loss_trace=trace, config=cfg)


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + flat float64 blob, bitwise round trip
# ---------------------------------------------------------------------------


def save_checkpoint(model: LacimModel, path) -> None:
    path = Path(path)
    entries = []
    arrays = []
    for p in model.params():
        entries.append({"name": p.name, "shape": list(p.value.shape)})
        arrays.append(p.value.ravel())
    for name, arr in (
        ("norm.x_mean", model.x_mean),
        ("norm.x_std", model.x_std),
        ("norm.y_mean", model.y_mean),
        ("norm.y_std", model.y_std),
    ):
        entries.append({"name": name, "shape": list(arr.shape)})
        arrays.append(arr.ravel())
    blob = np.concatenate(arrays) if arrays else np.zeros(0)
    manifest = {
        "format": 1,
        "kind": "lacim",
        "m": model.m,
        "q_x": model.q_x,
        "q_s": model.q_s,
        "q_z": model.q_z,
        "q_y": model.q_y,
        "task": model.task,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "trunk_width": model.trunk_width,
        "head_width": model.head_width,
        "dec_width": model.dec_width,
        "slope": model.slope,
        "params": entries,
        "blob": path.name + ".bin",
    }
    path.write_text(json.dumps(manifest, indent=1))
    (path.parent / manifest["blob"]).write_bytes(blob.astype(np.float64).tobytes())


def load_checkpoint(path) -> LacimModel:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("kind") != "lacim" or manifest.get("format") != 1:
        raise ValueError(f"{path}: not a recognized checkpoint manifest")
    model = LacimModel(
        m=manifest["m"],
        q_x=manifest["q_x"],
        q_s=manifest["q_s"],
        q_z=manifest["q_z"],
        q_y=manifest["q_y"],
        task=manifest["task"],
        n_classes=manifest["n_classes"],
        seed=manifest["seed"],
        trunk_width=manifest["trunk_width"],
        head_width=manifest["head_width"],
        dec_width=manifest["dec_width"],
        slope=manifest["slope"],
    )
    blob = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype=np.float64)
    by_name = {p.name: p for p in model.params()}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        chunk = blob[offset : offset + size].reshape(shape).copy()
        offset += size
        name = entry["name"]
        if name.startswith("norm."):
            setattr(model, name.split(".", 1)[1], chunk)
        else:
            if name not in by_name:
                raise ValueError(f"{path}: unknown parameter {name!r} in manifest")
            by_name[name].value = chunk
    if offset != blob.size:
        raise ValueError(f"{path}: blob has {blob.size} values, manifest consumed {offset}")
    return model
