"""Test-time latent inference.

A trained model's encoder heads are tied to the training environments, so
an unseen test environment gets no amortized posterior.  Instead, each test
point's latents are recovered by direct optimization: draw a handful of
candidate (s, z) from a standard normal, keep the candidate with the best
generative objective, then refine it with Adam and return the best iterate
visited.  Prediction reads y off the shared decoder at the recovered s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import lacim.autodiff as ad
from lacim.model import LacimModel
from lacim.numeric import (
    Parameter,
    RngStream,
    adam_step,
    gaussian_logpdf_plain,
    gaussian_logpdf_rows,
)


@dataclass
class InferConfig:
    k_starts: int = 64
    iterations: int = 50
    lr: float = 0.002
    weight_decay: float = 0.0002
    lambda_s: float = 1e-3
    lambda_z: float = 1e-3
    penalty_sign: int = -1

    def __post_init__(self):
        if self.k_starts < 1:
            raise ValueError(f"k_starts must be >= 1, got {self.k_starts}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lambda_s < 0 or self.lambda_z < 0:
            raise ValueError("lambda_s and lambda_z must be >= 0")
        if self.penalty_sign not in (-1, 1):
            raise ValueError(f"penalty_sign must be -1 or +1, got {self.penalty_sign}")


@dataclass
class InferredLatents:
    """Per-sample recovered latents and the objective's optimization history."""

    s: np.ndarray  # (n, q_s)
    z: np.ndarray  # (n, q_z)
    objective: np.ndarray  # (n,) best objective value per sample
    trace: np.ndarray  # (iterations + 1, n) objective at each visited iterate


def _objective_plain(model: LacimModel, x_std: np.ndarray, sz: np.ndarray, cfg: InferConfig) -> np.ndarray:
    """log p(x|s,z) + penalty_sign * (lambda_s ||s||^2 + lambda_z ||z||^2), row-wise."""
    out = model.dec_x.forward_plain(sz)
    with np.errstate(over="ignore", invalid="ignore"):
        log_px = gaussian_logpdf_plain(x_std, out[:, : model.q_x], out[:, model.q_x :])
        norm_s = np.square(sz[:, : model.q_s]).sum(axis=1)
        norm_z = np.square(sz[:, model.q_s :]).sum(axis=1)
        return log_px + cfg.penalty_sign * (cfg.lambda_s * norm_s + cfg.lambda_z * norm_z)


def infer_latents(
    model: LacimModel, x: np.ndarray, cfg: InferConfig, rng: RngStream
) -> InferredLatents:
    """Recover (s, z) for each row of x by multi-start gradient optimization.

    The k_starts candidates are drawn once and shared by every sample, so
    each row's result depends only on its own x (permuting rows permutes
    results).  Selection and refinement both maximize the objective; the
    returned iterate is the best one visited, which makes the best-so-far
    curve monotone by construction.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if x.shape[1] != model.q_x:
        raise ValueError(f"expected x with {model.q_x} columns, got {x.shape[1]}")
    x_std = model.standardize_x(x)
    q = model.q_lat
    k = cfg.k_starts

    starts = rng.normal((k, q))
    start_obj = _objective_plain(
        model,
        np.repeat(x_std, k, axis=0),
        np.tile(starts, (n, 1)),
        cfg,
    ).reshape(n, k)
    finite = np.isfinite(start_obj)
    if not finite.all(axis=1).all():
        bad = np.where(~finite.any(axis=1))[0]
        if bad.size:
            raise ValueError(f"non-finite objective at every start for sample {bad[0]}")
        start_obj = np.where(finite, start_obj, -np.inf)
    chosen = start_obj.argmax(axis=1)

    latents = Parameter("latents", starts[chosen].copy())
    best_sz = latents.value.copy()
    best_obj = start_obj[np.arange(n), chosen].copy()
    trace = np.empty((cfg.iterations + 1, n))
    trace[0] = best_obj

    state: dict = {}
    for it in range(cfg.iterations):
        tape = ad.Tape()
        sz = tape.leaf(latents)
        mu_x, ls_x = model.decode_x_nodes(tape, sz)
        log_px = gaussian_logpdf_rows(tape.constant(x_std), mu_x, ls_x)
        s_block = ad.slice_cols(sz, 0, model.q_s)
        z_block = ad.slice_cols(sz, model.q_s, q)
        norm_s = ad.sum_rows(ad.square(s_block))
        norm_z = ad.sum_rows(ad.square(z_block))
        penalty = ad.add(
            ad.scale(norm_s, cfg.penalty_sign * cfg.lambda_s),
            ad.scale(norm_z, cfg.penalty_sign * cfg.lambda_z),
        )
        objective = ad.add(log_px, penalty)
        loss = ad.neg(ad.sum_all(objective))
        tape.backward(loss)
        adam_step(
            [latents],
            {"latents": tape.grad_for(latents)},
            state,
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
        )
        obj_now = _objective_plain(model, x_std, latents.value, cfg)
        improved = obj_now > best_obj
        best_obj = np.where(improved, obj_now, best_obj)
        best_sz[improved] = latents.value[improved]
        trace[it + 1] = obj_now

    return InferredLatents(
        s=best_sz[:, : model.q_s],
        z=best_sz[:, model.q_s :],
        objective=best_obj,
        trace=trace,
    )


def predict(model: LacimModel, s_star: np.ndarray) -> np.ndarray:
    """y prediction from recovered s: class labels (argmax of logits, ties
    to the lowest index) or the decoder mean in raw units (regression)."""
    s2d = np.atleast_2d(np.asarray(s_star, dtype=np.float64))
    out = model.predict_y_plain(s2d)
    if model.task == "classification":
        return out.argmax(axis=1)
    return out


def predict_batch(
    model: LacimModel, xs: np.ndarray, cfg: InferConfig, rng: RngStream
) -> tuple[np.ndarray, InferredLatents]:
    """Infer latents for every row of xs and predict y from the recovered s."""
    latents = infer_latents(model, xs, cfg, rng)
    return predict(model, latents.s), latents
