"""Identifiability scoring (mean correlation coefficient) and basic metrics.

Recovered latents are only expected to match the ground truth up to
permutation and per-coordinate offset/scale, so the score is the mean of
absolute Pearson correlations under the best one-to-one matching of
learned to true coordinates.  Pearson correlation is already invariant to
per-column affine maps, which makes it the right primitive here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .scm import EnvDataset


@dataclass
class ComponentMatch:
    """One latent block's match: mean |corr| under the optimal assignment."""

    value: float
    assignment: tuple[int, ...]  # learned column i matches truth column assignment[i]
    matrix: np.ndarray  # |corr|, learned rows x truth columns


@dataclass
class MccReport:
    mcc_s: float
    mcc_z: float
    match_s: ComponentMatch
    match_z: ComponentMatch
    per_env: dict[int, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mcc_s": self.mcc_s,
            "mcc_z": self.mcc_z,
            "assignment": {"s": list(self.match_s.assignment), "z": list(self.match_z.assignment)},
            "matrix": {
                "s": self.match_s.matrix.tolist(),
                "z": self.match_z.matrix.tolist(),
            },
            "per_env": {str(e): v for e, v in self.per_env.items()},
        }


def _abs_corr_matrix(learned: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """|Pearson| for every learned/truth column pair; zero-variance columns
    contribute zero correlation rather than NaN."""
    lc = learned - learned.mean(axis=0, keepdims=True)
    tc = truth - truth.mean(axis=0, keepdims=True)
    ln = np.sqrt((lc * lc).sum(axis=0))
    tn = np.sqrt((tc * tc).sum(axis=0))
    cross = np.abs(lc.T @ tc)
    denom = np.outer(ln, tn)
    out = np.zeros_like(cross)
    ok = denom > 0
    out[ok] = cross[ok] / denom[ok]
    return out


def mcc(learned: np.ndarray, truth: np.ndarray) -> ComponentMatch:
    """Mean absolute correlation under the optimal one-to-one assignment."""
    learned = np.atleast_2d(learned)
    truth = np.atleast_2d(truth)
    if learned.shape != truth.shape:
        raise ValueError(f"shape mismatch: learned {learned.shape} vs truth {truth.shape}")
    if learned.shape[0] < 2:
        raise ValueError("need at least 2 samples for a correlation")
    matrix = _abs_corr_matrix(learned, truth)
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    assignment = tuple(int(cols[np.where(rows == i)[0][0]]) for i in range(matrix.shape[0]))
    value = float(matrix[rows, cols].mean())
    return ComponentMatch(value=value, assignment=assignment, matrix=matrix)


def evaluate_identifiability(model, datasets: list[EnvDataset]) -> MccReport:
    """Score posterior means against the simulator's latents.

    Each environment is encoded with its own head; the pooled score over
    all environments is the primary number, per-environment scores ride
    along for diagnostics.
    """
    means_s, means_z, per_env = [], [], {}
    for ds in datasets:
        e = min(ds.env, model.m)  # pooled models see every dataset through head 1
        post = model.encode(ds.x, e)
        means_s.append(post.mean_s)
        means_z.append(post.mean_z)
        if ds.n >= 2:
            per_env[ds.env] = {
                "mcc_s": mcc(post.mean_s, ds.s).value,
                "mcc_z": mcc(post.mean_z, ds.z).value,
            }
    all_s = np.concatenate(means_s, axis=0)
    all_z = np.concatenate(means_z, axis=0)
    truth_s = np.concatenate([ds.s for ds in datasets], axis=0)
    truth_z = np.concatenate([ds.z for ds in datasets], axis=0)
    match_s = mcc(all_s, truth_s)
    match_z = mcc(all_z, truth_z)
    return MccReport(
        mcc_s=match_s.value,
        mcc_z=match_z.value,
        match_s=match_s,
        match_z=match_z,
        per_env=per_env,
    )


def accuracy(pred_labels: np.ndarray, labels: np.ndarray) -> float:
    pred_labels = np.asarray(pred_labels).ravel()
    labels = np.asarray(labels).ravel()
    if pred_labels.shape != labels.shape:
        raise ValueError("prediction/label length mismatch")
    if labels.size == 0:
        raise ValueError("empty label array")
    return float(np.mean(pred_labels == labels))


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    return float(np.mean((pred - target) ** 2))


def export_latent_scatter(model, datasets: list[EnvDataset], path) -> None:
    """CSV of true latents next to posterior means, one row per sample."""
    q_s = datasets[0].s.shape[1]
    q_z = datasets[0].z.shape[1]
    header = (
        [f"true_s{i}" for i in range(q_s)]
        + [f"true_z{i}" for i in range(q_z)]
        + [f"post_mean_s{i}" for i in range(q_s)]
        + [f"post_mean_z{i}" for i in range(q_z)]
        + ["env"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ds in datasets:
            post = model.encode(ds.x, min(ds.env, model.m))
            for i in range(ds.n):
                row = (
                    [f"{v:.17g}" for v in ds.s[i]]
                    + [f"{v:.17g}" for v in ds.z[i]]
                    + [f"{v:.17g}" for v in post.mean_s[i]]
                    + [f"{v:.17g}" for v in post.mean_z[i]]
                    + [str(ds.env)]
                )
                writer.writerow(row)
