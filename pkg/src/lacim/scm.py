"""Ground-truth structural causal model and synthetic dataset generation.

The generative story, per environment e in 1..m:

    d^e  = (eps_d + 5 e) * 2,            eps_d ~ N(0, I)     (domain variable)
    c    ~ N(d^e, I)                                          (confounder)
    s, z ~ N(A_mu c, diag(exp(A_sig c))^2)                    (latent blocks)
    x    ~ N(mu_x(s, z), diag(sigma_x(s, z))^2)               (observation)
    y    ~ N(mu_y(s), diag(sigma_y(s))^2)                     (outcome, from s only)

mu/log-sigma maps are fixed random 3-layer MLPs (hidden width 16, LeakyReLU
slope 0.5 applied after every layer including the last).  The x and y
mechanisms never see d, c, or the environment index, which is what makes
interventional sampling trivial: clamp (s, z) and push through the same nets.

Log standard deviations are clamped to the package-wide range before
exponentiation so every draw stays finite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numeric import LOG_STD_HI, LOG_STD_LO, Mlp, Parameter, RngStream

HIDDEN_WIDTH = 16
MECHANISM_SLOPE = 0.5
ENV_SHIFT = 5.0
ENV_SCALE = 2.0


@dataclass(frozen=True)
class ScmDims:
    q_d: int = 2
    q_c: int = 2
    q_s: int = 2
    q_z: int = 2
    q_x: int = 4
    q_y: int = 2

    def __post_init__(self):
        for name in ("q_d", "q_c", "q_s", "q_z", "q_x", "q_y"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.q_c != self.q_d:
            raise ValueError("confounder and domain variable must share a dimension")
        # the observation map can only be injective when the latents do not
        # outnumber the observation coordinates
        if self.q_s + self.q_z > self.q_x:
            raise ValueError(
                f"need q_s + q_z <= q_x for an invertible-in-principle observation map, "
                f"got {self.q_s}+{self.q_z} vs q_x={self.q_x}"
            )


@dataclass
class EnvDataset:
    """One environment's worth of samples.  y is float (n, q_y) for the
    regression presets and integer (n,) labels for classification."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    z: np.ndarray
    c: np.ndarray
    env: int

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("y", "s", "z", "c"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"column block {name!r} has {getattr(self, name).shape[0]} rows, x has {n}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.y.ndim == 1


@dataclass
class Intervention:
    """Clamped latent values for do-style sampling.  z may be omitted when
    only the outcome mechanism is exercised."""

    s: np.ndarray
    z: Optional[np.ndarray] = None


class GroundTruthSCM:
    def __init__(self, seed: int, m: int, dims: ScmDims):
        if m < 1:
            raise ValueError(f"need at least one environment, got m={m}")
        self.seed = int(seed)
        self.m = int(m)
        self.dims = dims
        rng = RngStream(seed, (90, 0))
        q_lat = dims.q_s + dims.q_z
        bound = 1.0 / np.sqrt(dims.q_c)
        self.a_mu = rng.uniform(-bound, bound, (dims.q_c, q_lat))
        self.a_sig = rng.uniform(-bound, bound, (dims.q_c, q_lat))
        widths = [q_lat, HIDDEN_WIDTH, HIDDEN_WIDTH]
        self.f_x_mu = Mlp("scm.x_mu", widths + [dims.q_x], rng.substream(1), MECHANISM_SLOPE, activate_final=True)
        self.f_x_sig = Mlp("scm.x_sig", widths + [dims.q_x], rng.substream(2), MECHANISM_SLOPE, activate_final=True)
        widths_y = [dims.q_s, HIDDEN_WIDTH, HIDDEN_WIDTH]
        self.f_y_mu = Mlp("scm.y_mu", widths_y + [dims.q_y], rng.substream(3), MECHANISM_SLOPE, activate_final=True)
        self.f_y_sig = Mlp("scm.y_sig", widths_y + [dims.q_y], rng.substream(4), MECHANISM_SLOPE, activate_final=True)

    def latent_params(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and clamped log-std of (s, z) | c, row per sample."""
        mean = c @ self.a_mu
        log_std = np.clip(c @ self.a_sig, LOG_STD_LO, LOG_STD_HI)
        return mean, log_std

    def observation_params(self, s: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sz = np.concatenate([s, z], axis=1)
        mu = self.f_x_mu.forward_plain(sz)
        log_std = np.clip(self.f_x_sig.forward_plain(sz), LOG_STD_LO, LOG_STD_HI)
        return mu, log_std

    def outcome_params(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = self.f_y_mu.forward_plain(s)
        log_std = np.clip(self.f_y_sig.forward_plain(s), LOG_STD_LO, LOG_STD_HI)
        return mu, log_std


def build_scm(seed: int, m: int = 5, dims: ScmDims = ScmDims()) -> GroundTruthSCM:
    """Draw and freeze all mechanism parameters.  Same seed, same SCM."""
    return GroundTruthSCM(seed, m, dims)


def domain_offset(e: int, eps_d: np.ndarray) -> np.ndarray:
    """The per-sample domain variable d^e = (eps_d + 5 e) * 2."""
    return (np.asarray(eps_d, dtype=np.float64) + ENV_SHIFT * e) * ENV_SCALE


def sample_env(
    scm: GroundTruthSCM,
    e: int,
    n: int,
    rng: RngStream,
    obs_noise: bool = True,
) -> EnvDataset:
    """Ancestral sampling of one environment.  e is 1-based.

    obs_noise=False zeroes the observation and outcome noise so x and y are
    deterministic functions of (s, z); meant for debugging and invariance
    tests, not production data.
    """
    if not (1 <= e <= scm.m):
        raise ValueError(f"environment index {e} out of range 1..{scm.m}")
    if n < 0:
        raise ValueError(f"negative sample count {n}")
    dims = scm.dims
    d = domain_offset(e, rng.normal((n, dims.q_d)))
    c = d + rng.normal((n, dims.q_c))
    mean_sz, log_std_sz = scm.latent_params(c)
    sz = mean_sz + np.exp(log_std_sz) * rng.normal((n, dims.q_s + dims.q_z))
    s, z = sz[:, : dims.q_s], sz[:, dims.q_s :]
    mu_x, log_std_x = scm.observation_params(s, z)
    mu_y, log_std_y = scm.outcome_params(s)
    noise = 1.0 if obs_noise else 0.0
    x = mu_x + noise * np.exp(log_std_x) * rng.normal((n, dims.q_x))
    y = mu_y + noise * np.exp(log_std_y) * rng.normal((n, dims.q_y))
    return EnvDataset(x=x, y=y, s=s, z=z, c=c, env=e)


def sample_interventional(
    scm: GroundTruthSCM,
    intervention: Intervention,
    n: int,
    rng: RngStream,
) -> tuple[Optional[np.ndarray], np.ndarray]:
    """Draw (x, y) under do(s), do(z): mechanisms only, no d/c/environment.

    Returns (x, y); x is None when the intervention omits z.
    """
    s = np.asarray(intervention.s, dtype=np.float64).reshape(1, -1)
    if s.shape[1] != scm.dims.q_s:
        raise ValueError(f"intervention s has width {s.shape[1]}, expected {scm.dims.q_s}")
    s_rows = np.tile(s, (n, 1))
    mu_y, log_std_y = scm.outcome_params(s_rows)
    y = mu_y + np.exp(log_std_y) * rng.normal((n, scm.dims.q_y))
    x = None
    if intervention.z is not None:
        z = np.asarray(intervention.z, dtype=np.float64).reshape(1, -1)
        if z.shape[1] != scm.dims.q_z:
            raise ValueError(f"intervention z has width {z.shape[1]}, expected {scm.dims.q_z}")
        z_rows = np.tile(z, (n, 1))
        mu_x, log_std_x = scm.observation_params(s_rows, z_rows)
        x = mu_x + np.exp(log_std_x) * rng.normal((n, scm.dims.q_x))
    return x, y


# ---------------------------------------------------------------------------
# Spurious-correlation toy generator (classification)
# ---------------------------------------------------------------------------


@dataclass
class ToyParams:
    """Knobs for the binary toy task.

    The defaults put the invariant feature s at a *weaker* class separation
    than the spurious feature z.  That asymmetry is the point of the task:
    under the training alignments a predictor that leans on z looks better
    in-domain, so a purely discriminative fit latches onto z and collapses
    when the test alignment flips, while prediction from s alone keeps its
    (modest) accuracy everywhere.  With s_mean=0.7 the s-only Bayes accuracy
    is ~0.84; with z_mean=1.5 the pooled in-domain-optimal predictor scores
    ~0.97 on the training mixture but ~0.34 at test alignment 0.1.
    """

    q_s: int = 2
    q_z: int = 2
    q_x: int = 4
    s_mean: float = 0.7
    z_mean: float = 1.5
    s_std: float = 1.0
    z_std: float = 1.0
    obs_std: float = 0.1


class ToyGenerator:
    """Fixed random observation map shared by all toy environments.

    The map is a seeded random rotation of the stacked latents.  A rotation
    keeps every latent direction equally readable from x (condition number 1),
    so run-to-run differences reflect the correlation structure under study
    rather than the luck of a random nonlinear map's conditioning, while x
    still exposes no axis-aligned shortcut to either block.
    """

    def __init__(self, seed: int, params: ToyParams):
        self.params = params
        if params.q_x != params.q_s + params.q_z:
            raise ValueError("toy observation rotation needs q_x == q_s + q_z")
        rng = RngStream(seed, (91, 0))
        raw = rng.normal((params.q_x, params.q_x))
        q, r = np.linalg.qr(raw)
        self.rotation = q * np.sign(np.diag(r))  # fix QR sign ambiguity

    def sample(self, env: int, strength: float, n: int, rng: RngStream) -> EnvDataset:
        p = self.params
        y = (rng.uniform(0.0, 1.0, (n,)) < 0.5).astype(np.int64)
        y_sign = (2 * y - 1).astype(np.float64).reshape(n, 1)
        s = y_sign * p.s_mean + p.s_std * rng.normal((n, p.q_s))
        flip = rng.uniform(0.0, 1.0, (n, 1)) < strength
        align = np.where(flip, y_sign, -y_sign)
        z = align * p.z_mean + p.z_std * rng.normal((n, p.q_z))
        x = np.concatenate([s, z], axis=1) @ self.rotation.T
        x = x + p.obs_std * rng.normal((n, p.q_x))
        return EnvDataset(x=x, y=y, s=s, z=z, c=align, env=env)


def build_toy_spurious(
    seed: int,
    m: int = 2,
    correlation_strengths: Sequence[float] = (0.95, 0.99),
    test_strength: float = 0.1,
    n_per_env: int = 2000,
    n_test: int = 2000,
    params: ToyParams = ToyParams(),
) -> tuple[list[EnvDataset], EnvDataset]:
    """Binary task where z tracks the label tightly in training environments
    and flips against it at test time.  s carries the stable signal."""
    if len(correlation_strengths) != m:
        raise ValueError(f"need {m} correlation strengths, got {len(correlation_strengths)}")
    for rho in list(correlation_strengths) + [test_strength]:
        if not (0.0 <= rho <= 1.0):
            raise ValueError(f"correlation strength {rho} outside [0, 1]")
    gen = ToyGenerator(seed, params)
    rng = RngStream(seed, (91, 1))
    train = [
        gen.sample(e, correlation_strengths[e - 1], n_per_env, rng.substream(e))
        for e in range(1, m + 1)
    ]
    test = gen.sample(m + 1, test_strength, n_test, rng.substream(m + 1))
    return train, test


# ---------------------------------------------------------------------------
# CSV round-trip
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def export_dataset(ds: EnvDataset, path) -> None:
    """Write one environment to CSV: x*, y*, s*, z*, c*, env columns,
    floats at 17 significant digits so the round trip is exact."""
    y2d = ds.y if ds.y.ndim == 2 else ds.y.reshape(-1, 1)
    header = (
        [f"x{i}" for i in range(ds.x.shape[1])]
        + [f"y{i}" for i in range(y2d.shape[1])]
        + [f"s{i}" for i in range(ds.s.shape[1])]
        + [f"z{i}" for i in range(ds.z.shape[1])]
        + [f"c{i}" for i in range(ds.c.shape[1])]
        + ["env"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = (
                [_fmt(v) for v in ds.x[i]]
                + ([str(int(ds.y[i]))] if ds.is_classification else [_fmt(v) for v in ds.y[i]])
                + [_fmt(v) for v in ds.s[i]]
                + [_fmt(v) for v in ds.z[i]]
                + [_fmt(v) for v in ds.c[i]]
                + [str(ds.env)]
            )
            writer.writerow(row)


def _block_width(header: list[str], prefix: str) -> int:
    width = sum(1 for h in header if h.startswith(prefix) and h[len(prefix) :].isdigit())
    if width == 0:
        raise ValueError(f"CSV header missing {prefix}* columns")
    return width


def import_dataset(path, classification: bool = False) -> EnvDataset:
    """Inverse of export_dataset.  Malformed rows fail loudly with their
    1-based line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        widths = {p: _block_width(header, p) for p in ("x", "y", "s", "z", "c")}
        expected_cols = sum(widths.values()) + 1
        if header[-1] != "env":
            raise ValueError(f"{path}: last column must be 'env', got {header[-1]!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != expected_cols:
                raise ValueError(
                    f"{path}: row {lineno} has {len(row)} columns, expected {expected_cols}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
    data = np.array(rows, dtype=np.float64).reshape(len(rows), expected_cols)
    j = 0
    blocks = {}
    for p in ("x", "y", "s", "z", "c"):
        blocks[p] = data[:, j : j + widths[p]]
        j += widths[p]
    env_col = data[:, j]
    env = int(env_col[0]) if len(env_col) else 0
    if len(env_col) and not np.all(env_col == env_col[0]):
        raise ValueError(f"{path}: mixed env labels in one file")
    y = blocks["y"]
    if classification:
        y = y[:, 0].astype(np.int64)
    return EnvDataset(x=blocks["x"], y=y, s=blocks["s"], z=blocks["z"], c=blocks["c"], env=env)
