"""Parameters, MLPs, Adam, and reproducible random streams.

Numeric conventions used everywhere downstream:
  * float64 only, matrices are (rows=batch, cols=features);
  * linear layers store W as (fan_in, fan_out), biases as (1, fan_out);
  * weight init U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero;
  * log standard deviations are clamped to [LOG_STD_LO, LOG_STD_HI]
    before exponentiation, in the simulator and the model alike.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad

LOG_STD_LO = -20.0
LOG_STD_HI = 5.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class RngStream:
    """Deterministic random stream keyed by (seed, stream id).

    Two streams with the same key yield identical draw sequences; distinct
    keys are statistically independent.  Stream ids are tuples of small
    ints so a stream can hand out children without coordination.
    """

    def __init__(self, seed: int, stream: int | tuple[int, ...] = ()):
        if isinstance(stream, int):
            stream = (stream,)
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(ids))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape).astype(np.float64, copy=False)

    def integers(self, lo: int, hi: int, size=None) -> np.ndarray:
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


class Parameter:
    """Named trainable matrix."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        if self.value.ndim == 1:
            self.value = self.value.reshape(1, -1)
        if self.value.ndim != 2:
            raise ValueError(f"parameter {name!r} must be 2-D, got {self.value.shape}")

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    """Plain-array LeakyReLU used outside tapes (simulator, eval-only forward)."""
    if not (0.0 < slope <= 1.0):
        raise ValueError(f"leaky_relu slope must be in (0, 1], got {slope}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("leaky_relu: non-finite input")
    return np.where(x >= 0.0, x, slope * x)


def init_linear(rng: RngStream, fan_in: int, fan_out: int, name: str) -> tuple[Parameter, Parameter]:
    bound = 1.0 / np.sqrt(fan_in)
    w = Parameter(f"{name}.w", rng.uniform(-bound, bound, (fan_in, fan_out)))
    b = Parameter(f"{name}.b", np.zeros((1, fan_out)))
    return w, b


class Mlp:
    """Fully connected stack with LeakyReLU between layers.

    sizes = [in, h1, ..., out].  activate_final controls whether the last
    layer output also passes through the nonlinearity (the synthetic data
    generator wants that, model heads emitting Gaussian parameters do not).
    """

    def __init__(
        self,
        name: str,
        sizes: Sequence[int],
        rng: RngStream,
        slope: float = 0.5,
        activate_final: bool = False,
    ):
        if len(sizes) < 2:
            raise ValueError("Mlp needs at least input and output sizes")
        if not (0.0 < slope <= 1.0):
            raise ValueError(f"Mlp slope must be in (0, 1], got {slope}")
        self.name = name
        self.sizes = list(int(s) for s in sizes)
        self.slope = float(slope)
        self.activate_final = bool(activate_final)
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.layers.append(init_linear(rng, fi, fo, f"{name}.l{i}"))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[Parameter]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def forward(self, tape: ad.Tape, x: ad.Node) -> ad.Node:
        if x.value.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected {self.in_dim} input columns, got {x.value.shape[1]}")
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.affine(h, tape.leaf(w), tape.leaf(b))
            if i < last or self.activate_final:
                h = ad.leaky_relu(h, self.slope)
        return h

    def forward_plain(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass for evaluation and data generation."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h.reshape(1, -1)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.value + b.value
            if i < last or self.activate_final:
                h = leaky_relu(h, self.slope)
        return h


def adam_step(
    params: Sequence[Parameter],
    grads: dict[str, np.ndarray],
    state: dict[str, dict],
    lr: float,
    betas: tuple[float, float] = (ADAM_BETA1, ADAM_BETA2),
    eps: float = ADAM_EPS,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update in place.  state maps parameter name -> {m, v, t}.

    Weight decay is the classic L2 form folded into the gradient
    (g + weight_decay * p) before the moment updates.
    """
    b1, b2 = betas
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape} for {p.name!r}")
        if weight_decay != 0.0:
            g = g + weight_decay * p.value
        st = state.get(p.name)
        if st is None:
            st = {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value), "t": 0}
            state[p.name] = st
        st["t"] += 1
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
        m_hat = st["m"] / (1.0 - b1 ** st["t"])
        v_hat = st["v"] / (1.0 - b2 ** st["t"])
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Stateful wrapper around adam_step for a fixed parameter list."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float,
        betas: tuple[float, float] = (ADAM_BETA1, ADAM_BETA2),
        eps: float = ADAM_EPS,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.lr = float(lr)
        self.betas = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.state: dict[str, dict] = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)


def gaussian_sample(
    mean: ad.Node,
    log_std: ad.Node,
    rng: RngStream,
    n_rows: Optional[int] = None,
) -> ad.Node:
    """Reparameterized Gaussian draw on the tape; log_std clamped as usual."""
    rows = mean.value.shape[0] if n_rows is None else n_rows
    eps = rng.normal((rows, mean.value.shape[1]))
    return ad.gaussian(mean, log_std, eps, LOG_STD_LO, LOG_STD_HI)


def gaussian_logpdf_rows(t: ad.Node, mean: ad.Node, log_std: ad.Node) -> ad.Node:
    """Row-wise diagonal Gaussian log density: returns (n, 1).

    mean/log_std may be (1, d) and broadcast over the rows of t.  Fused
    into a single node (this sits in the training hot path): log_std is
    clamped, then

        logpdf = -0.5 sum(z^2) - sum(clamped log_std) - d/2 log(2 pi)

    with z = (t - mean) * exp(-clamped log_std).
    """
    if mean.value.shape != log_std.value.shape:
        raise ValueError("gaussian_logpdf_rows: mean/log_std shapes differ")
    d = t.value.shape[1]
    if mean.value.shape[1] != d:
        raise ValueError(f"gaussian_logpdf_rows: width mismatch {mean.value.shape} vs {t.value.shape}")
    ls = np.clip(log_std.value, LOG_STD_LO, LOG_STD_HI)
    inside = (log_std.value >= LOG_STD_LO) & (log_std.value <= LOG_STD_HI)
    inv_sigma = np.exp(-ls)
    z = (t.value - mean.value) * inv_sigma
    val = -0.5 * (z * z).sum(axis=1, keepdims=True) - ls.sum(axis=1, keepdims=True) \
        - 0.5 * d * np.log(2.0 * np.pi)
    out = ad.Node(t.tape, val, (t, mean, log_std), op="gaussian_logpdf")

    def backward():
        g = out.grad  # (n, 1)
        gz = g * (z * inv_sigma)
        t.accumulate(ad._unbroadcast(-gz, t.value.shape))
        mean.accumulate(ad._unbroadcast(gz, mean.value.shape))
        log_std.accumulate(ad._unbroadcast(g * (z * z - 1.0) * inside, log_std.value.shape))

    out.backward_fn = backward
    return out


def gaussian_logpdf_plain(t: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Array version of gaussian_logpdf_rows (same clamping), returns (n,)."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    ls = np.clip(np.atleast_2d(np.asarray(log_std, dtype=np.float64)), LOG_STD_LO, LOG_STD_HI)
    z = (t - mean) * np.exp(-ls)
    d = t.shape[1]
    return -0.5 * (z * z).sum(axis=1) - ls.sum(axis=1) - 0.5 * d * np.log(2.0 * np.pi)
