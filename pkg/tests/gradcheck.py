"""Central finite-difference oracle for tape gradients.

Independent of the autodiff code path: it only calls the forward pass
through a user-supplied closure and differences the scalar output.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from lacim.numeric import Parameter

FD_STEP = 1e-5
FD_TOL = 1e-5


def fd_gradients(
    loss_value: Callable[[], float],
    params: Sequence[Parameter],
    step: float = FD_STEP,
) -> dict[str, np.ndarray]:
    """Central differences of loss_value() w.r.t. every entry of every parameter."""
    grads: dict[str, np.ndarray] = {}
    for p in params:
        g = np.zeros_like(p.value)
        flat_p = p.value.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            up = loss_value()
            flat_p[i] = orig - step
            down = loss_value()
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * step)
        grads[p.name] = g
    return grads


def rel_err(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Max-norm error scaled by max(1, |reference|_inf)."""
    c = np.asarray(candidate, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(r))) if r.size else 0.0)
    return float(np.max(np.abs(c - r))) / denom if c.size else 0.0


def tape_gradients(build_loss: Callable[[], tuple], params: Sequence[Parameter]) -> dict[str, np.ndarray]:
    tape, loss = build_loss()
    tape.backward(loss)
    return {p.name: tape.grad_for(p).copy() for p in params}


def assert_grads_match(
    build_loss: Callable[[], tuple],
    params: Sequence[Parameter],
    tol: float = FD_TOL,
    step: float = FD_STEP,
) -> float:
    """build_loss() -> (tape, loss_node) built from current parameter values.

    Runs the tape backward, then checks every parameter's gradient against
    central differences.  Returns the worst relative error seen.
    """
    tape, loss = build_loss()
    tape.backward(loss)
    analytic = {p.name: tape.grad_for(p).copy() for p in params}

    def loss_value() -> float:
        t, l = build_loss()
        return float(l.value[0, 0])

    numeric = fd_gradients(loss_value, params, step=step)
    worst = 0.0
    for p in params:
        err = rel_err(analytic[p.name], numeric[p.name])
        assert err < tol, f"gradient mismatch for {p.name}: rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Randomized per-op graph builders.  Each returns (params, build_loss) where
# build_loss() constructs a fresh tape from the parameters' current values
# and reduces to a scalar through a fixed random projection, so gradients
# are non-uniform.  Inputs are sampled away from kinks (LeakyReLU at 0,
# clamp boundaries) where the derivative is not defined.
# ---------------------------------------------------------------------------

import lacim.autodiff as ad
from lacim.numeric import Mlp, RngStream, gaussian_logpdf_rows


def _away_from_zero(gen, shape, lo=0.1, hi=2.0):
    mag = gen.uniform(lo, hi, size=shape)
    sign = np.where(gen.uniform(0, 1, size=shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _proj_loss(tape, node, proj):
    return ad.sum_all(ad.mul(node, tape.constant(proj)))


def _check_matmul(gen):
    a = Parameter("a", gen.normal(size=(3, 4)))
    b = Parameter("b", gen.normal(size=(4, 2)))
    proj = gen.normal(size=(3, 2))

    def build():
        t = ad.Tape()
        out = ad.matmul(t.leaf(a), t.leaf(b))
        return t, _proj_loss(t, out, proj)

    return [a, b], build


def _check_affine(gen):
    x = Parameter("x", gen.normal(size=(5, 3)))
    w = Parameter("w", gen.normal(size=(3, 4)))
    b = Parameter("b", gen.normal(size=(1, 4)))
    proj = gen.normal(size=(5, 4))

    def build():
        t = ad.Tape()
        out = ad.affine(t.leaf(x), t.leaf(w), t.leaf(b))
        return t, _proj_loss(t, out, proj)

    return [x, w, b], build


def _check_add_broadcast(gen):
    a = Parameter("a", gen.normal(size=(4, 3)))
    b = Parameter("b", gen.normal(size=(1, 3)))
    proj = gen.normal(size=(4, 3))

    def build():
        t = ad.Tape()
        out = ad.add(t.leaf(a), t.leaf(b))
        return t, _proj_loss(t, out, proj)

    return [a, b], build


def _check_sub(gen):
    a = Parameter("a", gen.normal(size=(3, 3)))
    b = Parameter("b", gen.normal(size=(3, 3)))
    proj = gen.normal(size=(3, 3))

    def build():
        t = ad.Tape()
        out = ad.sub(t.leaf(a), t.leaf(b))
        return t, _proj_loss(t, out, proj)

    return [a, b], build


def _check_mul_broadcast(gen):
    a = Parameter("a", gen.normal(size=(4, 2)))
    b = Parameter("b", gen.normal(size=(1, 2)))
    proj = gen.normal(size=(4, 2))

    def build():
        t = ad.Tape()
        out = ad.mul(t.leaf(a), t.leaf(b))
        return t, _proj_loss(t, out, proj)

    return [a, b], build


def _check_neg_scale(gen):
    a = Parameter("a", gen.normal(size=(2, 5)))
    proj = gen.normal(size=(2, 5))
    k = float(gen.uniform(0.5, 2.0))

    def build():
        t = ad.Tape()
        out = ad.scale(ad.neg(t.leaf(a)), k)
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_leaky_relu(gen):
    a = Parameter("a", _away_from_zero(gen, (4, 3)))
    proj = gen.normal(size=(4, 3))
    slope = float(gen.uniform(0.05, 0.95))

    def build():
        t = ad.Tape()
        out = ad.leaky_relu(t.leaf(a), slope)
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_exp(gen):
    a = Parameter("a", gen.uniform(-1.5, 1.5, size=(3, 4)))
    proj = gen.normal(size=(3, 4))

    def build():
        t = ad.Tape()
        out = ad.exp(t.leaf(a))
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_log(gen):
    a = Parameter("a", gen.uniform(0.2, 3.0, size=(3, 4)))
    proj = gen.normal(size=(3, 4))

    def build():
        t = ad.Tape()
        out = ad.log(t.leaf(a))
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_square(gen):
    a = Parameter("a", gen.normal(size=(4, 4)))
    proj = gen.normal(size=(4, 4))

    def build():
        t = ad.Tape()
        out = ad.square(t.leaf(a))
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_clamp(gen):
    vals = _away_from_zero(gen, (4, 3), lo=0.1, hi=3.0)
    vals[np.abs(np.abs(vals) - 1.5) < 0.05] = 0.5  # keep clear of the clamp edges
    a = Parameter("a", vals)
    proj = gen.normal(size=(4, 3))

    def build():
        t = ad.Tape()
        out = ad.clamp(t.leaf(a), -1.5, 1.5)
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_reductions(gen):
    a = Parameter("a", gen.normal(size=(3, 5)))
    proj_r = gen.normal(size=(3, 1))
    proj_c = gen.normal(size=(1, 5))

    def build():
        t = ad.Tape()
        leaf = t.leaf(a)
        part = ad.add(
            _proj_loss(t, ad.sum_rows(leaf), proj_r),
            _proj_loss(t, ad.sum_cols(leaf), proj_c),
        )
        return t, ad.add(part, ad.add(ad.sum_all(leaf), ad.mean_all(leaf)))

    return [a], build


def _check_concat_slice(gen):
    a = Parameter("a", gen.normal(size=(3, 2)))
    b = Parameter("b", gen.normal(size=(3, 4)))
    proj = gen.normal(size=(3, 3))

    def build():
        t = ad.Tape()
        joined = ad.concat_cols([t.leaf(a), t.leaf(b)])
        out = ad.slice_cols(joined, 1, 4)
        return t, _proj_loss(t, out, proj)

    return [a, b], build


def _check_repeat_rows(gen):
    a = Parameter("a", gen.normal(size=(3, 2)))
    proj = gen.normal(size=(9, 2))

    def build():
        t = ad.Tape()
        out = ad.repeat_rows(t.leaf(a), 3)
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_col_broadcast(gen):
    a = Parameter("a", gen.normal(size=(4, 3)))
    b = Parameter("b", gen.normal(size=(4, 1)))
    proj1 = gen.normal(size=(4, 3))
    proj2 = gen.normal(size=(4, 3))

    def build():
        t = ad.Tape()
        la, lb = t.leaf(a), t.leaf(b)
        out = ad.add(_proj_loss(t, ad.sub(la, lb), proj1), _proj_loss(t, ad.mul(la, lb), proj2))
        return t, out

    return [a, b], build


def _check_reshape(gen):
    a = Parameter("a", gen.normal(size=(6, 1)))
    proj = gen.normal(size=(2, 3))

    def build():
        t = ad.Tape()
        out = ad.reshape(t.leaf(a), 2, 3)
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_logsumexp(gen):
    a = Parameter("a", gen.normal(size=(4, 6)) * 2.0)
    proj = gen.normal(size=(4, 1))

    def build():
        t = ad.Tape()
        out = ad.logsumexp_rows(t.leaf(a))
        return t, _proj_loss(t, out, proj)

    return [a], build


def _check_gaussian(gen):
    mean = Parameter("mean", gen.normal(size=(4, 3)))
    log_std = Parameter("log_std", gen.uniform(-1.5, 1.0, size=(4, 3)))
    eps = gen.normal(size=(4, 3))
    proj = gen.normal(size=(4, 3))

    def build():
        t = ad.Tape()
        out = ad.gaussian(t.leaf(mean), t.leaf(log_std), eps)
        return t, _proj_loss(t, out, proj)

    return [mean, log_std], build


def _check_gaussian_logpdf(gen):
    mean = Parameter("mean", gen.normal(size=(1, 3)))
    log_std = Parameter("log_std", gen.uniform(-1.0, 1.0, size=(1, 3)))
    tval = gen.normal(size=(5, 3))
    proj = gen.normal(size=(5, 1))

    def build():
        t = ad.Tape()
        out = gaussian_logpdf_rows(t.constant(tval), t.leaf(mean), t.leaf(log_std))
        return t, _proj_loss(t, out, proj)

    return [mean, log_std], build


def _mlp_preact_margin(net, x):
    h = x
    margin = np.inf
    for i, (w, b) in enumerate(net.layers):
        pre = h @ w.value + b.value
        margin = min(margin, float(np.min(np.abs(pre))))
        h = np.where(pre >= 0, pre, net.slope * pre)
    return margin


def _check_mlp(gen):
    # resample until every hidden pre-activation is clear of the kink,
    # otherwise the FD probe can cross it and look like a gradient bug
    while True:
        seed = int(gen.integers(0, 2**31))
        net = Mlp("net", [3, 6, 6, 2], RngStream(seed, 0), slope=0.5)
        x = _away_from_zero(gen, (4, 3), lo=0.2, hi=1.5)
        if _mlp_preact_margin(net, x) > 1e-3:
            break
    proj = gen.normal(size=(4, 2))

    def build():
        t = ad.Tape()
        out = net.forward(t, t.constant(x))
        return t, _proj_loss(t, out, proj)

    return net.params(), build


OP_CHECKS = [
    ("matmul", _check_matmul),
    ("affine", _check_affine),
    ("add_broadcast", _check_add_broadcast),
    ("sub", _check_sub),
    ("mul_broadcast", _check_mul_broadcast),
    ("neg_scale", _check_neg_scale),
    ("leaky_relu", _check_leaky_relu),
    ("exp", _check_exp),
    ("log", _check_log),
    ("square", _check_square),
    ("clamp", _check_clamp),
    ("reductions", _check_reductions),
    ("concat_slice", _check_concat_slice),
    ("repeat_rows", _check_repeat_rows),
    ("col_broadcast", _check_col_broadcast),
    ("reshape", _check_reshape),
    ("logsumexp_rows", _check_logsumexp),
    ("gaussian", _check_gaussian),
    ("gaussian_logpdf", _check_gaussian_logpdf),
    ("mlp", _check_mlp),
]


def run_op_check(name: str, seed: int, tol: float = FD_TOL) -> float:
    builder = dict(OP_CHECKS)[name]
    gen = np.random.default_rng(seed)
    params, build = builder(gen)
    return assert_grads_match(build, params, tol=tol)
