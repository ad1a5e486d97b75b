"""Finite-difference gradient cases for every primitive, layer and loss.

Each builder takes a generator and returns ``(forward, tensors)``: calling
``forward()`` recomputes the output from the current contents of
``tensors``, which the checker perturbs in place. Everything runs in
float64 so that a central difference is accurate to well below 1e-4.
"""

from __future__ import annotations

import numpy as np

from eendss import losses as L
from eendss import nn
from eendss import tensor as T
from eendss.diarization import DiarizationNet
from eendss.dsp import Subsample
from eendss.separation import SeparationNet, TCNBlock
from eendss.tensor import Tensor

F64 = np.float64
STEP = 1e-6
ELEMENTWISE_LIMIT = 48
PROBES = 3


def leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True, dtype=F64)


def away_from_zero(rng, shape, margin=0.05, scale=1.0):
    x = rng.uniform(margin, scale, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _scalar(out: Tensor, weights: np.ndarray) -> float:
    return float(np.sum(out.data.astype(F64) * weights))


def check_gradients(forward, tensors, rng, step: float = STEP, elementwise_limit: int = ELEMENTWISE_LIMIT) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Small tensors are checked entry by entry; larger ones along random unit
    directions. The output is reduced to a scalar with fixed random weights.
    """
    out = forward()
    weights = rng.standard_normal(out.shape)
    for t in tensors:
        t.grad = None
    T.sum(out * Tensor(weights, dtype=F64)).backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(F64)
        base = t.data.copy()
        if t.size <= elementwise_limit:
            numeric = np.zeros(t.shape)
            flat = t.data.reshape(-1)
            for i in range(t.size):
                flat[i] = base.reshape(-1)[i] + step
                up = _scalar(forward(), weights)
                flat[i] = base.reshape(-1)[i] - step
                down = _scalar(forward(), weights)
                flat[i] = base.reshape(-1)[i]
                numeric.reshape(-1)[i] = (up - down) / (2 * step)
            err = np.linalg.norm(analytic - numeric)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
            worst = max(worst, err / scale)
        else:
            for _ in range(PROBES):
                v = rng.standard_normal(t.shape)
                v /= np.linalg.norm(v)
                t.data = base + step * v
                up = _scalar(forward(), weights)
                t.data = base - step * v
                down = _scalar(forward(), weights)
                t.data = base.copy()
                numeric = (up - down) / (2 * step)
                a = float(np.sum(analytic * v))
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        t.data = base
    T.get_tape().clear()
    return worst


def _with_grad(module, *inputs):
    module.to(F64)
    return list(inputs) + module.parameters()


DIRECTIONAL = set()  # cases checked only along random directions (many small parameter tensors)


def directional(build):
    DIRECTIONAL.add(build.__name__)
    return build


# --------------------------------------------------------------------------- primitives


def binary_op(op):
    def build(rng):
        a = leaf(rng.standard_normal((3, 4)))
        b = leaf(away_from_zero(rng, (4,), margin=0.5, scale=2.0))
        return (lambda: op(a, b)), [a, b]
    return build


def unary(op, low=-2.0, high=2.0, shape=(3, 5), kink=False):
    def build(rng):
        data = away_from_zero(rng, shape, 0.05, high) if kink else rng.uniform(low, high, size=shape)
        x = leaf(data)
        return (lambda: op(x)), [x]
    return build


def case_prelu(rng):
    x = leaf(away_from_zero(rng, (2, 3, 4)))
    a = leaf([rng.uniform(0.05, 0.5)])
    return (lambda: T.prelu(x, a)), [x, a]


def case_clamp(rng):
    x = leaf(rng.uniform(-1, 1, size=(4, 5)))
    lo, hi = -0.4, 0.5
    x.data[np.abs(x.data - lo) < 0.02] += 0.05
    x.data[np.abs(x.data - hi) < 0.02] -= 0.05
    return (lambda: T.clamp(x, lo, hi)), [x]


def case_layer_norm_last(rng):
    x = leaf(rng.standard_normal((2, 3, 5)))
    w = leaf(rng.standard_normal(5))
    b = leaf(rng.standard_normal(5))
    return (lambda: T.layer_norm(x, -1, 1e-5, w, b)), [x, w, b]


def case_layer_norm_global(rng):
    x = leaf(rng.standard_normal((2, 3, 6)))
    w = leaf(rng.standard_normal((3, 1)))
    b = leaf(rng.standard_normal((3, 1)))
    return (lambda: T.layer_norm(x, (1, 2), 1e-8, w, b)), [x, w, b]


def case_layer_norm_leading(rng):
    x = leaf(rng.standard_normal((4, 3, 2)))
    return (lambda: T.layer_norm(x, 0, 1e-5)), [x]


def case_sum_axes(rng):
    x = leaf(rng.standard_normal((2, 3, 4)))
    return (lambda: T.sum(x, axis=(0, 2), keepdims=True) * T.mean(x, axis=1)[:, None, :1]), [x]


def case_astype(rng):
    x = leaf(rng.standard_normal((3, 4)))
    return (lambda: T.astype(x, F64) * x), [x]


def case_shape_ops(rng):
    x = leaf(rng.standard_normal((2, 3, 4)))
    return (lambda: T.swapaxes(x.reshape(3, 2, 4).transpose(2, 0, 1), 0, 2) * 1.5), [x]


def case_getitem_basic(rng):
    x = leaf(rng.standard_normal((4, 5)))
    return (lambda: x[1:3, ::2] * x[0:2, 1:4:1][:, :3]), [x]


def case_getitem_advanced(rng):
    x = leaf(rng.standard_normal((4, 5)))
    rows = np.array([0, 2, 2, 3])
    cols = np.array([1, 1, 1, 4])
    return (lambda: x[rows, cols]), [x]


def case_concat_stack(rng):
    a = leaf(rng.standard_normal((2, 3)))
    b = leaf(rng.standard_normal((2, 2)))
    return (lambda: T.stack([T.concat([a, b], axis=1), T.concat([b, a], axis=1)], axis=1)), [a, b]


def case_pad(rng):
    x = leaf(rng.standard_normal((2, 3)))
    return (lambda: T.pad(x, [(1, 0), (2, 1)]) * 2.0), [x]


def case_matmul(rng):
    a = leaf(rng.standard_normal((2, 3, 4)))
    b = leaf(rng.standard_normal((4, 5)))
    c = leaf(rng.standard_normal((5, 3)))
    return (lambda: T.matmul(c, T.matmul(a, b))), [a, b, c]


def case_conv1d_dense(rng):
    x = leaf(rng.standard_normal((2, 3, 11)))
    w = leaf(rng.standard_normal((4, 3, 3)))
    b = leaf(rng.standard_normal(4))
    return (lambda: T.conv1d(x, w, b, stride=2, padding=1, dilation=2)), [x, w, b]


def case_conv1d_encoder(rng):
    x = leaf(rng.standard_normal((2, 1, 40)))
    w = leaf(rng.standard_normal((3, 1, 16)))
    return (lambda: T.conv1d(x, w, None, stride=8)), [x, w]


def case_conv1d_depthwise(rng):
    x = leaf(rng.standard_normal((2, 3, 9)))
    w = leaf(rng.standard_normal((3, 1, 3)))
    b = leaf(rng.standard_normal(3))
    return (lambda: T.conv1d(x, w, b, padding=2, dilation=2, groups=3)), [x, w, b]


def case_conv_transpose(rng):
    x = leaf(rng.standard_normal((2, 3, 4)))
    w = leaf(rng.standard_normal((3, 2, 5)))
    return (lambda: T.conv_transpose1d(x, w, stride=3)), [x, w]


def case_lstm(rng):
    n, steps, din, h = 2, 4, 3, 2
    x = leaf(rng.standard_normal((n, steps, din)))
    h0 = leaf(rng.standard_normal((n, h)))
    c0 = leaf(rng.standard_normal((n, h)))
    wih = leaf(rng.standard_normal((4 * h, din)) * 0.5)
    whh = leaf(rng.standard_normal((4 * h, h)) * 0.5)
    b = leaf(rng.standard_normal(4 * h) * 0.5)
    return (lambda: T.lstm(x, h0, c0, wih, whh, b)), [x, h0, c0, wih, whh, b]


# --------------------------------------------------------------------------- layers


@directional
def case_attention(rng):
    m = nn.MultiHeadSelfAttention(4, 2, rng)
    x = leaf(rng.standard_normal((2, 5, 4)))
    return (lambda: m(x)), _with_grad(m, x)


@directional
def case_transformer(rng):
    m = nn.TransformerEncoderLayer(4, 2, 6, rng)
    x = leaf(rng.standard_normal((2, 5, 4)))
    return (lambda: m(x)), _with_grad(m, x)


@directional
def case_tcn_block(rng):
    m = TCNBlock(3, 4, 3, 2, rng)
    x = leaf(rng.standard_normal((2, 3, 10)))
    return (lambda: m(x)), _with_grad(m, x)


def case_subsample(rng):
    m = Subsample(3, 4, 4, rng)
    x = leaf(rng.standard_normal((2, 3, 9)))
    return (lambda: m(x)), _with_grad(m, x)


@directional
def case_separation_net(rng):
    m = SeparationNet(rng, n_filters=4, kernel=16, stride=8, bottleneck=3, hidden=4, tcn_kernel=3, layers=2,
                      repeats=1, c_max=2)
    x = leaf(rng.standard_normal((1, 64)))
    return (lambda: m(x, 2)[0]), _with_grad(m, x)


@directional
def case_eda(rng):
    m = DiarizationNet(rng, bottleneck=3, d_model=4, heads=2, layers=1, ff_dim=6, subsample=2)
    e = leaf(rng.standard_normal((2, 3, 8)))

    def forward():
        emb = m.embed(e)
        att = m.attractors(emb, 3)
        return T.concat([DiarizationNet.posteriors(emb, att.attractors).reshape(2, -1), att.existence], axis=1)

    return forward, _with_grad(m, e)


# --------------------------------------------------------------------------- losses


def _probs(rng, shape):
    return leaf(rng.uniform(0.05, 0.95, size=shape))


def case_pit_diar(rng):
    p = _probs(rng, (2, 3, 6))
    y = rng.integers(0, 2, size=(2, 3, 6))
    return (lambda: L.pit_diar_loss(p, y)[0]), [p]


def case_pit_diar_mean(rng):
    p = _probs(rng, (2, 6))
    y = rng.integers(0, 2, size=(2, 6))
    return (lambda: L.pit_diar_loss(p, y, reduction="mean")[0]), [p]


def case_existence(rng):
    q = _probs(rng, (2, 4))
    return (lambda: L.existence_loss(q)), [q]


def case_si_sdr(rng):
    est = leaf(rng.standard_normal((2, 32)))
    ref = leaf(rng.standard_normal((2, 32)))
    return (lambda: L.si_sdr_loss(est + 0.5 * ref, ref)), [est, ref]


def case_pit_separation(rng):
    mix = rng.standard_normal((2, 3, 24))
    est = leaf(mix + 0.3 * rng.standard_normal(mix.shape))
    return (lambda: L.pit_separation_loss(est, mix)[0]), [est]


@directional
def case_multitask(rng):
    est = leaf(rng.standard_normal((1, 2, 24)))
    ref = rng.standard_normal((1, 2, 24))
    p = _probs(rng, (1, 2, 5))
    y = rng.integers(0, 2, size=(1, 2, 5))
    q = _probs(rng, (1, 3))
    w = tuple(rng.uniform(0.1, 1.0, size=3))

    def forward():
        return L.multitask_loss(L.pit_separation_loss(est + 0.5 * Tensor(ref, dtype=F64), ref)[0],
                                L.pit_diar_loss(p, y)[0], L.existence_loss(q), w).total

    return forward, [est, p, q]


CASES = {
    "add": binary_op(T.add),
    "sub": binary_op(T.sub),
    "mul": binary_op(T.mul),
    "div": binary_op(T.div),
    "power": unary(lambda x: T.power(x, 1.7), 0.3, 2.0),
    "square": unary(lambda x: x ** 2),
    "exp": unary(T.exp),
    "log": unary(T.log, 0.3, 2.0),
    "sqrt": unary(T.sqrt, 0.3, 2.0),
    "sigmoid": unary(T.sigmoid, -4, 4),
    "tanh": unary(T.tanh),
    "relu": unary(T.relu, kink=True),
    "prelu": case_prelu,
    "clamp": case_clamp,
    "softmax_last": unary(lambda x: T.softmax(x, -1)),
    "softmax_first": unary(lambda x: T.softmax(x, 0)),
    "layer_norm_last": case_layer_norm_last,
    "layer_norm_global": case_layer_norm_global,
    "layer_norm_leading": case_layer_norm_leading,
    "sum_mean": case_sum_axes,
    "astype": case_astype,
    "reshape_transpose": case_shape_ops,
    "getitem_basic": case_getitem_basic,
    "getitem_advanced": case_getitem_advanced,
    "concat_stack": case_concat_stack,
    "pad": case_pad,
    "matmul": case_matmul,
    "conv1d_dense": case_conv1d_dense,
    "conv1d_encoder": case_conv1d_encoder,
    "conv1d_depthwise": case_conv1d_depthwise,
    "conv_transpose1d": case_conv_transpose,
    "lstm": case_lstm,
    "attention": case_attention,
    "transformer_layer": case_transformer,
    "tcn_block": case_tcn_block,
    "subsample": case_subsample,
    "separation_net": case_separation_net,
    "eda": case_eda,
    "pit_diar_loss": case_pit_diar,
    "pit_diar_loss_mean": case_pit_diar_mean,
    "existence_loss": case_existence,
    "si_sdr_loss": case_si_sdr,
    "pit_separation_loss": case_pit_separation,
    "multitask_loss": case_multitask,
}

TOLERANCE = 1e-4
SEEDS = range(100)


def run_case(name: str, seed: int) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    build = CASES[name]
    forward, tensors = build(rng)
    limit = 0 if build.__name__ in DIRECTIONAL else ELEMENTWISE_LIMIT
    return check_gradients(forward, tensors, rng, elementwise_limit=limit)
