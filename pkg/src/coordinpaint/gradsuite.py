"""Finite-difference checks of every differentiable operation.

Each case builds random float64 inputs for one shape and returns the worst
norm-wise and per-entry relative errors between backward and central
differences.
Sampler coordinates are kept away from integer values and the image border,
where the bilinear weights have kinks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    conv2d,
    elementwise,
    gradient_errors,
    gram,
    precision,
    resample2x,
)
from .losses import (
    FeatureExtractor,
    discriminator_loss,
    feature_loss,
    generator_adv_loss,
    masked_l1,
    nn_loss,
    stage1_loss,
    style_loss,
)
from .networks import GatedConvSpec, NetworkParams, gated_conv_forward, init_gated_conv
from .warp import sample_bilinear

TOLERANCE = 1e-5
ELEMENTWISE_TOLERANCE = 1e-6


@dataclass
class CaseResult:
    op: str
    shape: tuple
    error: tuple  # (normwise, elementwise)

    @property
    def ok(self) -> bool:
        return self.error[0] <= TOLERANCE and self.error[1] <= ELEMENTWISE_TOLERANCE


def _coords(rng, n, h, w, ho, wo):
    """Sample positions inside the image with fractional parts in [0.2, 0.8]."""
    x = rng.integers(0, w - 1, size=(n, ho, wo)) + rng.uniform(0.2, 0.8, size=(n, ho, wo))
    y = rng.integers(0, h - 1, size=(n, ho, wo)) + rng.uniform(0.2, 0.8, size=(n, ho, wo))
    return np.stack([x, y], axis=1)


def _conv(rng, shape):
    n, c, h, w, o, k, stride, pad = shape
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    return gradient_errors(lambda a, ww, bb: conv2d(a, ww, bb, stride=stride, padding=pad), [x, wt, b])


def _gated(rng, shape):
    n, c, h, w, o, act = shape
    spec = GatedConvSpec(c, o, activation=act)
    params = NetworkParams()
    with precision(np.float64):
        init_gated_conv(params, "g", spec, rng)
    names = list(params)
    arrays = [rng.standard_normal((n, c, h, w))] + [params[k].data.copy() + 0.1 * rng.standard_normal(params[k].shape) for k in names]

    def fn(x, *ps):
        table = NetworkParams(zip(names, ps))
        return gated_conv_forward(x, spec, table, "g")

    return gradient_errors(fn, arrays)


def _resample(rng, shape):
    n, c, h, w, direction = shape
    return gradient_errors(lambda x: resample2x(x, direction), [rng.standard_normal((n, c, h, w))])


def _sampler(rng, shape):
    n, c, h, w, ho, wo = shape
    src = rng.standard_normal((n, c, h, w))
    return gradient_errors(sample_bilinear, [src, _coords(rng, n, h, w, ho, wo)], eps=1e-7)


def _elementwise(rng, shape):
    op, dims = shape
    x = rng.standard_normal(dims)
    if op in ("abs", "leaky_relu", "relu", "elu"):
        # stay clear of the kink at zero
        x = np.where(np.abs(x) < 0.05, 0.1, x)
    if op in ("add", "sub", "mul", "div"):
        y = rng.standard_normal(dims)
        if op == "div":
            y = np.sign(y) * (np.abs(y) + 0.5)
        return gradient_errors(lambda a, b: elementwise(op, a, b), [x, y])
    return gradient_errors(lambda a: elementwise(op, a), [x])


def _masked_l1(rng, shape):
    n, c, h, w = shape
    a, b = rng.standard_normal((2, n, c, h, w))
    a = b + np.where(rng.random(a.shape) < 0.5, 1, -1) * rng.uniform(0.1, 1.0, a.shape)
    mask = rng.random((n, 1, h, w)) < 0.6
    return gradient_errors(lambda t: masked_l1(t, b, mask), [a])


def _stage1(rng, shape):
    n, th, tw, img = shape
    c = _coords(rng, n, img, img, th, tw)
    d = c + np.where(rng.random(c.shape) < 0.5, 1, -1) * rng.uniform(0.05, 0.15, c.shape)
    known = rng.random((n, th, tw)) < 0.5
    src = rng.random((n, 3, img, img))
    tgt = rng.random((n, 3, th, tw))
    tgt_known = rng.random((n, th, tw)) < 0.5

    def fn(dd, ss):
        t = sample_bilinear(ss, dd)
        return stage1_loss(c, known, dd, t, tgt, tgt_known, (img, img)).total

    return gradient_errors(fn, [d, src], eps=1e-7)


def _nn(rng, shape):
    n, c, h, w, win = shape
    target = rng.random((n, c, h, w))
    pred = rng.random((n, c, h, w))
    return gradient_errors(lambda p: nn_loss(p, target, win), [pred], eps=1e-7)


def _gan(rng, shape):
    real = rng.standard_normal(shape)
    fake = rng.standard_normal(shape)
    g = gradient_errors(generator_adv_loss, [fake])
    d = gradient_errors(discriminator_loss, [real, fake])
    return max(g[0], d[0]), max(g[1], d[1])


def _perceptual(rng, shape):
    n, h, w, which = shape
    ex = FeatureExtractor(seed=int(rng.integers(1 << 16)), widths=(4, 6, 8))
    target = rng.random((n, 3, h, w))
    pred = rng.random((n, 3, h, w))
    fn = feature_loss if which == "feature" else style_loss
    return gradient_errors(lambda p: fn(p, target, ex), [pred], eps=1e-7)


def _gram(rng, shape):
    return gradient_errors(gram, [rng.standard_normal(shape)])


CASES: dict[str, tuple[Callable, list]] = {
    "conv2d": (
        _conv,
        [(1, 2, 5, 5, 3, 3, 1, 1), (2, 3, 6, 7, 2, 3, 2, 1), (1, 1, 8, 8, 2, 4, 2, 1), (2, 2, 4, 6, 1, 1, 1, 0), (1, 3, 7, 5, 2, 3, 1, 0)],
    ),
    "gated_conv": (
        _gated,
        [(1, 2, 4, 4, 2, "leaky_relu"), (2, 1, 5, 3, 3, "elu"), (1, 3, 4, 6, 1, "none"), (2, 2, 3, 3, 2, "leaky_relu"), (1, 1, 6, 6, 2, "elu")],
    ),
    "resample2x": (
        _resample,
        [(1, 2, 4, 4, "down"), (2, 1, 6, 2, "down"), (1, 3, 3, 5, "up"), (2, 2, 2, 2, "up"), (1, 1, 8, 6, "down")],
    ),
    "sample_bilinear": (
        _sampler,
        [(1, 2, 5, 5, 3, 3), (2, 1, 4, 7, 2, 5), (1, 3, 6, 4, 4, 4), (2, 2, 3, 3, 3, 2), (1, 1, 8, 8, 5, 5)],
    ),
    "elementwise": (
        _elementwise,
        [
            (op, dims)
            for op, dims in zip(
                ("add", "sub", "mul", "div", "abs", "sigmoid", "tanh", "leaky_relu", "relu", "elu", "softplus", "square"),
                ((2, 3), (4,), (2, 2, 3), (3, 1, 2), (5,), (2, 4), (3, 3), (1, 2, 3, 2), (6,), (2, 5), (4, 2), (3,)),
            )
        ],
    ),
    "masked_l1": (_masked_l1, [(1, 3, 4, 4), (2, 2, 3, 5), (1, 1, 6, 6), (2, 3, 2, 2), (3, 2, 4, 3)]),
    "stage1_loss": (_stage1, [(1, 4, 4, 6), (2, 3, 5, 5), (1, 6, 6, 8), (2, 2, 2, 4), (1, 5, 3, 7)]),
    "nn_loss": (_nn, [(1, 3, 4, 4, 3), (2, 2, 5, 3, 5), (1, 1, 6, 6, 1), (2, 3, 3, 3, 3), (1, 2, 7, 5, 5)]),
    "gan_losses": (_gan, [(1, 1, 2, 2), (2, 1, 3, 3), (1, 1, 4, 2), (3, 1, 1, 1), (2, 1, 2, 5)]),
    "feature_loss": (_perceptual, [(1, 8, 8, "feature"), (2, 4, 8, "feature"), (1, 12, 8, "feature"), (1, 4, 4, "feature"), (2, 8, 4, "feature")]),
    "style_loss": (_perceptual, [(1, 8, 8, "style"), (2, 4, 8, "style"), (1, 12, 8, "style"), (1, 4, 4, "style"), (2, 8, 4, "style")]),
    "gram": (_gram, [(1, 2, 3, 3), (2, 3, 2, 4), (1, 1, 5, 5), (2, 4, 2, 2), (1, 3, 4, 1)]),
}


def run_suite(seed: int = 0, ops=None) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    results = []
    for op, (fn, shapes) in CASES.items():
        if ops is not None and op not in ops:
            continue
        for shape in shapes:
            results.append(CaseResult(op, shape, fn(rng, shape)))
    return results
