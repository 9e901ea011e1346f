"""Training objectives for both stages."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    absolute,
    channel_slice,
    concat_channels,
    conv2d,
    gram,
    leaky_relu,
    mean_all,
    resample2x,
    scale,
    softplus,
    sub,
    sum_all,
)
from .autodiff.tensor import add_scalar


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def masked_l1(a: Tensor, b, mask) -> Tensor:
    """sum(mask * |a - b|) / max(sum(mask), 1).

    ``mask`` may have singleton axes (e.g. N x 1 x H x W for a multi-channel
    ``a``); it is expanded for the numerator but counted unexpanded in the
    denominator, so per-pixel channel differences are summed.
    """
    b = _const(b, a)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=a.dtype)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ValueError(f"mask {mask.shape} does not broadcast to {a.shape}") from None
    denom = max(float(mask.sum()), 1.0)
    diff = absolute(sub(a, b)) * Tensor(full, dtype=a.dtype)
    return scale(sum_all(diff), 1.0 / denom)


@dataclass
class LossReport:
    """Named loss terms, their weights and the weighted total."""

    terms: dict
    weights: dict
    total: Tensor

    def values(self) -> dict:
        out = {k: float(v.item() if isinstance(v, Tensor) else v) for k, v in self.terms.items()}
        out["total"] = float(self.total.item())
        return out


def weighted_total(terms: dict, weights: dict) -> Tensor:
    total = None
    for name, term in terms.items():
        w = weights.get(name, 0.0)
        if w == 0 or not isinstance(term, Tensor):
            continue
        t = scale(term, w)
        total = t if total is None else total + t
    if total is None:
        total = Tensor(0.0)
    return total


STAGE1_WEIGHTS = {"stage1_coord_l1": 1.0, "stage1_color_l1": 1.0}


def normalize_coords(d: Tensor, image_size: tuple[int, int]) -> Tensor:
    """Scale pixel coordinates (N, 2, ...) to image-size units."""
    w, h = image_size
    return concat_channels(scale(channel_slice(d, 0, 1), 1.0 / w), scale(channel_slice(d, 1, 2), 1.0 / h))


def stage1_loss(
    c_coords: np.ndarray,
    c_known: np.ndarray,
    d: Tensor,
    texture: Tensor,
    target_texture: np.ndarray,
    target_known: np.ndarray,
    image_size: tuple[int, int],
    weights: Optional[dict] = None,
) -> LossReport:
    """Coordinate term on texels observed in C plus color term on texels observed in N.

    Args:
        c_coords: (N, 2, tH, tW) splatted source coordinates in pixels.
        c_known: (N, tH, tW) texels observed in the source.
        d: inpainted coordinates (N, 2, tH, tW) in pixels.
        texture: colors sampled from the source at ``d``.
        target_texture: target image splatted to texture space.
        target_known: texels observed in the target.
        image_size: source (W, H); coordinate differences are divided by it.
    """
    weights = dict(STAGE1_WEIGHTS if weights is None else weights)
    if c_coords.shape != d.shape or texture.shape != np.shape(target_texture):
        raise ValueError("texture shapes do not match")
    if c_known.shape != d.shape[:1] + d.shape[2:] or target_known.shape != c_known.shape:
        raise ValueError("mask shapes do not match the textures")
    cn = normalize_coords(Tensor(np.where(c_known[:, None], c_coords, 0.0), dtype=d.dtype), image_size)
    coord_term = masked_l1(normalize_coords(d, image_size), cn, c_known[:, None])
    color_term = masked_l1(texture, target_texture, target_known[:, None])
    terms = {"stage1_coord_l1": coord_term, "stage1_color_l1": color_term}
    return LossReport(terms, weights, weighted_total(terms, weights))


def stage1_rgb_loss(
    c_colors: np.ndarray,
    c_known: np.ndarray,
    texture: Tensor,
    target_texture: np.ndarray,
    target_known: np.ndarray,
    weights: Optional[dict] = None,
) -> LossReport:
    """Stage-1 objective of the color-inpainting ablation (both terms in color space)."""
    weights = dict(STAGE1_WEIGHTS if weights is None else weights)
    terms = {
        "stage1_coord_l1": masked_l1(texture, np.where(c_known[:, None], c_colors, 0.0), c_known[:, None]),
        "stage1_color_l1": masked_l1(texture, target_texture, target_known[:, None]),
    }
    return LossReport(terms, weights, weighted_total(terms, weights))


def nn_loss(pred: Tensor, target, window: int = 5) -> Tensor:
    """Nearest-neighbour L1: each predicted pixel matches its best pixel in a window of the target.

    Per pixel the channel-mean absolute difference is minimized over the
    ``window x window`` neighbourhood of the target (edge-replicated), then
    averaged. The gradient flows through the selected neighbour.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {t.shape}")
    n, c, h, w = pred.shape
    r = window // 2
    tp = np.pad(t, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    best = None
    best_dist = None
    for dy in range(window):
        for dx in range(window):
            cand = tp[:, :, dy : dy + h, dx : dx + w]
            dist = np.abs(pred.data - cand).mean(axis=1)
            if best is None:
                best, best_dist = cand.copy(), dist
            else:
                better = dist < best_dist
                best_dist = np.where(better, dist, best_dist)
                best = np.where(better[:, None], cand, best)
    value = np.asarray(best_dist.mean(), dtype=pred.dtype).reshape(())
    denom = pred.dtype.type(n * c * h * w)

    def backward(g):
        return (np.sign(pred.data - best) * (g.reshape(()) / denom),)

    return Tensor._from_op(value, (pred,), backward)


def generator_adv_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss: mean softplus(-D(fake))."""
    return mean_all(softplus(scale(fake_logits, -1.0)))


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Logistic loss, real half plus fake half."""
    return mean_all(softplus(scale(real_logits, -1.0))) + mean_all(softplus(fake_logits))


def gan_losses(disc, real_stack: tuple, fake_stack: tuple) -> tuple[Tensor, Tensor]:
    """(generator term, discriminator term) for (image, pose) stacks.

    The discriminator term sees a detached copy of the fake image so its
    gradient never reaches the generator.
    """
    real_img, real_pose = real_stack
    fake_img, fake_pose = fake_stack
    g_term = generator_adv_loss(disc.forward(fake_img, fake_pose))
    d_term = discriminator_loss(disc.forward(real_img, real_pose), disc.forward(fake_img.detach(), fake_pose))
    return g_term, d_term


class FeatureExtractor:
    """Frozen random conv stack with taps at three depths.

    Stands in for a pretrained perceptual network; any object with a
    ``features(x) -> list[Tensor]`` method can replace it.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (8, 16, 32), in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.layers = []
        cin = in_channels
        for w in widths:
            std = np.sqrt(2.0 / (cin * 9))
            weight = rng.standard_normal((w, cin, 3, 3)) * std
            bias = rng.uniform(-0.05, 0.05, size=w)
            weight.flags.writeable = False
            bias.flags.writeable = False
            self.layers.append((weight, bias))
            cin = w

    def features(self, x: Tensor) -> list:
        h = add_scalar(x, -0.5)
        taps = []
        for i, (w, b) in enumerate(self.layers):
            if i > 0:
                h = resample2x(h, "down")
            h = leaky_relu(conv2d(h, Tensor(w, dtype=x.dtype), Tensor(b, dtype=x.dtype), padding=1), 0.2)
            taps.append(h)
        return taps


def _target_features(extractor, target, like: Tensor) -> list:
    t = target.detach() if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=like.dtype)
    return [f.detach() for f in extractor.features(t)]


def feature_loss(pred: Tensor, target, extractor) -> Tensor:
    """Sum over taps of the mean absolute feature difference."""
    total = None
    for fp, ft in zip(extractor.features(pred), _target_features(extractor, target, pred)):
        term = mean_all(absolute(sub(fp, ft)))
        total = term if total is None else total + term
    return total


def style_loss(pred: Tensor, target, extractor) -> Tensor:
    """Sum over taps of the mean absolute Gram-matrix difference."""
    total = None
    for fp, ft in zip(extractor.features(pred), _target_features(extractor, target, pred)):
        term = mean_all(absolute(sub(gram(fp), gram(ft))))
        total = term if total is None else total + term
    return total


STAGE2_WEIGHTS = {"nn_loss": 1.0, "perceptual": 1.0, "style": 100.0, "adv_g": 0.1}
