"""Geometric transfer between image space [x, y] and texture space [u, v].

Conventions used everywhere, file formats included:

* texture coordinates (u, v) are normalized to [0, 1]; texel centres sit at
  ``u * (texW - 1)`` and ``v * (texH - 1)``;
* image coordinates are in pixels with the origin at the centre of pixel
  (0, 0), so x runs over [0, W - 1];
* sampling outside the grid clamps to the border.

Forward warping (splatting) scatters values with bilinear weights and then
normalizes by the accumulated weight. Backward warping gathers values by
bilinear interpolation and is differentiable w.r.t. both the sampled image
and the sampling coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .autodiff import Tensor

SENTINEL = -10.0
WEIGHT_EPS = 1e-4
KNOWN_FRACTION = 0.999


@dataclass
class UvMap:
    """Per-pixel texture coordinates of body pixels.

    ``u``, ``v`` and ``valid`` are (H, W) arrays. Pixels with ``valid == 0``
    carry no constraint on (u, v) and must not be read.
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        self.valid = np.asarray(self.valid).astype(bool)
        if not (self.u.shape == self.v.shape == self.valid.shape) or self.u.ndim != 2:
            raise ValueError("u, v and valid must be 2-D arrays of equal shape")
        if self.valid.any():
            uu, vv = self.u[self.valid], self.v[self.valid]
            if uu.min() < 0 or uu.max() > 1 or vv.min() < 0 or vv.max() > 1:
                raise ValueError("valid pixels must have u, v in [0, 1]")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def empty(cls, height: int, width: int) -> "UvMap":
        z = np.zeros((height, width), dtype=np.float32)
        return cls(z, z.copy(), np.zeros((height, width), dtype=bool))

    def channels(self) -> np.ndarray:
        """(3, H, W) stack of u, v, valid with invalid pixels zeroed."""
        m = self.valid.astype(np.float32)
        return np.stack([self.u * m, self.v * m, m])

    def __eq__(self, other) -> bool:
        if not isinstance(other, UvMap):
            return NotImplemented
        return (
            np.array_equal(self.u, other.u)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.valid, other.valid)
        )


@dataclass
class CoordTexture:
    """Per-texel source-image coordinates in pixels, shape (2, texH, texW).

    Unknown texels hold ``SENTINEL`` in both channels.
    """

    coords: np.ndarray
    known: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        self.known = np.asarray(self.known).astype(bool)
        if self.coords.ndim != 3 or self.coords.shape[0] != 2 or self.coords.shape[1:] != self.known.shape:
            raise ValueError(f"coords must be (2, H, W) matching known mask, got {self.coords.shape}")
        self.coords = np.where(self.known[None], self.coords, np.float32(SENTINEL))

    @property
    def tex_height(self) -> int:
        return self.coords.shape[1]

    @property
    def tex_width(self) -> int:
        return self.coords.shape[2]

    @property
    def complete(self) -> bool:
        return bool(self.known.all())


@dataclass
class ColorTexture:
    """RGB texture (3, texH, texW) clamped to [0, 1], with a known mask."""

    rgb: np.ndarray
    known: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rgb = np.clip(np.asarray(self.rgb, dtype=np.float32), 0.0, 1.0)
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be (3, H, W), got {self.rgb.shape}")
        if self.known is None:
            self.known = np.ones(self.rgb.shape[1:], dtype=bool)
        self.known = np.asarray(self.known).astype(bool)


@dataclass
class WarpedMaps:
    """Target-frame maps: warped colors (3, H, W) and source coordinates (2, H, W).

    Non-body pixels are zero in both; ``coords`` is None when no coordinate
    texture exists (color-inpainting pipeline).
    """

    color: np.ndarray
    coords: Optional[np.ndarray]
    known: np.ndarray


# -- bilinear corner bookkeeping ---------------------------------------------


def _corners(px: np.ndarray, size: int):
    """Lower corner index, upper corner index and fractional weight along one axis."""
    px = np.clip(px, 0, size - 1)
    if size == 1:
        i0 = np.zeros(px.shape, dtype=np.int64)
        return i0, i0, np.zeros(px.shape, dtype=px.dtype)
    i0 = np.clip(np.floor(px).astype(np.int64), 0, size - 2)
    return i0, i0 + 1, (px - i0).astype(px.dtype)


def _scatter(values: np.ndarray, px: np.ndarray, py: np.ndarray, height: int, width: int):
    """Accumulate ``values`` (K, P) at positions (px, py) with bilinear weights.

    Returns the (K, height, width) value accumulator and the (height, width)
    weight accumulator.
    """
    x0, x1, fx = _corners(px.astype(np.float64), width)
    y0, y1, fy = _corners(py.astype(np.float64), height)
    idx = np.concatenate([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1])
    wts = np.concatenate([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    n = height * width
    weight = np.bincount(idx, weights=wts, minlength=n).reshape(height, width)
    acc = np.stack(
        [np.bincount(idx, weights=wts * np.tile(np.asarray(vals, np.float64), 4), minlength=n) for vals in values]
    ).reshape(len(values), height, width)
    return acc, weight


def _texel_positions(uvmap: UvMap, tex_w: int, tex_h: int):
    ys, xs = np.nonzero(uvmap.valid)
    pu = uvmap.u[ys, xs].astype(np.float64) * (tex_w - 1)
    pv = uvmap.v[ys, xs].astype(np.float64) * (tex_h - 1)
    return xs, ys, pu, pv


def splat_coordinates(source_map: UvMap, tex_w: int, tex_h: int) -> CoordTexture:
    """Rasterize each valid pixel's own (x, y) into texture space.

    Texels whose accumulated bilinear weight stays at or below
    ``WEIGHT_EPS`` are unknown.
    """
    xs, ys, pu, pv = _texel_positions(source_map, tex_w, tex_h)
    acc, weight = _scatter(np.stack([xs, ys]).astype(np.float64), pu, pv, tex_h, tex_w)
    known = weight > WEIGHT_EPS
    coords = np.where(known[None], acc / np.maximum(weight, WEIGHT_EPS)[None], SENTINEL)
    return CoordTexture(coords.astype(np.float32), known)


def splat_colors(source: np.ndarray, source_map: UvMap, tex_w: int, tex_h: int) -> ColorTexture:
    """Rasterize the colors of a (3, H, W) image into texture space."""
    source = np.asarray(source)
    if source.shape[1:] != (source_map.height, source_map.width):
        raise ValueError(f"image {source.shape} does not match uv map {source_map.height}x{source_map.width}")
    xs, ys, pu, pv = _texel_positions(source_map, tex_w, tex_h)
    vals = source[:, ys, xs].astype(np.float64)
    acc, weight = _scatter(vals, pu, pv, tex_h, tex_w)
    known = weight > WEIGHT_EPS
    rgb = np.where(known[None], acc / np.maximum(weight, WEIGHT_EPS)[None], 0.0)
    return ColorTexture(rgb.astype(np.float32), known)


# -- differentiable backward warping ------------------------------------------


def sample_bilinear(source: Tensor, coords: Tensor) -> Tensor:
    """Sample an NCHW ``source`` at pixel coordinates ``coords`` (N, 2, H', W').

    Channel 0 of ``coords`` is x, channel 1 is y. Coordinates are clamped to
    the image; the coordinate gradient is zero where clamping is active.
    """
    if source.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2 or coords.shape[0] != source.shape[0]:
        raise ValueError(f"expected NCHW source and N2HW coords, got {source.shape} and {coords.shape}")
    n, c, h, w = source.shape
    ho, wo = coords.shape[2:]
    dt = source.dtype
    cx = coords.data[:, 0].reshape(n, -1).astype(dt)
    cy = coords.data[:, 1].reshape(n, -1).astype(dt)
    x0, x1, fx = _corners(cx, w)
    y0, y1, fy = _corners(cy, h)
    flat = source.data.reshape(n, c, h * w)

    def gather(iy, ix):
        return np.take_along_axis(flat, (iy * w + ix)[:, None, :], axis=2)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    wx, wy = fx[:, None, :], fy[:, None, :]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    def backward(g):
        g = g.reshape(n, c, -1)
        gsrc = gcoord = None
        if source.requires_grad:
            offs = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            idx = np.concatenate(
                [np.broadcast_to(offs + (iy * w + ix)[:, None, :], g.shape) for iy, ix in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))],
                axis=2,
            )
            wts = np.concatenate(
                [g * ((1 - wx) * (1 - wy)), g * (wx * (1 - wy)), g * ((1 - wx) * wy), g * (wx * wy)], axis=2
            )
            gsrc = np.bincount(idx.reshape(-1), weights=wts.reshape(-1), minlength=n * c * h * w)
            gsrc = gsrc.reshape(source.shape).astype(dt)
        if coords.requires_grad:
            inside_x = ((cx >= 0) & (cx <= w - 1) & (w > 1))[:, None, :]
            inside_y = ((cy >= 0) & (cy <= h - 1) & (h > 1))[:, None, :]
            dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            gx = (g * dx * inside_x).sum(axis=1)
            gy = (g * dy * inside_y).sum(axis=1)
            gcoord = np.stack([gx, gy], axis=1).reshape(coords.shape).astype(coords.dtype)
        return gsrc, gcoord

    return Tensor._from_op(out.reshape(n, c, ho, wo).astype(dt), (source, coords), backward)


def _sample_array(source: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Non-differentiable bilinear lookup of a (C, H, W) array at (px, py) in pixels."""
    src = Tensor(source[None], dtype=np.float64)
    coords = Tensor(np.stack([px, py])[None], dtype=np.float64)
    return sample_bilinear(src, coords).data[0]


def texture_from_coords(source: np.ndarray, coord_texture: CoordTexture) -> ColorTexture:
    """Color texture obtained by sampling ``source`` (3, H, W) at every texel's coordinate."""
    if not coord_texture.complete:
        raise ValueError("coordinate texture has unknown texels; inpaint it first")
    rgb = _sample_array(np.asarray(source), coord_texture.coords[0], coord_texture.coords[1])
    return ColorTexture(rgb)


def warp_to_target(
    color_texture: ColorTexture, coord_texture: Optional[CoordTexture], target_map: UvMap
) -> WarpedMaps:
    """Backward-warp textures into the target frame through its uv map."""
    h, w = target_map.height, target_map.width
    th, tw = color_texture.rgb.shape[1:]
    valid = target_map.valid
    color = np.zeros((3, h, w), dtype=np.float32)
    coords = None if coord_texture is None else np.zeros((2, h, w), dtype=np.float32)
    known = np.zeros((h, w), dtype=bool)
    if valid.any():
        ys, xs = np.nonzero(valid)
        pu = target_map.u[ys, xs].astype(np.float64) * (tw - 1)
        pv = target_map.v[ys, xs].astype(np.float64) * (th - 1)
        color[:, ys, xs] = _sample_array(color_texture.rgb, pu[None], pv[None])[:, 0]
        frac = _sample_array(color_texture.known[None].astype(np.float64), pu[None], pv[None])[0, 0]
        ok = frac >= KNOWN_FRACTION
        if coord_texture is not None:
            if coord_texture.coords.shape[1:] != (th, tw):
                raise ValueError("color and coordinate textures must share extents")
            cfrac = _sample_array(coord_texture.known[None].astype(np.float64), pu[None], pv[None])[0, 0]
            ok &= cfrac >= KNOWN_FRACTION
            vals = _sample_array(coord_texture.coords, pu[None], pv[None])[:, 0]
            coords[:, ys[ok], xs[ok]] = vals[:, ok]
        known[ys[ok], xs[ok]] = True
    return WarpedMaps(color, coords, known)


def identity_meshgrid(height: int, width: int) -> np.ndarray:
    """(2, H, W) array whose channels hold each pixel's own x and y."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys]).astype(np.float32)


def downsample_warpfield(coords: np.ndarray, known: np.ndarray, factor: int):
    """Average a pixel-coordinate field over ``factor`` x ``factor`` blocks.

    Only known entries contribute. The block mean ``c`` is rescaled to
    ``(c - 0.5 * (factor - 1)) / factor`` so that it indexes the grid of a
    feature map that was average-pooled by the same factor (pixel centres at
    integers on both grids). Blocks with no known entry are unknown.

    Accepts (2, H, W) or batched (N, 2, H, W) fields with matching masks.
    Returns ``(coords, known)`` at the reduced resolution.
    """
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"factor must be one of 2, 4, 8 (or 1), got {factor}")
    batched = coords.ndim == 4
    c = coords if batched else coords[None]
    k = known if batched else known[None]
    n, _, h, w = c.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} are not divisible by {factor}")
    m = k.astype(np.float64)[:, None]
    num = (c * m).reshape(n, 2, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
    cnt = m.reshape(n, 1, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
    ok = cnt[:, 0] > 0
    mean = num / np.maximum(cnt, 1)
    out = np.where(ok[:, None], (mean - 0.5 * (factor - 1)) / factor, 0.0).astype(np.float32)
    return (out, ok) if batched else (out[0], ok[0])


def complete_warpfield(coords: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Replace unknown entries of a (N, 2, H, W) field with the identity meshgrid."""
    h, w = coords.shape[-2:]
    grid = identity_meshgrid(h, w)
    return np.where(known[:, None], coords, grid[None]).astype(np.float32)


def fill_unknown_nearest(texture: CoordTexture) -> CoordTexture:
    """Complete a coordinate texture by copying each unknown texel's nearest known texel."""
    if texture.complete:
        return texture
    if not texture.known.any():
        raise ValueError("cannot fill a texture with no known texels")
    _, (iy, ix) = ndimage.distance_transform_edt(~texture.known, return_indices=True)
    return CoordTexture(texture.coords[:, iy, ix], np.ones_like(texture.known))
