"""Synthetic {S, M_S, N, M_N} quadruplets with analytic ground-truth textures.

A textured surface of revolution (cylinder or ellipsoid) around the image's
vertical axis is viewed by an orthographic camera. Yaw rotates the body, so
texture coordinates are analytic:

    phi = 2 * pi * (u - 0.5)          longitude, u = 0.5 faces the camera at yaw 0
    v   = (y - top) / body_height     0 at the top of the body

A pixel at horizontal offset ``s * r`` from the axis sees longitude
``arcsin(s) - yaw``. Mirror-symmetric textures satisfy
``tex(u) = tex(1 - u)`` (left/right symmetry), so a side view reveals the
exact mirror image of the hidden side. Rendering samples the texture with
the same bilinear convention as :mod:`coordinpaint.warp`.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .warp import UvMap, _sample_array

PATTERNS = ("stripes", "checker", "blobs", "mixed")
SHAPES = ("cylinder", "ellipsoid")


@dataclass
class SceneConfig:
    image_size: int = 64
    tex_size: int = 64
    shape: str = "cylinder"
    pattern: str = "mixed"
    mirror: bool = True
    # degrees; source yaw is uniform in the range, the target adds a delta
    source_yaw: tuple = (0.0, 360.0)
    yaw_delta: tuple = (-180.0, 180.0)
    radius: tuple = (0.26, 0.32)
    body_height: tuple = (0.72, 0.84)
    center_jitter: float = 0.03
    head_fraction: float = 0.2
    smoothing: float = 1.0

    def __post_init__(self):
        self.source_yaw = tuple(self.source_yaw)
        self.yaw_delta = tuple(self.yaw_delta)
        self.radius = tuple(self.radius)
        self.body_height = tuple(self.body_height)
        if self.image_size < 1 or self.tex_size < 2:
            raise ValueError("image_size must be >= 1 and tex_size >= 2")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}")

    @classmethod
    def side_view_flip(cls, **overrides) -> "SceneConfig":
        """Side-on source views and a roughly half-turn to the target.

        With a mirror-symmetric texture the hidden side of the source view is
        the mirror of its visible side.
        """
        base = dict(source_yaw=(70.0, 110.0), yaw_delta=(160.0, 200.0))
        base.update(overrides)
        cfg = cls(**base)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Geometry:
    cx: float
    cy: float
    radius: float
    height: float
    shape: str

    @property
    def top(self) -> float:
        return self.cy - self.height / 2


@dataclass
class ScenePair:
    source: np.ndarray
    source_map: UvMap
    target: np.ndarray
    target_map: UvMap
    texture: np.ndarray
    source_yaw: float
    target_yaw: float
    geometry: Geometry = field(repr=False)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _palette(rng, k):
    return rng.uniform(0.05, 0.95, size=(k, 3))


def _pattern(rng, kind: str, th: int, tw: int) -> np.ndarray:
    vv, uu = np.mgrid[0:th, 0:tw].astype(np.float64)
    uu /= max(tw - 1, 1)
    vv /= max(th - 1, 1)
    if kind == "mixed":
        kind = ("stripes", "checker", "blobs")[rng.integers(3)]
    if kind == "stripes":
        c = _palette(rng, 2)
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 6)
        wave = np.sin(2 * np.pi * freq * (uu * np.cos(ang) + vv * np.sin(ang)) + rng.uniform(0, 2 * np.pi))
        t = _smoothstep(0.5 + 0.9 * wave)
    elif kind == "checker":
        c = _palette(rng, 2)
        fu, fv = rng.integers(2, 7), rng.integers(2, 6)
        wave = np.sin(2 * np.pi * fu * uu + rng.uniform(0, 6.3)) * np.sin(2 * np.pi * fv * vv + rng.uniform(0, 6.3))
        t = _smoothstep(0.5 + 0.7 * wave)
    else:
        base = _palette(rng, 1)[0]
        img = np.broadcast_to(base[:, None, None], (3, th, tw)).copy()
        for _ in range(int(rng.integers(6, 14))):
            col = _palette(rng, 1)[0]
            mu, mv = rng.uniform(0, 1, 2)
            sd = rng.uniform(0.05, 0.12)
            wgt = np.exp(-((uu - mu) ** 2 + (vv - mv) ** 2) / (2 * sd * sd))[None]
            img = img * (1 - wgt) + col[:, None, None] * wgt
        return img
    return c[0][:, None, None] * (1 - t)[None] + c[1][:, None, None] * t[None]


def make_texture(rng: np.random.Generator, config: SceneConfig) -> np.ndarray:
    """Procedural (3, tex, tex) texture; the top ``head_fraction`` rows form an identity patch."""
    th = tw = config.tex_size
    tex = _pattern(rng, config.pattern, th, tw)
    if config.head_fraction > 0:
        rows = head_rows(config)
        tex[:, :rows] = _pattern(rng, "blobs", th, tw)[:, :rows]
    if config.smoothing > 0:
        tex = ndimage.gaussian_filter(tex, sigma=(0, config.smoothing, config.smoothing), mode="nearest")
    if config.mirror:
        half = tw // 2
        tex[:, :, tw - half :] = tex[:, :, :half][:, :, ::-1]
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def make_geometry(rng: np.random.Generator, config: SceneConfig) -> Geometry:
    n = config.image_size
    jitter = config.center_jitter * n
    return Geometry(
        cx=(n - 1) / 2 + rng.uniform(-jitter, jitter),
        cy=(n - 1) / 2 + rng.uniform(-jitter, jitter),
        radius=rng.uniform(*config.radius) * n,
        height=rng.uniform(*config.body_height) * n,
        shape=config.shape,
    )


def uv_map(geometry: Geometry, yaw_degrees: float, size: int) -> UvMap:
    """Analytic pixel -> (u, v) mapping of the body at the given yaw."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    v = (ys - geometry.top) / geometry.height
    inside_v = (v >= 0) & (v <= 1)
    if geometry.shape == "cylinder":
        r = np.full_like(v, geometry.radius)
    else:
        r = geometry.radius * np.sqrt(np.clip(1 - (2 * v - 1) ** 2, 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (xs - geometry.cx) / r
    valid = inside_v & (r > 0) & (np.abs(s) < 1)
    s = np.where(valid, s, 0.0)
    phi = np.arcsin(s) - np.deg2rad(yaw_degrees)
    u = np.mod(phi / (2 * np.pi) + 0.5, 1.0)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, np.clip(v, 0, 1), 0.0)
    return UvMap(u.astype(np.float32), v.astype(np.float32), valid)


def render(texture: np.ndarray, uvmap: UvMap, background: float = 1.0) -> np.ndarray:
    """Render a view: body pixels sample the texture bilinearly, others are white."""
    th, tw = texture.shape[1:]
    img = np.full((3, uvmap.height, uvmap.width), background, dtype=np.float32)
    ys, xs = np.nonzero(uvmap.valid)
    if len(ys):
        pu = uvmap.u[ys, xs].astype(np.float64) * (tw - 1)
        pv = uvmap.v[ys, xs].astype(np.float64) * (th - 1)
        img[:, ys, xs] = _sample_array(texture.astype(np.float64), pu[None], pv[None])[:, 0]
    return img


def head_rows(config: SceneConfig) -> int:
    """Number of texture rows forming the identity patch."""
    return int(round(config.head_fraction * (config.tex_size - 1))) + 1


def swap_identity(texture: np.ndarray, donor: np.ndarray, config: SceneConfig) -> np.ndarray:
    """``texture`` with its identity patch replaced by the donor's."""
    out = texture.copy()
    rows = head_rows(config)
    out[:, :rows] = donor[:, :rows]
    return out


def identity_mask(uvmap: UvMap, head_fraction: float) -> np.ndarray:
    """Pixels showing the identity patch (top band of the surface)."""
    return uvmap.valid & (uvmap.v <= head_fraction)


def generate_subject(seed: int, config: SceneConfig):
    """Texture and geometry of one synthetic subject."""
    rng = np.random.default_rng(seed)
    texture = make_texture(rng, config)
    geometry = make_geometry(rng, config)
    return texture, geometry, rng


def generate_pair(seed: int, config: Optional[SceneConfig] = None, target_yaw: Optional[float] = None) -> ScenePair:
    """Deterministic quadruplet for ``seed``.

    ``target_yaw`` overrides the sampled target pose (degrees).
    """
    config = config or SceneConfig()
    texture, geometry, rng = generate_subject(seed, config)
    yaw_s = rng.uniform(*config.source_yaw)
    delta = rng.uniform(*config.yaw_delta)
    yaw_n = yaw_s + delta if target_yaw is None else target_yaw
    src_map = uv_map(geometry, yaw_s, config.image_size)
    tgt_map = src_map if yaw_n == yaw_s else uv_map(geometry, yaw_n, config.image_size)
    src = render(texture, src_map)
    tgt = src.copy() if tgt_map is src_map else render(texture, tgt_map)
    return ScenePair(src, src_map, tgt, tgt_map, texture, float(yaw_s), float(yaw_n), geometry)


def render_view(seed: int, config: SceneConfig, yaw: float):
    """Image and uv map of subject ``seed`` at an explicit yaw."""
    texture, geometry, _ = generate_subject(seed, config)
    m = uv_map(geometry, yaw, config.image_size)
    return render(texture, m), m


def digest(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()
