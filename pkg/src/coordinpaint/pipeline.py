"""Two-stage training, inference, garment transfer and evaluation.

Stage 1 trains the inpainter alone: source coordinates are splatted to the
texture, completed, and used to sample a color texture that is compared
with the target view splatted through its own uv map. Stage 2 freezes the
inpainter, warps its textures into the target frame and trains the refiner
(plus a patch discriminator when the adversarial weight is non-zero).
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io as cio
from . import metrics
from .autodiff import Adam, AdamHyper, Tensor, precision
from .losses import (
    STAGE1_WEIGHTS,
    STAGE2_WEIGHTS,
    FeatureExtractor,
    LossReport,
    discriminator_loss,
    feature_loss,
    generator_adv_loss,
    nn_loss,
    stage1_loss,
    stage1_rgb_loss,
    style_loss,
    weighted_total,
)
from .networks import (
    DiscriminatorConfig,
    Inpainter,
    InpainterConfig,
    NetworkParams,
    PatchDiscriminator,
    Refiner,
    RefinerConfig,
)
from .synth import SceneConfig, generate_pair, generate_subject, identity_mask, render, swap_identity
from .warp import (
    SENTINEL,
    ColorTexture,
    CoordTexture,
    UvMap,
    identity_meshgrid,
    sample_bilinear,
    splat_colors,
    splat_coordinates,
    texture_from_coords,
    warp_to_target,
)

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_deform", "rgb_inpainting", "no_textures")


class TrainingError(RuntimeError):
    pass


# -- configuration --------------------------------------------------------------------


@dataclass
class Schedule:
    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    checkpoint_every: int = 0
    # "constant" or "cosine" (anneals to lr * final_lr_fraction at the last step)
    decay: str = "constant"
    final_lr_fraction: float = 0.05
    # linear ramp from lr / warmup_steps to lr over the first warmup_steps steps
    warmup_steps: int = 0

    def __post_init__(self):
        if self.decay not in ("constant", "cosine"):
            raise ValueError("decay must be 'constant' or 'cosine'")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def lr_at(self, step: int) -> float:
        """Learning rate for the 1-based ``step``."""
        ramp = min(1.0, step / self.warmup_steps) if self.warmup_steps else 1.0
        if self.decay == "constant" or self.steps <= 1:
            return self.lr * ramp
        frac = (step - 1) / (self.steps - 1)
        floor = self.lr * self.final_lr_fraction
        return ramp * (floor + 0.5 * (self.lr - floor) * (1 + math.cos(math.pi * frac)))


@dataclass
class DataConfig:
    source: str = "synthetic"
    dataset_dir: Optional[str] = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    train_pairs: int = 2000
    test_pairs: int = 64
    identity_pose: bool = False
    # garment stage 2 only: chance that the source view wears another subject's
    # identity patch, so the patch can only be recovered from the conditioning
    identity_swap: float = 1.0

    def __post_init__(self):
        if isinstance(self.scene, dict):
            self.scene = SceneConfig(**self.scene)
        if self.source not in ("synthetic", "directory"):
            raise ValueError("data.source must be 'synthetic' or 'directory'")


@dataclass
class PipelineConfig:
    """Everything that defines a run; serialized next to every checkpoint.

    Optimizer settings and schedules are desk defaults, not published values.
    """

    seed: int = 0
    ablation: str = "full"
    garment_transfer: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    inpainter: InpainterConfig = field(default_factory=lambda: InpainterConfig(widths=(16, 32, 64)))
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    stage1: Schedule = field(default_factory=Schedule)
    stage2: Schedule = field(default_factory=Schedule)
    stage1_weights: dict = field(default_factory=lambda: dict(STAGE1_WEIGHTS))
    stage2_weights: dict = field(default_factory=lambda: dict(STAGE2_WEIGHTS))
    nn_window: int = 5
    feature_seed: int = 7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name, cls in (
            ("data", DataConfig),
            ("inpainter", InpainterConfig),
            ("refiner", RefinerConfig),
            ("discriminator", DiscriminatorConfig),
            ("stage1", Schedule),
            ("stage2", Schedule),
        ):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        self._derive_channels()

    def _derive_channels(self) -> None:
        target = {"full": 10, "no_deform": 10, "rgb_inpainting": 8, "no_textures": 5}[self.ablation]
        self.refiner.target_channels = target
        self.refiner.source_channels = 8
        self.refiner.identity_channels = 3 if self.garment_transfer else 0
        # color inpainting leaves no coordinate field to steer deformable skips
        self.refiner.mode = "deformable" if self.ablation == "full" else "plain"
        self.discriminator.in_channels = 6
        if self.ablation == "rgb_inpainting":
            self.inpainter.in_channels, self.inpainter.out_channels, self.inpainter.head = 4, 3, "rgb"
        else:
            self.inpainter.in_channels, self.inpainter.out_channels, self.inpainter.head = 3, 2, "coords"

    @property
    def image_size(self) -> int:
        return self.data.scene.image_size

    @property
    def tex_size(self) -> int:
        return self.data.scene.tex_size

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**copy.deepcopy(d))

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, overrides: Sequence[str]) -> "PipelineConfig":
        """Apply ``key.sub=value`` overrides (values parsed as JSON when possible)."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise KeyError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return PipelineConfig.from_dict(d)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


# -- data --------------------------------------------------------------------------------


@dataclass
class Quad:
    source: np.ndarray
    source_map: UvMap
    target: np.ndarray
    target_map: UvMap
    texture: Optional[np.ndarray] = None
    key: str = ""


def _subject_seed(base: int, split: str, index: int) -> int:
    return zlib.crc32(f"{base}:{split}:{index}".encode()) & 0x7FFFFFFF


class SyntheticPairs:
    """Quadruplets generated on demand; train and test seeds never coincide."""

    def __init__(self, scene: SceneConfig, seed: int, split: str, count: int, identity_pose: bool = False, identity_swap: float = 0.0):
        self.scene, self.seed, self.split, self.count = scene, seed, split, count
        self.identity_pose = identity_pose
        self.identity_swap = identity_swap

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Quad:
        if not 0 <= i < self.count:
            raise IndexError(i)
        s = _subject_seed(self.seed, self.split, i)
        pair = generate_pair(s, self.scene)
        target, target_map = (pair.source, pair.source_map) if self.identity_pose else (pair.target, pair.target_map)
        if self.identity_swap > 0:
            rng = np.random.default_rng(_subject_seed(self.seed, self.split + ":swap", i))
            if rng.random() < self.identity_swap:
                donor, _, _ = generate_subject(int(rng.integers(1 << 31)), self.scene)
                source = render(swap_identity(pair.texture, donor, self.scene), pair.source_map)
                return Quad(source, pair.source_map, target, target_map, pair.texture, f"syn{s}-swap")
        return Quad(pair.source, pair.source_map, target, target_map, pair.texture, f"syn{s}")


class DirectoryPairs:
    """Pairs from a dataset directory; ``<id>_texture.png`` is used as ground truth when present."""

    def __init__(self, directory, split: str):
        self.directory = Path(directory)
        self.records = [r for r in cio.dataset_index(directory) if r.split == split]

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Quad:
        r = self.records[i]
        return Quad(
            cio.read_png(r.source_image),
            cio.read_uvm(r.source_uvm),
            cio.read_png(r.target_image),
            cio.read_uvm(r.target_uvm),
            cio.read_png(tex) if (tex := self.directory / f"{r.subject}_texture.png").exists() else None,
            f"{r.subject}:{r.source_pose}->{r.target_pose}",
        )


def make_pairs(config: PipelineConfig, split: str, identity_swap: bool = False):
    """Dataset for ``split``; ``identity_swap`` enables the garment-training augmentation (synthetic data only)."""
    d = config.data
    if d.source == "directory":
        if not d.dataset_dir:
            raise ValueError("data.dataset_dir is required for directory datasets")
        return DirectoryPairs(d.dataset_dir, split)
    count = d.train_pairs if split == "train" else d.test_pairs
    swap = d.identity_swap if identity_swap else 0.0
    return SyntheticPairs(d.scene, config.seed, split, count, d.identity_pose, swap)


# -- network inputs ------------------------------------------------------------------------


def _image_wh(img: np.ndarray) -> tuple[int, int]:
    return img.shape[2], img.shape[1]


def coord_input(c: CoordTexture, image_size: tuple[int, int]) -> np.ndarray:
    """(3, tH, tW): x / W, y / H with the sentinel at unknown texels, plus the known mask."""
    w, h = image_size
    x = np.where(c.known, c.coords[0] / w, SENTINEL)
    y = np.where(c.known, c.coords[1] / h, SENTINEL)
    return np.stack([x, y, c.known.astype(np.float32)]).astype(np.float32)


def color_input(t: ColorTexture) -> np.ndarray:
    rgb = np.where(t.known[None], t.rgb, SENTINEL)
    return np.concatenate([rgb, t.known[None].astype(np.float32)]).astype(np.float32)


def normalized_meshgrid(h: int, w: int) -> np.ndarray:
    g = identity_meshgrid(h, w)
    return np.stack([g[0] / w, g[1] / h]).astype(np.float32)


def identity_condition(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return (image * mask[None]).astype(np.float32)


@dataclass
class Stage1Batch:
    net_input: np.ndarray
    sources: np.ndarray
    c_values: np.ndarray
    c_known: np.ndarray
    target_texture: np.ndarray
    target_known: np.ndarray
    image_size: tuple


@dataclass
class Intermediates:
    c: Optional[CoordTexture] = None
    d: Optional[CoordTexture] = None
    t: Optional[ColorTexture] = None
    warped: Optional[object] = None


class Pipeline:
    """Networks of one run plus the glue that connects them."""

    def __init__(self, config: PipelineConfig, inpainter_params: NetworkParams | None = None, refiner_params: NetworkParams | None = None, disc_params: NetworkParams | None = None):
        self.config = config
        s = config.seed
        self.inpainter = None
        if config.ablation != "no_textures":
            prefix = "rgb_inpainter" if config.ablation == "rgb_inpainting" else "inpainter"
            self.inpainter = Inpainter(config.inpainter, seed=s * 3 + 1, params=inpainter_params, prefix=prefix)
        self.refiner = Refiner(config.refiner, seed=s * 3 + 2, params=refiner_params)
        self.disc = PatchDiscriminator(config.discriminator, seed=s * 3 + 3, params=disc_params)
        self.extractor = FeatureExtractor(config.feature_seed)

    @property
    def coordinate_based(self) -> bool:
        return self.config.ablation in ("full", "no_deform")

    # stage 1 ---------------------------------------------------------------

    def stage1_batch(self, quads: Sequence[Quad]) -> Stage1Batch:
        ts = self.config.tex_size
        inputs, cv, ck, tt, tk = [], [], [], [], []
        for q in quads:
            tgt = splat_colors(q.target, q.target_map, ts, ts)
            if self.coordinate_based:
                c = splat_coordinates(q.source_map, ts, ts)
                inputs.append(coord_input(c, _image_wh(q.source)))
                cv.append(c.coords)
                ck.append(c.known)
            else:
                c = splat_colors(q.source, q.source_map, ts, ts)
                inputs.append(color_input(c))
                cv.append(c.rgb)
                ck.append(c.known)
            tt.append(tgt.rgb)
            tk.append(tgt.known)
        return Stage1Batch(
            np.stack(inputs),
            np.stack([q.source for q in quads]).astype(np.float32),
            np.stack(cv),
            np.stack(ck),
            np.stack(tt),
            np.stack(tk),
            _image_wh(quads[0].source),
        )

    def stage1_forward(self, batch: Stage1Batch):
        """Returns (D or None, T) as tensors."""
        x = Tensor(batch.net_input)
        if self.coordinate_based:
            d = self.inpainter.forward(x, batch.image_size)
            t = sample_bilinear(Tensor(batch.sources), d)
            return d, t
        return None, self.inpainter.forward(x)

    def stage1_loss(self, batch: Stage1Batch) -> LossReport:
        d, t = self.stage1_forward(batch)
        w = self.config.stage1_weights
        if self.coordinate_based:
            return stage1_loss(batch.c_values, batch.c_known, d, t, batch.target_texture, batch.target_known, batch.image_size, w)
        return stage1_rgb_loss(batch.c_values, batch.c_known, t, batch.target_texture, batch.target_known, w)

    def textures(self, source: np.ndarray, source_map: UvMap) -> Intermediates:
        """Frozen stage-1 path for one view: C, D and the color texture T."""
        ts = self.config.tex_size
        if self.config.ablation == "no_textures":
            return Intermediates()
        if self.coordinate_based:
            c = splat_coordinates(source_map, ts, ts)
            x = Tensor(coord_input(c, _image_wh(source))[None])
            d_arr = self.inpainter.forward(x, _image_wh(source)).data[0]
            d = CoordTexture(d_arr, np.ones(d_arr.shape[1:], bool))
            return Intermediates(c=c, d=d, t=texture_from_coords(source, d))
        c = splat_colors(source, source_map, ts, ts)
        t_arr = self.inpainter.forward(Tensor(color_input(c)[None])).data[0]
        return Intermediates(t=ColorTexture(t_arr))

    # stage 2 ---------------------------------------------------------------

    def refiner_inputs(self, source: np.ndarray, source_map: UvMap, target_map: UvMap, inter: Intermediates | None = None):
        """Target stack, source stack, warp field (or None) and its mask for one pair."""
        if source.shape[1:] != (target_map.height, target_map.width) or source.shape[1:] != (source_map.height, source_map.width):
            raise ValueError("source image and uv maps must share a resolution")
        if source.shape[1] != self.config.image_size or source.shape[2] != self.config.image_size:
            raise ValueError(
                f"input resolution {source.shape[2]}x{source.shape[1]} does not match the configured {self.config.image_size}"
            )
        h, w = source.shape[1:]
        mesh = normalized_meshgrid(h, w)
        inter = inter if inter is not None else self.textures(source, source_map)
        src_stack = np.concatenate([source, source_map.channels(), mesh])
        warp = warp_known = None
        ab = self.config.ablation
        if ab == "no_textures":
            tgt_stack = np.concatenate([target_map.channels(), mesh])
        else:
            wm = warp_to_target(inter.t, inter.d, target_map)
            inter.warped = wm
            if ab == "rgb_inpainting":
                tgt_stack = np.concatenate([wm.color, target_map.channels(), mesh])
            else:
                e_norm = np.stack([wm.coords[0] / w, wm.coords[1] / h]) * wm.known[None]
                tgt_stack = np.concatenate([wm.color, e_norm, target_map.channels(), mesh])
                warp, warp_known = wm.coords, wm.known
        return tgt_stack.astype(np.float32), src_stack.astype(np.float32), warp, warp_known

    def refiner_batch(self, quads: Sequence[Quad], identity_masks: Sequence[np.ndarray] | None = None):
        tg, sr, wp, wk = [], [], [], []
        for q in quads:
            t, s, w, k = self.refiner_inputs(q.source, q.source_map, q.target_map)
            tg.append(t)
            sr.append(s)
            wp.append(w)
            wk.append(k)
        warp = np.stack(wp) if wp[0] is not None else None
        known = np.stack(wk) if wk[0] is not None else None
        ident = None
        if self.config.garment_transfer:
            if identity_masks is None:
                identity_masks = [identity_mask(q.target_map, self.config.data.scene.head_fraction) for q in quads]
            ident = np.stack([identity_condition(q.target, m) for q, m in zip(quads, identity_masks)])
        return np.stack(tg), np.stack(sr), warp, known, ident

    def refine(self, tgt: np.ndarray, src: np.ndarray, warp, known, ident=None) -> Tensor:
        return self.refiner.forward(
            Tensor(tgt),
            Tensor(src),
            warp=warp if self.refiner.deformable else None,
            warp_known=known,
            identity_cond=None if ident is None else Tensor(ident),
        )

    def stage2_loss(self, pred: Tensor, target: np.ndarray, pose: np.ndarray) -> LossReport:
        w = self.config.stage2_weights
        terms = {"nn_loss": nn_loss(pred, target, self.config.nn_window)}
        if w.get("perceptual", 0):
            terms["perceptual"] = feature_loss(pred, target, self.extractor)
        if w.get("style", 0):
            terms["style"] = style_loss(pred, target, self.extractor)
        if w.get("adv_g", 0):
            terms["adv_g"] = generator_adv_loss(self.disc.forward(pred, Tensor(pose)))
        return LossReport(terms, w, weighted_total(terms, w))

    def predict(self, source, source_map, target_map, identity_cond: np.ndarray | None = None):
        inter = self.textures(source, source_map)
        tgt, src, warp, known = self.refiner_inputs(source, source_map, target_map, inter)
        out = self.refine(
            tgt[None], src[None], None if warp is None else warp[None], None if known is None else known[None],
            None if identity_cond is None else identity_cond[None],
        )
        return out.data[0], inter


# -- training loops ------------------------------------------------------------------------


def _adam(table, schedule: Schedule, config: PipelineConfig) -> Adam:
    return Adam(table, AdamHyper(lr=schedule.lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps))


def _batches(pairs, schedule: Schedule, seed: int):
    rng = np.random.default_rng(seed)
    if len(pairs) == 0:
        raise TrainingError("dataset is empty")
    for _ in range(schedule.steps):
        idx = rng.integers(0, len(pairs), size=schedule.batch_size)
        yield [pairs[int(i)] for i in idx]


class CsvLog:
    def __init__(self, path: Optional[Path]):
        self.path = path
        self.rows: list = []

    def append(self, step: int, values: dict) -> None:
        row = {"step": step, **values}
        self.rows.append(row)
        if self.path is None:
            return
        new = not self.path.exists() or len(self.rows) == 1
        with self.path.open("w" if new else "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                writer.writeheader()
            writer.writerow(row)


def _check_finite(step: int, values: dict) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss at step {step}: {bad}")


@dataclass
class TrainResult:
    params: NetworkParams
    log: list
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


def train_stage1(config: PipelineConfig, out_dir=None, pairs=None, callback=None) -> TrainResult:
    """Train the inpainter; writes ``stage1.ckpt`` and ``stage1_log.csv`` under ``out_dir``."""
    if config.ablation == "no_textures":
        raise TrainingError("the no_textures ablation has no stage-1 network")
    start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(config)
    pairs = pairs if pairs is not None else make_pairs(config, "train")
    if len(pairs) == 0:
        raise TrainingError("dataset is empty")
    opt = _adam(pipe.inpainter.params, config.stage1, config)
    log = CsvLog(out_dir / "stage1_log.csv" if out_dir else None)
    for step, quads in enumerate(_batches(pairs, config.stage1, config.seed * 7919 + 11), start=1):
        batch = pipe.stage1_batch(quads)
        report = pipe.stage1_loss(batch)
        values = report.values()
        _check_finite(step, values)
        opt.zero_grad()
        report.total.backward()
        opt.hyper.lr = config.stage1.lr_at(step)
        opt.step()
        log.append(step, values)
        if callback is not None:
            callback(step, pipe, values)
        if out_dir is not None and config.stage1.checkpoint_every and step % config.stage1.checkpoint_every == 0:
            cio.save_checkpoint(out_dir / f"stage1_step{step}.ckpt", pipe.inpainter.params, config.to_dict())
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "stage1.ckpt"
        cio.save_checkpoint(ckpt, pipe.inpainter.params, config.to_dict())
    return TrainResult(pipe.inpainter.params, log.rows, ckpt, time.perf_counter() - start)


def discriminator_step(pipe: Pipeline, opt: Adam, real: np.ndarray, fake: np.ndarray, pose: np.ndarray) -> float:
    """One discriminator update with the generator output held fixed; returns the pre-update loss."""
    opt.zero_grad()
    d_term = discriminator_loss(pipe.disc.forward(Tensor(real), Tensor(pose)), pipe.disc.forward(Tensor(fake), Tensor(pose)))
    d_term.backward()
    opt.step()
    return float(d_term.item())


def _load_stage1(config: PipelineConfig, stage1) -> NetworkParams | None:
    if config.ablation == "no_textures":
        return None
    if stage1 is None:
        raise TrainingError("stage 2 needs a stage-1 checkpoint")
    if isinstance(stage1, NetworkParams):
        params = NetworkParams((k, Tensor(t.data, dtype=np.float32, name=k)) for k, t in stage1.items())
    else:
        params = cio.params_from_arrays(cio.load_checkpoint(stage1), requires_grad=False)
    params.freeze()
    return params


def train_stage2(config: PipelineConfig, stage1=None, out_dir=None, pairs=None, callback=None) -> TrainResult:
    """Train the refiner (and discriminator) with the inpainter frozen.

    ``stage1`` is a checkpoint path or a parameter table. The inpainter is
    never updated; its checkpoint is only read.
    """
    start = time.perf_counter()
    inp_params = _load_stage1(config, stage1)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(config, inpainter_params=inp_params)
    pairs = pairs if pairs is not None else make_pairs(config, "train", identity_swap=config.garment_transfer)
    if len(pairs) == 0:
        raise TrainingError("dataset is empty")
    g_opt = _adam(pipe.refiner.params, config.stage2, config)
    d_opt = _adam(pipe.disc.params, config.stage2, config)
    adversarial = bool(config.stage2_weights.get("adv_g", 0))
    log = CsvLog(out_dir / "stage2_log.csv" if out_dir else None)
    for step, quads in enumerate(_batches(pairs, config.stage2, config.seed * 7919 + 23), start=1):
        tgt, src, warp, known, ident = pipe.refiner_batch(quads)
        target = np.stack([q.target for q in quads]).astype(np.float32)
        pose = np.stack([q.target_map.channels() for q in quads]).astype(np.float32)
        pred = pipe.refine(tgt, src, warp, known, ident)
        report = pipe.stage2_loss(pred, target, pose)
        values = report.values()
        values["l1"] = float(np.abs(pred.data - target).mean())
        g_opt.zero_grad()
        report.total.backward()
        g_opt.hyper.lr = d_opt.hyper.lr = config.stage2.lr_at(step)
        g_opt.step()
        if adversarial:
            values["adv_d"] = discriminator_step(pipe, d_opt, target, pred.data, pose)
        _check_finite(step, values)
        log.append(step, values)
        if callback is not None:
            callback(step, pipe, values)
        if out_dir is not None and config.stage2.checkpoint_every and step % config.stage2.checkpoint_every == 0:
            _save_stage2(out_dir / f"stage2_step{step}.ckpt", pipe, config)
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "stage2.ckpt"
        _save_stage2(ckpt, pipe, config)
    table = NetworkParams(list(pipe.refiner.params.items()) + list(pipe.disc.params.items()))
    return TrainResult(table, log.rows, ckpt, time.perf_counter() - start)


def _save_stage2(path, pipe: Pipeline, config: PipelineConfig) -> None:
    table = NetworkParams(list(pipe.refiner.params.items()) + list(pipe.disc.params.items()))
    cio.save_checkpoint(path, table, config.to_dict())


# -- inference ------------------------------------------------------------------------------


def load_pipeline(stage2_ckpt, stage1_ckpt=None, config: PipelineConfig | None = None) -> Pipeline:
    """Rebuild a trained pipeline from its checkpoints (config from the sidecar unless given)."""
    if config is None:
        raw = cio.load_checkpoint_config(stage2_ckpt)
        if raw is None:
            raise FileNotFoundError(f"no configuration stored next to {stage2_ckpt}")
        config = PipelineConfig.from_dict(raw)
    arrays = cio.load_checkpoint(stage2_ckpt)
    refiner = cio.params_from_arrays(arrays, "refiner.", requires_grad=False)
    disc = cio.params_from_arrays(arrays, "disc.", requires_grad=False)
    inp = None
    if config.ablation != "no_textures":
        if stage1_ckpt is None:
            raise FileNotFoundError("stage-1 checkpoint is required for this ablation")
        inp = cio.params_from_arrays(cio.load_checkpoint(stage1_ckpt), requires_grad=False)
    pipe = Pipeline(config, inpainter_params=inp, refiner_params=refiner, disc_params=disc)
    expected = Refiner(config.refiner, params=NetworkParams()).init_params(0).shapes()
    if refiner.shapes() != expected:
        raise ValueError("stage-2 checkpoint does not match the configured refiner")
    return pipe


def infer(pipe: Pipeline, source: np.ndarray, source_map: UvMap, target_map: UvMap, identity_cond=None):
    """Predict the target view; returns (image, intermediates)."""
    if pipe.config.garment_transfer and identity_cond is None:
        raise ValueError("this model was trained for garment transfer and needs identity conditioning")
    return pipe.predict(source, source_map, target_map, identity_cond)


def transfer_garment(pipe: Pipeline, person: np.ndarray, person_map: UvMap, cloth: np.ndarray, cloth_map: UvMap, person_identity_mask: np.ndarray) -> np.ndarray:
    """Dress the person (pose and identity patch) in the cloth view's surface texture."""
    if not pipe.config.garment_transfer:
        raise ValueError("model was not trained with identity conditioning (garment_transfer=false)")
    if person_identity_mask is None:
        raise ValueError("an identity mask for the person view is required")
    mask = np.asarray(person_identity_mask, bool)
    if mask.shape != person.shape[1:]:
        raise ValueError(f"identity mask {mask.shape} does not match person image {person.shape[1:]}")
    out, _ = pipe.predict(cloth, cloth_map, person_map, identity_condition(person, mask))
    return out


def dump_intermediates(out_dir, inter: Intermediates, image_size: tuple[int, int]) -> None:
    """Write C, D, T, W and E as PNGs (coordinate maps as x -> red, y -> green)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w, h = image_size

    def coord_png(coords, known):
        r = np.clip(coords[0] / w, 0, 1) * known
        g = np.clip(coords[1] / h, 0, 1) * known
        return np.stack([r, g, np.zeros_like(r)])

    if inter.c is not None:
        cio.write_png(out_dir / "C.png", coord_png(inter.c.coords, inter.c.known))
    if inter.d is not None:
        cio.write_png(out_dir / "D.png", coord_png(inter.d.coords, inter.d.known))
    if inter.t is not None:
        cio.write_png(out_dir / "T.png", inter.t.rgb)
    if inter.warped is not None:
        cio.write_png(out_dir / "W.png", inter.warped.color)
        if inter.warped.coords is not None:
            cio.write_png(out_dir / "E.png", coord_png(inter.warped.coords, inter.warped.known))


# -- evaluation ---------------------------------------------------------------------------------


def texture_l1(pipe: Pipeline, quad: Quad) -> Optional[float]:
    """Mean absolute error between the estimated texture T and the ground truth."""
    if quad.texture is None or pipe.config.ablation == "no_textures":
        return None
    inter = pipe.textures(quad.source, quad.source_map)
    return float(np.abs(inter.t.rgb - quad.texture).mean())


def evaluate(pipe: Pipeline, pairs, csv_path=None, identity_masks=None) -> dict:
    """Per-pair SSIM / L1 (plus texture L1 when ground truth exists) and their means."""
    rows = []
    head = pipe.config.data.scene.head_fraction
    for i in range(len(pairs)):
        q = pairs[i]
        ident = None
        if pipe.config.garment_transfer:
            m = identity_masks[i] if identity_masks is not None else identity_mask(q.target_map, head)
            ident = identity_condition(q.target, m)
        pred, inter = pipe.predict(q.source, q.source_map, q.target_map, ident)
        row = {
            "pair": q.key or str(i),
            "ssim": metrics.ssim(pred, q.target),
            "l1": metrics.l1(pred, q.target),
        }
        if q.target_map.valid.any():
            row["ssim_body"] = metrics.ssim(pred, q.target, mask=q.target_map.valid)
        if q.texture is not None and inter.t is not None:
            row["texture_l1"] = float(np.abs(inter.t.rgb - q.texture).mean())
        rows.append(row)
    report = {"rows": rows, "count": len(rows)}
    for key in ("ssim", "l1", "ssim_body", "texture_l1"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            report[key] = float(np.mean(vals))
    if csv_path is not None:
        keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "pair", k))
        with Path(csv_path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)
    return report


def evaluate_against_reference(predictions: Sequence[np.ndarray], references: Sequence[np.ndarray]) -> dict:
    """Metric report for precomputed images (no networks involved)."""
    rows = [
        {"pair": str(i), "ssim": metrics.ssim(p, r), "l1": metrics.l1(p, r)}
        for i, (p, r) in enumerate(zip(predictions, references))
    ]
    return {
        "rows": rows,
        "count": len(rows),
        "ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
        "l1": float(np.mean([r["l1"] for r in rows])) if rows else float("nan"),
    }
