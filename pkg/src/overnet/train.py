"""Deterministic training, evaluation and the ``key = value`` config format."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigurationError, NumericError, UsageError
from .imageops import DegradationSpec, bicubic_resize, degrade, png_read, sample_patch, scaled_size
from .metrics import EvalReport, ScaleSet, format_scale, multiscale_l1, parse_scale, psnr, ssim
from .model import ModelConfig, init_params, overnet_forward, parse_value
from .params import ParamStore, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)

# purpose ids for the counter-based generator streams
STREAMS = {"init": 0, "batch": 1, "degrade": 2}


def stream(seed: int, purpose: str, counter: int = 0) -> np.random.Generator:
    """Independent generator keyed by ``(seed, purpose, counter)``.

    Resuming at step ``k`` re-derives exactly the batches an unbroken run
    would draw, so no generator state has to be checkpointed.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, STREAMS[purpose], counter])))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    halve_every: int = 2000
    batch_size: int = 8
    patch: int = 64
    total_iters: int = 2000
    seed: int = 0
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    scale_set: ScaleSet = field(default_factory=lambda: ScaleSet((2, 3, 4)))
    checkpoint_every: int = 0
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not isinstance(self.scale_set, ScaleSet):
            try:
                object.__setattr__(self, "scale_set", ScaleSet(self.scale_set))
            except UsageError as exc:
                raise ConfigurationError(str(exc)) from None
        for name in ("halve_every", "batch_size", "patch", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.total_iters < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("total_iters and checkpoint_every must be >= 0")
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        try:
            self.scale_set.check_max(self.model.max_scale)
        except UsageError as exc:
            raise ConfigurationError(str(exc)) from None
        d = self.degradation.scale
        if d.denominator != 1:
            raise ConfigurationError("training needs an integer degradation scale")
        if d > self.model.max_scale:
            raise ConfigurationError(f"degradation x{d} exceeds the model's max scale x{self.model.max_scale}")
        if self.scale_set[-1] > d:
            raise ConfigurationError(
                f"scale {format_scale(self.scale_set[-1])} has no HR target under x{d} degradation"
            )

    def lr_at(self, step: int) -> float:
        """``lr0 * 2**-floor(step / halve_every)``."""
        return self.lr0 * 0.5 ** (step // self.halve_every)

    def to_text(self) -> str:
        lines = []
        for k, v in config_items(self).items():
            lines.append(f"{k} = {v}\n")
        return "".join(lines)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


FULL_SCALE = {"halve_every": "200000", "batch_size": "64", "patch": "64"}

_TRAIN_KEYS = {
    "lr0": float, "halve_every": int, "batch_size": int, "patch": int, "total_iters": int, "seed": int,
    "checkpoint_every": int, "log_every": int, "beta1": float, "beta2": float, "adam_eps": float,
}
_DEGRADATION_KEYS = {
    "degradation": "kind", "degradation_scale": "scale", "blur_sigma": "blur_sigma",
    "kernel_size": "kernel_size", "noise_level": "noise_level", "bd_order": "bd_order",
}
_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
CONFIG_KEYS = set(_TRAIN_KEYS) | set(_DEGRADATION_KEYS) | set(_MODEL_KEYS) | {"scale_set"}


def config_items(cfg: TrainConfig) -> dict[str, str]:
    from .model import _fmt

    out = {k: _fmt(getattr(cfg, k)) for k in _TRAIN_KEYS}
    deg = cfg.degradation
    out.update(
        degradation=deg.kind, degradation_scale=format_scale(deg.scale), blur_sigma=_fmt(deg.blur_sigma),
        kernel_size=_fmt(deg.kernel_size), noise_level=_fmt(deg.noise_level), bd_order=deg.bd_order,
        scale_set=str(cfg.scale_set),
    )
    out.update({k: _fmt(getattr(cfg.model, k)) for k in _MODEL_KEYS})
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines with ``#`` comments; unknown or repeated keys are errors."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def read_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(path))


def build_train_config(values: dict[str, str]) -> TrainConfig:
    """Assemble a :class:`TrainConfig` from raw strings, defaults for the rest."""
    unknown = set(values) - CONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"unknown key {sorted(unknown)[0]!r}")
    kw, deg_kw = {}, {}
    casts = {"scale": parse_scale, "blur_sigma": float, "noise_level": float, "kernel_size": int}
    for key, raw in values.items():
        try:
            if key in _TRAIN_KEYS:
                kw[key] = _TRAIN_KEYS[key](raw)
            elif key in _DEGRADATION_KEYS:
                attr = _DEGRADATION_KEYS[key]
                deg_kw[attr] = casts[attr](raw) if attr in casts else raw.upper() if attr == "kind" else raw
        except (ValueError, UsageError):
            raise ConfigurationError(f"bad value for {key!r}: {raw!r}") from None
    if deg_kw.get("kind") == "BD" and "scale" not in deg_kw:
        deg_kw["scale"] = Fraction(3)
    model = ModelConfig.from_mapping({k: v for k, v in values.items() if k in _MODEL_KEYS})
    if "degradation_scale" not in values and deg_kw.get("kind") != "BD":
        deg_kw["scale"] = Fraction(model.max_scale)
    try:
        kw["degradation"] = DegradationSpec(**deg_kw)
        if "scale_set" in values:
            kw["scale_set"] = ScaleSet(values["scale_set"])
        else:
            kw["scale_set"] = ScaleSet(s for s in (2, 3, 4) if s <= kw["degradation"].scale)
    except UsageError as exc:
        raise ConfigurationError(str(exc)) from None
    return TrainConfig(model=model, **kw)


# ---------------------------------------------------------------------------
# data


def list_images(dataset_dir) -> list[Path]:
    d = Path(dataset_dir)
    if not d.is_dir():
        raise UsageError(f"dataset directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")


def load_dataset(dataset_dir) -> list[tuple[str, np.ndarray]]:
    paths = list_images(dataset_dir)
    if not paths:
        raise UsageError(f"no PNG images in {dataset_dir}")
    return [(p.stem, png_read(p)) for p in paths]


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    _, h, w = img.shape
    return img[:, : h - h % scale, : w - w % scale]


def training_pairs(images: Sequence[tuple[str, np.ndarray]], cfg: TrainConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    d = int(cfg.degradation.scale)
    pairs = []
    for i, (name, hr) in enumerate(images):
        hr = modcrop(hr, d)
        if min(hr.shape[1:]) < cfg.patch * d:
            raise UsageError(f"image {name!r} ({hr.shape[1]}x{hr.shape[2]}) is smaller than a x{d} patch of {cfg.patch}")
        lr = degrade(hr, cfg.degradation, stream(cfg.seed, "degrade", i))
        pairs.append((hr, lr))
    return pairs


def sample_batch(pairs, cfg: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    rng = stream(cfg.seed, "batch", step)
    d = int(cfg.degradation.scale)
    lrs, hrs = [], []
    for _ in range(cfg.batch_size):
        hr, lr = pairs[int(rng.integers(len(pairs)))]
        lp, hp = sample_patch(hr, lr, cfg.patch, d, rng)
        lrs.append(lp)
        hrs.append(hp)
    return np.stack(lrs).astype(np.float32), np.stack(hrs).astype(np.float32)


# ---------------------------------------------------------------------------
# training


class TrainingAborted(NumericError):
    def __init__(self, message: str, step: int, dump_path: Path | None = None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path


LossFn = Callable[[dict, np.ndarray, ScaleSet], Tensor]


def _param_summary(params: ParamStore) -> str:
    lines = []
    for name, p in params.items():
        v = p.value.data
        finite = np.isfinite(v).all() and (p.grad is None or np.isfinite(p.grad).all())
        lines.append(f"  {name:<28} |v|max={np.abs(v).max():.4g} finite={finite}")
    return "\n".join(lines)


def train(
    cfg: TrainConfig,
    dataset,
    out: str | Path | None = None,
    resume: Checkpoint | None = None,
    until: int | None = None,
    on_log: Callable[[int, float, float], None] | None = None,
    loss_fn: LossFn = multiscale_l1,
) -> Checkpoint:
    """Run the optimisation loop and return the final checkpoint.

    ``dataset`` is a directory of HR PNGs or a list of ``(name, image)``.
    ``until`` stops early (at that step count) without changing the
    schedule, which is how split runs reproduce an unbroken one.
    """
    images = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not images:
        raise UsageError("empty dataset")
    pairs = training_pairs(images, cfg)
    if resume is not None:
        if resume.model != cfg.model:
            raise ConfigurationError("checkpoint model config differs from the training config")
        params = resume.params
    else:
        params = init_params(cfg.model, stream(cfg.seed, "init"))
    stop = cfg.total_iters if until is None else min(until, cfg.total_iters)
    text = cfg.to_text()

    def snapshot() -> Checkpoint:
        return Checkpoint(params, cfg.model, text)

    for step in range(params.step_count, stop):
        lr_img, hr_img = sample_batch(pairs, cfg, step)
        outs = overnet_forward(Tensor(lr_img), params, cfg.model, cfg.scale_set)
        loss = loss_fn(outs, hr_img, cfg.scale_set)
        value = float(loss.data)
        if not math.isfinite(value):
            dump = None
            if out is not None:
                dump = Path(str(out) + ".abort")
                save_checkpoint(dump, snapshot())
            raise TrainingAborted(
                f"non-finite loss {value} at step {step} (lr {cfg.lr_at(step):g})\n" + _param_summary(params),
                step,
                dump,
            )
        T.backward(loss)
        lr = cfg.lr_at(step)
        adam_step(params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        if step % cfg.log_every == 0 or step + 1 == stop:
            if on_log is not None:
                on_log(step, lr, value)
            log.info("%d\t%g\t%.6f", step, lr, value)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out, snapshot())
    ckpt = snapshot()
    if out is not None:
        save_checkpoint(out, ckpt)
    return ckpt


def batch_loss(params: ParamStore, cfg: TrainConfig, lr_img: np.ndarray, hr_img: np.ndarray,
               scales: Sequence | None = None) -> float:
    """Loss of ``params`` on one batch, no graph."""
    scales = cfg.scale_set if scales is None else scales
    with T.no_grad():
        outs = overnet_forward(Tensor(lr_img), params, cfg.model, scales)
        return float(multiscale_l1(outs, hr_img, scales).data)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    ckpt: Checkpoint,
    dataset,
    scales,
    degradation: DegradationSpec,
    seed: int = 0,
    crop: bool = True,
) -> EvalReport:
    """PSNR/SSIM of the model and of plain bicubic upscaling at each scale."""
    t0 = time.perf_counter()
    cfg = ckpt.model
    scales = ScaleSet(scales)
    try:
        scales.check_max(cfg.max_scale)
    except UsageError:
        raise UsageError(f"scale {format_scale(scales[-1])} exceeds the checkpoint's x{cfg.max_scale}") from None
    if scales[-1] > degradation.scale:
        raise UsageError(f"scale {format_scale(scales[-1])} has no HR reference under x{degradation.scale} degradation")
    images = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    report = EvalReport(fingerprint=hashlib.sha256(cfg.to_text().encode()).hexdigest()[:12])
    dtype = ckpt.params["lam0"].dtype
    for i, (name, hr) in enumerate(sorted(images, key=lambda t: t[0])):
        d = degradation.scale
        if d.denominator == 1:
            hr = modcrop(hr, int(d))
        lr = degrade(hr, degradation, stream(seed, "degrade", i))
        _, lh, lw = lr.shape
        with T.no_grad():
            outs = overnet_forward(Tensor(lr[None].astype(dtype)), ckpt.params, cfg, scales, clamp=True)
        report.per_image[name] = {}
        report.baseline[name] = {}
        for s in scales:
            sr = outs[s].data[0]
            size = sr.shape[1:]
            target = hr if hr.shape[1:] == size else bicubic_resize(hr, *size)
            base = bicubic_resize(lr.astype(dtype), *size)
            report.per_image[name][s] = (psnr(sr, target, s, crop), ssim(sr, target, s, crop))
            report.baseline[name][s] = (psnr(base, target, s, crop), ssim(base, target, s, crop))
    report.seconds = time.perf_counter() - t0
    return report
