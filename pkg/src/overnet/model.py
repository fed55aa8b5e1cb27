"""The OverNet architecture on top of the tensor core.

Every convolution is weight-normalised and stores three entries
``<name>.v``, ``<name>.g`` and ``<name>.b``.  Scalar gates are one-element
entries.  Parameter names are hierarchical, e.g. ``ldg0.rb1.expand.v``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, UsageError
from .imageops import resize, scaled_size
from .params import ParamStore
from .tensor import Tensor

HEADS = ("pixelshuffle", "osm_bilinear", "osm_bicubic")


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 64
    num_ldgs: int = 3
    rbs_per_ldg: int = 3
    expansion_ratio: int = 4
    lowrank_ratio: float = 0.8
    se_reduction: int = 4
    max_scale: int = 4
    overscale_factor: int | None = None
    head: str = "osm_bicubic"
    sc_in_ldg: bool = True
    sc_in_gdg: bool = True
    direct_scale_head: bool = False
    lr_skip_per_scale: bool = True

    def __post_init__(self):
        if self.overscale_factor is None:
            object.__setattr__(self, "overscale_factor", self.max_scale + 1)
        for name in ("base_channels", "num_ldgs", "rbs_per_ldg", "expansion_ratio", "se_reduction", "max_scale"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.overscale_factor, (int, np.integer)) or isinstance(self.overscale_factor, bool):
            raise ConfigurationError(f"overscale_factor must be an integer, got {self.overscale_factor!r}")
        if self.max_scale < 2:
            raise ConfigurationError("max_scale must be at least 2")
        if self.overscale_factor < self.max_scale:
            raise ConfigurationError(
                f"overscale_factor {self.overscale_factor} is below max_scale {self.max_scale}"
            )
        if not 0 < self.lowrank_ratio:
            raise ConfigurationError("lowrank_ratio must be positive")
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")

    @property
    def wide_channels(self) -> int:
        return self.expansion_ratio * self.base_channels

    @property
    def lowrank_channels(self) -> int:
        return max(1, math.floor(self.lowrank_ratio * self.base_channels + 0.5))

    @property
    def se_channels(self) -> int:
        return max(1, self.base_channels // self.se_reduction)

    @property
    def shuffle_factor(self) -> int:
        return self.max_scale if self.head == "pixelshuffle" else self.overscale_factor

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigurationError(f"unknown model key {key!r}")
            kw[key] = parse_value(key, raw, types[key])
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, _, v = line.partition("=")
                values[k.strip()] = v.strip()
        return cls.from_mapping(values)


def tiny_config(**overrides) -> ModelConfig:
    """The small network used for gradient checks and desk-scale runs."""
    kw = dict(base_channels=16, num_ldgs=1, rbs_per_ldg=2)
    kw.update(overrides)
    return ModelConfig(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    return str(v)


def parse_value(key: str, raw: str, typ) -> object:
    typ = str(typ)
    raw = raw.strip()
    try:
        if "bool" in typ:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in typ:
            if raw.lower() == "none" and "None" in typ:
                return None
            return int(raw)
        if "float" in typ:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key!r}: {raw!r}") from None
    return raw


# ---------------------------------------------------------------------------
# parameter layout


def conv_count(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + 2 * cout


def _rb_count(cfg: ModelConfig) -> int:
    c, wide, low, se = cfg.base_channels, cfg.wide_channels, cfg.lowrank_channels, cfg.se_channels
    return (
        conv_count(c, wide, 1)
        + conv_count(wide, low, 1)
        + conv_count(low, c, 3)
        + conv_count(c, se, 1)
        + conv_count(se, c, 1)
        + 2
    )


def ldg_merge_count(cfg: ModelConfig) -> int:
    c = cfg.base_channels
    return sum(conv_count((k + 1) * c, c, 1) for k in range(1, cfg.rbs_per_ldg))


def gdg_merge_count(cfg: ModelConfig) -> int:
    c, d = cfg.base_channels, cfg.num_ldgs
    return sum(conv_count((i + 1) * c, c, 1) for i in range(1, d)) + conv_count(d * c, c, 1)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of learnable scalars for ``cfg``."""
    c = cfg.base_channels
    ldg = cfg.rbs_per_ldg * _rb_count(cfg) + (ldg_merge_count(cfg) if cfg.sc_in_ldg else 0)
    total = conv_count(3, c, 3)
    total += cfg.num_ldgs * ldg + (gdg_merge_count(cfg) if cfg.sc_in_gdg else 0)
    total += conv_count(c, c, 1) + 2
    r = cfg.shuffle_factor
    total += conv_count(c, 3 * r * r, 3)
    if cfg.head != "pixelshuffle":
        total += conv_count(3, 3, 3)
    return total


def conv_layout(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    """``(name, in, out, kernel)`` for every convolution, in creation order."""
    c = cfg.base_channels
    convs = [("shallow", 3, c, 3)]
    for d in range(cfg.num_ldgs):
        if cfg.sc_in_gdg and d >= 1:
            convs.append((f"gdg.merge{d}", (d + 1) * c, c, 1))
        for k in range(cfg.rbs_per_ldg):
            pre = f"ldg{d}.rb{k}"
            if cfg.sc_in_ldg and k >= 1:
                convs.append((f"ldg{d}.merge{k}", (k + 1) * c, c, 1))
            convs += [
                (f"{pre}.expand", c, cfg.wide_channels, 1),
                (f"{pre}.reduce", cfg.wide_channels, cfg.lowrank_channels, 1),
                (f"{pre}.conv", cfg.lowrank_channels, c, 3),
                (f"{pre}.se1", c, cfg.se_channels, 1),
                (f"{pre}.se2", cfg.se_channels, c, 1),
            ]
    if cfg.sc_in_gdg:
        convs.append(("gdg.fuse", cfg.num_ldgs * c, c, 1))
    convs.append(("skip.conv", c, c, 1))
    r = cfg.shuffle_factor
    convs.append(("osm.up", c, 3 * r * r, 3))
    if cfg.head != "pixelshuffle":
        convs.append(("osm.refine", 3, 3, 3))
    return convs


def gate_names(cfg: ModelConfig) -> list[str]:
    names = []
    for d in range(cfg.num_ldgs):
        for k in range(cfg.rbs_per_ldg):
            names += [f"ldg{d}.rb{k}.lam_o", f"ldg{d}.rb{k}.lam_i"]
    return names + ["lam0", "lam1"]


HE_SLOPE = math.sqrt(5.0)


def init_params(
    cfg: ModelConfig,
    rng: np.random.Generator | int = 0,
    dtype=np.float32,
    he_slope: float = HE_SLOPE,
) -> ParamStore:
    """He-uniform directions, gains equal to their norms, zero biases, unit gates.

    ``he_slope`` is the leaky-ReLU slope in the He bound
    ``sqrt(6 / ((1 + slope**2) * fan_in))``; the default gives
    ``1 / sqrt(fan_in)``, and ``0`` gives the plain-ReLU bound.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    store = ParamStore()
    for name, cin, cout, k in conv_layout(cfg):
        bound = math.sqrt(6.0 / ((1.0 + he_slope**2) * cin * k * k))
        v = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        store.add(f"{name}.v", v.astype(dtype))
        store.add(f"{name}.g", np.sqrt((v * v).sum(axis=(1, 2, 3))).astype(dtype))
        store.add(f"{name}.b", np.zeros(cout, dtype=dtype))
    for name in gate_names(cfg):
        store.add(name, np.ones(1, dtype=dtype))
    return store


def zero_params(cfg: ModelConfig, dtype=np.float32) -> ParamStore:
    """Store with every convolution direction, gain and bias at zero."""
    store = init_params(cfg, 0, dtype)
    for name, p in store.items():
        if not name.endswith(("lam_o", "lam_i", "lam0", "lam1")):
            p.value.data[...] = 0
    return store


# ---------------------------------------------------------------------------
# forward pieces


def conv(x: Tensor, params: ParamStore, name: str) -> Tensor:
    w = T.weight_norm(params[f"{name}.v"], params[f"{name}.g"])
    return T.conv2d(x, w, params[f"{name}.b"])


def se_scales(y: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """Per-channel squeeze-and-excitation factors, shape ``(N, C, 1, 1)``."""
    s = T.relu(conv(T.global_avg_pool(y), params, f"{prefix}.se1"))
    return T.sigmoid(conv(s, params, f"{prefix}.se2"))


def residual_block(x: Tensor, params: ParamStore, cfg: ModelConfig, prefix: str) -> Tensor:
    if x.shape[1] != cfg.base_channels:
        raise ConfigurationError(f"{prefix}: expected {cfg.base_channels} channels, got {x.shape[1]}")
    y = T.relu(conv(x, params, f"{prefix}.expand"))
    y = conv(y, params, f"{prefix}.reduce")
    y = conv(y, params, f"{prefix}.conv")
    y = T.mul(y, se_scales(y, params, prefix))
    return T.add(T.mul(params[f"{prefix}.lam_o"], y), T.mul(params[f"{prefix}.lam_i"], x))


def ldg_forward(x: Tensor, params: ParamStore, cfg: ModelConfig, d: int) -> Tensor:
    outs: list[Tensor] = []
    inp = x
    for k in range(cfg.rbs_per_ldg):
        if k >= 1:
            inp = conv(T.concat_channels([x] + outs), params, f"ldg{d}.merge{k}") if cfg.sc_in_ldg else outs[-1]
        outs.append(residual_block(inp, params, cfg, f"ldg{d}.rb{k}"))
    return outs[-1]


def gdg_forward(f0: Tensor, params: ParamStore, cfg: ModelConfig) -> Tensor:
    feats = [f0]
    for d in range(cfg.num_ldgs):
        if d >= 1 and cfg.sc_in_gdg:
            inp = conv(T.concat_channels(feats), params, f"gdg.merge{d}")
        else:
            inp = feats[-1]
        feats.append(ldg_forward(inp, params, cfg, d))
    if not cfg.sc_in_gdg:
        return feats[-1]
    return conv(T.concat_channels(feats[1:]), params, "gdg.fuse")


def global_skip(f_d: Tensor, lr: Tensor, params: ParamStore, shallow: Tensor | None = None) -> Tensor:
    """``lam0 * f_D + lam1 * relu(conv1x1(GAP(conv3x3(lr))))``.

    The 3x3 convolution is the network's first layer; pass its output as
    ``shallow`` to avoid recomputing it.
    """
    if f_d.shape[2:] != lr.shape[2:]:
        raise ConfigurationError(f"global_skip: features {f_d.shape} vs LR {lr.shape}")
    if shallow is None:
        shallow = conv(lr, params, "shallow")
    pooled = T.relu(conv(T.global_avg_pool(shallow), params, "skip.conv"))
    return T.add(T.mul(params["lam0"], f_d), T.mul(params["lam1"], pooled))


def osm_refinement(h: Tensor, params: ParamStore, cfg: ModelConfig, out_h: int, out_w: int) -> Tensor:
    """Learned correction at ``(out_h, out_w)``; the naive upscale is added by the caller."""
    r = cfg.shuffle_factor
    over = T.pixelshuffle(conv(h, params, "osm.up"), r)
    if cfg.head == "pixelshuffle":
        return resize(over, out_h, out_w)
    over = conv(over, params, "osm.refine")
    return resize(over, out_h, out_w, "linear" if cfg.head == "osm_bilinear" else "cubic")


def osm_forward(h: Tensor, lr: Tensor, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Canonical reconstruction at ``max_scale``."""
    n = cfg.max_scale
    _, _, lh, lw = lr.shape
    oh, ow = n * lh, n * lw
    return T.add(osm_refinement(h, params, cfg, oh, ow), resize(lr, oh, ow))


def features(lr: Tensor, params: ParamStore, cfg: ModelConfig) -> Tensor:
    if lr.shape[1] != 3:
        raise ConfigurationError(f"expected an RGB batch, got shape {lr.shape}")
    f0 = conv(lr, params, "shallow")
    return global_skip(gdg_forward(f0, params, cfg), lr, params, shallow=f0)


def check_scales(scales: Iterable, cfg: ModelConfig) -> list[Fraction]:
    out = [Fraction(s).limit_denominator(1000) if isinstance(s, float) else Fraction(s) for s in scales]
    for s in out:
        if not 1 < s <= cfg.max_scale:
            raise UsageError(f"scale {s} outside (1, {cfg.max_scale}]")
    return out


def overnet_forward(
    lr: Tensor,
    params: ParamStore,
    cfg: ModelConfig,
    scales: Iterable = None,
    clamp: bool = False,
) -> dict[Fraction, Tensor]:
    """Super-resolve an NCHW batch at every requested scale.

    Outputs are ``round(s * H)`` by ``round(s * W)``.  ``clamp`` restricts
    values to ``[0, 1]`` (inference only; the loss path leaves it off).
    """
    scales = check_scales([cfg.max_scale] if scales is None else scales, cfg)
    n = cfg.max_scale
    _, _, lh, lw = lr.shape
    h = features(lr, params, cfg)

    outs: dict[Fraction, Tensor] = {}
    if cfg.direct_scale_head:
        for s in scales:
            sh, sw = scaled_size(lh, s), scaled_size(lw, s)
            outs[s] = T.add(osm_refinement(h, params, cfg, sh, sw), resize(lr, sh, sw))
    elif cfg.lr_skip_per_scale:
        # resizing is linear: only the learned correction goes through the
        # xN canonical grid, the naive upscale is taken straight to each size
        corr = osm_refinement(h, params, cfg, n * lh, n * lw)
        for s in scales:
            sh, sw = scaled_size(lh, s), scaled_size(lw, s)
            outs[s] = T.add(resize(corr, sh, sw), resize(lr, sh, sw))
    else:
        canon = T.add(osm_refinement(h, params, cfg, n * lh, n * lw), resize(lr, n * lh, n * lw))
        for s in scales:
            outs[s] = resize(canon, scaled_size(lh, s), scaled_size(lw, s))
    if clamp:
        outs = {s: Tensor(np.clip(t.data, 0.0, 1.0)) for s, t in outs.items()}
    return outs


def super_resolve(img: np.ndarray, params: ParamStore, cfg: ModelConfig, scale) -> np.ndarray:
    """Inference on one ``(3, H, W)`` image; returns a clamped image."""
    with T.no_grad():
        out = overnet_forward(Tensor(img[None].astype(params["lam0"].dtype)), params, cfg, [scale], clamp=True)
    return next(iter(out.values())).data[0]
