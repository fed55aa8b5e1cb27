"""Resampling, degradation, colour conversion, patch sampling and PNG I/O.

Images are float arrays laid out ``(channels, height, width)`` with values
in ``[0, 1]``; the batch axis is added only when they enter the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import Tensor, separable_map

CUBIC_A = -0.5


def cubic_kernel(x, a: float = CUBIC_A):
    """Keys cubic convolution kernel (support 2)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def linear_kernel(x):
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(x, dtype=np.float64)))


_KERNELS = {"cubic": (cubic_kernel, 2.0), "linear": (linear_kernel, 1.0)}


@lru_cache(maxsize=512)
def _weights(in_size: int, out_size: int, kind: str) -> np.ndarray:
    kernel, support = _KERNELS[kind]
    ratio = in_size / out_size
    stretch = max(ratio, 1.0)  # widen the kernel only when shrinking
    centers = (np.arange(out_size) + 0.5) * ratio - 0.5
    reach = support * stretch
    first = np.floor(centers - reach).astype(int)
    taps = int(math.ceil(2 * reach)) + 2
    idx = first[:, None] + np.arange(taps)[None, :]
    w = kernel((idx - centers[:, None]) / stretch)
    mat = np.zeros((out_size, in_size))
    rows = np.broadcast_to(np.arange(out_size)[:, None], idx.shape)
    np.add.at(mat, (rows, np.clip(idx, 0, in_size - 1)), w)
    mat /= mat.sum(axis=1, keepdims=True)
    mat.setflags(write=False)
    return mat


def resize_weights(in_size: int, out_size: int, kind: str = "cubic") -> np.ndarray:
    """Dense ``(out_size, in_size)`` resampling matrix; every row sums to 1.

    Source coordinates are half-pixel centred, out-of-range taps are clamped
    to the border, and on downscale the kernel is stretched by the size
    ratio (antialiasing).
    """
    if in_size < 1 or out_size < 1:
        raise UsageError(f"resize sizes must be positive, got {in_size} -> {out_size}")
    if kind not in _KERNELS:
        raise ConfigurationError(f"unknown resampling kernel {kind!r}")
    return _weights(in_size, out_size, kind)


def resize(x: Tensor, out_h: int, out_w: int, kind: str = "cubic") -> Tensor:
    """Differentiable resize of an NCHW tensor (no clamping)."""
    _, _, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    return separable_map(x, resize_weights(h, out_h, kind), resize_weights(w, out_w, kind))


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a ``(C, H, W)`` image and clamp the result to ``[0, 1]``."""
    if out_h < 1 or out_w < 1:
        raise UsageError(f"zero-size resize target {out_h}x{out_w}")
    out = resize(Tensor(img[None]), out_h, out_w).data[0]
    return np.clip(out, 0.0, 1.0)


def scaled_size(size: int, scale) -> int:
    """``floor(scale * size + 1/2)`` evaluated exactly for rational scales."""
    return math.floor(Fraction(scale) * size + Fraction(1, 2))


# ---------------------------------------------------------------------------
# degradations


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "BI"
    scale: Fraction = Fraction(4)
    blur_sigma: float = 1.6
    kernel_size: int = 7
    noise_level: float = 30.0
    bd_order: str = "down_blur"

    def __post_init__(self):
        object.__setattr__(self, "scale", Fraction(self.scale))
        for name, cast in (("blur_sigma", float), ("noise_level", float), ("kernel_size", int)):
            object.__setattr__(self, name, cast(getattr(self, name)))
        if self.kind not in ("BI", "BD", "DN"):
            raise ConfigurationError(f"unknown degradation kind {self.kind!r}")
        if self.scale <= 1:
            raise ConfigurationError(f"degradation scale must exceed 1, got {self.scale}")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be >= 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("blur kernel_size must be odd and positive")
        if self.blur_sigma <= 0:
            raise ConfigurationError("blur_sigma must be positive")
        if self.bd_order not in ("down_blur", "blur_down"):
            raise ConfigurationError(f"bd_order must be down_blur or blur_down, got {self.bd_order!r}")

    @classmethod
    def bd(cls, **kw) -> "DegradationSpec":
        kw.setdefault("scale", Fraction(3))
        return cls(kind="BD", **kw)


def gaussian_kernel(size: int = 7, sigma: float = 1.6) -> np.ndarray:
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, size: int = 7, sigma: float = 1.6) -> np.ndarray:
    """2-D Gaussian blur with reflect padding, output same size as input."""
    k = gaussian_kernel(size, sigma)
    r = size // 2
    c, h, w = img.shape
    if h <= r or w <= r:
        raise UsageError(f"image {h}x{w} too small for a {size}x{size} reflect-padded blur")
    src = np.pad(img.astype(np.float64), ((0, 0), (r, r), (r, r)), mode="reflect")
    out = np.zeros((c, h, w))
    for dy in range(size):
        for dx in range(size):
            out += k[dy, dx] * src[:, dy:dy + h, dx:dx + w]
    return out.astype(img.dtype)


MIN_SIDE = 8


def degrade(img: np.ndarray, spec: DegradationSpec, rng_seed=0) -> np.ndarray:
    """Simulate a low-resolution observation of ``img``.  Pure given the seed."""
    _, h, w = img.shape
    lh, lw = scaled_size(h, 1 / spec.scale), scaled_size(w, 1 / spec.scale)
    if min(lh, lw) < MIN_SIDE:
        raise UsageError(f"image {h}x{w} too small for x{spec.scale} degradation")
    if spec.kind == "BD" and spec.bd_order == "blur_down":
        lr = bicubic_resize(gaussian_blur(img, spec.kernel_size, spec.blur_sigma), lh, lw)
    else:
        lr = bicubic_resize(img, lh, lw)
    if spec.kind == "BD" and spec.bd_order == "down_blur":
        lr = gaussian_blur(lr, spec.kernel_size, spec.blur_sigma)
    elif spec.kind == "DN" and spec.noise_level > 0:
        rng = np.random.default_rng(rng_seed)
        noise = rng.standard_normal(lr.shape) * (spec.noise_level / 255.0)
        lr = (lr + noise).astype(lr.dtype)
    return np.clip(lr, 0.0, 1.0)


# ---------------------------------------------------------------------------
# colour


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma in 0-255 units, shape ``(H, W)``."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise UsageError(f"rgb_to_y expects a (3, H, W) image, got shape {img.shape}")
    r, g, b = (img[i].astype(np.float64) for i in range(3))
    return 16.0 + 65.481 * r + 128.553 * g + 24.966 * b


# ---------------------------------------------------------------------------
# patches


def patch_layout(lr_shape, patch: int, rng: np.random.Generator) -> tuple[int, int, bool, bool]:
    """Draw ``(y, x, hflip, rot90)`` for one LR patch."""
    _, h, w = lr_shape
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    flip, rot = (bool(b) for b in rng.integers(0, 2, size=2))
    return y, x, flip, rot


def augment(img: np.ndarray, flip: bool, rot: bool) -> np.ndarray:
    if flip:
        img = img[:, :, ::-1]
    if rot:
        img = np.rot90(img, axes=(1, 2))
    return np.ascontiguousarray(img)


def sample_patch(hr: np.ndarray, lr: np.ndarray, patch: int, scale: int, rng_seed=0):
    """Aligned random (LR, HR) crop pair with shared flip/rotation augmentation."""
    _, lh, lw = lr.shape
    if hr.shape[1:] != (lh * scale, lw * scale) or hr.shape[0] != lr.shape[0]:
        raise UsageError(f"HR {hr.shape} is not x{scale} of LR {lr.shape}")
    if patch > min(lh, lw) or patch < 1:
        raise UsageError(f"patch {patch} does not fit LR image {lh}x{lw}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    y, x, flip, rot = patch_layout(lr.shape, patch, rng)
    lp = lr[:, y:y + patch, x:x + patch]
    hs = patch * scale
    hp = hr[:, y * scale:y * scale + hs, x * scale:x * scale + hs]
    return augment(lp, flip, rot), augment(hp, flip, rot)


# ---------------------------------------------------------------------------
# PNG


def png_read(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise OSError(f"{path}: cannot read PNG ({exc})") from exc
    return (rgb.transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0).astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def png_write(path, img: np.ndarray) -> None:
    from PIL import Image

    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise UsageError(f"png_write expects (3, H, W) or (1, H, W), got {img.shape}")
    data = to_bytes(img).transpose(1, 2, 0)
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    path = Path(path)
    try:
        Image.fromarray(np.ascontiguousarray(data), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"{path}: cannot write PNG ({exc})") from exc


# ---------------------------------------------------------------------------
# synthetic content for tests, demos and the acceptance runs


def synthetic_image(h: int, w: int, seed: int = 0) -> np.ndarray:
    """Deterministic RGB test picture: smooth shading, hard-edged shapes, stripes."""
    rng = np.random.default_rng(seed)
    ss = 2
    yy, xx = np.mgrid[0:h * ss, 0:w * ss].astype(np.float64) / ss
    img = np.empty((3, h * ss, w * ss))
    for c in range(3):
        a, b, d = rng.uniform(-0.4, 0.4, size=3)
        img[c] = 0.5 + a * yy / h + b * xx / w + 0.1 * np.sin(2 * np.pi * (d + yy / h))
    for _ in range(14):
        color = rng.uniform(0.0, 1.0, size=3)[:, None]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        size = rng.uniform(0.05, 0.25) * min(h, w)
        shape = rng.integers(0, 3)
        if shape == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < size**2
        elif shape == 1:
            mask = (np.abs(yy - cy) < size) & (np.abs(xx - cx) < size * rng.uniform(0.3, 1.5))
        else:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(3.0, 9.0)
            u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
            mask = ((yy - cy) ** 2 + (xx - cx) ** 2 < (1.5 * size) ** 2) & (np.mod(u, period) < period / 2)
        img[:, mask] = color
    img = img.reshape(3, h, ss, w, ss).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0).astype(np.float32)
