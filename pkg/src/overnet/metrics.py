"""Multi-scale L1 objective and Y-channel PSNR / SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .errors import UsageError
from .imageops import resize, rgb_to_y
from .tensor import Tensor


def parse_scale(text) -> Fraction:
    if isinstance(text, Fraction):
        return text
    if isinstance(text, float):
        return Fraction(text).limit_denominator(1000)
    try:
        return Fraction(str(text).strip())
    except ValueError:
        raise UsageError(f"not a scale: {text!r}") from None


class ScaleSet(tuple):
    """Strictly increasing, non-empty tuple of rational scales above 1.

    Parses ``"2,3,4"`` or a range ``"1.1:4.0:0.1"`` (inclusive).
    """

    def __new__(cls, scales: Iterable = (2, 3, 4)):
        if isinstance(scales, str):
            scales = cls._parse(scales)
        vals = tuple(parse_scale(s) for s in scales)
        if not vals:
            raise UsageError("scale set is empty")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise UsageError(f"scale set must be strictly increasing: {[str(v) for v in vals]}")
        if vals[0] <= 1:
            raise UsageError("scales must exceed 1")
        return super().__new__(cls, vals)

    @staticmethod
    def _parse(text: str) -> list[Fraction]:
        text = text.strip()
        if ":" in text:
            lo, hi, step = (parse_scale(p) for p in text.split(":"))
            if step <= 0:
                raise UsageError("scale range step must be positive")
            out, s = [], lo
            while s <= hi:
                out.append(s)
                s += step
            return out
        return [parse_scale(p) for p in text.split(",") if p.strip()]

    def check_max(self, max_scale: int) -> "ScaleSet":
        if self[-1] > max_scale:
            raise UsageError(f"scale {self[-1]} exceeds the model's maximum x{max_scale}")
        return self

    def __str__(self) -> str:
        return ",".join(format_scale(s) for s in self)


def format_scale(s) -> str:
    s = Fraction(s)
    if s.denominator == 1:
        return str(s.numerator)
    f = float(s)
    return f"{f:g}" if Fraction(f"{f:g}") == s else str(s)


# ---------------------------------------------------------------------------
# objective


def scale_targets(hr: np.ndarray, outputs: Mapping[Fraction, Tensor]) -> dict[Fraction, np.ndarray]:
    """Bicubic-downscaled copies of an NCHW ``hr`` batch matching each output size."""
    src = Tensor(hr)
    return {s: resize(src, *out.shape[2:]).data for s, out in outputs.items()}


def multiscale_l1(
    outputs: Mapping[Fraction, Tensor],
    hr,
    scales: Iterable | None = None,
    targets: Mapping[Fraction, np.ndarray] | None = None,
) -> Tensor:
    """Sum over scales of the mean absolute error against resized ``hr``."""
    scales = list(outputs) if scales is None else [parse_scale(s) for s in scales]
    missing = [s for s in scales if s not in outputs]
    if missing:
        raise UsageError(f"no output for scale {format_scale(missing[0])}")
    if targets is None:
        hr_data = hr.data if isinstance(hr, Tensor) else np.asarray(hr)
        targets = scale_targets(hr_data.astype(outputs[scales[0]].dtype), {s: outputs[s] for s in scales})
    terms = [T.mean_abs_error(outputs[s], Tensor(targets[s])) for s in scales]
    return T.total(terms)


# ---------------------------------------------------------------------------
# metrics


def _crop(y: np.ndarray, border: int) -> np.ndarray:
    return y[border:y.shape[0] - border, border:y.shape[1] - border] if border else y


def _prepare(sr: np.ndarray, hr: np.ndarray, scale, crop: bool) -> tuple[np.ndarray, np.ndarray]:
    if sr.shape != hr.shape:
        raise UsageError(f"image shapes differ: {sr.shape} vs {hr.shape}")
    border = math.ceil(scale) if crop else 0
    if min(sr.shape[-2:]) < 2 * border + 1:
        raise UsageError(f"image {sr.shape[-2]}x{sr.shape[-1]} too small to crop {border} px borders")
    ys = rgb_to_y(sr) if sr.ndim == 3 else np.asarray(sr, dtype=np.float64)
    yh = rgb_to_y(hr) if hr.ndim == 3 else np.asarray(hr, dtype=np.float64)
    return _crop(ys, border), _crop(yh, border)


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def psnr(sr: np.ndarray, hr: np.ndarray, scale=0, crop: bool = True) -> float:
    """PSNR in dB on BT.601 luma after cropping ``ceil(scale)`` border pixels.

    RGB inputs are ``(3, H, W)`` in ``[0, 1]``; 2-D inputs are taken as luma
    already in 0-255 units.  Identical inputs give ``inf``.
    """
    return psnr_y(*_prepare(sr, hr, scale, crop))


SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 255.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    d = np.arange(size) - (size - 1) / 2
    g = np.exp(-(d**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(img, len(g), axis=0)
    tmp = win @ g
    win = np.lib.stride_tricks.sliding_window_view(tmp, len(g), axis=1)
    return win @ g


def ssim_y(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    if min(a.shape) < size:
        raise UsageError(f"image {a.shape} smaller than the {size}x{size} SSIM window")
    g = gaussian_window(size, sigma)
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * (mu_a * mu_b) + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(sr: np.ndarray, hr: np.ndarray, scale=0, crop: bool = True) -> float:
    """Single-scale SSIM on cropped luma (11x11 Gaussian window, sigma 1.5)."""
    return ssim_y(*_prepare(sr, hr, scale, crop))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    per_image: dict[str, dict[Fraction, tuple[float, float]]] = field(default_factory=dict)
    baseline: dict[str, dict[Fraction, tuple[float, float]]] = field(default_factory=dict)
    fingerprint: str = ""
    seconds: float = 0.0

    def _means(self, table) -> dict[Fraction, tuple[float, float]]:
        out = {}
        scales = sorted({s for row in table.values() for s in row})
        for s in scales:
            vals = [row[s] for row in table.values() if s in row]
            out[s] = (float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
        return out

    @property
    def aggregate(self) -> dict[Fraction, tuple[float, float]]:
        return self._means(self.per_image)

    @property
    def baseline_aggregate(self) -> dict[Fraction, tuple[float, float]]:
        return self._means(self.baseline)

    def records(self) -> list[str]:
        """``name<TAB>scale<TAB>psnr<TAB>ssim`` lines, model rows then ``bicubic:`` rows."""
        lines = []
        for prefix, table in (("", self.per_image), ("bicubic:", self.baseline)):
            for name in sorted(table):
                for s in sorted(table[name]):
                    p, q = table[name][s]
                    lines.append(f"{prefix}{name}\t{format_scale(s)}\t{_fnum(p)}\t{q:.6f}")
        return lines

    def table(self) -> str:
        head = f"{'image':<24}{'scale':>7}{'PSNR':>10}{'SSIM':>9}{'bic PSNR':>10}{'bic SSIM':>10}"
        rows = [head, "-" * len(head)]
        for name in sorted(self.per_image):
            for s in sorted(self.per_image[name]):
                p, q = self.per_image[name][s]
                bp, bq = self.baseline.get(name, {}).get(s, (math.nan, math.nan))
                rows.append(f"{name:<24}{format_scale(s):>7}{_fnum(p):>10}{q:>9.4f}{_fnum(bp):>10}{bq:>10.4f}")
        base = self.baseline_aggregate
        for s, (p, q) in self.aggregate.items():
            bp, bq = base.get(s, (math.nan, math.nan))
            rows.append(f"{'mean':<24}{format_scale(s):>7}{_fnum(p):>10}{q:>9.4f}{_fnum(bp):>10}{bq:>10.4f}")
        rows.append(f"config {self.fingerprint}  ({self.seconds:.1f}s)")
        return "\n".join(rows)


def _fnum(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.4f}"
