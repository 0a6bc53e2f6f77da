"""Restoration quality metrics and the delivery cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeMismatch, Tensor4, bicubic_resize

MB = 10 ** 6

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: Tensor4, b: Tensor4) -> float:
    """Peak signal-to-noise ratio in dB over all channels, range [0,1].

    Identical images return +inf.
    """
    if a.dims != b.dims:
        raise ShapeMismatch(f"psnr: dims {a.dims} vs {b.dims}")
    mse = np.mean((np.asarray(a.data, np.float64) - b.data) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(n=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(n, dtype=np.float64) - (n - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(img, g):
    """Separable valid-mode correlation of a 2-D image with outer(g, g)."""
    n = g.size
    rows = sliding_window_view(img, n, axis=1) @ g
    return np.ascontiguousarray(
        sliding_window_view(rows, n, axis=0) @ g)


def ssim(a: Tensor4, b: Tensor4) -> float:
    """Mean local SSIM on the grayscale (channel-mean) images.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.
    """
    if a.dims != b.dims:
        raise ShapeMismatch(f"ssim: dims {a.dims} vs {b.dims}")
    _, _, h, w = a.dims
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeMismatch(
            f"image ({h}x{w}) smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    scores = []
    for n in range(a.dims[0]):
        x = np.asarray(a.data[n], np.float64).mean(axis=0)
        y = np.asarray(b.data[n], np.float64).mean(axis=0)
        mu_x = _filter_valid(x, g)
        mu_y = _filter_valid(y, g)
        var_x = _filter_valid(x * x, g) - mu_x ** 2
        var_y = _filter_valid(y * y, g) - mu_y ** 2
        cov = _filter_valid(x * y, g) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def consistency(lr: Tensor4, sr: Tensor4, scale: int) -> float:
    """MSE between the LR input and the downscaled SR output, times 10.

    Reported in units of 1e-1 to match the usual table scale.
    """
    if scale == 1:
        down = sr
    else:
        down = bicubic_resize(sr, Fraction(1, scale))
    if down.dims != lr.dims:
        raise ShapeMismatch(f"consistency: {down.dims} vs {lr.dims}")
    mse = np.mean((np.asarray(lr.data, np.float64) - down.data) ** 2)
    return float(mse * 10.0)


# ---------------------------------------------------------------------------
# delivery cost model
# ---------------------------------------------------------------------------

SCHEMES = ("per-chunk-models", "shared-model", "shared-model+tvp")


@dataclass
class CostReport:
    """Byte accounting for one delivery scheme.

    per-chunk-models: sum(S_i + L_i)
    shared-model:     S + sum(L_i)
    shared-model+tvp: S + sum(L_i + T_i)
    """

    scheme: str
    lr_bytes: list = field(default_factory=list)
    model_bytes: list = field(default_factory=list)
    prompt_bytes: list = field(default_factory=list)

    @property
    def chunk_count(self) -> int:
        return len(self.lr_bytes)

    @property
    def lr_total(self) -> int:
        return sum(self.lr_bytes)

    @property
    def model_total(self) -> int:
        return sum(self.model_bytes) + sum(self.prompt_bytes)

    @property
    def total_bytes(self) -> int:
        return self.lr_total + self.model_total

    def format_line(self) -> str:
        """'LR+MODEL (TOTAL)' in MB, e.g. '3.62+0.27 (3.89)'."""
        return "%.2f+%.2f (%.2f)" % (self.lr_total / MB, self.model_total / MB,
                                     self.total_bytes / MB)


def _file_size(path) -> int:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"cost report input missing: {p}")
    return p.stat().st_size


def cost_report(scheme: str, lr_chunk_files, model_files,
                prompt_bytes=None, lr_override_bytes=None) -> CostReport:
    """Measure artifact sizes and assemble the per-scheme totals.

    lr_chunk_files: one list of frame paths per chunk. model_files: one
    container for shared schemes, one per chunk otherwise. prompt_bytes:
    per-chunk prompt payload sizes (shared-model+tvp only).
    lr_override_bytes substitutes externally-encoded chunk sizes.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    n = len(lr_chunk_files)
    if lr_override_bytes is not None:
        if len(lr_override_bytes) != n:
            raise ValueError("need one LR size override per chunk")
        lr_bytes = [int(v) for v in lr_override_bytes]
    else:
        lr_bytes = [sum(_file_size(f) for f in chunk) for chunk in lr_chunk_files]
    model_files = list(model_files)
    if scheme == "per-chunk-models":
        if len(model_files) != n:
            raise ValueError(f"per-chunk scheme needs {n} models, got {len(model_files)}")
    elif len(model_files) != 1:
        raise ValueError("shared schemes take exactly one model container")
    model_bytes = [_file_size(f) for f in model_files]
    if scheme == "shared-model+tvp":
        t = [int(v) for v in (prompt_bytes or [])]
        if len(t) != n:
            raise ValueError(f"need one prompt size per chunk, got {len(t)}")
    else:
        t = [0] * n
    return CostReport(scheme, lr_bytes, model_bytes, t)
