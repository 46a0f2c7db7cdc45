"""Image-quality and segmentation metrics.

Every image metric is computed per band and can be restricted to the
missing-pixel region through a :class:`RegionSelector`. Images are (H, W, C)
arrays in [0, 1]; the peak value used for PSNR and SSIM is 1.0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_SIGMA = 11, 1.5
METRIC_COLUMNS = ("PSNR", "UIQI", "SSIM", "CC", "RMSE", "LPIPS")


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSelector:
    mode: str = "full"
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("full", "mask_only"):
            raise ValueError(f"unknown region mode {self.mode!r}")
        if (self.mode == "mask_only") != (self.mask is not None):
            raise ValueError("a mask is required exactly when mode == 'mask_only'")

    @classmethod
    def masked(cls, mask) -> "RegionSelector":
        return cls("mask_only", np.asarray(mask))

    def select(self, band: np.ndarray) -> np.ndarray:
        """Flattened values of ``band`` (H, W) inside the region."""
        if self.mode == "full":
            return band.reshape(-1)
        sel = np.asarray(self.mask).astype(bool)
        if sel.shape != band.shape:
            raise ValueError(f"mask {sel.shape} does not match band {band.shape}")
        if not sel.any():
            raise EmptyRegionError("mask_only region selects no pixels")
        return band[sel]


FULL = RegionSelector()


def _bands(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def _per_band(fn, a, b, region: RegionSelector | None):
    region = region or FULL
    a, b = _bands(a, b)
    return np.array([fn(region.select(a[..., k]), region.select(b[..., k])) for k in range(a.shape[-1])])


def mse(a, b, region: RegionSelector | None = None) -> np.ndarray:
    return _per_band(lambda x, y: np.mean((x - y) ** 2), a, b, region)


def rmse(a, b, region: RegionSelector | None = None) -> np.ndarray:
    return np.sqrt(mse(a, b, region))


def psnr(a, b, region: RegionSelector | None = None) -> np.ndarray:
    """Per-band PSNR with peak 1.0; ``inf`` when the bands match exactly."""
    err = mse(a, b, region)
    with np.errstate(divide="ignore"):
        return np.where(err == 0, np.inf, 10.0 * np.log10(1.0 / np.where(err == 0, 1.0, err)))


def _cc(x, y):
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.mean(dx * dx)), np.sqrt(np.mean(dy * dy))
    if sx == 0 or sy == 0:
        return 0.0, True
    return float(np.clip(np.mean(dx * dy) / (sx * sy), -1.0, 1.0)), False


def cc_with_flags(a, b, region: RegionSelector | None = None):
    """Pearson correlation per band plus a flag marking constant-signal bands (value 0)."""
    region = region or FULL
    a, b = _bands(a, b)
    out = [_cc(region.select(a[..., k]), region.select(b[..., k])) for k in range(a.shape[-1])]
    return np.array([v for v, _ in out]), np.array([f for _, f in out])


def cc(a, b, region: RegionSelector | None = None) -> np.ndarray:
    return cc_with_flags(a, b, region)[0]


def _uiqi(x, y):
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy, cxy = np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)
    den = (vx + vy) * (mx * mx + my * my)
    if den == 0:
        # constant or zero-mean-only cases: identical signals score 1, anything else 0
        return (1.0 if np.array_equal(x, y) else 0.0), True
    return float(4.0 * cxy * mx * my / den), False


def uiqi_with_flags(a, b, region: RegionSelector | None = None):
    region = region or FULL
    a, b = _bands(a, b)
    out = [_uiqi(region.select(a[..., k]), region.select(b[..., k])) for k in range(a.shape[-1])]
    return np.array([v for v, _ in out]), np.array([f for _, f in out])


def uiqi(a, b, region: RegionSelector | None = None) -> np.ndarray:
    """Universal image quality index, computed once over the whole region."""
    return uiqi_with_flags(a, b, region)[0]


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM of two bands on a Gaussian window, borders handled by symmetric reflection."""
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"band {x.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    w = gaussian_window()
    filt = lambda z: ndimage.correlate(z, w, mode="reflect")  # noqa: E731
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, region: RegionSelector | None = None) -> np.ndarray:
    """Per-band SSIM; in mask_only mode the local map is averaged over masked pixels."""
    region = region or FULL
    a, b = _bands(a, b)
    return np.array([np.mean(region.select(ssim_map(a[..., k], b[..., k]))) for k in range(a.shape[-1])])


# ---------------------------------------------------------------- perceptual plug-ins


class NullPerceptual(nn.Module):
    """Perceptual slot that always returns zero; used in tests and gradient checks."""

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return (a - b).sum() * 0.0


class RandomFeaturePerceptual(nn.Module):
    """LPIPS-shaped distance on frozen random convolutional features.

    Features are extracted at three scales, unit-normalized along channels,
    and compared with a spatially averaged squared difference. Inputs are
    (N, 3, H, W) in [0, 1]; the result is the batch mean.
    """

    def __init__(self, seed: int = 1234, widths: Sequence[int] = (16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, cout in enumerate(widths):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x):
        h = 2.0 * x - 1.0
        feats = []
        for conv in self.layers:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h / (h.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt())
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa, fb = self.features(a), self.features(b)
        per_layer = [((u - v) ** 2).sum(dim=1).mean(dim=(1, 2)) for u, v in zip(fa, fb)]
        return torch.stack(per_layer, 0).sum(0).mean()


PLUGINS = {"random_features": RandomFeaturePerceptual, "null": NullPerceptual}


def make_plugin(name: str = "random_features") -> nn.Module:
    try:
        return PLUGINS[name]().eval()
    except KeyError:
        raise ValueError(f"unknown perceptual plug-in {name!r}") from None


def _to_nchw(a) -> torch.Tensor:
    t = torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)
    return t.permute(2, 0, 1).unsqueeze(0)


def perceptual_distance(a, b, plugin: nn.Module | None = None) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError("perceptual distance needs (H, W, 3) images")
    plugin = plugin if plugin is not None else make_plugin()
    with torch.no_grad():
        return max(float(plugin(_to_nchw(a), _to_nchw(b))), 0.0)


# ---------------------------------------------------------------- segmentation and error maps


def seg_metrics(pred, ref) -> dict:
    """IoU/OA/recall/precision/F1 for the positive class; undefined ratios are 0 and flagged."""
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    tp = int(np.sum(pred & ref))
    fp = int(np.sum(pred & ~ref))
    fn = int(np.sum(~pred & ref))
    tn = int(np.sum(~pred & ~ref))
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    iou = ratio(tp, tp + fp + fn, "IoU")
    f1 = ratio(2 * precision * recall, precision + recall, "F1")
    oa = (tp + tn) / pred.size
    return {
        "IoU": iou,
        "OA": oa,
        "recall": recall,
        "precision": precision,
        "F1": f1,
        "degenerate": tuple(degenerate),
        "confusion": {"TP": tp, "FP": fp, "FN": fn, "TN": tn},
    }


def error_map(a, b) -> np.ndarray:
    a, b = _bands(a, b)
    diff = np.abs(a - b).mean(axis=-1)
    peak = diff.max()
    return diff / peak if peak > 0 else np.zeros_like(diff)


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    """Per-band and mean metrics for one method and one region mode."""

    method: str
    region: str
    bands: dict  # metric -> list of per-band values
    mean: dict  # metric -> mean over bands
    perceptual: float | None = None
    n_patches: int = 0
    n_skipped: int = 0

    def rows(self) -> list[dict]:
        out = []
        names = ("R", "G", "B") if len(next(iter(self.bands.values()))) == 3 else None
        nb = len(next(iter(self.bands.values())))
        for k in range(nb):
            row = {"method": self.method, "region": self.region, "band": names[k] if names else str(k)}
            row.update({m: self.bands[m][k] for m in METRIC_COLUMNS[:-1]})
            row["LPIPS"] = None
            out.append(row)
        row = {"method": self.method, "region": self.region, "band": "Mean"}
        row.update({m: self.mean[m] for m in METRIC_COLUMNS[:-1]})
        row["LPIPS"] = self.perceptual
        out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "region": self.region,
            "bands": self.bands,
            "mean": self.mean,
            "perceptual": self.perceptual,
            "n_patches": self.n_patches,
            "n_skipped": self.n_skipped,
        }


_FUNCS: dict[str, Callable] = {"PSNR": psnr, "UIQI": uiqi, "SSIM": ssim, "CC": cc, "RMSE": rmse}


def report(
    pairs: Iterable[tuple],
    plugin: nn.Module | None = None,
    method: str = "restored",
) -> list[MetricReport]:
    """Full-image and mask-only reports averaged over patches.

    ``pairs`` yields ``(restored, reference, mask)``. Patches whose mask is
    empty are skipped in the mask-only aggregate and counted in ``n_skipped``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty evaluation set")
    full_vals = {m: [] for m in _FUNCS}
    mask_vals = {m: [] for m in _FUNCS}
    percept = []
    skipped = 0
    for restored, ref, mask in pairs:
        for m, fn in _FUNCS.items():
            full_vals[m].append(fn(restored, ref))
        if plugin is not None:
            percept.append(perceptual_distance(restored, ref, plugin))
        if np.asarray(mask).any():
            region = RegionSelector.masked(mask)
            for m, fn in _FUNCS.items():
                mask_vals[m].append(fn(restored, ref, region))
        else:
            skipped += 1

    def build(vals, region, perceptual, n, nskip):
        bands = {m: [float(v) for v in np.mean(np.stack(vals[m]), axis=0)] for m in _FUNCS}
        mean = {m: float(np.mean(bands[m])) for m in _FUNCS}
        return MetricReport(method, region, bands, mean, perceptual, n, nskip)

    out = [build(full_vals, "full", float(np.mean(percept)) if percept else None, len(pairs), 0)]
    if mask_vals["RMSE"]:
        out.append(build(mask_vals, "mask_only", None, len(pairs) - skipped, skipped))
    return out


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return str(v)


def write_report(reports: Sequence[MetricReport], stem) -> tuple[Path, Path]:
    """Write a CSV table and a JSON twin next to each other."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "region", "band", *METRIC_COLUMNS])
        for r in reports:
            for row in r.rows():
                w.writerow([row["method"], row["region"], row["band"], *(_fmt(row[c]) for c in METRIC_COLUMNS)])
    json_path.write_text(json.dumps([r.to_dict() for r in reports], indent=2, default=_json_default) + "\n")
    return csv_path, json_path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
