"""Directional interpolation across stripe gaps, a stand-in for classical gap-fill tools.

Each missing pixel is filled by 1-D linear interpolation between the nearest
known pixels found by walking both ways along the stripe normal.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


def estimate_stripe_normal(mask: np.ndarray) -> np.ndarray:
    """Unit (row, col) vector across the stripes, from the dominant mask frequency."""
    m = np.asarray(mask, dtype=np.float64)
    # zero padding refines the frequency grid for small patches
    shape = (4 * m.shape[0], 4 * m.shape[1])
    spec = np.abs(np.fft.fft2(m - m.mean(), s=shape))
    spec[0, 0] = 0.0
    fr = np.fft.fftfreq(shape[0])
    fc = np.fft.fftfreq(shape[1])
    i, j = np.unravel_index(np.argmax(spec), spec.shape)
    v = np.array([fr[i], fc[j]])
    n = np.linalg.norm(v)
    if n == 0:
        return np.array([1.0, 0.0])
    v = v / n
    # fix the sign so the result is deterministic
    return -v if (v[0] < 0 or (v[0] == 0 and v[1] < 0)) else v


def normal_from_angle(angle_deg: float) -> np.ndarray:
    theta = np.deg2rad(angle_deg)
    return np.array([np.cos(theta), np.sin(theta)])


def directional_interp(
    img: np.ndarray, mask: np.ndarray, normal: np.ndarray | None = None, max_walk: int | None = None, warn: bool = True
):
    """Fill masked pixels of an (H, W, C) or (H, W) image.

    Pixels whose walk does not reach known data on both sides fall back to
    the nearest known pixel, and a warning is logged (at debug level when
    ``warn`` is false, for callers that summarize over many patches).
    """
    img = np.asarray(img)
    m = np.asarray(mask).astype(bool)
    if img.shape[:2] != m.shape:
        raise ValueError(f"image {img.shape} and mask {m.shape} differ")
    out = img.astype(np.float64, copy=True)
    if not m.any():
        return img.copy()
    if m.all():
        raise ValueError("mask covers the whole image; nothing to interpolate from")
    normal = estimate_stripe_normal(m) if normal is None else np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    H, W = m.shape
    max_walk = max_walk or (H + W)
    rows, cols = np.nonzero(m)
    vals = out.reshape(H, W, -1)

    def walk(sign):
        hit_r = np.full(rows.shape, -1)
        hit_c = np.full(rows.shape, -1)
        dist = np.full(rows.shape, np.inf)
        pending = np.ones(rows.shape, dtype=bool)
        for k in range(1, max_walk + 1):
            if not pending.any():
                break
            rr = np.rint(rows + sign * k * normal[0]).astype(int)
            cc = np.rint(cols + sign * k * normal[1]).astype(int)
            inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            pending &= inside
            ok = pending.copy()
            ok[ok] = ~m[rr[ok], cc[ok]]
            hit_r[ok], hit_c[ok], dist[ok] = rr[ok], cc[ok], k
            pending &= ~ok
        return hit_r, hit_c, dist

    r1, c1, d1 = walk(+1)
    r2, c2, d2 = walk(-1)
    both = np.isfinite(d1) & np.isfinite(d2)
    with np.errstate(invalid="ignore"):
        w1 = np.where(both, d2 / (d1 + d2), 0.0)[:, None]
    filled = np.empty((len(rows), vals.shape[-1]))
    filled[both] = w1[both] * vals[r1[both], c1[both]] + (1 - w1[both]) * vals[r2[both], c2[both]]
    if not both.all():
        log.log(
            logging.WARNING if warn else logging.DEBUG,
            "%d gap pixels are not bounded on both sides; using nearest known fill",
            int((~both).sum()),
        )
        _, (ir, ic) = ndimage.distance_transform_edt(m, return_indices=True)
        lone = ~both
        filled[lone] = vals[ir[rows[lone], cols[lone]], ic[rows[lone], cols[lone]]]
    vals[rows, cols] = filled
    out = vals.reshape(out.shape)
    # known pixels are copied back untouched
    return np.where(m[..., None] if img.ndim == 3 else m, out, img).astype(img.dtype)
