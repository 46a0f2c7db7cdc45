"""Synthetic stripe-gapped dataset construction.

Complete scenes are synthesized, a stripe mask is generated independently of
the content and transplanted onto the scene, and the result is tiled into
non-overlapping patches that are split 80/20 within each scene.

Conventions: images are float arrays of shape (H, W, C) in [0, 1]; masks are
uint8 arrays of shape (H, W) with 1 = missing, 0 = known.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

FILL_VALUE = 0.0
MANIFEST_FIELDS = ("id", "split", "slc_off", "mask", "gt", "scene_id", "mask_fraction")
SCENE_KINDS = ("fractal_surface", "ridged", "blobs", "mixed")


class MaskSpecError(ValueError):
    """The requested stripe geometry cannot reach the target missing fraction."""


@dataclass(frozen=True)
class StripeMaskSpec:
    angle: float = 8.0  # degrees from horizontal
    period: float = 24.0
    max_gap_width: float = 16.0
    width_profile: str = "linear_taper"
    target_fraction: float = 0.22

    def validate(self) -> None:
        if not (self.period > self.max_gap_width >= 0):
            raise MaskSpecError("need period > max_gap_width >= 0")
        if not (0.0 <= self.target_fraction <= 0.5):
            raise MaskSpecError("target_fraction must lie in [0, 0.5]")
        if self.width_profile not in ("constant", "linear_taper"):
            raise MaskSpecError(f"unknown width profile {self.width_profile!r}")


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "mixed"
    side: int = 512
    seed: int = 0


@dataclass
class PatchTriple:
    slc_off: np.ndarray
    mask: np.ndarray
    gt: np.ndarray
    id: str = ""
    split: str = "train"
    scene_id: int = 0

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class StripeGeometry:
    """Centerlines and local half-widths behind a generated mask."""

    normal: np.ndarray  # unit vector across the stripes, (row, col)
    offsets: np.ndarray  # signed positions of the centerlines along ``normal``
    half_width: np.ndarray  # (H, W) local half-width of the stripe through each pixel
    width_scale: float


# ---------------------------------------------------------------- masks


def _stripe_frame(spec: StripeMaskSpec, H: int, W: int):
    theta = np.deg2rad(spec.angle)
    # stripe direction in (row, col) coordinates; rows grow downward
    along = np.array([-np.sin(theta), np.cos(theta)])
    normal = np.array([np.cos(theta), np.sin(theta)])
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    rr -= (H - 1) / 2.0
    cc -= (W - 1) / 2.0
    s_normal = rr * normal[0] + cc * normal[1]
    s_along = rr * along[0] + cc * along[1]
    return normal, s_normal, s_along


def _profile(spec: StripeMaskSpec, s_along: np.ndarray) -> np.ndarray:
    if spec.width_profile == "constant":
        return np.ones_like(s_along)
    half = np.abs(s_along).max() or 1.0
    # gaps vanish at the scene center and widen toward the edges
    return np.abs(s_along) / half


def stripe_mask_with_geometry(spec: StripeMaskSpec, H: int, W: int, rng: np.random.Generator):
    """Generate a stripe mask and return it with the geometry that produced it."""
    spec.validate()
    if min(H, W) < spec.period:
        raise MaskSpecError(f"raster {H}x{W} is smaller than the stripe period {spec.period}")
    normal, s_normal, s_along = _stripe_frame(spec, H, W)
    phase = rng.uniform(0.0, spec.period)
    # distance from each pixel to the nearest centerline at phase + k * period
    k = np.round((s_normal - phase) / spec.period)
    dist = np.abs(s_normal - phase - k * spec.period)
    offsets = phase + spec.period * np.arange(k.min(), k.max() + 1)
    full_half = 0.5 * spec.max_gap_width * _profile(spec, s_along)

    def fraction(scale: float) -> float:
        return float((dist < scale * full_half).mean())

    target = spec.target_fraction
    if target == 0.0:
        scale = 0.0
    else:
        if fraction(1.0) < target - 0.02:
            raise MaskSpecError(
                f"target fraction {target} unreachable: max_gap_width {spec.max_gap_width} "
                f"at period {spec.period} covers only {fraction(1.0):.3f}"
            )
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if fraction(mid) < target:
                lo = mid
            else:
                hi = mid
        # pick whichever bracket lands closer to the target
        scale = hi if abs(fraction(hi) - target) <= abs(fraction(lo) - target) else lo
    half_width = scale * full_half
    mask = (dist < half_width).astype(np.uint8)
    return mask, StripeGeometry(normal=normal, offsets=offsets, half_width=half_width, width_scale=scale)


def synth_stripe_mask(spec: StripeMaskSpec, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """Parallel oblique stripes whose missing fraction is calibrated to ``spec.target_fraction``."""
    return stripe_mask_with_geometry(spec, H, W, rng)[0]


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "I", "I;16", "P"):
            raise ValueError(f"mask {path} must be single-channel, got mode {im.mode}")
        arr = np.asarray(im.convert("L") if im.mode in ("1", "P") else im)
    if arr.ndim != 2:
        raise ValueError(f"mask {path} must be single-channel")
    return (arr >= 128).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def apply_mask(gt: np.ndarray, m: np.ndarray, fill: float = FILL_VALUE) -> np.ndarray:
    if gt.shape[:2] != m.shape:
        raise ValueError(f"image {gt.shape[:2]} and mask {m.shape} differ")
    out = gt.copy()
    out[m.astype(bool)] = fill
    return out


# ---------------------------------------------------------------- scenes


def _value_noise(rng: np.random.Generator, side: int, octaves: int = 6, base: int = 4, persistence: float = 0.55):
    out = np.zeros((side, side))
    amp, total = 1.0, 0.0
    cells = base
    for _ in range(octaves):
        grid = rng.standard_normal((cells + 3, cells + 3))
        up = ndimage.zoom(grid, side / cells, order=3, mode="reflect")
        out += amp * up[:side, :side]
        total += amp
        amp *= persistence
        cells *= 2
        if cells > side:
            break
    out /= total
    return out


def _normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(x, [1, 99])
    return np.clip((x - lo) / (hi - lo + 1e-12), 0.0, 1.0)


def _crevasses(rng: np.random.Generator, side: int) -> np.ndarray:
    """Sets of thin, wavy, roughly parallel dark lines."""
    out = np.zeros((side, side))
    rr, cc = np.mgrid[0:side, 0:side].astype(np.float64)
    for _ in range(rng.integers(1, 4)):
        theta = rng.uniform(0, np.pi)
        spacing = rng.uniform(10, 28)
        s = rr * np.cos(theta) + cc * np.sin(theta)
        wobble = 4.0 * _value_noise(rng, side, octaves=3, base=3)
        phase = (s + wobble * spacing / 4.0) / spacing
        line = np.exp(-(((phase - np.round(phase)) * spacing) ** 2) / (2 * rng.uniform(1.5, 3.0) ** 2))
        field_mask = _value_noise(rng, side, octaves=3, base=2) > rng.uniform(-0.2, 0.4)
        out = np.maximum(out, line * ndimage.gaussian_filter(field_mask.astype(float), 6))
    return out


def synth_scene(spec: SceneSpec) -> np.ndarray:
    """Deterministic RGB scene in [0, 1] with snow/ice texture, crevasses and dark rock."""
    if spec.kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {spec.kind!r}")
    rng = np.random.default_rng([spec.seed, 0x5CE7E])
    side = spec.side
    kind = spec.kind
    if kind == "mixed":
        kind = ("fractal_surface", "ridged", "blobs")[int(rng.integers(3))]
    base = _normalize(_value_noise(rng, side, octaves=5, base=4))
    if kind == "ridged":
        ridge = 1.0 - np.abs(_value_noise(rng, side, octaves=5, base=6))
        base = _normalize(0.5 * base + 0.5 * ridge)
    brightness = 0.62 + 0.28 * base
    crev = _crevasses(rng, side) * (1.0 if kind != "blobs" else 0.4)
    brightness = brightness * (1.0 - 0.55 * crev)
    rock = np.zeros((side, side))
    if kind == "blobs" or rng.uniform() < 0.5:
        blob_field = _value_noise(rng, side, octaves=4, base=3)
        thr = np.quantile(blob_field, rng.uniform(0.75, 0.93))
        rock = ndimage.gaussian_filter((blob_field > thr).astype(float), 1.5)
    snow = np.stack([brightness * 0.94, brightness * 0.97, brightness * 1.02], axis=-1)
    rock_tex = 0.18 + 0.15 * _normalize(_value_noise(rng, side, octaves=4, base=8))
    rock_rgb = np.stack([rock_tex * 1.05, rock_tex * 0.95, rock_tex * 0.85], axis=-1)
    img = snow * (1 - rock[..., None]) + rock_rgb * rock[..., None]
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so in-memory data equals what is written to disk."""
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


# ---------------------------------------------------------------- patches and splits


def extract_patches(scene: np.ndarray, size: int, stride: int | None = None) -> list[np.ndarray]:
    stride = size if stride is None else stride
    H, W = scene.shape[:2]
    if size > H or size > W:
        raise ValueError(f"patch size {size} exceeds scene {H}x{W}")
    return [
        scene[r : r + size, c : c + size].copy()
        for r in range(0, H - size + 1, stride)
        for c in range(0, W - size + 1, stride)
    ]


def split(items: Sequence, train_ratio: float = 0.8, rng: np.random.Generator | None = None, groups=None):
    """Random train/test partition, applied separately within each group.

    Each group contributes ``round(n_group * train_ratio)`` training items.
    """
    if not (0.0 < train_ratio < 1.0):
        raise ValueError("train_ratio must lie in (0, 1)")
    if len(items) == 0:
        raise ValueError("nothing to split")
    rng = rng or np.random.default_rng(0)
    groups = [0] * len(items) if groups is None else list(groups)
    train, test = [], []
    for g in sorted(set(groups), key=str):
        idx = [i for i, gi in enumerate(groups) if gi == g]
        perm = rng.permutation(len(idx))
        n_train = int(np.floor(len(idx) * train_ratio + 0.5))
        chosen = set(perm[:n_train].tolist())
        for j, i in enumerate(idx):
            (train if j in chosen else test).append(items[i])
    return train, test


# ---------------------------------------------------------------- augmentation


def _transform(tr: PatchTriple, fn) -> PatchTriple:
    return replace(tr, slc_off=fn(tr.slc_off).copy(), mask=fn(tr.mask).copy(), gt=fn(tr.gt).copy())


def augment_flip(tr: PatchTriple, rng: np.random.Generator) -> PatchTriple:
    h, v = rng.integers(0, 2, size=2)
    return flip(tr, bool(h), bool(v))


def flip(tr: PatchTriple, horizontal: bool, vertical: bool) -> PatchTriple:
    def fn(a):
        if horizontal:
            a = a[:, ::-1]
        if vertical:
            a = a[::-1]
        return a

    return _transform(tr, fn)


def augment_rotate(tr: PatchTriple, rng: np.random.Generator) -> PatchTriple:
    return rotate(tr, int(rng.integers(0, 4)))


def rotate(tr: PatchTriple, quarter_turns: int) -> PatchTriple:
    if tr.mask.shape[0] != tr.mask.shape[1]:
        raise ValueError("rotation needs square patches")
    return _transform(tr, lambda a: np.rot90(a, k=quarter_turns, axes=(0, 1)))


# ---------------------------------------------------------------- disk layout


@dataclass(frozen=True)
class DatasetSpec:
    n_scenes: int = 8
    scene_side: int = 512
    scene_kind: str = "mixed"
    patch_size: int = 64
    train_ratio: float = 0.8
    mask: StripeMaskSpec = field(default_factory=StripeMaskSpec)


def build_scene_triples(spec: DatasetSpec, seed: int, scene_id: int) -> list[PatchTriple]:
    """All patch triples of one scene; the scene's rng depends only on (seed, scene_id)."""
    rng = np.random.default_rng([seed, scene_id])
    scene = quantize(synth_scene(SceneSpec(spec.scene_kind, spec.scene_side, int(rng.integers(2**31)))))
    mask = synth_stripe_mask(spec.mask, spec.scene_side, spec.scene_side, rng)
    slc_off = apply_mask(scene, mask)
    triples = []
    for k, (y, m, g) in enumerate(
        zip(
            extract_patches(slc_off, spec.patch_size),
            extract_patches(mask, spec.patch_size),
            extract_patches(scene, spec.patch_size),
        )
    ):
        triples.append(PatchTriple(slc_off=y, mask=m, gt=g, id=f"s{scene_id:03d}_p{k:04d}", scene_id=scene_id))
    return triples


def build_dataset(spec: DatasetSpec, seed: int) -> list[PatchTriple]:
    triples: list[PatchTriple] = []
    for sid in range(spec.n_scenes):
        triples.extend(build_scene_triples(spec, seed, sid))
    train, _ = split(
        triples, spec.train_ratio, np.random.default_rng([seed, 0xA11]), groups=[t.scene_id for t in triples]
    )
    train_ids = {t.id for t in train}
    for t in triples:
        t.split = "train" if t.id in train_ids else "test"
    return triples


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_dataset(triples: Iterable[PatchTriple], root) -> Path:
    root = Path(root)
    for sub in ("slc_off", "mask", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for t in triples:
        rec = {
            "id": t.id,
            "split": t.split,
            "slc_off": f"slc_off/{t.id}.png",
            "mask": f"mask/{t.id}.png",
            "gt": f"gt/{t.id}.png",
            "scene_id": t.scene_id,
            "mask_fraction": round(t.mask_fraction, 6),
        }
        write_image(root / rec["slc_off"], t.slc_off)
        write_mask(root / rec["mask"], t.mask)
        write_image(root / rec["gt"], t.gt)
        lines.append(json.dumps(rec, sort_keys=False))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(root) -> list[dict]:
    root = Path(root)
    with open(root / "manifest.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(root, split_name: str | None = None) -> list[PatchTriple]:
    root = Path(root)
    out = []
    for rec in read_manifest(root):
        if split_name is not None and rec["split"] != split_name:
            continue
        out.append(
            PatchTriple(
                slc_off=read_image(root / rec["slc_off"]),
                mask=load_mask(root / rec["mask"]),
                gt=read_image(root / rec["gt"]),
                id=rec["id"],
                split=rec["split"],
                scene_id=int(rec["scene_id"]),
            )
        )
    return out
