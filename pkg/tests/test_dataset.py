import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffgf.dataset import (
    DatasetSpec,
    MaskSpecError,
    PatchTriple,
    SceneSpec,
    StripeMaskSpec,
    apply_mask,
    augment_flip,
    augment_rotate,
    build_dataset,
    extract_patches,
    flip,
    load_dataset,
    load_mask,
    read_manifest,
    rotate,
    split,
    stripe_mask_with_geometry,
    synth_scene,
    synth_stripe_mask,
    write_dataset,
    write_mask,
    MANIFEST_FIELDS,
)


def centerline_distance(geom, H, W):
    """Brute force: distance of every pixel center to every generated centerline, minimized."""
    rr, cc = np.mgrid[0:H, 0:W].astype(float)
    s = (rr - (H - 1) / 2) * geom.normal[0] + (cc - (W - 1) / 2) * geom.normal[1]
    best = np.full((H, W), np.inf)
    for off in geom.offsets:
        best = np.minimum(best, np.abs(s - off))
    return best


# ---------------------------------------------------------------- masks


def test_default_missing_fraction():
    m = synth_stripe_mask(StripeMaskSpec(target_fraction=0.22), 128, 128, np.random.default_rng(0))
    assert 0.20 <= m.mean() <= 0.24
    assert set(np.unique(m)) <= {0, 1}


def test_zero_fraction_gives_empty_mask():
    m = synth_stripe_mask(StripeMaskSpec(target_fraction=0.0), 64, 64, np.random.default_rng(0))
    assert not m.any()


def test_infeasible_spec():
    with pytest.raises(MaskSpecError):
        synth_stripe_mask(StripeMaskSpec(period=24, max_gap_width=2, target_fraction=0.4), 64, 64, np.random.default_rng(0))
    with pytest.raises(MaskSpecError):
        StripeMaskSpec(period=10, max_gap_width=12).validate()


@pytest.mark.parametrize("profile", ["constant", "linear_taper"])
def test_gap_pixels_near_centerlines(profile):
    spec = StripeMaskSpec(width_profile=profile, target_fraction=0.22)
    for seed in range(100):
        m, geom = stripe_mask_with_geometry(spec, 64, 64, np.random.default_rng(seed))
        d = centerline_distance(geom, 64, 64)[m.astype(bool)]
        assert np.all(d <= spec.max_gap_width / 2)
        # within one pixel of the local stripe edge around its centerline
        assert np.all(d <= geom.half_width[m.astype(bool)] + 1.0)


def test_stripes_span_the_raster():
    spec = StripeMaskSpec(width_profile="constant", angle=0.0)
    m = synth_stripe_mask(spec, 96, 96, np.random.default_rng(3))
    # horizontal stripes: each masked row is masked across the full width
    rows = m.any(axis=1)
    assert np.all(m[rows].all(axis=1))


@settings(max_examples=30, deadline=None)
@given(
    target=st.floats(0.05, 0.3),
    angle=st.floats(-30, 30),
    seed=st.integers(0, 10_000),
)
def test_fraction_accuracy(target, angle, seed):
    spec = StripeMaskSpec(angle=angle, target_fraction=target, width_profile="constant")
    m = synth_stripe_mask(spec, 64, 64, np.random.default_rng(seed))
    assert abs(m.mean() - target) <= 0.02


def test_mask_io(tmp_path):
    p = tmp_path / "ones.png"
    write_mask(p, np.ones((8, 8), np.uint8))
    assert load_mask(p).all()
    write_mask(p, np.zeros((8, 8), np.uint8))
    assert not load_mask(p).any()
    rng = np.random.default_rng(0)
    for i in range(20):
        m = (rng.random((16, 24)) < 0.3).astype(np.uint8)
        write_mask(p, m)
        assert np.array_equal(load_mask(p), m)


def test_load_mask_rejects_rgb(tmp_path):
    from PIL import Image

    p = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(p)
    with pytest.raises(ValueError):
        load_mask(p)


def test_apply_mask():
    rng = np.random.default_rng(0)
    gt = rng.random((16, 16, 3))
    assert np.array_equal(apply_mask(gt, np.zeros((16, 16), np.uint8)), gt)
    assert not apply_mask(gt, np.ones((16, 16), np.uint8)).any()
    for _ in range(20):
        m = (rng.random((16, 16)) < 0.4).astype(np.uint8)
        out = apply_mask(gt, m)
        for i in range(16):
            for j in range(16):
                if m[i, j]:
                    assert np.all(out[i, j] == 0)
                else:
                    assert np.array_equal(out[i, j], gt[i, j])
    with pytest.raises(ValueError):
        apply_mask(gt, np.zeros((8, 8)))


# ---------------------------------------------------------------- scenes and patches


def test_scene_range_and_determinism():
    a = synth_scene(SceneSpec("mixed", 128, 4))
    b = synth_scene(SceneSpec("mixed", 128, 4))
    assert a.shape == (128, 128, 3)
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)
    assert not np.array_equal(a, synth_scene(SceneSpec("mixed", 128, 5)))


def _autocorr(x, lag):
    x = x - x.mean()
    return float((x[:, :-lag] * x[:, lag:]).mean() / x.var())


def test_scene_has_spatial_texture():
    for seed in range(20):
        g = synth_scene(SceneSpec("mixed", 128, seed)).mean(axis=-1)
        assert _autocorr(g, 1) > _autocorr(g, 16)


def test_extract_patches():
    scene = np.random.default_rng(0).random((512, 512, 3))
    assert len(extract_patches(scene, 64)) == 64
    one = extract_patches(scene, 512)
    assert len(one) == 1 and np.array_equal(one[0], scene)
    with pytest.raises(ValueError):
        extract_patches(scene, 1024)


def test_patches_cover_scene_once():
    H = 192
    ids = np.arange(H * H).reshape(H, H)
    count = np.zeros((H, H), int)
    for p in extract_patches(ids, 64):
        np.add.at(count.reshape(-1), p.reshape(-1), 1)
    assert np.all(count == 1)


def test_split_ratio_and_groups():
    items = list(range(100))
    train, test = split(items, 0.8, np.random.default_rng(0))
    assert len(train) == 80 and len(test) == 20
    assert sorted(train + test) == items
    groups = [0] * 10 + [1] * 10
    train, test = split(list(range(20)), 0.8, np.random.default_rng(0), groups=groups)
    assert sum(1 for i in train if i < 10) == 8 and sum(1 for i in train if i >= 10) == 8
    a = split(items, 0.8, np.random.default_rng(3))
    b = split(items, 0.8, np.random.default_rng(3))
    assert a == b
    with pytest.raises(ValueError):
        split([], 0.8)
    with pytest.raises(ValueError):
        split(items, 1.0)


# ---------------------------------------------------------------- augmentation


def _random_triple(rng, side=16):
    gt = rng.random((side, side, 3))
    m = (rng.random((side, side)) < 0.3).astype(np.uint8)
    return PatchTriple(apply_mask(gt, m), m, gt, "x")


def _consistent(t):
    known = ~t.mask.astype(bool)
    return np.array_equal(t.slc_off[known], t.gt[known]) and not t.slc_off[~known].any()


def test_flip_and_rotate_identities():
    t = _random_triple(np.random.default_rng(0))
    twice = flip(flip(t, True, False), True, False)
    assert np.array_equal(twice.gt, t.gt) and np.array_equal(twice.mask, t.mask)
    r0 = rotate(t, 0)
    assert np.array_equal(r0.slc_off, t.slc_off)
    r4 = rotate(rotate(t, 1), 3)
    assert np.array_equal(r4.gt, t.gt)


def test_augmentations_preserve_triple_consistency():
    rng = np.random.default_rng(1)
    for _ in range(50):
        t = _random_triple(rng)
        assert _consistent(augment_flip(t, rng))
        assert _consistent(augment_rotate(t, rng))


def test_rotate_needs_square():
    gt = np.zeros((8, 16, 3))
    t = PatchTriple(gt, np.zeros((8, 16), np.uint8), gt)
    with pytest.raises(ValueError):
        rotate(t, 1)


# ---------------------------------------------------------------- dataset build and disk layout


SMALL = DatasetSpec(n_scenes=2, scene_side=128, patch_size=64)


def test_build_dataset_split_and_consistency():
    triples = build_dataset(SMALL, seed=0)
    assert len(triples) == 8
    for t in triples:
        assert _consistent(t)
    # 4 patches per scene, 80% rounds to 3
    assert sum(t.split == "train" for t in triples) == 6


def test_dataset_roundtrip_and_determinism(tmp_path):
    triples = build_dataset(SMALL, seed=0)
    write_dataset(triples, tmp_path / "a")
    write_dataset(build_dataset(SMALL, seed=0), tmp_path / "b")
    recs = read_manifest(tmp_path / "a")
    assert all(tuple(r) == MANIFEST_FIELDS for r in recs)
    for sub in ("manifest.jsonl", *(r["gt"] for r in recs), *(r["mask"] for r in recs)):
        assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()
    loaded = load_dataset(tmp_path / "a")
    for t, u in zip(triples, loaded):
        assert t.id == u.id and t.split == u.split
        assert np.array_equal(t.mask, u.mask)
        assert np.array_equal(t.gt, u.gt)
        assert np.array_equal(t.slc_off, u.slc_off)
