"""Orchestration behind the CLI: dataset builds, staged training, restoration,
evaluation, ablation and latency benchmarking.

Every ``cmd_*`` function takes a :class:`RunConfig` plus paths and returns a
small summary dict; all of them write their artifacts under ``out``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .baseline import directional_interp, normal_from_angle
from .checkpoint import Checkpoint, CheckpointError, ModelBlob, config_to_dict, dict_to_config, load_checkpoint, save_checkpoint
from .codec import Codec, CodecConfig, train_codec
from .config import RunConfig, to_flat
from .dataset import PatchTriple, load_dataset, load_mask, read_image, write_dataset, write_image, build_dataset
from .denoiser import Denoiser, DenoiserConfig, train_denoiser
from .metrics import error_map, make_plugin, report, write_report
from .mghnet import MGHNet, RefinerConfig, train_refiner
from .restore import Models, restore_image, restore_patch
from .schedule import NoiseSchedule, build_schedule
from .training import seed_everything, set_deterministic, smooth

log = logging.getLogger(__name__)

CHECKPOINT = "diffgf.ckpt"
VARIANT_DIR = "variants"

# refiner variants trained for the ablation, keyed by tag, with their config overrides
REFINER_VARIANTS = {
    "designed": {},
    "y0_input": {"refiner.guidance": "y0"},
    "resblock_with_bn": {"refiner.resblock_variant": "with_bn"},
    "resblock_classic": {"refiner.resblock_variant": "classic"},
}

# (row label, refiner variant or None for no refinement, sampling steps or None for the default)
ABLATION_ROWS = (
    ("DiffGF", "designed", None),
    ("Diffusion-only", None, None),
    ("Sampling step: 2", "designed", 2),
    ("Sampling step: 8", "designed", 8),
    ("Input: Replace Δ with y_0", "y0_input", None),
    ("ResBlock-Variant 1", "resblock_with_bn", None),
    ("ResBlock-Variant 2", "resblock_classic", None),
)
ABLATION_COLUMNS = ("PSNR", "UIQI", "SSIM", "CC", "RMSE", "LPIPS/full")


class StageError(RuntimeError):
    """A training stage was started without its prerequisites."""


def prepare(cfg: RunConfig) -> None:
    set_deterministic(cfg.deterministic)
    seed_everything(cfg.seed)


# ---------------------------------------------------------------- dataset


def cmd_simulate(cfg: RunConfig, out) -> dict:
    prepare(cfg)
    out = Path(out)
    triples = build_dataset(cfg.dataset, cfg.seed)
    write_dataset(triples, out)
    n_train = sum(t.split == "train" for t in triples)
    summary = {
        "n_patches": len(triples),
        "n_train": n_train,
        "n_test": len(triples) - n_train,
        "mean_mask_fraction": float(np.mean([t.mask_fraction for t in triples])),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _split(data_dir, name: str) -> list[PatchTriple]:
    triples = load_dataset(data_dir, name)
    if not triples:
        raise ValueError(f"no {name!r} patches under {data_dir}")
    return triples


# ---------------------------------------------------------------- checkpoints


def _config_section(cfg: RunConfig) -> dict:
    return {"flat": to_flat(cfg), "digest": cfg.digest()}


def _write_loss_log(path: Path, losses: Sequence[float]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    sm = smooth(losses, 10)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "smoothed_10"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v)), repr(float(sm[i - 9])) if i >= 9 and len(losses) >= 10 else ""])


def _check_digest(ck: Checkpoint, cfg: RunConfig, path) -> None:
    if ck.config_digest is not None and ck.config_digest != cfg.digest():
        raise StageError(f"{path} was produced by a different configuration (digest {ck.config_digest[:12]})")


def codec_from(ck: Checkpoint) -> Codec:
    ck.require("codec")
    codec = Codec(dict_to_config(CodecConfig, ck.codec.config))
    codec.load_state_dict(ck.codec.state)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec


def denoiser_from(ck: Checkpoint) -> Denoiser:
    ck.require("denoiser")
    model = Denoiser(dict_to_config(DenoiserConfig, ck.denoiser.config))
    model.load_state_dict(ck.denoiser.state)
    return model.eval()


def refiner_from(ck: Checkpoint) -> MGHNet:
    ck.require("refiner")
    model = MGHNet(dict_to_config(RefinerConfig, ck.refiner.config))
    model.load_state_dict(ck.refiner.state)
    return model.eval()


def schedule_from(ck: Checkpoint) -> NoiseSchedule:
    ck.require("schedule")
    return NoiseSchedule.from_dict(ck.schedule)


def models_from(ck: Checkpoint, with_refiner: bool = True) -> Models:
    refiner = refiner_from(ck) if with_refiner and ck.refiner is not None else None
    return Models(codec_from(ck), denoiser_from(ck), schedule_from(ck), refiner)


def _blob(model: torch.nn.Module, cfg, **extra) -> ModelBlob:
    return ModelBlob({k: v.clone() for k, v in model.state_dict().items()}, config_to_dict(cfg), extra)


# ---------------------------------------------------------------- training stages


def cmd_train_codec(cfg: RunConfig, data_dir, out) -> dict:
    prepare(cfg)
    out = Path(out)
    t0 = time.perf_counter()
    codec, losses = train_codec(_split(data_dir, "train"), cfg.codec, cfg.codec_epochs, seed=cfg.seed)
    sched = build_schedule(cfg.schedule.T, cfg.schedule.kappa, cfg.schedule.eta1, cfg.schedule.kind)
    ck = Checkpoint(schedule=sched.to_dict(), config=_config_section(cfg), codec=_blob(codec, cfg.codec))
    save_checkpoint(out / CHECKPOINT, ck)
    _write_loss_log(out / "logs" / "codec_loss.csv", losses)
    return {"checkpoint": str(out / CHECKPOINT), "steps": len(losses), "seconds": time.perf_counter() - t0}


def _load_stage_input(cfg: RunConfig, out: Path, stage: str) -> Checkpoint:
    path = out / CHECKPOINT
    try:
        ck = load_checkpoint(path)
        ck.require("codec", "schedule")
    except CheckpointError as e:
        raise StageError(f"{stage} needs a trained codec first (run train-codec): {e}") from e
    _check_digest(ck, cfg, path)
    return ck


def cmd_train_diffusion(cfg: RunConfig, data_dir, out) -> dict:
    prepare(cfg)
    out = Path(out)
    ck = _load_stage_input(cfg, out, "diffusion training")
    t0 = time.perf_counter()
    plugin = make_plugin(cfg.loss.perceptual) if cfg.loss.perceptual != "null" else None
    model, losses = train_denoiser(
        _split(data_dir, "train"),
        codec_from(ck),
        schedule_from(ck),
        cfg.denoiser,
        cfg.diffusion,
        seed=cfg.seed,
        lambda_diff=cfg.loss.lambda_diff,
        perceptual=plugin,
    )
    ck.denoiser = _blob(model, cfg.denoiser)
    save_checkpoint(out / CHECKPOINT, ck)
    _write_loss_log(out / "logs" / "diffusion_loss.csv", losses)
    return {"checkpoint": str(out / CHECKPOINT), "steps": len(losses), "seconds": time.perf_counter() - t0}


def variant_path(out, variant: str) -> Path:
    return Path(out) / (CHECKPOINT if variant == "designed" else f"{VARIANT_DIR}/{variant}.ckpt")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in REFINER_VARIANTS:
        raise ValueError(f"unknown refiner variant {variant!r}; choose from {sorted(REFINER_VARIANTS)}")
    return cfg.replace(**REFINER_VARIANTS[variant])


def cmd_train_refiner(cfg: RunConfig, data_dir, out, variant: str = "designed") -> dict:
    """Train MGHNet on codec round-trip surrogates; variants go to their own checkpoint files."""
    prepare(cfg)
    out = Path(out)
    vcfg = variant_config(cfg, variant)
    ck = _load_stage_input(cfg, out, "refiner training")
    t0 = time.perf_counter()
    plugin = make_plugin(cfg.loss.perceptual) if cfg.loss.perceptual != "null" else None
    model, losses = train_refiner(
        _split(data_dir, "train"),
        codec_from(ck),
        vcfg.refiner,
        cfg.refinement,
        seed=cfg.seed,
        lambda_ref=cfg.loss.lambda_ref,
        A_min=cfg.loss.area_min,
        perceptual=plugin,
    )
    ck.refiner = _blob(model, vcfg.refiner, variant=variant)
    if variant != "designed":
        ck.config = _config_section(vcfg)
    path = variant_path(out, variant)
    save_checkpoint(path, ck)
    _write_loss_log(out / "logs" / f"refiner_{variant}_loss.csv", losses)
    return {"checkpoint": str(path), "steps": len(losses), "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------- restoration and baseline


def restore_split(models: Models, triples: Sequence[PatchTriple], seed: int, steps=None, use_refiner=True):
    """Restored patches in the order of ``triples``; patch ``i`` uses noise stream ``(seed, i)``."""
    out = []
    for i, t in enumerate(triples):
        restored, _ = restore_patch(t.slc_off, t.mask, models, seed=seed, index=i, steps=steps, use_refiner=use_refiner)
        out.append(restored)
    return out


def _check_steps(models: Models, steps: int | None) -> None:
    if steps is not None and (steps < 1 or steps > 2 * models.sched.T and steps > 8):
        raise ValueError(f"steps={steps} is outside the supported range for a T={models.sched.T} model")


def cmd_restore(
    cfg: RunConfig, checkpoint, out, data_dir=None, image=None, mask=None, steps=None, no_refiner: bool = False
) -> dict:
    """Restore a whole test split (``data_dir``) or one ``image`` + ``mask`` pair."""
    prepare(cfg)
    out = Path(out)
    ck = load_checkpoint(checkpoint)
    models = models_from(ck, with_refiner=not no_refiner)
    steps = cfg.steps if steps is None else steps
    _check_steps(models, steps)
    out.mkdir(parents=True, exist_ok=True)
    if image is not None:
        y0, m = read_image(image), load_mask(mask)
        restored = restore_image(y0, m, models, cfg.patch_size, seed=cfg.seed, steps=steps, use_refiner=not no_refiner)
        path = out / (Path(image).stem + "_restored.png")
        write_image(path, restored)
        return {"written": [str(path)]}
    triples = _split(data_dir, "test")
    restored = restore_split(models, triples, cfg.seed, steps, not no_refiner)
    for t, r in zip(triples, restored):
        write_image(out / f"{t.id}.png", r)
    return {"written": len(restored), "dir": str(out)}


def cmd_baseline(cfg: RunConfig, out, data_dir=None, image=None, mask=None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if image is not None:
        filled = directional_interp(read_image(image), load_mask(mask), normal=_stripe_normal(cfg))
        path = out / (Path(image).stem + "_baseline.png")
        write_image(path, filled)
        return {"written": [str(path)]}
    triples = _split(data_dir, "test")
    for t, filled in zip(triples, baseline_split(cfg, triples)):
        write_image(out / f"{t.id}.png", filled)
    return {"written": len(triples), "dir": str(out)}


def _stripe_normal(cfg: RunConfig):
    # the generator's stripe angle is known, so use it instead of estimating from each patch
    return normal_from_angle(cfg.dataset.mask.angle)


def baseline_split(cfg: RunConfig, triples: Sequence[PatchTriple]):
    # stripes that run into a patch border are bounded on one side only; say so once per split
    log.info("baseline: gap pixels cut off by patch borders use the nearest known value")
    return [directional_interp(t.slc_off, t.mask, normal=_stripe_normal(cfg), warn=False) for t in triples]


# ---------------------------------------------------------------- evaluation


def evaluate_arrays(restored, triples: Sequence[PatchTriple], plugin_name: str, method: str):
    pairs = [(r, t.gt, t.mask) for r, t in zip(restored, triples)]
    plugin = make_plugin(plugin_name)
    return report(pairs, plugin, method)


def cmd_evaluate(cfg: RunConfig, restored_dir, data_dir, out, method: str = "restored") -> dict:
    """Score a directory of restored test patches (named ``<id>.png``) against the ground truth."""
    out = Path(out)
    triples = _split(data_dir, "test")
    restored = []
    for t in triples:
        path = Path(restored_dir) / f"{t.id}.png"
        if not path.exists():
            raise FileNotFoundError(f"no restored image for patch {t.id} in {restored_dir}")
        restored.append(read_image(path))
    reports = evaluate_arrays(restored, triples, cfg.loss.perceptual, method)
    csv_path, json_path = write_report(reports, out / f"report_{method}")
    maps = out / f"error_maps_{method}"
    maps.mkdir(parents=True, exist_ok=True)
    for t, r in zip(triples, restored):
        write_image(maps / f"{t.id}.png", error_map(r, t.gt))
    return {"csv": str(csv_path), "json": str(json_path), "mask_only": reports[-1].mean}


# ---------------------------------------------------------------- ablation


def cmd_ablate(cfg: RunConfig, data_dir, out, train_missing: bool = False) -> dict:
    """Table II: every row restored from its checkpoint and scored on the test split."""
    prepare(cfg)
    out = Path(out)
    needed = sorted({v for _, v, _ in ABLATION_ROWS if v is not None})
    missing = [v for v in needed if not variant_path(out, v).exists()]
    if missing and not train_missing:
        raise CheckpointError(f"missing variant checkpoints: {', '.join(missing)} (train-refiner --variant ...)")
    for v in missing:
        cmd_train_refiner(cfg, data_dir, out, variant=v)
    triples = _split(data_dir, "test")
    plugin = make_plugin(cfg.loss.perceptual)
    rows = []
    for label, variant, steps in ABLATION_ROWS:
        ck = load_checkpoint(variant_path(out, variant or "designed"))
        models = models_from(ck, with_refiner=variant is not None)
        restored = restore_split(models, triples, cfg.seed, steps or cfg.steps, use_refiner=variant is not None)
        full, masked = report([(r, t.gt, t.mask) for r, t in zip(restored, triples)], plugin, label)
        row = {"method": label, **{k: masked.mean[k] for k in ABLATION_COLUMNS[:-1]}, "LPIPS/full": full.perceptual}
        rows.append(row)
    _write_table(out / "ablation", rows, ("method", *ABLATION_COLUMNS))
    return {"rows": rows}


def _write_table(stem: Path, rows: list[dict], columns: Sequence[str]) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else f"{r[c]:.6f}" for c in columns])
    stem.with_suffix(".json").write_text(json.dumps(rows, indent=2, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- latency


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    return (
        f"{cpu}; {os.cpu_count()} logical cores; torch {torch.__version__} "
        f"({torch.get_num_threads()} threads); python {platform.python_version()}; diffgf {__version__}"
    )


def cmd_bench(cfg: RunConfig, checkpoint, out, repetitions: int = 20, steps_list=(2, 4, 8), warmup: int = 2) -> dict:
    """Median and p95 wall-clock per single-patch restoration for each step count, warmup excluded."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    prepare(cfg)
    models = models_from(load_checkpoint(checkpoint))
    rng = np.random.default_rng([cfg.seed, 0xBE7C])
    side = cfg.patch_size
    y0 = rng.random((side, side, 3))
    mask = np.zeros((side, side), np.uint8)
    mask[side // 4 : side // 4 + max(1, side // 8)] = 1
    y0[mask.astype(bool)] = 0.0
    results = []
    for steps in steps_list:
        for i in range(warmup):
            restore_patch(y0, mask, models, cfg.seed, i, steps)
        times = []
        for i in range(repetitions):
            t0 = time.perf_counter()
            restore_patch(y0, mask, models, cfg.seed, i, steps)
            times.append(time.perf_counter() - t0)
        results.append(
            {
                "steps": steps,
                "median_s": float(np.median(times)),
                "p95_s": float(np.percentile(times, 95)),
                "repetitions": repetitions,
            }
        )
    payload = {"hardware": hardware_descriptor(), "patch_size": side, "results": results}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["steps", "median_s", "p95_s", "repetitions", "hardware"])
        for r in results:
            w.writerow([r["steps"], f"{r['median_s']:.6f}", f"{r['p95_s']:.6f}", r["repetitions"], payload["hardware"]])
    return payload
