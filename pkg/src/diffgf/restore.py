"""End-to-end restoration: latent diffusion from the gapped image, then harmonization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import Codec
from .denoiser import Denoiser
from .mghnet import MGHNet, build_input, compose, predict_correction
from .schedule import NoiseSchedule, build_schedule, reverse_chain


@dataclass
class Models:
    codec: Codec
    denoiser: Denoiser
    sched: NoiseSchedule
    refiner: MGHNet | None = None

    def schedule_for(self, steps: int | None) -> NoiseSchedule:
        """Trained schedule, or one rebuilt with ``steps`` steps and the same kappa/eta1."""
        if steps is None or steps == self.sched.T:
            return self.sched
        if steps < 1:
            raise ValueError("steps must be positive")
        return build_schedule(steps, self.sched.kappa, self.sched.eta1, self.sched.kind)


@torch.no_grad()
def diffuse(y0: torch.Tensor, models: Models, rng: np.random.Generator, steps: int | None = None, mean_only: bool = False):
    """Decoded diffusion output for one (1, 3, H, W) gapped patch."""
    sched = models.schedule_for(steps)
    y_lat = models.codec.encode_t(y0)
    T_train = models.sched.T

    def predictor(x_t, y, t):
        # rebuilt schedules reuse weights trained at T_train; map t onto that range
        t_net = max(1, int(round(t * T_train / sched.T)))
        return models.denoiser(x_t, y, torch.full((x_t.shape[0],), t_net, dtype=torch.long))

    z0 = reverse_chain(y_lat, predictor, sched, rng, mean_only=mean_only)
    return models.codec.decode_t(z0)


def patch_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5EED, index])


@torch.no_grad()
def restore_patch(y0: np.ndarray, mask: np.ndarray, models: Models, seed: int = 0, index: int = 0, steps=None, use_refiner=True):
    """Restore one (H, W, 3) patch; returns ``(final, diffusion_only)``."""
    x = torch.as_tensor(np.ascontiguousarray(y0), dtype=torch.float32).permute(2, 0, 1)[None]
    m = torch.as_tensor(np.ascontiguousarray(mask), dtype=torch.float32)[None, None]
    x0_hat = diffuse(x, models, patch_rng(seed, index), steps)
    plain = compose(x0_hat, torch.zeros_like(x0_hat), x, m)
    if use_refiner and models.refiner is not None:
        r_hat = predict_correction(build_input(x0_hat, x, m, models.refiner.cfg.guidance), models.refiner)
        final = compose(x0_hat, r_hat, x, m)
    else:
        final = plain
    to_np = lambda t: t[0].permute(1, 2, 0).numpy().astype(np.float64)  # noqa: E731
    out, diff_only = to_np(final), to_np(plain)
    # float32 round trips can perturb known pixels; copy them from the input exactly
    known = ~mask.astype(bool)
    out[known] = y0[known]
    diff_only[known] = y0[known]
    return out, diff_only


def restore_image(y0: np.ndarray, mask: np.ndarray, models: Models, patch_size: int, seed: int = 0, steps=None, use_refiner=True):
    """Tile a large image into non-overlapping patches, restore each, and stitch."""
    H, W = mask.shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch_size}")
    out = np.array(y0, dtype=np.float64, copy=True)
    k = 0
    for r in range(0, H, patch_size):
        for c in range(0, W, patch_size):
            sl = (slice(r, r + patch_size), slice(c, c + patch_size))
            if mask[sl].any():
                out[sl], _ = restore_patch(y0[sl], mask[sl], models, seed, k, steps, use_refiner)
            k += 1
    known = ~mask.astype(bool)
    out[known] = y0[known]
    return out
