"""Residual-shifting noise schedule and the Gaussian transitions built on it.

The forward marginal moves a clean grid ``x0`` toward its degraded
counterpart ``y0`` while adding isotropic noise::

    q(x_t | x0, y0) = N(x0 + eta_t * (y0 - x0), kappa^2 * eta_t * I)

and the reverse step mixes the current state with a prediction of ``x0``::

    mean = (eta_{t-1} / eta_t) * x_t + (alpha_t / eta_t) * x0_hat
    var  = kappa^2 * (eta_{t-1} / eta_t) * alpha_t

All functions are agnostic to what the grid holds (pixels or latents) and
accept either numpy arrays or torch tensors. Randomness always comes from an
explicit ``numpy.random.Generator`` so trajectories are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

SCHEDULE_KINDS = ("geometric",)


class ScheduleError(ValueError):
    """Invalid schedule parameters or an out-of-range timestep."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kappa: float
    eta: np.ndarray  # (T + 1,) float64, eta[0] == 0, eta[T] == 1
    kind: str = "geometric"
    eta1: float = 0.001

    @property
    def alpha(self) -> np.ndarray:
        """Per-step increments, ``alpha[t - 1]`` is alpha_t for t = 1..T."""
        return np.diff(self.eta)

    def alpha_t(self, t: int) -> float:
        return float(self.eta[t] - self.eta[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "kappa": self.kappa, "eta1": self.eta1, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(int(d["T"]), float(d["kappa"]), float(d["eta1"]), d.get("kind", "geometric"))


def build_schedule(T: int, kappa: float = 2.0, eta1: float = 0.001, kind: str = "geometric") -> NoiseSchedule:
    """Build a schedule whose sqrt(eta_t) grows geometrically from sqrt(eta1) to 1.

    With ``T == 1`` the only valid schedule is ``eta = (0, 1)`` and ``eta1`` is
    ignored.
    """
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < eta1 < 1.0):
        raise ScheduleError(f"eta1 must lie in (0, 1), got {eta1!r}")
    if not (kappa > 0.0) or not np.isfinite(kappa):
        raise ScheduleError(f"kappa must be positive, got {kappa!r}")
    T = int(T)
    eta = np.zeros(T + 1, dtype=np.float64)
    if T == 1:
        eta[1] = 1.0
    else:
        ratio = eta1 ** (-1.0 / (2.0 * (T - 1)))
        sqrt_eta = np.sqrt(eta1) * ratio ** np.arange(T - 1, dtype=np.float64)
        eta[1:T] = sqrt_eta**2
        eta[T] = 1.0
    eta.setflags(write=False)
    return NoiseSchedule(T=T, kappa=float(kappa), eta=eta, kind=kind, eta1=float(eta1))


def _check_t(t: int, sched: NoiseSchedule, lo: int) -> int:
    if int(t) != t or not (lo <= t <= sched.T):
        raise ScheduleError(f"timestep {t!r} outside [{lo}, {sched.T}]")
    return int(t)


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ScheduleError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _copy(x):
    return x.clone() if hasattr(x, "clone") else np.array(x, copy=True)


def standard_normal_like(x, rng: np.random.Generator):
    """Draw N(0, 1) noise shaped like ``x`` from ``rng``, matching its array type."""
    eps = rng.standard_normal(tuple(x.shape))
    if hasattr(x, "clone"):
        import torch

        return torch.from_numpy(eps).to(dtype=x.dtype, device=x.device)
    return eps.astype(np.result_type(x.dtype, np.float32), copy=False)


def forward_moments(x0, y0, t: int, sched: NoiseSchedule):
    """Mean and scalar variance of q(x_t | x0, y0)."""
    _check_shapes(x0, y0)
    t = _check_t(t, sched, 0)
    eta_t = float(sched.eta[t])
    if t == 0:
        return _copy(x0), 0.0
    return x0 + eta_t * (y0 - x0), sched.kappa**2 * eta_t


def forward_sample(x0, y0, t: int, sched: NoiseSchedule, rng: np.random.Generator):
    mean, var = forward_moments(x0, y0, t, sched)
    if var == 0.0:
        return mean
    return mean + np.sqrt(var) * standard_normal_like(mean, rng)


def reverse_moments(x_t, x0_hat, t: int, sched: NoiseSchedule):
    """Posterior mean and scalar variance of x_{t-1} given x_t and a clean estimate."""
    _check_shapes(x_t, x0_hat)
    t = _check_t(t, sched, 1)
    if t == 1:
        # eta_0 = 0 collapses the mixture onto the prediction
        return _copy(x0_hat), 0.0
    eta_t, eta_prev = float(sched.eta[t]), float(sched.eta[t - 1])
    alpha = sched.alpha_t(t)
    mean = (eta_prev / eta_t) * x_t + (alpha / eta_t) * x0_hat
    var = sched.kappa**2 * (eta_prev / eta_t) * alpha
    assert var >= 0.0
    return mean, var


def reverse_step(x_t, x0_hat, t: int, sched: NoiseSchedule, rng: np.random.Generator, mean_only: bool = False):
    mean, var = reverse_moments(x_t, x0_hat, t, sched)
    if var == 0.0 or mean_only:
        return mean
    return mean + np.sqrt(var) * standard_normal_like(mean, rng)


def init_terminal(y0, sched: NoiseSchedule, rng: np.random.Generator):
    """Sample x_T ~ N(y0, kappa^2 eta_T I), the start of the reverse chain."""
    scale = sched.kappa * np.sqrt(float(sched.eta[sched.T]))
    return y0 + scale * standard_normal_like(y0, rng)


def reverse_chain(
    y0,
    predictor: Callable,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    mean_only: bool = False,
):
    """Run the full reverse process from a perturbed ``y0`` down to ``x_0``.

    ``predictor(x_t, y0, t)`` plays the role of the clean-image estimator and
    is called exactly ``sched.T`` times, for t = T, T-1, ..., 1.
    """
    x = init_terminal(y0, sched, rng)
    for t in range(sched.T, 0, -1):
        x0_hat = predictor(x, y0, t)
        _check_shapes(x0_hat, y0)
        x = reverse_step(x, x0_hat, t, sched, rng, mean_only=mean_only)
    return x


def q_sample_batch(x0, y0, t, sched: NoiseSchedule, noise):
    """Batched forward sample for training: ``t`` holds one timestep per leading item.

    Works on torch tensors; ``noise`` is standard normal of the same shape.
    """
    import torch

    eta = torch.tensor(np.array(sched.eta), dtype=x0.dtype, device=x0.device)[t]
    eta = eta.view(-1, *([1] * (x0.dim() - 1)))
    return x0 + eta * (y0 - x0) + sched.kappa * torch.sqrt(eta) * noise
