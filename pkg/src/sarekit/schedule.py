"""Diffusion schedule math: forward noising, guidance, DDIM steps.

Everything here is a pure function of its arguments. Schedule coefficients
are kept in float64 regardless of the latent dtype so that accumulation
error stays out of the tolerance budget of downstream checks.

Timestep convention: alpha_bar is indexed 0..t_max with alpha_bar[0] = 1
(no noise). An image-to-image run noises to some entry step and denoises
along a strictly descending step sequence whose final transition lands
on step 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol, Sequence

import numpy as np

from .errors import BackendError, ParameterError, ShapeError, SingularityError

if TYPE_CHECKING:
    from .conditioning import ConditionEmbedding

# latents are plain numpy arrays (channels, height, width)
LatentArray = np.ndarray

SCHEDULE_KINDS = ("linear", "scaled_linear")

# convention of the latent-diffusion backbone family; used wherever a
# schedule is not supplied explicitly
DEFAULT_T_MAX_TRAIN = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012
DEFAULT_SCHEDULE_KIND = "scaled_linear"


class DenoiserBackend(Protocol):
    """Noise-prediction network consumed as an opaque backend."""

    def predict_noise(self, z_t: LatentArray, t: int, cond: "ConditionEmbedding") -> LatentArray: ...

    def identifier(self) -> str: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels for a discrete diffusion process.

    alpha_bar has length t_max + 1 with alpha_bar[0] = 1 and
    alpha_bar[t] = prod_{s<=t} (1 - beta[s-1]); beta has length t_max.
    """

    t_max: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.t_max < 1:
            raise ParameterError(f"t_max must be >= 1, got {self.t_max}")
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if beta.shape != (self.t_max,):
            raise ParameterError(f"beta must have length t_max={self.t_max}, got {beta.shape}")
        if alpha_bar.shape != (self.t_max + 1,):
            raise ParameterError(f"alpha_bar must have length t_max+1, got {alpha_bar.shape}")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ParameterError("beta entries must lie in (0, 1)")
        if alpha_bar[0] != 1.0:
            raise ParameterError(f"alpha_bar[0] must be 1, got {alpha_bar[0]}")
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ParameterError("alpha_bar must be strictly decreasing")
        if np.any(alpha_bar <= 0.0):
            raise ParameterError("alpha_bar entries must be positive")
        ref = np.cumprod(1.0 - beta)
        if not np.allclose(alpha_bar[1:], ref, rtol=1e-12, atol=0.0):
            raise ParameterError("alpha_bar is inconsistent with beta accumulation")
        beta.setflags(write=False)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance weight plus whether the unconditional branch is queried."""

    scale: float
    use_null: bool = True

    def __post_init__(self):
        if self.scale < 0.0:
            raise ParameterError(f"scale must be >= 0, got {self.scale}")


def build_schedule(
    t_max: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    kind: str = DEFAULT_SCHEDULE_KIND,
) -> NoiseSchedule:
    """Construct a noise schedule from a beta ramp.

    `linear` interpolates beta directly; `scaled_linear` interpolates
    sqrt(beta) and squares it (the latent-diffusion convention).
    """
    if t_max < 1:
        raise ParameterError(f"t_max must be >= 1, got {t_max}")
    if not (0.0 < beta_start <= beta_end):
        raise ParameterError(f"beta_start must satisfy 0 < beta_start <= beta_end, got beta_start={beta_start}")
    if beta_end >= 1.0:
        raise ParameterError(f"beta_end must be < 1, got beta_end={beta_end}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    elif kind == "scaled_linear":
        beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), t_max, dtype=np.float64) ** 2
    else:
        raise ParameterError(f"kind must be one of {SCHEDULE_KINDS}, got {kind!r}")
    alpha_bar = np.empty(t_max + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - beta)
    return NoiseSchedule(t_max=t_max, beta=beta, alpha_bar=alpha_bar)


def default_schedule() -> NoiseSchedule:
    return build_schedule(DEFAULT_T_MAX_TRAIN, DEFAULT_BETA_START, DEFAULT_BETA_END, DEFAULT_SCHEDULE_KIND)


def _check_t(t: int, schedule: NoiseSchedule, name: str = "t", low: int = 0) -> None:
    if not (low <= t <= schedule.t_max):
        raise ParameterError(f"{name} must be in [{low}, {schedule.t_max}], got {t}")


def forward_noise(z0: LatentArray, t: int, eps: LatentArray, schedule: NoiseSchedule) -> LatentArray:
    """Noisy latent sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps."""
    _check_t(t, schedule)
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match z0 shape {z0.shape}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def timesteps_for_strength(strength: float, t_max: int) -> tuple[int, list[int]]:
    """Entry step T = floor(strength * t_max) and the descending run T..1."""
    if not (0.0 <= strength <= 1.0):
        raise ParameterError(f"strength must be in [0, 1], got {strength}")
    if t_max < 1:
        raise ParameterError(f"t_max must be >= 1, got {t_max}")
    T = int(np.floor(strength * t_max))
    T = min(T, t_max)
    return T, list(range(T, 0, -1))


def inference_to_training_steps(steps: Sequence[int], t_max_train: int, num_inference_steps: int) -> list[int]:
    """Map inference step indices (1-based) onto the training-step grid.

    The num_inference_steps inference steps are spaced uniformly over the
    t_max_train training steps (stride t_max_train // num_inference_steps),
    so index k lands on training step k * stride.
    """
    if num_inference_steps < 1 or num_inference_steps > t_max_train:
        raise ParameterError(
            f"num_inference_steps must be in [1, {t_max_train}], got {num_inference_steps}"
        )
    stride = t_max_train // num_inference_steps
    out = []
    for k in steps:
        if not (1 <= k <= num_inference_steps):
            raise ParameterError(f"inference step index {k} outside [1, {num_inference_steps}]")
        out.append(k * stride)
    return out


def cfg_combine(eps_cond: LatentArray, eps_uncond: LatentArray, w: float) -> LatentArray:
    """Guided prediction eps_uncond + w * (eps_cond - eps_uncond).

    Algebraically identical to w * eps_cond + (1 - w) * eps_uncond, but the
    pivot form keeps equal branch predictions exactly fixed under any w.
    w = 1 short-circuits to the conditional branch so guidance-off runs are
    bit-identical to conditional-only runs.
    """
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    if w == 1.0:
        return eps_cond.copy()
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddim_step(
    z_t: LatentArray,
    eps_hat: LatentArray,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    fresh_noise: LatentArray | None = None,
) -> LatentArray:
    """One DDIM transition from step t to step t_prev.

    Reconstructs the predicted clean latent and re-noises it to t_prev;
    eta = 0 (the default) is the deterministic sampler, eta > 0 blends in
    fresh noise with the standard sigma.
    """
    _check_t(t, schedule, name="t", low=1)
    _check_t(t_prev, schedule, name="t_prev", low=0)
    if t_prev >= t:
        raise ParameterError(f"t_prev must be < t, got t_prev={t_prev}, t={t}")
    if eta < 0.0:
        raise ParameterError(f"eta must be >= 0, got {eta}")
    if eta > 0.0 and fresh_noise is None:
        raise ParameterError("fresh_noise is required when eta > 0")
    z_t = np.asarray(z_t)
    eps_hat = np.asarray(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"eps_hat shape {eps_hat.shape} does not match z_t shape {z_t.shape}")

    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    if ab_t == 0.0:
        raise SingularityError(f"alpha_bar[{t}] is 0; clean-latent prediction undefined")

    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if eta > 0.0:
        sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
    else:
        sigma = 0.0
    dir_sq = 1.0 - ab_p - sigma * sigma
    if dir_sq < -1e-12:
        raise ParameterError(f"eta={eta} makes sigma exceed the direction budget at t={t}")
    out = np.sqrt(ab_p) * z0_hat + np.sqrt(max(dir_sq, 0.0)) * eps_hat
    if eta > 0.0:
        fresh = np.asarray(fresh_noise)
        if fresh.shape != z_t.shape:
            raise ShapeError(f"fresh_noise shape {fresh.shape} does not match z_t shape {z_t.shape}")
        out = out + sigma * fresh
    return out


def ddim_sample_loop(
    z_T: LatentArray,
    denoiser: DenoiserBackend,
    cond: "ConditionEmbedding",
    null_cond: "ConditionEmbedding",
    guidance: GuidanceSpec,
    steps: Sequence[int],
    schedule: NoiseSchedule,
    rng_seed: int = 0,
    eta: float = 0.0,
) -> LatentArray:
    """Run the guided DDIM loop over a descending step sequence.

    At each step the denoiser is queried with the caption condition and,
    when guidance.use_null is set, with the null condition; the two
    predictions are combined with cfg_combine before the DDIM update.
    The final transition targets step 0. An empty step sequence returns
    z_T unchanged (the strength-zero case). Bit-reproducible for a fixed
    rng_seed and eta on one platform.
    """
    steps = list(steps)
    if not steps:
        return np.asarray(z_T)
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ParameterError(f"steps must be strictly descending, got {steps}")
    rng = np.random.default_rng(rng_seed)
    z = np.asarray(z_T)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        eps_c = np.asarray(denoiser.predict_noise(z, t, cond))
        if not np.all(np.isfinite(eps_c)):
            raise BackendError(
                f"denoiser returned non-finite values at step index {i} (t={t})",
                stage="denoise",
                step_index=i,
            )
        if guidance.use_null:
            eps_u = np.asarray(denoiser.predict_noise(z, t, null_cond))
            if not np.all(np.isfinite(eps_u)):
                raise BackendError(
                    f"denoiser returned non-finite values at step index {i} (t={t}, null branch)",
                    stage="denoise",
                    step_index=i,
                )
            eps_hat = cfg_combine(eps_c, eps_u, guidance.scale)
        else:
            eps_hat = eps_c
        fresh = rng.standard_normal(z.shape) if eta > 0.0 else None
        z = ddim_step(z, eps_hat, t, t_prev, schedule, eta=eta, fresh_noise=fresh)
    return z
