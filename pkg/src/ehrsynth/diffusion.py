"""Noise schedule and the closed-form diffusion algebra.

The forward process noises the current visit's embedding; the network,
conditioned on the per-visit context vector and the step index, predicts the
*next* visit's clean embedding directly. Generation is one-shot by default
(a single network call at a sampled step, matching how the network is
trained) with an ancestral chain available behind a flag.

Steps are 1-based: arrays of length ``num_steps`` hold step ``s`` at index
``s - 1``, and the cumulative product at step 0 is defined as 1 so the
step-1 posterior collapses to exact recovery.
"""

from __future__ import annotations

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


class NoiseSchedule:
    """Variance schedule with derived arrays precomputed in float64.

    Attributes (torch float64 tensors of length ``num_steps``):
      betas: per-step variances.
      alphas: ``1 - betas``.
      alpha_bars: running products of ``alphas``.
      alpha_bars_prev: shifted products with the step-0 convention of 1.
      one_minus_alpha_bars / one_minus_alpha_bars_prev: complements, with the
        step-1 entries pinned to ``beta_1`` and 0 so the endpoint algebra
        (posterior variance 0, exact recovery of the clean target) holds
        exactly in floating point.
      posterior_variance: ``(1 - abar_{s-1}) / (1 - abar_s) * beta_s``.
    """

    def __init__(self, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if np.any(alpha_bars >= 1.0):
            raise ScheduleError(
                "degenerate schedule: cumulative alpha reached 1.0 in double precision")
        alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
        one_minus = 1.0 - alpha_bars
        one_minus[0] = betas[0]
        one_minus_prev = np.concatenate([[0.0], one_minus[:-1]])
        posterior_variance = one_minus_prev / one_minus * betas
        self.betas = torch.from_numpy(betas)
        self.alphas = torch.from_numpy(alphas)
        self.alpha_bars = torch.from_numpy(alpha_bars)
        self.alpha_bars_prev = torch.from_numpy(alpha_bars_prev)
        self.one_minus_alpha_bars = torch.from_numpy(one_minus)
        self.one_minus_alpha_bars_prev = torch.from_numpy(one_minus_prev)
        self.posterior_variance = torch.from_numpy(posterior_variance)

    @property
    def num_steps(self) -> int:
        return self.betas.numel()

    def _check_step(self, step: torch.Tensor) -> None:
        if torch.any(step < 1) or torch.any(step > self.num_steps):
            raise ScheduleError(f"step out of range 1..{self.num_steps}")

    def gather(self, name: str, step: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Coefficient array values at 1-based ``step``, cast/shaped to broadcast with ``like``."""
        idx = torch.as_tensor(step, dtype=torch.long)
        self._check_step(idx)
        values = getattr(self, name)[idx - 1].to(like.dtype)
        while values.dim() < like.dim():
            values = values.unsqueeze(-1)
        return values


def build_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   shape: str = "linear") -> NoiseSchedule:
    if num_steps < 1:
        raise ScheduleError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if shape != "linear":
        raise ScheduleError(f"unsupported schedule shape {shape!r}")
    if num_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return NoiseSchedule(betas)


def forward_noise(v0: torch.Tensor, step: int | torch.Tensor, eps: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form jump to step ``s``: ``sqrt(abar_s) v0 + sqrt(1 - abar_s) eps``."""
    abar = schedule.gather("alpha_bars", step, v0)
    one_minus = schedule.gather("one_minus_alpha_bars", step, v0)
    return torch.sqrt(abar) * v0 + torch.sqrt(one_minus) * eps


def forward_chain(v0: torch.Tensor, noises: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Stepwise noising trajectory, one state per step.

    ``noises`` has one leading entry per step; used to check that the chain
    matches the closed form in distribution.
    """
    if noises.shape[0] != schedule.num_steps:
        raise ScheduleError(
            f"need {schedule.num_steps} per-step noises, got {noises.shape[0]}")
    states = []
    current = v0
    for s in range(1, schedule.num_steps + 1):
        alpha = schedule.gather("alphas", s, v0)
        current = torch.sqrt(alpha) * current + torch.sqrt(1.0 - alpha) * noises[s - 1]
        states.append(current)
    return torch.stack(states)


def posterior_mean_from_x0(v_s: torch.Tensor, v0: torch.Tensor, step: int | torch.Tensor,
                           schedule: NoiseSchedule) -> torch.Tensor:
    """Posterior mean of the previous state given the current state and the clean target.

    Degenerate schedules (``alpha_bar == 1``) are rejected at construction,
    so the divisions here are always well defined.
    """
    alpha = schedule.gather("alphas", step, v_s)
    abar_prev = schedule.gather("alpha_bars_prev", step, v_s)
    beta = schedule.gather("betas", step, v_s)
    one_minus = schedule.gather("one_minus_alpha_bars", step, v_s)
    one_minus_prev = schedule.gather("one_minus_alpha_bars_prev", step, v_s)
    coef_state = torch.sqrt(alpha) * one_minus_prev / one_minus
    coef_clean = torch.sqrt(abar_prev) * beta / one_minus
    return coef_state * v_s + coef_clean * v0


def posterior_mean_from_eps(v_s: torch.Tensor, eps: torch.Tensor, step: int | torch.Tensor,
                            schedule: NoiseSchedule) -> torch.Tensor:
    """Same posterior mean, parameterized by the noise instead of the clean target."""
    alpha = schedule.gather("alphas", step, v_s)
    one_minus = schedule.gather("one_minus_alpha_bars", step, v_s)
    return (v_s - (1.0 - alpha) / torch.sqrt(one_minus) * eps) / torch.sqrt(alpha)


def invert_forward_noise(v_s: torch.Tensor, v0: torch.Tensor, step: int | torch.Tensor,
                         schedule: NoiseSchedule) -> torch.Tensor:
    """Recover the noise consistent with a (state, clean) pair under the closed form."""
    abar = schedule.gather("alpha_bars", step, v_s)
    one_minus = schedule.gather("one_minus_alpha_bars", step, v_s)
    return (v_s - torch.sqrt(abar) * v0) / torch.sqrt(one_minus)


def predict_next_visit(model, visit_vec: torch.Tensor, condition: torch.Tensor,
                       step: int | torch.Tensor, eps: torch.Tensor,
                       schedule: NoiseSchedule) -> torch.Tensor:
    """One-shot generation: noise the current visit to ``step`` and read the
    network's clean next-visit prediction directly."""
    noisy = forward_noise(visit_vec, step, eps, schedule)
    return model(noisy, condition, step)


def ancestral_sample(model, visit_vec: torch.Tensor, condition: torch.Tensor,
                     schedule: NoiseSchedule, *, eps_init: torch.Tensor | None = None,
                     generator: torch.Generator | None = None,
                     zero_noise: bool = False) -> torch.Tensor:
    """Iterate the backward posterior from the deepest step down to 1.

    The chain starts from the current visit noised to step ``S``. At each
    step the network's clean prediction is converted to an implied noise,
    the posterior mean is formed from it, and fresh Gaussian noise scaled by
    the posterior standard deviation is added (skipped at step 1, or
    everywhere when ``zero_noise`` is set).
    """
    num_steps = schedule.num_steps
    if eps_init is None:
        if zero_noise:
            eps_init = torch.zeros_like(visit_vec)
        else:
            eps_init = torch.randn(visit_vec.shape, generator=generator,
                                   dtype=visit_vec.dtype, device=visit_vec.device)
    state = forward_noise(visit_vec, num_steps, eps_init, schedule)
    for s in range(num_steps, 0, -1):
        predicted_clean = model(state, condition, s)
        implied_eps = invert_forward_noise(state, predicted_clean, s, schedule)
        mean = posterior_mean_from_eps(state, implied_eps, s, schedule)
        if s == 1 or zero_noise:
            state = mean
        else:
            z = torch.randn(state.shape, generator=generator,
                            dtype=state.dtype, device=state.device)
            state = mean + torch.sqrt(schedule.gather("posterior_variance", s, state)) * z
    return state
