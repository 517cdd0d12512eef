"""Closed-form diffusion math: schedules, forward noising, posteriors and the hybrid loss.

Timesteps are 1-indexed (``t`` in ``[1, T]``). The boundary value
``alpha_bar_0 = 1`` is virtual and never stored; helpers that accept ``t = 0``
say so explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed per-step coefficients, stored at float64.

    ``beta[i]`` holds beta_{i+1}; every array has length ``T``.
    """

    beta: np.ndarray
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    alpha_bar_prev: np.ndarray = field(init=False, repr=False)
    posterior_variance: np.ndarray = field(init=False, repr=False)
    posterior_log_variance: np.ndarray = field(init=False, repr=False)
    posterior_mean_coef_y0: np.ndarray = field(init=False, repr=False)
    posterior_mean_coef_yt: np.ndarray = field(init=False, repr=False)
    alpha_bar_override: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta_t must lie in (0, 1)")
        beta = beta.copy()
        beta.setflags(write=False)
        alpha = 1.0 - beta
        if self.alpha_bar_override is not None:
            # respaced schedules keep the parent's alpha_bar bit-for-bit
            alpha_bar = np.asarray(self.alpha_bar_override, dtype=np.float64).copy()
        else:
            alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.append(1.0, alpha_bar[:-1])
        post_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        # beta_tilde_1 is exactly zero; its log is clipped to the next value,
        # and only matters for the learned-variance interpolation at t = 1.
        if post_var.size > 1:
            post_log_var = np.log(np.append(post_var[1], post_var[1:]))
        else:
            post_log_var = np.log(beta.copy())
        coef_y0 = beta * np.sqrt(alpha_bar_prev) / (1.0 - alpha_bar)
        coef_yt = (1.0 - alpha_bar_prev) * np.sqrt(alpha) / (1.0 - alpha_bar)
        for name, value in [
            ("beta", beta),
            ("alpha", alpha),
            ("alpha_bar", alpha_bar),
            ("alpha_bar_prev", alpha_bar_prev),
            ("posterior_variance", post_var),
            ("posterior_log_variance", post_log_var),
            ("posterior_mean_coef_y0", coef_y0),
            ("posterior_mean_coef_yt", coef_yt),
        ]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def respace(self, steps: int) -> tuple["NoiseSchedule", np.ndarray]:
        """Uniformly strided sub-schedule for faster sampling.

        Returns the respaced schedule and a map from its 1-indexed steps to
        the original timesteps (the values fed to the network). ``steps == T``
        returns ``self`` unchanged so full-length sampling is bit-identical.
        """
        if steps < 1 or steps > self.T:
            raise ValueError(f"steps must be in [1, {self.T}], got {steps}")
        if steps == self.T:
            return self, np.arange(1, self.T + 1)
        timesteps = np.unique(np.round(np.linspace(1, self.T, steps)).astype(np.int64))
        alpha_bar = self.alpha_bar[timesteps - 1]
        prev = np.append(1.0, alpha_bar[:-1])
        beta = 1.0 - alpha_bar / prev
        return NoiseSchedule(beta, alpha_bar_override=alpha_bar), timesteps

    def to_dict(self) -> dict:
        return {"beta": [float(b) for b in self.beta]}


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _check_t(schedule: NoiseSchedule, t: torch.Tensor, batch: int, allow_zero: bool = False) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim != 1 or t.shape[0] != batch:
        raise ValueError(f"t must have shape [{batch}], got {tuple(t.shape)}")
    lo = 0 if allow_zero else 1
    if torch.any(t < lo) or torch.any(t > schedule.T):
        raise ValueError(f"timesteps must lie in [{lo}, {schedule.T}]")
    return t


def extract(arr: np.ndarray, t: torch.Tensor, like: torch.Tensor, boundary: float | None = None) -> torch.Tensor:
    """Gather ``arr[t - 1]`` per batch element and broadcast against ``like``.

    With ``boundary`` set, ``t == 0`` maps to that value (e.g. alpha_bar_0 = 1).
    """
    table = torch.tensor(np.asarray(arr, dtype=np.float64))
    if boundary is not None:
        table = torch.cat([torch.tensor([boundary], dtype=torch.float64), table])
        idx = t
    else:
        idx = t - 1
    out = table[idx.cpu()].to(device=like.device, dtype=like.dtype)
    return out.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(schedule: NoiseSchedule, y0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Closed-form forward noising. ``t = 0`` is accepted and returns ``y0`` exactly."""
    if eps.shape != y0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != y0 shape {tuple(y0.shape)}")
    t = _check_t(schedule, t, y0.shape[0], allow_zero=True)
    ab = extract(schedule.alpha_bar, t, y0, boundary=1.0)
    return ab.sqrt() * y0 + (1.0 - ab).sqrt() * eps


def q_step(schedule: NoiseSchedule, y_prev: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """One forward-chain transition q(y_t | y_{t-1})."""
    t = _check_t(schedule, t, y_prev.shape[0])
    beta = extract(schedule.beta, t, y_prev)
    return (1.0 - beta).sqrt() * y_prev + beta.sqrt() * eps


@dataclass
class ReverseDistribution:
    mean: torch.Tensor
    log_variance: torch.Tensor
    variance: torch.Tensor | None = None

    def __post_init__(self):
        if self.variance is None:
            self.variance = torch.exp(self.log_variance)


def q_posterior(schedule: NoiseSchedule, y0: torch.Tensor, yt: torch.Tensor, t: torch.Tensor) -> ReverseDistribution:
    """True posterior q(y_{t-1} | y_t, y_0).

    ``variance`` holds beta_tilde_t exactly (zero at t = 1); ``log_variance``
    uses the clipped log so that it stays finite.
    """
    if y0.shape != yt.shape:
        raise ValueError("y0 and yt must have the same shape")
    t = _check_t(schedule, t, y0.shape[0])
    mean = extract(schedule.posterior_mean_coef_y0, t, yt) * y0 + extract(schedule.posterior_mean_coef_yt, t, yt) * yt
    var = extract(schedule.posterior_variance, t, yt).expand_as(yt)
    log_var = extract(schedule.posterior_log_variance, t, yt).expand_as(yt)
    return ReverseDistribution(mean=mean, log_variance=log_var, variance=var)


def predict_y0_from_eps(
    schedule: NoiseSchedule, yt: torch.Tensor, t: torch.Tensor, eps_hat: torch.Tensor, clip: bool = True
) -> torch.Tensor:
    """Invert the closed form for y_0, optionally clamped to [-1, 1]."""
    if eps_hat.shape != yt.shape:
        raise ValueError("eps_hat and yt must have the same shape")
    t = _check_t(schedule, t, yt.shape[0], allow_zero=True)
    ab = extract(schedule.alpha_bar, t, yt, boundary=1.0)
    y0 = (yt - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()
    return y0.clamp(-1.0, 1.0) if clip else y0


def p_mean_variance(
    schedule: NoiseSchedule,
    yt: torch.Tensor,
    t: torch.Tensor,
    eps_hat: torch.Tensor,
    v: torch.Tensor,
    clip: bool = True,
) -> ReverseDistribution:
    """Model reverse distribution from an epsilon prediction and variance weights ``v`` in [0, 1].

    The log-variance interpolates between log beta_tilde_t (v = 0) and
    log beta_t (v = 1).
    """
    t = _check_t(schedule, t, yt.shape[0])
    y0_hat = predict_y0_from_eps(schedule, yt, t, eps_hat, clip=clip)
    mean = q_posterior(schedule, y0_hat, yt, t).mean
    min_log = extract(schedule.posterior_log_variance, t, yt)
    max_log = extract(np.log(schedule.beta), t, yt)
    log_var = v * max_log + (1.0 - v) * min_log
    return ReverseDistribution(mean=mean, log_variance=log_var)


def gaussian_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2)))."""
    # the log-ratio is formed first so identical arguments give exactly zero
    return 0.5 * ((logvar2 - logvar1) + torch.exp(logvar1 - logvar2) - 1.0 + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def hybrid_loss(
    schedule: NoiseSchedule,
    y0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    v: torch.Tensor | None,
    vib_weight: float = 1e-3,
    clip: bool = False,
) -> dict[str, torch.Tensor]:
    """MSE on the noise plus a weighted variational term for the variance head.

    The variational term sees ``eps_hat`` through a stop-gradient, so only
    ``v`` learns from it. At ``t = 1`` it falls back to the posterior
    log-variance clip value, like the rest of the learned-variance math.
    Returns ``loss``, ``mse`` and ``vib`` (unweighted) as scalars.
    """
    mse = ((eps - eps_hat) ** 2).mean()
    if v is None:
        vib = torch.zeros((), dtype=mse.dtype, device=mse.device)
    else:
        yt = q_sample(schedule, y0, t, eps)
        true = q_posterior(schedule, y0, yt, t)
        model = p_mean_variance(schedule, yt, t, eps_hat.detach(), v, clip=clip)
        kl = gaussian_kl(true.mean, true.log_variance, model.mean, model.log_variance)
        vib = kl.mean()
    return {"loss": mse + vib_weight * vib, "mse": mse, "vib": vib}
