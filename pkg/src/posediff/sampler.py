"""Inference: guided ancestral sampling, deterministic DDIM, masked editing and style interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .network import NoisePrediction
from .schedule import NoiseSchedule, extract, p_mean_variance, predict_y0_from_eps, q_sample


@dataclass(frozen=True)
class GuidanceConfig:
    """Pose and style guidance scales.

    ``variance_source`` picks which forward pass supplies the variance
    weights: ``"cond"`` (fully conditioned, a fourth pass) or ``"uncond"``.
    At ``w_p = w_s = 0`` the unconditional pass is always used.
    """

    w_p: float = 2.0
    w_s: float = 2.0
    variance_source: str = "cond"

    def __post_init__(self):
        for name in ("w_p", "w_s"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if self.variance_source not in ("cond", "uncond"):
            raise ValueError("variance_source must be 'cond' or 'uncond'")


@dataclass
class Conditioning:
    """Pose maps and encoded texture features, with their all-zeros counterparts."""

    x_p: torch.Tensor
    features: list[torch.Tensor]
    null_pose: torch.Tensor
    null_features: list[torch.Tensor]


@torch.no_grad()
def prepare_conditioning(model, x_p: torch.Tensor, x_s: torch.Tensor) -> Conditioning:
    # texture features do not depend on t, so each chain encodes once
    return Conditioning(
        x_p=x_p,
        features=model.encode_texture(x_s),
        null_pose=torch.zeros_like(x_p),
        null_features=model.encode_texture(torch.zeros_like(x_s)),
    )


@torch.no_grad()
def guided_noise(
    model,
    y_t: torch.Tensor,
    t: torch.Tensor,
    x_p: torch.Tensor | None = None,
    x_s: torch.Tensor | None = None,
    guidance: GuidanceConfig = GuidanceConfig(),
    cond: Conditioning | None = None,
    need_variance: bool = True,
) -> NoisePrediction:
    """eps_cond = eps_uncond + w_p (eps_pose - eps_uncond) + w_s (eps_style - eps_uncond).

    Evaluated as ``(1 - w_p - w_s) eps_uncond + w_p eps_pose + w_s eps_style``
    and skipping zero-weight passes, which keeps the (0,0), (1,0) and (0,1)
    collapses bit-exact.
    """
    if cond is None:
        cond = prepare_conditioning(model, x_p, x_s)
    w_u = 1.0 - guidance.w_p - guidance.w_s
    passes = {}

    def run(key):
        if key not in passes:
            pose = cond.x_p if key in ("pose", "full") else cond.null_pose
            feats = cond.features if key in ("style", "full") else cond.null_features
            passes[key] = model.predict_noise(y_t, t, pose, feats)
        return passes[key]

    eps = None
    for weight, key in ((w_u, "uncond"), (guidance.w_p, "pose"), (guidance.w_s, "style")):
        if weight == 0:
            continue
        term = weight * run(key).eps_hat
        eps = term if eps is None else eps + term
    v = None
    if need_variance:
        # with both scales at zero the sampler is the unconditional model, variance included
        use_cond = guidance.variance_source == "cond" and (guidance.w_p or guidance.w_s)
        v = run("full" if use_cond else "uncond").v
    return NoisePrediction(eps, v)


def ddpm_step(
    schedule: NoiseSchedule,
    y_t: torch.Tensor,
    t: torch.Tensor,
    prediction: NoisePrediction,
    generator: torch.Generator | None = None,
    clip: bool = True,
) -> torch.Tensor:
    """Draw y_{t-1} ~ N(mu, Sigma); the step from t = 1 returns the mean exactly."""
    v = prediction.v if prediction.v is not None else torch.zeros_like(y_t)
    dist = p_mean_variance(schedule, y_t, t, prediction.eps_hat, v, clip=clip)
    z = torch.randn(y_t.shape, generator=generator, dtype=y_t.dtype)
    last = (torch.as_tensor(t) == 1).reshape(-1, *([1] * (y_t.ndim - 1)))
    return torch.where(last, dist.mean, dist.mean + torch.exp(0.5 * dist.log_variance) * z)


def _full(batch: int, value) -> torch.Tensor:
    return torch.full((batch,), int(value), dtype=torch.long)


@torch.no_grad()
def sample(
    model,
    schedule: NoiseSchedule,
    x_p: torch.Tensor,
    x_s: torch.Tensor,
    guidance: GuidanceConfig = GuidanceConfig(),
    generator: torch.Generator | None = None,
    steps: int | None = None,
    cond: Conditioning | None = None,
    snapshots: list | None = None,
) -> torch.Tensor:
    """Guided ancestral chain from y_T ~ N(0, I) to y_0, clamped to [-1, 1].

    ``steps`` strides the chain uniformly; ``None`` or ``T`` runs every step.
    Intermediate states are appended to ``snapshots`` when given.
    """
    sched, tmap = schedule.respace(schedule.T if steps is None else steps)
    if cond is None:
        cond = prepare_conditioning(model, x_p, x_s)
    b = x_p.shape[0]
    shape = (b, model.config.image_channels, x_p.shape[2], x_p.shape[3])
    y = torch.randn(shape, generator=generator, dtype=x_p.dtype)
    for i in range(sched.T, 0, -1):
        pred = guided_noise(model, y, _full(b, tmap[i - 1]), guidance=guidance, cond=cond)
        y = ddpm_step(sched, y, _full(b, i), pred, generator)
        if snapshots is not None:
            snapshots.append((int(tmap[i - 2]) if i > 1 else 0, y.clone()))
    return y.clamp(-1.0, 1.0)


def ddim_step(
    schedule: NoiseSchedule,
    y_t: torch.Tensor,
    t: torch.Tensor,
    t_prev: torch.Tensor,
    eps_hat: torch.Tensor,
    clip: bool = True,
) -> torch.Tensor:
    """Deterministic (sigma = 0) jump from t to t_prev; ``t_prev = 0`` lands on the y_0 estimate."""
    t = torch.as_tensor(t, dtype=torch.long)
    t_prev = torch.as_tensor(t_prev, dtype=torch.long)
    if torch.any(t_prev >= t):
        raise ValueError("t_prev must be smaller than t")
    y0 = predict_y0_from_eps(schedule, y_t, t, eps_hat, clip=clip)
    ab_prev = extract(schedule.alpha_bar, t_prev, y_t, boundary=1.0)
    return ab_prev.sqrt() * y0 + (1.0 - ab_prev).sqrt() * eps_hat


def ddim_timesteps(schedule: NoiseSchedule, steps: int | None) -> np.ndarray:
    return schedule.respace(schedule.T if steps is None else steps)[1]


@torch.no_grad()
def ddim_sample(
    model,
    schedule: NoiseSchedule,
    y_T: torch.Tensor,
    x_p: torch.Tensor | None = None,
    x_s: torch.Tensor | None = None,
    guidance: GuidanceConfig = GuidanceConfig(),
    steps: int | None = None,
    cond: Conditioning | None = None,
) -> torch.Tensor:
    if cond is None:
        cond = prepare_conditioning(model, x_p, x_s)
    taus = ddim_timesteps(schedule, steps)
    b = y_T.shape[0]
    y = y_T
    for i in range(len(taus) - 1, -1, -1):
        t = _full(b, taus[i])
        t_prev = _full(b, taus[i - 1] if i > 0 else 0)
        eps = guided_noise(model, y, t, guidance=guidance, cond=cond, need_variance=False).eps_hat
        y = ddim_step(schedule, y, t, t_prev, eps)
    return y.clamp(-1.0, 1.0)


def slerp(a: torch.Tensor, b: torch.Tensor, lam: float) -> torch.Tensor:
    """Spherical interpolation, each batch element treated as one flat vector."""
    if a.shape != b.shape:
        raise ValueError("slerp inputs must have the same shape")
    fa, fb = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
    na, nb = fa.norm(dim=1), fb.norm(dim=1)
    if torch.any(na == 0) or torch.any(nb == 0):
        raise ValueError("slerp of a zero-norm vector is undefined")
    cos = ((fa * fb).sum(dim=1) / (na * nb)).clamp(-1.0, 1.0)
    if torch.any(cos <= -1.0 + 1e-7):
        raise ValueError("slerp endpoints are antipodal")
    theta = torch.arccos(cos)
    lam = float(lam)
    out = torch.empty_like(fa)
    for i in range(fa.shape[0]):
        if theta[i] < 1e-6:
            out[i] = (1.0 - lam) * fa[i] + lam * fb[i]
        else:
            s = torch.sin(theta[i])
            out[i] = torch.sin((1.0 - lam) * theta[i]) / s * fa[i] + torch.sin(lam * theta[i]) / s * fb[i]
    return out.reshape(a.shape)


@torch.no_grad()
def interpolate(
    model,
    schedule: NoiseSchedule,
    x_p: torch.Tensor,
    x_s1: torch.Tensor,
    x_s2: torch.Tensor,
    n_points: int,
    generator: torch.Generator | None = None,
    guidance: GuidanceConfig = GuidanceConfig(),
    steps: int | None = None,
) -> list[torch.Tensor]:
    """DDIM frames along slerp(noise_1, noise_2) and a linear blend of the two texture stacks.

    Returns ``n_points`` batches for lambda = 0, 1/(n-1), ..., 1. The noise
    pair is drawn from ``generator`` in the order noise_1, noise_2.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    b = x_p.shape[0]
    shape = (b, model.config.image_channels, x_p.shape[2], x_p.shape[3])
    y1 = torch.randn(shape, generator=generator, dtype=x_p.dtype)
    y2 = torch.randn(shape, generator=generator, dtype=x_p.dtype)
    f1, f2 = model.encode_texture(x_s1), model.encode_texture(x_s2)
    base = prepare_conditioning(model, x_p, x_s1)
    frames = []
    for i in range(n_points):
        lam = i / (n_points - 1)
        feats = [(1.0 - lam) * a + lam * c for a, c in zip(f1, f2)]
        cond = Conditioning(x_p, feats, base.null_pose, base.null_features)
        frames.append(ddim_sample(model, schedule, slerp(y1, y2, lam), guidance=guidance, steps=steps, cond=cond))
    return frames


@dataclass
class EditSpec:
    """Reference image and binary mask (1 = regenerate), mask ``[H, W]`` or broadcastable."""

    y_ref: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        m = torch.as_tensor(self.mask)
        if not torch.all((m == 0) | (m == 1)):
            raise ValueError("edit mask must be binary")
        if m.ndim == 2:
            m = m[None, None]
        self.mask = m.to(self.y_ref.dtype)


@torch.no_grad()
def edit(
    model,
    schedule: NoiseSchedule,
    x_p: torch.Tensor,
    x_s: torch.Tensor,
    spec: EditSpec,
    guidance: GuidanceConfig = GuidanceConfig(),
    generator: torch.Generator | None = None,
    steps: int | None = None,
    ref_generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Regenerate the masked region while the rest tracks a noised copy of the reference.

    After every reverse step the unmasked region is replaced by ``y_ref``
    noised to the new level; the last replacement uses ``y_ref`` itself, so
    ``(1 - m) * out == (1 - m) * y_ref`` exactly. Reference noise comes from
    ``ref_generator`` (default: seeded from ``generator``'s initial seed + 1)
    so the main stream matches :func:`sample`.
    """
    sched, tmap = schedule.respace(schedule.T if steps is None else steps)
    if ref_generator is None:
        seed = generator.initial_seed() if generator is not None else torch.initial_seed()
        ref_generator = torch.Generator().manual_seed((seed + 1) % (2**63))
    cond = prepare_conditioning(model, x_p, x_s)
    b = x_p.shape[0]
    m = spec.mask
    y_ref = spec.y_ref.expand(b, -1, -1, -1) if spec.y_ref.shape[0] == 1 else spec.y_ref
    shape = (b, model.config.image_channels, x_p.shape[2], x_p.shape[3])
    y = torch.randn(shape, generator=generator, dtype=x_p.dtype)
    for i in range(sched.T, 0, -1):
        pred = guided_noise(model, y, _full(b, tmap[i - 1]), guidance=guidance, cond=cond)
        y = ddpm_step(sched, y, _full(b, i), pred, generator)
        level = int(tmap[i - 2]) if i > 1 else 0
        noise = torch.randn(y_ref.shape, generator=ref_generator, dtype=y_ref.dtype)
        y = m * y + (1.0 - m) * q_sample(schedule, y_ref, _full(b, level), noise)
    return y.clamp(-1.0, 1.0)
