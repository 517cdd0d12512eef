"""Metrics against the synthetic oracle: SSIM, pose fidelity and appearance fidelity."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
from scipy import ndimage

from .data import PART_NAMES, REGIONS, PairDataset, SceneSpec, heatmaps_from_keypoints, render_person
from .sampler import GuidanceConfig, sample


@lru_cache(maxsize=8)
def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[half: img.shape[0] - half, half: img.shape[1] - half]


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         value_range: tuple[float, float] = (-1.0, 1.0)) -> float:
    """Gaussian-window SSIM over valid positions, averaged over channels.

    Inputs are ``[C, H, W]`` (or ``[H, W]``) in ``value_range`` and are mapped
    to [0, 1] before the statistics are taken.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[1:]) < window:
        raise ValueError(f"image {a.shape[1:]} smaller than the {window}px window")
    lo, hi = value_range
    a = (a - lo) / (hi - lo)
    b = (b - lo) / (hi - lo)
    g = _gaussian_window(window, sigma)
    c1, c2 = k1**2, k2**2
    scores = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def pose_fidelity(generated, target_spec: SceneSpec, search_radius: int = 6, context: int = 2,
                  miss_threshold: float = 0.2) -> float:
    """Mean displacement (px) of each body part's best template match in the generated image.

    Each template is the oracle render under the part's stroke mask dilated
    by ``context`` pixels. Shifts within ``search_radius`` are scored by mean
    absolute color error; ties go to the smaller shift. A part whose best
    score exceeds ``miss_threshold`` counts as displaced by the full radius.
    """
    gen = (np.asarray(generated, dtype=np.float64) + 1.0) / 2.0
    _, H, W = gen.shape
    render = render_person(target_spec, H, W, return_masks=True)
    oracle = (render.image + 1.0) / 2.0
    R = search_radius
    masks = []
    for name in PART_NAMES:
        m = render.parts[name] > 0.5
        if m.any():
            masks.append(ndimage.binary_dilation(m, iterations=context) if context else m)
    masks = np.stack(masks).astype(np.float64)
    sizes = masks.sum(axis=(1, 2))
    padded = np.pad(gen, ((0, 0), (R, R), (R, R)), mode="edge")
    shifts = sorted(((dy, dx) for dy in range(-R, R + 1) for dx in range(-R, R + 1)),
                    key=lambda s: (s[0] ** 2 + s[1] ** 2, s))
    best_cost = np.full(len(masks), np.inf)
    best_dist = np.zeros(len(masks))
    for dy, dx in shifts:
        window = padded[:, R + dy: R + dy + H, R + dx: R + dx + W]
        diff = np.abs(window - oracle).mean(axis=0)
        cost = (masks * diff).sum(axis=(1, 2)) / sizes
        better = cost < best_cost - 1e-12
        best_cost[better] = cost[better]
        best_dist[better] = np.hypot(dy, dx)
    best_dist[best_cost > miss_threshold] = R
    return float(best_dist.mean())


def appearance_fidelity(generated, target_spec: SceneSpec, threshold: float = 0.95) -> float:
    """Mean over regions of the L1 (summed over RGB) between region mean color and palette color.

    Regions are the oracle's visible-weight maps above ``threshold``, i.e. the
    stroke interiors without the anti-aliased rim.
    """
    gen = (np.asarray(generated, dtype=np.float64) + 1.0) / 2.0
    _, H, W = gen.shape
    render = render_person(target_spec, H, W, return_masks=True)
    palette = target_spec.palette
    errors = []
    for region in REGIONS:
        m = render.regions[region] > threshold
        if not m.any():
            continue
        mean = gen[:, m].mean(axis=1)
        errors.append(np.abs(mean - np.asarray(palette[region])).sum())
    return float(np.mean(errors))


@dataclass
class EvalReport:
    mean_ssim: float
    pose_error_px: float
    appearance_error: float
    n_samples: int

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        vals = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(float(vals["mean_ssim"]), float(vals["pose_error_px"]), float(vals["appearance_error"]),
                   int(vals["n_samples"]))


def score_images(images, specs: list[SceneSpec]) -> tuple[EvalReport, dict[str, np.ndarray]]:
    """Score generated ``[3, H, W]`` images against the oracle renders of ``specs``."""
    if len(specs) == 0:
        raise ValueError("nothing to evaluate")
    per = {"ssim": [], "pose": [], "appearance": []}
    for img, spec in zip(images, specs):
        img = np.asarray(img, dtype=np.float64)
        target = render_person(spec, img.shape[1], img.shape[2])
        per["ssim"].append(ssim(img, target))
        per["pose"].append(pose_fidelity(img, spec))
        per["appearance"].append(appearance_fidelity(img, spec))
    per = {k: np.asarray(v) for k, v in per.items()}
    report = EvalReport(float(per["ssim"].mean()), float(per["pose"].mean()),
                        float(per["appearance"].mean()), len(specs))
    return report, per


@torch.no_grad()
def generate_for_pairs(model, schedule, dataset: PairDataset, guidance: GuidanceConfig, seed: int = 0,
                       steps: int | None = None, batch_size: int = 25, limit: int | None = None,
                       progress=None) -> np.ndarray:
    """One guided sample per pair, batch by batch from a single seeded stream."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    generator = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        batch = dataset.batch(idx, dtype=dtype)
        out.append(sample(model, schedule, batch["x_p"], batch["x_s"], guidance, generator, steps).double().numpy())
        if progress is not None:
            progress(min(n, start + batch_size), n)
    return np.concatenate(out)


def evaluate(model_or_ckpt, dataset: PairDataset, guidance: GuidanceConfig = GuidanceConfig(), seed: int = 0,
             steps: int | None = None, batch_size: int = 25, limit: int | None = None, schedule=None,
             progress=None) -> EvalReport:
    """Sample every test pair with the EMA weights and aggregate the oracle metrics."""
    if len(dataset) == 0:
        raise ValueError("empty test set")
    if hasattr(model_or_ckpt, "build_model"):
        model = model_or_ckpt.build_model(ema=True)
        schedule = schedule or model_or_ckpt.schedule()
    else:
        model = model_or_ckpt
    if schedule is None:
        raise ValueError("a schedule is required when passing a bare model")
    images = generate_for_pairs(model, schedule, dataset, guidance, seed, steps, batch_size, limit, progress)
    specs = [dataset.specs[i][1] for i in range(len(images))]
    return score_images(images, specs)[0]


def region_mean_color(image, spec: SceneSpec, region: str = "shirt", threshold: float = 0.95) -> np.ndarray:
    """Mean [0, 1] RGB of ``image`` over the oracle's mask for ``region``."""
    img = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    render = render_person(spec, img.shape[1], img.shape[2], return_masks=True)
    m = render.regions[region] > threshold
    return img[:, m].mean(axis=1)


def pose_maps(specs: list[SceneSpec], H: int, W: int, sigma: float = 1.5) -> np.ndarray:
    return heatmaps_from_keypoints(np.stack([s.keypoint_array() for s in specs]), H, W, sigma)
