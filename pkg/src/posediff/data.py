"""Procedural "sprite person" dataset with an exact oracle renderer.

Every pair is a pure function of ``(seed, index)``: each record draws from its
own ``numpy`` stream seeded with ``[seed, index]``, so serial and parallel
generation agree.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .imageio import from_uint8, read_image, to_uint8, write_image

KEYPOINT_NAMES = (
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_hand",
    "r_hand",
    "pelvis",
    "l_knee",
    "r_knee",
    "l_foot",
    "r_foot",
)
K = len(KEYPOINT_NAMES)
KP = {name: i for i, name in enumerate(KEYPOINT_NAMES)}
REGIONS = ("background", "pants", "shirt", "skin")

# Pose prior works in a frame measured in image heights; x is rescaled by this
# width/height ratio when mapped back to the unit square.
ASPECT = 0.75

_LEVELS = (0.1, 0.5, 0.9)
CLOTH_COLORS = tuple((r, g, b) for r in _LEVELS for g in _LEVELS for b in _LEVELS)
SKIN_COLORS = (
    (0.96, 0.8, 0.69),
    (0.87, 0.67, 0.5),
    (0.65, 0.45, 0.32),
    (0.42, 0.28, 0.2),
)
MAX_RETRIES = 200


@dataclass(frozen=True)
class SceneSpec:
    """Keypoints are ``(x, y)`` in the unit square, x across the width, y down."""

    keypoints: tuple[tuple[float, float], ...]
    skin: tuple[float, float, float]
    shirt: tuple[float, float, float]
    pants: tuple[float, float, float]
    background: tuple[float, float, float]
    limb_width: float

    @property
    def palette(self) -> dict[str, tuple[float, float, float]]:
        return {"background": self.background, "pants": self.pants, "shirt": self.shirt, "skin": self.skin}

    def keypoint_array(self) -> np.ndarray:
        return np.asarray(self.keypoints, dtype=np.float64)

    def with_pose(self, keypoints) -> "SceneSpec":
        kp = tuple((float(x), float(y)) for x, y in np.asarray(keypoints, dtype=np.float64))
        return SceneSpec(kp, self.skin, self.shirt, self.pants, self.background, self.limb_width)


class TrainingPair(NamedTuple):
    x_s: np.ndarray  # [3, H, W] source image, pose A
    x_p: np.ndarray  # [K, H, W] heatmaps of pose B
    y_0: np.ndarray  # [3, H, W] target image, pose B
    meta: tuple[SceneSpec, SceneSpec]


class Render(NamedTuple):
    image: np.ndarray  # [3, H, W] in [-1, 1]
    regions: dict[str, np.ndarray]  # region -> [H, W] visible weight, weights sum to 1
    parts: dict[str, np.ndarray]  # body part -> [H, W] stroke coverage


def _palette_distance_ok(colors, min_dist: float = 0.1) -> bool:
    c = np.asarray(colors)
    for i in range(len(c)):
        for j in range(i + 1, len(c)):
            if np.max(np.abs(c[i] - c[j])) < min_dist:
                return False
    return True


def _sample_appearance(rng: np.random.Generator):
    for _ in range(MAX_RETRIES):
        skin = SKIN_COLORS[rng.integers(len(SKIN_COLORS))]
        shirt, pants, bg = (CLOTH_COLORS[i] for i in rng.choice(len(CLOTH_COLORS), size=3, replace=False))
        if _palette_distance_ok([skin, shirt, pants, bg]):
            limb_width = float(rng.uniform(0.05, 0.07))
            return skin, shirt, pants, bg, limb_width
    raise RuntimeError("could not sample a valid palette")


def _unit(angle: float) -> np.ndarray:
    # 0 points straight down the image, positive angles rotate toward +x
    return np.array([np.sin(angle), np.cos(angle)])


def _sample_pose_once(rng: np.random.Generator) -> dict[str, np.ndarray]:
    u = rng.uniform
    pelvis = np.array([ASPECT / 2 + u(-0.06, 0.06), 0.55 + u(-0.03, 0.03)])
    lean = u(-0.2, 0.2)
    up = -_unit(lean)  # toward the head
    across = np.array([-up[1], up[0]])  # perpendicular, pointing +x when upright
    neck = pelvis + u(0.2, 0.24) * up
    half_shoulder = u(0.07, 0.085)
    pts = {"pelvis": pelvis}
    pts["head"] = neck + u(0.085, 0.1) * -_unit(lean + u(-0.25, 0.25))
    for side, sign in (("l", -1.0), ("r", 1.0)):
        shoulder = neck + sign * half_shoulder * across
        upper = u(-0.3, 2.4)
        fore = upper + u(-1.4, 1.4)
        elbow = shoulder + u(0.11, 0.14) * _unit(sign * upper)
        hand = elbow + u(0.1, 0.13) * _unit(sign * fore)
        thigh = u(-0.15, 0.55)
        shin = thigh + u(-0.45, 0.3)
        hip = pelvis + sign * 0.035 * across
        knee = hip + u(0.16, 0.19) * _unit(sign * thigh)
        foot = knee + u(0.15, 0.18) * _unit(sign * shin)
        pts.update({f"{side}_shoulder": shoulder, f"{side}_elbow": elbow, f"{side}_hand": hand,
                    f"{side}_knee": knee, f"{side}_foot": foot})
    kp = np.stack([pts[n] for n in KEYPOINT_NAMES])
    kp[:, 0] /= ASPECT
    return kp


def pose_is_valid(kp: np.ndarray, limb_width: float = 0.07, margin: float = 0.02) -> bool:
    """On-canvas (including the head disc) and no two keypoints coincide."""
    kp = np.asarray(kp, dtype=np.float64)
    if np.any(kp < margin) or np.any(kp > 1 - margin):
        return False
    head_r = 1.5 * limb_width
    hx, hy = kp[KP["head"]]
    if hy - head_r < 0 or hx - head_r / ASPECT < 0 or hx + head_r / ASPECT > 1:
        return False
    metric = kp * np.array([ASPECT, 1.0])
    d = np.linalg.norm(metric[:, None] - metric[None], axis=-1)
    d[np.diag_indices(len(kp))] = np.inf
    return bool(d.min() >= 0.02)


def _sample_pose(rng: np.random.Generator, limb_width: float) -> np.ndarray:
    for _ in range(MAX_RETRIES):
        kp = _sample_pose_once(rng)
        if pose_is_valid(kp, limb_width):
            return kp
    raise RuntimeError("could not sample a valid pose")


def sample_scene(rng: np.random.Generator) -> SceneSpec:
    skin, shirt, pants, bg, limb_width = _sample_appearance(rng)
    kp = _sample_pose(rng, limb_width)
    return SceneSpec(tuple(map(tuple, kp.tolist())), skin, shirt, pants, bg, limb_width)


# body part -> (region, keypoint chain, width multiplier)
_PARTS = {
    "l_thigh": ("pants", ("pelvis", "l_knee"), 1.0),
    "l_shin": ("pants", ("l_knee", "l_foot"), 1.0),
    "r_thigh": ("pants", ("pelvis", "r_knee"), 1.0),
    "r_shin": ("pants", ("r_knee", "r_foot"), 1.0),
    "torso": ("shirt", ("pelvis", "neck"), 2.2),
    "shoulders": ("shirt", ("l_shoulder", "r_shoulder"), 1.0),
    "l_upper_arm": ("shirt", ("l_shoulder", "l_elbow"), 1.0),
    "l_forearm": ("shirt", ("l_elbow", "l_hand"), 1.0),
    "r_upper_arm": ("shirt", ("r_shoulder", "r_elbow"), 1.0),
    "r_forearm": ("shirt", ("r_elbow", "r_hand"), 1.0),
}
PART_NAMES = tuple(_PARTS) + ("head",)


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    s = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0) if denom > 0 else 0.0
    return np.hypot(px - (a[0] + s * ab[0]), py - (a[1] + s * ab[1]))


def render_person(spec: SceneSpec, H: int, W: int, return_masks: bool = False):
    """Oracle rasterizer: background, pants strokes, shirt strokes, then the head disc.

    Strokes are anti-aliased by a one-pixel coverage ramp. With
    ``return_masks`` a :class:`Render` with per-region visible weights and
    per-part coverage is returned instead of the bare image.
    """
    kp = spec.keypoint_array() * np.array([W, H])
    pts = {n: kp[i] for i, n in enumerate(KEYPOINT_NAMES)}
    pts["neck"] = (pts["l_shoulder"] + pts["r_shoulder"]) / 2
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    radius = spec.limb_width * H / 2

    parts = {}
    for name, (_, (a, b), mult) in _PARTS.items():
        d = _segment_distance(px, py, pts[a], pts[b])
        parts[name] = np.clip(radius * mult + 0.5 - d, 0.0, 1.0)
    d = np.hypot(px - pts["head"][0], py - pts["head"][1])
    parts["head"] = np.clip(3 * radius + 0.5 - d, 0.0, 1.0)

    weights = {r: np.zeros((H, W)) for r in REGIONS}
    weights["background"][:] = 1.0
    for region in ("pants", "shirt", "skin"):
        names = [n for n, (r, _, _) in _PARTS.items() if r == region] or ["head"]
        cov = np.max(np.stack([parts[n] for n in names]), axis=0)
        for r in REGIONS:
            weights[r] *= 1.0 - cov
        weights[region] += cov

    palette = spec.palette
    image = np.zeros((3, H, W))
    for r in REGIONS:
        image += weights[r][None] * np.asarray(palette[r], dtype=np.float64)[:, None, None]
    image = image * 2.0 - 1.0
    if return_masks:
        return Render(image, weights, parts)
    return image


def keypoint_pixels(keypoints: np.ndarray, H: int, W: int) -> np.ndarray:
    """Integer ``(row, col)`` of the pixel containing each keypoint."""
    kp = np.asarray(keypoints, dtype=np.float64)
    col = np.clip(np.floor(kp[..., 0] * W), 0, W - 1).astype(np.int64)
    row = np.clip(np.floor(kp[..., 1] * H), 0, H - 1).astype(np.int64)
    return np.stack([row, col], axis=-1)


def heatmaps_from_keypoints(keypoints: np.ndarray, H: int, W: int, sigma: float = 1.5) -> np.ndarray:
    """Gaussian heatmaps ``[..., K, H, W]`` peaking at 1.0 on each keypoint's pixel center."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rc = keypoint_pixels(keypoints, H, W)
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    dr = rows - rc[..., 0, None, None]
    dc = cols - rc[..., 1, None, None]
    return np.exp(-(dr**2 + dc**2) / (2.0 * sigma**2))


def render_pose_heatmaps(spec: SceneSpec, H: int, W: int, sigma: float = 1.5) -> np.ndarray:
    return heatmaps_from_keypoints(spec.keypoint_array(), H, W, sigma)


def make_pair(rng: np.random.Generator, H: int = 64, W: int = 48, sigma: float = 1.5) -> TrainingPair:
    """One appearance rendered in two independent poses: source (A) and target (B)."""
    skin, shirt, pants, bg, limb_width = _sample_appearance(rng)
    pose_a = _sample_pose(rng, limb_width)
    for _ in range(MAX_RETRIES):
        pose_b = _sample_pose(rng, limb_width)
        if not np.array_equal(pose_a, pose_b):
            break
    else:
        raise RuntimeError("could not sample a distinct target pose")
    spec_a = SceneSpec(tuple(map(tuple, pose_a.tolist())), skin, shirt, pants, bg, limb_width)
    spec_b = spec_a.with_pose(pose_b)
    return TrainingPair(
        x_s=render_person(spec_a, H, W),
        x_p=render_pose_heatmaps(spec_b, H, W, sigma),
        y_0=render_person(spec_b, H, W),
        meta=(spec_a, spec_b),
    )


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_pairs(seed: int, count: int, H: int = 64, W: int = 48, sigma: float = 1.5, start: int = 0):
    return [make_pair(pair_rng(seed, i), H, W, sigma) for i in range(start, start + count)]


def condition_dropout(x_p: torch.Tensor, x_s: torch.Tensor, generator: torch.Generator | None, eta_percent: float,
                      return_masks: bool = False):
    """Independently replace each condition with zeros for ``eta_percent`` % of the batch."""
    if not 0 <= eta_percent <= 100:
        raise ValueError("eta_percent must lie in [0, 100]")
    b = x_p.shape[0]
    p = eta_percent / 100.0
    drop_p = torch.rand(b, generator=generator) < p
    drop_s = torch.rand(b, generator=generator) < p
    shape = (b,) + (1,) * (x_p.ndim - 1)
    x_p = torch.where(drop_p.reshape(shape).to(x_p.device), torch.zeros_like(x_p), x_p)
    shape = (b,) + (1,) * (x_s.ndim - 1)
    x_s = torch.where(drop_s.reshape(shape).to(x_s.device), torch.zeros_like(x_s), x_s)
    if return_masks:
        return x_p, x_s, drop_p, drop_s
    return x_p, x_s


# ---------------------------------------------------------------------------
# on-disk dataset

MANIFEST = "manifest.txt"
MANIFEST_KEYS = ("format_version", "seed", "count", "height", "width", "keypoints", "sigma")
FORMAT_VERSION = 1


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _record_text(spec_a: SceneSpec, spec_b: SceneSpec) -> str:
    lines = [f"limb_width {spec_a.limb_width!r}"]
    for name in ("skin", "shirt", "pants", "background"):
        lines.append(f"{name} {_fmt_floats(getattr(spec_a, name))}")
    for tag, spec in (("a", spec_a), ("b", spec_b)):
        for name, (x, y) in zip(KEYPOINT_NAMES, spec.keypoints):
            lines.append(f"pose_{tag} {name} {x!r} {y!r}")
    return "\n".join(lines) + "\n"


def _parse_record(text: str) -> tuple[SceneSpec, SceneSpec]:
    colors, poses, limb_width = {}, {"a": {}, "b": {}}, None
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "limb_width":
            limb_width = float(parts[1])
        elif parts[0] in ("skin", "shirt", "pants", "background"):
            colors[parts[0]] = tuple(float(v) for v in parts[1:4])
        elif parts[0] in ("pose_a", "pose_b"):
            poses[parts[0][-1]][parts[1]] = (float(parts[2]), float(parts[3]))
        else:
            raise ValueError(f"unknown record line: {line!r}")
    specs = []
    for tag in ("a", "b"):
        kp = tuple(poses[tag][n] for n in KEYPOINT_NAMES)
        specs.append(SceneSpec(kp, colors["skin"], colors["shirt"], colors["pants"], colors["background"], limb_width))
    return specs[0], specs[1]


def read_manifest(path) -> dict:
    values = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    missing = set(MANIFEST_KEYS) - set(values)
    if missing:
        raise ValueError(f"manifest missing keys: {sorted(missing)}")
    return {
        "format_version": int(values["format_version"]),
        "seed": int(values["seed"]),
        "count": int(values["count"]),
        "height": int(values["height"]),
        "width": int(values["width"]),
        "keypoints": int(values["keypoints"]),
        "sigma": float(values["sigma"]),
    }


def write_dataset(out_dir, seed: int, count: int, H: int = 64, W: int = 48, sigma: float = 1.5):
    """Write ``count`` pairs: a manifest plus per-record PNG images and keypoint text."""
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION, "seed": seed, "count": count,
        "height": H, "width": W, "keypoints": K, "sigma": repr(float(sigma)),
    }
    (out / MANIFEST).write_text("".join(f"{k}={manifest[k]}\n" for k in MANIFEST_KEYS))
    for i in range(count):
        pair = make_pair(pair_rng(seed, i), H, W, sigma)
        stem = out / "records" / f"{i:06d}"
        write_image(f"{stem}_source.png", pair.x_s)
        write_image(f"{stem}_target.png", pair.y_0)
        Path(f"{stem}.txt").write_text(_record_text(*pair.meta))
    return out


def dataset_digest(path) -> str:
    """sha256 over every file (relative path and bytes) in a dataset directory."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class PairDataset:
    """Pairs held in memory as 8-bit images plus their scene specs; heatmaps rebuilt per batch."""

    def __init__(self, sources: np.ndarray, targets: np.ndarray, specs: list[tuple[SceneSpec, SceneSpec]],
                 sigma: float = 1.5):
        self.sources = sources  # uint8 [N, 3, H, W]
        self.targets = targets
        self.specs = specs
        self.sigma = sigma
        self.height, self.width = sources.shape[2:]
        self.keypoints_b = np.stack([s[1].keypoint_array() for s in specs]) if specs else np.zeros((0, K, 2))

    def __len__(self):
        return len(self.specs)

    @classmethod
    def from_pairs(cls, pairs, sigma: float = 1.5):
        src = np.stack([to_uint8(p.x_s) for p in pairs])
        tgt = np.stack([to_uint8(p.y_0) for p in pairs])
        return cls(src, tgt, [p.meta for p in pairs], sigma)

    @classmethod
    def generate(cls, seed: int, count: int, H: int = 64, W: int = 48, sigma: float = 1.5, start: int = 0):
        return cls.from_pairs(generate_pairs(seed, count, H, W, sigma, start), sigma)

    @classmethod
    def load(cls, path):
        root = Path(path)
        if not (root / MANIFEST).exists():
            raise FileNotFoundError(f"no dataset manifest in {root}")
        man = read_manifest(root / MANIFEST)
        if man["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format version {man['format_version']}")
        if man["keypoints"] != K:
            raise ValueError(f"dataset has {man['keypoints']} keypoints, expected {K}")
        src, tgt, specs = [], [], []
        for i in range(man["count"]):
            stem = root / "records" / f"{i:06d}"
            src.append(read_image(f"{stem}_source.png", as_uint8=True))
            tgt.append(read_image(f"{stem}_target.png", as_uint8=True))
            specs.append(_parse_record(Path(f"{stem}.txt").read_text()))
        return cls(np.stack(src), np.stack(tgt), specs, man["sigma"])

    def batch(self, indices, dtype=torch.float32) -> dict[str, torch.Tensor]:
        idx = np.asarray(indices)
        heat = heatmaps_from_keypoints(self.keypoints_b[idx], self.height, self.width, self.sigma)
        return {
            "x_s": torch.from_numpy(from_uint8(self.sources[idx])).to(dtype),
            "y_0": torch.from_numpy(from_uint8(self.targets[idx])).to(dtype),
            "x_p": torch.from_numpy(heat).to(dtype),
        }


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Training batch for a given step; depends only on ``(seed, step)``."""
    rng = np.random.default_rng([int(seed), 0x5EED, int(step)])
    return rng.choice(n, size=min(batch_size, n), replace=False)


