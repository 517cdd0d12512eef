"""Training loop, EMA tracking, config files and the versioned checkpoint format."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .data import PairDataset, batch_indices, condition_dropout
from .network import ModelConfig, PoseTextureUNet
from .schedule import NoiseSchedule, hybrid_loss, make_linear_schedule, q_sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 2e-5
    ema_decay: float = 0.9999
    total_steps: int = 30000
    eta_percent: float = 10.0
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    vib_weight: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 1000
    sample_every: int = 0
    sample_steps: int = 250
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        return cls(model=model, **d)


# Paper-scale hyperparameters: batch 8, Adam at 2e-5, EMA 0.9999, eta 10.
PAPER_PRESET = TrainConfig()

# Single-CPU preset used for the end-to-end acceptance run.
DESK_PRESET = TrainConfig(
    batch_size=8,
    learning_rate=2e-4,
    ema_decay=0.999,
    total_steps=30000,
    model=ModelConfig(base_width=16, channel_multipliers=(1, 2, 4, 4, 8), num_res_blocks=1, time_embed_dim=128),
)

PRESETS = {"paper": PAPER_PRESET, "desk": DESK_PRESET}


# ---------------------------------------------------------------------------
# flat key=value config files

class ConfigError(ValueError):
    pass


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [s for s in raw.replace(" ", "").split(",") if s]
        if current and isinstance(current[0], tuple):
            return tuple(tuple(int(v) for v in s.split("x")) for s in items)
        return tuple(int(v) for v in items)
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(str(v) for v in r) for r in value)
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key=value`` lines over ``base``. Model keys sit alongside training keys.

    ``preset=<name>`` (first non-comment line only) selects the starting preset.
    Unknown keys raise :class:`ConfigError`.
    """
    lines = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        lines.append((n, key, value))
    cfg = copy.deepcopy(base or PAPER_PRESET)
    if lines and lines[0][1] == "preset":
        name = lines.pop(0)[2]
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        cfg = copy.deepcopy(PRESETS[name])
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_vals, model_vals = cfg.to_dict(), {}
    train_vals.pop("model")
    for n, key, value in lines:
        try:
            if key in train_keys:
                train_vals[key] = _parse_value(value, getattr(cfg, key))
            elif key in model_keys:
                model_vals[key] = _parse_value(value, getattr(cfg.model, key))
            else:
                raise ConfigError(f"line {n}: unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from None
    try:
        model = dataclasses.replace(cfg.model, **model_vals)
        return TrainConfig(model=model, **train_vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    out = []
    for f in dataclasses.fields(TrainConfig):
        if f.name != "model":
            out.append(f"{f.name}={_format_value(getattr(cfg, f.name))}")
    for f in dataclasses.fields(ModelConfig):
        out.append(f"{f.name}={_format_value(getattr(cfg.model, f.name))}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# optimisation

class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        foreach=False,
    )


def train_step(
    model: PoseTextureUNet,
    schedule: NoiseSchedule,
    batch: dict[str, torch.Tensor],
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    eta_percent: float = 10.0,
    vib_weight: float = 1e-3,
    grad_clip: float = 0.0,
) -> dict[str, float]:
    """One optimiser update on a batch; returns the loss components as floats."""
    model.train()
    y0, x_p, x_s = batch["y_0"], batch["x_p"], batch["x_s"]
    b = y0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    x_p, x_s = condition_dropout(x_p, x_s, generator, eta_percent)
    eps = torch.randn(y0.shape, generator=generator, dtype=y0.dtype)
    y_t = q_sample(schedule, y0, t, eps)
    pred = model(y_t, t, x_p, x_s)
    losses = hybrid_loss(schedule, y0, t, eps, pred.eps_hat, pred.v, vib_weight=vib_weight)
    values = {k: float(v.detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        state = {"losses": values, "t": t.tolist(), "eps_hat_finite": bool(torch.isfinite(pred.eps_hat).all())}
        raise NonFiniteLossError(f"non-finite loss {values}", state)
    optimizer.zero_grad(set_to_none=True)
    losses["loss"].backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return values


@torch.no_grad()
def ema_update(ema_params: Iterable[torch.Tensor], raw_params: Iterable[torch.Tensor], decay: float):
    """ema <- decay * ema + (1 - decay) * raw, in place."""
    ema_params, raw_params = list(ema_params), list(raw_params)
    if len(ema_params) != len(raw_params):
        raise ValueError("parameter lists differ in length")
    for e, r in zip(ema_params, raw_params):
        if e.shape != r.shape:
            raise ValueError(f"shape mismatch {tuple(e.shape)} vs {tuple(r.shape)}")
        e.mul_(decay).add_(r, alpha=1.0 - decay)
    return ema_params


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"POSEDIFF-CKPT\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    step: int
    model_state: dict[str, torch.Tensor]
    ema_state: dict[str, torch.Tensor]
    optimizer_state: dict
    config: TrainConfig
    schedule_beta: np.ndarray
    rng_state: torch.Tensor

    def build_model(self, ema: bool = True) -> PoseTextureUNet:
        model = PoseTextureUNet(self.config.model)
        model.load_state_dict(self.ema_state if ema else self.model_state)
        model.eval()
        if ema:
            model.requires_grad_(False)
        return model

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule_beta)


_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def _flatten_optimizer(state: dict):
    tensors, meta = {}, {"param_groups": [], "state": {}}
    for group in state["param_groups"]:
        meta["param_groups"].append({k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()})
    for idx, pstate in sorted(state["state"].items(), key=lambda kv: int(kv[0])):
        keys = []
        for key, value in pstate.items():
            tensors[f"optimizer/{idx}/{key}"] = value
            keys.append(key)
        meta["state"][str(idx)] = keys
    return tensors, meta


def _unflatten_optimizer(meta: dict, tensors: dict) -> dict:
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    # JSON sorts the keys as strings; restore numeric parameter order
    items = sorted(meta["state"].items(), key=lambda kv: int(kv[0]))
    state = {int(idx): {k: tensors[f"optimizer/{idx}/{k}"] for k in keys} for idx, keys in items}
    return {"state": state, "param_groups": groups}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``magic | u32 version | u64 header length | JSON header | tensor bytes``."""
    tensors = {}
    for k, v in ckpt.model_state.items():
        tensors[f"model/{k}"] = v
    for k, v in ckpt.ema_state.items():
        tensors[f"ema/{k}"] = v
    opt_tensors, opt_meta = _flatten_optimizer(ckpt.optimizer_state)
    tensors.update(opt_tensors)
    tensors["schedule/beta"] = torch.from_numpy(np.asarray(ckpt.schedule_beta, dtype=np.float64))
    tensors["rng/train"] = ckpt.rng_state

    index, blobs, offset = [], [], 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().contiguous()
        data = arr.numpy().tobytes()
        index.append({"name": name, "dtype": _DTYPES[arr.dtype], "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "step": ckpt.step,
        "config": ckpt.config.to_dict(),
        "optimizer": opt_meta,
        "tensors": index,
        "payload_bytes": offset,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hdr)))
        fh.write(hdr)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path, expected_model: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected_model``, shapes are checked against that config."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        if MAGIC.startswith(raw):
            raise CheckpointTruncatedError(f"{path}: file ends inside the magic header")
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 12:
        raise CheckpointTruncatedError(f"{path}: file ends inside the version field")
    version, hlen = struct.unpack("<IQ", raw[pos: pos + 12])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    pos += 12
    if len(raw) < pos + hlen:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    header = json.loads(raw[pos: pos + hlen])
    pos += hlen
    if len(raw) != pos + header["payload_bytes"]:
        raise CheckpointTruncatedError(
            f"{path}: payload is {len(raw) - pos} bytes, header declares {header['payload_bytes']}"
        )
    tensors = {}
    for entry in header["tensors"]:
        start = pos + entry["offset"]
        dtype = _DTYPES_INV[entry["dtype"]]
        buf = bytearray(raw[start: start + entry["nbytes"]])
        arr = torch.frombuffer(buf, dtype=dtype) if buf else torch.empty(0, dtype=dtype)
        tensors[entry["name"]] = arr.reshape(entry["shape"])

    config = TrainConfig.from_dict(header["config"])
    if expected_model is not None:
        reference = PoseTextureUNet(expected_model).state_dict()
        for name, ref in reference.items():
            stored = tensors.get(f"model/{name}")
            if stored is None:
                raise CheckpointShapeError(f"parameter {name!r} missing from checkpoint")
            if tuple(stored.shape) != tuple(ref.shape):
                raise CheckpointShapeError(
                    f"parameter {name!r}: checkpoint shape {tuple(stored.shape)} != config shape {tuple(ref.shape)}"
                )
        extra = {n[len("model/"):] for n in tensors if n.startswith("model/")} - set(reference)
        if extra:
            raise CheckpointShapeError(f"parameter {sorted(extra)[0]!r} not present in the given config")

    def section(prefix):
        return {n[len(prefix):]: v for n, v in tensors.items() if n.startswith(prefix)}

    return Checkpoint(
        step=header["step"],
        model_state=section("model/"),
        ema_state=section("ema/"),
        optimizer_state=_unflatten_optimizer(header["optimizer"], tensors),
        config=config,
        schedule_beta=tensors["schedule/beta"].numpy().copy(),
        rng_state=tensors["rng/train"],
    )


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainState:
    step: int
    model: PoseTextureUNet
    ema: PoseTextureUNet
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    schedule: NoiseSchedule
    config: TrainConfig
    last_losses: dict = field(default_factory=dict)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            step=self.step,
            model_state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            ema_state={k: v.detach().clone() for k, v in self.ema.state_dict().items()},
            optimizer_state=copy.deepcopy(self.optimizer.state_dict()),
            config=copy.deepcopy(self.config),
            schedule_beta=np.array(self.schedule.beta),
            rng_state=self.generator.get_state().clone(),
        )


@dataclass
class Callback:
    period: int
    fn: Callable[[TrainState], None]


def init_state(config: TrainConfig, resume: Checkpoint | None = None) -> TrainState:
    torch.manual_seed(config.seed)
    model = PoseTextureUNet(config.model)
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    optimizer = make_optimizer(model, config)
    generator = torch.Generator().manual_seed(config.seed)
    schedule = config.schedule()
    step = 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        ema.load_state_dict(resume.ema_state)
        optimizer.load_state_dict(resume.optimizer_state)
        generator.set_state(resume.rng_state)
        schedule = resume.schedule()
        step = resume.step
    return TrainState(step, model, ema, optimizer, generator, schedule, config)


def fit(
    config: TrainConfig,
    dataset: PairDataset,
    callbacks: Iterable[Callback] = (),
    out_dir=None,
    resume: Checkpoint | None = None,
    log_path=None,
) -> Checkpoint:
    """Run ``train_step`` up to ``config.total_steps`` with per-step EMA updates.

    Checkpoints go to ``out_dir`` every ``checkpoint_every`` steps (and as
    ``abort.ckpt`` if training fails). The log receives one line per step:
    ``step,L_mse,L_vib,L_hybrid,wall_ms``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    state = init_state(config, resume)
    callbacks = list(callbacks)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if log_path is None and out is not None:
        log_path = out / "train_log.csv"
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        while state.step < config.total_steps:
            t0 = time.perf_counter()
            idx = batch_indices(config.seed, state.step, len(dataset), config.batch_size)
            losses = train_step(
                state.model, state.schedule, dataset.batch(idx), state.optimizer, state.generator,
                config.eta_percent, config.vib_weight, config.grad_clip,
            )
            ema_update(state.ema.parameters(), state.model.parameters(), config.ema_decay)
            for e, r in zip(state.ema.buffers(), state.model.buffers()):
                e.copy_(r)
            state.step += 1
            state.last_losses = losses
            wall_ms = (time.perf_counter() - t0) * 1000
            if log_fh is not None:
                log_fh.write(f"{state.step},{losses['mse']:.6g},{losses['vib']:.6g},{losses['loss']:.6g},{wall_ms:.1f}\n")
                log_fh.flush()
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(out / "last.ckpt", state.checkpoint())
            for cb in callbacks:
                if cb.period and state.step % cb.period == 0:
                    cb.fn(state)
    except BaseException:
        if out is not None:
            save_checkpoint(out / "abort.ckpt", state.checkpoint())
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    final = state.checkpoint()
    if out is not None:
        save_checkpoint(out / "last.ckpt", final)
    return final


def read_log(path) -> np.ndarray:
    """Training log as an array with columns step, L_mse, L_vib, L_hybrid, wall_ms."""
    rows = [list(map(float, line.split(","))) for line in Path(path).read_text().splitlines() if line.strip()]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)
