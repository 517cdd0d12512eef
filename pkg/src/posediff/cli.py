"""Command-line entry point: gen-data, train, sample, edit, interpolate, eval.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .evaluation import evaluate, generate_for_pairs
from .imageio import make_grid, read_image, read_mask, write_image
from .sampler import EditSpec, GuidanceConfig, edit, interpolate, sample
from .train import (
    PRESETS,
    Callback,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    fit,
    format_config,
    load_checkpoint,
    load_config,
)

log = logging.getLogger("posediff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def build_parser() -> _Parser:
    p = _Parser(prog="posediff", description="Pose- and appearance-conditioned diffusion on synthetic sprites.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="key=value file supplying defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=Path, required=out_required)
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")

    def guidance(sp):
        sp.add_argument("--wp", type=float, default=2.0, help="pose guidance scale")
        sp.add_argument("--ws", type=float, default=2.0, help="style guidance scale")
        sp.add_argument("--steps", type=int, default=250, help="sampling steps (strided)")

    sp = sub.add_parser("gen-data", help="write a synthetic pair dataset")
    common(sp)
    sp.add_argument("--count", type=int, default=2000)
    sp.add_argument("--size", type=_size, default=(64, 48))
    sp.add_argument("--sigma", type=float, default=1.5)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--steps", type=int, help="total training steps (overrides the config)")
    sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    sp.add_argument("--resume", type=Path)
    sp.add_argument("--sample-every", type=int, default=None)

    sp = sub.add_parser("sample", help="generate a person in a dataset pose with a source appearance")
    common(sp)
    guidance(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--source", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--pose-from", type=int, required=True, help="dataset record index")
    sp.add_argument("--snapshots", type=int, default=6)

    sp = sub.add_parser("edit", help="regenerate the masked region of a reference image")
    common(sp)
    guidance(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--ref", type=Path, required=True)
    sp.add_argument("--mask", type=Path, required=True)
    sp.add_argument("--source", type=Path, required=True)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--pose-from", type=int, help="record whose target pose matches the reference")

    sp = sub.add_parser("interpolate", help="DDIM style interpolation between two sources")
    common(sp)
    guidance(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--source1", type=Path, required=True)
    sp.add_argument("--source2", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--pose-from", type=int, required=True)
    sp.add_argument("--frames", type=int, default=8)

    sp = sub.add_parser("eval", help="score a checkpoint on a test dataset")
    common(sp)
    guidance(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--batch-size", type=int, default=25)
    return p


def _apply_config_defaults(parser: _Parser, argv: list[str], args: argparse.Namespace) -> argparse.Namespace:
    """For non-train commands, ``--config`` lines are ``option=value`` defaults; flags win.

    A ``resolved_config.txt`` echo is itself a valid config for its command.
    """
    if args.config is None or args.command == "train":
        return args
    if not args.config.exists():
        raise FileNotFoundError(f"config file not found: {args.config}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    given = {a.dest for a in sub._actions for s in a.option_strings if s in argv}
    for n, line in enumerate(args.config.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if key == "command" and value == args.command:
            continue  # resolved-config echoes start with this line
        dest = key.replace("-", "_")
        if not sep or dest not in actions:
            raise ConfigError(f"{args.config}:{n}: unknown config key {key!r}")
        if dest in given:
            continue
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            setattr(args, dest, value.lower() in ("1", "true", "yes"))
        else:
            conv = action.type or str
            try:
                setattr(args, dest, conv(value))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{args.config}:{n}: bad value for {key}: {exc}") from None
    missing = [a.option_strings[0] for a in sub._actions if a.required and getattr(args, a.dest) is None]
    if missing:
        raise UsageError(f"missing required options: {', '.join(missing)}")
    return args


def _prepare_out(args) -> Path:
    out = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={args.command}"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "config", "force", "out") or value is None:
            continue
        if isinstance(value, tuple):
            value = "x".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")
    return out


def _require(path: Path, what: str) -> Path:
    if path is not None and not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_ckpt(path: Path):
    _require(path, "checkpoint")
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_model(ema=True), ckpt.schedule()


def _pose_from(args, H: int, W: int) -> torch.Tensor:
    ds_dir = _require(args.data, "dataset directory")
    man = data_mod.read_manifest(_require(ds_dir / data_mod.MANIFEST, "dataset manifest"))
    if not 0 <= args.pose_from < man["count"]:
        raise UsageError(f"--pose-from {args.pose_from} outside dataset of {man['count']} records")
    rec = ds_dir / "records" / f"{args.pose_from:06d}.txt"
    _, spec_b = data_mod._parse_record(_require(rec, "dataset record").read_text())
    heat = data_mod.render_pose_heatmaps(spec_b, H, W, man["sigma"])
    return torch.from_numpy(heat).float()[None]


def _image(path: Path) -> torch.Tensor:
    return torch.from_numpy(read_image(_require(path, "image"))).float()[None]


def _guidance(args) -> GuidanceConfig:
    return GuidanceConfig(args.wp, args.ws)


def cmd_gen_data(args) -> int:
    out = _prepare_out(args)
    h, w = args.size
    data_mod.write_dataset(out, args.seed, args.count, h, w, args.sigma)
    print(f"wrote {args.count} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    import copy

    cfg = copy.deepcopy(PRESETS[args.preset])
    if args.config is not None:
        cfg = load_config(_require(args.config, "config file"))
    cfg.seed = args.seed
    if args.steps is not None:
        cfg.total_steps = args.steps
    if args.sample_every is not None:
        cfg.sample_every = args.sample_every
    dataset = data_mod.PairDataset.load(_require(args.data, "dataset directory"))
    resume = load_checkpoint(args.resume, cfg.model) if args.resume else None
    out = args.out
    if resume is None:
        out = _prepare_out(args)
    else:
        out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.txt").write_text(format_config(cfg))

    callbacks = []
    if cfg.sample_every:
        preview = dataset.batch(np.arange(min(4, len(dataset))))

        def emit(state):
            gen = torch.Generator().manual_seed(cfg.seed)
            imgs = sample(state.ema.eval(), state.schedule, preview["x_p"], preview["x_s"], GuidanceConfig(), gen,
                          cfg.sample_steps)
            rows = [[s.numpy(), y.numpy(), g.numpy()] for s, y, g in zip(preview["x_s"], preview["y_0"], imgs)]
            write_image(out / f"samples_{state.step:07d}.png", make_grid(rows))

        callbacks.append(Callback(cfg.sample_every, emit))
    ckpt = fit(cfg, dataset, callbacks, out_dir=out, resume=resume)
    print(f"trained to step {ckpt.step}; checkpoint at {out / 'last.ckpt'}")
    return 0


def cmd_sample(args) -> int:
    _, model, schedule = _load_ckpt(args.ckpt)
    x_s = _image(args.source)
    x_p = _pose_from(args, x_s.shape[2], x_s.shape[3])
    out = _prepare_out(args)
    gen = torch.Generator().manual_seed(args.seed)
    snaps = []
    y = sample(model, schedule, x_p, x_s, _guidance(args), gen, args.steps, snapshots=snaps)
    write_image(out / "sample.png", y[0].numpy())
    picks = np.linspace(0, len(snaps) - 1, max(2, args.snapshots)).round().astype(int)
    row = [x_s[0].numpy(), x_p[0].amax(0).expand(3, -1, -1).numpy() * 2 - 1]
    row += [snaps[i][1][0].clamp(-1, 1).numpy() for i in picks]
    write_image(out / "grid.png", make_grid([row]))
    print(f"wrote {out / 'sample.png'}")
    return 0


def cmd_edit(args) -> int:
    _, model, schedule = _load_ckpt(args.ckpt)
    y_ref = _image(args.ref)
    x_s = _image(args.source)
    mask = torch.from_numpy(read_mask(_require(args.mask, "mask image"))).float()
    H, W = y_ref.shape[2:]
    if args.pose_from is not None:
        x_p = _pose_from(args, H, W)
    else:
        x_p = torch.zeros(1, data_mod.K, H, W)
    out = _prepare_out(args)
    gen = torch.Generator().manual_seed(args.seed)
    y = edit(model, schedule, x_p, x_s, EditSpec(y_ref, mask), _guidance(args), gen, args.steps)
    write_image(out / "edit.png", y[0].numpy())
    write_image(out / "grid.png", make_grid([[y_ref[0].numpy(), mask.expand(3, -1, -1).numpy() * 2 - 1,
                                              x_s[0].numpy(), y[0].numpy()]]))
    print(f"wrote {out / 'edit.png'}")
    return 0


def cmd_interpolate(args) -> int:
    _, model, schedule = _load_ckpt(args.ckpt)
    s1, s2 = _image(args.source1), _image(args.source2)
    x_p = _pose_from(args, s1.shape[2], s1.shape[3])
    out = _prepare_out(args)
    gen = torch.Generator().manual_seed(args.seed)
    frames = interpolate(model, schedule, x_p, s1, s2, args.frames, gen, _guidance(args), args.steps)
    for i, f in enumerate(frames):
        write_image(out / f"frame_{i:02d}.png", f[0].numpy())
    write_image(out / "grid.png", make_grid([[s1[0].numpy()] + [f[0].numpy() for f in frames] + [s2[0].numpy()]]))
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt, model, schedule = _load_ckpt(args.ckpt)
    dataset = data_mod.PairDataset.load(_require(args.data, "dataset directory"))
    out = _prepare_out(args)
    report = evaluate(model, dataset, _guidance(args), args.seed, args.steps, args.batch_size, args.limit, schedule)
    text = report.to_text()
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    n = min(8, len(dataset))
    imgs = generate_for_pairs(model, schedule, dataset, _guidance(args), args.seed, args.steps, n, n)
    batch = dataset.batch(np.arange(n))
    rows = [[s.numpy(), y.numpy(), g] for s, y, g in zip(batch["x_s"], batch["y_0"], imgs)]
    write_image(out / "samples.png", make_grid(rows))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "interpolate": cmd_interpolate,
    "eval": cmd_eval,
}


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given")
        args = _apply_config_defaults(parser, argv, args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: config parse error: {exc}", file=sys.stderr)
        return 2
    except CheckpointVersionError as exc:
        print(f"error: checkpoint version mismatch: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: bad checkpoint: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
