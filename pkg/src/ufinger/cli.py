"""Command-line entry point: generate | train | denoise | eval | ablate | info.

Every option may also come from ``--config-file``, a text file of
``key = value`` lines whose keys are the long flag names without the leading
dashes. Flags given on the command line win over file values. Each run that
has an output directory writes the resolved options to ``run_config.txt``
there, in the same format.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import degrade, metrics, net, train as trainer
from .checkpoint import load_checkpoint
from .errors import ConfigError, DataError, UFingerError
from .images import list_images, load_image, save_image
from .perf import tune_allocator
from .restore import restore_image

log = logging.getLogger("ufinger")

TABLE_ORDER = ("base", "nopad", "ufinger")
RUN_CONFIG = "run_config.txt"

# options that must be set, by flag or config file
REQUIRED = {
    "generate": ("out",),
    "train": ("data", "out"),
    "denoise": ("checkpoint", "data", "out"),
    "eval": ("data", "truth", "out"),
    "ablate": ("data", "out"),
    "info": ("size",),
}


# --------------------------------------------------------------------------
# parser


def _shared(p: argparse.ArgumentParser, *names: str) -> None:
    if "config" in names:
        p.add_argument("--config", choices=TABLE_ORDER, default="ufinger", help="network preset (default ufinger)")
    if "seed" in names:
        p.add_argument("--seed", type=int, default=0)
    if "out" in names:
        p.add_argument("--out", help="output directory")
    if "data" in names:
        p.add_argument("--data", help="dataset / input directory")
    if "iters" in names:
        p.add_argument("--iters", type=int, default=1000, help="SGD iterations")
    if "patch" in names:
        p.add_argument("--patch", type=int, help="training patch size (default: per-config, 32px output)")
    if "lr" in names:
        p.add_argument("--lr", type=float, default=1e-3)
    if "momentum" in names:
        p.add_argument("--momentum", type=float, default=0.9)
    if "batch" in names:
        p.add_argument("--batch", type=int, default=8)
    p.add_argument("--config-file", help="key = value file; flags override its entries")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ufinger", description="Dilated unpadded encoder-decoder for fingerprint restoration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise clean/degraded pairs")
    _shared(p, "seed", "out")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--ridge-frequency", type=float, default=0.1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one config")
    _shared(p, "config", "seed", "out", "data", "iters", "patch", "lr", "momentum", "batch")
    p.add_argument("--fusion", choices=("concat", "sum"), default="concat")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="restore every image in a directory")
    _shared(p, "out", "data")
    p.add_argument("--checkpoint", help="model file written by train")
    p.add_argument("--no-pad-input", action="store_true", help="skip reflection padding; valid models then shrink the output")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="score restored images against ground truth")
    _shared(p, "config", "out", "data")
    p.add_argument("--truth", help="directory of ground-truth images")
    p.add_argument("--label", help="report label (default: the config's table label)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score base, nopad and ufinger on one dataset")
    _shared(p, "seed", "out", "data", "iters", "patch", "lr", "momentum", "batch")
    p.set_defaults(iters=2000)
    p.add_argument("--target-extent", type=int, default=trainer.DEFAULT_TARGET_EXTENT,
                   help="output extent each config's default patch is sized for")
    p.add_argument("--holdout", type=float, default=0.25, help="fraction of pairs held out for scoring")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("info", help="print the shape trace of a config")
    _shared(p, "config")
    p.add_argument("--size", type=int, help="input height")
    p.add_argument("--width", type=int, help="input width (default: same as --size)")
    p.add_argument("--fusion", choices=("concat", "sum"), default="concat")
    p.set_defaults(func=cmd_info)

    parser.subparsers = sub.choices  # type: ignore[attr-defined]
    return parser


def read_config_file(path: str) -> list[tuple[str, str]]:
    entries = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((key.replace("_", "-"), value))
    return entries


def _file_argv(sub: argparse.ArgumentParser, entries: list[tuple[str, str]], path: str) -> list[str]:
    actions = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                actions[opt[2:]] = action
    argv = []
    for key, value in entries:
        action = actions.get(key)
        if action is None or key in ("config-file", "help"):
            raise ConfigError(f"{path}: unknown key {key!r} for this command")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append("--" + key)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise ConfigError(f"{path}: {key} expects true or false, got {value!r}")
        else:
            argv += ["--" + key, value]
    return argv


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    sub = parser.subparsers[args.command]
    if args.config_file:
        at = argv.index(args.command)
        extra = _file_argv(sub, read_config_file(args.config_file), args.config_file)
        args = parser.parse_args(argv[: at + 1] + extra + argv[at + 1 :])
    missing = [k for k in REQUIRED[args.command] if getattr(args, k.replace("-", "_")) is None]
    if missing:
        sub.error("missing required option(s): " + ", ".join("--" + k for k in missing))
    return args


def write_run_config(args: argparse.Namespace, out_dir: Path) -> None:
    lines = []
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command", "config_file", "verbose") or value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key.replace('_', '-')} = {value}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RUN_CONFIG).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.count < 0 or args.size < 32:
        raise ConfigError("--count must be >= 0 and --size >= 32")
    degrade.build_dataset(args.count, args.size, args.seed, out, ridge_frequency=args.ridge_frequency)
    write_run_config(args, out)
    log.info("wrote %d pairs to %s", args.count, out)
    return 0


def _train_config(args, iterations: int, patch: Optional[int]) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch,
        iterations=iterations,
        seed=args.seed,
        patch_size=patch,
        checkpoint_every=getattr(args, "checkpoint_every", 0),
        log_every=getattr(args, "log_every", 1),
    )


def _load_dataset(data: str) -> list:
    pairs = degrade.load_pairs(data)
    if not pairs:
        raise DataError(f"{data}: no clean_/degraded_ pairs found")
    return pairs


def cmd_train(args) -> int:
    cfg = net.NetworkConfig.preset(args.config, fusion=args.fusion)
    tc = _train_config(args, args.iters, args.patch)
    tc.validate(cfg)  # patch errors surface before any data is read
    pairs = _load_dataset(args.data)
    out = Path(args.out)
    write_run_config(args, out)
    model = net.build(cfg, seed=args.seed)
    _, history = trainer.train(model, pairs, tc, out_dir=out)
    if history:
        log.info("final loss %.6f after %d iterations", history[-1][1], history[-1][0])
    return 0


def _denoise_names(in_dir: Path) -> list[tuple[Path, str]]:
    """(input file, output file name); degraded_* inputs become restored_*."""
    files = list_images(in_dir)
    degraded = [p for p in files if p.name.startswith("degraded_")]
    if degraded:
        return [(p, "restored_" + p.name[len("degraded_"):]) for p in degraded]
    return [(p, p.name) for p in files]


def cmd_denoise(args) -> int:
    in_dir, out = Path(args.data), Path(args.out)
    if not in_dir.is_dir():
        raise DataError(f"{in_dir}: not a directory")
    model = load_checkpoint(args.checkpoint)
    jobs = _denoise_names(in_dir)
    write_run_config(args, out)
    if not jobs:
        print(f"warning: no images in {in_dir}; nothing to do", file=sys.stderr)
        return 0
    for src, name in jobs:
        restored = restore_image(model, load_image(src), pad_input=not args.no_pad_input)
        save_image(restored, out / name)
        log.info("%s -> %s", src.name, name)
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    label = args.label or net.LABELS[args.config]
    report = metrics.evaluate_pairs(args.data, args.truth, label)
    write_run_config(args, out)
    report.write_csv(out / "metrics.csv")
    (out / "report.txt").write_text(metrics.format_table([report]))
    return 0


def _split(pairs: list, holdout: float) -> tuple[list, list]:
    if not 0.0 < holdout < 1.0:
        raise ConfigError("--holdout must lie strictly between 0 and 1")
    if len(pairs) < 2:
        raise DataError("ablation needs at least 2 pairs (one to train on, one held out)")
    n_hold = min(len(pairs) - 1, max(1, int(round(holdout * len(pairs)))))
    return pairs[:-n_hold], pairs[-n_hold:]


def _mean_mse(model: net.Model, pairs: list) -> float:
    return sum(metrics.mse(restore_image(model, d), c) for _, d, c in pairs) / len(pairs)


def cmd_ablate(args) -> int:
    out = Path(args.out)
    pairs = _load_dataset(args.data)
    train_pairs, held = _split(pairs, args.holdout)
    plans = []
    for name in TABLE_ORDER:  # validate every config before spending time on any
        cfg = net.NetworkConfig.preset(name)
        patch = args.patch if args.patch is not None else trainer.default_patch_size(cfg, args.target_extent)
        tc = _train_config(args, args.iters, patch)
        tc.validate(cfg)
        for _, d, _ in train_pairs:
            if min(d.shape) < patch:
                raise DataError(f"{name}: training images of {d.shape} are smaller than the {patch}px patch")
        plans.append((name, cfg, tc))
    write_run_config(args, out)

    reports, sanity = [], {}
    for name, cfg, tc in plans:
        run_dir = out / name
        log.info("%s: training %d iterations on %dpx patches", name, tc.iterations, tc.patch_size)
        model = net.build(cfg, seed=args.seed)
        trainer.train(model, train_pairs, tc, out_dir=run_dir)
        restored_dir = run_dir / "restored"
        restored_dir.mkdir(parents=True, exist_ok=True)
        report = metrics.MetricsReport(cfg.label)
        for pid, degraded, clean in held:
            path = restored_dir / f"restored_{pid}.png"
            save_image(restore_image(model, degraded), path)
            report.add(pid, load_image(path), clean)
        report.write_csv(run_dir / "metrics.csv")
        reports.append(report)
        if name == "ufinger":
            sanity["trained_train_mse"] = _mean_mse(model, train_pairs)
            sanity["untrained_train_mse"] = _mean_mse(net.build(cfg, seed=args.seed), train_pairs)

    header = (
        f"seed {args.seed}; {args.iters} iterations per config; batch {args.batch}; "
        f"{len(train_pairs)} training / {len(held)} held-out pairs"
    )
    table = metrics.format_table(reports, title="Held-out MSE, PSNR and SSIM", header=header)
    (out / "ablation.txt").write_text(table)
    with open(out / "ablation.csv", "w") as fh:
        fh.write("config,label,mse,psnr_db,ssim\n")
        for name, r in zip(TABLE_ORDER, reports):
            fh.write(f"{name},{r.label},{r.mean_mse!r},{r.mean_psnr!r},{r.mean_ssim!r}\n")
    (out / "sanity.txt").write_text("".join(f"{k} = {v!r}\n" for k, v in sanity.items()))
    bad = [r.label for r in reports if not all(math.isfinite(v) for v in (r.mean_mse, r.mean_psnr, r.mean_ssim))]
    if bad:
        print(f"warning: non-finite metrics for {', '.join(bad)}", file=sys.stderr)
    return 0


def cmd_info(args) -> int:
    cfg = net.NetworkConfig.preset(args.config, fusion=args.fusion)
    trace = net.trace_shapes(cfg, args.size, args.width)
    model = net.build(cfg, seed=0)
    print(f"{cfg.label} (padding={cfg.padding_mode}, dilation={cfg.dilation}, fusion={cfg.fusion})")
    print(trace.format())
    print(f"min input size: {trace.min_input}")
    print(f"parameters: {model.parameter_count()}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    tune_allocator()
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UFingerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
