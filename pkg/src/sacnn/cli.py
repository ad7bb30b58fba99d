"""Command-line entry point: ``sacnn {synth,gen-density,train,eval,gradcheck}``.

Exit codes: 0 ok, 2 configuration error, 3 data or I/O error, 4 numeric
failure during training, 5 verification failure.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (keys
are flag names with or without leading dashes). Precedence is defaults <
config file < command-line flags.
"""
from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from pathlib import Path

from . import verify
from .checkpoint import load_checkpoint, save_checkpoint
from .data_io import load_dataset, synth_generate, write_dataset
from .density import DEFAULT_SIGMA, downsample_sum, render_density, write_pgm16
from .errors import ConfigError, DataError, ShapeError, TrainingDiverged
from .evaluation import evaluate, write_report
from .model import PRESETS, VARIANTS, ModelConfig
from .training import COUNT_LOSSES, TrainConfig, train, write_loss_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5


class VerificationFailed(Exception):
    pass


def fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return str(value).lower()
    if isinstance(value, float):
        return re.sub(r"e([+-])0*(\d)", lambda m: "e" + ("-" if m.group(1) == "-" else "") + m.group(2), repr(value))
    if isinstance(value, (tuple, list)):
        return ",".join(fmt(v) for v in value)
    return str(value)


def print_config(args: argparse.Namespace, first: tuple[str, ...] = ()) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("func", "command", "config")}
    keys = [k for k in first if k in items] + sorted(k for k in items if k not in first)
    print(" ".join(f"{k}={fmt(items[k])}" for k in keys), flush=True)


def int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    try:
        return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.min_count > args.max_count:
        raise ConfigError(f"--min-count {args.min_count} exceeds --max-count {args.max_count}")
    if args.n < 1 or args.size < 16:
        raise ConfigError("--n must be >= 1 and --size >= 16")
    if args.max_count > args.size * args.size // 64:
        raise ConfigError(f"--max-count must be <= size^2/64 = {args.size * args.size // 64}")
    print_config(args)
    ds = synth_generate(args.seed, args.n, args.size, args.size, (args.min_count, args.max_count))
    manifest = write_dataset(ds, args.out, force=args.force)
    print(f"wrote {len(ds)} images to {manifest}")
    return EXIT_OK


def cmd_gen_density(args) -> int:
    if not args.sigma > 0:
        raise ConfigError(f"--sigma must be positive, got {args.sigma}")
    if args.factor < 1:
        raise ConfigError(f"--factor must be >= 1, got {args.factor}")
    print_config(args)
    ds = load_dataset(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in ds:
        H, W = rec.shape
        dmap = render_density(rec.heads, H, W, args.sigma)
        if args.factor > 1:
            dmap = downsample_sum(dmap, args.factor)
        write_pgm16(out / f"{rec.id}.pgm", dmap.grid)
        rows.append((rec.id, dmap.integral, rec.count))
    with open(out / "density.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "integral", "head_count"])
        for rec_id, integral, count in rows:
            w.writerow([rec_id, repr(integral), count])
    print(f"wrote {len(rows)} density maps to {out}")
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    return ModelConfig.preset(args.variant, args.preset, init=getattr(args, "init", "gaussian"),
                              init_std=getattr(args, "init_std", 0.01))


def cmd_train(args) -> int:
    model_cfg = _model_config(args)
    train_cfg = TrainConfig(
        lr_start=args.lr,
        lr_end=args.lr_end,
        lr_milestones=args.milestones,
        momentum=args.momentum,
        epochs=args.epochs,
        density_weight=args.density_weight,
        count_weight=args.count_weight,
        count_loss=args.count_loss,
        convergence_window=args.convergence_window,
        convergence_threshold=args.convergence_threshold if args.convergence_threshold >= 0 else None,
        phase1_max_epochs=args.phase1_max_epochs,
        augment=not args.no_augment,
        sigma=args.sigma,
        seed=args.seed,
    )
    print_config(args, first=("epochs", "lr", "momentum", "count_weight"))
    ds = load_dataset(args.manifest)
    ckpt_dir = Path(args.ckpt_dir) if args.ckpt_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_epoch_end(epoch, model):
        if ckpt_dir and args.ckpt_every > 0 and (epoch + 1) % args.ckpt_every == 0:
            save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:04d}.sacn", model)

    result = train(ds, model_cfg, train_cfg, on_epoch_end=on_epoch_end)
    if args.loss_csv:
        write_loss_csv(args.loss_csv, result.history)
    if ckpt_dir:
        save_checkpoint(ckpt_dir / "final.sacn", result.model)
    last = result.history[-1] if result.history else None
    print(f"trained {len(result.history)} iterations; phase 2 from epoch {result.switch_epoch}; "
          f"last L_D={last.density_loss if last else float('nan'):.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    print_config(args)
    ds = load_dataset(args.manifest)
    model = load_checkpoint(args.ckpt, _model_config(args))
    report = evaluate(model, ds)
    if args.report:
        report_path = Path(args.report)
        write_report(report, report_path, report_path.with_suffix(".json"))
    print(f"MAE={report.mae:.6g} MSE={report.mse:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    print_config(args)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    results = verify.run_all(variants, args.preset, args.seed, corrupt=args.corrupt)
    offenders = []
    for kind, err in results.items():
        ok = err < verify.TOLERANCE
        print(f"{kind:<24} worst_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            offenders.append(kind)
    if offenders:
        raise VerificationFailed("gradient check exceeded 1e-4 for: " + ", ".join(offenders))
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sacnn", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, epilog=None):
        p = sub.add_parser(name, help=help_, description=help_, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key = value file merged under command-line flags")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic crowd dataset",
            "outputs: OUT/manifest.jsonl and OUT/images/<id>.pgm (8-bit)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=5, help="number of images")
    p.add_argument("--size", type=int, default=64, help="image height and width")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-count", type=int, default=15)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing manifest")

    p = add("gen-density", cmd_gen_density, "render ground-truth density maps",
            "outputs: OUT/<id>.pgm (16-bit, scale in header comment) and OUT/density.csv (id, integral, head_count)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--factor", type=int, default=8, help="block-sum downsampling factor (1 = none)")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "two-phase training (density loss, then joint loss)",
            "outputs: --loss-csv (epoch, iteration, phase, L_D, L_Y, joint, lr); "
            "CKPT_DIR/final.sacn and CKPT_DIR/epoch_NNNN.sacn every --ckpt-every epochs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="scale-adaptive")
    p.add_argument("--preset", choices=tuple(PRESETS), default="full")
    p.add_argument("--init", choices=("gaussian", "he"), default="gaussian")
    p.add_argument("--init-std", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--lr", type=float, default=1e-6)
    p.add_argument("--lr-end", type=float, default=1e-8)
    p.add_argument("--milestones", type=int_list, default=(100, 200), help="comma-separated epochs")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--density-weight", type=float, default=1.0)
    p.add_argument("--count-weight", type=float, default=0.1)
    p.add_argument("--count-loss", choices=COUNT_LOSSES, default="relative")
    p.add_argument("--convergence-window", type=int, default=5)
    p.add_argument("--convergence-threshold", type=float, default=0.01, help="negative disables")
    p.add_argument("--phase1-max-epochs", type=int, default=None)
    p.add_argument("--no-augment", action="store_true", help="train on whole images instead of 9 patches each")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt-dir")
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--loss-csv")

    p = add("eval", cmd_eval, "evaluate a checkpoint (MAE / MSE)",
            "outputs: --report CSV (id, F, Y, abs_error, crop, dropped heads, summary line) and a .json summary beside it")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="scale-adaptive")
    p.add_argument("--preset", choices=tuple(PRESETS), default="full")
    p.add_argument("--report")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks (exit 5 on failure)")
    p.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    p.add_argument("--preset", choices=tuple(PRESETS), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", choices=("conv", "maxpool", "deconv", "relu", "concat"), help=argparse.SUPPRESS)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def read_config_file(path: str, sub: argparse.ArgumentParser) -> dict:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"{path}:{lineno}: unknown option {key!r}")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            values[dest] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
        values[dest] = value
        if action.required:
            action.required = False
    return values


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        config = _config_path(argv)
        command = next((tok for tok in argv if not tok.startswith("-")), None)
        if config and command is not None:
            try:
                sub = _subparser(parser, command)
            except KeyError:
                sub = None
            if sub is not None:
                sub.set_defaults(**read_config_file(config, sub))
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
