"""Command-line entry point: ``fped <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig, load_config, parse_config_text
from .datagen import ConfigurationError, export_csv, generate_dataset, load_dataset, save_dataset
from .interpret import build_report, write_report
from .stroute import (Stage2Config, Stage2Model, brain_tokens, fit_stage2, generate_image, load_stage2,
                      render_target_image, save_stage2, write_pgm)
from .trainer import (TrainingError, ablate, evaluate, load_checkpoint, train, write_csv, write_outputs)

logger = logging.getLogger("fped")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class OverwriteError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fped", description="Prior-guided mixture-of-experts brain decoding toolkit.")
    parser.add_argument("--version", action="version", version=f"fped {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-train", type=int, default=1024)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--v-total", type=int, default=20000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--noise", type=float, default=2.0)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--csv", help="optional per-sample CSV summary")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    def with_config(p, need_out=True):
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--data", help="dataset file (overrides config 'data')")
        if need_out:
            p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                       metavar="KEY=VALUE", help="override any config field")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    with_config(sub.add_parser("train", help="train an encoder and diffusion prior"))

    p = sub.add_parser("eval", help="embedding metrics for one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="metrics CSV to write")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("ablate", help="train every ablation mode at a matched budget")
    with_config(p)
    p.add_argument("--modes", default="moe,onlyv,uniform,attention,transformer")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")

    p = sub.add_parser("interpret", help="expert heatmaps and routing contributions for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--by", choices=("weight", "count"), default="weight")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("gen-image", help="toy 16x16 image generation from brain tokens")
    p.add_argument("--ckpt", required=True, help="trained encoder checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stage2", help="existing stage-2 checkpoint; trained on the fly when omitted")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--n-pairs", type=int, default=32)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("validate-config", help="parse and validate a config file")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                   metavar="KEY=VALUE")
    return parser


# --------------------------------------------------------------------------
# helpers


def _guard(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise OverwriteError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, *, config: TrainConfig | None = None, seed=None, outputs=(),
                   extra: dict | None = None) -> Path:
    lines = {
        "command": command,
        "fped_version": __version__,
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "torch_version": torch.__version__,
    }
    if config is not None:
        lines["config_hash"] = config.digest()
        seed = config.seed if seed is None else seed
    if seed is not None:
        lines["seed"] = str(seed)
    lines.update({k: str(v) for k, v in (extra or {}).items()})
    for i, out in enumerate(outputs):
        lines[f"output_{i}"] = str(out)
    text = "".join(f"{k} = {v}\n" for k, v in lines.items())
    Path(path).write_text(text)
    return Path(path)


def _config_from_args(args) -> TrainConfig:
    overrides = dict(args.overrides)
    for name in ("data", "out", "epochs", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return load_config(args.config, overrides)


def _need(value, what: str) -> str:
    if not value:
        raise UsageError(f"no {what} given (set it in the config or on the command line)")
    return value


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    out = Path(args.out)
    manifest = out.with_name(out.name + ".manifest")
    targets = [out, manifest] + ([Path(args.csv)] if args.csv else [])
    _guard(targets, args.force)
    ds = generate_dataset(args.seed, args.n_train, args.n_val, args.n_test, args.v_total, args.dim,
                          grid=args.grid, n_repeats=args.repeats, noise=args.noise)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    outputs = [out]
    if args.csv:
        export_csv(ds, args.csv)
        outputs.append(Path(args.csv))
    write_manifest(manifest, "gen-data", seed=args.seed, outputs=outputs,
                   extra={"sha256": _file_hash(out), "noise": args.noise})
    print(out)


def cmd_train(args) -> None:
    config = _config_from_args(args)
    data, out = _need(config.data, "dataset"), Path(_need(config.out, "output directory"))
    names = ("model.ckpt", "losses.csv", "monitor.csv", "router.csv", "config.cfg", "manifest.txt")
    _guard([out / n for n in names], args.force)
    result = train(config, load_dataset(data), progress=args.verbose)
    paths = write_outputs(result, out)
    (out / "config.cfg").write_text(config.dumps())
    write_manifest(out / "manifest.txt", "train", config=config,
                   outputs=[*paths.values(), out / "config.cfg"], extra={"seconds": round(result.seconds, 3)})
    print(paths["checkpoint"])


def cmd_eval(args) -> None:
    if args.out:
        _guard([args.out, args.out + ".manifest"], args.force)
    config, model, assembler = load_checkpoint(args.ckpt)
    if assembler is None:
        raise CheckpointError(f"{args.ckpt} carries no preprocessing state")
    metrics = evaluate(model, assembler, load_dataset(args.data), args.split)
    row = {"split": args.split, **metrics}
    for key, value in row.items():
        print(f"{key} = {value}")
    if args.out:
        write_csv(args.out, [row])
        write_manifest(args.out + ".manifest", "eval", config=config, outputs=[args.out],
                       extra={"checkpoint": args.ckpt, "checkpoint_sha256": _file_hash(args.ckpt)})


def cmd_ablate(args) -> None:
    config = _config_from_args(args)
    data, out = _need(config.data, "dataset"), Path(_need(config.out, "output directory"))
    _guard([out / "ablation.csv", out / "manifest.txt"], args.force)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    for mode in modes:
        config.with_overrides(mode=mode)
    rows = ablate(config, load_dataset(data), modes, seeds, progress=args.verbose)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", rows)
    write_manifest(out / "manifest.txt", "ablate", config=config, outputs=[out / "ablation.csv"],
                   extra={"modes": ",".join(modes), "seeds": ",".join(map(str, seeds or [config.seed]))})
    for r in rows:
        print(f"{r['mode']}\tseed={r['seed']}\ttwo_way={r['two_way']:.4f}")


def _sample(ds, sample_id: int) -> int:
    hits = np.flatnonzero(ds.ids == sample_id)
    if len(hits) == 0:
        raise ValueError(f"sample id {sample_id} is not in the dataset")
    return int(hits[0])


def cmd_interpret(args) -> None:
    config, model, assembler = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    i = _sample(ds, args.sample_id)
    out = Path(args.out_dir)
    names = [f"expert_{k}_heatmap.{ext}" for k in range(1, 8) for ext in ("csv", "pgm")]
    names += ["routing_contrib_text.csv", "routing_contrib_image.csv", "manifest.txt"]
    _guard([out / n for n in names], args.force)
    x = assembler.transform(ds.voxels[i:i + 1])
    report = build_report(model, x[0], ds.patches[i], sample_id=args.sample_id, by=args.by)
    paths = write_report(report, out)
    write_manifest(out / "manifest.txt", "interpret", config=config, outputs=paths,
                   extra={"checkpoint": args.ckpt, "sample_id": args.sample_id})
    for modality, vec in report.contributions.items():
        print(modality, " ".join(f"{v:.4f}" for v in vec))


def cmd_gen_image(args) -> None:
    config, model, assembler = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    out = Path(args.out_dir)
    names = ["image.pgm", "target.pgm", "manifest.txt"]
    if not args.stage2:
        names += ["stage2.ckpt", "stage2_losses.csv"]
    _guard([out / n for n in names], args.force)
    outputs = []
    if args.stage2:
        stage2 = load_stage2(args.stage2)
        stage2_path = Path(args.stage2)
    else:
        train_ds = ds.subset("train")
        n = min(args.n_pairs, len(train_ds))
        coarse, fine = brain_tokens(model, assembler.transform(train_ds.voxels[:n]))
        stage2 = Stage2Model(Stage2Config(brain_dim=coarse.shape[-1], seed=config.seed))
        history = fit_stage2(stage2, coarse, fine, render_target_image(train_ds.image[:n]), epochs=args.epochs,
                             seed=config.seed)
        out.mkdir(parents=True, exist_ok=True)
        stage2_path = out / "stage2.ckpt"
        save_stage2(stage2_path, stage2)
        write_csv(out / "stage2_losses.csv", [{"epoch": e, "loss": v} for e, v in enumerate(history)])
        outputs += [stage2_path, out / "stage2_losses.csv"]
    i = _sample(ds, args.sample_id)
    coarse, fine = brain_tokens(model, assembler.transform(ds.voxels[i:i + 1]))
    image = generate_image(stage2, coarse[0], fine[0], seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "image.pgm", image)
    write_pgm(out / "target.pgm", render_target_image(ds.image[i]))
    outputs += [out / "image.pgm", out / "target.pgm"]
    write_manifest(out / "manifest.txt", "gen-image", config=config, seed=args.seed, outputs=outputs,
                   extra={"checkpoint": args.ckpt, "stage2": stage2_path, "sample_id": args.sample_id})
    print(out / "image.pgm")


def cmd_validate_config(args) -> None:
    config = parse_config_text(Path(args.config).read_text(), dict(args.overrides))
    print(f"ok {config.digest()}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "interpret": cmd_interpret,
    "gen-image": cmd_gen_image,
    "validate-config": cmd_validate_config,
}

RUNTIME_ERRORS = (ConfigError, ConfigurationError, CheckpointError, TrainingError, OverwriteError,
                  OSError, ValueError, FloatingPointError, RuntimeError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fped: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"fped: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
