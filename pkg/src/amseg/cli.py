"""Command line front end.

Subcommands cover the whole workflow: ``synth`` renders a corpus, ``train``
fits one fold, ``cv`` runs the full cross-validation protocol, ``eval``
scores a checkpoint against a manifest, ``predict`` segments a single image,
and ``inspect`` prints the architecture table without training anything.

Exit codes: 0 success; 2 usage or configuration problems; 3 numerical
failure (non-finite values); 4 I/O or checkpoint corruption.

``--precision f64`` builds the model in 64-bit for diagnostics (``inspect``,
exploratory runs); checkpoints are 32-bit only, so a 64-bit training run
refuses to write one. Heavy imports happen inside handlers so ``--threads``
(or AMSEG_THREADS) can pin BLAS pools through the environment before numpy
first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import (CheckpointError, ConfigError, NumericalError, UsageError,
                     ValidationError)

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


# -- run configuration files -----------------------------------------------------


@dataclass
class RunSettings:
    """Everything a training-style run needs, parsed from one config file."""

    model_config: object
    train_config: object
    manifest: Optional[Path]
    out_dir: Path


_MODEL_KEYS = ("encoder", "input_size", "width_multiplier", "attention_heads",
               "out_channels")
_TRAIN_KEYS = ("learning_rate", "batch_size", "epochs", "lr_milestones",
               "lr_decay_factor", "folds", "seed", "threads")
_PATH_KEYS = ("manifest", "out_dir")


def parse_run_config(path) -> RunSettings:
    """Parse a ``key = value`` file with ``#`` comments.

    Unknown keys are rejected with their line number; every value must parse
    and pass the downstream validators before anything runs.
    """
    from .model import ModelConfig
    from .train import TrainConfig

    path = Path(path)
    text = path.read_text(encoding="utf-8")
    values: dict = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if key not in _MODEL_KEYS + _TRAIN_KEYS + _PATH_KEYS:
            raise ConfigError(f"{path}:{number}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{number}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"{path}:{number}: empty value for {key!r}")
        values[key] = (number, value)

    def pick(key, parse, default):
        if key not in values:
            return default
        number, raw_value = values[key]
        try:
            return parse(raw_value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{number}: bad value for {key!r}: {exc}") from exc

    def int_tuple(raw_value: str) -> tuple:
        return tuple(int(v) for v in raw_value.split(",") if v.strip())

    model_config = ModelConfig(
        encoder=pick("encoder", str, "expanding"),
        input_size=pick("input_size", int, 224),
        width_multiplier=pick("width_multiplier", float, 1.0),
        head_count=pick("attention_heads", int, 4),
        out_channels=pick("out_channels", int, 1),
    )
    train_config = TrainConfig(
        learning_rate=pick("learning_rate", float, 3e-4),
        batch_size=pick("batch_size", int, 32),
        epochs=pick("epochs", int, 100),
        lr_milestones=pick("lr_milestones", int_tuple, (25, 180)),
        lr_decay_factor=pick("lr_decay_factor", float, 0.1),
        folds=pick("folds", int, 4),
        seed=pick("seed", int, 0),
        threads=pick("threads", int, 0),
    )
    model_config.validate()
    train_config.validate()
    manifest = pick("manifest", lambda v: (path.parent / v).resolve()
                    if not Path(v).is_absolute() else Path(v), None)
    out_dir = pick("out_dir", lambda v: (path.parent / v).resolve()
                   if not Path(v).is_absolute() else Path(v),
                   (path.parent / "runs").resolve())
    return RunSettings(model_config=model_config, train_config=train_config,
                       manifest=manifest, out_dir=out_dir)


def _apply_threads(count: int) -> None:
    if count > 0:
        for var in _THREAD_VARS:
            os.environ[var] = str(count)


def _require_manifest(settings: RunSettings) -> Path:
    if settings.manifest is None:
        raise ConfigError("the config file must set 'manifest = <path>'")
    return settings.manifest


# -- handlers ---------------------------------------------------------------------


def _cmd_synth(args) -> None:
    from .data import SyntheticSpec, write_synthetic_dataset
    spec = SyntheticSpec(image_size=args.size, seed=args.seed)
    manifest = write_synthetic_dataset(args.out, spec, args.count)
    print(f"manifest={manifest}")
    print(f"samples={args.count} size={args.size} seed={args.seed}")


def _dtype_of(args):
    import numpy as np
    return np.float64 if getattr(args, "precision", "f32") == "f64" else np.float32


def _cmd_train(args) -> None:
    settings = parse_run_config(args.config)
    from .data import kfold_split, load_manifest
    from .train import fit, load_dataset, save_checkpoint
    from .model import SegModel

    manifest = load_manifest(_require_manifest(settings))
    folds = kfold_split(manifest, settings.train_config.folds,
                        settings.train_config.seed)
    if not 0 <= args.fold < len(folds):
        raise ConfigError(f"--fold must lie in [0, {len(folds) - 1}], got {args.fold}")
    train_idx, val_idx = folds[args.fold]
    size = settings.model_config.input_size
    model = SegModel(settings.model_config,
                     seed=settings.train_config.seed + args.fold,
                     dtype=_dtype_of(args))
    out_dir = settings.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / f"fold{args.fold}_best.ckpt"
    result = fit(model, load_dataset(manifest, train_idx, size=size),
                 load_dataset(manifest, val_idx, size=size),
                 settings.train_config, checkpoint_path=best_path, log=print)
    final_path = out_dir / f"fold{args.fold}_final.ckpt"
    save_checkpoint(final_path, model, epoch=settings.train_config.epochs - 1)
    print(f"best_epoch={result.best_epoch} best_val_dice={result.best_val_dice:.4f}")
    print(f"checkpoint_best={best_path}")
    print(f"checkpoint_final={final_path}")


def _cmd_cv(args) -> None:
    settings = parse_run_config(args.config)
    from .data import load_manifest
    from .train import cross_validate

    manifest = load_manifest(_require_manifest(settings))
    settings.out_dir.mkdir(parents=True, exist_ok=True)
    report = cross_validate(manifest, settings.model_config,
                            settings.train_config, out_dir=settings.out_dir,
                            dtype=_dtype_of(args), log=print)
    text = report.render()
    print(text)
    report_path = settings.out_dir / "cv_report.txt"
    report_path.write_text(text + "\n", encoding="utf-8")
    json_path = settings.out_dir / "cv_report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                         encoding="utf-8")
    print(f"report={report_path}")
    print(f"report_json={json_path}")


def _cmd_eval(args) -> None:
    from .data import load_manifest
    from .train import evaluate, load_dataset, load_model

    model, checkpoint = load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    dataset = load_dataset(manifest, size=model.config.input_size)
    metrics = evaluate(model, dataset, batch_size=args.batch)
    total, _ = model.count_params()
    print(f"samples={len(dataset)}")
    print(f"params_total={total}")
    for name, value in metrics.items():
        print(f"{name}={value:.4f}")


def _cmd_predict(args) -> None:
    import numpy as np
    from PIL import Image
    from .data import SampleRecord, load_pair
    from .tensor import Tensor, no_record
    from .train import load_model

    model, _ = load_model(args.checkpoint)
    size = model.config.input_size
    record = SampleRecord(patient_id="query", image_path=Path(args.image),
                          mask_path=Path(args.mask) if args.mask else Path(args.image))
    image, truth = load_pair(record, size=size)
    with no_record():
        probability = model.forward(Tensor(image[None])).data[0, 0]
    predicted = probability >= 0.5

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((predicted * np.uint8(255)), mode="L").save(out_path)

    gray = np.asarray(np.clip(image[0] * 255.0, 0, 255), dtype=np.uint8)
    base = np.stack([gray] * 3, axis=-1)
    overlay = base.copy()
    overlay[_boundary(predicted)] = (255, 80, 80)
    if args.mask:
        overlay[_boundary(truth[0] > 0.5)] = (80, 220, 80)
    panel = np.concatenate([base, overlay], axis=1)
    overlay_path = out_path.with_name(out_path.stem + "_overlay.png")
    Image.fromarray(panel, mode="RGB").save(overlay_path)
    print(f"mask={out_path}")
    print(f"overlay={overlay_path}")
    print(f"foreground_fraction={predicted.mean():.4f}")


def _boundary(mask) -> "np.ndarray":
    import numpy as np
    m = np.asarray(mask, dtype=bool)
    eroded = m.copy()
    eroded[1:] &= m[:-1]
    eroded[:-1] &= m[1:]
    eroded[:, 1:] &= m[:, :-1]
    eroded[:, :-1] &= m[:, 1:]
    return m & ~eroded


def _cmd_inspect(args) -> None:
    settings = parse_run_config(args.config)
    from dataclasses import replace
    from .model import SegModel

    config = settings.model_config
    if args.encoder:
        config = replace(config, encoder=args.encoder)
        config.validate()
    model = SegModel(config, seed=settings.train_config.seed,
                     dtype=_dtype_of(args))
    trace = model.trace_shapes()
    total, groups = model.count_params()
    if args.json:
        payload = trace.to_dict()
        payload["param_groups"] = groups
        print(json.dumps(payload, indent=2))
        return
    print(trace.render())
    for name, value in groups.items():
        print(f"params.{name}={value}")
    print(f"params.total={total}")


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amseg",
        description="Train, evaluate, and inspect the segmentation network.")
    parser.add_argument("--threads", type=int, default=0,
                        help="pin BLAS thread pools (0 leaves them untouched)")
    parser.add_argument("--precision", choices=("f32", "f64"), default="f32",
                        help="model element precision; f64 is the diagnostic "
                             "mode (checkpoints are f32-only)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image extent in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("train", help="fit one cross-validation fold")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("cv", help="run the full cross-validation protocol")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=_cmd_cv)

    p = sub.add_parser("eval", help="score a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("predict", help="segment a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--mask", help="reference mask to draw on the overlay")
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("inspect", help="print the architecture table")
    p.add_argument("--config", required=True)
    p.add_argument("--encoder", choices=("expanding", "ccb"),
                   help="override the configured encoder")
    p.add_argument("--json", action="store_true",
                   help="emit the trace as JSON instead of a table")
    p.set_defaults(handler=_cmd_inspect)
    return parser


def _peek_threads(config_path: str) -> int:
    """Read only the ``threads`` key from a config file, without numpy."""
    try:
        for raw in Path(config_path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if line.startswith("threads") and "=" in line:
                key, _, value = line.partition("=")
                if key.strip() == "threads":
                    return int(value.split("#", 1)[0].strip())
    except (OSError, ValueError):
        pass  # the handler reports these properly
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads or int(os.environ.get("AMSEG_THREADS", "0") or "0")
    if not threads and getattr(args, "config", None):
        threads = _peek_threads(args.config)
    _apply_threads(threads)
    try:
        args.handler(args)
    except (ConfigError, ValidationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
