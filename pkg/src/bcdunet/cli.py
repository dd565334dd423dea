"""Command-line entry point: train, eval, predict, gradcheck, preprocess, synth.

Exit codes: 0 success, 1 usage or input error, 2 numerical abort.
Every run writes its fully resolved configuration next to its outputs, and
can be reproduced from that file alone via ``--config``.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data, gradcheck, metrics
from .model import PRESETS, Model, ModelConfig, BuildError, config_from_meta, load_model
from .nn import load_checkpoint
from .tensor import ShapeError, Tensor, UsageError, save_bt1
from .train import DivergenceError, TrainConfig, evaluate, fit, predict as model_predict

OUTDIR_ENV = "BCDUNET_OUTDIR"


class CliError(Exception):
    """Usage or input problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{message}\n{self.format_usage()}")


def _read_config_file(path: Path) -> dict[str, str]:
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    values = {}
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{line_no}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def _resolve(args: argparse.Namespace, parser: _Parser, command: str) -> dict[str, str]:
    """Merge defaults < config file < explicit flags; return resolved strings."""
    merged = {k: v for k, v in vars(args).items() if k not in ("config", "func")}
    if args.config:
        file_vals = _read_config_file(Path(args.config))
        file_cmd = file_vals.pop("command", command)
        if file_cmd != command:
            raise CliError(f"config file is for command {file_cmd!r}, not {command!r}")
        for k, v in file_vals.items():
            key = k.replace("-", "_")
            if key not in merged:
                raise CliError(f"unknown key in config file: {k}")
            if getattr(args, key) is None:  # flag absent: file value wins
                merged[key] = v
    resolved = {"command": command}
    for k, v in merged.items():
        if isinstance(v, list):
            if v:
                resolved[k] = " ".join(str(x) for x in v)
        elif v is not None:
            resolved[k] = str(v)
    return resolved


def _write_resolved(outdir: Path, resolved: dict[str, str]) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "run-config.txt", "w") as f:
        for k, v in resolved.items():
            f.write(f"{k.replace('_', '-')}={v}\n")


def _outdir(resolved: dict[str, str]) -> Path:
    return Path(resolved.get("out") or os.environ.get(OUTDIR_ENV, "."))


def _get(resolved: dict[str, str], key: str, cast, default):
    if key in resolved:
        v = resolved[key]
        if cast is bool:
            return v.lower() in ("1", "true", "yes")
        return cast(v)
    return default


def _model_config(resolved: dict[str, str]) -> ModelConfig:
    preset = PRESETS[_get(resolved, "preset", str, "desk")]
    size = _get(resolved, "size", int, None)
    return ModelConfig(
        base_filters=_get(resolved, "base", int, preset.base_filters),
        depth=_get(resolved, "depth", int, preset.depth),
        dense_blocks=_get(resolved, "d", int, preset.dense_blocks),
        input_channels=1,
        input_size=(size, size) if size else preset.input_size,
        seed=_get(resolved, "seed", int, 0),
        dtype=_get(resolved, "dtype", str, "float32"),
    )


def _load_sets(resolved: dict[str, str], dtype, want: str = "train"):
    """Dataset spec: 'synth:discs', 'synth:vessels', or a manifest path."""
    spec = resolved.get("data")
    if not spec:
        raise CliError("--data is required (synth:discs, synth:vessels, or a manifest path)")
    seed = _get(resolved, "seed", int, 0)
    if spec.startswith("synth:"):
        kind = spec.split(":", 1)[1]
        n = _get(resolved, "n_images", int, 8)
        size = _model_config(resolved).input_size
        pairs = data.synth_dataset(kind, n, size, seed + 7)
        if want == "test":
            return data.to_sample_set(pairs, dtype)
        n_val = max(1, n // 4)
        return (data.to_sample_set(pairs[:-n_val], dtype),
                data.to_sample_set(pairs[-n_val:], dtype))
    manifest = Path(spec)
    if not manifest.exists():
        raise CliError(f"manifest not found: {manifest}")
    if want == "test":
        pairs = data.load_manifest_pairs(manifest, split="test") or data.load_manifest_pairs(manifest)
        if not pairs:
            raise CliError(f"manifest has no usable entries: {manifest}")
        return data.to_sample_set(pairs, dtype)
    train_pairs = data.load_manifest_pairs(manifest, split="train")
    val_pairs = data.load_manifest_pairs(manifest, split="val")
    if not train_pairs or not val_pairs:
        raise CliError(f"manifest needs both train and val entries: {manifest}")
    return data.to_sample_set(train_pairs, dtype), data.to_sample_set(val_pairs, dtype)


# ---- commands ----

def cmd_train(args, parser) -> int:
    resolved = _resolve(args, parser, "train")
    outdir = _outdir(resolved)
    mc = _model_config(resolved)
    tc = TrainConfig(
        learning_rate=_get(resolved, "lr", float, 1e-4),
        batch_size=_get(resolved, "batch_size", int, 2),
        max_epochs=_get(resolved, "epochs", int, 20),
        patience=_get(resolved, "patience", int, 10),
        optimizer=_get(resolved, "optimizer", str, "adam"),
        seed=_get(resolved, "seed", int, 0),
    )
    dtype = np.dtype(mc.dtype)
    train_set, val_set = _load_sets(resolved, dtype)
    _write_resolved(outdir, resolved)
    model = Model(mc)
    print(f"model parameters: {model.count_params()}")
    log = fit(model, train_set, val_set, tc)
    log.write(outdir / "trainlog.txt")
    model.save_checkpoint(outdir / "best.ckpt")
    print(f"stopped at epoch {log.stopped_epoch}, best val loss {log.best_val_loss:.6f} "
          f"(epoch {log.best_epoch}), wall {log.wall_time_s:.1f}s")
    return 0


def cmd_eval(args, parser) -> int:
    resolved = _resolve(args, parser, "eval")
    outdir = _outdir(resolved)
    ckpt = resolved.get("checkpoint")
    if not ckpt or not Path(ckpt).exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    meta, arrays = load_checkpoint(ckpt)
    mc = config_from_meta(meta)
    model = Model(mc)
    model.load_state_arrays(arrays)
    test_set = _load_sets(resolved, np.dtype(mc.dtype), want="test")
    _write_resolved(outdir, resolved)
    threshold = _get(resolved, "threshold", float, 0.5)
    preds = model_predict(model, test_set.images)
    report = metrics.full_report(preds, test_set.masks.astype(np.uint8), threshold)
    (outdir / "metrics.txt").write_text(metrics.format_report(report) + "\n")
    metrics.write_roc(outdir / "roc.txt", report.roc)
    print(metrics.format_report(report))
    return 0


def cmd_predict(args, parser) -> int:
    resolved = _resolve(args, parser, "predict")
    outdir = _outdir(resolved)
    ckpt = resolved.get("checkpoint")
    if not ckpt or not Path(ckpt).exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    model = load_model(ckpt)
    image_paths = resolved.get("images", "").split()
    if not image_paths:
        raise CliError("predict needs at least one PGM image path")
    threshold = _get(resolved, "threshold", float, 0.5)
    _write_resolved(outdir, resolved)
    for path in image_paths:
        img = data.load_pgm(path).astype(model.config.dtype) / 255.0
        prob = model_predict(model, img[None, None])[0, 0]
        stem = Path(path).stem
        save_bt1(outdir / f"{stem}.prob.bt1", prob)
        data.save_mask_pgm(outdir / f"{stem}.mask.pgm", prob >= threshold)
        print(f"{path}: wrote {stem}.prob.bt1 and {stem}.mask.pgm")
    return 0


def cmd_gradcheck(args, parser) -> int:
    resolved = _resolve(args, parser, "gradcheck")
    tolerance = _get(resolved, "tolerance", float, gradcheck.DEFAULT_TOLERANCE)
    eps = _get(resolved, "eps", float, None)
    t0 = time.perf_counter()
    results = gradcheck.run_suite(tolerance, eps)
    ok = True
    for r in results:
        status = "pass" if r.passed(tolerance) else "FAIL"
        ok &= r.passed(tolerance)
        print(f"{status}  {r.name}: max rel error {r.max_error:.3e} (worst: {r.worst_param})")
    print(f"gradcheck finished in {time.perf_counter() - t0:.1f}s, tolerance {tolerance:g}")
    return 0 if ok else 1


def cmd_preprocess_lung(args, parser) -> int:
    resolved = _resolve(args, parser, "preprocess-lung")
    outdir = _outdir(resolved)
    manifest = resolved.get("manifest")
    if not manifest or not Path(manifest).exists():
        raise CliError(f"manifest not found: {manifest}")
    pairs = data.load_manifest_pairs(manifest)
    if not pairs:
        raise CliError(f"manifest is empty: {manifest}")
    _write_resolved(outdir, resolved)
    summary = []
    for pair in pairs:
        # PGM intensities arrive in [0,1]; map back to a CT-like signed range
        ct = pair.image * 2048.0 - 1024.0
        result = data.lung_preprocess(ct, pair.mask)
        if (result.mask.astype(bool) & pair.mask.astype(bool)).any():
            raise CliError(f"internal audit failed: mask overlaps gt for {pair.id}")
        stem = Path(pair.id).stem
        data.save_mask_pgm(outdir / f"{stem}.surrounding.pgm", result.mask)
        summary.append(f"{pair.id} constant={'yes' if result.constant_input else 'no'}")
    (outdir / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def cmd_synth(args, parser) -> int:
    resolved = _resolve(args, parser, "synth")
    outdir = _outdir(resolved)
    kind = _get(resolved, "kind", str, "discs")
    n = _get(resolved, "n_images", int, 8)
    size = _get(resolved, "size", int, 64)
    seed = _get(resolved, "seed", int, 0)
    pairs = data.synth_dataset(kind, n, size, seed)
    _write_resolved(outdir, resolved)
    entries = []
    n_val = max(1, n // 4) if n > 1 else 0
    for i, pair in enumerate(pairs):
        img_name, mask_name = f"{pair.id}.pgm", f"{pair.id}.mask.pgm"
        data.save_pgm(outdir / img_name, pair.image)
        data.save_mask_pgm(outdir / mask_name, pair.mask)
        split = "val" if i >= n - n_val else "train"
        entries.append(data.ManifestEntry(img_name, mask_name, split))
    data.write_manifest(outdir / "manifest.txt", entries)
    print(f"wrote {n} {kind} pairs and manifest.txt to {outdir}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="bcdunet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV} or .)")
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model and write trainlog + checkpoint")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--data", help="synth:discs | synth:vessels | manifest path")
    p.add_argument("--d", type=int, help="dense block count")
    p.add_argument("--base", type=int, help="base filter count")
    p.add_argument("--depth", type=int)
    p.add_argument("--size", type=int, help="square input size")
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--n-images", type=int, help="synthetic dataset size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; write metrics + ROC")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--n-images", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write probability maps and masks for images")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("images", nargs="*", help="PGM image paths")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("preprocess-lung", help="build surrounding-tissue masks")
    common(p)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_preprocess_lung)

    p = sub.add_parser("synth", help="generate a synthetic PGM dataset + manifest")
    common(p)
    p.add_argument("--kind", choices=["discs", "vessels"])
    p.add_argument("--n-images", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, parser)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (UsageError, ShapeError, BuildError, data.PgmParseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
