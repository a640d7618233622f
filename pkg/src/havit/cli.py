"""Command-line entry point: train, eval, sweep, gradcheck, export-attn.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from havit import tensor as T
from havit.attention import EVAL_STREAM, BlendConfig
from havit.config import RunSpec, describe_keys, parse_value
from havit.data import (
    Dataset,
    compute_stats,
    default_patch_size,
    load_cifar100,
    normalize,
    synthetic_dataset,
)
from havit.errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    NumericalError,
)
from havit.gradcheck import gradient_report
from havit.model import HAViT, ModelConfig, extract_cls_attention, forward, parameter_count
from havit.trainer import (
    ModelFactory,
    TrainConfig,
    alpha_sweep,
    evaluate,
    fit,
    render_sweep_table,
    sweep_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("havit")


# -- run spec -> objects -----------------------------------------------------

def load_data(spec: RunSpec) -> tuple[Dataset, Dataset]:
    if spec["data.name"] == "cifar100":
        path = spec["data.path"]
        if not path:
            raise ConfigurationError("--data cifar100 needs --data-path")
        if not Path(path).exists():
            raise ConfigurationError(f"CIFAR-100 path does not exist: {path}")
        return load_cifar100(path, "train"), load_cifar100(path, "test")
    size = spec["data.image_size"]
    k = spec["data.num_classes"]
    train = synthetic_dataset(k, spec["data.samples_per_class"], size, size, spec["data.seed"])
    held_out = synthetic_dataset(k, spec["data.eval_samples_per_class"], size, size, spec["data.seed"] + 1)
    return train, held_out


def model_config(spec: RunSpec, image_shape=None, num_classes: int | None = None) -> ModelConfig:
    C, H, W = image_shape if image_shape is not None else (3, spec["data.image_size"], spec["data.image_size"])
    H = spec["model.image_height"] or H
    W = spec["model.image_width"] or W
    P = spec["model.patch_size"] or default_patch_size(H, W)
    return ModelConfig(
        image_height=H, image_width=W, channels=C, patch_size=P,
        d_model=spec["model.d_model"], num_heads=spec["model.num_heads"], depth=spec["model.depth"],
        mlp_ratio=spec["model.mlp_ratio"],
        num_classes=spec["model.num_classes"] or num_classes or 1,
        blend=BlendConfig(spec["model.alpha"], spec["model.init"], spec["train.seed"],
                          spec["model.detach_history"]),
        baseline_mode=spec["model.baseline"], init_std=spec["model.init_std"],
    )


def train_config(spec: RunSpec) -> TrainConfig:
    return TrainConfig(
        epochs=spec["train.epochs"], base_lr=spec["train.base_lr"],
        weight_decay=spec["train.weight_decay"], batch_size=spec["train.batch_size"],
        warmup_epochs=spec["train.warmup_epochs"], label_smoothing=spec["train.label_smoothing"],
        seed=spec["train.seed"], alpha_grid=spec["train.alpha_grid"], max_steps=spec["train.max_steps"],
    )


def _out_dir(spec: RunSpec) -> Path:
    out = Path(spec["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(spec.to_text())
    return out


def _load_checkpoint(args) -> HAViT:
    if not args.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    try:
        return HAViT.load(args.checkpoint)
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint {args.checkpoint}: {exc}") from None


def _check_compatible(model: HAViT, ds: Dataset) -> None:
    c = model.config
    if ds.image_shape != (c.channels, c.image_height, c.image_width) or ds.num_classes != c.num_classes:
        raise ConfigurationError(
            f"checkpoint expects {c.num_classes}-class {(c.channels, c.image_height, c.image_width)} "
            f"images; dataset {ds.name} has {ds.num_classes} classes of {ds.image_shape}")


# -- subcommands -------------------------------------------------------------

def cmd_train(spec: RunSpec, args) -> int:
    train, held_out = load_data(spec)
    config = model_config(spec, train.image_shape, train.num_classes)
    out = _out_dir(spec)
    model = HAViT(config, seed=spec["train.seed"])
    result = fit(model, train, train_config(spec), held_out, out_dir=out)
    from havit.plotting import plot_training_curves
    plot_training_curves(result.metrics, out / "training_curves.png")
    last = result.metrics[-1]
    print(f"trained {result.steps} steps: train_acc={last.train_acc:.4f} eval_acc={last.eval_acc:.4f}")
    print(f"wrote {out / 'metrics.csv'}, {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(spec: RunSpec, args) -> int:
    model = _load_checkpoint(args)
    train, held_out = load_data(spec)
    _check_compatible(model, held_out)
    stats = compute_stats(train)
    loss, acc = evaluate(model, held_out, stats, label_smoothing=spec["train.label_smoothing"])
    out = _out_dir(spec)
    (out / "eval.csv").write_text(f"split,loss,accuracy\neval,{loss:.10g},{acc:.10g}\n")
    print(f"eval loss={loss:.4f} accuracy={acc:.4f}")
    return EXIT_OK


def cmd_sweep(spec: RunSpec, args) -> int:
    grid = spec["train.alpha_grid"]
    if not grid:
        raise ConfigurationError("alpha grid is empty")
    inits = spec.sweep_inits()
    if not inits:
        raise ConfigurationError("no init strategies to sweep")
    train, held_out = load_data(spec)
    config = model_config(spec, train.image_shape, train.num_classes)
    out = _out_dir(spec)
    rows = alpha_sweep(ModelFactory(config, spec["train.seed"]), train, train_config(spec),
                       grid, inits, held_out, jobs=spec["run.jobs"])
    (out / "sweep.csv").write_text(sweep_csv(rows))
    table = render_sweep_table(rows, title=f"{train.name}: results with alpha variation")
    (out / "sweep_table.txt").write_text(table, encoding="utf-8")
    from havit.plotting import plot_alpha_sweep
    plot_alpha_sweep(rows, out / "alpha_sweep.png")
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(spec: RunSpec, args) -> int:
    size = spec["data.image_size"]
    config = model_config(spec, (3, size, size), spec["gradcheck.num_classes"])
    config = replace(config, num_classes=spec["gradcheck.num_classes"], init_std=spec["gradcheck.init_std"])
    count = parameter_count(config)
    if count > spec["gradcheck.max_params"]:
        raise ConfigurationError(
            f"model has {count} parameters; finite differences are capped at {spec['gradcheck.max_params']}")
    seed = spec["train.seed"]
    model = HAViT(config, seed=seed)
    rng = np.random.default_rng([seed, 7])
    B = spec["gradcheck.batch"]
    images = rng.random((B, config.channels, config.image_height, config.image_width))
    labels = np.arange(B) % config.num_classes
    eps = spec["train.label_smoothing"]

    def loss_fn(params, fixed=None):
        return T.cross_entropy_smoothed(forward(images, config, params, fixed_histories=fixed).logits,
                                        labels, eps)

    f, analytic = loss_fn, None
    if config.blend.detach_history and not config.baseline_mode:
        # Detached backward is the exact gradient with every layer's incoming
        # history held at its recorded value.
        trace = forward(images, config, model.params)
        frozen = [trace.initial_history.logits] + [hst.logits for hst in trace.histories[:-1]]
        f, analytic = (lambda p: loss_fn(p, frozen)), loss_fn
    max_el = spec["gradcheck.max_elements"] or None
    reports = gradient_report(f, model.params, h=spec["gradcheck.h"], max_elements=max_el,
                              seed=seed, analytic=analytic)
    worst = max(r.max_rel_error for r in reports)
    out = _out_dir(spec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param", "checked", "max_rel_error", "max_abs_error"])
    for r in reports:
        w.writerow([r.name, r.checked, f"{r.max_rel_error:.6e}", f"{r.max_abs_error:.6e}"])
    (out / "gradcheck.csv").write_text(buf.getvalue())
    for r in sorted(reports, key=lambda r: -r.max_rel_error)[:5]:
        print(f"  {r.name:28s} rel={r.max_rel_error:.3e} abs={r.max_abs_error:.3e} ({r.checked} entries)")
    tol = spec["gradcheck.tolerance"]
    detach = "detached" if config.blend.detach_history else "flowing"
    print(f"gradcheck: {count} params, history gradients {detach}, max relative error {worst:.3e} "
          f"(tolerance {tol:g})")
    return EXIT_OK if worst < tol else EXIT_NUMERIC


def write_pgm(path, values: np.ndarray) -> None:
    """Binary graymap with the map's maximum scaled to 255."""
    h, w = values.shape
    peak = values.max()
    scaled = np.zeros_like(values) if peak <= 0 else values / peak * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def cmd_export_attn(spec: RunSpec, args) -> int:
    model = _load_checkpoint(args)
    train, held_out = load_data(spec)
    _check_compatible(model, held_out)
    L = model.config.depth
    layers = spec["export.layers"] or tuple(range(1, L + 1))
    bad = [l for l in layers if not 1 <= l <= L]
    if bad:
        raise ConfigurationError(f"layers {bad} out of range; the model has {L} layers")
    k = min(spec["export.num_images"], len(held_out))
    raw = held_out.images[:k]
    trace = model.forward(normalize(raw, compute_stats(train)), batch_counter=0, stream=EVAL_STREAM)
    out = _out_dir(spec)
    maps = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "layer", "row", "col", "probability"])
    for l in layers:
        grid = extract_cls_attention(trace, l)
        for i in range(k):
            maps[(i, l)] = grid[i]
            write_pgm(out / f"attn_img{i}_layer{l}.pgm", grid[i])
            for (r, c), p in np.ndenumerate(grid[i]):
                w.writerow([i, l, r, c, f"{p:.12e}"])
    (out / "attention.csv").write_text(buf.getvalue())
    from havit.plotting import plot_attention_maps
    plot_attention_maps(maps, out / "attention_maps.png", images=list(raw))
    print(f"exported {len(maps)} attention maps to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "export-attn": cmd_export_attn,
}


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--preset", choices=["tiny", "desk"], help="architecture preset")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--data", choices=["cifar100", "synthetic"])
    common.add_argument("--data-path")
    common.add_argument("--alpha", type=float)
    common.add_argument("--init", choices=["random", "zero"])
    common.add_argument("--baseline", action="store_true", default=None)
    common.add_argument("--detach-history", action="store_true", default=None)
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="havit", description="Vision Transformer with historical attention blending.",
        epilog=describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one model")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH")
    p = sub.add_parser("sweep", parents=[common], help="alpha x init sweep against a baseline")
    p.add_argument("--alphas", metavar="A,B,...", help="alpha grid (comma-separated)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p = sub.add_parser("export-attn", parents=[common], help="export CLS attention maps")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--layers", metavar="L1,L2,...", help="1-based layers (default all)")
    p.add_argument("--num-images", type=int)
    return parser


def resolve_spec(args) -> RunSpec:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = parse_value(key.strip(), raw)
    flag_keys = {
        "data": "data.name", "data_path": "data.path", "alpha": "model.alpha",
        "init": "model.init", "baseline": "model.baseline",
        "detach_history": "model.detach_history", "seed": "train.seed",
        "epochs": "train.epochs", "out": "run.out", "jobs": "run.jobs",
        "num_images": "export.num_images",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "alphas", None) is not None:
        overrides["train.alpha_grid"] = parse_value("train.alpha_grid", args.alphas)
    if getattr(args, "layers", None) is not None:
        overrides["export.layers"] = parse_value("export.layers", args.layers)
    if args.command == "sweep" and args.init is not None:
        overrides["sweep.inits"] = args.init
    preset = args.preset
    if preset is None and args.command == "gradcheck" and not args.config and "run.preset" not in overrides:
        preset = "tiny"
    if args.config:
        return RunSpec.from_file(args.config, overrides, preset)
    return RunSpec.resolve(None, overrides, preset)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = resolve_spec(args)
        return COMMANDS[args.command](spec, args)
    except NumericalError as exc:
        print(f"havit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, FormatError, ContractError, DimensionError,
            FileNotFoundError, IndexError) as exc:
        print(f"havit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
