"""Command-line driver.

    camkit layers MODEL
    camkit run --model M --inputs DIR --backend B --layer SPEC --class C --output DIR [--save-maps]
    camkit evaluate <run flags> --masks DIR --metric NAME [--threshold F]
    camkit demo DIR

Exit codes: 0 success, 1 some inputs failed, 2 configuration or model error.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camkit import backends as B
from camkit import evaluation as E
from camkit.errors import CamError
from camkit.fileio import read_input, write_image_pgm, write_tensor
from camkit.graph import forward_recorded, list_layers, load_model, resolve_layer_spec, save_model
from camkit.render import render_overlay, write_overlay

INPUT_SUFFIXES = (".pgm", ".camt")
EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model_path: Path
    inputs: Path
    output_dir: Path
    backend: str = "gcam"
    layer: str = "auto"
    class_spec: B.ClassSpec = field(default_factory=B.ClassSpec)
    save_maps: bool = False
    figures: bool = False
    alpha: float = 0.5
    metric: str = E.DEFAULT_METRIC
    threshold: float = E.DEFAULT_THRESHOLD
    masks: Path | None = None


def _err(msg):
    print(f"camkit: {msg}", file=sys.stderr)


def _open_model(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"cannot open model file {path}")
    try:
        return load_model(path)
    except OSError as exc:
        raise ConfigError(f"cannot open model file {path}: {exc.strerror}") from None
    except CamError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def discover_inputs(source):
    source = Path(source)
    if source.is_file():
        return [source]
    if not source.is_dir():
        raise ConfigError(f"cannot open inputs {source}")
    files = sorted(p for p in source.iterdir() if p.is_file() and p.suffix in INPUT_SUFFIXES)
    if not files:
        raise ConfigError(f"no .pgm or .camt inputs in {source}")
    return files


def format_logits(logits):
    logits = np.asarray(logits, dtype=np.float32)
    if logits.ndim == 1:
        return "logits=[" + ",".join(f"{v:.6g}" for v in logits) + "]"
    return "logits_sha256=" + hashlib.sha256(logits.tobytes()).hexdigest()[:16]


def map_stem(input_stem, amap):
    return f"{input_stem}_{amap.layer}_{amap.backend}_c{amap.class_id}"


def cmd_layers(args) -> int:
    try:
        model = _open_model(args.model)
    except ConfigError as exc:
        _err(exc)
        return EXIT_CONFIG
    for info in list_layers(model):
        shape = "(" + ",".join(str(s) for s in info.output_shape) + ")"
        print(f"{info.name} {info.kind} {shape} {'true' if info.attention_capable else 'false'}")
    return EXIT_OK


def _validate(config):
    """Load the model and check every option before the first forward pass."""
    if config.backend not in B.BACKENDS:
        raise ConfigError(f"unknown backend {config.backend!r}; choose from {', '.join(B.BACKENDS)}")
    if not 0.0 <= config.alpha <= 1.0:
        raise ConfigError(f"--alpha must lie in [0, 1], got {config.alpha}")
    if config.masks is not None:
        try:
            E.parse_metric(config.metric, config.threshold)
        except CamError as exc:
            raise ConfigError(str(exc)) from None
        if not Path(config.masks).is_dir():
            raise ConfigError(f"cannot open mask directory {config.masks}")
    model = _open_model(config.model_path)
    try:
        layers = ["input"] if config.backend == "gbp" else resolve_layer_spec(model, config.layer)
    except CamError as exc:
        raise ConfigError(str(exc)) from None
    spec = config.class_spec
    if spec.mode == "explicit" and spec.class_id >= model.num_classes:
        raise ConfigError(f"class {spec.class_id} out of range for {model.num_classes} classes")
    inputs = discover_inputs(config.inputs)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    return model, layers, inputs


def explain_input(model, path, config, layers):
    """Forward one input and produce one map per layer; writes artifacts."""
    x = read_input(path)
    if tuple(x.shape) != model.input_shape:
        raise CamError(f"input shape {tuple(x.shape)} != model input shape {model.input_shape}")
    cache = forward_recorded(model, x)
    maps = []
    for layer in layers:
        amap = B.generate(
            model,
            config.backend,
            class_spec=config.class_spec,
            layer=None if config.backend == "gbp" else [layer],
            cache=cache,
        )
        stem = map_stem(path.stem, amap)
        write_tensor(amap.values, config.output_dir / f"{stem}.camt")
        if config.save_maps:
            write_overlay(render_overlay(x, amap, config.alpha), config.output_dir / f"{stem}.ppm")
        maps.append(amap)
    if config.figures:
        from camkit.plotting import plot_attention_panel

        name = f"{path.stem}_{config.backend}_c{maps[0].class_id}.png"
        plot_attention_panel(x, maps, config.output_dir / name, config.alpha)
    return x, cache, maps


def _find_mask(mask_dir, stem):
    for suffix in (".camt", ".pgm"):
        p = Path(mask_dir) / f"{stem}{suffix}"
        if p.is_file():
            return p
    return None


def _load_mask(path, spatial):
    mask = E.check_mask(read_input(path), name=str(path))
    if mask.shape != tuple(spatial):
        if mask.shape[0] == 1 and mask.shape[1:] == tuple(spatial):
            mask = mask[0]
        else:
            raise CamError(f"{path}: mask shape {mask.shape} != input spatial shape {tuple(spatial)}")
    return mask


def execute(config: RunConfig) -> int:
    try:
        model, layers, inputs = _validate(config)
    except ConfigError as exc:
        _err(exc)
        return EXIT_CONFIG

    evaluator = E.Evaluator(config.metric, config.threshold) if config.masks is not None else None
    failed = 0
    for path in inputs:
        try:
            mask = None
            if evaluator is not None:
                mask_path = _find_mask(config.masks, path.stem)
                if mask_path is None:
                    raise CamError(f"no mask for input {path.name} in {config.masks}")
                mask = _load_mask(mask_path, model.input_shape[1:])
            _, cache, maps = explain_input(model, path, config, layers)
            parts = [path.name, f"class={maps[0].class_id}", "layers=" + ",".join(m.layer for m in maps)]
            if evaluator is not None:
                scores = [evaluator.add(path.stem, m, mask).score for m in maps]
                parts.append(f"{E.metric_label(config.metric, config.threshold)}=" + ",".join(f"{s:.6f}" for s in scores))
            parts.append(format_logits(cache.logits))
            print(" ".join(parts))
        except (CamError, OSError, ValueError) as exc:
            failed += 1
            _err(f"{path.name}: {exc}")

    if evaluator is not None:
        evaluator.dump(config.output_dir / "evaluation.csv")
        if config.figures:
            from camkit.plotting import plot_evaluation

            plot_evaluation(evaluator.records, config.output_dir / "evaluation.png")
    return EXIT_PARTIAL if failed else EXIT_OK


def _config_from_args(args, evaluate=False):
    try:
        class_spec = B.ClassSpec.parse(args.class_, args.seg_scope)
    except CamError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        model_path=Path(args.model),
        inputs=Path(args.inputs),
        output_dir=Path(args.output),
        backend=args.backend,
        layer=args.layer,
        class_spec=class_spec,
        save_maps=args.save_maps,
        figures=args.figures if not evaluate else not args.no_figures,
        alpha=args.alpha,
        metric=getattr(args, "metric", E.DEFAULT_METRIC),
        threshold=getattr(args, "threshold", E.DEFAULT_THRESHOLD),
        masks=Path(args.masks) if evaluate else None,
    )


def cmd_run(args) -> int:
    try:
        config = _config_from_args(args)
    except ConfigError as exc:
        _err(exc)
        return EXIT_CONFIG
    return execute(config)


def cmd_evaluate(args) -> int:
    try:
        config = _config_from_args(args, evaluate=True)
    except ConfigError as exc:
        _err(exc)
        return EXIT_CONFIG
    return execute(config)


def cmd_demo(args) -> int:
    """Write a small segmentation model with matching inputs and masks."""
    from camkit.zoo import segmentation_demo

    root = Path(args.directory)
    (root / "inputs").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    model = segmentation_demo(size=args.size)
    save_model(model, root / "model.camm")
    n = args.size
    rng = np.random.default_rng(0)
    for i in range(3):
        img = np.zeros((n, n), dtype=np.float64)
        r0, c0 = rng.integers(0, n // 2, size=2)
        h, w = rng.integers(n // 4, n // 2 + 1, size=2)
        img[r0:r0 + h, c0:c0 + w] = 1.0
        mask = img.copy()
        img = np.clip(img * 0.8 + rng.uniform(0.0, 0.2, size=img.shape), 0, 1)
        write_image_pgm(np.round(img * 255), root / "inputs" / f"case{i}.pgm")
        write_image_pgm(mask * 255, root / "masks" / f"case{i}.pgm")
    print(f"wrote {root / 'model.camm'}, 3 inputs and 3 masks")
    return EXIT_OK


def _add_run_flags(p):
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", required=True, help="directory of .pgm/.camt files, or one file")
    p.add_argument("--backend", default="gcam", help="gcam, gbp, ggcam or gcampp")
    p.add_argument("--layer", default="auto", help="auto, full, a layer name or a comma list")
    p.add_argument("--class", dest="class_", default="auto", help="auto or a class index")
    p.add_argument("--output", required=True)
    p.add_argument("--save-maps", action="store_true", help="also write .ppm overlays")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--seg-scope", choices=("all", "predicted"), default="all")


def build_parser():
    parser = argparse.ArgumentParser(prog="camkit", description="Gradient-based attention maps for CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("layers", help="list layers and whether maps can be made for them")
    p.add_argument("model")
    p.set_defaults(func=cmd_layers)

    p = sub.add_parser("run", help="generate attention maps for every input")
    _add_run_flags(p)
    p.add_argument("--figures", action="store_true", help="write a PNG panel per input")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="generate maps and score them against masks")
    _add_run_flags(p)
    p.add_argument("--masks", required=True)
    p.add_argument("--metric", default=E.DEFAULT_METRIC)
    p.add_argument("--threshold", type=float, default=E.DEFAULT_THRESHOLD)
    p.add_argument("--no-figures", action="store_true", help="skip evaluation.png")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", help="write a demo model, inputs and masks")
    p.add_argument("directory")
    p.add_argument("--size", type=int, default=16)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
