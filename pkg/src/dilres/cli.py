"""Command-line entry point: ``dilres <command> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 3 corrupt data or model
file, 4 numerical failure during training.
"""
from __future__ import annotations

import argparse
import io
import logging
import sys
from pathlib import Path

from . import xai
from .data import (CLASS_NAMES, ImageFormatError, ManifestError, SyntheticSpec, generate_synthetic,
                   load_images, load_manifest, manifest_csv, read_image, resize_bilinear, split,
                   to_tensor, write_bytes_atomic, write_image)
from .metrics import confusion, report, report_csv, report_table
from .resnet import (VARIANTS, ModelFormatError, UnknownVariantError, arch_spec, audit, build,
                     load_model, save_model)
from .training import NumericalError, TrainConfig, predict, train, write_history

log = logging.getLogger("dilres")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- argument parsing --------------------------------------------------------

def _variant(text):
    try:
        v = int(text)
    except ValueError:
        v = text
    if v not in VARIANTS:
        raise argparse.ArgumentTypeError(
            f"unknown ResNet variant {text!r}; valid variants: {', '.join(map(str, VARIANTS))}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="file of key=value lines used as flag defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dilres", description="Normal and dilated ResNet engine.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    t.add_argument("--arch", type=_variant, required=True)
    t.add_argument("--dilated", action="store_true")
    t.add_argument("--bottleneck-dilation", choices=("unit", "spread"), default="unit")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--val-data", type=Path)
    t.add_argument("--out", type=Path, required=True, help="model file to write")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=_positive_int, default=32)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--width", type=float, default=1.0)
    t.add_argument("--base-width", type=_positive_int)
    t.add_argument("--size", type=_positive_int, help="resize images to SIZE x SIZE")

    e = sub.add_parser("eval", parents=[common], help="per-class report of a model on a manifest")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, help="directory for report.csv")
    e.add_argument("--size", type=_positive_int)

    x = sub.add_parser("explain", parents=[common], help="saliency map for one image")
    x.add_argument("--model", type=Path, required=True)
    x.add_argument("--image", type=Path, required=True)
    x.add_argument("--class", dest="target", required=True, help="class index or name")
    x.add_argument("--method", required=True, help="gradcam, rise, lime or activation")
    x.add_argument("--out", type=Path, required=True, help="output directory")
    x.add_argument("--size", type=_positive_int)
    x.add_argument("--layer", default="last_conv")
    x.add_argument("--masks", type=int, default=4000)
    x.add_argument("--cells", type=_positive_int, default=7)
    x.add_argument("--p", type=float, default=0.5)
    x.add_argument("--rows", type=_positive_int, default=4)
    x.add_argument("--cols", type=_positive_int, default=4)
    x.add_argument("--samples", type=int, default=1000)
    x.add_argument("--ridge", type=float, default=1.0)
    x.add_argument("--kernel-width", type=float, default=0.25)
    x.add_argument("--top-k", type=int, default=5)

    c = sub.add_parser("compare", parents=[common], help="normal vs. dilated model on one manifest")
    c.add_argument("--normal", type=Path, required=True)
    c.add_argument("--dilated", type=Path, required=True)
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--out", type=Path, help="directory for compare.csv")
    c.add_argument("--size", type=_positive_int)

    r = sub.add_parser("rf-report", parents=[common], help="per-layer geometry and receptive field")
    r.add_argument("--arch", type=_variant, required=True)
    r.add_argument("--dilated", action="store_true")
    r.add_argument("--bottleneck-dilation", choices=("unit", "spread"), default="unit")
    r.add_argument("--input", type=_positive_int, default=224)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic fundus-like corpus")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.add_argument("--size", type=_positive_int, default=64)
    s.add_argument("--per-class", type=_positive_int, default=100)
    s.add_argument("--train-fraction", type=float,
                   help="also write train.csv and test.csv from a stratified split")
    return p


def read_config(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def parse_args(argv) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if known.config is None:
        return parser.parse_args(argv)
    if not known.config.is_file():
        raise UsageError(f"config file not found: {known.config}")
    cfg = read_config(known.config)
    # config values act as defaults for the chosen subcommand;
    # flags given on the command line still win
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in (argv or sys.argv[1:]) if a in subparsers), None)
    if command is None:
        return parser.parse_args(argv)
    sub = subparsers[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in cfg.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- commands ----------------------------------------------------------------

def _require_file(path: Path, what: str):
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")


def _load_data(path: Path, size):
    _require_file(path, "manifest")
    manifest = load_manifest(path)
    if len(manifest) == 0:
        raise UsageError(f"manifest {path} lists no images")
    for p in manifest.paths():
        _require_file(p, "image")
    return load_images(manifest, size), manifest.labels


def cmd_train(args) -> int:
    images, labels = _load_data(args.data, args.size)
    if args.val_data is not None:
        val_images, val_labels = _load_data(args.val_data, args.size)
    else:
        val_images = val_labels = None
    config = TrainConfig(learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                         epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, width=args.width)
    net = build(args.arch, args.dilated, class_count=len(CLASS_NAMES), seed=args.seed, width=args.width,
                base_width=args.base_width, bottleneck_dilation=args.bottleneck_dilation)
    if labels.max() >= net.class_count:
        raise UsageError(f"labels must lie in [0, {net.class_count})")
    history = train(net, images, labels, config, val_images, val_labels)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(net, args.out)
    buf = io.StringIO()
    write_history(history, buf)
    hist_path = args.out.with_name(args.out.stem + ".history.csv")
    write_bytes_atomic(hist_path, buf.getvalue().encode("utf-8"))
    print(f"wrote {args.out} and {hist_path}")
    return EXIT_OK


def _evaluate(net, images, labels):
    preds = predict(net, images)
    return report(confusion(labels, preds, net.class_count))


def cmd_eval(args) -> int:
    _require_file(args.model, "model file")
    net = load_model(args.model)
    images, labels = _load_data(args.data, args.size)
    rep = _evaluate(net, images, labels)
    sys.stdout.write(report_table(rep))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_bytes_atomic(args.out / "report.csv", report_csv(rep).encode("utf-8"))
    return EXIT_OK


def _class_index(text, count):
    if text in CLASS_NAMES:
        idx = CLASS_NAMES.index(text)
    else:
        try:
            idx = int(text)
        except ValueError:
            raise UsageError(f"unknown class {text!r}; use an index or one of {', '.join(CLASS_NAMES)}") from None
    if not 0 <= idx < count:
        raise UsageError(f"class {idx} out of range [0, {count})")
    return idx


METHODS = ("gradcam", "rise", "lime", "activation")


def cmd_explain(args) -> int:
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    _require_file(args.model, "model file")
    _require_file(args.image, "image")
    net = load_model(args.model)
    target = _class_index(args.target, net.class_count)
    img = read_image(args.image)
    if img.ndim != 3:
        raise UsageError("explain needs a color (P6) image")
    if args.size is not None and img.shape[:2] != (args.size, args.size):
        img = resize_bilinear(img, args.size, args.size)
    x = to_tensor(img, net.dtype)
    weights = None
    if args.method == "gradcam":
        smap = xai.gradcam(net, x, target, args.layer)
    elif args.method == "activation":
        from .resnet import forward
        smap = xai.activation_map(forward(net, x, capture=True), args.layer)
        smap.target_class = target
    elif args.method == "rise":
        cfg = xai.RiseConfig(mask_count=args.masks, cells=args.cells, p=args.p, seed=args.seed)
        smap = xai.rise(xai.net_scorer(net), x, target, cfg)
    else:
        cfg = xai.LimeConfig(rows=args.rows, cols=args.cols, samples=args.samples, ridge=args.ridge,
                             kernel_width=args.kernel_width, top_k=args.top_k, seed=args.seed)
        smap, weights = xai.lime(xai.net_scorer(net), x, target, cfg)
    if smap.degenerate:
        log.warning("%s map is constant; wrote an all-zero map", args.method)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = args.out / f"{args.image.stem}.{args.method}.{target}"
    write_image(stem.with_name(stem.name + ".pgm"), xai.to_gray8(smap))
    write_image(stem.with_name(stem.name + ".ppm"), xai.overlay(img, smap))
    written = [stem.name + ".pgm", stem.name + ".ppm"]
    if weights is not None:
        write_bytes_atomic(stem.with_name(stem.name + ".weights.csv"), weights.csv().encode("utf-8"))
        written.append(stem.name + ".weights.csv")
        print("top segments: " + ", ".join(map(str, weights.top)))
    print("wrote " + ", ".join(written))
    return EXIT_OK


def compare_rows(normal_net, dilated_net, images, labels):
    a = _evaluate(normal_net, images, labels)
    b = _evaluate(dilated_net, images, labels)
    rows = [("accuracy", a.accuracy, b.accuracy),
            ("macro_f1", a.macro_f1, b.macro_f1),
            ("weighted_f1", a.weighted_f1, b.weighted_f1),
            ("params", normal_net.param_count(), dilated_net.param_count())]
    return [(name, x, y, y - x) for name, x, y in rows]


def cmd_compare(args) -> int:
    _require_file(args.normal, "model file")
    _require_file(args.dilated, "model file")
    n = load_model(args.normal)
    d = load_model(args.dilated)
    if n.class_count != d.class_count:
        raise UsageError(f"class counts differ: {n.class_count} vs {d.class_count}")
    images, labels = _load_data(args.data, args.size)
    rows = compare_rows(n, d, images, labels)
    lines = [f"{'metric':<12}  {'without-dilation':>16}  {'with-dilation':>13}  {'delta':>8}"]
    csv_lines = ["metric,without-dilation,with-dilation,delta"]
    for name, x, y, delta in rows:
        if name == "params":
            lines.append(f"{name:<12}  {x:>16d}  {y:>13d}  {delta:>+8d}")
            csv_lines.append(f"{name},{x},{y},{delta}")
        else:
            lines.append(f"{name:<12}  {x:>16.4f}  {y:>13.4f}  {delta:>+8.4f}")
            csv_lines.append(f"{name},{x:.6f},{y:.6f},{delta:+.6f}")
    print("\n".join(lines))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_bytes_atomic(args.out / "compare.csv", ("\n".join(csv_lines) + "\n").encode("utf-8"))
    return EXIT_OK


def rf_table(variant, dilated, input_size, bottleneck_dilation="unit") -> str:
    rep = audit(arch_spec(variant, dilated, bottleneck_dilation=bottleneck_dilation), input_size)
    head = f"{'layer':<22} {'kernel':>6} {'stride':>6} {'dilation':>8} {'eff.kernel':>10} {'output':>9} {'rf':>5}"
    lines = [head]
    for r in rep.rows_main():
        out = f"{r.output[0]}x{r.output[1]}"
        lines.append(f"{r.name:<22} {r.kernel:>6} {r.stride:>6} {r.dilation:>8} {r.effective_kernel:>10} "
                     f"{out:>9} {r.receptive_field:>5}")
    return "\n".join(lines)


def cmd_rf_report(args) -> int:
    print(f"ResNet-{args.arch} {'dilated' if args.dilated else 'normal'}, input {args.input}x{args.input}")
    print(rf_table(args.arch, args.dilated, args.input, args.bottleneck_dilation))
    normal = audit(arch_spec(args.arch, False), args.input)
    dilated = audit(arch_spec(args.arch, True, bottleneck_dilation=args.bottleneck_dilation), args.input)
    fmt = lambda r: f"{r.final_extent[0]}x{r.final_extent[1]} rf {r.final_rf}"
    print(f"final feature map: normal {fmt(normal)} | dilated {fmt(dilated)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(image_size=args.size, samples_per_class=args.per_class, seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    written = ["manifest.csv"]
    if args.train_fraction is not None:
        tr, te = split(manifest, args.train_fraction, args.seed)
        write_bytes_atomic(args.out / "train.csv", manifest_csv(tr).encode("utf-8"))
        write_bytes_atomic(args.out / "test.csv", manifest_csv(te).encode("utf-8"))
        written += ["train.csv", "test.csv"]
    print(f"wrote {len(manifest)} images and {', '.join(written)} to {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "compare": cmd_compare,
    "rf-report": cmd_rf_report,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, UnknownVariantError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelFormatError, ImageFormatError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
