"""Command-line entry point: ``pyror <subcommand> [flags]``.

Exit codes: 0 success, 1 validation failure (bad flags, bad config, invalid
graph), 2 runtime or numerical failure.  Machine output is JSON on stdout;
diagnostics go to stderr.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import graph as G
from .analyzer import analyze, expected_compute
from .archspec import CONFIG_KEYS, ArchConfig, ConfigError, load_config
from .nnkernel import gradcheck
from .nnkernel.checkpoint import CheckpointError, load_checkpoint
from .stochdepth import linear_decay, sample_mask
from .trainer import (
    Dataset, TrainConfig, TrainingDiverged, evaluate, load_cifar_binary, load_train_config,
    make_synthetic, normalize, parse_schedule, train, train_config_dict,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("pyror")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; here that is a validation failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _emit(doc):
    print(json.dumps(doc, indent=2))


# -- architecture flags --------------------------------------------------------

def _add_arch_flags(p, input_size=None):
    g = p.add_argument_group("architecture")
    g.add_argument("--config", help="key = value architecture file; flags override it")
    g.add_argument("--depth", type=int)
    g.add_argument("--alpha", type=int)
    g.add_argument("--block-variant", "--block_variant", "--variant", dest="block_variant",
                   help="preact | pyramid-bn")
    g.add_argument("--p-terminal", "--p_terminal", dest="p_terminal", type=float)
    g.add_argument("--num-classes", "--num_classes", dest="num_classes", type=int)
    if input_size is not None:
        g.add_argument("--input-size", type=int, default=input_size,
                       help=f"square input side (default {input_size})")


def _arch_from_args(args, input_shape=None) -> ArchConfig:
    base = load_config(args.config).to_dict() if args.config else {}
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    missing = [k for k in ("depth", "alpha") if k not in base]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)} "
                          f"(pass --{missing[0]} or --config)")
    if input_shape is None and getattr(args, "input_size", None):
        input_shape = (3, args.input_size, args.input_size)
    if input_shape is not None:
        base["input_shape"] = tuple(input_shape)
    return ArchConfig.from_dict(base)


# -- describe ------------------------------------------------------------------

def describe_report(config: ArchConfig) -> dict:
    graph = G.build_graph(config)
    survival = linear_decay(config.total_blocks, config.p_terminal)
    report = analyze(graph, survival)
    shapes = G.infer_shapes(graph)
    widths = config.schedule().widths
    n = config.blocks_per_group
    groups = []
    for g in range(3):
        last_add = graph.final_adds[(g + 1) * n - 1]
        groups.append({
            "group": g + 1,
            "blocks": n,
            "spatial": list(shapes[last_add][1:]),
            "width_in": G.STEM_WIDTH if g == 0 else widths[g * n - 1],
            "width_out": widths[(g + 1) * n - 1],
        })
    doc = report.to_dict()
    doc.update({
        "config": config.to_dict(),
        "total_blocks": config.total_blocks,
        "final_width": config.schedule().final_width,
        "weighted_layers": G.weighted_layer_count(graph),
        "groups": groups,
        "expected_compute_fraction": expected_compute(graph, survival),
        "survival_probs": list(survival.probs),
    })
    return doc


def _describe_text(doc) -> str:
    c = doc["config"]
    lines = [
        f"depth {c['depth']}  alpha {c['alpha']}  variant {c['block_variant']}  "
        f"classes {c['num_classes']}",
        f"{'group':>5} {'blocks':>6} {'spatial':>9} {'widths':>11}",
    ]
    for g in doc["groups"]:
        spatial = "x".join(map(str, g["spatial"]))
        lines.append(f"{g['group']:>5} {g['blocks']:>6} {spatial:>9} "
                     f"{g['width_in']:>4} -> {g['width_out']:<4}")
    lines.append(f"blocks {doc['total_blocks']}, final width {doc['final_width']}, "
                 f"weighted layers {doc['weighted_layers']}")
    lines.append(f"params {doc['total_params']:,} ({doc['total_params'] / 1e6:.2f}M)")
    for level, count in doc["params_by_level"].items():
        lines.append(f"  {level:<16} {count:>12,}")
    lines.append(f"forward MACs {doc['flops_forward']:,}")
    lines.append(f"expected MACs under SD (p_L={c['p_terminal']:g}) "
                 f"{doc['expected_flops_sd']:,.0f} ({doc['expected_compute_fraction']:.4f})")
    return "\n".join(lines)


def cmd_describe(args):
    doc = describe_report(_arch_from_args(args))
    if args.json == "-":
        _emit(doc)
        return EXIT_OK
    print(_describe_text(doc))
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# -- validate / export ---------------------------------------------------------

def cmd_validate(args):
    if args.graph:
        graph = G.import_json(Path(args.graph).read_text(encoding="utf-8"))
    else:
        graph = G.build_graph(_arch_from_args(args))
    findings = G.validate_graph(graph)
    _emit({"valid": not findings, "findings": findings, "nodes": len(graph.nodes)})
    for f in findings:
        print(f"invalid: {f}", file=sys.stderr)
    return EXIT_OK if not findings else EXIT_INVALID


def cmd_export(args):
    text = G.export_json(G.build_graph(_arch_from_args(args)))
    if args.output in (None, "-"):
        sys.stdout.write(text + ("" if text.endswith("\n") else "\n"))
    else:
        Path(args.output).write_text(text, encoding="utf-8")
        print(f"wrote {args.output}", file=sys.stderr)
    return EXIT_OK


# -- stochastic depth ----------------------------------------------------------

def cmd_sample_sd(args):
    if args.blocks is None:
        blocks = _arch_from_args(args).total_blocks
        p = _arch_from_args(args).p_terminal
    else:
        blocks, p = args.blocks, 0.5 if args.p_terminal is None else args.p_terminal
    if args.draws < 0:
        raise ConfigError(f"--draws must be >= 0, got {args.draws}")
    schedule = linear_decay(blocks, p)
    rng = np.random.default_rng(args.seed)
    masks = [sample_mask(schedule, rng).astype(int).tolist() for _ in range(args.draws)]
    _emit({"blocks": blocks, "p_terminal": p, "seed": args.seed,
           "survival_probs": list(schedule.probs), "masks": masks})
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------

def _parse_mask(text, N):
    bits = [s.strip() for s in text.split(",")]
    if len(bits) != N or any(b not in ("0", "1") for b in bits):
        raise ConfigError(f"--sd-mask needs {N} comma-separated 0/1 flags, got {text!r}")
    return np.array([b == "1" for b in bits])


def cmd_gradcheck(args):
    config = _arch_from_args(args)
    graph = G.build_graph(config)
    mask = _parse_mask(args.sd_mask, config.total_blocks) if args.sd_mask else None
    report = gradcheck(graph, tolerance=args.tolerance, seed=args.seed,
                       samples=args.samples, batch=args.batch, sd_mask=mask,
                       dtype=None if args.dtype == "auto" else args.dtype)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_RUNTIME


# -- data / train / eval -------------------------------------------------------

def _add_data_flags(p, test=True):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="CIFAR binary file or directory")
    g.add_argument("--synthetic", metavar="CLASSES:PER_CLASS",
                   help="use generated blob images instead of --data")
    g.add_argument("--synthetic-size", type=int, default=32, help="side of synthetic images")
    g.add_argument("--data-seed", type=int, default=0, help="seed for --synthetic")
    g.add_argument("--split", choices=("train", "test"), default="train" if test else "test")
    if test:
        g.add_argument("--test-data", help="held-out CIFAR binary file or directory")


def _load_data(args, path, split, num_classes, seed_offset=0) -> Dataset:
    if args.synthetic:
        try:
            classes, per_class = (int(s) for s in args.synthetic.split(":"))
        except ValueError:
            raise ConfigError(f"--synthetic expects CLASSES:PER_CLASS, got {args.synthetic!r}") from None
        return make_synthetic(classes, per_class, seed=args.data_seed + seed_offset,
                              size=args.synthetic_size, split=split)
    if not path:
        raise ConfigError("no dataset: pass --data PATH or --synthetic CLASSES:PER_CLASS")
    return load_cifar_binary(path, split, num_classes)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--train-config", help="key = value training file; flags override it")
    g.add_argument("--smoke", action="store_true", help="start from the 30-epoch smoke profile")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", "--batch_size", dest="batch_size", type=int)
    g.add_argument("--lr-schedule", "--lr_schedule", dest="lr_schedule", type=parse_schedule,
                   help="cifar | svhn | e0:lr0,e1:lr1,...")
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", "--weight_decay", dest="weight_decay", type=float)
    g.add_argument("--augment", choices=("true", "false"))
    g.add_argument("--normalize", choices=("per_channel_meanstd", "none"))
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-every", "--eval_every", dest="eval_every", type=int)
    g.add_argument("--checkpoint-every", "--checkpoint_every", dest="checkpoint_every", type=int)
    g.add_argument("--max-steps", type=int, help="stop after this many SGD steps")
    g.add_argument("--no-sd", action="store_true", help="disable stochastic depth")
    g.add_argument("--log", help="write one JSON record per epoch here")
    g.add_argument("--checkpoint-dir")


def _train_config_from_args(args) -> TrainConfig:
    cfg = TrainConfig.smoke() if args.smoke else TrainConfig()
    if args.train_config:
        cfg = load_train_config(args.train_config, cfg)
    overrides = {}
    for key in ("epochs", "batch_size", "lr_schedule", "momentum", "weight_decay", "normalize",
                "seed", "eval_every", "checkpoint_every"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.augment is not None:
        overrides["augment"] = args.augment == "true"
    return replace(cfg, **overrides)


def cmd_train(args):
    cfg = _train_config_from_args(args)
    num_classes = args.num_classes or (int(args.synthetic.split(":")[0]) if args.synthetic else 10)
    if args.synthetic:
        args.num_classes = num_classes
    data = _load_data(args, args.data, "train", num_classes)
    test_set = None
    if args.test_data or args.synthetic:
        test_set = _load_data(args, args.test_data, "test", num_classes, seed_offset=1)
    config = _arch_from_args(args, input_shape=data.images.shape[1:])
    graph = G.build_graph(config)
    sd = None if args.no_sd else linear_decay(config.total_blocks, config.p_terminal)
    log.info("training %d-layer alpha=%d on %d images", config.depth, config.alpha, len(data))
    result = train(graph, cfg, data, sd_schedule=sd, test_set=test_set, log_path=args.log,
                   checkpoint_dir=args.checkpoint_dir, max_steps=args.max_steps)
    _emit({
        "config": config.to_dict(),
        "train_config": train_config_dict(cfg),
        "stochastic_depth": sd is not None,
        "steps": result.steps,
        "final": result.log[-1] if result.log else None,
        "checkpoint": str(Path(args.checkpoint_dir) / "last.ckpt") if args.checkpoint_dir else None,
    })
    return EXIT_OK


def cmd_eval(args):
    params, echo = load_checkpoint(args.checkpoint)
    if "graph" not in echo:
        raise ConfigError(f"{args.checkpoint} carries no architecture config")
    config = ArchConfig.from_dict(echo["graph"])
    data = _load_data(args, args.data, args.split, config.num_classes)
    if data.images.shape[1:] != config.input_shape:
        raise ConfigError(f"data shape {data.images.shape[1:]} does not match the model "
                          f"input {config.input_shape}")
    stats = echo.get("normalize")
    if stats:
        data = normalize(data, (stats["mean"], stats["std"]))
    graph = G.build_graph(config)
    sd = None if args.no_sd else linear_decay(config.total_blocks, config.p_terminal)
    metrics = evaluate(graph, params, data, sd)
    _emit({"checkpoint": str(args.checkpoint), "count": len(data), **metrics})
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pyror", description="Pyramidal RoR architecture tools")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", help="layer plan, parameter and compute report")
    _add_arch_flags(p)
    p.add_argument("--json", metavar="PATH", help="also write the JSON report ('-' for stdout only)")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("validate", help="structural checks on a built or exported graph")
    _add_arch_flags(p)
    p.add_argument("--graph", help="validate this exported graph JSON instead")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("export", help="graph as JSON")
    _add_arch_flags(p)
    p.add_argument("-o", "--output", help="output path (default stdout)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sample-sd", help="draw stochastic-depth block masks")
    _add_arch_flags(p)
    p.add_argument("--blocks", type=int, help="number of droppable blocks (default from config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=1)
    p.set_defaults(func=cmd_sample_sd)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_arch_flags(p, input_size=8)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--sd-mask", help="comma-separated 0/1 keep flags, one per block")
    p.add_argument("--dtype", choices=("auto", "float64", "longdouble"), default="auto",
                   help="float type for the check (auto: widest available)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="SGD training with optional stochastic depth")
    _add_arch_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p, test=False)
    p.add_argument("--no-sd", action="store_true", help="skip the eval-time branch scaling")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, G.ShapeError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, FloatingPointError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
