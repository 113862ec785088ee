"""``squeezekit`` command line: generate, describe, train, sweep, compress."""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import analysis_dse as dse
from . import compression as cmp
from . import io_formats as io
from .arch_builder import (DEFAULT_INPUT_SHAPE, COMPLEX_PLACEMENTS, HeadSpec, Metaparams,
                           StemSpec, Variant, build_squeezenet)
from .analysis_dse import TrainConfig
from .errors import ConfigurationError, SqueezeKitError
from .model import init_params

SEED_ENV = "SQZKIT_SEED"


class UsageError(SqueezeKitError):
    tag = "usage"


def _seed_default() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(p) for p in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected C,H,W") from None
    if len(shape) != 3 or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected C,H,W")
    return shape


def _mb(nbytes) -> str:
    return f"{float(nbytes) / dse.MB:.3f} MB"


def _load_config(path) -> io.ArchConfig:
    return io.load_arch(path) if path else io.ArchConfig()


def _graph(config: io.ArchConfig, input_shape=DEFAULT_INPUT_SHAPE):
    return build_squeezenet(config.metaparams, config.variant, input_shape,
                            complex_placement=config.complex_placement)


# --- subcommands ------------------------------------------------------------

def cmd_generate(args) -> int:
    mp = Metaparams(base_e=args.base_e, incr_e=args.incr_e, freq=args.freq, pct3x3=args.pct3x3,
                    sr=args.sr, n_fire_modules=args.n_fire,
                    stem=StemSpec(args.stem_filters, args.stem_kernel, args.stem_stride, args.stem_pad),
                    head=HeadSpec(args.classes))
    config = io.ArchConfig(mp, Variant.parse(args.variant), args.complex_placement)
    graph = _graph(config, args.input_shape)
    report = dse.count_params(graph)
    print(f"variant: {config.variant.value}")
    print(f"metaparams: base_e={mp.base_e} incr_e={mp.incr_e} freq={mp.freq} "
          f"pct3x3={mp.pct3x3!r} sr={mp.sr!r} fire_modules={mp.n_fire_modules}")
    for i, spec in enumerate(graph.fire_specs):
        print(f"  fire{i + 2}: s1x1={spec.s1x1} e1x1={spec.e1x1} e3x3={spec.e3x3}")
    print("validation: ok")
    print(f"total params: {report.total_params}")
    print(f"model size: {report.total_bytes} bytes ({_mb(report.total_bytes)} at 32-bit)")
    if args.out:
        io.save_arch(args.out, config)
        print(f"wrote {args.out}")
    return 0


def cmd_describe(args) -> int:
    config = _load_config(args.arch)
    graph = _graph(config, args.input_shape)
    sizes = {r.name: r for r in dse.count_params(graph).rows}
    profile = dse.activation_profile(graph)
    print(f"{'layer':<24} {'type':<8} {'output':<16} {'params':>10}  down")
    for row in profile.rows:
        params = sizes[row.name].params if row.name in sizes else 0
        shape = "x".join(str(s) for s in row.shape)
        mark = "v" if row.downsample else ""
        print(f"{row.name:<24} {row.op:<8} {shape:<16} {params:>10}  {mark}")
    report = dse.count_params(graph)
    print(f"fire modules: {len(graph.fire_modules())}")
    print(f"downsampling layers: {len(profile.downsampling_nodes)} "
          f"({', '.join(profile.downsampling_nodes)})")
    print(f"activation elements: {profile.total_elements}")
    print(f"total params: {report.total_params}")
    print(f"model size: {report.total_bytes} bytes ({_mb(report.total_bytes)} at 32-bit)")
    return 0


def _dataset(args, classes: int):
    if args.dataset == "synthetic":
        return io.gen_toy_dataset(args.seed, args.samples, classes)
    return io.load_idx_dataset(args.dataset)


def cmd_train(args) -> int:
    config = _load_config(args.arch) if args.arch else io.ArchConfig(dse.toy_metaparams())
    dataset = _dataset(args, config.metaparams.head.classes)
    if dataset.num_classes != config.metaparams.head.classes:
        raise ConfigurationError(f"dataset has {dataset.num_classes} classes but the head has "
                                 f"{config.metaparams.head.classes} filters")
    graph = _graph(config, dataset.image_shape)
    result = dse.train_toy(graph, dataset, dse.TrainConfig(args.steps, args.batch, args.lr, args.seed))
    if result.losses:
        tail = result.losses[-10:]
        print(f"steps: {len(result.losses)}")
        print(f"loss: first {result.losses[0]:.6f}, mean of last {len(tail)} "
              f"{float(np.mean(tail)):.6f}")
    else:
        print("steps: 0")
    print(f"held-out accuracy: {result.accuracy:.4f} (chance {1 / dataset.num_classes:.4f})")
    if result.diverged:
        print("warning: loss became non-finite", file=sys.stderr)
    if args.weights_out:
        io.save_weights(args.weights_out, result.params, graph)
        print(f"wrote {args.weights_out}")
    return 0


def _parse_values(text: str) -> list[float]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise UsageError("--values needs at least one value")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"--values must be numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    values = _parse_values(args.values)
    unique = list(dict.fromkeys(values))
    if len(unique) != len(values):
        dups = sorted({v for v in values if values.count(v) > 1})
        print(f"warning: duplicate values dropped: {dups}", file=sys.stderr)
    config = _load_config(args.arch)
    hook = None
    if args.train_toy:
        dataset = io.gen_toy_dataset(args.seed, args.samples, 4)
        train_cfg = dse.TrainConfig(args.steps, args.batch, args.lr, args.seed)

        def toy_accuracy(graph, mp):
            toy = replace(dse.toy_metaparams(), **{args.param: getattr(mp, args.param)})
            toy_graph = build_squeezenet(toy, config.variant, dataset.image_shape)
            return dse.train_toy(toy_graph, dataset, train_cfg).accuracy

        hook = toy_accuracy

    sweep = dse.sweep_sr if args.param == "sr" else dse.sweep_pct3x3
    base = config.metaparams if args.arch else None
    result = sweep(base, unique, config.variant, train_hook=hook, workers=args.workers)
    for row in result.rows:
        acc = "" if row.toy_accuracy is None else f"  toy_accuracy={row.toy_accuracy:.4f}"
        print(f"{args.param}={row.value!r}  params={row.total_params}  "
              f"size={_mb(row.size_bytes)}{acc}")
    io.emit_csv(result, args.out)
    print(f"wrote {args.out}")
    if not args.no_plot:
        from .plotting import figure_path, plot_sweep

        fig = figure_path(args.out)
        plot_sweep(result, fig)
        print(f"wrote {fig}")
    return 0


def cmd_compress(args) -> int:
    config = _load_config(args.arch)
    graph = _graph(config)
    if args.weights:
        weights = io.load_weights(args.weights, graph)
    else:
        weights = init_params(graph, args.seed)
    cfg = cmp.CompressionConfig(args.density, args.bits, args.index_bits, args.huffman)
    report = cmp.compress_model(graph, weights, cfg, int(round(args.baseline_mb * dse.MB)))
    print(f"config: density={cfg.density!r} codebook_bits={cfg.codebook_bits} "
          f"index_bits={cfg.index_bits} huffman={'on' if cfg.entropy_code else 'off'}")
    print(f"layers: {len(report.layers)}")
    print(f"nonzeros: {sum(layer.n_nonzero for layer in report.layers)} "
          f"fillers: {sum(layer.n_fillers for layer in report.layers)}")
    print(f"dense size: {report.dense_bytes} bytes ({_mb(report.dense_bytes)})")
    print(f"compressed size: {report.compressed_bytes} bytes ({_mb(report.compressed_bytes)})")
    print(f"ratio vs dense: {report.dense_ratio:.2f}x")
    print(f"ratio vs baseline {args.baseline_mb!r} MB: {report.ratio:.1f}x")
    if args.out:
        cmp.write_container(args.out, report.layers)
        decoded = cmp.decompress_model(cmp.read_container(args.out), graph)
        exact = all(np.array_equal(decoded[layer.name].data.reshape(-1), cmp.decode_layer(layer))
                    for layer in report.layers)
        print(f"wrote {args.out} (round trip {'exact' if exact else 'MISMATCH'})")
        if not exact:
            raise SqueezeKitError("container round trip does not reproduce the quantized weights")
    if args.csv:
        io.emit_csv(report, args.csv)
        print(f"wrote {args.csv}")
        if not args.no_plot:
            from .plotting import figure_path, plot_compression

            fig = figure_path(args.csv)
            plot_compression(report, fig)
            print(f"wrote {fig}")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="squeezekit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    mp = Metaparams()

    g = sub.add_parser("generate", help="expand metaparameters into an architecture file")
    g.add_argument("--base-e", type=int, default=mp.base_e)
    g.add_argument("--incr-e", type=int, default=mp.incr_e)
    g.add_argument("--freq", type=int, default=mp.freq)
    g.add_argument("--pct3x3", type=float, default=mp.pct3x3)
    g.add_argument("--sr", type=float, default=mp.sr)
    g.add_argument("--n-fire", type=int, default=mp.n_fire_modules)
    g.add_argument("--variant", default="vanilla",
                   help="vanilla | simple-bypass | complex-bypass")
    g.add_argument("--complex-placement", choices=COMPLEX_PLACEMENTS, default="even")
    g.add_argument("--classes", type=int, default=mp.head.classes)
    g.add_argument("--stem-filters", type=int, default=mp.stem.filters)
    g.add_argument("--stem-kernel", type=int, default=mp.stem.kernel)
    g.add_argument("--stem-stride", type=int, default=mp.stem.stride)
    g.add_argument("--stem-pad", type=int, default=mp.stem.pad)
    g.add_argument("--input-shape", type=_shape, default=DEFAULT_INPUT_SHAPE)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("describe", help="per-layer table of an architecture")
    d.add_argument("--arch")
    d.add_argument("--input-shape", type=_shape, default=DEFAULT_INPUT_SHAPE)
    d.set_defaults(func=cmd_describe)

    t = sub.add_parser("train", help="train on the synthetic toy task or an IDX dataset")
    t.add_argument("--arch", help="architecture file (default: scaled-down toy SqueezeNet)")
    t.add_argument("--dataset", default="synthetic",
                   help="'synthetic' or a directory holding images.idx and labels.idx")
    t.add_argument("--samples", type=int, default=1000)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--batch", type=int, default=TrainConfig.batch)
    t.add_argument("--lr", type=float, default=0.04,
                   help="initial learning rate (reference schedule 0.04; toy runs use 0.02)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--weights-out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="model size across SR or pct3x3 values")
    s.add_argument("--param", choices=("sr", "pct3x3"), required=True)
    s.add_argument("--values", required=True, help="comma separated, e.g. 0.125,0.5,0.75")
    s.add_argument("--out", required=True, help="CSV path; the figure goes next to it")
    s.add_argument("--arch", help="base architecture (default: reference metaparameters)")
    s.add_argument("--train-toy", action="store_true",
                   help="add a toy-task accuracy column (scaled-down network, not ImageNet)")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--batch", type=int, default=TrainConfig.batch)
    s.add_argument("--lr", type=float, default=TrainConfig.initial_lr)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compress", help="prune, quantize and size a model")
    c.add_argument("--arch")
    c.add_argument("--weights", help="SQZW file (default: seeded random initialisation)")
    c.add_argument("--density", type=float, default=0.33)
    c.add_argument("--bits", type=int, default=8)
    c.add_argument("--index-bits", type=int, default=4)
    c.add_argument("--huffman", action="store_true")
    c.add_argument("--baseline-mb", type=float, default=240.0)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out", help="SQZC container path")
    c.add_argument("--csv", help="per-layer CSV report; the figure goes next to it")
    c.add_argument("--no-plot", action="store_true")
    c.set_defaults(func=cmd_compress)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _seed_default()
        return args.func(args)
    except UsageError as exc:
        print(f"error[{exc.tag}]: {exc}", file=sys.stderr)
        return 2
    except SqueezeKitError as exc:
        print(f"error[{exc.tag}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
