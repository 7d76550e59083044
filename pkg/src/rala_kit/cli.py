"""Command line entry point: ``rala-kit {rank,bench,gradcheck,train,info}``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from contextlib import nullcontext

from . import analysis, gradcheck, trainer
from .attention import KERNELS, VARIANTS, AttentionConfig
from .backbone import PRESETS, count_flops, count_params, init_weights, preset
from .linalg import DEFAULT_REL_EPS, NumericalError, rng

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None

    return parse


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=0, help="64-bit seed (default 0)")
    common.add_argument("--out", default=None, help="output path (default: standard output)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    parser = argparse.ArgumentParser(prog="rala-kit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rank", parents=[common], help="numerical rank of attention intermediates")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="trace every block of a randomly initialised backbone instead of one constructed layer")
    p.add_argument("--variant", choices=VARIANTS, default="rala")
    p.add_argument("--kernel", choices=KERNELS, default="elu1")
    p.add_argument("--n", type=int, default=196, help="token count")
    p.add_argument("--d", type=int, default=64, help="head width")
    p.add_argument("--key-rank", type=int, default=8, help="rank of kernel(K); 0 leaves K unconstrained")
    p.add_argument("--rel-eps", type=float, default=DEFAULT_REL_EPS)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--no-kv-augment", action="store_true")
    p.add_argument("--no-out-augment", action="store_true")

    p = sub.add_parser("bench", parents=[common], help="attention wall time versus token count")
    p.add_argument("--variants", type=_csv_list(str), default=["softmax", "rala"])
    p.add_argument("--n-list", type=_csv_list(int), default=[196, 392, 784, 1568, 3136])
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--ops", default="all", help="'all' or a comma-separated list of op names")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-5)

    p = sub.add_parser("train", parents=[common], help="toy-scale training on synthetic images")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    src.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--target-accuracy", type=float, default=None)
    p.add_argument("--no-kv-augment", action="store_true")
    p.add_argument("--no-out-augment", action="store_true")
    p.add_argument("--checkpoint", default=None, help="write a checkpoint here")

    p = sub.add_parser("info", parents=[common], help="parameter and FLOP counts of a preset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="ravlt-t")
    p.add_argument("--resolution", type=int, default=None)
    return parser


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _report_config(args, extra=None) -> None:
    resolved = {k: v for k, v in vars(args).items()}
    if extra:
        resolved.update(extra)
    print("resolved config: " + json.dumps(resolved, sort_keys=True, default=str), file=sys.stderr)


def run_rank(args) -> int:
    if args.preset is not None:
        config = preset(args.preset, variant=args.variant, kernel=args.kernel,
                        kv_augment=not args.no_kv_augment, out_augment=not args.no_out_augment)
        _report_config(args, {"model": config.to_dict()})
        weights = init_weights(config, args.seed)
        r = config.input_resolution
        image = rng(args.seed, "cli.rank.image").standard_normal((1, r, r, 3))
        trace = analysis.layer_rank_trace(config, weights, image, args.rel_eps, args.head, args.seed)
    else:
        key_rank = args.key_rank if args.key_rank > 0 else None
        if key_rank is not None and not 1 <= key_rank <= min(args.n, args.d):
            raise UsageError(f"--key-rank must lie in [1, {min(args.n, args.d)}]")
        cfg = AttentionConfig(variant=args.variant, head_dim=args.d, kernel=args.kernel,
                              kv_augment=not args.no_kv_augment, out_augment=not args.no_out_augment)
        _report_config(args, {"attention": cfg.to_dict()})
        trace = analysis.constructed_rank_trace(args.variant, args.n, args.d, key_rank, args.seed,
                                                args.rel_eps, cfg)
    print(f"trace fingerprint {trace.fingerprint} (head {trace.head})", file=sys.stderr)
    _emit(analysis.format_table(trace.records, args.format), args.out)
    return 0


def run_bench(args) -> int:
    if len(args.n_list) < 4:
        raise UsageError("--n-list needs at least 4 token counts to fit a slope")
    if any(b <= a for a, b in zip(args.n_list, args.n_list[1:])):
        raise UsageError("--n-list must be strictly increasing")
    if args.n_list[-1] < 16 * args.n_list[0]:
        raise UsageError("--n-list must span at least a factor of 16")
    for v in args.variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {VARIANTS}")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.repeats == 1:
        print("warning: --repeats 1 gives a single unsmoothed timing per point", file=sys.stderr)
    _report_config(args)
    records = analysis.scaling_benchmark(args.variants, args.n_list, args.d, args.repeats, args.seed)
    _emit(analysis.format_table(records, args.format), args.out)
    wall = analysis.fitted_slopes(records)
    flops = analysis.fitted_slopes(records, "flops")
    for v in args.variants:
        print(f"slope {v}: wall_time {wall[v]:.3f}, analytic_flops {flops[v]:.3f}", file=sys.stderr)
    return 0


def run_gradcheck(args) -> int:
    ops = "all" if args.ops == "all" else [o.strip() for o in args.ops.split(",") if o.strip()]
    unknown = [] if ops == "all" else [o for o in ops if o not in gradcheck.CASES]
    if unknown:
        raise UsageError(f"unknown ops {unknown}; known: {', '.join(gradcheck.CASES)}")
    if not 0 < args.h <= 1e-2 or args.trials < 1:
        raise UsageError("--h must lie in (0, 1e-2] and --trials must be >= 1")
    _report_config(args)
    reports = gradcheck.run_gradcheck(ops, args.trials, args.h, args.seed)
    rows = [{"op": r.op, "max_rel_error": r.max_rel_error, "h": r.h, "trials": args.trials,
             "passed": r.max_rel_error < GRADCHECK_TOL} for r in reports]
    _emit(_dict_table(rows, args.format), args.out)
    worst = max(r.max_rel_error for r in reports)
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})", file=sys.stderr)
    return 0 if worst < GRADCHECK_TOL else 1


def _train_config(args) -> trainer.TrainConfig:
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        data = {"preset": args.preset or "toy"}
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr,
                 "n_samples": args.n_samples, "target_accuracy": args.target_accuracy}
    data.update({k: v for k, v in overrides.items() if v is not None})
    data["seed"] = args.seed
    model_overrides = dict(data.get("model_overrides", {}))
    if args.no_kv_augment:
        model_overrides["kv_augment"] = False
    if args.no_out_augment:
        model_overrides["out_augment"] = False
    data["model_overrides"] = model_overrides
    try:
        return trainer.TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def run_train(args) -> int:
    config = _train_config(args)
    _report_config(args, {"train": config.to_dict(), "model": config.model_config().to_dict()})
    result = trainer.train_loop(
        config, on_epoch=lambda m: print(f"epoch {m.epoch} loss {m.loss:.4f} acc {m.accuracy:.3f}", file=sys.stderr)
    )
    history = result.history
    if args.format == "json":
        _emit(json.dumps([vars(m) for m in history], indent=2) + "\n", args.out)
    else:
        _emit(trainer.history_csv(history), args.out)
    if args.checkpoint:
        metrics = {"final_accuracy": result.final_accuracy, "final_loss": history[-1].loss,
                   "epochs_run": len(history)}
        trainer.save_checkpoint(args.checkpoint, result.model_config, result.weights, metrics)
    return 0


def run_info(args) -> int:
    config = preset(args.preset)
    resolution = args.resolution or config.input_resolution
    _report_config(args, {"model": config.to_dict()})
    params = count_params(config)
    cost = count_flops(config, resolution)
    info = {
        "preset": args.preset,
        "stage_blocks": list(config.stage_blocks),
        "stage_channels": list(config.stage_channels),
        "stage_heads": list(config.stage_heads),
        "ffn_ratio": config.ffn_ratio,
        "resolution": resolution,
        "params": params.parameter_count,
        "macs": cost.macs,
        "flops_2x_macs": cost.flops,
    }
    if args.format == "json":
        _emit(json.dumps(info, indent=2) + "\n", args.out)
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["key", "value"])
        for k, v in info.items():
            writer.writerow([k, json.dumps(v) if isinstance(v, list) else v])
        _emit(buf.getvalue(), args.out)
    return 0


def _dict_table(rows, fmt):
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(rows[0]))
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row.values()])
    return buf.getvalue()


COMMANDS = {"rank": run_rank, "bench": run_bench, "gradcheck": run_gradcheck, "train": run_train, "info": run_info}


def _thread_cap():
    raw = os.environ.get("RALA_KIT_THREADS", "0")
    try:
        threads = int(raw)
    except ValueError:
        raise UsageError(f"RALA_KIT_THREADS must be an integer, got {raw!r}") from None
    if threads <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_cap():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ArithmeticError, OSError, trainer.CheckpointError) as exc:
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
