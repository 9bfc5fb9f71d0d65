"""Command-line entry point: ``sketchpress <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, container, finetune, importance
from .codec import compress_tensor, decompress_tensor, tensor_report
from .importance import Granularity
from .quant import DEFAULT_BASE_WIDTH, QuantSpec
from .sketch import SketchConfig, Variant


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sketchpress", description="Index-free sketch compression of weight tensors.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compress", help="compress a tensor file into a sketch file")
    c.add_argument("--input", required=True, type=Path)
    c.add_argument("--rate", required=True, type=float, help="state elements per weight, e.g. 0.125")
    c.add_argument("--rows", type=int, default=3)
    c.add_argument("--seed", type=_seed, default=0)
    c.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.ABS_MAX_MIN.value)
    c.add_argument("--granularity", choices=[g.value for g in Granularity], default="uniform")
    c.add_argument("--importance", type=Path, help="1-D score tensor, one score per unit")
    c.add_argument("--buckets", type=int, default=0, help="bucket importance into N quantile classes")
    c.add_argument("--quant", choices=["none", "q8", "q4"], default="none")
    c.add_argument("--group-size", type=int, default=128)
    c.add_argument("--topk", type=int, default=0)
    c.add_argument("--floor", type=int, default=importance.DEFAULT_FLOOR)
    c.add_argument("--test-hash", action="store_true", help="identity hash (address mod columns)")
    c.add_argument("--base-width", type=int, default=DEFAULT_BASE_WIDTH)
    c.add_argument("-o", "--output", required=True, type=Path)

    d = sub.add_parser("decompress", help="rebuild a dense tensor from a sketch file")
    d.add_argument("input", type=Path)
    d.add_argument("-o", "--output", required=True, type=Path)

    s = sub.add_parser("stats", help="error report of a sketch against its original tensor")
    s.add_argument("--original", required=True, type=Path)
    s.add_argument("--sketch", required=True, type=Path)
    s.add_argument("--json", type=Path, help="also write the report as JSON")

    b = sub.add_parser("bound", help="bucket-minimum lower bound and its Monte Carlo coverage")
    b.add_argument("--p", type=float, required=True)
    b.add_argument("--dist", choices=["normal", "laplace", "empirical"], default="normal")
    b.add_argument("--data", type=Path, help="tensor file for --dist empirical")
    b.add_argument("--k", type=int, required=True)
    b.add_argument("--m", type=int, required=True)
    b.add_argument("--trials", type=int, default=10_000, help="minimum occupied buckets to sample")
    b.add_argument("--seed", type=_seed, default=0)

    cmp_ = sub.add_parser("compare", help="AbsMaxMin vs AbsMinMax vs CountMin at one budget")
    cmp_.add_argument("--input", required=True, type=Path)
    cmp_.add_argument("--rate", type=float, default=0.5)
    cmp_.add_argument("--rows", type=int, default=3)
    cmp_.add_argument("--seed", type=_seed, default=0)

    i = sub.add_parser("importance", help="mean squared activation per input component")
    i.add_argument("--activations", required=True, type=Path, help="N x d activation tensor")
    i.add_argument("--granularity", choices=["row", "layer"], default="row")
    i.add_argument("-o", "--output", type=Path)

    f = sub.add_parser("demo-finetune", help="train a toy MLP through a sketch")
    f.add_argument("--mode", choices=["ste", "aggregated", "uncompressed"], default="ste")
    f.add_argument("--steps", type=int, default=2000)
    f.add_argument("--rate", type=float, default=0.5)
    f.add_argument("--rows", type=int, default=3)
    f.add_argument("--width", type=int, default=64)
    f.add_argument("--lr", type=float, default=1e-2)
    f.add_argument("--pretrain-steps", type=int, default=3000)
    f.add_argument("--seed", type=_seed, default=0)

    m = sub.add_parser("memest", help="peak memory with resident sketches vs dense layers")
    m.add_argument("--layers", required=True, type=_int_list, help="bytes per layer, comma separated")
    m.add_argument("--sketches", required=True, type=_int_list, help="bytes per sketch, comma separated")
    return p


def _cmd_compress(a, out) -> None:
    tensor = container.read_tensor(a.input)
    profile = None
    if a.importance is not None:
        scores = container.read_tensor(a.importance)
        if scores.ndim != 1:
            raise CliError(f"importance tensor must be 1-D, got shape {scores.shape}")
        profile = importance.ImportanceProfile(Granularity(a.granularity), scores)
        if a.buckets:
            profile = importance.bucket_scores(profile, a.buckets)
    ct = compress_tensor(
        tensor,
        rate=a.rate,
        rows=a.rows,
        seed=a.seed,
        variant=Variant(a.variant),
        granularity=Granularity(a.granularity),
        importance=profile,
        quant=QuantSpec.parse(a.quant, a.group_size),
        topk=a.topk,
        floor=a.floor,
        test_hash=a.test_hash,
    )
    data = container.encode_sketch(ct)
    a.output.write_bytes(data)
    input_bytes = tensor.size * 4
    print(f"units={len(ct.units)}", file=out)
    print(f"state_elements={ct.state_elements}", file=out)
    print(f"outliers={len(ct.outliers)}", file=out)
    print(f"element_rate={ct.element_rate:.6g}", file=out)
    print(f"payload_rate={container.payload_bytes(ct) / input_bytes:.6g}", file=out)
    print(f"file_bytes={len(data)}", file=out)
    print(f"equivalent_bits={ct.equivalent_bits(a.base_width):.6g}", file=out)


def _cmd_decompress(a, out) -> None:
    ct = container.read_sketch(a.input)
    container.write_tensor(a.output, decompress_tensor(ct))
    print(f"shape={'x'.join(map(str, ct.shape))}", file=out)


def _cmd_stats(a, out) -> None:
    original = container.read_tensor(a.original)
    ct = container.read_sketch(a.sketch)
    if tuple(original.shape) != ct.shape:
        raise CliError(f"original shape {original.shape} does not match sketch shape {ct.shape}")
    rep = tensor_report(original, ct)
    out.write(rep.to_text())
    if a.json is not None:
        a.json.write_text(rep.to_json())


def _cmd_bound(a, out) -> None:
    if a.dist == "normal":
        dist = analysis.Distribution.normal()
    elif a.dist == "laplace":
        dist = analysis.Distribution.laplace()
    else:
        if a.data is None:
            raise CliError("--dist empirical needs --data")
        dist = analysis.Distribution.empirical(container.read_tensor(a.data))
    load = max(1, round(a.k / a.m))
    bound = analysis.error_lower_bound(a.p, load, dist.ppf)
    check = analysis.verify_bound(dist, a.k, a.m, a.p, a.trials, a.seed)
    print(f"p={a.p}", file=out)
    print(f"mean_load={a.k / a.m:.6g}", file=out)
    print(f"lower_bound_at_mean_load={bound:.9g}", file=out)
    print(f"coverage={check.coverage:.6f}", file=out)
    print(f"buckets={check.buckets}", file=out)
    print(f"std_error={check.std_error:.6f}", file=out)


def _cmd_compare(a, out) -> None:
    w = container.read_tensor(a.input).ravel()
    columns = max(1, int(a.rate * w.size) // a.rows)
    configs = {v: SketchConfig(columns, a.rows, v, a.seed) for v in Variant}
    for v, rep in analysis.compare_variants(w, configs).items():
        print(
            f"variant={v.value} mean_relative_error={rep.mean_relative_error:.6g} "
            f"untouched_fraction={rep.untouched_fraction:.6g} sign_error_rate={rep.sign_error_rate:.6g} "
            f"unoccupied_fraction={rep.unoccupied_fraction:.6g}",
            file=out,
        )


def _cmd_importance(a, out) -> None:
    acts = container.read_tensor(a.activations)
    prof = importance.activation_importance(acts.reshape(acts.shape[0], -1) if acts.ndim > 1 else acts)
    scores = prof.scores
    if a.granularity == "layer":
        scores = np.array([importance.layer_importance(prof)])
    if a.output is not None:
        container.write_tensor(a.output, scores.astype(np.float32))
    print(f"samples={prof.sample_count}", file=out)
    print(f"units={scores.size}", file=out)
    print(f"mean_score={scores.mean():.9g}", file=out)


def _cmd_demo(a, out) -> None:
    sizes = [8, a.width, a.width, 4]
    task = finetune.make_task(sizes, seed=a.seed)
    model = finetune.pretrain(sizes, task, steps=a.pretrain_steps, seed=a.seed)
    mode = {
        "ste": finetune.Mode.STE_MULTIROW,
        "aggregated": finetune.Mode.AGGREGATED_SINGLEROW,
        "uncompressed": finetune.Mode.UNCOMPRESSED,
    }[a.mode]
    cfg = finetune.DemoConfig(rate=a.rate, rows=a.rows, seed=a.seed)
    try:
        run = finetune.train(model, mode, a.steps, task, cfg, lr=a.lr)
    except finetune.TrainingDiverged as exc:
        raise CliError(str(exc)) from None
    out.write(run.table())


def _cmd_memest(a, out) -> None:
    peak, baseline = finetune.peak_memory_estimate(a.layers, a.sketches)
    print(f"peak_bytes={peak}", file=out)
    print(f"baseline_bytes={baseline}", file=out)
    print(f"reduction={1 - peak / baseline:.6g}", file=out)


_COMMANDS = {
    "compress": _cmd_compress,
    "decompress": _cmd_decompress,
    "stats": _cmd_stats,
    "bound": _cmd_bound,
    "compare": _cmd_compare,
    "importance": _cmd_importance,
    "demo-finetune": _cmd_demo,
    "memest": _cmd_memest,
}


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        _COMMANDS[args.command](args, out)
    except (CliError, container.FormatError, ValueError, OSError, IndexError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"sketchpress: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
