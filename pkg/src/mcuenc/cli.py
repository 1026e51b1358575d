"""Operator-facing command-line driver.

Subcommands: run (inference under a budget), plan (tile-size planning),
inspect (model metadata and parameter counts), bench (peak-memory and
op-count tables across sequence lengths).

Exit codes: 0 ok, 2 usage, 3 out of memory / infeasible budget,
4 bad model file.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .arena import Arena, OutOfMemory
from .embed_rt import embedding_param_count
from .fileformat import FormatError, load_model
from .kernels import OpCounts
from .model import param_counts
from .sched import (
    InfeasibleBudget,
    SchedulePlan,
    peak_memory_model,
    plan_tile_size,
    run_encoder,
    run_encoder_naive,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_OOM = 3
EXIT_BAD_MODEL = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        self.message = message
        super().__init__(message)


def _load(path):
    try:
        return load_model(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_BAD_MODEL, f"cannot open model: {e}")
    except FormatError as e:
        raise CliError(EXIT_BAD_MODEL, f"bad model file: {e}")


def _read_tokens(path):
    try:
        with open(path) as f:
            return [int(tok) for tok in f.read().split()]
    except (OSError, ValueError) as e:
        raise CliError(EXIT_USAGE, f"cannot read token file: {e}")


def _cmd_run(args) -> dict:
    model = _load(args.model)
    tokens = _read_tokens(args.input)
    if not tokens:
        raise CliError(EXIT_USAGE, "empty token input")
    s = len(tokens)
    budget = args.sram_kb * 1024

    if args.naive:
        stage_pred = peak_memory_model(model.config, s, s, "naive")
        plan = SchedulePlan(t=s, stage_peaks=stage_pred, mode="naive")
    elif args.tile == "auto":
        try:
            plan = plan_tile_size(model.config, s, budget)
        except InfeasibleBudget as e:
            raise CliError(
                EXIT_OOM,
                f"infeasible budget: {e.budget} B < minimum {e.min_required} B at t=1",
            )
    else:
        t = int(args.tile)
        if not (1 <= t <= s):
            raise CliError(EXIT_USAGE, f"tile size {t} outside [1, {s}]")
        plan = SchedulePlan(
            t=t, stage_peaks=peak_memory_model(model.config, s, t, "tiled"), mode="tiled"
        )

    arena = Arena(budget)
    counts = OpCounts()
    start = time.perf_counter()
    try:
        if plan.mode == "naive":
            logits, _ = run_encoder_naive(tokens, model, arena, counts=counts)
        else:
            logits, _ = run_encoder(tokens, model, plan, arena, counts=counts)
    except OutOfMemory as e:
        raise CliError(EXIT_OOM, str(e))
    wall = time.perf_counter() - start

    stats = arena.stats()
    stages = {
        name: {"predicted": int(plan.stage_peaks[name]),
               "measured": int(stats.stage_peaks.get(name, 0))}
        for name in plan.stage_peaks
    }
    for name, entry in stages.items():
        if entry["predicted"] != entry["measured"]:
            raise CliError(
                EXIT_OOM,
                f"internal error: stage '{name}' measured {entry['measured']} B, "
                f"predicted {entry['predicted']} B",
            )
    if args.trace:
        with open(args.trace, "w") as f:
            f.write(arena.trace_jsonl())
    return {
        "logits": [float(x) for x in logits],
        "predicted_class": int(np.argmax(logits)),
        "mode": plan.mode,
        "tile": plan.t,
        "stages": stages,
        "peak_bytes": stats.peak_bytes,
        "budget_bytes": budget,
        "op_counts": counts.as_dict(),
        "wall_time_s": wall,
    }


def _cmd_plan(args) -> dict:
    model = _load(args.model)
    budget = args.sram_kb * 1024
    try:
        plan = plan_tile_size(model.config, args.seq_len, budget)
    except InfeasibleBudget as e:
        raise CliError(
            EXIT_OOM, f"infeasible budget: {e.budget} B < minimum {e.min_required} B at t=1"
        )
    return {
        "tile": plan.t,
        "mode": plan.mode,
        "stage_peaks": {k: int(v) for k, v in plan.stage_peaks.items()},
        "peak_bytes": int(max(plan.stage_peaks.values())),
        "budget_bytes": budget,
    }


def _cmd_inspect(args) -> dict:
    model = _load(args.model)
    cfg = model.config
    spec = model.embedding.spec
    counts = param_counts(model)
    return {
        "config": {
            "v": cfg.v, "d": cfg.d, "h": cfg.h, "L": cfg.L,
            "d_ffn": cfg.d_ffn, "s_max": cfg.s_max, "n_cls": cfg.n_cls,
        },
        "clusters": {
            "c": spec.c,
            "sizes": list(spec.sizes),
            "ranks": list(spec.ranks),
        },
        "params": {
            "embedding": counts["embedding"],
            "encoder": counts["encoder"],
            "head": counts["head"],
            "position": counts["position"],
            "total": counts["total"],
        },
    }


def _cmd_bench(args) -> dict:
    model = _load(args.model)
    cfg = model.config
    budget = args.sram_kb * 1024
    seq_lens = [int(s) for s in args.seq_lens.split(",")]
    modes = [m.strip() for m in args.modes.split(",")]
    for m in modes:
        if m not in ("naive", "tiled"):
            raise CliError(EXIT_USAGE, f"unknown mode {m!r}")
    rng = np.random.default_rng(0)
    rows = []
    for s in seq_lens:
        if s > cfg.s_max:
            raise CliError(EXIT_USAGE, f"seq len {s} exceeds model s_max {cfg.s_max}")
        tokens = rng.integers(0, cfg.v, size=s).tolist()
        for mode in modes:
            row = {"seq_len": s, "mode": mode}
            try:
                if mode == "tiled":
                    plan = plan_tile_size(cfg, s, budget)
                    row["tile"] = plan.t
                else:
                    plan = SchedulePlan(
                        t=s, stage_peaks=peak_memory_model(cfg, s, s, "naive"),
                        mode="naive",
                    )
                row["predicted_peak"] = int(max(plan.stage_peaks.values()))
                arena = Arena(budget)
                counts = OpCounts()
                if mode == "naive":
                    run_encoder_naive(tokens, model, arena, counts=counts)
                else:
                    run_encoder(tokens, model, plan, arena, counts=counts)
                row["measured_peak"] = arena.stats().peak_bytes
                row["op_counts"] = counts.as_dict()
                row["status"] = "ok"
            except (InfeasibleBudget, OutOfMemory) as e:
                row["status"] = "oom"
                row["error"] = str(e)
            rows.append(row)
    return {"budget_bytes": budget, "rows": rows}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcuenc", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run inference under an SRAM budget")
    run.add_argument("--model", required=True)
    run.add_argument("--input", required=True, help="whitespace-separated token ids")
    run.add_argument("--sram-kb", type=int, required=True)
    run.add_argument("--tile", default="auto", help="'auto' or an explicit tile size")
    run.add_argument("--naive", action="store_true", help="untiled baseline schedule")
    run.add_argument("--trace", default=None, help="write a JSONL arena trace here")
    run.add_argument("--report", default="json", choices=["json"])
    run.set_defaults(fn=_cmd_run)

    plan = sub.add_parser("plan", help="choose a tile size for a budget")
    plan.add_argument("--model", required=True)
    plan.add_argument("--seq-len", type=int, required=True)
    plan.add_argument("--sram-kb", type=int, required=True)
    plan.set_defaults(fn=_cmd_plan)

    ins = sub.add_parser("inspect", help="print config, clusters, and param counts")
    ins.add_argument("--model", required=True)
    ins.set_defaults(fn=_cmd_inspect)

    bench = sub.add_parser("bench", help="peak-memory and op-count table")
    bench.add_argument("--model", required=True)
    bench.add_argument("--seq-lens", default="64,128,256,512")
    bench.add_argument("--modes", default="naive,tiled")
    bench.add_argument("--sram-kb", type=int, required=True)
    bench.set_defaults(fn=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_USAGE
    try:
        report = args.fn(args)
    except CliError as e:
        print(e.message, file=sys.stderr)
        return e.code
    print(json.dumps(report, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
