"""Benchmark harness for the attention variants.

Measures deterministic FLOP and byte counters plus wall time for the
exact dense operator, the two hierarchical variants, and the dense
loop emulation, across sequence-length and (m, p) sweeps, and fits
log-log scaling exponents. Counters are the primary metric: they are
seed- and machine-independent, so the asymptotic claims can be verified
portably; wall time is reported as a secondary, hardware-specific number.

``peak_bytes`` is the number of bytes allocated by the counted primitives
during one forward (plus backward when requested). A forward pass keeps
its tape alive, so cumulative allocation is a faithful, deterministic
proxy for the peak score-storage footprint.

CLI (installed as ``bench``)::

    bench run --variants dense,fma,fma-linear --n 256,512,1024,2048 \
              --m 32 --p 4 --mode causal --csv out.csv
    bench sweep-mp --n 512 --m 32,64 --p 2,4,8 --mode causal --csv sweep.csv
    bench fit out.csv
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import attention, lm, oracle
from .downsampler import init_weights
from .hierarchy import build
from .tensor_core import counters

__all__ = [
    "BENCH_VARIANTS",
    "CSV_HEADER",
    "RunRecord",
    "run",
    "sweep_mp",
    "complexity_fit",
    "stored_entries",
    "write_csv",
    "read_csv",
    "main",
]

BENCH_VARIANTS = ("dense", "fma", "fma-linear", "emulation")
CSV_HEADER = ("variant", "mode", "n", "m", "p", "L", "flops", "peak_bytes", "wall_s", "reps", "seed")


@dataclass(frozen=True)
class RunRecord:
    variant: str
    mode: str
    n: int
    m: int
    p: int
    L: int
    flops: int
    peak_bytes: int
    wall_s: float
    reps: int
    seed: int


def _inputs(n: int, d: int, seed: int, dtype=np.float32):
    rng = np.random.Generator(np.random.PCG64(seed))
    return tuple(rng.standard_normal((n, d)).astype(dtype) for _ in range(3))


def _forward_fn(variant: str, mode: str, n: int, m: int, p: int, d: int, seed: int):
    """Build the closure executed per repetition, or raise for invalid configs."""
    q, k, v = _inputs(n, d, seed)
    if variant == "dense":
        def fn():
            return attention.dense_forward(q, k, v, mode)
        return fn
    config, ilist = build(n, m, p, mode)
    streams = ("k", "v", "q") if variant == "fma-linear" else ("k", "v")
    weights = init_weights(config, d, streams=streams, seed=seed, dtype=np.float32)
    if variant == "fma":
        def fn():
            return attention.forward(q, k, v, weights, config, ilist)
        return fn
    if variant == "fma-linear":
        def fn():
            return attention.forward_linear(q, k, v, weights, config, ilist)
        return fn
    if variant == "emulation":
        q64, k64, v64 = (a.astype(np.float64) for a in (q, k, v))
        def fn():
            return oracle.dense_fma_emulation(q64, k64, v64, weights, config), None
        return fn
    raise ValueError(f"unknown variant {variant!r}, expected one of {BENCH_VARIANTS}")


def _run_one(
    variant: str, mode: str, n: int, m: int, p: int, d: int, reps: int, seed: int, with_backward: bool
) -> RunRecord:
    fn = _forward_fn(variant, mode, n, m, p, d, seed)
    L = 0 if variant == "dense" else build(n, m, p, mode)[0].L
    snapshots = []
    times = []
    for _ in range(reps):
        counters.reset()
        t0 = time.perf_counter()
        out, tape = fn()
        if with_backward and tape is not None:
            attention.backward(tape, np.ones_like(out))
        times.append(time.perf_counter() - t0)
        snapshots.append(counters.snapshot())
    if len(set(snapshots)) != 1:
        raise AssertionError(f"nondeterministic counters across repetitions: {snapshots}")
    flops, nbytes = snapshots[0]
    return RunRecord(
        variant=variant,
        mode=mode,
        n=n,
        m=m,
        p=p,
        L=L,
        flops=flops,
        peak_bytes=nbytes,
        wall_s=float(np.median(times)),
        reps=reps,
        seed=seed,
    )


def run(
    variants,
    ns,
    m: int,
    p: int,
    mode: str = "causal",
    d: int = 64,
    reps: int = 3,
    seed: int = 0,
    with_backward: bool = False,
) -> list[RunRecord]:
    """Measure every (variant, n) cell; invalid cells are reported and skipped."""
    records = []
    for variant in variants:
        for n in ns:
            try:
                records.append(_run_one(variant, mode, n, m, p, d, reps, seed, with_backward))
            except ValueError as exc:
                print(f"skipping {variant} n={n} m={m} p={p}: {exc}", file=sys.stderr)
    return records


def stored_entries(variant: str, n: int, m: int, p: int, mode: str) -> int:
    """Stored score entries for one forward: n^2 for dense, compact count otherwise."""
    if variant == "dense":
        return n * n
    config, ilist = build(n, m, p, mode)
    streams = ("k", "v", "q") if variant == "fma-linear" else ("k", "v")
    weights = init_weights(config, 4, streams=streams, seed=0, dtype=np.float64)
    q, k, v = _inputs(n, 4, 0, dtype=np.float64)
    fwd = attention.forward_linear if variant == "fma-linear" else attention.forward
    _, tape = fwd(q, k, v, weights, config, ilist)
    return tape.probs.entry_count()


def write_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [r.variant, r.mode, r.n, r.m, r.p, r.L, r.flops, r.peak_bytes,
                 f"{r.wall_s:.6f}", r.reps, r.seed]
            )


def read_csv(path) -> list[RunRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(
                RunRecord(
                    variant=row["variant"],
                    mode=row["mode"],
                    n=int(row["n"]),
                    m=int(row["m"]),
                    p=int(row["p"]),
                    L=int(row["L"]),
                    flops=int(row["flops"]),
                    peak_bytes=int(row["peak_bytes"]),
                    wall_s=float(row["wall_s"]),
                    reps=int(row["reps"]),
                    seed=int(row["seed"]),
                )
            )
    return records


def complexity_fit(records) -> dict[str, float]:
    """Least-squares slope of log(FLOPs) against log(n), per variant."""
    by_variant: dict[str, list[RunRecord]] = {}
    for r in records:
        by_variant.setdefault(r.variant, []).append(r)
    slopes = {}
    for variant, rows in by_variant.items():
        sizes = sorted({r.n for r in rows})
        if len(sizes) < 4:
            raise ValueError(f"variant {variant!r} has {len(sizes)} sizes; need at least 4")
        xs = np.log([r.n for r in rows])
        ys = np.log([r.flops for r in rows])
        slopes[variant] = float(np.polyfit(xs, ys, 1)[0])
    return slopes


def sweep_mp(
    n: int,
    ms,
    ps,
    mode: str = "causal",
    train: bool = False,
    data: str | None = None,
    steps: int = 300,
    seed: int = 0,
):
    """Stored-entry counts (and optionally desk-scale bpc) per (m, p) cell."""
    rows = []
    for m in ms:
        for p in ps:
            try:
                config, _ = build(n, m, p, mode)
            except ValueError as exc:
                print(f"skipping m={m} p={p}: {exc}", file=sys.stderr)
                continue
            entries = stored_entries("fma", n, m, p, mode)
            bpc = ""
            if train:
                if data is None:
                    raise ValueError("--train requires --data")
                model_cfg = lm.ModelConfig(context=n, m=m, p=p, variant="fma", mode=mode)
                train_split, valid_split, _ = lm.ingest(data)
                model, _ = lm.train(model_cfg, train_split, steps, seed)
                bpc = f"{lm.evaluate(model, valid_split).value:.4f}"
            rows.append({"n": n, "m": m, "p": p, "L": config.L, "entries": entries, "bpc": bpc})
    return rows


def _write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=("n", "m", "p", "L", "entries", "bpc"), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="attention benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="measure FLOPs/bytes/wall time across sizes")
    r.add_argument("--variants", default="dense,fma,fma-linear")
    r.add_argument("--n", required=True, help="comma-separated sequence lengths")
    r.add_argument("--m", type=int, default=32)
    r.add_argument("--p", type=int, default=4)
    r.add_argument("--mode", choices=("causal", "bidirectional"), default="causal")
    r.add_argument("--d", type=int, default=64)
    r.add_argument("--reps", type=int, default=3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--backward", action="store_true", help="measure forward+backward")
    r.add_argument("--csv", default=None)

    s = sub.add_parser("sweep-mp", help="stored entries (and optional bpc) over (m, p)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--m", required=True, help="comma-separated group sizes")
    s.add_argument("--p", required=True, help="comma-separated ranks")
    s.add_argument("--mode", choices=("causal", "bidirectional"), default="causal")
    s.add_argument("--train", action="store_true")
    s.add_argument("--data", default=None)
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", default=None)

    f = sub.add_parser("fit", help="fit log-log FLOP slopes from a run CSV")
    f.add_argument("csv_path")

    args = parser.parse_args(argv)
    if args.command == "run":
        records = run(
            variants=[v.strip() for v in args.variants.split(",") if v.strip()],
            ns=_int_list(args.n),
            m=args.m,
            p=args.p,
            mode=args.mode,
            d=args.d,
            reps=args.reps,
            seed=args.seed,
            with_backward=args.backward,
        )
        for rec in records:
            print(
                f"{rec.variant:10s} {rec.mode:13s} n={rec.n:6d} flops={rec.flops:14d} "
                f"bytes={rec.peak_bytes:12d} wall={rec.wall_s:.4f}s"
            )
        if args.csv:
            write_csv(records, args.csv)
            print(f"wrote {args.csv}")
        return 0

    if args.command == "sweep-mp":
        rows = sweep_mp(
            n=args.n,
            ms=_int_list(args.m),
            ps=_int_list(args.p),
            mode=args.mode,
            train=args.train,
            data=args.data,
            steps=args.steps,
            seed=args.seed,
        )
        for row in rows:
            print(f"m={row['m']:4d} p={row['p']:3d} L={row['L']} entries={row['entries']:10d} bpc={row['bpc'] or '-'}")
        if args.csv:
            _write_sweep_csv(rows, args.csv)
            print(f"wrote {args.csv}")
        return 0

    records = read_csv(args.csv_path)
    slopes = complexity_fit(records)
    for variant, slope in sorted(slopes.items()):
        print(f"{variant:12s} log-log FLOP slope vs n: {slope:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
