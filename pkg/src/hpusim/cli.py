"""Command-line scenario runner.

Exit codes: 0 success, 2 configuration or usage error, 3 a point ran out of
memory, 4 a functional check exceeded its tolerance.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .attention import AttentionError
from .config import ConfigError, load_config
from .kvcache import capacity_report, hpu_pool_sequences
from .metrics import energy_report, mfu_projection, normalize
from .model import (DeviceKind, WorkloadConfig, attention_step_work, kv_bytes_per_token,
                    linear_step_work, softmax_step_work)
from .roofline import crossover_batch, mfu_mbu_curve
from .sim import OutOfMemory, SimulationError, report_json, simulate
from .testvectors import attn_check, write_vectors

EXIT_OK, EXIT_CONFIG, EXIT_OOM, EXIT_TOLERANCE = 0, 2, 3, 4


class UsageError(Exception):
    pass


def parse_int_list(text: str, minimum: int = 1) -> list[int]:
    """``"1,2,8"`` or ``"1-512"`` (every integer) or ``"1-512:pow2"``.

    Returns sorted unique values; anything below ``minimum`` is rejected.
    """
    out = set()
    for part in filter(None, (p.strip() for p in text.split(","))):
        span, _, mode = part.partition(":")
        if mode not in ("", "pow2"):
            raise ValueError(f"unknown range mode {mode!r} in {part!r}")
        if "-" in span:
            lo, hi = (int(x) for x in span.split("-", 1))
            if lo > hi:
                raise ValueError(f"empty range {part!r}")
            if mode == "pow2":
                out.update(1 << k for k in range(hi.bit_length()) if lo <= 1 << k <= hi)
            else:
                out.update(range(lo, hi + 1))
        else:
            out.add(int(span))
    if out and min(out) < minimum:
        raise ValueError(f"values in {text!r} must be >= {minimum}")
    return sorted(out)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _emit(args, name: str, rows: list[dict]) -> Path:
    out = Path(args.out)
    if args.format == "json":
        path = out / f"{name}.json"
        _atomic_write(path, json.dumps(rows, indent=2, sort_keys=True) + "\n")
    else:
        path = out / f"{name}.csv"
        _atomic_write(path, _csv(rows))
    return path


def _fmt(x: float) -> float:
    return float(f"{x:.6g}")


# subcommands --------------------------------------------------------------

def cmd_profile(args, cfg) -> int:
    dev = cfg.device(args.preset or "a100-pcie")
    m = cfg.model(args.model)
    batches = parse_int_list(args.batches)
    if not batches:
        raise UsageError("empty batch sweep")
    me = cfg.calib("roofline", "memory_efficiency", default=0.90)
    ce = cfg.calib("roofline", "compute_efficiency", default=0.80)
    for kernel in ("gemm", "gemv"):
        rows = [dict(batch=p.batch, oi=_fmt(p.oi), time_s=_fmt(p.time), bound=p.bound.value,
                     mfu=_fmt(p.mfu), mbu=_fmt(p.mbu))
                for p in mfu_mbu_curve(m, dev, batches, kernel, args.ctx, False, me, ce)]
        _emit(args, f"roofline_{kernel}", rows)
    oi_rows = [dict(kernel=name, batch=b, flops=w.flops, bytes=w.bytes, oi=_fmt(w.oi))
               for b in (1, batches[-1])
               for name, w in (("linear_step_weights_only", linear_step_work(m, b, True)),
                               ("linear_step", linear_step_work(m, b, False)),
                               ("attention_step", attention_step_work(m, b, args.ctx)),
                               ("softmax_step", softmax_step_work(m, b, args.ctx)))]
    _emit(args, "oi_table", oi_rows)
    cross = []
    for weights_only in (True, False):
        b = crossover_batch(m, dev, weights_only=weights_only)
        cross.append(dict(device=dev.name, kernel="down_proj",
                          accounting="weights_only" if weights_only else "with_activations",
                          perf_per_bw=_fmt(dev.perf_per_bw), crossover_batch=b if b else ""))
    _emit(args, "crossover", cross)
    print(f"{dev.name}: perf/bw {dev.perf_per_bw:.2f}, crossover batch "
          f"{cross[0]['crossover_batch']} (weights only), {cross[1]['crossover_batch']} (with activations)")
    return EXIT_OK


def _point_name(topo_name: str, batch: int, num_hpus: int) -> str:
    return f"{topo_name}_h{num_hpus}_b{batch}"


def cmd_simulate(args, cfg) -> int:
    m = cfg.model(args.model)
    batches = parse_int_list(args.batches)
    if not batches:
        raise UsageError("empty batch sweep")
    policy = cfg.policy(num_subbatches=args.subbatches, partition=args.partition)
    cost, cap, em = cfg.cost_model(), cfg.capacity_kwargs(), cfg.energy_model()
    wl = dict(input_len=args.input_len, output_len=args.output_len)
    topo_name = args.preset or "l40s-4proto"

    base_topo = cfg.topology(args.baseline)
    _, base = simulate(m, cfg.workload(args.workload, batch_size=args.baseline_batch, **wl),
                       base_topo, policy, cost, cap)
    base_eff = energy_report(base, base_topo, em, f"{args.baseline}-b{args.baseline_batch}")

    hpu_counts = parse_int_list(args.hpus, minimum=0) if args.hpus else [None]
    rows, breakdown, status = [], [], EXIT_OK
    for n in hpu_counts:
        topo = cfg.topology(topo_name, n)
        for b in batches:
            w = cfg.workload(args.workload, batch_size=b, **wl)
            name = _point_name(topo_name, b, topo.num_hpus)
            pol = policy
            if args.subbatches is None and policy.num_subbatches > b:
                # preset default, not a user request: shrink rather than fail
                pol = dataclasses.replace(policy, num_subbatches=b)
            try:
                tl, rep = simulate(m, w, topo, pol, cost, cap)
            except OutOfMemory as exc:
                rows.append(dict(topology=topo_name, num_hpus=topo.num_hpus, batch=b, status="oom",
                                 tokens_per_s="", normalized_throughput="", mfu="",
                                 tokens_per_s_per_watt="", normalized_efficiency="",
                                 detail=str(exc)))
                status = EXIT_OOM
                continue
            out = Path(args.out)
            steps = args.timeline_steps if args.timeline_steps > 0 else None
            _atomic_write(out / f"timeline_{name}.csv", tl.to_csv(max_step=steps))
            _atomic_write(out / f"report_{name}.json", report_json(rep))
            eff = normalize(energy_report(rep, topo, em), base_eff)
            rows.append(dict(topology=topo_name, num_hpus=topo.num_hpus, batch=b, status="ok",
                             tokens_per_s=_fmt(rep.tokens_per_s),
                             normalized_throughput=_fmt(rep.tokens_per_s / base.tokens_per_s),
                             mfu=_fmt(mfu_projection(rep, m, w, topo.gpu)),
                             tokens_per_s_per_watt=_fmt(eff.tokens_per_s_per_watt),
                             normalized_efficiency=_fmt(eff.ratio), detail=""))
            breakdown.append(dict(topology=topo_name, num_hpus=topo.num_hpus, batch=b,
                                  **{k: _fmt(v) for k, v in rep.breakdown.items()}))
    _emit(args, "throughput", rows)
    if breakdown:
        _emit(args, "breakdown", breakdown)
    for r in rows:
        print(f"{r['topology']} hpus={r['num_hpus']} batch={r['batch']}: {r['status']} "
              f"{r['normalized_throughput'] or '-'}x vs {args.baseline} b{args.baseline_batch}")
    return status


def cmd_attn_check(args, cfg) -> int:
    try:
        rows = attn_check(seed=args.seed, tasks=args.tasks,
                          group_sizes=parse_int_list(args.group_sizes),
                          head_dims=parse_int_list(args.head_dims),
                          max_len=args.max_len, tol=args.tol)
    except AttentionError as exc:
        raise UsageError(f"{exc} (GQA group limit)") from exc
    _emit(args, "attn_check", [dict(group_size=r.group_size, head_dim=r.head_dim, tasks=r.tasks,
                                    max_len=r.max_len, max_abs_err=_fmt(r.max_abs_err),
                                    passed=r.passed) for r in rows])
    worst = max(r.max_abs_err for r in rows)
    ok = all(r.passed for r in rows)
    print(f"{sum(r.tasks for r in rows)} tasks, max abs err {worst:.3g} "
          f"(tol {args.tol:g}): {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_TOLERANCE


def context_workload(ctx: int) -> WorkloadConfig:
    """Workload whose peak context is ``ctx`` (at least 2 tokens)."""
    out = max(ctx // 2, 1)
    return WorkloadConfig(1, max(ctx - out, 1), out)


def cmd_capacity(args, cfg) -> int:
    m = cfg.model(args.model)
    w = context_workload(args.ctx)
    cap = cfg.capacity_kwargs()
    names = [x.strip() for x in args.devices.split(",") if x.strip()]
    if args.preset:
        names = [args.preset]
    rows = []
    per_seq = w.max_context * kv_bytes_per_token(m)
    for name in names:
        dev = cfg.device(name)
        if dev.kind == DeviceKind.GPU:
            r = capacity_report(dev, m, w, 0.0, **cap)
            rows.append(dict(device=name, offload="none", units=1, context=w.max_context,
                             max_batch=r.max_batch, max_batch_exact=r.max_batch_exact,
                             oom_at=r.max_batch_exact + 1))
        else:
            one = hpu_pool_sequences(dev, m, w, per_seq, cap["spill_reserve"], cfg.num_ports())
            for units in parse_int_list(args.units):
                total = one * units
                rows.append(dict(device=name, offload="full", units=units, context=w.max_context,
                                 max_batch=total, max_batch_exact=total, oom_at=total + 1))
    _emit(args, "capacity", rows)
    for r in rows:
        print(f"{r['device']} x{r['units']} ctx={r['context']} offload={r['offload']}: "
              f"max batch {r['max_batch']}")
    return EXIT_OK


def cmd_gen_vectors(args, cfg) -> int:
    for p in write_vectors(args.out, args.seed):
        print(p)
    return EXIT_OK


# parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML overlay on the shipped presets")
    common.add_argument("--preset", help="device (profile, capacity) or topology (simulate) preset")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--model", default="llama2-7b")

    p = argparse.ArgumentParser(prog="hpusim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("profile", parents=[common], help="roofline tables and crossover batch")
    s.add_argument("--batches", default="1-512")
    s.add_argument("--ctx", type=int, default=2048, help="context length for the GEMV curve")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("simulate", parents=[common], help="run the event simulator over a sweep")
    s.add_argument("--batches", default="16,32,64")
    s.add_argument("--hpus", default="", help="HPU counts overriding the topology preset")
    s.add_argument("--workload", default="default")
    s.add_argument("--input-len", type=int)
    s.add_argument("--output-len", type=int)
    s.add_argument("--subbatches", type=int)
    s.add_argument("--partition", choices=("batch_parallel", "head_parallel"))
    s.add_argument("--baseline", default="l40s-only")
    s.add_argument("--baseline-batch", type=int, default=16)
    s.add_argument("--timeline-steps", type=int, default=2,
                   help="decode steps kept in timeline CSVs (0 keeps all)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("attn-check", parents=[common], help="engine vs float64 oracle")
    s.add_argument("--tasks", type=int, default=1000)
    s.add_argument("--group-sizes", default="1,2,4,8")
    s.add_argument("--head-dims", default="8,64,128")
    s.add_argument("--max-len", type=int, default=4096)
    s.add_argument("--tol", type=float, default=2e-3)
    s.set_defaults(func=cmd_attn_check)

    s = sub.add_parser("capacity", parents=[common], help="max batch per device")
    s.add_argument("--devices", default="l40s,a100-pcie,h100-nvl,hpu-prototype,hpu")
    s.add_argument("--ctx", type=int, default=2048)
    s.add_argument("--units", default="1,4", help="HPU card counts")
    s.set_defaults(func=cmd_capacity)

    s = sub.add_parser("gen-vectors", parents=[common], help="write golden frames and a KV image")
    s.set_defaults(func=cmd_gen_vectors)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, UsageError, SimulationError, ValueError) as exc:
        print(f"hpusim {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
