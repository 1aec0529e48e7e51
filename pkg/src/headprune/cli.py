"""Command-line entry point: ``headprune <subcommand> --config cfg.json ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ExperimentConfig, load_config, save_config
from .errors import DomainError
from .model import bits_to_mask, build_model, save_checkpoint
from .pruners import METHODS
from .train import evaluate, make_streams, make_task_data, train

log = logging.getLogger("headprune")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _method_list(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return names


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if getattr(args, "k", None):
        updates["k_list"] = args.k
    if getattr(args, "lam", None):
        updates["lambda_list"] = args.lam
    if args.out:
        updates["out_dir"] = args.out
    if updates:
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **updates})
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    return out


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    seed = cfg.seeds[0]
    methods = args.method or ([] if cfg.pruner == "none" else [cfg.pruner])
    if not methods:
        streams = make_streams(seed)
        data = make_task_data(cfg, streams["data"])
        res = train(cfg, "none", data, streams, eval_every=cfg.steps_per_epoch())
        metric = evaluate(res.model, data.val)
        harness.write_jsonl(out / "train_log.jsonl", res.log)
        save_checkpoint(res.model, out / f"model_seed{seed}.json")
        print(json.dumps({"seed": seed, "metric": round(metric, 6), "params": res.model.num_parameters()}))
        return 0
    ctx = harness._SeedContext(cfg, seed)
    for method in methods:
        for K in cfg.k_list:
            outcome = harness.run_method(cfg, ctx, method, K)
            harness.write_jsonl(out / "outcomes.jsonl", [outcome.to_record()], append=True)
            save_checkpoint(outcome.model, out / f"{method}_K{K}_seed{seed}.json")
            print(f"{method} K={K} seed={seed} metric_pre={outcome.metric_pre:.4f} metric_post={outcome.metric_post:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    methods = args.method or [cfg.pruner]
    recs = harness.sweep(cfg, methods=methods, out_dir=out)
    failed = [r for r in recs if r.error]
    if "voita" in methods and len(cfg.lambda_list) > 1:
        harness.lambda_sweep(cfg, out_dir=out)
    print(f"{len(recs)} new cells written to {out / 'sweep.csv'}; {len(failed)} failed")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    streams = make_streams(cfg.seeds[0])
    model = build_model(cfg.build_model_config(), streams["init"])
    data = make_task_data(cfg, streams["data"])
    inputs = harness.bench_inputs(model, data.val, args.batch)
    fractions = (0.0, 0.25, 0.5, 0.75)
    masks = harness.random_masks(model.n_heads, fractions, args.masks_per_level, np.random.default_rng(cfg.seeds[0]))
    rows = harness.bench_speedup(model, masks, inputs, repeats=args.repeats)
    path = out / "bench.csv"
    path.unlink(missing_ok=True)
    harness._append_csv(path, harness.BENCH_COLUMNS, rows)
    for r in rows:
        flag = " UNSTABLE" if r["unstable"] else ""
        print(f"kept {r['n_kept']:>3}  {r['median_us']:>10.1f} us  speedup {r['speedup_pct']:6.1f}%  shrink {r['shrink_pct']:5.1f}%{flag}")
    return 0


def cmd_dynamics(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    K = cfg.k_list[0]
    runs = {"annealed": cfg}
    if args.control:
        sched = {**cfg.schedule.model_dump(), "anneal": False}
        runs["constant"] = ExperimentConfig.model_validate({**cfg.model_dump(), "schedule": sched})
    for name, c in runs.items():
        recs = harness.run_dynamics(c, K, c.seeds[0], eval_every=args.eval_every)
        harness.write_jsonl(out / f"dynamics_{name}.jsonl", [r.__dict__ for r in recs])
        print(f"{name}: holds 100% over final 20%: {harness.holds_full_keep(recs)}")
    return 0


def cmd_oracle(args) -> int:
    rep = harness.oracle_check(args.H, args.K, args.samples, args.seed if args.seed is not None else 0)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        harness.write_jsonl(Path(args.out) / "oracle.jsonl", [rep])
    print(f"H={rep['H']} K={rep['K']} samples={rep['samples']} TV={rep['tv']:.6g}")
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    model = build_model(cfg.build_model_config(), np.random.default_rng(0))
    mask = bits_to_mask(args.mask) if args.mask else np.ones(model.n_heads, dtype=np.int8)
    rep = harness.report_head_distribution(mask, model)
    print(harness.format_head_distribution(rep))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="headprune", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, k=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override the config's seed list with one seed")
        sp.add_argument("--out", help="output directory")
        if k:
            sp.add_argument("--k", type=_int_list, help="comma-separated head budgets")
            sp.add_argument("--lambda", dest="lam", type=_float_list, help="comma-separated L0 weights (voita)")
            sp.add_argument("--method", type=_method_list, help="comma-separated pruning methods")

    sp = sub.add_parser("train", help="train one seed (and prune, if a method is given)")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="method x K x seed grid, appended to sweep.csv")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bench", help="compacted-model wallclock at 0/25/50/75%% pruning")
    common(sp, k=False)
    sp.add_argument("--repeats", type=int, default=100)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--masks-per-level", type=int, default=3)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("dynamics", help="eventual-keep trace of a joint DSP run")
    common(sp)
    sp.add_argument("--control", action="store_true", help="also run without annealing")
    sp.add_argument("--eval-every", type=int, default=0)
    sp.set_defaults(func=cmd_dynamics)

    sp = sub.add_parser("oracle-check", help="Gumbel top-K frequencies vs exact subset law")
    sp.add_argument("--H", type=int, default=5)
    sp.add_argument("--K", type=int, default=2)
    sp.add_argument("--samples", type=int, default=200_000)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("report", help="kept heads per layer and attention type")
    common(sp, k=False)
    sp.add_argument("--mask", help="bit string over all heads, e.g. 10110000")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DomainError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
