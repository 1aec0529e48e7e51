"""Experiment driver: sweeps, wallclock benchmarks, dynamics tracking, oracle checks."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .errors import DomainError
from .gumbel import hard_top_k, subset_probability_oracle
from .model import GatedTransformer, apply_gates, compact, mask_to_bits
from .pruners import (
    METHODS,
    PruningOutcome,
    adjust_mask_to_k,
    finalize_and_finetune,
    michel_prune,
    pipelined_dsp,
    voita_eval_gates,
)
from .train import TaskData, evaluate, make_streams, make_task_data, train

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["method", "K", "seed", "metric_pre", "metric_post", "params", "fwd_μs"]
BASELINE_COLUMNS = ["seed", "metric", "params", "fwd_μs"]


def fmt(x) -> str:
    """Six significant digits for floats; integers and strings pass through."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else f"{float(x):.6g}"
    return str(x)


def _round_floats(obj):
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.6g}") if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_jsonl(path, records, append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(_round_floats(rec), ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _append_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({c: fmt(row.get(c)) for c in columns})


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# timing ----------------------------------------------------------------------


def time_forward(model: GatedTransformer, inputs, repeats: int = 20, warmup: int = 3, gates=None) -> list[float]:
    """Per-call forward wallclock in microseconds (no graph recording)."""
    out = []
    with ad.no_grad():
        for _ in range(warmup):
            model.forward(inputs, gates)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(inputs, gates)
            out.append((time.perf_counter() - t0) * 1e6)
    return out


def bench_inputs(model: GatedTransformer, data, batch_size: int = 32):
    x, y = data.x[:batch_size], data.y[:batch_size]
    if model.config.task == "classifier":
        return x
    return (x, model.decoder_input(y))


# sweep -----------------------------------------------------------------------


@dataclass
class SweepRecord:
    method: str
    K: int
    seed: int
    metric_pre: float
    metric_post: float
    params: int
    fwd_us: float
    lam: float | None = None
    mask: str = ""
    error: str | None = None

    def row(self) -> dict:
        d = asdict(self)
        d["fwd_μs"] = d.pop("fwd_us")
        return d


class _SeedContext:
    """Data and the unpruned reference model for one seed, built lazily."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.data: TaskData = make_task_data(cfg, make_streams(seed)["data"])
        self._base = None
        self._voita = None

    @property
    def base(self) -> GatedTransformer:
        if self._base is None:
            self._base = train(self.cfg, "none", self.data, make_streams(self.seed)).model
        return self._base

    def voita_run(self, lam: float):
        if self._voita is None:
            self._voita = train(self.cfg, "voita", self.data, make_streams(self.seed), lam=lam)
        return self._voita

    def evaluate(self, model: GatedTransformer) -> float:
        return evaluate(model, self.data.val)


def run_method(cfg: ExperimentConfig, ctx: _SeedContext, method: str, K: int) -> PruningOutcome:
    """Train/prune/fine-tune one (method, K) cell on a prepared seed context."""
    streams = make_streams(ctx.seed)
    data = ctx.data
    fin = dict(
        finetune_steps=cfg.finetune_steps,
        data=data.train,
        evaluate=ctx.evaluate,
        lr=cfg.lr_theta,
        batch_size=cfg.batch_size,
        rng=streams["finetune"],
        method=method,
    )
    if method == "michel":
        source = data.heldout if cfg.importance_data == "heldout" else data.train
        sel = michel_prune(ctx.base, source, K, cfg.michel_block, batch_size=cfg.batch_size)
        out = finalize_and_finetune(ctx.base, np.zeros(ctx.base.n_heads), K, mask=sel.mask, **fin)
        out.history = sel.history + out.history
    elif method == "pipelined-dsp":
        sel = pipelined_dsp(
            ctx.base, data.train, K, streams["gumbel"], cfg.schedule.schedule(), cfg.lr_w, cfg.batch_size,
            optimizer=cfg.optimizer_w,
        )
        out = finalize_and_finetune(ctx.base, sel.scores, K, mask=sel.mask, **fin)
    elif method in ("joint-dsp", "ste"):
        res = train(cfg, method, data, streams, K=K)
        out = finalize_and_finetune(res.model, res.scores, K, **fin)
        out.history = [{"max_gate": res.max_gate}] + out.history
    elif method == "voita":
        lam = cfg.lambda_list[0]
        res = ctx.voita_run(lam)
        gates = voita_eval_gates(res.scores)
        mask = adjust_mask_to_k(gates, gates > 0, K)
        out = finalize_and_finetune(res.model, gates, K, mask=mask, **fin)
        out.lam = lam
        out.history = [{"n_unpruned_before_adjust": int((gates > 0).sum())}] + out.history
    else:
        raise DomainError(f"unknown method {method!r}; expected one of {METHODS}")
    out.seed = ctx.seed
    return out


def sweep(
    cfg: ExperimentConfig,
    methods=None,
    k_list=None,
    seeds=None,
    out_dir=None,
    bench_repeats: int = 20,
) -> list[SweepRecord]:
    """One train/prune/fine-tune cycle per (method, K, seed), appended to ``sweep.csv``.

    Cells whose key already exists in the CSV are skipped, so reruns are idempotent.
    The unpruned reference for each seed goes to ``baseline.csv``; full outcomes
    (masks, histories) go to ``outcomes.jsonl``.
    """
    methods = list(methods or [cfg.pruner])
    k_list = list(k_list or cfg.k_list)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    for m in methods:
        if m not in METHODS:
            raise DomainError(f"unknown method {m!r}; expected a subset of {METHODS}")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, base_path = out / "sweep.csv", out / "baseline.csv"
    done = {(r["method"], int(r["K"]), int(r["seed"])) for r in read_csv(csv_path)} if csv_path.exists() else set()
    base_done = {int(r["seed"]) for r in read_csv(base_path)} if base_path.exists() else set()
    records = []
    for seed in seeds:
        ctx = _SeedContext(cfg, seed)
        if seed not in base_done:
            fwd = statistics.median(time_forward(ctx.base, bench_inputs(ctx.base, ctx.data.val), bench_repeats))
            row = {"seed": seed, "metric": ctx.evaluate(ctx.base), "params": ctx.base.num_parameters(), "fwd_μs": fwd}
            _append_csv(base_path, BASELINE_COLUMNS, [row])
            log.info("seed %d unpruned metric %.4f", seed, row["metric"])
        for method, K in itertools.product(methods, k_list):
            if (method, K, seed) in done:
                continue
            t0 = time.perf_counter()
            try:
                outcome = run_method(cfg, ctx, method, K)
                pruned = outcome.model
                fwd = statistics.median(time_forward(pruned, bench_inputs(pruned, ctx.data.val), bench_repeats))
                rec = SweepRecord(
                    method, K, seed, outcome.metric_pre, outcome.metric_post,
                    pruned.num_parameters(), fwd, outcome.lam, mask_to_bits(outcome.mask),
                )
                detail = outcome.to_record()
            except Exception as exc:  # a failed cell must not kill the sweep
                log.exception("cell %s K=%d seed=%d failed", method, K, seed)
                rec = SweepRecord(method, K, seed, math.nan, math.nan, 0, math.nan, error=f"{type(exc).__name__}: {exc}")
                detail = {"method": method, "K": K, "seed": seed, "error": rec.error}
            detail["seconds"] = time.perf_counter() - t0
            _append_csv(csv_path, SWEEP_COLUMNS, [rec.row()])
            write_jsonl(out / "outcomes.jsonl", [detail], append=True)
            log.info("%s K=%d seed=%d -> %.4f/%.4f", method, K, seed, rec.metric_pre, rec.metric_post)
            records.append(rec)
    return records


def lambda_sweep(cfg: ExperimentConfig, lambdas=None, seeds=None, out_dir=None) -> list[dict]:
    """Voita runs over a grid of L0 weights; reports how many heads survive each."""
    lambdas = list(lambdas or cfg.lambda_list)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    rows = []
    for seed in seeds:
        data = make_task_data(cfg, make_streams(seed)["data"])
        for lam in lambdas:
            res = train(cfg, "voita", data, make_streams(seed), lam=lam)
            mask = (voita_eval_gates(res.scores) > 0).astype(np.int8)
            metric = evaluate(res.model, data.val, mask.astype(np.float64)) if mask.any() else float("nan")
            rows.append({"lambda": lam, "seed": seed, "n_unpruned": int(mask.sum()), "metric": metric, "mask": mask_to_bits(mask)})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "lambda_sweep.csv"
        path.unlink(missing_ok=True)
        _append_csv(path, ["lambda", "seed", "n_unpruned", "metric", "mask"], rows)
    return rows


# wallclock benchmark ---------------------------------------------------------


def bench_speedup(
    model: GatedTransformer,
    masks,
    inputs,
    repeats: int = 100,
    warmup: int = 10,
    groups: int = 5,
    jitter_limit: float = 0.2,
) -> list[dict]:
    """Compact the model under each mask and time its forward pass.

    Calls are interleaved round-robin across all masks so that machine drift
    hits every row alike.  Wallclock is the median of ``repeats`` calls after
    ``warmup``.  Jitter is the relative spread of per-group medians; above
    ``jitter_limit`` a row is flagged.
    """
    masks = [np.asarray(m, dtype=np.int8) for m in masks]
    with ad.no_grad():
        base_out = model.forward(inputs).data
    smalls = [model if m.all() else compact(model, m) for m in masks]
    # the full mask is the reference itself, so its deltas are zero by construction
    runners = [model] + [s for s in smalls if s is not model]
    times = {id(r): [] for r in runners}
    with ad.no_grad():
        for i in range(warmup + repeats):
            for r in runners:
                t0 = time.perf_counter()
                r.forward(inputs)
                if i >= warmup:
                    times[id(r)].append((time.perf_counter() - t0) * 1e6)
    base_t = statistics.median(times[id(model)])
    base_params = model.num_parameters()
    base_attn = model.attention_parameters()
    rows = []
    for mask, small in zip(masks, smalls):
        times_m = times[id(small)]
        med = statistics.median(times_m)
        chunk = max(1, len(times_m) // groups)
        meds = [statistics.median(times_m[i : i + chunk]) for i in range(0, len(times_m), chunk)]
        jitter = (max(meds) - min(meds)) / med
        with ad.no_grad():
            masked = apply_gates(model, mask.astype(np.float64)).forward(inputs).data
            gap = float(np.max(np.abs(small.forward(inputs).data - masked)))
        rows.append(
            {
                "n_kept": int(mask.sum()),
                "pruned_pct": 100.0 * (1 - mask.sum() / mask.size),
                "mask": mask_to_bits(mask),
                "params": small.num_parameters(),
                "attn_params": small.attention_parameters(),
                "median_us": med,
                "speedup_pct": 100.0 * (base_t - med) / base_t,
                "shrink_pct": 100.0 * (base_params - small.num_parameters()) / base_params,
                "attn_shrink_pct": 100.0 * (base_attn - small.attention_parameters()) / base_attn,
                "jitter": jitter,
                "unstable": jitter > jitter_limit,
                "max_abs_diff": gap,
                "unpruned_diff": float(np.max(np.abs(base_out - masked))) if mask.all() else None,
            }
        )
    return rows


def random_masks(H: int, fractions, per_level: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``per_level`` uniformly random masks for each pruned fraction."""
    masks = []
    for frac in fractions:
        kept = H - int(round(frac * H))
        # only one mask keeps every head
        for _ in range(1 if kept == H else per_level):
            m = np.zeros(H, dtype=np.int8)
            m[rng.permutation(H)[:kept]] = 1
            masks.append(m)
    return masks


BENCH_COLUMNS = [
    "n_kept", "pruned_pct", "params", "attn_params", "median_us", "speedup_pct",
    "shrink_pct", "attn_shrink_pct", "jitter", "unstable", "max_abs_diff", "mask",
]


# head distribution -----------------------------------------------------------


def report_head_distribution(mask, model: GatedTransformer) -> dict:
    """Kept heads per attention type and layer for a flat mask over ``model``'s heads."""
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (model.n_heads,):
        raise DomainError(f"mask length {mask.size} != {model.n_heads} heads")
    names = {"enc": "encoder-self", "dec": "decoder-self", "cross": "cross"}
    by_type: dict[str, list[int]] = {}
    rows = []
    for block, off in zip(model.blocks, model.block_offsets()):
        kept = int(mask[off : off + block.n_heads].sum())
        by_type.setdefault(names[block.kind], []).append(kept)
        rows.append({"type": names[block.kind], "layer": block.layer, "kept": kept, "total": block.n_heads})
    return {"per_layer": rows, "per_type": {k: sum(v) for k, v in by_type.items()}, "total": int(mask.sum())}


def format_head_distribution(report: dict) -> str:
    lines = [f"{'type':<14}{'layer':>6}{'kept':>6}{'total':>7}"]
    for r in report["per_layer"]:
        lines.append(f"{r['type']:<14}{r['layer']:>6}{r['kept']:>6}{r['total']:>7}")
    for t, n in report["per_type"].items():
        lines.append(f"{t + ' (all)':<20}{n:>6}")
    lines.append(f"{'total':<20}{report['total']:>6}")
    return "\n".join(lines)


# training dynamics -----------------------------------------------------------


@dataclass
class DynamicsRecord:
    step: int
    tau: float | None
    metric: float | None
    eventual_keep: float


def track_dynamics(snapshots, final_mask, taus=None, metrics=None) -> list[DynamicsRecord]:
    """Percentage of each step's selected heads that belong to the final selection."""
    final = np.asarray(final_mask).astype(bool)
    k = int(final.sum())
    out = []
    for n, snap in enumerate(snapshots):
        snap = np.asarray(snap).astype(bool)
        sel = int(snap.sum())
        keep = 100.0 * int((snap & final).sum()) / sel if sel else 100.0 * (k == 0)
        tau = None if taus is None else taus[n]
        metric = None if metrics is None else metrics.get(n)
        out.append(DynamicsRecord(n, tau, metric, keep))
    return out


def holds_full_keep(records: list[DynamicsRecord], window_frac: float = 0.2) -> bool:
    """True iff eventual-keep is 100 throughout the last ``window_frac`` of steps."""
    start = int(math.floor(len(records) * (1 - window_frac)))
    return all(r.eventual_keep == 100.0 for r in records[start:])


def run_dynamics(cfg: ExperimentConfig, K: int, seed: int, eval_every: int = 0) -> list[DynamicsRecord]:
    """Train joint DSP at budget K and trace the selection against the final top-K."""
    streams = make_streams(seed)
    data = make_task_data(cfg, streams["data"])
    res = train(cfg, "joint-dsp", data, streams, K=K, eval_every=eval_every)
    final = hard_top_k(res.scores, K)
    taus = [e.get("tau") for e in res.log]
    metrics = {e["step"]: e["metric"] for e in res.log if "metric" in e}
    return track_dynamics(res.snapshots, final, taus, metrics)


# sampling oracle -------------------------------------------------------------


def oracle_check(H: int, K: int, samples: int, seed: int, w=None) -> dict:
    """Compare Gumbel top-K subset frequencies with the exact permutation-sum law.

    ``w`` are log-importances; by default importances are uniform on [0.5, 3].
    """
    if samples < 10_000:
        raise DomainError("need at least 1e4 samples for a meaningful frequency estimate")
    if H > 10 or not 1 <= K <= min(H, 8):
        raise DomainError("oracle check supports H <= 10 and 1 <= K <= min(H, 8)")
    rng = np.random.default_rng(seed)
    if w is None:
        w = np.log(rng.uniform(0.5, 3.0, size=H))
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (H,):
        raise DomainError("w must have length H")
    u = rng.random((samples, H))
    u[u == 0.0] = np.nextafter(0.0, 1.0)
    r = w - np.log(-np.log(u))
    top = np.argsort(-r, axis=1, kind="stable")[:, :K]
    codes = np.bitwise_or.reduce(np.left_shift(1, top), axis=1)
    uniq, counts = np.unique(codes, return_counts=True)
    freq = dict(zip(uniq.tolist(), (counts / samples).tolist()))
    subsets = []
    tv = 0.0
    for combo in itertools.combinations(range(H), K):
        code = sum(1 << j for j in combo)
        p = subset_probability_oracle(w, combo)
        f = freq.get(code, 0.0)
        tv += abs(p - f)
        subsets.append({"subset": list(combo), "oracle": p, "empirical": f})
    return {"H": H, "K": K, "samples": samples, "seed": seed, "w": w.tolist(), "tv": 0.5 * tv, "subsets": subsets}
