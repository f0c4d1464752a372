"""Multi-strategy, multi-seed comparison runs and their CSV / text reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .data import DomainDataset
from .decode import evaluate
from .heads import DomainTag
from .train import RunMetrics, Strategy, TrainConfig, run_strategy

METRICS_CSV_VERSION = 1
METRICS_FIELDS = ("epoch", "phase", "source_train_loss", "target_train_loss", "dev_loss")
RUN_FIELDS = ("target_size", "strategy", "seed", "bleu1", "bleu2", "bleu3", "bleu4", "perplexity",
              "epochs", "best_epoch")
SUMMARY_FIELDS = ("target_size", "strategy", "seeds", "B1", "B2", "B3", "B4", "PPL")


def _num(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def metrics_csv(metrics: RunMetrics, with_gap: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_FIELDS + (("bound_gap_mean",) if with_gap else ()))
    for r in metrics.epochs:
        row = [r.epoch, r.phase, _num(r.source_train_loss), _num(r.target_train_loss), _num(r.dev_loss)]
        if with_gap:
            row.append(_num(r.bound_gap))
        w.writerow(row)
    return buf.getvalue()


@dataclass
class RunResult:
    target_size: int
    strategy: str
    seed: int
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    perplexity: float
    epochs: int
    best_epoch: str
    metrics_csv: str


def run_one(cfg: TrainConfig, source: DomainDataset, target: DomainDataset, width: int = 5,
            max_len: int = 30, on_epoch=None) -> tuple[RunResult, object]:
    """Train one strategy and score it on the target test split."""
    params, metrics = run_strategy(cfg, source, target, on_epoch=on_epoch)
    report = evaluate(params, target.test, DomainTag.TARGET, width, max_len)
    metrics.evaluation = dataclasses.asdict(report)
    gap = cfg.strategy is Strategy.PROPOSED and cfg.objective == "bound"
    best = ";".join(f"{k}:{v}" for k, v in metrics.best_epoch.items())
    res = RunResult(len(target.train), cfg.strategy.value, cfg.seed, report.bleu1, report.bleu2,
                    report.bleu3, report.bleu4, report.perplexity, len(metrics.epochs), best,
                    metrics_csv(metrics, gap))
    return res, params


def _job(args):
    cfg, source, target, width, max_len = args
    return run_one(cfg, source, target, width, max_len)[0]


def compare(base: TrainConfig, source: DomainDataset, target: DomainDataset, seeds: list[int],
            strategies: list[Strategy], target_sizes: list[int] | None = None, width: int = 5,
            max_len: int = 30, workers: int = 1, progress=None) -> list[RunResult]:
    """Every (target size, seed, strategy) combination, in that nesting order.

    A target size keeps the first that many target training examples.
    """
    sizes = target_sizes or [len(target.train)]
    jobs = []
    for size in sizes:
        if size > len(target.train):
            raise ValueError(f"target size {size} exceeds the {len(target.train)} available examples")
        tgt = target.with_train(target.train[:size])
        for seed in seeds:
            for s in strategies:
                cfg = dataclasses.replace(base, strategy=Strategy(s), seed=seed)
                jobs.append((cfg, source, tgt, width, max_len))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_job(job))
            if progress is not None:
                progress(results[-1])
    return results


def runs_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_FIELDS)
    for r in results:
        w.writerow([_num(getattr(r, k)) for k in RUN_FIELDS])
    return buf.getvalue()


def summarize(results: list[RunResult]) -> list[dict]:
    """Median over seeds per (target size, strategy), in first-seen order."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.target_size, r.strategy), []).append(r)
    rows = []
    for (size, strategy), rs in groups.items():
        rows.append({
            "target_size": size,
            "strategy": strategy,
            "seeds": len(rs),
            "B1": statistics.median(r.bleu1 for r in rs),
            "B2": statistics.median(r.bleu2 for r in rs),
            "B3": statistics.median(r.bleu3 for r in rs),
            "B4": statistics.median(r.bleu4 for r in rs),
            "PPL": statistics.median(r.perplexity for r in rs),
        })
    return rows


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for row in rows:
        w.writerow([_num(row[k]) for k in SUMMARY_FIELDS])
    return buf.getvalue()


def summary_table(rows: list[dict]) -> str:
    """Aligned text: one block per target size, BLEU scaled to 0-100."""
    out = []
    for size in dict.fromkeys(r["target_size"] for r in rows):
        out.append(f"target train size {size}")
        out.append(f"{'':10s} {'B1':>6s} {'B2':>6s} {'B3':>6s} {'B4':>6s} {'PPL':>8s}")
        for r in (r for r in rows if r["target_size"] == size):
            out.append(
                f"{r['strategy']:10s} {100 * r['B1']:6.1f} {100 * r['B2']:6.1f} "
                f"{100 * r['B3']:6.1f} {100 * r['B4']:6.1f} {r['PPL']:8.3f}"
            )
        out.append("")
    return "\n".join(out)


def write_reports(out_dir: str, results: list[RunResult]) -> list[dict]:
    os.makedirs(os.path.join(out_dir, "metrics"), exist_ok=True)
    for r in results:
        name = f"size{r.target_size}_{r.strategy}_seed{r.seed}.csv"
        with open(os.path.join(out_dir, "metrics", name), "w", encoding="utf-8") as fh:
            fh.write(r.metrics_csv)
    rows = summarize(results)
    with open(os.path.join(out_dir, "runs.csv"), "w", encoding="utf-8") as fh:
        fh.write(runs_csv(results))
    with open(os.path.join(out_dir, "comparison.csv"), "w", encoding="utf-8") as fh:
        fh.write(summary_csv(rows))
    with open(os.path.join(out_dir, "comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary_table(rows))
    return rows
