"""Command-line entry point: ``seqadapt {synth,train,eval,generate,select,compare}``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import sys

from . import experiment
from .data import (
    DataFormatError,
    SynthSpec,
    load_checkpoint,
    load_dataset,
    load_vocab,
    read_questions,
    save_checkpoint,
    save_dataset,
    synth_generate,
    synth_questions,
    top_tokens,
    write_questions,
)
from .decode import beam_search, evaluate, greedy_decode, select_answer
from .heads import DomainTag
from .mathcore import Rng
from .train import MissingDataError, NumericError, Strategy, TrainConfig, run_strategy
from .vocab import Vocab

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EVAL_KEYS = {"beam_width": int, "max_len": int}
COMPARE_KEYS = {"seeds": str, "strategies": str, "target_sizes": str, "workers": int}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---- config ------------------------------------------------------------------------

def read_config(path: str | None) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    if path is None:
        return {}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def _apply_overrides(values: dict, pairs: list[str] | None) -> dict:
    values = dict(values)
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def _convert(type_name: str, raw: str):
    if raw.lower() in ("none", "") and "None" in type_name:
        return None
    if type_name.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name.startswith("int"):
        return int(raw)
    if type_name.startswith("float"):
        return float(raw)
    return raw


def split_config(values: dict) -> tuple[dict, dict, dict, dict]:
    """Partition raw values into (synth, train, eval, compare) keyword dicts."""
    synth_fields = {f.name: f.type for f in dataclasses.fields(SynthSpec)}
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    synth, train, ev, cmp = {}, {}, {}, {}
    for k, raw in values.items():
        try:
            if k in train_fields:
                train[k] = _convert(str(train_fields[k]), raw)
            elif k in synth_fields:
                synth[k] = _convert(str(synth_fields[k]), raw)
            elif k in EVAL_KEYS:
                ev[k] = EVAL_KEYS[k](raw)
            elif k in COMPARE_KEYS:
                cmp[k] = COMPARE_KEYS[k](raw)
            else:
                raise UsageError(f"unknown config key {k!r}")
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {exc}") from None
    # SynthSpec and TrainConfig both have a seed; the training one wins for train
    if "seed" in train:
        synth.setdefault("seed", train["seed"])
    return synth, train, ev, cmp


def _train_config(train: dict) -> TrainConfig:
    try:
        return TrainConfig(**train)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.replace(" ", "").split(",") if x]


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: str, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_pair(data_dir: str):
    vocab = load_vocab(os.path.join(data_dir, "vocab.txt"))
    return load_dataset(data_dir, DomainTag.SOURCE, vocab), load_dataset(data_dir, DomainTag.TARGET, vocab), vocab


# ---- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    synth, _, _, _ = split_config(_apply_overrides(read_config(args.config), args.set))
    try:
        spec = SynthSpec(**synth)
        source, target = synth_generate(spec)
    except (TypeError, ValueError) as exc:
        print(f"invalid synth spec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    save_dataset(source, args.out)
    save_dataset(target, args.out)
    _write_json(os.path.join(args.out, "synth_spec.json"), dataclasses.asdict(spec))
    if args.questions:
        qs = synth_questions(target.test, args.questions, args.choices, Rng(spec.seed).derive("questions"))
        write_questions(os.path.join(args.out, "target_questions.jsonl"), qs, target.vocab)
    for ds in (source, target):
        if not ds.train:
            print(f"warning: {ds.domain.value} training split is empty", file=sys.stderr)
    print(f"vocab size {len(source.vocab)}")
    for ds in (source, target):
        print(f"{ds.domain.value}: train {len(ds.train)}  dev {len(ds.dev)}  test {len(ds.test)}")
    for ds in (source, target):
        print(f"{ds.domain.value} top-20: {', '.join(top_tokens(ds.train, ds.vocab, 20))}")
    return EXIT_OK


def _progress(quiet: bool):
    if quiet:
        return None

    def emit(rec):
        parts = [f"[{rec.phase}] epoch {rec.epoch}:"]
        for name, v in (("source", rec.source_train_loss), ("target", rec.target_train_loss),
                        ("dev", rec.dev_loss), ("bound_gap", rec.bound_gap)):
            if v is not None:
                parts.append(f"{name} {v:.4f}")
        print(" ".join(parts), file=sys.stderr)

    return emit


def cmd_train(args) -> int:
    if args.manifest:
        # replay a previous run: its resolved config and data directory
        with open(args.manifest, encoding="utf-8") as fh:
            prior = json.load(fh)
        values = {k: str(v) for k, v in prior["config"].items()}
        values.update({k: str(v) for k, v in prior.get("eval", {}).items()})
        args.data = args.data or prior["data_dir"]
        values = _apply_overrides(values, args.set)
    else:
        values = _apply_overrides(read_config(args.config), args.set)
    if args.data is None:
        raise UsageError("--data is required unless --manifest is given")
    if args.strategy:
        values["strategy"] = args.strategy
    if args.seed is not None:
        values["seed"] = str(args.seed)
    _, train, ev, _ = split_config(values)
    cfg = _train_config(train)
    os.makedirs(args.out, exist_ok=True)
    source, target, vocab = _load_pair(args.data)
    data_files = sorted(
        os.path.join(args.data, f) for f in os.listdir(args.data) if f.endswith(".jsonl") or f == "vocab.txt"
    )
    manifest = {
        "config_path": args.config,
        "config": cfg.to_dict(),
        "eval": {"beam_width": ev.get("beam_width", 5), "max_len": ev.get("max_len", 30)},
        "data_dir": args.data,
        "data_sha256": {os.path.basename(p): _sha256(p) for p in data_files},
        "output_dir": args.out,
        "started": _now(),
        "status": "running",
    }
    manifest_path = os.path.join(args.out, "manifest.json")
    _write_json(manifest_path, manifest)
    gap = cfg.strategy is Strategy.PROPOSED and cfg.objective == "bound"
    try:
        params, metrics = run_strategy(cfg, source, target, on_epoch=_progress(args.quiet))
    except NumericError as exc:
        manifest.update(status="failed", error=str(exc), failed_epoch=exc.epoch, failed_batch=exc.batch,
                        finished=_now())
        _write_json(manifest_path, manifest)
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(experiment.metrics_csv(metrics, gap))
    save_checkpoint(os.path.join(args.out, "checkpoint.json"), params, vocab, cfg.to_dict(),
                    metrics.to_dict(), cfg.seed)
    manifest.update(status="done", finished=_now(), best_epoch=metrics.best_epoch,
                    metrics_csv_version=experiment.METRICS_CSV_VERSION)
    _write_json(manifest_path, manifest)
    print(f"best epoch {metrics.best_epoch}; checkpoint written to {os.path.join(args.out, 'checkpoint.json')}")
    return EXIT_OK


def _checkpoint_and_vocab(args):
    vocab = load_vocab(args.vocab) if getattr(args, "vocab", None) else None
    params, meta = load_checkpoint(args.checkpoint, vocab)
    if vocab is None:
        vocab = Vocab(meta["vocab"]) if "vocab" in meta else None
    return params, meta, vocab


def cmd_eval(args) -> int:
    vocab = load_vocab(os.path.join(args.data, "vocab.txt"))
    params, _ = load_checkpoint(args.checkpoint, vocab)
    ds = load_dataset(args.data, args.domain, vocab)
    examples = ds.split(args.split)
    if not examples:
        print(f"{args.domain} {args.split} split is empty", file=sys.stderr)
        return EXIT_DATA
    report = evaluate(params, examples, DomainTag(args.domain), args.beam_width, args.max_len)
    sys.stdout.write(report.csv_header() + report.csv_row())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.csv_header() + report.csv_row())
        with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    return EXIT_OK


def _read_contexts(stream, d_ctx: int):
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if isinstance(rec, dict) and "format_version" in rec:
                continue
            ctx = rec["ctx"] if isinstance(rec, dict) else rec
            ctx = [float(x) for x in ctx]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise DataFormatError(f"line {lineno}: expected a JSON list or an object with a ctx field") from None
        if len(ctx) != d_ctx:
            raise DataFormatError(f"line {lineno}: context has {len(ctx)} values, model expects {d_ctx}")
        yield ctx


def cmd_generate(args) -> int:
    params, _, vocab = _checkpoint_and_vocab(args)
    if vocab is None:
        print("checkpoint carries no vocabulary; pass --vocab", file=sys.stderr)
        return EXIT_DATA
    stream = sys.stdin if args.contexts == "-" else open(args.contexts, encoding="utf-8")
    try:
        for ctx in _read_contexts(stream, params.d_ctx):
            if args.greedy:
                hyp = greedy_decode(params, ctx, args.max_len, DomainTag(args.domain))
            else:
                hyp = beam_search(params, ctx, args.beam_width, args.max_len, DomainTag(args.domain))
            print(" ".join(vocab.decode(hyp.tokens)))
    finally:
        if stream is not sys.stdin:
            stream.close()
    return EXIT_OK


def cmd_select(args) -> int:
    params, _, vocab = _checkpoint_and_vocab(args)
    if vocab is None:
        print("checkpoint carries no vocabulary; pass --vocab", file=sys.stderr)
        return EXIT_DATA
    questions = read_questions(args.questions, vocab)
    if not questions:
        print("no questions", file=sys.stderr)
        return EXIT_DATA
    correct = 0
    graded = 0
    for k, q in enumerate(questions, start=1):
        pick = select_answer(params, q.ctx, q.choices, DomainTag(args.domain))
        mark = ""
        if q.answer is not None:
            graded += 1
            correct += int(pick == q.answer)
            mark = " correct" if pick == q.answer else f" wrong (answer {q.answer})"
        print(f"question {k}: pick {pick}{mark}")
    if graded:
        print(f"accuracy {100.0 * correct / graded:.1f}% ({correct}/{graded})")
    return EXIT_OK


def cmd_compare(args) -> int:
    values = _apply_overrides(read_config(args.config), args.set)
    _, train, ev, cmp = split_config(values)
    base = _train_config(train)
    if args.seeds:
        cmp["seeds"] = args.seeds
    if args.num_seeds:
        cmp["seeds"] = ",".join(str(s) for s in range(1, args.num_seeds + 1))
    if args.target_sizes:
        cmp["target_sizes"] = args.target_sizes
    if args.strategies:
        cmp["strategies"] = args.strategies
    if args.workers:
        cmp["workers"] = args.workers
    seeds = _int_list(cmp.get("seeds", "1"))
    try:
        strategies = [Strategy(s) for s in cmp.get("strategies", ",".join(s.value for s in Strategy)).split(",")]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sizes = _int_list(cmp["target_sizes"]) if cmp.get("target_sizes") else None
    source, target, _ = _load_pair(args.data)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "manifest.json"), {
        "config_path": args.config,
        "config": base.to_dict(),
        "seeds": seeds,
        "strategies": [s.value for s in strategies],
        "target_sizes": sizes,
        "eval": {"beam_width": ev.get("beam_width", 5), "max_len": ev.get("max_len", 30)},
        "data_dir": args.data,
        "output_dir": args.out,
        "started": _now(),
    })

    def progress(r):
        if not args.quiet:
            print(f"size {r.target_size} {r.strategy} seed {r.seed}: ppl {r.perplexity:.3f} "
                  f"B4 {r.bleu4:.4f} ({r.epochs} epochs)", file=sys.stderr)

    try:
        results = experiment.compare(base, source, target, seeds, strategies, sizes, ev.get("beam_width", 5),
                                     ev.get("max_len", 30), cmp.get("workers", 1), progress)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = experiment.write_reports(args.out, results)
    print(experiment.summary_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqadapt", description="Supervised domain adaptation for LSTM caption generators.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic source/target corpus pair")
    s.add_argument("--config", help="key = value file with SynthSpec fields")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--questions", type=int, default=0, help="also write N target-test multiple-choice questions")
    s.add_argument("--choices", type=int, default=4, help="choices per question (default 4)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one strategy")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--manifest", help="manifest.json of an earlier run to reproduce")
    t.add_argument("--data", help="directory written by synth")
    t.add_argument("--out", required=True)
    t.add_argument("--strategy", choices=[x.value for x in Strategy])
    t.add_argument("--seed", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="BLEU and perplexity of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", default="target", choices=[d.value for d in DomainTag])
    e.add_argument("--split", default="test", choices=["train", "dev", "test"])
    e.add_argument("--beam-width", type=int, default=5)
    e.add_argument("--max-len", type=int, default=30)
    e.add_argument("--out", help="also write eval.csv and eval.json here")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="caption contexts read from a file or stdin")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--contexts", default="-", help="JSONL of contexts (lists or {ctx: ...}); - for stdin")
    g.add_argument("--vocab", help="vocab.txt to check against the checkpoint")
    g.add_argument("--domain", default="target", choices=[d.value for d in DomainTag])
    g.add_argument("--beam-width", type=int, default=5)
    g.add_argument("--max-len", type=int, default=30)
    g.add_argument("--greedy", action="store_true")
    g.set_defaults(func=cmd_generate)

    q = sub.add_parser("select", help="answer multiple-choice questions by sentence score")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--questions", required=True)
    q.add_argument("--vocab")
    q.add_argument("--domain", default="target", choices=[d.value for d in DomainTag])
    q.set_defaults(func=cmd_select)

    c = sub.add_parser("compare", help="all strategies over several seeds, median table")
    c.add_argument("--config")
    c.add_argument("--set", action="append", metavar="KEY=VALUE")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seeds", help="comma-separated seeds")
    c.add_argument("--num-seeds", type=int, help="use seeds 1..S")
    c.add_argument("--target-sizes", help="comma-separated target training sizes to sweep")
    c.add_argument("--strategies", help="comma-separated subset of strategies")
    c.add_argument("--workers", type=int, help="parallel worker processes")
    c.add_argument("--quiet", action="store_true")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, MissingDataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
