"""Command-line entry point: ``kgat <command> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .checks import gradcheck_all
from .config import Config, ConfigError, load_config
from .data import DataError, Vocabulary, atomic_write, read_records, write_dataset, write_synthetic
from .kernels import default_bank
from .metrics import (
    MetricError,
    entropy_report,
    export_case_attention,
    max_selection_weight_histogram,
    selection_recall_at_k,
    top_fraction_mass,
)
from .model import MODE_TABLE
from .numerics import NumericError
from .ranker import golden_coverage, rerank_instance, train_ranker
from .train import evaluate, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dumps(doc):
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    return cfg.with_overrides(mode=getattr(args, "mode", None), seed=getattr(args, "seed", None),
                              epochs=getattr(args, "epochs", None), lr=getattr(args, "lr", None))


def _data_dir(path):
    path = Path(path)
    train_path, dev_path = path / "train.jsonl", path / "dev.jsonl"
    if not train_path.is_file():
        raise DataError(f"missing {train_path}")
    train_set = read_records(train_path)
    dev_set = read_records(dev_path) if dev_path.is_file() else []
    vocab_path = path / "vocab.txt"
    vocab = Vocabulary.load(vocab_path) if vocab_path.is_file() else Vocabulary.build(train_set + dev_set)
    return train_set, dev_set, vocab


def _sibling_vocab(data_file):
    p = Path(data_file).with_name("vocab.txt")
    return Vocabulary.load(p) if p.is_file() else None


# -- commands ----------------------------------------------------------------


def cmd_gen_synth(args):
    train_set, dev_set, vocab = write_synthetic(args.out, args.seed, args.train, args.dev, args.multi_frac)
    _log(f"wrote {len(train_set)} train / {len(dev_set)} dev claims, {len(vocab)} tokens to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    train_set, dev_set, vocab = _data_dir(args.data)

    def log(rec):
        _log(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))

    ckpt, history = train(train_set, dev_set, vocab, cfg, log=log)
    save_checkpoint(ckpt, args.out)
    atomic_write(args.history or f"{args.out}.history.json", history.dumps())
    _log(f"best epoch {history.best_epoch}, dev LA {history.best_dev_la}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    result = evaluate(read_records(args.data), ckpt, args.golden_evidence,
                      vocab=_sibling_vocab(args.data), traces=False)
    atomic_write(args.report, _dumps(result.metrics))
    if args.predictions:
        lines = [json.dumps({"claim_id": p.claim_id, "label": p.label.wire,
                             "probs": p.probs.tolist(), "selection": p.selection.tolist(),
                             "evidence": [list(e) for e in p.evidence]})
                 for p in result.predictions]
        atomic_write(args.predictions, "\n".join(lines) + "\n")
    _log(" ".join(f"{k}={v}" for k, v in sorted(result.metrics.items())))


def cmd_train_ranker(args):
    cfg = _config(args)
    train_set, dev_set, vocab = _data_dir(args.data)
    model, opt, history = train_ranker(train_set, vocab, cfg, dev=dev_set or None,
                                       log=lambda r: _log(json.dumps(r)))
    save_checkpoint(Checkpoint("ranker", cfg, vocab, model, opt, cfg.seed), args.out)
    atomic_write(f"{args.out}.history.json", _dumps(history.to_dict()))


def cmd_rank(args):
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.kind != "ranker":
        raise DataError(f"{args.ckpt} is not a ranker checkpoint")
    insts = read_records(args.data)
    ranked = [rerank_instance(i, ckpt.model, ckpt.vocab, args.k) for i in insts]
    write_dataset(args.out, ranked)
    if any(i.golden_sets for i in insts):
        _log(f"golden top-{args.k} coverage {golden_coverage(insts, ckpt.model, ckpt.vocab, args.k):.4f}")


def cmd_gradcheck(args):
    modes = [args.mode] if args.mode else list(MODE_TABLE)
    failed = False
    print(f"{'mode':<5} {'parameter':<32} {'max_rel_error':>13}  ok")
    for mode, (results, seconds) in gradcheck_all(args.seed, args.eps, args.tol, modes, args.dim).items():
        for r in results:
            print(f"{mode:<5} {r.name:<32} {r.max_rel_error:>13.3e}  {'yes' if r.passed else 'NO'}")
            failed |= not r.passed
        print(f"{mode:<5} {'(seconds)':<32} {seconds:>13.1f}")
    if failed:
        raise NumericError("gradient check failed")


def cmd_analyze(args):
    ckpt = load_checkpoint(args.ckpt)
    result = evaluate(read_records(args.data), ckpt, vocab=_sibling_vocab(args.data))
    gold, preds, traces = result.instances, result.predictions, result.traces
    report = {"metrics": result.metrics, "entropy": entropy_report(traces),
              "max_selection_histogram": max_selection_weight_histogram(preds).tolist(),
              "top10pct_token_mass": top_fraction_mass(traces, 0.1)}
    try:
        report["selection_recall"] = {str(k): selection_recall_at_k(preds, gold, k)
                                      for k in range(1, ckpt.config.evidence_per_claim + 1)}
    except MetricError:
        pass
    if args.case:
        if not args.edge:
            raise UsageError("--case needs --edge q,p")
        case = export_case_attention(traces, args.case, args.edge)
        report["case"] = {"claim_id": case.claim_id, "edge": list(case.edge), "beta": case.beta,
                          "selection": case.selection.tolist(),
                          "tokens": [[t, w] for t, w in case.rows]}
        if args.case_out:
            atomic_write(args.case_out, case.to_text())
    atomic_write(args.report, _dumps(report))


def cmd_kernels(args):
    bank = default_bank(args.count)
    for i, (mu, sigma) in enumerate(bank.to_list()):
        print(f"{i:>2}  mu={mu:+.3f}  sigma={sigma:g}")


# -- parser ------------------------------------------------------------------


def _edge(text):
    try:
        q, p = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("edge must look like q,p") from None
    return q, p


def build_parser():
    ap = Parser(prog="kgat", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="BLAS thread limit; 1 for bit-reproducible runs")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic train/dev corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--dev", type=int, default=500)
    p.add_argument("--multi-frac", type=float, default=0.3)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a claim verifier")
    p.add_argument("--data", required=True, help="directory with train.jsonl, dev.jsonl, vocab.txt")
    p.add_argument("--config")
    p.add_argument("--mode", choices=list(MODE_TABLE))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset with a trained verifier")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--golden-evidence", action="store_true")
    p.add_argument("--report", required=True)
    p.add_argument("--predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-ranker", help="train the sentence ranker")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ranker)

    p = sub.add_parser("rank", help="rescore and truncate candidates with a ranker")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("gradcheck", help="finite-difference check of all model gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--mode", choices=list(MODE_TABLE))
    p.add_argument("--dim", type=int, default=16)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", help="attention analyses of a trained verifier")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--case")
    p.add_argument("--edge", type=_edge)
    p.add_argument("--case-out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("kernels", help="print the kernel bank")
    p.add_argument("--count", type=int, default=21)
    p.set_defaults(func=cmd_kernels)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, MetricError, KeyError, IndexError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
