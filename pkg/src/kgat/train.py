"""Training loop with gradient accumulation, and the evaluation driver."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .data import Label, prepare, with_golden_candidates
from .metrics import (
    AttentionTrace,
    ClaimPrediction,
    MetricError,
    evidence_prf,
    fever_score,
    label_accuracy,
)
from .model import GraphBatch, batch_graphs, build_graph
from .numerics import NumericError, lr_schedule


@dataclass
class History:
    steps: list = field(default_factory=list)    # {"step", "lr", "loss"}
    epochs: list = field(default_factory=list)   # {"epoch", "shuffle_seed", "train_loss", "dev_la", "dev_fever"}
    best_epoch: int = 0
    best_dev_la: float | None = None

    def to_dict(self):
        return {"steps": self.steps, "epochs": self.epochs,
                "best_epoch": self.best_epoch, "best_dev_la": self.best_dev_la}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


class GraphCache:
    """Builds each instance's node sequences once and batches them on demand."""

    def __init__(self, instances, vocab, max_len):
        self.instances = list(instances)
        self.vocab = vocab
        self.max_len = max_len
        self.graphs = [build_graph(i, vocab, None, max_len) for i in self.instances]

    def batch(self, indices) -> GraphBatch:
        insts = [self.instances[i] for i in indices]
        return batch_graphs(insts, self.vocab, self.max_len, [self.graphs[i] for i in indices])


def _snapshot(model):
    return {name: p.value.copy() for name, p in model.named_parameters().items()}


def _restore(model, snap):
    for name, p in model.named_parameters().items():
        p.value = snap[name].copy()


def accumulate_gradients(model, cache, indices, batch_size):
    """Summed loss and gradients over micro-batches of ``indices``."""
    total = 0.0
    for start in range(0, len(indices), batch_size):
        out = model.forward(cache.batch(indices[start: start + batch_size]))
        out.loss.backward()
        total += float(out.loss.value)
    return total


def train(train_set, dev_set, vocab, config, mode=None, seed=None, log=None):
    """Train KGAT and keep the parameters of the best dev-LA epoch.

    ``train_set`` and ``dev_set`` are raw instances; training candidates are
    prepared with golden sentences forced in, dev candidates by score only.
    Each optimizer step averages gradients over ``batch_size * accumulation``
    claims. Returns (Checkpoint, History).
    """
    if mode is not None:
        config = config.with_overrides(mode=mode)
    if seed is not None:
        config = config.with_overrides(seed=seed)
    ckpt = Checkpoint.fresh("kgat", config, vocab, config.seed)
    model, opt = ckpt.model, ckpt.optimizer
    history = History()
    if config.epochs == 0:
        return ckpt, history

    train_prep = [prepare(i, config.evidence_per_claim, force_golden=True) for i in train_set]
    cache = GraphCache(train_prep, vocab, config.max_len)
    window = config.batch_size * config.accumulation
    per_epoch = math.ceil(len(train_prep) / window)
    total = per_epoch * config.epochs
    params = model.parameters()
    rng = np.random.default_rng(config.seed)
    dev_cache = None if not dev_set else GraphCache(
        [prepare(i, config.evidence_per_claim) for i in dev_set], vocab, config.max_len)

    best, stale, step = None, 0, 0
    for epoch in range(1, config.epochs + 1):
        shuffle_seed = int(rng.integers(2**31))
        order = np.random.default_rng(shuffle_seed).permutation(len(train_prep))
        epoch_loss = 0.0
        for s in range(per_epoch):
            idx = order[s * window: (s + 1) * window]
            for p in params:
                p.zero_grad()
            loss_sum = accumulate_gradients(model, cache, idx, config.batch_size)
            if not math.isfinite(loss_sum):
                raise NumericError(
                    f"non-finite loss {loss_sum} at epoch {epoch}, step {step + 1}; claims "
                    + ", ".join(train_prep[i].claim_id for i in idx[:8]))
            scale = 1.0 / len(idx)
            for p in params:
                p.grad *= scale
            step += 1
            lr = lr_schedule(step, total, config.lr, config.warmup)
            opt.step(params, lr)
            history.steps.append({"step": step, "lr": lr, "loss": loss_sum * scale})
            epoch_loss += loss_sum

        record = {"epoch": epoch, "shuffle_seed": shuffle_seed,
                  "train_loss": epoch_loss / len(train_prep)}
        if dev_cache is not None:
            preds, _ = predict_cached(model, dev_cache, config.eval_batch, traces=False)
            record["dev_la"] = label_accuracy(preds, dev_cache.instances)
            record["dev_fever"] = fever_score(preds, dev_cache.instances)
        history.epochs.append(record)
        if log:
            log(record)

        la = record.get("dev_la", -record["train_loss"])
        if best is None or la > best[0]:
            best, stale = (la, epoch, _snapshot(model)), 0
        else:
            stale += 1
        if la >= config.target_la or (config.patience and stale >= config.patience):
            break

    _restore(model, best[2])
    history.best_epoch = best[1]
    history.best_dev_la = best[0] if dev_cache is not None else None
    return ckpt, history


# -- evaluation --------------------------------------------------------------


def _trace(graph, out, b):
    l = len(graph.nodes)
    L = max(len(n) for n in graph.nodes)
    support = np.zeros((l, L), dtype=bool)
    for q, n in enumerate(graph.nodes):
        support[q, : len(n)] = n.claim_mask | n.evidence_mask
    return AttentionTrace(
        claim_id=graph.claim_id,
        candidates=tuple(graph.keys),
        tokens=[list(n.tokens) for n in graph.nodes],
        valid=graph.valid.copy(),
        support=support,
        alpha=out.alpha.value[b, :, :, :L].copy(),
        beta=out.beta.value[b].copy(),
        selection=out.selection.value[b].copy(),
        per_node=out.per_node.value[b].copy(),
        probs=out.probs.value[b].copy(),
    )


def predict_cached(model, cache, eval_batch=64, traces=True, golden_condition=False, k=5):
    preds, trs = [], []
    for start in range(0, len(cache.instances), eval_batch):
        idx = list(range(start, min(start + eval_batch, len(cache.instances))))
        out = model.predict(cache.batch(idx))
        for b, i in enumerate(idx):
            g = cache.graphs[i]
            sel = out.selection.value[b]
            order = sorted(np.flatnonzero(g.valid), key=lambda p: (-sel[p], p))
            preds.append(ClaimPrediction(
                claim_id=g.claim_id,
                label=Label(int(np.argmax(out.probs.value[b]))),
                evidence=tuple(g.keys[p] for p in order[:k]),
                probs=out.probs.value[b].copy(),
                selection=sel.copy(),
                candidates=tuple(g.keys),
                golden_condition=golden_condition,
            ))
            if traces:
                trs.append(_trace(g, out, b))
    return preds, trs


@dataclass
class EvalResult:
    predictions: list
    traces: list
    metrics: dict
    instances: list


def evaluate(instances, ckpt: Checkpoint, golden_evidence=False, vocab=None, traces=True):
    """Predict every claim and score the run.

    With ``golden_evidence`` the golden sentences replace the lowest-ranked
    candidates first, and the FEVER score is reported as GFEVER.
    """
    if ckpt.kind != "kgat":
        raise CheckpointError(f"config mismatch: expected a kgat checkpoint, got {ckpt.kind!r}")
    if vocab is not None and vocab != ckpt.vocab:
        raise CheckpointError("config mismatch: dataset vocabulary differs from the checkpoint's")
    config = ckpt.config
    prep = [with_golden_candidates(i, config.evidence_per_claim) if golden_evidence
            else prepare(i, config.evidence_per_claim) for i in instances]
    cache = GraphCache(prep, ckpt.vocab, config.max_len)
    preds, trs = predict_cached(ckpt.model, cache, config.eval_batch, traces, golden_evidence)
    return EvalResult(preds, trs, aggregate_metrics(preds, prep, golden_evidence), prep)


def aggregate_metrics(preds, gold, golden_evidence=False):
    labelled = [g for g in gold if g.label is not None]
    if not labelled:
        return {"claims": len(gold)}
    out = {"claims": len(gold), "label_accuracy": label_accuracy(preds, labelled)}
    out["gfever" if golden_evidence else "fever"] = fever_score(preds, labelled)
    try:
        prf = evidence_prf(preds, labelled)
        out.update({f"evidence_{k}@5": v for k, v in prf.items()})
    except MetricError:
        pass
    for name, subset in (("multi", [g for g in labelled if g.is_multi]),
                         ("single", [g for g in labelled if g.golden_sets and not g.is_multi])):
        if subset:
            out[f"label_accuracy_{name}"] = label_accuracy(preds, subset)
            out[f"claims_{name}"] = len(subset)
    return out
