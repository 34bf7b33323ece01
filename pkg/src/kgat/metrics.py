"""FEVER-style scores and attention analyses over evaluation outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Label

NORM_TOL = 1e-6
N_BINS = 10


class MetricError(ValueError):
    pass


@dataclass
class ClaimPrediction:
    claim_id: str
    label: Label
    evidence: tuple = ()              # predicted evidence keys, best first
    probs: np.ndarray | None = None   # P(y|G)
    selection: np.ndarray | None = None
    candidates: tuple = ()            # candidate keys in node order
    golden_condition: bool = False    # produced with golden candidates substituted


@dataclass
class AttentionTrace:
    claim_id: str
    candidates: tuple        # keys in node order; PAD evidence is ("", 0)
    tokens: list             # token strings per node
    valid: np.ndarray        # [l]
    support: np.ndarray      # [l, L] attention support per node
    alpha: np.ndarray        # [q, p, L] token attention for edge q -> p
    beta: np.ndarray         # [q, p]
    selection: np.ndarray    # [l]
    per_node: np.ndarray     # [l, 3]
    probs: np.ndarray        # [3]


def _aligned(predictions, gold):
    if not gold:
        raise MetricError("empty gold set")
    by_id = {p.claim_id: p for p in predictions}
    out = []
    for g in gold:
        if g.claim_id not in by_id:
            raise MetricError(f"missing prediction for claim {g.claim_id!r}")
        out.append((by_id[g.claim_id], g))
    return out


def label_accuracy(predictions, gold):
    pairs = _aligned(predictions, gold)
    return sum(p.label == g.label for p, g in pairs) / len(pairs)


def _evidence_ok(pred, inst, k):
    if inst.label is Label.NOT_ENOUGH_INFO:
        return True
    top = set(tuple(e) for e in pred.evidence[:k])
    return any(set(s) <= top for s in inst.golden_sets)


def fever_score(predictions, gold, k=5):
    """Label correct and, for verifiable claims, one full golden set in the top k."""
    pairs = _aligned(predictions, gold)
    return sum(p.label == g.label and _evidence_ok(p, g, k) for p, g in pairs) / len(pairs)


def gfever_score(predictions, gold, k=5):
    """FEVER score of a run made with golden evidence supplied as candidates."""
    if not all(p.golden_condition for p in predictions):
        raise MetricError("gfever_score needs predictions made with golden candidates")
    return fever_score(predictions, gold, k)


def evidence_prf(predictions, gold, k=5):
    """Micro precision/recall/F1 of the top-k evidence over verifiable claims."""
    pairs = [(p, g) for p, g in _aligned(predictions, gold) if g.golden_union]
    if not pairs:
        raise MetricError("no verifiable claims")
    hit = n_pred = n_gold = 0
    for p, g in pairs:
        top = set(tuple(e) for e in p.evidence[:k])
        gu = g.golden_union
        hit += len(top & gu)
        n_pred += len(top)
        n_gold += len(gu)
    precision = hit / n_pred if n_pred else 0.0
    recall = hit / n_gold
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


# -- attention analyses ------------------------------------------------------


def attention_entropy(dist):
    """Shannon entropy in nats of a normalised distribution."""
    p = np.asarray(dist, dtype=float)
    if np.any(p < -NORM_TOL) or abs(p.sum() - 1.0) > NORM_TOL:
        raise MetricError(f"distribution is not normalised (sum {p.sum():.9g})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _edge_distributions(trace):
    """(alpha over q's support, support size) for every valid edge."""
    idx = np.flatnonzero(trace.valid)
    for q in idx:
        sup = trace.support[q]
        for p in idx:
            yield trace.alpha[q, p][sup], int(sup.sum())


def entropy_report(traces):
    """Mean node- and edge-attention entropies with uniform baselines.

    Entropies are averaged per claim first, then across claims.
    """
    if not traces:
        raise MetricError("no traces")
    node, node_u, edge, edge_u = [], [], [], []
    for t in traces:
        sel = np.asarray(t.selection)[t.valid]
        node.append(attention_entropy(sel))
        node_u.append(math.log(int(t.valid.sum())))
        e, u = zip(*((attention_entropy(a), math.log(n)) for a, n in _edge_distributions(t)))
        edge.append(float(np.mean(e)))
        edge_u.append(float(np.mean(u)))
    return {
        "node_entropy": float(np.mean(node)),
        "node_entropy_uniform": float(np.mean(node_u)),
        "edge_entropy": float(np.mean(edge)),
        "edge_entropy_uniform": float(np.mean(edge_u)),
        "claims": len(traces),
    }


def _ranked_keys(item):
    sel = np.asarray(item.selection, dtype=float)
    order = sorted(range(len(sel)), key=lambda i: (-sel[i], i))
    return [tuple(item.candidates[i]) for i in order]


def selection_recall_at_k(items, gold, k):
    """Share of golden sentences found among the k most-selected nodes.

    ``items`` carry ``claim_id``, ``candidates`` and ``selection`` (traces or
    predictions). Micro-averaged over all golden sentences.
    """
    if k < 1:
        raise MetricError("k must be at least 1")
    by_id = {i.claim_id: i for i in items}
    covered = total = 0
    for g in gold:
        gu = g.golden_union
        if not gu:
            continue
        if g.claim_id not in by_id:
            raise MetricError(f"missing selection for claim {g.claim_id!r}")
        top = set(_ranked_keys(by_id[g.claim_id])[:k])
        covered += len(gu & top)
        total += len(gu)
    if total == 0:
        raise MetricError("no verifiable claims")
    return covered / total


def max_selection_weight_histogram(items):
    """Counts of the per-claim maximum selection weight in ten bins on [0, 1]."""
    counts = np.zeros(N_BINS, dtype=int)
    for it in items:
        top = float(np.max(it.selection))
        # the small offset keeps values such as 0.2 = 1/5 out of the bin below
        counts[min(int(math.floor(top * N_BINS + 1e-9)), N_BINS - 1)] += 1
    return counts


def sorted_token_weights(traces):
    """Token-attention weights of every valid edge, each sorted high to low."""
    return [np.sort(a)[::-1] for t in traces for a, _ in _edge_distributions(t)]


def top_fraction_mass(traces, fraction=0.1):
    """Mean attention mass carried by the top ``fraction`` of each edge's tokens."""
    masses = []
    for w in sorted_token_weights(traces):
        n = max(1, math.ceil(fraction * len(w)))
        masses.append(float(w[:n].sum()))
    return float(np.mean(masses))


@dataclass
class CaseExport:
    claim_id: str
    edge: tuple
    rows: list           # (token, alpha) in sequence order
    beta: float
    selection: np.ndarray

    def to_text(self):
        q, p = self.edge
        width = max(len("token"), *(len(t) for t, _ in self.rows))
        lines = [f"# claim {self.claim_id} edge {q}->{p} beta {self.beta:.6f}",
                 "# selection " + " ".join(f"{s:.6f}" for s in self.selection),
                 f"{'token':<{width}}  alpha"]
        lines += [f"{t:<{width}}  {w:.6f}" for t, w in self.rows]
        return "\n".join(lines) + "\n"


def export_case_attention(traces, claim_id, edge):
    """Token weights of edge (q, p) of one claim, PAD and [CLS] left out."""
    trace = next((t for t in traces if t.claim_id == claim_id), None)
    if trace is None:
        raise MetricError(f"no trace for claim {claim_id!r}")
    q, p = edge
    l = len(trace.valid)
    if not (0 <= q < l and 0 <= p < l) or not (trace.valid[q] and trace.valid[p]):
        raise MetricError(f"claim {claim_id!r} has no edge {q}->{p}")
    sup = trace.support[q]
    rows = [(trace.tokens[q][i], float(trace.alpha[q, p, i]))
            for i in range(len(trace.tokens[q])) if sup[i]]
    return CaseExport(claim_id, (q, p), rows, float(trace.beta[q, p]), np.asarray(trace.selection))
