"""Kernel graph attention over a fully connected claim-evidence graph.

Shapes inside :meth:`KGAT.forward` use B (claims), l (nodes per claim),
L (padded sequence length), d (state width), K (kernels). Edge tensors are
indexed ``[b, q, p, ...]`` for information flowing from node q to node p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Label
from .encoder import Encoder, node_sequence
from .kernels import KernelBank, default_bank, pool
from .numerics import (
    Affine,
    Tensor,
    TwoLayerPerceptron,
    concat,
    cosine,
    log_clamped,
    masked_softmax,
    no_grad,
)

N_LABELS = len(Label)
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class AblationMode:
    edge_attention: str  # "kernel" | "dot"
    node_selection: str

    @classmethod
    def named(cls, name):
        try:
            return MODE_TABLE[name]
        except KeyError:
            raise ValueError(f"unknown ablation mode {name!r}") from None

    @property
    def name(self):
        return {v: k for k, v in MODE_TABLE.items()}[self]


MODE_TABLE = {
    "full": AblationMode("kernel", "kernel"),
    "node": AblationMode("dot", "kernel"),
    "edge": AblationMode("kernel", "dot"),
    "gat": AblationMode("dot", "dot"),
}


@dataclass
class EvidenceGraph:
    claim_id: str
    nodes: list          # NodeSequence per candidate
    valid: np.ndarray    # [l] False for PAD-evidence
    keys: tuple = ()     # (doc_id, sent_idx) per candidate
    states: list | None = None

    @property
    def edges(self):
        idx = np.flatnonzero(self.valid)
        return [(int(q), int(p)) for q in idx for p in idx]


def build_graph(instance, vocab, encoder=None, max_len=130):
    nodes = [node_sequence(instance.claim_tokens, c, vocab, max_len) for c in instance.candidates]
    valid = np.array([not c.pad for c in instance.candidates])
    states = [encoder.encode(n) for n in nodes] if encoder is not None else None
    keys = tuple(c.key for c in instance.candidates)
    return EvidenceGraph(instance.claim_id, nodes, valid, keys, states)


@dataclass
class GraphBatch:
    claim_ids: list
    graphs: list
    ids: np.ndarray        # [B, l, L]
    real: np.ndarray       # [B, l, L]
    claim: np.ndarray      # [B, l, L]
    evidence: np.ndarray   # [B, l, L]
    valid: np.ndarray      # [B, l]
    labels: np.ndarray | None

    @property
    def support(self):
        """Positions that take part in attention: everything real except [CLS]."""
        return self.claim | self.evidence

    def __len__(self):
        return len(self.claim_ids)


def batch_graphs(instances, vocab, max_len=130, graphs=None):
    if graphs is None:
        graphs = [build_graph(i, vocab, None, max_len) for i in instances]
    B, l = len(graphs), len(graphs[0].nodes)
    if any(len(g.nodes) != l for g in graphs):
        raise ValueError("all instances in a batch need the same evidence count")
    L = max(len(n) for g in graphs for n in g.nodes)
    pad_id = vocab.index["[PAD]"]
    ids = np.full((B, l, L), pad_id, dtype=np.int64)
    real = np.zeros((B, l, L), bool)
    claim = np.zeros((B, l, L), bool)
    evid = np.zeros((B, l, L), bool)
    for b, g in enumerate(graphs):
        for p, n in enumerate(g.nodes):
            k = len(n)
            ids[b, p, :k] = n.ids
            real[b, p, :k] = n.mask
            claim[b, p, :k] = n.claim_mask
            evid[b, p, :k] = n.evidence_mask
    valid = np.stack([g.valid for g in graphs])
    if not valid.any(axis=1).all():
        raise ValueError("every claim needs at least one real evidence candidate")
    labels = None
    if all(i.label is not None for i in instances):
        labels = np.array([int(i.label) for i in instances], dtype=np.int64)
    return GraphBatch([i.claim_id for i in instances], graphs, ids, real, claim, evid, valid, labels)


@dataclass
class Output:
    probs: Tensor        # [B, 3]     P(y|G)
    per_node: Tensor     # [B, l, 3]  P(y|n^p, G)
    selection: Tensor    # [B, l]     P(n^p|G)
    alpha: Tensor        # [B, q, p, L] token attention for edge q -> p
    beta: Tensor         # [B, q, p]  sentence attention for edge q -> p
    loss: Tensor | None  # summed over the batch


class KGAT:
    def __init__(self, vocab_size, dim=32, bank: KernelBank | None = None, mode="full", seed=0):
        self.mode = AblationMode.named(mode) if isinstance(mode, str) else mode
        self.bank = bank or default_bank()
        rng = np.random.default_rng(seed)
        K = len(self.bank)
        self.encoder = Encoder.init(vocab_size, dim, rng)
        self.token_attention = (Affine.init("token_attention", K, 1, rng, scale=0.01)
                                if self.mode.edge_attention == "kernel" else None)
        self.sentence_mlp = TwoLayerPerceptron.init("sentence_attention", 2 * dim, dim, 1, rng)
        self.label_layer = Affine.init("label", 2 * dim, N_LABELS, rng)
        self.selection = (Affine.init("selection", K, 1, rng, scale=0.01)
                          if self.mode.node_selection == "kernel" else None)

    @property
    def dim(self):
        return self.encoder.dim

    def parameters(self):
        out = list(self.encoder.parameters())
        if self.token_attention is not None:
            out += self.token_attention.parameters()
        out += self.sentence_mlp.parameters()
        out += self.label_layer.parameters()
        if self.selection is not None:
            out += self.selection.parameters()
        return out

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    # -- forward pieces ------------------------------------------------------

    def token_logits(self, H, z, support):
        """Unnormalised token attention [B, q, p, L] over node q's tokens."""
        B, l, L, d = H.shape
        if self.mode.edge_attention == "kernel":
            M = cosine(H.expand_dims(2), H.expand_dims(1))            # [B, q, p, L, L]
            feats = pool(M, support[:, None, :, :], support[:, :, None, :], self.bank)
            return self.token_attention(feats).reshape(B, l, l, L)
        prod = H @ z.swapaxes(1, 2).expand_dims(1)                  # [B, q, L, p]
        return prod.swapaxes(2, 3) / math.sqrt(d)

    def selection_logits(self, H, z, claim, evidence):
        B, l, L, d = H.shape
        m_real = np.maximum(claim.sum(-1), 1).astype(float)        # [B, l]
        if self.mode.node_selection == "kernel":
            M = cosine(H, H)                                          # [B, l, L, L]
            feats = pool(M, evidence, claim, self.bank)               # [B, l, L, K]
            phi = feats.sum(axis=2) / m_real[..., None]
            return self.selection(phi).reshape(B, l)
        zc = (H * claim[..., None].astype(float)).sum(axis=2) / m_real[..., None]
        return (zc * z).sum(axis=-1) / math.sqrt(d)

    def node_features(self, H, claim, evidence):
        """phi(n^p): mean kernel features of claim rows against evidence columns."""
        m_real = np.maximum(claim.sum(-1), 1).astype(float)
        feats = pool(cosine(H, H), evidence, claim, self.bank)
        return feats.sum(axis=2) / m_real[..., None]

    def forward(self, batch: GraphBatch, states=None):
        H = self.encoder.states(batch.ids, batch.real) if states is None else Tensor(states)
        B, l, L, d = H.shape
        z = H[:, :, 0, :]                                             # [B, l, d]
        support = batch.support

        alpha = masked_softmax(self.token_logits(H, z, support),
                               np.broadcast_to(support[:, :, None, :], (B, l, l, L)), axis=-1)
        zhat = alpha @ H                                              # [B, q, p, d]

        zp = z.expand_dims(1).broadcast_to((B, l, l, d))
        scores = self.sentence_mlp(concat([zp, zhat], axis=-1)).reshape(B, l, l)
        beta = masked_softmax(scores, np.broadcast_to(batch.valid[:, :, None], (B, l, l)), axis=1)
        v = concat([(beta.expand_dims(-1) * zhat).sum(axis=1), z], axis=-1)   # [B, p, 2d]
        per_node = masked_softmax(self.label_layer(v), np.ones((B, l, N_LABELS), bool), axis=-1)

        sel = masked_softmax(self.selection_logits(H, z, batch.claim, batch.evidence),
                             batch.valid, axis=1)
        probs = (per_node * sel.expand_dims(-1)).sum(axis=1)
        loss = None
        if batch.labels is not None:
            picked = probs[np.arange(B), batch.labels]
            loss = -log_clamped(picked, PROB_FLOOR).sum()
        return Output(probs, per_node, sel, alpha, beta, loss)

    def predict(self, batch, states=None):
        with no_grad():
            return self.forward(batch, states)


# -- single-step helpers with the published signatures ----------------------


def propagate(H_q, alpha):
    """z_hat^{q->p} = sum_i alpha_i H^q_i."""
    return np.asarray(alpha) @ np.asarray(H_q)


def update_node(beta, zhats, z_p):
    """v^p = (sum_q beta^{q->p} z_hat^{q->p}) concatenated with z^p."""
    return np.concatenate([np.asarray(beta) @ np.asarray(zhats), np.asarray(z_p)])


def joint_distribution(per_node, selection):
    return np.asarray(selection) @ np.asarray(per_node)


def loss(probs, label):
    return -math.log(max(float(probs[int(label)]), PROB_FLOOR))
