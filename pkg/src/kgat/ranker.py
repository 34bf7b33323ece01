"""Kernel-pooling sentence ranker trained with a pairwise hinge loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DataError, EvidenceSentence
from .encoder import Encoder
from .kernels import default_bank, pool
from .numerics import Adam, Affine, NumericError, Tensor, cosine, lr_schedule, no_grad, relu


class Ranker:
    """Scores a claim-sentence pair from mean kernel features of claim rows."""

    def __init__(self, vocab_size, dim=32, bank=None, seed=0):
        self.bank = bank or default_bank()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder.init(vocab_size, dim, rng, prefix="ranker.encoder")
        self.scorer = Affine.init("ranker.score", len(self.bank), 1, rng, scale=0.01)

    @property
    def dim(self):
        return self.encoder.dim

    def parameters(self):
        return [*self.encoder.parameters(), *self.scorer.parameters()]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def features(self, claim_ids, claim_mask, sent_ids, sent_mask):
        """Mean kernel features [N, K] for padded pairs [N, Lc] x [N, Ls]."""
        if not np.asarray(sent_mask).any(axis=-1).all():
            raise DataError("cannot score an empty sentence")
        if not np.asarray(claim_mask).any(axis=-1).all():
            raise DataError("cannot score an empty claim")
        Hc = self.encoder.token_states(claim_ids, claim_mask)
        Hs = self.encoder.token_states(sent_ids, sent_mask)
        M = cosine(Hc, Hs)                                            # [N, Lc, Ls]
        feats = pool(M, sent_mask, claim_mask, self.bank)
        m = np.asarray(claim_mask).sum(-1).astype(float)
        return feats.sum(axis=1) / m[:, None]

    def scores(self, claim_ids, claim_mask, sent_ids, sent_mask):
        return self.scorer(self.features(claim_ids, claim_mask, sent_ids, sent_mask)).reshape(-1)


def sentence_tokens(sentence: EvidenceSentence):
    if sentence.pad:
        raise DataError("cannot score PAD evidence")
    return (*sentence.title_tokens, *sentence.sentence_tokens)


def _pad(seqs, pad_id):
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def encode_pairs(claims, sentences, vocab):
    """Token-id arrays for parallel lists of claim token tuples and sentences."""
    pad_id = vocab.index["[PAD]"]
    c_ids, c_mask = _pad([vocab.ids(c) for c in claims], pad_id)
    s_ids, s_mask = _pad([vocab.ids(sentence_tokens(s)) for s in sentences], pad_id)
    return c_ids, c_mask, s_ids, s_mask


def score_batch(claims, sentences, model, vocab):
    with no_grad():
        return model.scores(*encode_pairs(claims, sentences, vocab)).value.copy()


def score(claim_tokens, sentence, model, vocab):
    return float(score_batch([tuple(claim_tokens)], [sentence], model, vocab)[0])


def pairwise_loss(s_pos, s_neg, margin=1.0):
    """Hinge on the score gap. Works on floats and on Tensors."""
    if isinstance(s_pos, Tensor) or isinstance(s_neg, Tensor):
        return relu(margin - s_pos + s_neg)
    return max(0.0, margin - s_pos + s_neg)


def rank(claim_tokens, candidates, model, vocab, k=5):
    """Top-k candidates rescored by the ranker, highest first.

    Ties are broken by (doc_id, sent_idx), so the result does not depend on
    the input order.
    """
    real = [c for c in candidates if not c.pad]
    if not real:
        raise DataError("rank needs at least one candidate")
    s = score_batch([tuple(claim_tokens)] * len(real), real, model, vocab)
    ranked = sorted(zip(real, s.tolist()), key=lambda cs: (-cs[1], cs[0].doc_id, cs[0].sent_idx))
    return [replace(c, retrieval_score=sc) for c, sc in ranked[:k]]


def rerank_instance(inst, model, vocab, k=5):
    return replace(inst, candidates=rank(inst.claim_tokens, inst.candidates, model, vocab, k))


@dataclass
class RankerHistory:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def to_dict(self):
        return {"steps": self.steps, "epochs": self.epochs}


def training_pairs(instances, rng):
    """One uniformly drawn non-golden negative per golden candidate."""
    claims, pos, neg = [], [], []
    for inst in instances:
        gold = inst.golden_union
        real = [c for c in inst.candidates if not c.pad]
        positives = [c for c in real if c.key in gold]
        negatives = [c for c in real if c.key not in gold]
        if not positives or not negatives:
            continue
        for p in positives:
            claims.append(inst.claim_tokens)
            pos.append(p)
            neg.append(negatives[int(rng.integers(len(negatives)))])
    return claims, pos, neg


def train_ranker(instances, vocab, config, seed=None, dev=None, log=None):
    """Pairwise training over the candidates of each claim.

    Returns the trained Ranker, its Adam state and a history of per-step
    losses and per-epoch top-5 golden coverage on ``dev``.
    """
    seed = config.seed if seed is None else seed
    model = Ranker(len(vocab), config.dim, default_bank(config.kernels), seed)
    opt = Adam()
    rng = np.random.default_rng(seed)
    history = RankerHistory()
    params = model.parameters()
    per_epoch = math.ceil(len(training_pairs(instances, np.random.default_rng(0))[0])
                          / config.ranker_batch)
    total = per_epoch * config.ranker_epochs
    step = 0
    for epoch in range(config.ranker_epochs):
        epoch_seed = int(rng.integers(2**31))
        erng = np.random.default_rng(epoch_seed)
        claims, pos, neg = training_pairs(instances, erng)
        order = erng.permutation(len(claims))
        losses = []
        for start in range(0, len(order), config.ranker_batch):
            idx = order[start: start + config.ranker_batch]
            c = [claims[i] for i in idx]
            sp = model.scores(*encode_pairs(c, [pos[i] for i in idx], vocab))
            sn = model.scores(*encode_pairs(c, [neg[i] for i in idx], vocab))
            loss = pairwise_loss(sp, sn, config.ranker_margin).sum() / float(len(idx))
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericError(f"ranker loss became {value} at epoch {epoch}, step {step}")
            for p in params:
                p.zero_grad()
            loss.backward()
            step += 1
            lr = lr_schedule(step, total, config.ranker_lr, config.warmup)
            opt.step(params, lr)
            history.steps.append({"step": step, "lr": lr, "loss": value})
            losses.append(value)
        record = {"epoch": epoch + 1, "shuffle_seed": epoch_seed,
                  "train_loss": float(np.mean(losses)) if losses else None}
        if dev is not None:
            record["dev_top5_golden"] = golden_coverage(dev, model, vocab, 5)
        history.epochs.append(record)
        if log:
            log(record)
    return model, opt, history


def golden_coverage(instances, model, vocab, k=5):
    """Fraction of verifiable claims whose golden sentences all rank in the top k."""
    hits = total = 0
    for inst in instances:
        gold = inst.golden_union
        if not gold:
            continue
        total += 1
        top = {c.key for c in rank(inst.claim_tokens, inst.candidates, model, vocab, k)}
        hits += gold <= top
    if total == 0:
        raise DataError("no verifiable claims")
    return hits / total
