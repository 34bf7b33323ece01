"""Finite-difference checks of the full model on small random claims."""

from __future__ import annotations

import time

import numpy as np

from .data import ClaimInstance, EvidenceSentence, Label, Vocabulary, prepare
from .model import KGAT, MODE_TABLE, batch_graphs
from .numerics import gradcheck


def random_instance(rng, n_words=20, n_candidates=5, max_tokens=8, with_pad=False):
    """A labelled claim over a tiny vocabulary; fields hold at most ``max_tokens`` tokens."""
    words = [f"w{i}" for i in range(n_words)]

    def toks(lo, hi):
        return tuple(str(w) for w in rng.choice(words, int(rng.integers(lo, hi + 1))))

    n_real = int(rng.integers(1, n_candidates + 1)) if with_pad else n_candidates
    cands = [EvidenceSentence(f"d{i}", i, toks(1, 2), toks(3, max_tokens), float(rng.random()))
             for i in range(n_real)]
    label = Label(int(rng.integers(3)))
    golden = [] if label is Label.NOT_ENOUGH_INFO else [frozenset([cands[0].key])]
    inst = ClaimInstance("c0", toks(3, min(6, max_tokens)), label, cands, golden)
    return prepare(inst, n_candidates)


def gradcheck_model(mode="full", seed=0, eps=1e-5, tol=1e-3, dim=16, max_tokens=12):
    """Gradcheck every parameter of one model on one random claim.

    Returns (results, seconds).
    """
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, max_tokens=max_tokens)
    vocab = Vocabulary.build([inst])
    model = KGAT(len(vocab), dim, mode=mode, seed=seed)
    batch = batch_graphs([inst], vocab)
    start = time.perf_counter()
    results = gradcheck(lambda: model.forward(batch).loss, model.parameters(), eps=eps, tol=tol)
    return results, time.perf_counter() - start


def gradcheck_all(seed=0, eps=1e-5, tol=1e-3, modes=tuple(MODE_TABLE), dim=16):
    return {mode: gradcheck_model(mode, seed, eps, tol, dim) for mode in modes}
