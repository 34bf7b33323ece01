import math

import numpy as np
import pytest

from kgat.checkpoint import Checkpoint, CheckpointError
from kgat.config import Config
from kgat.data import Label, generate_synthetic, prepare
from kgat.numerics import NumericError
from kgat.train import GraphCache, accumulate_gradients, evaluate, train

SMALL = Config(dim=8, kernels=11, batch_size=2, accumulation=2, lr=5e-3, epochs=2, eval_batch=16)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(3, 40, 20, 0.3)


def test_zero_epochs_returns_fresh_model(corpus):
    tr, dv, vocab = corpus
    ckpt, hist = train(tr, dv, vocab, SMALL.with_overrides(epochs=0), seed=5)
    fresh = Checkpoint.fresh("kgat", SMALL.with_overrides(epochs=0, seed=5), vocab, 5)
    for name, p in fresh.model.named_parameters().items():
        assert np.array_equal(ckpt.model.named_parameters()[name].value, p.value)
    assert hist.steps == [] and hist.epochs == []


def test_same_seed_same_history(corpus):
    tr, dv, vocab = corpus
    a = train(tr, dv, vocab, SMALL, seed=1)[1]
    b = train(tr, dv, vocab, SMALL, seed=1)[1]
    assert a.dumps() == b.dumps()
    assert len(a.steps) == 2 * math.ceil(40 / 4)
    assert [e["epoch"] for e in a.epochs] == [1, 2] and "dev_la" in a.epochs[0]


def test_step_at_peak_lr_lowers_micro_batch_loss(corpus):
    tr, _, vocab = corpus
    cfg = Config(dim=8, kernels=11)
    ckpt = Checkpoint.fresh("kgat", cfg, vocab, 0)
    model, params = ckpt.model, ckpt.model.parameters()
    cache = GraphCache([prepare(i, 5, force_golden=True) for i in tr[:4]], vocab, cfg.max_len)
    for p in params:
        p.zero_grad()
    before = accumulate_gradients(model, cache, [0, 1, 2, 3], 4)
    ckpt.optimizer.step(params, cfg.lr)
    after = float(model.predict(cache.batch([0, 1, 2, 3])).loss.value)
    assert after < before


def test_accumulation_matches_full_batch(corpus):
    tr, _, vocab = corpus
    ckpt = Checkpoint.fresh("kgat", Config(dim=8, kernels=11), vocab, 0)
    model, params = ckpt.model, ckpt.model.parameters()
    cache = GraphCache([prepare(i, 5, force_golden=True) for i in tr[:32]], vocab, 130)
    idx = list(range(32))
    for p in params:
        p.zero_grad()
    full = accumulate_gradients(model, cache, idx, 32)
    g_full = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()
    acc = accumulate_gradients(model, cache, idx, 4)
    assert acc == pytest.approx(full, abs=1e-9)
    for p in params:
        np.testing.assert_allclose(p.grad, g_full[p.name], rtol=0, atol=1e-9)


def test_non_finite_loss_aborts(corpus, monkeypatch):
    tr, dv, vocab = corpus
    import kgat.train as mod
    monkeypatch.setattr(mod, "accumulate_gradients", lambda *a, **k: float("nan"))
    with pytest.raises(NumericError, match="non-finite loss"):
        train(tr, dv, vocab, SMALL, seed=0)


def test_untrained_model_is_at_chance():
    _, dev, vocab = generate_synthetic(11, 0, 300, 0.3)
    ckpt = Checkpoint.fresh("kgat", Config(dim=8, kernels=11), vocab, 0)
    la = evaluate(dev, ckpt, traces=False).metrics["label_accuracy"]
    assert abs(la - 1 / 3) <= 0.1


def test_evaluate_is_deterministic(corpus):
    _, dv, vocab = corpus
    ckpt = Checkpoint.fresh("kgat", SMALL, vocab, 2)
    a, b = evaluate(dv, ckpt), evaluate(dv, ckpt)
    assert a.metrics == b.metrics
    assert [(p.claim_id, p.label, p.evidence) for p in a.predictions] == \
        [(p.claim_id, p.label, p.evidence) for p in b.predictions]
    for pa, pb in zip(a.predictions, b.predictions):
        assert np.array_equal(pa.probs, pb.probs) and np.array_equal(pa.selection, pb.selection)


def test_golden_evidence_mode(corpus):
    _, dv, vocab = corpus
    ckpt = Checkpoint.fresh("kgat", SMALL, vocab, 2)
    res = evaluate(dv, ckpt, golden_evidence=True)
    assert "gfever" in res.metrics and "fever" not in res.metrics
    for inst in res.instances:
        keys = {c.key for c in inst.candidates}
        assert inst.golden_union <= keys
    assert all(p.golden_condition for p in res.predictions)


def test_evaluate_rejects_foreign_vocabulary(corpus):
    _, dv, vocab = corpus
    _, _, other = generate_synthetic(99, 5, 5, 0.3)
    ckpt = Checkpoint.fresh("kgat", SMALL, vocab, 0)
    if other != vocab:
        with pytest.raises(CheckpointError, match="config mismatch"):
            evaluate(dv, ckpt, vocab=other)
    ranker = Checkpoint.fresh("ranker", SMALL, vocab, 0)
    with pytest.raises(CheckpointError, match="config mismatch"):
        evaluate(dv, ranker)


def test_prediction_fields(corpus):
    _, dv, vocab = corpus
    res = evaluate(dv, Checkpoint.fresh("kgat", SMALL, vocab, 0))
    p = res.predictions[0]
    assert p.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert p.selection.shape == (5,) and len(p.evidence) <= 5
    assert isinstance(p.label, Label)
    assert len(res.traces) == len(dv)
