import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kgat.data import DataError, EvidenceSentence, Vocabulary
from kgat.encoder import Encoder, ExternalStates, load_external_states, node_sequence
from kgat.numerics import Affine, Parameter

from conftest import WORDS


def sentence(text, title="w0"):
    return EvidenceSentence("d", 0, tuple(title.split()), tuple(text.split()), 0.5)


def test_node_layout(word_vocab):
    seq = node_sequence(("w1", "w2"), sentence("w3 w4", "w5"), word_vocab)
    assert seq.tokens == ("[CLS]", "w1", "w2", "[SEP]", "w5", "w3", "w4", "[SEP]")
    assert seq.claim_span == (1, 3) and seq.evidence_span == (4, 7)
    assert seq.claim_mask.tolist() == [False, True, True, True, False, False, False, False]
    assert seq.evidence_mask.sum() == 4


def test_pad_evidence_node(word_vocab):
    seq = node_sequence(("w1",), EvidenceSentence.padding(), word_vocab)
    assert seq.tokens[-1] == "[PAD]"
    assert not seq.mask[-1]
    assert not seq.evidence_mask.any()


def test_truncates_evidence_tail(word_vocab):
    seq = node_sequence(("w1", "w2"), sentence(" ".join(WORDS)), word_vocab, max_len=10)
    assert len(seq) == 10
    assert seq.tokens[:4] == ("[CLS]", "w1", "w2", "[SEP]")
    assert seq.evidence_span == (4, 9)


def test_claim_too_long(word_vocab):
    with pytest.raises(DataError):
        node_sequence(tuple(WORDS), sentence("w1"), word_vocab, max_len=10)


@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=40),
       st.lists(st.sampled_from(WORDS), min_size=1, max_size=140))
def test_spans_cover_body(claim, text):
    vocab = Vocabulary(["[CLS]", "[SEP]", "[PAD]", "[UNK]"] + WORDS)
    seq = node_sequence(tuple(claim), sentence(" ".join(text)), vocab)
    assert len(seq) <= 130
    assert seq.claim_span[1] + 1 == seq.evidence_span[0]
    assert seq.evidence_span[1] == len(seq) - 1
    assert not (seq.claim_mask & seq.evidence_mask).any()


def identity_encoder(table):
    d = table.shape[1]
    return Encoder(Parameter(table, "e"), Affine(Parameter(np.eye(d), "w"), Parameter(np.zeros(d), "b")))


def test_identity_projection_returns_embedding():
    table = np.random.default_rng(0).normal(size=(6, 4))
    enc = identity_encoder(table)
    H = enc.states(np.array([0, 5]), np.array([True, True])).value
    np.testing.assert_allclose(H[1], table[5])
    np.testing.assert_allclose(H[0], table[5])


def test_z_ignores_pad_rows(word_vocab):
    enc = Encoder.init(len(word_vocab), 8, np.random.default_rng(0))
    seq = node_sequence(("w1", "w2"), EvidenceSentence.padding(), word_vocab)
    st_ = enc.encode(seq)
    assert np.all(st_.H[-1] == 0.0)
    np.testing.assert_allclose(st_.z, st_.H[1:4].mean(0))


def test_identical_nodes_identical_states(word_vocab):
    enc = Encoder.init(len(word_vocab), 8, np.random.default_rng(0))
    a = enc.encode(node_sequence(("w1",), sentence("w2 w3"), word_vocab))
    b = enc.encode(node_sequence(("w1",), sentence("w2 w3"), word_vocab))
    np.testing.assert_array_equal(a.H, b.H)


def test_vocabulary_relabelling_equivariance():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(10, 4))
    proj = rng.normal(size=(4, 4))
    ids = np.array([0, 3, 7, 7, 2])
    perm = rng.permutation(10)
    inv = np.argsort(perm)
    a = Encoder(Parameter(table, "e"), Affine(Parameter(proj, "w"), Parameter(np.zeros(4), "b")))
    b = Encoder(Parameter(table[inv], "e"), Affine(Parameter(proj, "w"), Parameter(np.zeros(4), "b")))
    mask = np.ones(5, bool)
    np.testing.assert_allclose(a.states(ids, mask).value, b.states(perm[ids], mask).value, atol=1e-14)


def test_encode_rejects_out_of_range(word_vocab):
    enc = Encoder.init(5, 4, np.random.default_rng(0))
    with pytest.raises(IndexError):
        enc.encode(node_sequence(("w9",), sentence("w1"), word_vocab))


def test_external_states(tmp_path):
    path = tmp_path / "states.npz"
    H = np.random.default_rng(0).normal(size=(7, 16))
    ExternalStates.save(path, {("c1", 0): H})
    got = load_external_states(path, "c1", 0, 16)
    np.testing.assert_array_equal(got.H, H)
    np.testing.assert_array_equal(got.z, H[0])
    with pytest.raises(DataError):
        load_external_states(path, "c1", 0, 32)
    with pytest.raises(KeyError, match="c1.*node=3"):
        load_external_states(path, "c1", 3, 16)
