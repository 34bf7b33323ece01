"""Claim/evidence records, JSONL I/O, vocabulary and the synthetic corpus."""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

EVIDENCE_PER_CLAIM = 5

CLS, SEP, PAD, UNK = "[CLS]", "[SEP]", "[PAD]", "[UNK]"
RESERVED = (CLS, SEP, PAD, UNK)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Label(enum.IntEnum):
    SUPPORTS = 0
    REFUTES = 1
    NOT_ENOUGH_INFO = 2

    @property
    def wire(self):
        return "NOT ENOUGH INFO" if self is Label.NOT_ENOUGH_INFO else self.name

    @classmethod
    def parse(cls, text):
        for label in cls:
            if text == label.wire:
                return label
        raise DataError(f"unknown label {text!r}")


@dataclass(frozen=True)
class EvidenceSentence:
    doc_id: str
    sent_idx: int
    title_tokens: tuple
    sentence_tokens: tuple
    retrieval_score: float | None = None
    pad: bool = False

    def __post_init__(self):
        if not self.sentence_tokens:
            raise DataError(f"empty sentence {self.doc_id}:{self.sent_idx}")
        if self.sent_idx < 0:
            raise DataError(f"negative sentence index in {self.doc_id}")

    @property
    def key(self):
        return (self.doc_id, self.sent_idx)

    @classmethod
    def padding(cls):
        return cls("", 0, (), (PAD,), -math.inf, pad=True)


@dataclass
class ClaimInstance:
    claim_id: str
    claim_tokens: tuple
    label: Label | None
    candidates: list
    golden_sets: list = field(default_factory=list)

    def __post_init__(self):
        if not self.claim_tokens:
            raise DataError(f"claim {self.claim_id} has no tokens")
        if self.label is not None:
            nei = self.label is Label.NOT_ENOUGH_INFO
            if nei and self.golden_sets:
                raise DataError(f"claim {self.claim_id}: NOT ENOUGH INFO with golden evidence")
            if not nei and not self.golden_sets:
                raise DataError(f"claim {self.claim_id}: verifiable claim without golden evidence")

    @property
    def golden_union(self):
        out = set()
        for s in self.golden_sets:
            out |= set(s)
        return out

    @property
    def is_multi(self):
        """True when every golden set needs more than one sentence."""
        return bool(self.golden_sets) and min(len(s) for s in self.golden_sets) > 1

    @property
    def n_valid(self):
        return sum(not c.pad for c in self.candidates)


# -- JSONL -------------------------------------------------------------------


def _sort_key(c):
    score = -math.inf if c.retrieval_score is None else c.retrieval_score
    return (-score, c.doc_id, c.sent_idx)


def instance_from_record(rec):
    try:
        cands = [
            EvidenceSentence(
                str(c["doc_id"]), int(c["sent_idx"]),
                tuple(c.get("title", "").split()), tuple(c["text"].split()),
                None if c.get("score") is None else float(c["score"]),
            )
            for c in rec.get("candidates", [])
        ]
        golden = [frozenset((str(d), int(i)) for d, i in g) for g in rec.get("golden", [])]
        label = None if rec.get("label") is None else Label.parse(rec["label"])
        return ClaimInstance(str(rec["claim_id"]), tuple(rec["claim"].split()), label, cands,
                             [g for g in golden if g])
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataError(f"bad record field: {exc}") from exc


def instance_to_record(inst):
    rec = {
        "claim_id": inst.claim_id,
        "claim": " ".join(inst.claim_tokens),
        "label": None if inst.label is None else inst.label.wire,
        "candidates": [
            {"doc_id": c.doc_id, "sent_idx": c.sent_idx, "title": " ".join(c.title_tokens),
             "text": " ".join(c.sentence_tokens), "score": c.retrieval_score}
            for c in inst.candidates if not c.pad
        ],
        "golden": [sorted([d, i] for d, i in g) for g in inst.golden_sets],
    }
    return rec


def read_records(path):
    """Parse a dataset file without truncating or padding candidates."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(instance_from_record(rec))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def prepare(inst, evidence_per_claim=EVIDENCE_PER_CLAIM, force_golden=False):
    """Sort candidates by score, keep the top ``evidence_per_claim``, pad the rest.

    With ``force_golden`` every golden sentence present among the candidates is
    kept before the remaining slots are filled by score.
    """
    ranked = sorted((c for c in inst.candidates if not c.pad), key=_sort_key)
    if force_golden:
        gold = inst.golden_union
        first = [c for c in ranked if c.key in gold][:evidence_per_claim]
        rest = [c for c in ranked if c.key not in gold]
        chosen = sorted(first + rest[: evidence_per_claim - len(first)], key=_sort_key)
    else:
        chosen = ranked[:evidence_per_claim]
    chosen += [EvidenceSentence.padding()] * (evidence_per_claim - len(chosen))
    return replace(inst, candidates=chosen)


def load_dataset(path, evidence_per_claim=EVIDENCE_PER_CLAIM, force_golden=False):
    return [prepare(i, evidence_per_claim, force_golden) for i in read_records(path)]


def write_dataset(path, instances):
    lines = [json.dumps(instance_to_record(i)) for i in instances]
    atomic_write(path, "\n".join(lines) + "\n")


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def with_golden_candidates(inst, evidence_per_claim=EVIDENCE_PER_CLAIM):
    """Golden-evidence condition: golden sentences first, retrieved ones fill the rest."""
    return prepare(inst, evidence_per_claim, force_golden=True)


# -- vocabulary ---------------------------------------------------------------


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, instances):
        seen = set()
        for inst in instances:
            seen.update(inst.claim_tokens)
            for c in inst.candidates:
                seen.update(c.title_tokens)
                seen.update(c.sentence_tokens)
        seen.difference_update(RESERVED)
        return cls(list(RESERVED) + sorted(seen))

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def ids(self, tokens):
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def save(self, path):
        atomic_write(path, "\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.strip())


# -- synthetic corpus --------------------------------------------------------

N_ENTITIES = 300
N_ATTRIBUTES = 60
N_QUALIFIERS = 12
N_GROUPS = 40
N_CITIES = 30
CANDIDATES_PER_CLAIM = 8  # 5 strong + 3 weak, so retrieval has something to do
NEGATION = "not"


def _entity_distractor(rng, ent):
    """Mentions the entity, never the claim's attribute, qualifier, 'is' or 'not'."""
    kind = rng.integers(4)
    other = f"ent{rng.integers(N_ENTITIES)}"
    city = f"city{rng.integers(N_CITIES)}"
    if kind == 0:
        text = [ent, "was", "born", "in", city]
    elif kind == 1:
        text = [ent, "visited", city, "with", other]
    elif kind == 2:
        text = [ent, "has", "met", other]
    else:
        text = ["in", f"y{1900 + rng.integers(100)}", ent, "moved", "to", city]
    return [ent], text


def _attribute_distractor(rng, ent, attr, qual):
    other = f"ent{rng.integers(N_ENTITIES)}"
    while other == ent:
        other = f"ent{rng.integers(N_ENTITIES)}"
    q2 = f"qual{rng.integers(N_QUALIFIERS)}"
    while q2 == qual:
        q2 = f"qual{rng.integers(N_QUALIFIERS)}"
    text = [other, "is", q2] + ([NEGATION] if rng.random() < 0.5 else []) + [attr]
    return [other], text


def _make_claim(rng, cid, label, multi):
    ent = f"ent{rng.integers(N_ENTITIES)}"
    attr = f"attr{rng.integers(N_ATTRIBUTES)}"
    qual = f"qual{rng.integers(N_QUALIFIERS)}"
    claim = [ent, "is", qual, attr]
    neg = [NEGATION] if label is Label.REFUTES else []

    strong, golden_idx = [], []
    if multi:
        grp = f"grp{rng.integers(N_GROUPS)}"
        strong.append(([ent], [ent, "is", "member", "of", grp]))
        strong.append(([grp], [grp, "is", qual] + neg + [attr]))
        golden_idx = [0, 1]
    elif label is not Label.NOT_ENOUGH_INFO:
        strong.append(([ent], [ent, "is", qual] + neg + [attr]))
        golden_idx = [0]
        if rng.random() < 0.5:
            strong.append(_attribute_distractor(rng, ent, attr, qual))
    while len(strong) < EVIDENCE_PER_CLAIM:
        strong.append(_entity_distractor(rng, ent))
    weak = [_entity_distractor(rng, ent) for _ in range(CANDIDATES_PER_CLAIM - EVIDENCE_PER_CLAIM)]

    used = {}
    cands = []
    for pos, (title, text) in enumerate(strong + weak):
        doc = title[0]
        taken = used.setdefault(doc, set())
        idx = int(rng.integers(40))
        while idx in taken:
            idx = int(rng.integers(40))
        taken.add(idx)
        if pos in golden_idx:
            score = rng.uniform(0.5, 1.0)
        elif pos < len(strong):
            score = rng.uniform(0.2, 0.9)
        else:
            score = rng.uniform(0.0, 0.4)
        cands.append(EvidenceSentence(doc, idx, tuple(title), tuple(text), round(float(score), 6)))

    golden = [frozenset(cands[i].key for i in golden_idx)] if golden_idx else []
    order = rng.permutation(len(cands))
    cands = [cands[i] for i in order]
    return ClaimInstance(cid, tuple(claim), label, cands, golden)


def _make_split(rng, prefix, n, multi_frac):
    labels = [Label(i % 3) for i in range(n)]
    labels = [labels[i] for i in rng.permutation(n)]
    verifiable = [i for i, y in enumerate(labels) if y is not Label.NOT_ENOUGH_INFO]
    n_multi = int(round(multi_frac * len(verifiable)))
    multi = set(rng.permutation(verifiable)[:n_multi].tolist()) if verifiable else set()
    return [_make_claim(rng, f"{prefix}-{i:05d}", y, i in multi) for i, y in enumerate(labels)]


def generate_synthetic(seed, n_train, n_dev, multi_frac):
    """Deterministic desk-scale corpus: (train, dev, vocabulary).

    Claims read ``<entity> is <qualifier> <attribute>``. A supporting golden
    sentence states the entity with the qualifier and attribute; a refuting one
    puts ``not`` directly before the attribute; NOT ENOUGH INFO claims have no
    candidate mentioning the attribute. Multi-evidence claims put the entity in
    one golden sentence and the attribute in another, linked through a group
    token. Distractors share the entity or the attribute but never satisfy the
    labelling rule; attribute-sharing ones only appear next to single-evidence
    golden sentences, where the entity disambiguates them.

    Each claim carries eight candidates with simulated first-stage scores that
    keep the golden sentences inside the top five.
    """
    if not 0.0 <= multi_frac <= 1.0:
        raise ValueError("multi_frac must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    train = _make_split(rng, "train", n_train, multi_frac)
    dev = _make_split(rng, "dev", n_dev, multi_frac)
    vocab = Vocabulary(list(RESERVED) + sorted(_synthetic_tokens()))
    return train, dev, vocab


def _synthetic_tokens():
    toks = {"is", "was", "born", "in", "visited", "with", "has", "met", "moved", "to",
            "member", "of", NEGATION}
    toks.update(f"ent{i}" for i in range(N_ENTITIES))
    toks.update(f"attr{i}" for i in range(N_ATTRIBUTES))
    toks.update(f"qual{i}" for i in range(N_QUALIFIERS))
    toks.update(f"grp{i}" for i in range(N_GROUPS))
    toks.update(f"city{i}" for i in range(N_CITIES))
    toks.update(f"y{1900 + i}" for i in range(100))
    return toks


def write_synthetic(out_dir, seed, n_train, n_dev, multi_frac):
    train, dev, vocab = generate_synthetic(seed, n_train, n_dev, multi_frac)
    out_dir = Path(out_dir)
    write_dataset(out_dir / "train.jsonl", train)
    write_dataset(out_dir / "dev.jsonl", dev)
    vocab.save(out_dir / "vocab.txt")
    return train, dev, vocab
