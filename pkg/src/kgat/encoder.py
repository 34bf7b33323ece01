"""Node sequences and token-state encoders.

A node is ``[CLS] claim [SEP] title evidence [SEP]``. The reference encoder is
an embedding table followed by a per-token affine map; it has no cross-token
mixing, so the sentence vector (row 0) is the mean of the real token rows.
Precomputed contextual states can be supplied instead through
:class:`ExternalStates`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CLS, PAD, SEP, DataError
from .numerics import Affine, Parameter, embedding, no_grad

MAX_LEN = 130


@dataclass
class NodeSequence:
    ids: np.ndarray          # [L] token ids
    mask: np.ndarray         # [L] True at real (non-PAD) positions
    claim_span: tuple        # inclusive (1, m)
    evidence_span: tuple     # inclusive (m+1, m+n)
    tokens: tuple            # token strings, for reports

    def __len__(self):
        return len(self.ids)

    @property
    def claim_mask(self):
        out = np.zeros(len(self), dtype=bool)
        out[self.claim_span[0]: self.claim_span[1] + 1] = True
        return out & self.mask

    @property
    def evidence_mask(self):
        out = np.zeros(len(self), dtype=bool)
        out[self.evidence_span[0]: self.evidence_span[1] + 1] = True
        return out & self.mask


def node_sequence(claim_tokens, evidence, vocab, max_len=MAX_LEN):
    """Build the token sequence of one claim-evidence node.

    The evidence tail is truncated first; the claim is never cut.
    """
    claim = [*claim_tokens, SEP]
    if evidence.pad:
        ev = [PAD]
    else:
        ev = [*evidence.title_tokens, *evidence.sentence_tokens, SEP]
    room = max_len - 1 - len(claim)
    if room < 1:
        raise DataError(f"claim of {len(claim_tokens)} tokens does not fit max_len={max_len}")
    ev = ev[:room]
    tokens = (CLS, *claim, *ev)
    ids = np.asarray(vocab.ids(tokens), dtype=np.int64)
    mask = np.asarray([t != PAD for t in tokens], dtype=bool)
    m = len(claim)
    return NodeSequence(ids, mask, (1, m), (m + 1, m + len(ev)), tokens)


@dataclass
class TokenStates:
    H: np.ndarray       # [(1+m+n), d]; row 0 is the sentence vector
    mask: np.ndarray

    @property
    def z(self):
        return self.H[0]


class Encoder:
    """Embedding table [V x d] followed by a shared affine map d -> d."""

    def __init__(self, table: Parameter, proj: Affine):
        self.table = table
        self.proj = proj

    @classmethod
    def init(cls, vocab_size, dim, rng, prefix="encoder"):
        table = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, dim)), f"{prefix}.embedding")
        proj = Affine(Parameter(np.eye(dim) + rng.normal(0.0, 0.1, size=(dim, dim)),
                                f"{prefix}.proj.weight"),
                      Parameter(np.zeros(dim), f"{prefix}.proj.bias"))
        return cls(table, proj)

    @property
    def dim(self):
        return self.table.shape[1]

    def parameters(self):
        return [self.table, *self.proj.parameters()]

    def token_states(self, ids, mask):
        """Per-token states [..., L, d] with masked rows set to zero."""
        raw = self.proj(embedding(self.table, ids))
        return raw * np.asarray(mask, dtype=bool)[..., None].astype(float)

    def states(self, ids, mask):
        """Token states for a batch of sequences: ids/mask [..., L] -> H [..., L, d].

        PAD rows are zero; row 0 holds the mean of rows 1.. over real tokens.
        """
        body = np.asarray(mask, dtype=bool).copy()
        body[..., 0] = False
        Hb = self.token_states(ids, body)
        count = np.maximum(body.sum(-1), 1).astype(float)
        z = Hb.sum(axis=-2) / count[..., None]
        first = np.zeros(body.shape[-1])
        first[0] = 1.0
        return Hb + z.expand_dims(-2) * first[:, None]

    def encode(self, seq: NodeSequence) -> TokenStates:
        if seq.ids.max(initial=0) >= self.table.shape[0] or seq.ids.min(initial=0) < 0:
            raise IndexError("token id out of range")
        with no_grad():
            H = self.states(seq.ids, seq.mask).value
        return TokenStates(H, seq.mask.copy())


class ExternalStates:
    """Frozen per-node token states read from an ``.npz`` archive.

    Keys are ``"<claim_id>/<node index>"`` and each array is row-major
    ``[sequence length, d]``; row 0 is used as the sentence vector.
    """

    def __init__(self, arrays, dim):
        self.arrays = arrays
        self.dim = dim

    @classmethod
    def load(cls, path, dim):
        with np.load(path) as npz:
            arrays = {k: np.asarray(npz[k], dtype=np.float64) for k in npz.files}
        for k, a in arrays.items():
            if a.ndim != 2 or a.shape[1] != dim:
                raise DataError(f"external states {k!r} have shape {a.shape}, expected [*, {dim}]")
        return cls(arrays, dim)

    @staticmethod
    def save(path, states):
        np.savez(path, **{f"{cid}/{idx}": np.asarray(H) for (cid, idx), H in states.items()})

    def get(self, claim_id, node_index, length=None):
        key = f"{claim_id}/{node_index}"
        if key not in self.arrays:
            raise KeyError(f"no external states for (claim_id={claim_id!r}, node={node_index})")
        H = self.arrays[key]
        if length is not None and H.shape[0] != length:
            raise DataError(f"external states {key!r} have {H.shape[0]} rows, sequence has {length}")
        return H


def load_external_states(path, claim_id, node_index, dim, mask=None):
    ext = ExternalStates.load(path, dim)
    H = ext.get(claim_id, node_index, None if mask is None else len(mask))
    mask = np.ones(H.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return TokenStates(H, mask)

