"""Line-oriented checkpoint files.

The first line is a JSON header (format, version, config, kernel bank,
vocabulary, seed, optimizer scalars and the list of record names). Each
following line is one JSON record ``{"name", "shape", "values"}`` holding a
parameter or an Adam moment, with every float written to 17 significant
digits so that loading reproduces the saved doubles exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import Config
from .data import DataError, Vocabulary, atomic_write
from .kernels import KernelBank, default_bank
from .model import KGAT
from .numerics import Adam
from .ranker import Ranker

FORMAT = "kgat-checkpoint"
VERSION = 1
KINDS = ("kgat", "ranker")
MODEL_KEYS = ("dim", "kernels", "mode", "evidence_per_claim", "max_len")


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: Config
    vocab: Vocabulary
    model: object
    optimizer: Adam
    seed: int

    @classmethod
    def fresh(cls, kind, config, vocab, seed=None):
        seed = config.seed if seed is None else seed
        return cls(kind, config, vocab, build_model(kind, config, len(vocab), seed), Adam(), seed)


def build_model(kind, config, vocab_size, seed):
    bank = default_bank(config.kernels)
    if kind == "kgat":
        return KGAT(vocab_size, config.dim, bank, config.mode, seed)
    if kind == "ranker":
        return Ranker(vocab_size, config.dim, bank, seed)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def _record(name, array):
    a = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise CheckpointError(f"refusing to save non-finite values in {name!r}")
    values = ",".join(format(float(x), ".17g") for x in a.reshape(-1))
    return f'{{"name": {json.dumps(name)}, "shape": {json.dumps(list(a.shape))}, "values": [{values}]}}'


def dumps_checkpoint(ckpt: Checkpoint):
    opt = ckpt.optimizer
    arrays = {}
    for name, p in ckpt.model.named_parameters().items():
        arrays[f"param/{name}"] = p.value
    for name in sorted(opt.m):
        arrays[f"adam_m/{name}"] = opt.m[name]
        arrays[f"adam_v/{name}"] = opt.v[name]
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "kernel_bank": ckpt.model.bank.to_list(),
        "vocab": ckpt.vocab.tokens,
        "seed": ckpt.seed,
        "optimizer": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "step_count": opt.step_count},
        "records": list(arrays),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [_record(name, a) for name, a in arrays.items()]
    return "\n".join(lines) + "\n"


def save_checkpoint(ckpt: Checkpoint, path):
    atomic_write(path, dumps_checkpoint(ckpt))


def _check_config(saved: Config, expected: Config | None, bank: KernelBank):
    if len(bank) != saved.kernels or bank != default_bank(saved.kernels):
        raise CheckpointError("config mismatch: kernel bank does not match the kernel count")
    if expected is None:
        return
    for key in MODEL_KEYS:
        a, b = getattr(saved, key), getattr(expected, key)
        if a != b:
            raise CheckpointError(f"config mismatch: {key} is {a!r} in the checkpoint, expected {b!r}")


def loads_checkpoint(text, expected: Config | None = None, source="checkpoint"):
    lines = text.split("\n")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{source}: unreadable header") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {header.get('version')!r}")

    config = Config.from_dict(header["config"])
    bank = KernelBank.from_list(header["kernel_bank"])
    _check_config(config, expected, bank)
    vocab = Vocabulary(header["vocab"])
    kind = header["kind"]
    seed = int(header["seed"])
    model = build_model(kind, config, len(vocab), seed)

    names = header["records"]
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) < len(names) or not text.endswith("\n"):
        raise CheckpointError(f"{source}: truncated file ({len(body)} of {len(names)} records)")
    arrays = {}
    for name, line in zip(names, body):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{source}: truncated or corrupt record {name!r}") from exc
        if rec.get("name") != name:
            raise CheckpointError(f"{source}: expected record {name!r}, found {rec.get('name')!r}")
        values = np.asarray(rec["values"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{source}: record {name!r} has the wrong number of values")
        arrays[name] = values.reshape(shape)

    params = model.named_parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"{source}: missing parameter {name!r}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"config mismatch: parameter {name!r} has shape "
                                  f"{arrays[key].shape}, model expects {p.shape}")
        p.value = arrays[key].copy()
        p.zero_grad()
    extra = {k[len("param/"):] for k in arrays if k.startswith("param/")} - set(params)
    if extra:
        raise CheckpointError(f"{source}: unexpected parameters {sorted(extra)}")

    o = header["optimizer"]
    opt = Adam(o["beta1"], o["beta2"], o["eps"], int(o["step_count"]))
    for key, a in arrays.items():
        kind_, _, name = key.partition("/")
        if kind_ == "adam_m":
            opt.m[name] = a.copy()
        elif kind_ == "adam_v":
            opt.v[name] = a.copy()
    return Checkpoint(kind, config, vocab, model, opt, seed)


def load_checkpoint(path, expected: Config | None = None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return loads_checkpoint(text, expected, source=str(path))
