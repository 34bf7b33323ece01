"""Gaussian kernel bank and kernel pooling over translation matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import KERNEL_CLAMP, Tensor, kernel_pool as _pool, no_grad

EXACT_MU = 1.0
EXACT_SIGMA = 1e-3


@dataclass(frozen=True)
class KernelBank:
    mu: tuple
    sigma: tuple

    def __post_init__(self):
        if len(self.mu) != len(self.sigma) or len(self.mu) < 2:
            raise ValueError("kernel bank needs at least two (mu, sigma) pairs")
        if sum(1 for m, s in zip(self.mu, self.sigma) if m == EXACT_MU and s == EXACT_SIGMA) != 1:
            raise ValueError("kernel bank needs exactly one exact-match kernel")
        if any(s <= 0 for s in self.sigma):
            raise ValueError("kernel widths must be positive")

    def __len__(self):
        return len(self.mu)

    def to_list(self):
        return [[m, s] for m, s in zip(self.mu, self.sigma)]

    @classmethod
    def from_list(cls, pairs):
        return cls(tuple(float(p[0]) for p in pairs), tuple(float(p[1]) for p in pairs))


def default_bank(K=21):
    """Exact-match kernel plus K-1 kernels evenly spaced on [-0.95, 0.95], width 0.1."""
    if K < 2:
        raise ValueError(f"need at least 2 kernels, got {K}")
    if K % 2 == 0:
        raise ValueError(f"kernel count must be odd, got {K}")
    mus = np.linspace(0.95, -0.95, K - 1)
    return KernelBank((EXACT_MU, *(round(float(m), 12) for m in mus)),
                      (EXACT_SIGMA, *([0.1] * (K - 1))))


@dataclass
class TranslationMatrix:
    values: np.ndarray
    row_mask: np.ndarray
    col_mask: np.ndarray

    @classmethod
    def full(cls, values):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        return cls(values, np.ones(values.shape[0], bool), np.ones(values.shape[1], bool))


def kernel_pool_row(row, col_mask, bank):
    row = np.asarray(row, dtype=float)
    col_mask = np.ones(row.shape, bool) if col_mask is None else np.asarray(col_mask, bool)
    if not col_mask.any():
        raise ValueError("kernel pooling over an empty set of columns")
    with no_grad():
        return _pool(Tensor(row[None, :]), col_mask, np.ones(1, bool), bank.mu, bank.sigma).value[0]


def kernel_pool(M: TranslationMatrix, bank):
    """Per-row kernel features [a x K]; rows outside ``M.row_mask`` are zero."""
    with no_grad():
        return _pool(Tensor(M.values), M.col_mask, M.row_mask, bank.mu, bank.sigma).value


def pool(m, col_mask, row_mask, bank):
    """Differentiable pooling used inside the models."""
    return _pool(m, col_mask, row_mask, bank.mu, bank.sigma)


LOG_CLAMP = float(np.log(KERNEL_CLAMP))
