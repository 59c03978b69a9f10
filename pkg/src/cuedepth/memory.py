"""Key-value working memory: attention read, gated convex write, slot probes.

The bank is an S x D matrix carried across the frames of one sequence
(reset to zeros at sequence starts). Tokens read it by scaled dot-product
cross-attention; writes blend the old bank with a write matrix built from
the top-k tokens per slot (ranked by read-attention mass) under a single
logistic gate eta whose bias starts at logit(0.1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor

ETA_INIT = 0.1


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class MemoryParams:
    """Per-block projections for one read/write interface."""
    w_query: Tensor   # token dim -> D
    w_key: Tensor     # D -> D
    w_value: Tensor   # D -> D
    w_write: Tensor   # token dim -> D
    w_eta: Tensor     # token dim -> scalar
    b_eta: Tensor

    @staticmethod
    def create(rng: np.random.Generator, token_dim: int, slot_dim: int,
               dtype=np.float32) -> "MemoryParams":
        return MemoryParams(
            w_query=E.lecun_uniform(rng, (token_dim, slot_dim), token_dim, dtype),
            w_key=E.lecun_uniform(rng, (slot_dim, slot_dim), slot_dim, dtype),
            w_value=E.lecun_uniform(rng, (slot_dim, slot_dim), slot_dim, dtype),
            w_write=E.lecun_uniform(rng, (token_dim, slot_dim), token_dim, dtype),
            # zero weights + logit(0.1) bias give eta = 0.1 for any input
            w_eta=E.zeros_param((token_dim,), dtype),
            b_eta=E.parameter(np.array(logit(ETA_INIT)), dtype=dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_query": self.w_query, f"{prefix}.w_key": self.w_key,
                f"{prefix}.w_value": self.w_value, f"{prefix}.w_write": self.w_write,
                f"{prefix}.w_eta": self.w_eta, f"{prefix}.b_eta": self.b_eta}


@dataclass
class WriteStats:
    eta: float
    write_magnitude: float        # eta * ||M_tilde - M||_F, the applied update norm
    slot_attention: np.ndarray    # mean read-attention mass per slot
    slot_entropy: float


def reset(slots: int, dim: int, dtype=np.float32) -> Tensor:
    return E.Tensor(np.zeros((slots, dim)), dtype=dtype)


def read(bank: Tensor, tokens: Tensor, params: MemoryParams) -> tuple[Tensor, Tensor]:
    """Cross-attention read; returns (rows per token, attention over slots)."""
    if bank.data.shape[0] == 0:
        raise ValueError("memory bank has no slots")
    d = bank.data.shape[1]
    if params.w_query.data.shape[1] != d:
        raise ValueError("token projection does not match memory key dimension")
    q = E.matmul(tokens, params.w_query)
    k = E.matmul(bank, params.w_key)
    v = E.matmul(bank, params.w_value)
    logits = E.mul(E.matmul(q, E.transpose(k)), 1.0 / float(np.sqrt(d)))
    attn = E.softmax(logits, axis=-1)
    return E.matmul(attn, v), attn


def slot_entropy(attn_data: np.ndarray) -> tuple[np.ndarray, float]:
    mass = attn_data.mean(axis=0)
    mass = mass / mass.sum()
    ent = float(-(mass * np.log(mass + 1e-12)).sum())
    return mass, ent


def write(bank: Tensor, tokens: Tensor, attn: Tensor, params: MemoryParams,
          top_k: int = 8, freeze_eta: bool = False) -> tuple[Tensor, WriteStats]:
    """Gated convex update: M' = (1 - eta) M + eta M_tilde.

    M_tilde aggregates, per slot, the attention-weighted mean of the
    top-k tokens by read-attention mass. Top-k selection is held constant
    (like max-pool switches); gradients flow through the selected values.
    """
    n, s = attn.data.shape
    k = min(top_k, n)
    idx = np.argpartition(-attn.data, kth=k - 1, axis=0)[:k]          # (k, S)
    mask = np.zeros((n, s), dtype=bank.dtype)
    mask[idx, np.arange(s)[None, :]] = 1.0
    masked = E.mul(attn, E.Tensor(mask, dtype=bank.dtype))
    denom = E.add(E.transpose(E.sum_(masked, axis=0, keepdims=True)), 1e-8)  # (S,1)
    candidates = E.matmul(tokens, params.w_write)                      # (N, D)
    m_tilde = E.div(E.matmul(E.transpose(masked), candidates), denom)  # (S, D)
    if not np.isfinite(m_tilde.data.sum()):
        raise ValueError("non-finite memory write vector")
    pooled = E.mean_(tokens, axis=0)
    eta = E.sigmoid(E.add(E.sum_(E.mul(pooled, params.w_eta)), params.b_eta))
    if freeze_eta:
        eta = eta.detach()
    new_bank = E.add(E.mul(bank, E.sub(1.0, eta)), E.mul(m_tilde, eta))
    eta_val = float(eta.data)
    update_norm = float(np.linalg.norm(m_tilde.data - bank.data))
    mass, ent = slot_entropy(attn.data)
    stats = WriteStats(eta=eta_val, write_magnitude=eta_val * update_norm,
                       slot_attention=mass, slot_entropy=ent)
    return new_bank, stats


def shuffle_slots(bank_data: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Permute ceil(fraction * S) randomly chosen slots among themselves.

    The chosen subset is rotated by one, so every selected slot moves
    (when more than one is selected) and the row multiset is preserved.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("shuffle fraction must be in [0, 1]")
    s = bank_data.shape[0]
    count = int(np.ceil(fraction * s))
    if count <= 1:
        return bank_data.copy()
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(s, size=count, replace=False))
    out = bank_data.copy()
    out[chosen] = bank_data[np.roll(chosen, 1)]
    return out
