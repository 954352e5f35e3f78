"""Lightweight sequence encoder shared by the policy and the user simulator.

History items and their feedback bits are embedded, mixed by one
self-attention layer with a residual connection, mean-pooled, and
projected to the output width. A learned start vector stands in for the
pooled projection when the history is empty, and profile features (when
configured) enter through their own linear map, so a zero profile adds
exactly nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UnknownItemError


@dataclass(frozen=True)
class UserState:
    """Profile features plus the recent (item, feedback-bit) history."""

    history: tuple[tuple[int, int], ...] = ()
    profile: tuple[float, ...] = ()


@dataclass
class EncoderConfig:
    n_items: int
    embed_dim: int = 32
    out_dim: int = 32
    history_window: int = 10
    profile_dim: int = 0


class EncoderParams:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.item_emb = ad.parameter((cfg.n_items, d), rng, 0.1)
        self.fb_emb = ad.parameter((2, d), rng, 0.1)
        self.attn_q = ad.parameter((d, d), rng, 0.1)
        self.attn_k = ad.parameter((d, d), rng, 0.1)
        self.attn_v = ad.parameter((d, d), rng, 0.1)
        self.proj_w = ad.parameter((cfg.out_dim, d), rng, 0.1)
        self.proj_b = ad.parameter((cfg.out_dim,), rng, 0.1)
        self.start = ad.parameter((cfg.out_dim,), rng, 0.1)
        self.profile_w = (ad.parameter((cfg.out_dim, cfg.profile_dim), rng, 0.1)
                          if cfg.profile_dim > 0 else None)

    def tensors(self) -> dict[str, Tensor]:
        out = {
            "item_emb": self.item_emb,
            "fb_emb": self.fb_emb,
            "attn_q": self.attn_q,
            "attn_k": self.attn_k,
            "attn_v": self.attn_v,
            "proj_w": self.proj_w,
            "proj_b": self.proj_b,
            "start": self.start,
        }
        if self.profile_w is not None:
            out["profile_w"] = self.profile_w
        return out


def encode(params: EncoderParams, state: UserState) -> Tensor:
    """Deterministic state encoding; empty history maps to the start vector."""
    cfg = params.cfg
    history = state.history[-cfg.history_window:]
    if len(state.profile) != cfg.profile_dim:
        raise ShapeError(
            f"profile has {len(state.profile)} features, expected {cfg.profile_dim}")

    if history:
        ids = [item for item, _ in history]
        bits = [bit for _, bit in history]
        for item in ids:
            if not 0 <= item < cfg.n_items:
                raise UnknownItemError(f"item {item} outside embedding table")
        x = ad.add(ad.embed(params.item_emb, ids), ad.embed(params.fb_emb, bits))
        q = ad.matmul(x, params.attn_q)
        k = ad.matmul(x, params.attn_k)
        v = ad.matmul(x, params.attn_v)
        attn = ad.row_softmax(ad.scale(ad.matmul(q, ad.transpose(k)),
                                       1.0 / math.sqrt(cfg.embed_dim)))
        mixed = ad.add(x, ad.matmul(attn, v))
        pooled = ad.mean_rows(mixed)
        base = ad.add(ad.matvec(params.proj_w, pooled), params.proj_b)
    else:
        base = params.start

    if params.profile_w is not None:
        base = ad.add(base, ad.matvec(params.profile_w,
                                      ad.constant(np.asarray(state.profile))))
    return base
