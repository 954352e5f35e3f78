"""Hierarchical policy: coarse-to-fine token distributions over the SID space.

One forward pass refines the state context level by level: each level
projects the current context to token logits, takes the expected token
embedding under the resulting distribution (not a sampled one, so the
single pass serves likelihood, sampling, and candidate scoring alike),
subtracts it from the context, and layer-normalizes. The refined contexts
c_0..c_L form the trajectory the critic consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, UserState, encode
from .errors import ContractError, ShapeError
from .tokenizer import Codebook, SidIndex


@dataclass
class PolicyConfig:
    n_items: int
    vocab_sizes: tuple[int, ...]
    d_model: int = 32
    embed_dim: int = 32
    history_window: int = 10
    profile_dim: int = 0
    # When set, token embeddings start from codebook centroids projected
    # into the model width instead of random noise.
    token_emb_from_codebook: bool = False
    # When set (and catalog features are supplied), the encoder item table
    # starts from a seeded projection of the features so user histories are
    # separable before any training.
    item_emb_from_features: bool = True

    @property
    def levels(self) -> int:
        return len(self.vocab_sizes)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_items=self.n_items,
            embed_dim=self.embed_dim,
            out_dim=self.d_model,
            history_window=self.history_window,
            profile_dim=self.profile_dim,
        )


class PolicyParams:
    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator,
                 codebook: Codebook | None = None,
                 item_features: np.ndarray | None = None):
        self.cfg = cfg
        self.encoder = EncoderParams(cfg.encoder_config(), rng)
        if cfg.item_emb_from_features and item_features is not None:
            feats = np.asarray(item_features, dtype=np.float64)
            rms = np.sqrt((feats ** 2).sum(axis=1).mean())
            proj = rng.normal(0.0, 1.0 / (np.sqrt(cfg.embed_dim) * max(rms, 1e-12)),
                              size=(feats.shape[1], cfg.embed_dim))
            self.encoder.item_emb.data = feats @ proj
        self.head_w: list[Tensor] = []
        self.tok_emb: list[Tensor] = []
        self.ln_gain: list[Tensor] = []
        self.ln_bias: list[Tensor] = []
        for lvl, t_l in enumerate(cfg.vocab_sizes):
            self.head_w.append(ad.parameter((t_l, cfg.d_model), rng, 0.1))
            if cfg.token_emb_from_codebook:
                if codebook is None:
                    raise ContractError("token_emb_from_codebook needs a codebook")
                proj = rng.normal(0.0, 1.0 / np.sqrt(codebook.dim),
                                  size=(codebook.dim, cfg.d_model))
                self.tok_emb.append(Tensor(codebook.centroids[lvl] @ proj,
                                           requires_grad=True))
            else:
                self.tok_emb.append(ad.parameter((t_l, cfg.d_model), rng, 0.1))
            self.ln_gain.append(Tensor(np.ones(cfg.d_model), requires_grad=True))
            self.ln_bias.append(Tensor(np.zeros(cfg.d_model), requires_grad=True))

    def tensors(self) -> dict[str, Tensor]:
        out = {f"enc/{k}": v for k, v in self.encoder.tensors().items()}
        for lvl in range(self.cfg.levels):
            out[f"level{lvl}/head_w"] = self.head_w[lvl]
            out[f"level{lvl}/tok_emb"] = self.tok_emb[lvl]
            out[f"level{lvl}/ln_gain"] = self.ln_gain[lvl]
            out[f"level{lvl}/ln_bias"] = self.ln_bias[lvl]
        return out


@dataclass
class PolicyOutput:
    """Level-wise token distributions plus the refined context trajectory."""

    probs: list[Tensor]
    log_probs: list[Tensor]
    trajectory: list[Tensor]
    vocab_sizes: tuple[int, ...]


def encode_state(params: PolicyParams, state: UserState) -> Tensor:
    return encode(params.encoder, state)


def forward(params: PolicyParams, c0: Tensor, flat: bool = False,
            heads_detached: bool = False,
            force_onehot: dict[int, int] | None = None) -> PolicyOutput:
    """Produce all level distributions and the context trajectory in one pass.

    `flat` reads every head off c_0 with no residual refinement (ablation).
    `heads_detached` treats head/embedding/norm parameters as constants so
    gradients reach only the encoder through the trajectory.
    `force_onehot` substitutes a one-hot distribution at given levels
    (test hook for the residual-alignment property).
    """
    cfg = params.cfg
    if c0.shape != (cfg.d_model,):
        raise ShapeError(f"context has shape {c0.shape}, expected ({cfg.d_model},)")
    maybe_detach = (lambda t: t.detach()) if heads_detached else (lambda t: t)

    probs: list[Tensor] = []
    log_probs: list[Tensor] = []
    trajectory = [c0]
    c = c0
    for lvl, t_l in enumerate(cfg.vocab_sizes):
        logits = ad.matvec(maybe_detach(params.head_w[lvl]), c0 if flat else c)
        p = ad.softmax(logits)
        lp = ad.log_softmax(logits)
        if force_onehot and lvl in force_onehot:
            onehot = np.zeros(t_l)
            onehot[force_onehot[lvl]] = 1.0
            p = ad.constant(onehot)
        probs.append(p)
        log_probs.append(lp)
        if flat:
            c = c0
        else:
            e = ad.matvec(ad.transpose(maybe_detach(params.tok_emb[lvl])), p)
            c = ad.layer_norm(ad.sub(c, e), maybe_detach(params.ln_gain[lvl]),
                              maybe_detach(params.ln_bias[lvl]))
        trajectory.append(c)
    return PolicyOutput(probs, log_probs, trajectory, cfg.vocab_sizes)


def _check_sid(output: PolicyOutput, sid) -> tuple[int, ...]:
    sid = tuple(int(z) for z in sid)
    if len(sid) != len(output.vocab_sizes):
        raise ContractError(f"SID has {len(sid)} tokens, expected "
                            f"{len(output.vocab_sizes)}")
    for lvl, z in enumerate(sid):
        if not 0 <= z < output.vocab_sizes[lvl]:
            raise ContractError(f"token {z} out of range at level {lvl + 1}")
    return sid


def sid_log_prob(output: PolicyOutput, sid) -> Tensor:
    """log pi(z|s) = sum_l log p_l[z_l]; differentiable through the recursion."""
    sid = _check_sid(output, sid)
    total = ad.pick(output.log_probs[0], sid[0])
    for lvl in range(1, len(sid)):
        total = ad.add(total, ad.pick(output.log_probs[lvl], sid[lvl]))
    return total


def sample_sid(output: PolicyOutput, rng: np.random.Generator) -> tuple[int, ...]:
    """Draw one token per level; levels factorize because contexts are
    expectation-based. Never touches the trajectory."""
    sid = []
    for p in output.probs:
        w = p.data / p.data.sum()
        sid.append(int(rng.choice(len(w), p=w)))
    return tuple(sid)


def _raw_scores(output: PolicyOutput, index: SidIndex, candidates) -> np.ndarray:
    z = index.sid_matrix(candidates)
    scores = np.ones(len(candidates))
    for lvl, p in enumerate(output.probs):
        scores = scores * p.data[z[:, lvl]]
    return scores


def score_candidates(output: PolicyOutput, index: SidIndex,
                     candidates) -> list[tuple[int, float]]:
    """Single-pass slate scoring: score(i) = prod_l p_l[z_l(i)], sorted
    descending, ties broken by ascending item id."""
    candidates = list(candidates)
    scores = _raw_scores(output, index, candidates)
    order = sorted(range(len(candidates)),
                   key=lambda i: (-scores[i], candidates[i]))
    return [(candidates[i], float(scores[i])) for i in order]


def select_slate(output: PolicyOutput, index: SidIndex, candidates, k: int,
                 mode: str, rng: np.random.Generator | None = None) -> list[int]:
    candidates = list(candidates)
    if k > len(candidates):
        raise ContractError(f"slate size {k} exceeds {len(candidates)} candidates")
    if mode == "greedy":
        return [item for item, _ in score_candidates(output, index, candidates)[:k]]
    if mode != "sample":
        raise ContractError(f"unknown slate mode {mode!r}")
    if rng is None:
        raise ContractError("sample mode needs an rng")

    scores = _raw_scores(output, index, candidates)
    total = scores.sum()
    if total <= 0.0:
        idx = rng.choice(len(candidates), size=k, replace=False)
        return [candidates[i] for i in idx]
    p = scores / total
    nonzero = int((p > 0.0).sum())
    if nonzero >= k:
        idx = rng.choice(len(candidates), size=k, replace=False, p=p)
        return [candidates[i] for i in idx]
    # Fewer than k candidates have mass: take them all (sampled order),
    # then pad with the lowest-id zero-score candidates.
    idx = list(rng.choice(len(candidates), size=nonzero, replace=False, p=p))
    rest = sorted(i for i in range(len(candidates)) if p[i] == 0.0)
    idx.extend(rest[:k - nonzero])
    return [candidates[i] for i in idx]
