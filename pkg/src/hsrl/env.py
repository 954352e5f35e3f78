"""Simulated user environment and data layer.

A fitted response model maps (state, slate) to per-item click
probabilities; binary feedback is sampled from them. Rewards average the
per-item signal {click -> 1.0, no click -> -0.2}, which keeps every step
reward inside [-0.2, 1.0]. Sessions carry a patience counter that drops
by one on each zero-click step, refreshes fully on any click, and ends
the episode at zero; a hard horizon caps depth regardless.

The module also ingests ratings logs into fixed-size slate records and
generates a synthetic catalog with planted cluster structure for
desk-scale experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, UserState, encode
from .errors import ContractError, DataError
from .optim import Optimizer
from .tokenizer import ItemEmbeddings

CLICK_SIGNAL = 1.0
NO_CLICK_SIGNAL = -0.2


@dataclass
class LogRecord:
    user_id: int
    history: tuple[int, ...]      # positive items before the slate, at most 10
    slate: tuple[int, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.slate) != len(self.labels):
            raise DataError("slate and label lists disagree in length")
        if len(self.history) > 10:
            raise DataError("record history longer than 10")


@dataclass
class EnvConfig:
    slate_size: int = 5
    patience: int = 3
    horizon: int = 20
    history_window: int = 10


@dataclass
class SessionState:
    user_id: int
    state: UserState
    patience: int
    step: int
    done: bool = False


@dataclass
class EpisodeMetrics:
    total_reward: float
    depth: int


# ---------------------------------------------------------------------------
# Response models
# ---------------------------------------------------------------------------


@dataclass
class SimFitConfig:
    embed_dim: int = 32
    history_window: int = 10
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 0.01
    # Keep the (feature-initialized) item table fixed during fitting; the
    # free per-item parameters otherwise soak up label noise and the fitted
    # model stops generalizing across users.
    freeze_item_emb: bool = True


class ResponseModel:
    """Learned click-probability model: encoder state vector dotted with
    item embeddings, squashed through a sigmoid.

    When catalog item features are supplied, the item-embedding table is
    initialized from a seeded random projection of them (scaled to roughly
    unit row norm), so content structure is present before fitting starts.
    """

    def __init__(self, n_items: int, cfg: SimFitConfig, rng: np.random.Generator,
                 item_features: np.ndarray | None = None):
        self.n_items = n_items
        self.cfg = cfg
        enc_cfg = EncoderConfig(n_items=n_items, embed_dim=cfg.embed_dim,
                                out_dim=cfg.embed_dim,
                                history_window=cfg.history_window)
        self.encoder = EncoderParams(enc_cfg, rng)
        self.bias = Tensor(np.zeros(()), requires_grad=True)
        if item_features is not None:
            feats = np.asarray(item_features, dtype=np.float64)
            if feats.shape[0] != n_items:
                raise DataError("item feature rows do not cover the catalog")
            rms = np.sqrt((feats ** 2).sum(axis=1).mean())
            proj = rng.normal(0.0, 1.0 / (np.sqrt(cfg.embed_dim) * max(rms, 1e-12)),
                              size=(feats.shape[1], cfg.embed_dim))
            self.encoder.item_emb.data = feats @ proj

    def tensors(self) -> dict[str, Tensor]:
        out = {f"enc/{k}": v for k, v in self.encoder.tensors().items()}
        out["bias"] = self.bias
        return out

    def _logits(self, state: UserState, slate) -> Tensor:
        u = encode(self.encoder, state)
        rows = ad.embed(self.encoder.item_emb, list(slate))
        return ad.add_scalar(ad.matvec(rows, u), self.bias)

    def click_probs(self, session: "SessionState", slate) -> np.ndarray:
        with ad.no_grad():
            return ad.sigmoid(self._logits(session.state, slate)).data.copy()


def _bce_terms(logits: Tensor, labels: np.ndarray) -> Tensor:
    # -[y log s + (1-y) log(1-s)] == softplus(logit) - y * logit
    return ad.sub(ad.softplus(logits), ad.mul(ad.constant(labels), logits))


def fit_response_model(records: list[LogRecord], n_items: int,
                       cfg: SimFitConfig, seed,
                       item_features: np.ndarray | None = None) -> ResponseModel:
    """Binary cross-entropy fit of click probabilities; deterministic per seed."""
    if not records:
        raise DataError("cannot fit a response model on zero records")
    rng = np.random.default_rng(seed)
    model = ResponseModel(n_items, cfg, rng, item_features)
    if cfg.freeze_item_emb:
        model.encoder.item_emb.requires_grad = False
    trainable = [t for t in model.tensors().values() if t.requires_grad]
    opt = Optimizer(trainable, lr=cfg.learning_rate)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(records))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [records[i] for i in order[lo:lo + cfg.batch_size]]
            total = None
            for rec in batch:
                state = UserState(history=tuple((i, 1) for i in rec.history))
                terms = _bce_terms(model._logits(state, rec.slate),
                                   np.asarray(rec.labels, dtype=np.float64))
                loss = ad.vmean(terms)
                total = loss if total is None else ad.add(total, loss)
            opt.zero_grad()
            ad.backward(ad.scale(total, 1.0 / len(batch)))
            opt.step()
    return model


def fit_simulators(records: list[LogRecord], n_items: int, cfg: SimFitConfig,
                   seed: int, item_features: np.ndarray | None = None,
                   ) -> tuple[ResponseModel, ResponseModel]:
    """Factory presets: a train-split simulator for policy optimization and
    a full-data simulator used only for evaluation."""
    split = int(0.8 * len(records))
    if split < 1:
        raise DataError("too few records to split for simulator training")
    train_sim = fit_response_model(records[:split], n_items, cfg, [seed, 0],
                                   item_features)
    eval_sim = fit_response_model(records, n_items, cfg, [seed, 1], item_features)
    return train_sim, eval_sim


def save_response_model(path, model: ResponseModel) -> None:
    from .checkpoint import save_tensors

    save_tensors(path, {f"sim/{k}": v.data for k, v in model.tensors().items()})


def load_response_model(path, n_items: int, cfg: SimFitConfig) -> ResponseModel:
    from .checkpoint import load_tensors
    from .errors import FormatError

    named = load_tensors(path)
    model = ResponseModel(n_items, cfg, np.random.default_rng(0))
    own = model.tensors()
    if set(named) != {f"sim/{k}" for k in own}:
        raise FormatError("simulator checkpoint blocks do not match the config")
    for key, tensor in own.items():
        arr = named[f"sim/{key}"]
        if arr.shape != tensor.data.shape:
            raise FormatError(f"simulator block sim/{key} has wrong shape")
        tensor.data = arr.copy()
    return model


def held_out_log_loss(model: ResponseModel, records: list[LogRecord]) -> float:
    total, count = 0.0, 0
    for rec in records:
        state = UserState(history=tuple((i, 1) for i in rec.history))
        with ad.no_grad():
            terms = _bce_terms(model._logits(state, rec.slate),
                               np.asarray(rec.labels, dtype=np.float64))
        total += float(terms.data.sum())
        count += len(rec.labels)
    return total / count


def constant_log_loss(rate: float, records: list[LogRecord]) -> float:
    rate = min(max(rate, 1e-12), 1.0 - 1e-12)
    total, count = 0.0, 0
    for rec in records:
        for y in rec.labels:
            total += -(y * np.log(rate) + (1 - y) * np.log(1.0 - rate))
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# Session dynamics
# ---------------------------------------------------------------------------


def simulate_step(model, session: SessionState, slate, cfg: EnvConfig,
                  rng: np.random.Generator):
    """One environment step: sample feedback, average the item signals,
    advance history/patience, and flag termination."""
    if session.done:
        raise ContractError("stepping a finished session")
    if len(slate) != cfg.slate_size:
        raise ContractError(f"slate has {len(slate)} items, expected {cfg.slate_size}")
    probs = model.click_probs(session, slate)
    feedback = (rng.random(len(slate)) < probs).astype(np.int64)
    signals = np.where(feedback == 1, CLICK_SIGNAL, NO_CLICK_SIGNAL)
    reward = float(signals.mean())

    # Histories track positive behavior only, mirroring the record format
    # the response models are fitted on; zero-click slates leave the state's
    # history untouched.
    clicked = tuple((int(i), 1) for i, b in zip(slate, feedback) if b == 1)
    history = (session.state.history + clicked)[-cfg.history_window:]
    patience = cfg.patience if feedback.any() else session.patience - 1
    step = session.step + 1
    done = patience == 0 or step == cfg.horizon
    nxt = SessionState(
        user_id=session.user_id,
        state=UserState(history=history, profile=session.state.profile),
        patience=patience,
        step=step,
        done=done,
    )
    return feedback, reward, nxt, done


def make_user_pool(records: list[LogRecord]) -> list[tuple[int, tuple[int, ...]]]:
    """One entry per user: their latest logged history prefix."""
    latest: dict[int, tuple[int, ...]] = {}
    for rec in records:
        latest[rec.user_id] = rec.history
    return [(uid, latest[uid]) for uid in sorted(latest)]


def reset_session(pool, cfg: EnvConfig, rng: np.random.Generator) -> SessionState:
    if not pool:
        raise DataError("user pool is empty")
    uid, history = pool[rng.integers(len(pool))]
    return SessionState(
        user_id=uid,
        state=UserState(history=tuple((i, 1) for i in history)),
        patience=cfg.patience,
        step=0,
    )


class Environment:
    """Session loop over a fixed response model and user pool."""

    def __init__(self, model, pool, cfg: EnvConfig):
        self.model = model
        self.pool = pool
        self.cfg = cfg

    def reset(self, rng: np.random.Generator) -> SessionState:
        return reset_session(self.pool, self.cfg, rng)

    def step(self, session, slate, rng: np.random.Generator):
        return simulate_step(self.model, session, slate, self.cfg, rng)


# ---------------------------------------------------------------------------
# Log ingestion (ratings -> slate records)
# ---------------------------------------------------------------------------


def ingest_ml1m_style(path) -> tuple[list[LogRecord], list[int]]:
    """Binarize ratings at >3, order each user chronologically, cut into
    consecutive length-10 slates with prior positives as history. Trailing
    segments shorter than 10 are dropped."""
    per_user: dict[int, list[tuple[int, int, int, int]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"ratings line {lineno}: expected 4 tab-separated "
                                f"fields, got {len(parts)}")
            try:
                user, item, rating, ts = (int(parts[0]), int(parts[1]),
                                          int(parts[2]), int(parts[3]))
            except ValueError:
                raise DataError(f"ratings line {lineno}: non-integer field") from None
            per_user.setdefault(user, []).append((ts, lineno, item, rating))

    staged = []  # (start_ts, user, seq, record)
    catalog: set[int] = set()
    for user in sorted(per_user):
        events = sorted(per_user[user])  # timestamp, then input order
        positives: list[int] = []
        for seq, lo in enumerate(range(0, len(events) - len(events) % 10, 10)):
            chunk = events[lo:lo + 10]
            slate = tuple(item for _, _, item, _ in chunk)
            labels = tuple(int(rating > 3) for _, _, _, rating in chunk)
            record = LogRecord(user_id=user, history=tuple(positives[-10:]),
                               slate=slate, labels=labels)
            staged.append((chunk[0][0], user, seq, record))
            positives.extend(i for (_, _, i, r) in chunk if r > 3)
        catalog.update(item for _, _, item, _ in events)
    staged.sort(key=lambda s: s[:3])
    return [rec for _, _, _, rec in staged], sorted(catalog)


def save_records(path, records: list[LogRecord]) -> None:
    """`user<TAB>h1,h2,...<TAB>i1,...,ik<TAB>y1,...,yk`; empty history is `-`."""
    with open(path, "w") as fh:
        for rec in records:
            hist = ",".join(str(i) for i in rec.history) if rec.history else "-"
            fh.write(f"{rec.user_id}\t{hist}\t"
                     f"{','.join(str(i) for i in rec.slate)}\t"
                     f"{','.join(str(y) for y in rec.labels)}\n")


def load_records(path) -> list[LogRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"records line {lineno}: expected 4 fields")
            try:
                user = int(parts[0])
                history = () if parts[1] == "-" else tuple(
                    int(i) for i in parts[1].split(","))
                slate = tuple(int(i) for i in parts[2].split(","))
                labels = tuple(int(y) for y in parts[3].split(","))
            except ValueError:
                raise DataError(f"records line {lineno}: non-integer field") from None
            records.append(LogRecord(user, history, slate, labels))
    if not records:
        raise DataError(f"no records in {path}")
    return records


# ---------------------------------------------------------------------------
# Synthetic catalog with planted structure
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_items: int = 300
    n_clusters: int = 8
    dim: int = 16
    n_users: int = 120
    slates_per_user: int = 16
    slate_size: int = 5
    p_preferred: float = 0.9
    p_other: float = 0.02
    center_scale: float = 8.0
    noise: float = 0.5


@dataclass
class SyntheticDataset:
    items: ItemEmbeddings
    records: list[LogRecord]
    item_clusters: np.ndarray
    user_prefs: np.ndarray
    cfg: SynthConfig = field(default_factory=SynthConfig)


class GroundTruthResponse:
    """Planted click model: probability depends only on whether an item
    belongs to the session user's preferred cluster."""

    def __init__(self, data: SyntheticDataset):
        self.item_clusters = data.item_clusters
        self.user_prefs = data.user_prefs
        self.p_preferred = data.cfg.p_preferred
        self.p_other = data.cfg.p_other

    def click_probs(self, session: SessionState, slate) -> np.ndarray:
        pref = self.user_prefs[session.user_id]
        match = self.item_clusters[np.asarray(slate)] == pref
        return np.where(match, self.p_preferred, self.p_other)


def generate_synthetic(cfg: SynthConfig, seed) -> SyntheticDataset:
    """Items scattered around well-separated cluster centers; every user
    clicks their preferred cluster with high probability. Records come out
    in chronological (round-robin) order so an 80/20 split is time-based."""
    if not cfg.n_items >= cfg.n_clusters >= 1:
        raise DataError("need n_items >= n_clusters >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(cfg.n_clusters, cfg.dim))
    centers *= cfg.center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    item_clusters = np.arange(cfg.n_items) % cfg.n_clusters
    vectors = centers[item_clusters] + cfg.noise * rng.normal(
        size=(cfg.n_items, cfg.dim))
    user_prefs = np.arange(cfg.n_users) % cfg.n_clusters

    positives: list[list[int]] = [[] for _ in range(cfg.n_users)]
    records: list[LogRecord] = []
    for _ in range(cfg.slates_per_user):
        for uid in range(cfg.n_users):
            slate = rng.choice(cfg.n_items, size=cfg.slate_size, replace=False)
            probs = np.where(item_clusters[slate] == user_prefs[uid],
                             cfg.p_preferred, cfg.p_other)
            labels = (rng.random(cfg.slate_size) < probs).astype(int)
            records.append(LogRecord(
                user_id=uid,
                history=tuple(positives[uid][-10:]),
                slate=tuple(int(i) for i in slate),
                labels=tuple(int(y) for y in labels),
            ))
            positives[uid].extend(int(i) for i, y in zip(slate, labels) if y)

    items = ItemEmbeddings(np.arange(cfg.n_items), vectors)
    return SyntheticDataset(items=items, records=records,
                            item_clusters=item_clusters, user_prefs=user_prefs,
                            cfg=replace(cfg))
