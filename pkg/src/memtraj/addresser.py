"""Trainable memory addressing: learned cosine scores over the past bank.

A query past feature and every stored past feature are projected by two
separate nets; the score is the cosine similarity of the projections. The
projections are trained so scores regress onto pseudo-labels derived from how
close each entry's decoded intention lands to the query's true destination:
``max(0, (threshold - dist) / threshold)``. Retrieval is then simply the
top-scoring entries.

A pair of identity projections (``fixed_cosine_nets``) gives plain cosine
similarity on the raw features, which is the untrained reference point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import Scene, normalize_scene
from .errors import NumericError
from .features import FeatureNets, decode_batch, prepare_social_batch, social_forward_batch
from .membank import MemoryBankPair
from .numkit import (
    Mlp,
    identity_mlp,
    mlp_backward_from_cache,
    mlp_forward,
    mlp_forward_cached,
    sgd_step,
    shuffled_batches,
)

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
CANDIDATE_CAP = 2048  # loss sums over the whole bank up to this size, then samples


@dataclass
class AddresserNets:
    """Query and key projections into the shared scoring space."""

    query_proj: Mlp
    key_proj: Mlp

    def copy(self) -> "AddresserNets":
        return AddresserNets(query_proj=self.query_proj.copy(), key_proj=self.key_proj.copy())


def init_addresser_nets(past_dim: int = 128, addr_dim: int = 128) -> AddresserNets:
    """Two linear projections started at the identity.

    When ``addr_dim >= past_dim`` the starting score is exactly plain cosine
    similarity on the raw features (the ``fixed_cosine_nets`` reference), so
    training begins at the untrained baseline and only the label signal can
    move it away. Cold random starts instead regress toward the small label
    means and rank poorly. With ``addr_dim < past_dim`` the start is cosine
    on the first ``addr_dim`` feature components. The two nets diverge during
    training because queries and keys receive different gradients.
    """
    if past_dim < 1 or addr_dim < 1:
        raise ValueError(f"dims must be >= 1, got past_dim={past_dim}, addr_dim={addr_dim}")
    def _eye_net() -> Mlp:
        w = np.eye(addr_dim, past_dim)
        return Mlp(layer_dims=[past_dim, addr_dim], weights=[w], biases=[np.zeros(addr_dim)])
    return AddresserNets(query_proj=_eye_net(), key_proj=_eye_net())


def fixed_cosine_nets(past_dim: int) -> AddresserNets:
    """Identity projections: scoring degrades to raw cosine similarity."""
    return AddresserNets(query_proj=identity_mlp(past_dim), key_proj=identity_mlp(past_dim))


def _normalize_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-normalize, flagging degenerate rows (norm below DEGENERATE_NORM)."""
    norms = np.linalg.norm(mat, axis=1)
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    return mat / safe[:, None], norms, degenerate


def key_table(nets: AddresserNets, bank: MemoryBankPair) -> np.ndarray:
    """Projected keys for a whole bank; compute once per frozen (nets, bank)."""
    return mlp_forward(nets.key_proj, bank.past_matrix)


def score_all(nets: AddresserNets, query_feat, bank: MemoryBankPair, keys: np.ndarray | None = None) -> np.ndarray:
    """Cosine scores of one query against every bank entry."""
    q = np.asarray(query_feat, dtype=np.float64)
    u = mlp_forward(nets.query_proj, q)
    if keys is None:
        keys = key_table(nets, bank)
    kn, _, k_degenerate = _normalize_rows(keys)
    u_norm = float(np.linalg.norm(u))
    if u_norm < DEGENERATE_NORM:
        logger.warning("degenerate query projection (norm %.3e); scoring 0", u_norm)
        return np.zeros(len(bank))
    scores = kn @ (u / u_norm)
    if k_degenerate.any():
        logger.warning("%d degenerate key projections; scoring 0", int(k_degenerate.sum()))
        scores[k_degenerate] = 0.0
    return scores


def score(nets: AddresserNets, query_feat, key_feat) -> float:
    """Cosine similarity of the projected query and one projected key."""
    u = mlp_forward(nets.query_proj, np.asarray(query_feat, dtype=np.float64))
    w = mlp_forward(nets.key_proj, np.asarray(key_feat, dtype=np.float64))
    nu = float(np.linalg.norm(u))
    nw = float(np.linalg.norm(w))
    if nu < DEGENERATE_NORM or nw < DEGENERATE_NORM:
        logger.warning("degenerate projection (norms %.3e, %.3e); scoring 0", nu, nw)
        return 0.0
    return float(u @ w / (nu * nw))


def pseudo_label(dist: float, threshold: float) -> float:
    """Regression target for one entry: 1 at distance 0, 0 beyond threshold."""
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    return max(0.0, (threshold - float(dist)) / threshold)


def pseudo_labels(dists: np.ndarray, threshold: float) -> np.ndarray:
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    return np.maximum(0.0, (threshold - dists) / threshold)


def addresser_loss(scores, labels) -> float:
    """Summed squared error between scores and pseudo-labels."""
    s = np.asarray(scores, dtype=np.float64)
    l = np.asarray(labels, dtype=np.float64)
    if s.shape != l.shape:
        raise ValueError(f"scores shape {s.shape} != labels shape {l.shape}")
    return float(np.sum((s - l) ** 2))


def top_l(nets: AddresserNets, query_feat, bank: MemoryBankPair, count: int, keys: np.ndarray | None = None) -> list[int]:
    """Addresses of the ``count`` best-scoring entries, best first.

    Score ties resolve toward the lower address, so retrieval is
    deterministic for a frozen bank and nets.
    """
    addresses, _ = top_l_scored(nets, query_feat, bank, count, keys=keys)
    return addresses


def top_l_scored(
    nets: AddresserNets, query_feat, bank: MemoryBankPair, count: int, keys: np.ndarray | None = None
) -> tuple[list[int], np.ndarray]:
    if not 1 <= count <= len(bank):
        raise ValueError(f"count must be in [1, {len(bank)}] (bank size), got {count}")
    scores = score_all(nets, query_feat, bank, keys=keys)
    order = np.argsort(-scores, kind="stable")[:count]
    return [int(i) for i in order], scores[order]


@dataclass
class _CosineBatch:
    """Forward state of one scoring step, reused by the backward pass."""

    scores: np.ndarray  # (B, C)
    u_normed: np.ndarray
    w_normed: np.ndarray
    u_norms: np.ndarray
    w_norms: np.ndarray
    u_degenerate: np.ndarray
    w_degenerate: np.ndarray


def _cosine_forward(u: np.ndarray, w: np.ndarray) -> _CosineBatch:
    un, nu, u_bad = _normalize_rows(u)
    wn, nw, w_bad = _normalize_rows(w)
    scores = un @ wn.T
    if u_bad.any():
        scores[u_bad, :] = 0.0
    if w_bad.any():
        scores[:, w_bad] = 0.0
    return _CosineBatch(scores, un, wn, nu, nw, u_bad, w_bad)


def _cosine_backward(state: _CosineBatch, d_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the raw projections given dLoss/dScores."""
    d = d_scores.copy()
    if state.u_degenerate.any():
        d[state.u_degenerate, :] = 0.0
    if state.w_degenerate.any():
        d[:, state.w_degenerate] = 0.0
    row_mix = np.sum(d * state.scores, axis=1, keepdims=True)
    col_mix = np.sum(d * state.scores, axis=0)[:, None]
    safe_u = np.where(state.u_degenerate, 1.0, state.u_norms)[:, None]
    safe_w = np.where(state.w_degenerate, 1.0, state.w_norms)[:, None]
    d_u = (d @ state.w_normed - row_mix * state.u_normed) / safe_u
    d_w = (d.T @ state.u_normed - col_mix * state.w_normed) / safe_w
    if state.u_degenerate.any():
        d_u[state.u_degenerate] = 0.0
    if state.w_degenerate.any():
        d_w[state.w_degenerate] = 0.0
    return d_u, d_w


def decoded_intentions(feature_nets: FeatureNets, bank: MemoryBankPair) -> np.ndarray:
    """Every entry's decoded destination from its own stored feature pair."""
    _, dest_hat = decode_batch(feature_nets, bank.past_matrix, bank.intent_matrix)
    return dest_hat


def train_addresser(
    nets: AddresserNets,
    bank: MemoryBankPair,
    feature_nets: FeatureNets,
    dataset: Sequence[Scene],
    config,
) -> AddresserNets:
    """Fit the projections so scores track the pseudo-labels.

    Queries are the training scenes' own past features (encoders frozen).
    For tractability a step scores the full bank only when it has at most
    ``CANDIDATE_CAP`` entries; above that it scores a uniform sample of
    ``CANDIDATE_CAP`` entries plus each query's oracle-nearest entry, so the
    strongest positive is always present. The input nets are not mutated.
    """
    if not len(bank):
        raise ValueError("cannot train an addresser against an empty bank")
    if not dataset:
        raise ValueError("empty dataset")
    nets = nets.copy()
    normalized = [normalize_scene(s)[0] for s in dataset]
    for scene in normalized:
        if scene.ego_future is None:
            raise ValueError(f"scene {scene.scene_id!r} has no future; addresser training needs destinations")
    queries, _ = social_forward_batch(feature_nets, prepare_social_batch(normalized))
    dests = np.stack([s.ego_future[-1] for s in normalized])
    decoded = decoded_intentions(feature_nets, bank)
    threshold = config.label_threshold_value()
    bank_feats = bank.past_matrix
    rng = np.random.default_rng(config.seed_for("addresser-batches"))
    n = len(normalized)
    m = len(bank)
    epochs = config.epochs_addresser
    phases = [(epochs, config.lr_addresser)]
    if config.finetune and config.epochs_finetune > 0:
        phases.append((config.epochs_finetune, config.lr_finetune))
    epoch_no = 0
    for phase_epochs, lr in phases:
        for _ in range(phase_epochs):
            epoch_no += 1
            total = 0.0
            for idx in shuffled_batches(n, config.batch_size, rng):
                q_batch = queries[idx]
                # distances of each query's destination to every decoded intention
                full_dists = np.linalg.norm(dests[idx][:, None, :] - decoded[None, :, :], axis=2)
                if m <= CANDIDATE_CAP:
                    cand = np.arange(m)
                else:
                    sampled = rng.choice(m, size=CANDIDATE_CAP, replace=False)
                    oracle_nearest = np.argmin(full_dists, axis=1)
                    cand = np.union1d(sampled, oracle_nearest)
                labels = pseudo_labels(full_dists[:, cand], threshold)
                u, u_cache = mlp_forward_cached(nets.query_proj, q_batch)
                w, w_cache = mlp_forward_cached(nets.key_proj, bank_feats[cand])
                state = _cosine_forward(u, w)
                residual = state.scores - labels
                batch_loss = float(np.sum(residual**2))
                if not np.isfinite(batch_loss):
                    raise NumericError(f"non-finite addresser loss at epoch {epoch_no}")
                total += batch_loss / len(idx)
                d_scores = (2.0 / len(idx)) * residual
                d_u, d_w = _cosine_backward(state, d_scores)
                q_grads = mlp_backward_from_cache(nets.query_proj, u_cache, d_u)
                k_grads = mlp_backward_from_cache(nets.key_proj, w_cache, d_w)
                sgd_step(nets.query_proj, q_grads, lr)
                sgd_step(nets.key_proj, k_grads, lr)
            if epoch_no == 1 or epoch_no % 10 == 0:
                logger.info("addresser epoch %d: mean per-query loss %.6f", epoch_no, total / max(1, (n + config.batch_size - 1) // config.batch_size))
    return nets
