"""Joint feature learning: compatible past and intention representations.

Two encoders are trained against a shared decoder. The social encoder embeds
the ego past and a max-pooled set of neighbor pasts into a past feature; the
intention encoder embeds the observed destination (the last future point)
into an intention feature. The joint decoder must reconstruct the flattened
past and the destination from the concatenated pair, which forces the two
feature spaces to line up. After this stage the encoders are frozen and feed
the memory bank, the addresser, and anchor decoding.

All positions here are in the ego-centered normalized frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import Scene, normalize_scene
from .errors import NumericError
from .numkit import (
    GradBundle,
    Mlp,
    ForwardCache,
    mlp_backward_from_cache,
    mlp_forward,
    mlp_forward_cached,
    mlp_init,
    sgd_step,
    shuffled_batches,
)

logger = logging.getLogger(__name__)

EMBED_DIM = 64  # ego/neighbor embedding width; the fuse input is twice this


@dataclass
class FeatureNets:
    """The trainable pieces of the feature stage.

    ego_embed: (2*past_len -> EMBED_DIM), neighbor_embed: same shape,
    social_fuse: (2*EMBED_DIM -> past_dim), intention_enc: (2 -> intent_dim),
    joint_dec: (past_dim + intent_dim -> 2*past_len + 2).
    """

    ego_embed: Mlp
    neighbor_embed: Mlp
    social_fuse: Mlp
    intention_enc: Mlp
    joint_dec: Mlp
    past_len: int

    @property
    def past_dim(self) -> int:
        return self.social_fuse.out_dim

    @property
    def intent_dim(self) -> int:
        return self.intention_enc.out_dim

    def copy(self) -> "FeatureNets":
        return FeatureNets(
            ego_embed=self.ego_embed.copy(),
            neighbor_embed=self.neighbor_embed.copy(),
            social_fuse=self.social_fuse.copy(),
            intention_enc=self.intention_enc.copy(),
            joint_dec=self.joint_dec.copy(),
            past_len=self.past_len,
        )


def init_feature_nets(seed: int, past_len: int, past_dim: int = 128, intent_dim: int = 64) -> FeatureNets:
    """Glorot-initialized feature nets; one child seed per net."""
    rng = np.random.default_rng(seed)
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=5)]
    in_dim = 2 * past_len
    return FeatureNets(
        ego_embed=mlp_init(seeds[0], [in_dim, 64, EMBED_DIM]),
        neighbor_embed=mlp_init(seeds[1], [in_dim, 64, EMBED_DIM]),
        social_fuse=mlp_init(seeds[2], [2 * EMBED_DIM, 128, past_dim]),
        intention_enc=mlp_init(seeds[3], [2, 64, intent_dim]),
        joint_dec=mlp_init(seeds[4], [past_dim + intent_dim, 256, 2 * past_len + 2]),
        past_len=past_len,
    )


# ---------------------------------------------------------------------------
# Social encoding (shared by the feature and fulfillment stages)
# ---------------------------------------------------------------------------


@dataclass
class SocialBatch:
    """Flattened inputs for a batch of scenes."""

    ego_x: np.ndarray  # (B, 2*past_len)
    nb_x: np.ndarray  # (R, 2*past_len), all neighbors of all scenes stacked
    offsets: np.ndarray  # (B+1,), scene b owns nb rows offsets[b]:offsets[b+1]


@dataclass
class SocialCache:
    batch: SocialBatch
    ego_cache: ForwardCache
    nb_cache: ForwardCache | None
    fuse_cache: ForwardCache
    pool_rows: np.ndarray  # (B, E) winning nb row per pooled dim, -1 if none


def prepare_social_batch(scenes: Sequence[Scene]) -> SocialBatch:
    ego_x = np.stack([s.ego_past.reshape(-1) for s in scenes])
    counts = [s.n_neighbors for s in scenes]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    if offsets[-1] > 0:
        nb_x = np.concatenate(
            [s.neighbor_pasts.reshape(s.n_neighbors, -1) for s in scenes if s.n_neighbors]
        )
    else:
        nb_x = np.zeros((0, ego_x.shape[1]))
    return SocialBatch(ego_x=ego_x, nb_x=nb_x, offsets=offsets)


def social_forward_batch(nets, batch: SocialBatch) -> tuple[np.ndarray, SocialCache]:
    """Encode a batch of scenes with any net holder exposing the social trio."""
    ego_out, ego_cache = mlp_forward_cached(nets.ego_embed, batch.ego_x)
    n_scenes, embed = ego_out.shape
    pooled = np.zeros((n_scenes, embed))
    pool_rows = np.full((n_scenes, embed), -1, dtype=np.int64)
    nb_cache = None
    if batch.nb_x.shape[0]:
        nb_out, nb_cache = mlp_forward_cached(nets.neighbor_embed, batch.nb_x)
        cols = np.arange(embed)
        for b in range(n_scenes):
            lo, hi = batch.offsets[b], batch.offsets[b + 1]
            if hi > lo:
                block = nb_out[lo:hi]
                winners = block.argmax(axis=0)
                pooled[b] = block[winners, cols]
                pool_rows[b] = lo + winners
    concat = np.hstack([ego_out, pooled])
    out, fuse_cache = mlp_forward_cached(nets.social_fuse, concat)
    return out, SocialCache(
        batch=batch, ego_cache=ego_cache, nb_cache=nb_cache, fuse_cache=fuse_cache, pool_rows=pool_rows
    )


def social_backward_batch(
    nets, cache: SocialCache, upstream: np.ndarray
) -> tuple[GradBundle, GradBundle | None, GradBundle]:
    """Back-propagate through fuse, pool, and both embedders.

    Returns gradient bundles for (ego_embed, neighbor_embed, social_fuse);
    the neighbor bundle is None when the batch had no neighbors at all.
    """
    fuse_grads = mlp_backward_from_cache(nets.social_fuse, cache.fuse_cache, upstream)
    embed = nets.ego_embed.out_dim
    d_concat = fuse_grads.d_input
    ego_grads = mlp_backward_from_cache(nets.ego_embed, cache.ego_cache, d_concat[:, :embed])
    nb_grads = None
    if cache.nb_cache is not None:
        d_pooled = d_concat[:, embed:]
        g_nb = np.zeros_like(cache.nb_cache.activations[-1])
        valid = cache.pool_rows >= 0
        cols = np.broadcast_to(np.arange(embed), cache.pool_rows.shape)
        # Each (row, col) target is hit by at most one scene, so plain
        # fancy assignment is enough (max-pool routes one winner per dim).
        g_nb[cache.pool_rows[valid], cols[valid]] = d_pooled[valid]
        nb_grads = mlp_backward_from_cache(nets.neighbor_embed, cache.nb_cache, g_nb)
    return ego_grads, nb_grads, fuse_grads


def social_encode(nets, scene: Scene) -> np.ndarray:
    """Past feature of one normalized scene.

    Works for any net holder with ego_embed / neighbor_embed / social_fuse
    (both the feature and the fulfillment stage use this encoder shape).
    Scenes without neighbors pool to a zero vector.
    """
    out, _ = social_forward_batch(nets, prepare_social_batch([scene]))
    return out[0]


# ---------------------------------------------------------------------------
# Intention encoding and joint decoding
# ---------------------------------------------------------------------------


def intention_encode(nets: FeatureNets, destination) -> np.ndarray:
    """Intention feature of a destination (a 2-vector in the normalized frame)."""
    dest = np.asarray(destination, dtype=np.float64)
    if dest.shape != (2,):
        raise ValueError(f"destination must have shape (2,), got {dest.shape}")
    return mlp_forward(nets.intention_enc, dest)


def joint_decode(nets: FeatureNets, past_feat, intent_feat) -> tuple[np.ndarray, np.ndarray]:
    """Decode a feature pair into (past reconstruction, destination estimate).

    Returns ``(past_hat, dest_hat)`` with shapes (past_len, 2) and (2,).
    The decoder input is the concatenation [past_feat; intent_feat].
    """
    k = np.asarray(past_feat, dtype=np.float64)
    v = np.asarray(intent_feat, dtype=np.float64)
    out = mlp_forward(nets.joint_dec, np.concatenate([k, v]))
    n_past = 2 * nets.past_len
    return out[:n_past].reshape(nets.past_len, 2), out[n_past:]


def decode_batch(nets: FeatureNets, past_feats: np.ndarray, intent_feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized joint_decode: rows of features in, rows of decodings out."""
    out = mlp_forward(nets.joint_dec, np.hstack([past_feats, intent_feats]))
    n_past = 2 * nets.past_len
    return out[:, :n_past], out[:, n_past:]


def rec_loss(past_hat, past_true, dest_hat, dest_true, intent_weight: float = 1.0) -> float:
    """Summed squared reconstruction error with a weighted intention term."""
    if intent_weight < 0:
        raise ValueError(f"intent_weight must be >= 0, got {intent_weight}")
    px = np.asarray(past_hat, dtype=np.float64)
    pt = np.asarray(past_true, dtype=np.float64)
    dx = np.asarray(dest_hat, dtype=np.float64)
    dt = np.asarray(dest_true, dtype=np.float64)
    if px.shape != pt.shape:
        raise ValueError(f"past shapes differ: {px.shape} vs {pt.shape}")
    if dx.shape != dt.shape:
        raise ValueError(f"destination shapes differ: {dx.shape} vs {dt.shape}")
    return float(np.sum((px - pt) ** 2) + intent_weight * np.sum((dx - dt) ** 2))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _require_futures(scenes: Sequence[Scene], what: str) -> None:
    for scene in scenes:
        if scene.ego_future is None:
            raise ValueError(f"{what} needs ego futures, scene {scene.scene_id!r} has none")


def train_features(dataset: Sequence[Scene], config) -> FeatureNets:
    """Train the encoders and joint decoder on raw scenes.

    Scenes are normalized internally. One step: mean over a mini-batch of the
    per-scene summed squared reconstruction error, plain SGD on all five
    nets. With ``config.epochs_features == 0`` the returned nets are exactly
    the seeded initialization.
    """
    if not dataset:
        raise ValueError("empty dataset")
    _require_futures(dataset, "train_features")
    nets = init_feature_nets(
        config.seed_for("features"),
        past_len=config.past_len,
        past_dim=config.past_dim,
        intent_dim=config.intent_dim,
    )
    normalized = [normalize_scene(s)[0] for s in dataset]
    past_x = np.stack([s.ego_past.reshape(-1) for s in normalized])
    dests = np.stack([s.ego_future[-1] for s in normalized])
    epochs = config.epochs_features
    phases = [(epochs, config.lr_features)]
    if config.finetune and config.epochs_finetune > 0:
        phases.append((config.epochs_finetune, config.lr_finetune))
    rng = np.random.default_rng(config.seed_for("features-batches"))
    n = len(normalized)
    weight = config.intent_weight
    epoch_no = 0
    for phase_epochs, lr in phases:
        for _ in range(phase_epochs):
            epoch_no += 1
            total = 0.0
            for idx in shuffled_batches(n, config.batch_size, rng):
                batch_scenes = [normalized[i] for i in idx]
                social = prepare_social_batch(batch_scenes)
                k, social_cache = social_forward_batch(nets, social)
                v, intent_cache = mlp_forward_cached(nets.intention_enc, dests[idx])
                dec_in = np.hstack([k, v])
                out, dec_cache = mlp_forward_cached(nets.joint_dec, dec_in)
                n_past = 2 * config.past_len
                res_past = out[:, :n_past] - past_x[idx]
                res_dest = out[:, n_past:] - dests[idx]
                batch_loss = float(np.sum(res_past**2) + weight * np.sum(res_dest**2))
                if not np.isfinite(batch_loss):
                    raise NumericError(f"non-finite feature loss at epoch {epoch_no}")
                total += batch_loss
                scale = 2.0 / len(idx)
                upstream = np.hstack([scale * res_past, (weight * scale) * res_dest])
                dec_grads = mlp_backward_from_cache(nets.joint_dec, dec_cache, upstream)
                d_k = dec_grads.d_input[:, : config.past_dim]
                d_v = dec_grads.d_input[:, config.past_dim :]
                ego_g, nb_g, fuse_g = social_backward_batch(nets, social_cache, d_k)
                intent_g = mlp_backward_from_cache(nets.intention_enc, intent_cache, d_v)
                sgd_step(nets.joint_dec, dec_grads, lr)
                sgd_step(nets.social_fuse, fuse_g, lr)
                sgd_step(nets.ego_embed, ego_g, lr)
                if nb_g is not None:
                    sgd_step(nets.neighbor_embed, nb_g, lr)
                sgd_step(nets.intention_enc, intent_g, lr)
            if epoch_no == 1 or epoch_no % 25 == 0:
                logger.info("features epoch %d: mean rec loss %.6f", epoch_no, total / n)
    return nets


def mean_rec_loss(nets: FeatureNets, dataset: Sequence[Scene], intent_weight: float = 1.0) -> float:
    """Mean reconstruction loss of frozen nets over raw scenes."""
    _require_futures(dataset, "mean_rec_loss")
    normalized = [normalize_scene(s)[0] for s in dataset]
    batch = prepare_social_batch(normalized)
    k, _ = social_forward_batch(nets, batch)
    dests = np.stack([s.ego_future[-1] for s in normalized])
    v = mlp_forward(nets.intention_enc, dests)
    past_hat, dest_hat = decode_batch(nets, k, v)
    past_x = np.stack([s.ego_past.reshape(-1) for s in normalized])
    per_scene = np.sum((past_hat - past_x) ** 2, axis=1) + intent_weight * np.sum(
        (dest_hat - dests) ** 2, axis=1
    )
    return float(per_scene.mean())
