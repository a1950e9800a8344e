"""Frozen-model inference: one scene in, K trajectories out.

Bundles the four trained artifacts and runs the prediction chain: normalize,
encode the past, score and retrieve from the bank, decode anchors, cluster
into destinations, fulfill each destination, denormalize. Per-scene work is
independent, so callers may fan scenes out across threads; everything here
is read-only on the bundle.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .addresser import AddresserNets, key_table, score_all
from .datasets import Scene, normalize_scene
from .features import FeatureNets, social_encode
from .fulfillment import FulfillNets, fulfill_many
from .intention import DECODE_QUERY, IntentionSet, decode_anchors, kmeans
from .membank import MemoryBankPair


def worker_count() -> int:
    """Thread cap from MEMTRAJ_THREADS (default 1)."""
    raw = os.environ.get("MEMTRAJ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


@dataclass
class ModelBundle:
    """Everything needed to predict, with the projected keys cached."""

    feature_nets: FeatureNets
    bank: MemoryBankPair
    addresser_nets: AddresserNets
    fulfill_nets: FulfillNets
    keys: np.ndarray = field(init=False)

    def __post_init__(self):
        self.keys = key_table(self.addresser_nets, self.bank)

    def with_addresser(self, nets: AddresserNets) -> "ModelBundle":
        return ModelBundle(
            feature_nets=self.feature_nets,
            bank=self.bank,
            addresser_nets=nets,
            fulfill_nets=self.fulfill_nets,
        )


@dataclass
class ScenePrediction:
    """World-frame outputs for one scene."""

    scene_id: str
    destinations: np.ndarray  # (k, 2)
    trajectories: np.ndarray  # (k, future_len, 2)
    addresses: list[int]  # retrieved bank addresses, best first
    scores: np.ndarray  # their addresser scores
    sample_ids: list[int]  # their originating training-scene ordinals
    intention_set: IntentionSet


@dataclass
class DestinationProposal:
    """Normalized-frame destination candidates for one scene."""

    addresses: list[int]
    scores: np.ndarray
    intention_set: IntentionSet


def scene_seed(master_seed: int, scene_index: int) -> int:
    """Stable per-scene seed for the clustering step."""
    ss = np.random.SeedSequence([master_seed, 0x6B6D, scene_index])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def propose_destinations(
    feature_nets: FeatureNets,
    addresser_nets: AddresserNets,
    bank: MemoryBankPair,
    normalized: Scene,
    n_retrieve: int,
    n_predict: int,
    seed: int,
    decode_mode: str = DECODE_QUERY,
    keys: np.ndarray | None = None,
) -> DestinationProposal:
    """Retrieve, decode anchors, and cluster for one already-normalized scene.

    This is the destination half of the prediction chain; it needs no
    fulfillment nets, so it also serves training-time model selection.
    """
    if not 1 <= n_predict <= n_retrieve:
        raise ValueError(f"need 1 <= n_predict <= n_retrieve, got {n_predict}, {n_retrieve}")
    if n_retrieve > len(bank):
        raise ValueError(f"n_retrieve ({n_retrieve}) exceeds bank size ({len(bank)})")
    query = social_encode(feature_nets, normalized)
    scores = score_all(addresser_nets, query, bank, keys=keys)
    order = np.argsort(-scores, kind="stable")[:n_retrieve]
    addresses = [int(i) for i in order]
    anchors = decode_anchors(
        query, addresses, bank, feature_nets, decode_mode=decode_mode, scores=scores[order]
    )
    positions = np.stack([a.position for a in anchors])
    iset = kmeans(positions, n_predict, seed)
    return DestinationProposal(addresses=addresses, scores=scores[order], intention_set=iset)


def destination_error(
    feature_nets: FeatureNets,
    addresser_nets: AddresserNets,
    bank: MemoryBankPair,
    scenes,
    n_retrieve: int,
    n_predict: int,
    master_seed: int,
) -> float:
    """Mean distance from each scene's true destination to its nearest proposal.

    Works in the normalized frame and needs scenes with futures. This is the
    retrieval-plus-clustering half of the final displacement metric, so it
    ranks addressers without requiring fulfillment nets.
    """
    if not len(scenes):
        raise ValueError("empty scene list")
    keys = key_table(addresser_nets, bank)
    errors = []
    for i, scene in enumerate(scenes):
        if scene.ego_future is None:
            raise ValueError(f"scene {scene.scene_id!r} has no future; destination error needs one")
        normalized, _ = normalize_scene(scene)
        proposal = propose_destinations(
            feature_nets,
            addresser_nets,
            bank,
            normalized,
            n_retrieve,
            n_predict,
            scene_seed(master_seed, i),
            keys=keys,
        )
        gaps = np.linalg.norm(proposal.intention_set.destinations - normalized.ego_future[-1], axis=1)
        errors.append(float(gaps.min()))
    return float(np.mean(errors))


def predict_scene(
    bundle: ModelBundle,
    scene: Scene,
    n_retrieve: int,
    n_predict: int,
    seed: int,
    decode_mode: str = DECODE_QUERY,
    snap_destination: bool = False,
) -> ScenePrediction:
    """Run the full prediction chain for one raw (world-frame) scene."""
    normalized, transform = normalize_scene(scene)
    proposal = propose_destinations(
        bundle.feature_nets,
        bundle.addresser_nets,
        bundle.bank,
        normalized,
        n_retrieve,
        n_predict,
        seed,
        decode_mode=decode_mode,
        keys=bundle.keys,
    )
    iset = proposal.intention_set
    preds = fulfill_many(bundle.fulfill_nets, normalized, iset.destinations, snap_destination=snap_destination)
    trajectories = np.stack([transform.invert(p.future) for p in preds])
    destinations = transform.invert(iset.destinations)
    return ScenePrediction(
        scene_id=scene.scene_id,
        destinations=destinations,
        trajectories=trajectories,
        addresses=proposal.addresses,
        scores=proposal.scores,
        sample_ids=[bundle.bank.entries[a].sample_id for a in proposal.addresses],
        intention_set=iset,
    )
