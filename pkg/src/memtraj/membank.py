"""The instance memory: paired past/intention features with greedy filtering.

Every training scene contributes one entry holding its frozen past feature,
its frozen intention feature, and the raw geometry (start position and
destination in the normalized frame) used for redundancy filtering. Filtering
visits entries in a seed-shuffled order and keeps an entry only when no
already-kept entry is redundant with it, where redundant means both the start
positions and the destinations are within their thresholds. Each visited
entry is either kept or discarded, so one pass always terminates.

Banks are immutable once built; lookups from multiple threads are safe.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import Scene, dataset_fingerprint, normalize_scene
from .errors import FormatError
from .features import FeatureNets, prepare_social_batch, social_forward_batch
from .numkit import mlp_forward

logger = logging.getLogger(__name__)

_MAGIC = b"MTBK"
_VERSION = 1
# magic, version, past_dim, intent_dim, past_len, future_len, theta_past,
# theta_int, filter_seed, entry count, source fingerprint
_HEADER = struct.Struct("<4sIIIIIddqQ32s")


@dataclass
class MemoryEntry:
    """One memorized training instance."""

    past_feat: np.ndarray  # (past_dim,)
    intent_feat: np.ndarray  # (intent_dim,)
    start_pos: np.ndarray  # (2,) first observed point, normalized frame
    destination: np.ndarray  # (2,) last future point, normalized frame
    sample_id: int  # ordinal of the originating scene in the source dataset


@dataclass
class BankMeta:
    past_dim: int
    intent_dim: int
    past_len: int
    future_len: int
    theta_past: float | None = None  # None until the bank has been filtered
    theta_int: float | None = None
    filter_seed: int | None = None
    source_hash: bytes = b"\x00" * 32


@dataclass
class MemoryBankPair:
    """Paired feature banks plus the geometry needed for filtering."""

    entries: list[MemoryEntry]
    meta: BankMeta

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def past_matrix(self) -> np.ndarray:
        return np.stack([e.past_feat for e in self.entries])

    @cached_property
    def intent_matrix(self) -> np.ndarray:
        return np.stack([e.intent_feat for e in self.entries])

    @cached_property
    def start_matrix(self) -> np.ndarray:
        return np.stack([e.start_pos for e in self.entries])

    @cached_property
    def dest_matrix(self) -> np.ndarray:
        return np.stack([e.destination for e in self.entries])


def bank_init(nets: FeatureNets, dataset: Sequence[Scene]) -> MemoryBankPair:
    """Encode every training scene into one memory entry (unfiltered bank).

    Entry ``i`` comes from ``dataset[i]`` and carries ``sample_id == i``.
    Scenes are normalized before encoding, so stored features and geometry
    live in the ego-centered frame.
    """
    if not dataset:
        raise ValueError("cannot build a memory bank from an empty dataset")
    for scene in dataset:
        if scene.ego_future is None:
            raise ValueError(f"scene {scene.scene_id!r} has no future; bank entries need destinations")
    normalized = [normalize_scene(s)[0] for s in dataset]
    past_feats, _ = social_forward_batch(nets, prepare_social_batch(normalized))
    dests = np.stack([s.ego_future[-1] for s in normalized])
    intent_feats = mlp_forward(nets.intention_enc, dests)
    entries = [
        MemoryEntry(
            past_feat=past_feats[i],
            intent_feat=intent_feats[i],
            start_pos=normalized[i].ego_past[0].copy(),
            destination=dests[i].copy(),
            sample_id=i,
        )
        for i in range(len(normalized))
    ]
    meta = BankMeta(
        past_dim=nets.past_dim,
        intent_dim=nets.intent_dim,
        past_len=nets.past_len,
        future_len=dataset[0].ego_future.shape[0],
        source_hash=dataset_fingerprint(dataset),
    )
    logger.info("memory bank: %d entries before filtering", len(entries))
    return MemoryBankPair(entries=entries, meta=meta)


def is_redundant(a: MemoryEntry, b: MemoryEntry, theta_past: float, theta_int: float) -> bool:
    """True when both the starts and the destinations are within threshold."""
    if theta_past < 0 or theta_int < 0:
        raise ValueError(f"thresholds must be >= 0, got {theta_past}, {theta_int}")
    d_start = float(np.linalg.norm(a.start_pos - b.start_pos))
    d_dest = float(np.linalg.norm(a.destination - b.destination))
    return d_start <= theta_past and d_dest <= theta_int


def filter_visit_order(n_entries: int, seed: int) -> np.ndarray:
    """The seed-shuffled order in which :func:`bank_filter` visits entries."""
    return np.random.default_rng(seed).permutation(n_entries)


def bank_filter(bank: MemoryBankPair, theta_past: float, theta_int: float, seed: int) -> MemoryBankPair:
    """Greedy redundancy filter; returns a new bank of the kept entries.

    Entries are visited in the order given by :func:`filter_visit_order` and
    kept iff no already-kept entry is redundant with them; kept entries appear
    in visit order. The thresholds and seed are recorded in the bank meta, so
    the pass is reproducible after a save/load round trip.
    """
    if theta_past < 0 or theta_int < 0:
        raise ValueError(f"thresholds must be >= 0, got {theta_past}, {theta_int}")
    order = filter_visit_order(len(bank), seed)
    starts = bank.start_matrix
    dests = bank.dest_matrix
    kept_idx: list[int] = []
    kept_starts = np.empty((len(bank), 2))
    kept_dests = np.empty((len(bank), 2))
    n_kept = 0
    for i in order:
        if n_kept:
            d_start = np.linalg.norm(kept_starts[:n_kept] - starts[i], axis=1)
            d_dest = np.linalg.norm(kept_dests[:n_kept] - dests[i], axis=1)
            if np.any((d_start <= theta_past) & (d_dest <= theta_int)):
                continue
        kept_idx.append(int(i))
        kept_starts[n_kept] = starts[i]
        kept_dests[n_kept] = dests[i]
        n_kept += 1
    meta = BankMeta(
        past_dim=bank.meta.past_dim,
        intent_dim=bank.meta.intent_dim,
        past_len=bank.meta.past_len,
        future_len=bank.meta.future_len,
        theta_past=float(theta_past),
        theta_int=float(theta_int),
        filter_seed=int(seed),
        source_hash=bank.meta.source_hash,
    )
    kept = [bank.entries[i] for i in kept_idx]
    logger.info(
        "memory bank filter (theta_past=%g, theta_int=%g): kept %d of %d (%.1f%%)",
        theta_past,
        theta_int,
        len(kept),
        len(bank),
        100.0 * len(kept) / len(bank),
    )
    return MemoryBankPair(entries=kept, meta=meta)


def bank_save(bank: MemoryBankPair, path) -> None:
    """Write a bank as versioned little-endian binary.

    Header: magic ``MTBK``, version u32, dims and window lengths as u32s,
    thresholds as f64 (NaN when unfiltered), filter seed i64 (-1 when
    unfiltered), entry count u64, source fingerprint (32 bytes). Then one
    record per entry: past_feat f64[past_dim], intent_feat f64[intent_dim],
    start_pos f64[2], destination f64[2], sample_id u64.
    """
    meta = bank.meta
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        meta.past_dim,
        meta.intent_dim,
        meta.past_len,
        meta.future_len,
        np.nan if meta.theta_past is None else meta.theta_past,
        np.nan if meta.theta_int is None else meta.theta_int,
        -1 if meta.filter_seed is None else meta.filter_seed,
        len(bank),
        meta.source_hash,
    )
    records = np.zeros(len(bank), dtype=_record_dtype(meta.past_dim, meta.intent_dim))
    for i, entry in enumerate(bank.entries):
        records[i] = (entry.past_feat, entry.intent_feat, entry.start_pos, entry.destination, entry.sample_id)
    Path(path).write_bytes(header + records.tobytes())


def _record_dtype(past_dim: int, intent_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("past_feat", "<f8", (past_dim,)),
            ("intent_feat", "<f8", (intent_dim,)),
            ("start_pos", "<f8", (2,)),
            ("destination", "<f8", (2,)),
            ("sample_id", "<u8"),
        ]
    )


def bank_load(path) -> MemoryBankPair:
    """Read a bank written by :func:`bank_save`, validating the layout."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("file too short for a bank header", offset=len(raw))
    magic, version, past_dim, intent_dim, past_len, future_len, theta_past, theta_int, filter_seed, count, source_hash = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if past_dim < 1 or intent_dim < 1:
        raise FormatError(f"bad feature dims ({past_dim}, {intent_dim})", offset=8)
    dtype = _record_dtype(past_dim, intent_dim)
    expected = _HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"payload is {len(raw) - _HEADER.size} bytes, expected {count} records of {dtype.itemsize}",
            offset=min(len(raw), expected),
        )
    records = np.frombuffer(raw, dtype=dtype, count=count, offset=_HEADER.size)
    entries = [
        MemoryEntry(
            past_feat=np.array(rec["past_feat"]),
            intent_feat=np.array(rec["intent_feat"]),
            start_pos=np.array(rec["start_pos"]),
            destination=np.array(rec["destination"]),
            sample_id=int(rec["sample_id"]),
        )
        for rec in records
    ]
    meta = BankMeta(
        past_dim=past_dim,
        intent_dim=intent_dim,
        past_len=past_len,
        future_len=future_len,
        theta_past=None if np.isnan(theta_past) else float(theta_past),
        theta_int=None if np.isnan(theta_int) else float(theta_int),
        filter_seed=None if filter_seed == -1 else int(filter_seed),
        source_hash=source_hash,
    )
    return MemoryBankPair(entries=entries, meta=meta)
