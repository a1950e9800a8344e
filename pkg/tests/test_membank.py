"""Unit tests for the memory bank: build, filter, serialize."""

import numpy as np
import pytest

from memtraj.datasets import normalize_scene, synth_generate
from memtraj.errors import FormatError
from memtraj.features import init_feature_nets, social_encode
from memtraj.membank import (
    BankMeta,
    MemoryBankPair,
    MemoryEntry,
    bank_filter,
    bank_init,
    bank_load,
    bank_save,
    filter_visit_order,
    is_redundant,
)

HEADER_SIZE = 88  # magic + version + 4 dims + 2 thresholds + seed + count + hash


def random_bank(rng, m, past_dim=6, intent_dim=4, spread=1.0):
    entries = [
        MemoryEntry(
            past_feat=rng.normal(size=past_dim),
            intent_feat=rng.normal(size=intent_dim),
            start_pos=rng.uniform(-spread, spread, size=2),
            destination=rng.uniform(-spread, spread, size=2),
            sample_id=i,
        )
        for i in range(m)
    ]
    meta = BankMeta(past_dim=past_dim, intent_dim=intent_dim, past_len=8, future_len=12)
    return MemoryBankPair(entries=entries, meta=meta)


def test_bank_init_entries(small_scenes):
    nets = init_feature_nets(2, past_len=8)
    bank = bank_init(nets, small_scenes)
    assert len(bank) == len(small_scenes)
    assert [e.sample_id for e in bank.entries] == list(range(len(small_scenes)))
    assert bank.meta.theta_past is None and bank.meta.filter_seed is None
    assert bank.meta.future_len == 12
    normalized, _ = normalize_scene(small_scenes[3])
    np.testing.assert_allclose(bank.entries[3].past_feat, social_encode(nets, normalized), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(bank.entries[3].start_pos, normalized.ego_past[0], atol=0)
    np.testing.assert_allclose(bank.entries[3].destination, normalized.ego_future[-1], atol=0)
    assert bank.past_matrix.shape == (len(small_scenes), nets.past_dim)


def entry_at(start, dest):
    return MemoryEntry(
        past_feat=np.zeros(2),
        intent_feat=np.zeros(2),
        start_pos=np.asarray(start, dtype=np.float64),
        destination=np.asarray(dest, dtype=np.float64),
        sample_id=0,
    )


def test_is_redundant_hand_case():
    a = entry_at((0.0, 0.0), (1.0, 1.0))
    b = entry_at((0.0, 0.5), (1.0, 1.5))
    assert is_redundant(a, b, theta_past=1.0, theta_int=1.0)
    # both distances are exactly 0.5: the boundary counts as redundant
    assert is_redundant(a, b, theta_past=0.5, theta_int=0.5)
    assert not is_redundant(a, b, theta_past=0.4, theta_int=1.0)
    assert not is_redundant(a, b, theta_past=1.0, theta_int=0.4)
    with pytest.raises(ValueError):
        is_redundant(a, b, theta_past=-0.1, theta_int=1.0)


def test_filter_matches_replay_oracle():
    rng = np.random.default_rng(13)
    for trial in range(20):
        m = int(rng.integers(2, 80))
        bank = random_bank(rng, m)
        theta_p = float(rng.uniform(0.0, 1.0))
        theta_i = float(rng.uniform(0.0, 1.0))
        seed = int(rng.integers(1 << 16))
        filtered = bank_filter(bank, theta_p, theta_i, seed)
        # replay the documented greedy pass entry by entry
        kept = []
        for i in filter_visit_order(m, seed):
            if not any(is_redundant(bank.entries[i], bank.entries[j], theta_p, theta_i) for j in kept):
                kept.append(int(i))
        assert [e.sample_id for e in filtered.entries] == kept
        assert filtered.meta.theta_past == theta_p
        assert filtered.meta.filter_seed == seed
        assert filtered.meta.source_hash == bank.meta.source_hash


def test_filter_infinite_thetas_keep_one():
    bank = random_bank(np.random.default_rng(3), 25)
    filtered = bank_filter(bank, np.inf, np.inf, seed=4)
    assert len(filtered) == 1


def test_filter_zero_thetas_keep_distinct_drop_duplicates():
    rng = np.random.default_rng(5)
    bank = random_bank(rng, 30)
    assert len(bank_filter(bank, 0.0, 0.0, seed=1)) == 30
    dup = random_bank(rng, 4)
    for e in dup.entries:
        e.start_pos = np.array([1.0, 2.0])
        e.destination = np.array([3.0, 4.0])
    assert len(bank_filter(dup, 0.0, 0.0, seed=1)) == 1


def test_filter_kept_counts_shrink_with_theta():
    bank = random_bank(np.random.default_rng(6), 120, spread=1.0)
    counts = [len(bank_filter(bank, t, t, seed=7)) for t in (0.0, 0.05, 0.1, 0.5, 1.0)]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == 120 and counts[-1] < 120


def test_filter_deterministic():
    bank = random_bank(np.random.default_rng(8), 60)
    a = bank_filter(bank, 0.3, 0.3, seed=2)
    b = bank_filter(bank, 0.3, 0.3, seed=2)
    assert [e.sample_id for e in a.entries] == [e.sample_id for e in b.entries]


def test_save_load_roundtrip(tmp_path, small_scenes):
    nets = init_feature_nets(4, past_len=8)
    bank = bank_init(nets, small_scenes)
    path = tmp_path / "bank.mtbk"
    bank_save(bank, path)
    loaded = bank_load(path)
    assert len(loaded) == len(bank)
    assert loaded.meta == bank.meta
    np.testing.assert_array_equal(loaded.past_matrix, bank.past_matrix)
    np.testing.assert_array_equal(loaded.intent_matrix, bank.intent_matrix)
    np.testing.assert_array_equal(loaded.dest_matrix, bank.dest_matrix)
    assert [e.sample_id for e in loaded.entries] == [e.sample_id for e in bank.entries]

    filtered = bank_filter(bank, 0.05, 0.05, seed=11)
    bank_save(filtered, path)
    again = bank_load(path)
    assert again.meta.theta_past == 0.05
    assert again.meta.filter_seed == 11
    assert [e.sample_id for e in again.entries] == [e.sample_id for e in filtered.entries]

    # a second save of the loaded bank is byte-identical
    path2 = tmp_path / "bank2.mtbk"
    bank_save(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_file_size_arithmetic(tmp_path):
    past_dim, intent_dim, m = 128, 64, 9
    bank = random_bank(np.random.default_rng(1), m, past_dim=past_dim, intent_dim=intent_dim)
    path = tmp_path / "sized.mtbk"
    bank_save(bank, path)
    record = (past_dim + intent_dim + 4) * 8 + 8
    assert path.stat().st_size == HEADER_SIZE + m * record


def test_load_rejects_corrupt_banks(tmp_path):
    bank = random_bank(np.random.default_rng(2), 3)
    path = tmp_path / "bank.mtbk"
    bank_save(bank, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad.mtbk"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        bank_load(bad)

    bad.write_bytes(raw[:40])
    with pytest.raises(FormatError, match="short"):
        bank_load(bad)

    bad.write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="payload"):
        bank_load(bad)

    bad.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError, match="payload"):
        bank_load(bad)


def test_filter_validation():
    bank = random_bank(np.random.default_rng(0), 5)
    with pytest.raises(ValueError):
        bank_filter(bank, -1.0, 0.5, seed=0)
    with pytest.raises(ValueError):
        bank_filter(bank, 0.5, -1.0, seed=0)


def test_bank_init_requires_futures(small_scenes):
    nets = init_feature_nets(0, past_len=8)
    scenes = synth_generate(1, 2)
    scenes[0].ego_future = None
    with pytest.raises(ValueError, match="future"):
        bank_init(nets, scenes)
    with pytest.raises(ValueError, match="empty"):
        bank_init(nets, [])
