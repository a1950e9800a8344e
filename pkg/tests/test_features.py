"""Unit tests for the social/intention encoders and the joint decoder."""

import numpy as np
import pytest

from memtraj.datasets import Scene, normalize_scene, synth_generate
from memtraj.features import (
    FeatureNets,
    init_feature_nets,
    intention_encode,
    joint_decode,
    mean_rec_loss,
    prepare_social_batch,
    rec_loss,
    social_backward_batch,
    social_encode,
    social_forward_batch,
    train_features,
)
from memtraj.numkit import TANH, mlp_init

from conftest import quick_config, single_mode_spec


def norm_scenes(scenes):
    return [normalize_scene(s)[0] for s in scenes]


def test_init_dims_and_determinism():
    nets = init_feature_nets(3, past_len=8, past_dim=96, intent_dim=48)
    assert nets.past_dim == 96
    assert nets.intent_dim == 48
    assert nets.ego_embed.in_dim == 16
    assert nets.joint_dec.in_dim == 96 + 48
    assert nets.joint_dec.out_dim == 2 * 8 + 2
    again = init_feature_nets(3, past_len=8, past_dim=96, intent_dim=48)
    np.testing.assert_array_equal(nets.social_fuse.weights[0], again.social_fuse.weights[0])
    # ego and neighbor embedders start from different child seeds
    assert not np.array_equal(nets.ego_embed.weights[0], nets.neighbor_embed.weights[0])


def test_social_encode_is_neighbor_permutation_invariant(small_scenes):
    nets = init_feature_nets(1, past_len=8)
    scene = norm_scenes(small_scenes)[0]
    assert scene.n_neighbors >= 2
    shuffled = Scene(
        ego_past=scene.ego_past,
        neighbor_pasts=scene.neighbor_pasts[::-1].copy(),
        ego_future=scene.ego_future,
        scene_id=scene.scene_id,
    )
    np.testing.assert_allclose(
        social_encode(nets, scene), social_encode(nets, shuffled), rtol=1e-12, atol=1e-14
    )


def test_social_encode_without_neighbors(small_scenes):
    nets = init_feature_nets(1, past_len=8)
    scene = norm_scenes(small_scenes)[0]
    alone = Scene(
        ego_past=scene.ego_past,
        neighbor_pasts=np.zeros((0, 8, 2)),
        ego_future=scene.ego_future,
        scene_id=scene.scene_id,
    )
    feat = social_encode(nets, alone)
    assert feat.shape == (nets.past_dim,)
    assert np.all(np.isfinite(feat))


def test_social_batch_matches_single_scene(small_scenes):
    nets = init_feature_nets(2, past_len=8)
    scenes = norm_scenes(small_scenes)[:5]
    batch_out, _ = social_forward_batch(nets, prepare_social_batch(scenes))
    for i, scene in enumerate(scenes):
        np.testing.assert_allclose(social_encode(nets, scene), batch_out[i], rtol=1e-10, atol=1e-12)


def tiny_social_nets(seed):
    """Small tanh trio for gradient checking (embed width 3, feature width 4)."""
    rng = np.random.default_rng(seed)
    seeds = [int(s) for s in rng.integers(1 << 30, size=3)]

    class Trio:
        ego_embed = mlp_init(seeds[0], [6, 4, 3], hidden_activation=TANH)
        neighbor_embed = mlp_init(seeds[1], [6, 4, 3], hidden_activation=TANH)
        social_fuse = mlp_init(seeds[2], [6, 5, 4], hidden_activation=TANH)

    return Trio()


def test_social_backward_matches_finite_difference():
    rng = np.random.default_rng(77)
    nets = tiny_social_nets(9)
    scenes = []
    for i in range(3):
        scenes.append(
            Scene(
                ego_past=rng.normal(size=(3, 2)),
                neighbor_pasts=rng.normal(size=(i, 3, 2)),  # 0, 1, 2 neighbors
                ego_future=None,
                scene_id=f"g{i}",
            )
        )
    batch = prepare_social_batch(scenes)
    upstream = rng.normal(size=(3, 4))

    def scalar():
        out, _ = social_forward_batch(nets, batch)
        return float(np.sum(out * upstream))

    out, cache = social_forward_batch(nets, batch)
    ego_g, nb_g, fuse_g = social_backward_batch(nets, cache, upstream)
    assert nb_g is not None
    eps = 1e-6
    worst = 0.0
    for net, grads in ((nets.ego_embed, ego_g), (nets.neighbor_embed, nb_g), (nets.social_fuse, fuse_g)):
        for arr, grad in [
            (net.weights[0], grads.d_weights[0]),
            (net.weights[1], grads.d_weights[1]),
            (net.biases[0], grads.d_biases[0]),
            (net.biases[1], grads.d_biases[1]),
        ]:
            flat, gflat = arr.ravel(), grad.ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = scalar()
                flat[j] = orig - eps
                f_minus = scalar()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                worst = max(worst, abs(numeric - gflat[j]) / max(1e-8, abs(numeric) + abs(gflat[j])))
    assert worst < 1e-4


def test_intention_encode_validation():
    nets = init_feature_nets(0, past_len=8)
    with pytest.raises(ValueError):
        intention_encode(nets, np.zeros(3))
    feat = intention_encode(nets, np.array([1.0, -2.0]))
    assert feat.shape == (nets.intent_dim,)


def test_joint_decode_shapes():
    nets = init_feature_nets(0, past_len=8, past_dim=32, intent_dim=16)
    past_hat, dest_hat = joint_decode(nets, np.zeros(32), np.zeros(16))
    assert past_hat.shape == (8, 2)
    assert dest_hat.shape == (2,)


def test_rec_loss_hand_case():
    # past residual all ones over 8 steps: 16; destination residual (3, 4): 25
    past_true = np.zeros((8, 2))
    past_hat = np.ones((8, 2))
    dest_true = np.zeros(2)
    dest_hat = np.array([3.0, 4.0])
    assert rec_loss(past_hat, past_true, dest_hat, dest_true, intent_weight=1.0) == pytest.approx(41.0, abs=1e-12)
    assert rec_loss(past_hat, past_true, dest_hat, dest_true, intent_weight=0.5) == pytest.approx(28.5, abs=1e-12)
    assert rec_loss(past_true, past_true, dest_true, dest_true) == 0.0


def test_rec_loss_validation():
    with pytest.raises(ValueError):
        rec_loss(np.zeros((8, 2)), np.zeros((8, 2)), np.zeros(2), np.zeros(2), intent_weight=-1.0)
    with pytest.raises(ValueError):
        rec_loss(np.zeros((7, 2)), np.zeros((8, 2)), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        rec_loss(np.zeros((8, 2)), np.zeros((8, 2)), np.zeros(3), np.zeros(2))


def test_mean_rec_loss_matches_scalar_path(small_scenes):
    nets = init_feature_nets(5, past_len=8)
    scenes = small_scenes[:6]
    total = 0.0
    for scene in scenes:
        normalized, _ = normalize_scene(scene)
        k = social_encode(nets, normalized)
        v = intention_encode(nets, normalized.ego_future[-1])
        past_hat, dest_hat = joint_decode(nets, k, v)
        total += rec_loss(past_hat, normalized.ego_past, dest_hat, normalized.ego_future[-1])
    np.testing.assert_allclose(mean_rec_loss(nets, scenes), total / 6, rtol=1e-9)


def test_train_features_descends_to_small_loss():
    config = quick_config(epochs_features=200, batch_size=16, seed=5)
    scenes = synth_generate(41, 48, mode_spec=single_mode_spec())
    init = init_feature_nets(config.seed_for("features"), past_len=8, past_dim=32, intent_dim=16)
    before = mean_rec_loss(init, scenes, config.intent_weight)
    nets = train_features(scenes, config)
    after = mean_rec_loss(nets, scenes, config.intent_weight)
    assert after < 0.1 * before


def test_train_features_zero_epochs_returns_init():
    config = quick_config(epochs_features=0)
    scenes = synth_generate(2, 8)
    nets = train_features(scenes, config)
    init = init_feature_nets(config.seed_for("features"), past_len=8, past_dim=32, intent_dim=16)
    for a, b in zip(nets.joint_dec.weights, init.joint_dec.weights):
        np.testing.assert_array_equal(a, b)


def test_train_features_is_deterministic():
    config = quick_config(epochs_features=4, seed=9)
    scenes = synth_generate(3, 12)
    a = train_features(scenes, config)
    b = train_features(scenes, config)
    np.testing.assert_array_equal(a.social_fuse.weights[0], b.social_fuse.weights[0])
    np.testing.assert_array_equal(a.joint_dec.weights[1], b.joint_dec.weights[1])


def test_train_features_requires_futures(small_scenes):
    scene = small_scenes[0]
    futureless = Scene(
        ego_past=scene.ego_past, neighbor_pasts=scene.neighbor_pasts, ego_future=None, scene_id="x"
    )
    with pytest.raises(ValueError, match="future"):
        train_features([futureless], quick_config())
    with pytest.raises(ValueError, match="empty"):
        train_features([], quick_config())
