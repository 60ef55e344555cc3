import numpy as np
import pytest

from dact.errors import ConfigError
from dact.fusion import MotionFusedSample
from dact.network import (BackboneConfig, NetworkConfig, backbone_forward,
                          backward, forward, forward_batch, frozen_names,
                          head_forward, init_params, is_state, loss_and_grads)
from dact.seeding import derive_rng

from conftest import sampled_gradient_error


def small_config(n_groups=2, num_classes=3, channels=3, freeze="none",
                 reduction=None):
    return NetworkConfig(
        backbone=BackboneConfig(input_channels=channels, stage_widths=(4, 6),
                                input_side=8, bn_freeze_policy=freeze),
        n_groups=n_groups, num_classes=num_classes, reduction_units=reduction,
        dropout=0.0)


def make_sample(config, seed=0):
    rng = derive_rng(seed, "sample")
    groups = [rng.random((config.backbone.input_channels,
                          config.backbone.input_side,
                          config.backbone.input_side)).astype(np.float32)
              for _ in range(config.n_groups)]
    return MotionFusedSample(groups=groups, flow_frames=0)


class TestBackbone:
    def test_all_zero_params_zero_output(self):
        cfg = small_config()
        params = init_params(cfg, seed=0, dtype=np.float64)
        for name in params.tensors:
            if not name.endswith("running_var"):
                params.tensors[name] = np.zeros_like(params.tensors[name])
        group = np.random.default_rng(0).random((3, 8, 8))
        for mode in ("eval", "train"):
            feats = backbone_forward(group, params, cfg, mode)
            assert np.allclose(feats, 0.0)

    def test_spatial_map_halves_per_stage(self):
        cfg = NetworkConfig(
            backbone=BackboneConfig(input_channels=3,
                                    stage_widths=(2, 2, 2, 2), input_side=64),
            n_groups=1, num_classes=2, dropout=0.0)
        params = init_params(cfg, seed=1)
        from dact.network import _backbone_batch
        x = np.random.default_rng(1).random((1, 3, 64, 64)).astype(np.float32)
        _, (caches, gap_cache) = _backbone_batch(x, params, cfg, "eval", False)
        assert gap_cache == (4, 4)  # 64 / 2^4 before global pooling

    def test_duplicate_groups_identical_rows(self):
        cfg = small_config()
        params = init_params(cfg, seed=2)
        g = np.random.default_rng(3).random((3, 8, 8)).astype(np.float32)
        x = np.stack([np.stack([g, g]), np.stack([g, g])])
        logits, _ = forward_batch(x, params, cfg, mode="eval")
        assert np.array_equal(logits[0], logits[1])

    def test_indivisible_input_side_rejected(self):
        with pytest.raises(ConfigError):
            BackboneConfig(stage_widths=(4, 4), input_side=10).validate()


class TestHead:
    def test_constant_logits_uniform_probabilities(self):
        cfg = small_config()
        params = init_params(cfg, seed=3)
        params.tensors["fc2.w"] = np.zeros_like(params.tensors["fc2.w"])
        params.tensors["fc2.b"] = np.zeros_like(params.tensors["fc2.b"])
        feats = np.random.default_rng(0).random((2, 6)).astype(np.float32)
        pred = head_forward(feats, params, cfg)
        assert np.allclose(pred.probabilities, 1.0 / 3.0)

    def test_probabilities_sum_to_one(self):
        cfg = small_config()
        params = init_params(cfg, seed=4)
        pred = head_forward(np.random.default_rng(1).random((2, 6)), params, cfg)
        assert abs(pred.probabilities.sum() - 1.0) < 1e-6
        assert pred.logits.shape == (3,)

    def test_eval_mode_deterministic(self):
        cfg = small_config()
        cfg.dropout = 0.5
        params = init_params(cfg, seed=5)
        feats = np.random.default_rng(2).random((2, 6))
        a = head_forward(feats, params, cfg, mode="eval")
        b = head_forward(feats, params, cfg, mode="eval")
        assert np.array_equal(a.probabilities, b.probabilities)

    def test_default_concat_length(self):
        from dact.network import head_input_dim
        cfg = NetworkConfig(n_groups=4, num_classes=10, dropout=0.0)
        assert cfg.backbone.feature_dim == 128
        assert head_input_dim(cfg) == 512
        params = init_params(cfg, seed=0)
        assert params.tensors["fc1.w"].shape == (512, 512)

    def test_reduction_required_for_eight_groups(self):
        with pytest.raises(ConfigError, match="reduction"):
            small_config(n_groups=8).validate()
        cfg = small_config(n_groups=8, reduction=16)
        params = init_params(cfg, seed=6)
        assert params.tensors["reduce.w"].shape == (8 * 6, 16)
        assert params.tensors["fc1.w"].shape == (16, 512)

    def test_wrong_feature_count_rejected(self):
        cfg = small_config()
        params = init_params(cfg, seed=7)
        with pytest.raises(ValueError):
            head_forward(np.zeros((3, 6)), params, cfg)


class TestForward:
    def test_group_permutation_changes_prediction(self):
        cfg = small_config()
        params = init_params(cfg, seed=8)
        sample = make_sample(cfg, seed=1)
        swapped = MotionFusedSample(groups=[sample.groups[1], sample.groups[0]],
                                    flow_frames=0)
        a = forward(sample, params, cfg)
        b = forward(swapped, params, cfg)
        assert not np.allclose(a.probabilities, b.probabilities)

    def test_weight_sharing_permutes_feature_blocks(self):
        cfg = small_config()
        params = init_params(cfg, seed=9)
        sample = make_sample(cfg, seed=2)
        fa = backbone_forward(sample.groups[0], params, cfg)
        fb = backbone_forward(sample.groups[1], params, cfg)
        x = sample.to_array()[None]
        from dact.network import _backbone_batch
        feats, _ = _backbone_batch(
            x.reshape(-1, *x.shape[2:]).astype(np.float32), params, cfg,
            "eval", False)
        assert np.array_equal(feats[0], fa.astype(np.float32))
        assert np.array_equal(feats[1], fb.astype(np.float32))

    def test_identical_groups_identical_blocks(self):
        cfg = small_config()
        params = init_params(cfg, seed=10)
        g = np.random.default_rng(5).random((3, 8, 8)).astype(np.float32)
        from dact.network import _backbone_batch
        feats, _ = _backbone_batch(np.stack([g, g]), params, cfg, "eval", False)
        assert np.array_equal(feats[0], feats[1])

    def test_m0_and_m1_same_output_dim(self):
        for channels in (3, 5):
            cfg = small_config(channels=channels)
            params = init_params(cfg, seed=11)
            pred = forward(make_sample(cfg, seed=3), params, cfg)
            assert pred.probabilities.shape == (3,)


class TestBackward:
    def test_logit_gradient_closed_form(self):
        cfg = small_config()
        params = init_params(cfg, seed=12, dtype=np.float64)
        sample = make_sample(cfg, seed=4)
        x = sample.to_array()[None]
        logits, _ = forward_batch(x, params, cfg, mode="eval")
        from dact.layers import softmax_cross_entropy
        _, probs, dlogits = softmax_cross_entropy(logits, np.array([1]))
        onehot = np.zeros((1, 3))
        onehot[0, 1] = 1.0
        assert np.allclose(dlogits, probs - onehot)

    def test_frozen_bn_zero_gradients(self):
        cfg = small_config(freeze="all_but_first")
        params = init_params(cfg, seed=13, dtype=np.float64)
        grads = backward(make_sample(cfg, seed=5), 0, params, cfg, mode="eval")
        assert frozen_names(cfg) == {"stage1.bn.gamma", "stage1.bn.beta"}
        assert not grads["stage1.bn.gamma"].any()
        assert not grads["stage1.bn.beta"].any()
        assert grads["stage0.bn.gamma"].any()
        assert grads["stage0.conv.w"].any()

    def test_registry_mirrors_params(self):
        cfg = small_config()
        params = init_params(cfg, seed=14, dtype=np.float64)
        grads = backward(make_sample(cfg, seed=6), 2, params, cfg, mode="eval")
        assert set(grads) == set(params.tensors)
        for name, g in grads.items():
            assert g.shape == params.tensors[name].shape
            if is_state(name):
                assert not g.any()

    def test_end_to_end_gradient_check(self):
        # seeds give a generic point: no activation sits within the 1e-3
        # perturbation of a ReLU or pool-argmax boundary
        cfg = small_config()
        params = init_params(cfg, seed=1, dtype=np.float64)
        x = np.random.default_rng(0).random((2, 2, 3, 8, 8))
        targets = np.array([0, 2])
        _, _, grads = loss_and_grads(x, targets, params, cfg, mode="eval")

        def f():
            loss, _, _ = loss_and_grads(x, targets, params, cfg, mode="eval")
            return loss

        for name in params.tensors:
            if is_state(name):
                continue
            err = sampled_gradient_error(f, params.tensors[name], grads[name])
            assert err < 1e-4, f"{name}: {err}"

    def test_train_mode_uses_batch_statistics(self):
        cfg = small_config()
        params = init_params(cfg, seed=16, dtype=np.float64)
        # push running stats away from the batch stats
        params.tensors["stage0.bn.running_mean"] += 3.0
        x = np.random.default_rng(8).random((2, 2, 3, 8, 8))
        train_logits, _ = forward_batch(x, params, cfg, mode="train")
        eval_logits, _ = forward_batch(x, params, cfg, mode="eval")
        assert not np.allclose(train_logits, eval_logits)
