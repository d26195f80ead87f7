import numpy as np
import pytest

from elasticdrop.data_synth import SynthConfig, generate
from elasticdrop.dropmask import NoDrop, UniformRowDrop
from elasticdrop.elastic_loss import DescriptorBatch, ElasticParams, \
    batch_elastic_loss
from elasticdrop.errors import ConfigError, DegenerateBatchError, ShapeError
from elasticdrop.gradcheck import check_model_end_to_end
from elasticdrop.model import (ModelConfig, config_from_dict, config_to_dict,
                               encode, forward_train, infer, init_params,
                               learning_rate, load_checkpoint, save_checkpoint,
                               scheme_from_dict, train)
from elasticdrop.numerics import softmax_cross_entropy


def tiny_config(**over):
    base = dict(height=4, width=2, in_channels=2, feat_channels=3,
                embed_dim=2, branches=2, num_classes=2,
                drop_scheme=UniformRowDrop(m=2), batch_p=2, batch_k=2,
                epochs=2, warmup_epochs=1, decay_epochs=(2,), seed=0)
    base.update(over)
    return ModelConfig(**base)


def tiny_inputs(config, rng=None, n=4):
    rng = rng or np.random.default_rng(0)
    images = rng.normal(size=(n, config.height, config.width,
                              config.in_channels))
    ids = np.arange(n) % config.num_classes
    return images, ids


class TestEncode:
    def test_zero_params_zero_map(self):
        config = tiny_config()
        params = init_params(config)
        for p in (params.enc_w1, params.enc_b1, params.enc_w2, params.enc_b2):
            p.value[...] = 0.0
        images, _ = tiny_inputs(config)
        assert not encode(images, params, config).any()

    def test_output_shape(self):
        config = tiny_config()
        params = init_params(config)
        images, _ = tiny_inputs(config, n=3)
        assert encode(images, params, config).shape == (3, 4, 2, 3)

    def test_trivial_dims_match_scalar_network(self):
        config = ModelConfig(height=1, width=1, in_channels=1, feat_channels=1,
                             embed_dim=1, branches=1, num_classes=2,
                             drop_scheme=UniformRowDrop(m=1))
        params = init_params(config)
        x = 0.7
        out = encode(np.full((1, 1, 1, 1), x), params, config)
        w1, b1 = params.enc_w1.value[0, 0], params.enc_b1.value[0]
        w2, b2 = params.enc_w2.value[0, 0], params.enc_b2.value[0]
        expected = max(x * w1 + b1, 0.0) * w2 + b2
        assert out.reshape(()) == pytest.approx(expected, rel=1e-15)

    def test_shape_mismatch(self):
        config = tiny_config()
        params = init_params(config)
        with pytest.raises(ShapeError):
            encode(np.zeros((2, 5, 2, 2)), params, config)


class TestForwardTrain:
    def test_single_branch_no_drop_reduction(self):
        config = tiny_config(branches=1, drop_scheme=NoDrop())
        params = init_params(config)
        images, ids = tiny_inputs(config)
        total, out = forward_train(images, ids, params, config)
        assert len(out.branch_descriptors) == 1
        # the one unmasked branch equals the inference path exactly
        assert np.array_equal(out.branch_descriptors[0],
                              infer(images, params, config))
        # total decomposes into one elastic term plus one cross entropy
        elastic, _ = batch_elastic_loss(
            [DescriptorBatch(out.branch_descriptors[0], ids)],
            ElasticParams(eta=config.eta))
        ce, _ = softmax_cross_entropy(out.branch_logits[0], ids)
        assert total == pytest.approx(elastic + ce, abs=1e-12)

    def test_paper_scale_shape_trace(self):
        # 24 x 8 map with six branches produces six descriptors of width 512
        # (feature width scaled down to keep the trace fast)
        config = ModelConfig(height=24, width=8, in_channels=4,
                             feat_channels=16, embed_dim=512, branches=6,
                             num_classes=2, drop_scheme=UniformRowDrop(m=6))
        params = init_params(config)
        images, ids = tiny_inputs(config)
        _, out = forward_train(images, ids, params, config)
        assert len(out.branch_descriptors) == 6
        for desc in out.branch_descriptors:
            assert desc.shape == (4, 512)

    def test_additivity(self):
        config = tiny_config()
        params = init_params(config)
        images, ids = tiny_inputs(config)
        total, out = forward_train(images, ids, params, config)
        assert total == out.elastic_loss + out.ce_loss
        assert out.total_loss == total

    def test_branch_count_with_global(self):
        config = tiny_config(use_global_branch=True)
        params = init_params(config)
        images, ids = tiny_inputs(config)
        _, out = forward_train(images, ids, params, config)
        assert len(out.branch_descriptors) == 3
        assert out.global_descriptor is not None
        assert np.array_equal(out.global_descriptor,
                              infer(images, params, config))

    def test_sample_permutation_equivariance(self):
        config = tiny_config()
        params = init_params(config)
        images, ids = tiny_inputs(config)
        _, out = forward_train(images, ids, params, config)
        perm = np.array([2, 0, 3, 1])
        params.zero_grads()
        _, out_p = forward_train(images[perm], ids[perm], params, config)
        for d, dp in zip(out.branch_descriptors, out_p.branch_descriptors):
            assert np.array_equal(d[perm], dp)

    def test_shared_resblock_affects_all_branches(self):
        config = tiny_config()
        params = init_params(config)
        images, ids = tiny_inputs(config)
        _, before = forward_train(images, ids, params, config)
        params.res_w.value = params.res_w.value + 0.05
        params.zero_grads()
        _, after = forward_train(images, ids, params, config)
        for d0, d1 in zip(before.branch_descriptors, after.branch_descriptors):
            assert not np.array_equal(d0, d1)

    def test_mask_gating(self):
        # zeroing input rows that branch i drops anyway leaves its descriptor
        config = tiny_config()
        params = init_params(config)
        images, ids = tiny_inputs(config)
        _, out = forward_train(images, ids, params, config)
        zeroed = images.copy()
        zeroed[:, 2:, :, :] = 0.0  # rows dropped by branch 2 of m=2
        params.zero_grads()
        _, out_z = forward_train(zeroed, ids, params, config)
        assert np.allclose(out.branch_descriptors[1],
                           out_z.branch_descriptors[1], atol=1e-12)
        assert not np.allclose(out.branch_descriptors[0],
                               out_z.branch_descriptors[0], atol=1e-6)

    def test_single_id_batch_raises(self):
        config = tiny_config()
        params = init_params(config)
        images, _ = tiny_inputs(config)
        with pytest.raises(DegenerateBatchError):
            forward_train(images, np.zeros(4, dtype=int), params, config)

    def test_gradient_end_to_end(self):
        assert check_model_end_to_end(seed=0, trials=3) < 1e-5

    def test_randomized_scheme_needs_rng(self):
        from elasticdrop.dropmask import ElementDropout
        config = tiny_config(branches=1, drop_scheme=ElementDropout(0.3))
        params = init_params(config)
        images, ids = tiny_inputs(config)
        with pytest.raises(ConfigError):
            forward_train(images, ids, params, config)
        total, _ = forward_train(images, ids, params, config,
                                 rng=np.random.default_rng(0))
        assert np.isfinite(total)

    def test_keep_branches_truncates(self):
        config = tiny_config(keep_branches=1)
        params = init_params(config)
        images, ids = tiny_inputs(config)
        _, out = forward_train(images, ids, params, config)
        assert len(out.branch_descriptors) == 1


class TestInfer:
    def test_output_dim(self):
        config = tiny_config()
        params = init_params(config)
        images, _ = tiny_inputs(config, n=5)
        assert infer(images, params, config).shape == (5, config.embed_dim)

    def test_deterministic(self):
        config = tiny_config()
        params = init_params(config)
        images, _ = tiny_inputs(config)
        assert np.array_equal(infer(images, params, config),
                              infer(images, params, config))

    def test_no_resblock_variant(self):
        config = tiny_config(use_resblock=False)
        params = init_params(config)
        assert params.res_w is None
        images, _ = tiny_inputs(config)
        assert infer(images, params, config).shape == (4, 2)


class TestLearningRate:
    def test_linear_warmup(self):
        config = tiny_config(base_lr=1e-3, warmup_epochs=5, epochs=40,
                             decay_epochs=(25, 35), decay_factor=0.1)
        assert learning_rate(config, 1) == pytest.approx(2e-4)
        assert learning_rate(config, 5) == pytest.approx(1e-3)
        assert learning_rate(config, 10) == pytest.approx(1e-3)

    def test_decay_at_epoch(self):
        config = tiny_config(base_lr=1e-3, warmup_epochs=5, epochs=40,
                             decay_epochs=(25, 35), decay_factor=0.1)
        assert learning_rate(config, 24) == pytest.approx(1e-3)
        assert learning_rate(config, 25) == pytest.approx(1e-4)
        assert learning_rate(config, 35) == pytest.approx(1e-5)
        assert learning_rate(config, 40) == pytest.approx(1e-5)

    def test_epoch_zero_rejected(self):
        with pytest.raises(ConfigError):
            learning_rate(tiny_config(), 0)


def tiny_dataset(num_ids=4, samples_per_id=6):
    cfg = SynthConfig(seed=0, num_ids=num_ids, samples_per_id=samples_per_id,
                      num_cameras=2, height=4, width=2, channels=2,
                      part_count=2, occluded_query_prob=0.0)
    return generate(cfg)


class TestTrain:
    def test_zero_epochs_returns_init(self):
        ds = tiny_dataset()
        config = tiny_config(epochs=0, num_classes=4)
        params, log = train(ds.train, config)
        fresh = init_params(config, np.random.default_rng([config.seed, 0]))
        for name, p in params.named().items():
            assert np.array_equal(p.value, fresh.named()[name].value)
        assert log == []

    def test_deterministic(self):
        ds = tiny_dataset()
        config = tiny_config(epochs=3, num_classes=4)
        pa, la = train(ds.train, config)
        pb, lb = train(ds.train, config)
        for name, p in pa.named().items():
            assert np.array_equal(p.value, pb.named()[name].value)
        assert la == lb

    def test_loss_decreases(self):
        cfg = SynthConfig(seed=0, num_ids=6, samples_per_id=10, num_cameras=2,
                          height=4, width=2, channels=3, part_count=2,
                          occluded_query_prob=0.0)
        ds = generate(cfg)
        config = tiny_config(in_channels=3, feat_channels=16, embed_dim=8,
                             num_classes=6, batch_p=3, batch_k=3, epochs=15,
                             warmup_epochs=3, decay_epochs=(12,))
        _, log = train(ds.train, config)
        assert log[-1]["total_loss"] < log[0]["total_loss"]

    def test_log_columns(self):
        ds = tiny_dataset()
        config = tiny_config(epochs=2, num_classes=4)
        _, log = train(ds.train, config)
        assert [row["epoch"] for row in log] == [1, 2]
        for row in log:
            assert set(row) == {"epoch", "lr", "elastic_loss", "ce_loss",
                                "total_loss"}

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            train([], tiny_config())

    def test_id_outside_classes_rejected(self):
        ds = tiny_dataset(num_ids=4)
        with pytest.raises(ConfigError):
            train(ds.train, tiny_config(num_classes=2))


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(5))
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, config, config_hash="abc123")
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg == config
        for name, p in params.named().items():
            assert np.array_equal(p.value, loaded.named()[name].value)

    def test_version_checked(self, tmp_path):
        path = tmp_path / "ckpt.json"
        path.write_text('{"format_version": 99}')
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_infer_same_after_roundtrip(self, tmp_path):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(7))
        images, _ = tiny_inputs(config)
        before = infer(images, params, config)
        save_checkpoint(tmp_path / "c.json", params, config)
        loaded, loaded_cfg = load_checkpoint(tmp_path / "c.json")
        assert np.array_equal(before, infer(images, loaded, loaded_cfg))


class TestConfigSerialization:
    def test_roundtrip(self):
        config = tiny_config(use_global_branch=True, detach_weight=True)
        assert config_from_dict(config_to_dict(config)) == config

    def test_unknown_key_rejected(self):
        doc = config_to_dict(tiny_config())
        doc["bogus"] = 1
        with pytest.raises(ConfigError):
            config_from_dict(doc)

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ConfigError):
            scheme_from_dict({"kind": "mystery"})

    def test_scheme_extra_key_rejected(self):
        with pytest.raises(ConfigError):
            scheme_from_dict({"kind": "uniform", "m": 2, "x": 1})

    def test_branch_scheme_consistency_enforced(self):
        with pytest.raises(ConfigError):
            tiny_config(branches=3)  # m=2 scheme disagrees

    def test_uniform_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            tiny_config(branches=3, drop_scheme=UniformRowDrop(m=3))
