"""Synthetic data generation, optimizer arithmetic, the training loop."""

import binascii
import json
import struct

import numpy as np
import pytest

from dualspike.config import ModelConfig, StageSpec, StemSpec, TrainConfig
from dualspike.data import (
    Dataset,
    SyntheticSpec,
    class_patterns,
    channel_stats,
    generate_split,
    iter_batches,
    load_dataset,
    normalize,
    save_dataset,
    serialize_dataset,
)
from dualspike.model import DualSpikeNet, build, load_checkpoint
from dualspike.tensor import CheckpointError, ConfigError, ContractError, Parameter
from dualspike.training import (
    AdamW,
    _restore,
    _snapshot,
    cosine_lr,
    decay_partition,
    evaluate,
    train,
)


class TestSyntheticData:
    def test_generation_is_deterministic(self):
        spec = SyntheticSpec(seed=4)
        a = generate_split(spec, 64, "train")
        b = generate_split(spec, 64, "train")
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_splits_are_disjoint_streams(self):
        spec = SyntheticSpec(seed=4)
        a = generate_split(spec, 64, "train")
        b = generate_split(spec, 64, "test")
        assert not np.array_equal(a.images, b.images)

    def test_noise_free_images_are_class_patterns(self):
        spec = SyntheticSpec(noise=0.0, seed=2)
        ds = generate_split(spec, 40, "train")
        patterns = class_patterns(spec)
        np.testing.assert_array_equal(ds.images, patterns[ds.labels].astype(np.float32))

    def test_labels_are_balanced(self):
        ds = generate_split(SyntheticSpec(seed=0), 320, "train")
        counts = np.bincount(ds.labels, minlength=10)
        assert (counts == 32).all()

    def test_patterns_are_unit_scale(self):
        pats = class_patterns(SyntheticSpec(seed=9))
        np.testing.assert_allclose(pats.std(axis=(1, 2, 3)), 1.0, atol=1e-12)

    def test_classes_linearly_separable_at_working_noise(self):
        # the training acceptance run leans on this: a plain least-squares
        # probe must already crack the task at the default noise level
        ds = generate_split(SyntheticSpec(noise=0.3, seed=0), 320, "train")
        flat = ds.images.reshape(320, -1).astype(np.float64)
        onehot = np.eye(10)[ds.labels]
        w, *_ = np.linalg.lstsq(flat, onehot, rcond=None)
        acc = (np.argmax(flat @ w, axis=1) == ds.labels).mean()
        assert acc > 0.95

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(classes=1)
        with pytest.raises(ConfigError):
            SyntheticSpec(coarse=5)
        with pytest.raises(ConfigError):
            SyntheticSpec(noise=-0.1)

    def test_split_name_contract(self):
        with pytest.raises(ContractError):
            generate_split(SyntheticSpec(), 8, "validation")

    def test_normalize_round_trip(self):
        ds = generate_split(SyntheticSpec(seed=1), 128, "train")
        mean, std = channel_stats(ds.images)
        normed = normalize(ds.images, mean, std)
        m2, s2 = channel_stats(normed)
        np.testing.assert_allclose(m2, 0.0, atol=1e-4)
        np.testing.assert_allclose(s2, 1.0, atol=1e-4)

    def test_iter_batches_covers_every_sample_once(self, rng):
        images = np.arange(20, dtype=np.float32).reshape(10, 2, 1, 1)
        labels = np.arange(10)
        seen = []
        for bi, bl in iter_batches(images, labels, 3, rng=rng):
            assert bi.shape[0] == bl.shape[0] <= 3
            seen.extend(bl.tolist())
        assert sorted(seen) == list(range(10))

    def test_iter_batches_ordered_without_rng(self):
        images = np.zeros((5, 1, 1, 1), dtype=np.float32)
        labels = np.arange(5)
        batches = list(iter_batches(images, labels, 2))
        np.testing.assert_array_equal(np.concatenate([b for _, b in batches]), labels)


class TestDatasetContainer:
    def test_round_trip(self, tmp_path):
        ds = generate_split(SyntheticSpec(noise=0.25, seed=6), 32, "test")
        path = tmp_path / "d.dsds"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.spec == ds.spec
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_dtype_contract(self):
        ds = generate_split(SyntheticSpec(seed=6), 8, "test")
        bad = Dataset(spec=ds.spec, images=ds.images.astype(np.float64), labels=ds.labels)
        with pytest.raises(ContractError):
            serialize_dataset(bad)

    def test_bit_flip_detected(self, tmp_path):
        ds = generate_split(SyntheticSpec(seed=6), 8, "test")
        blob = bytearray(serialize_dataset(ds))
        blob[len(blob) // 2] ^= 0x01
        path = tmp_path / "d.dsds"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="integrity"):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.dsds"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_dataset(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "d.dsds"
        path.write_bytes(b"DS")
        with pytest.raises(CheckpointError, match="truncated"):
            load_dataset(path)

    def test_unsupported_version(self, tmp_path):
        ds = generate_split(SyntheticSpec(seed=6), 4, "test")
        blob = bytearray(serialize_dataset(ds))
        blob[4:8] = struct.pack("<I", 9)
        body = bytes(blob[:-4])
        path = tmp_path / "d.dsds"
        path.write_bytes(body + struct.pack("<I", binascii.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(CheckpointError, match="version 9"):
            load_dataset(path)


class TestOptimizer:
    def test_decay_partition_by_name(self):
        params = [
            Parameter("stem.conv.weight", np.ones(2)),
            Parameter("stem.bn.gamma", np.ones(2)),
            Parameter("stem.bn.beta", np.ones(2)),
            Parameter("classifier.fc.bias", np.ones(2)),
        ]
        decayed, exempt = decay_partition(params)
        assert [p.name for p in decayed] == ["stem.conv.weight"]
        assert len(exempt) == 3

    def test_single_step_oracle(self):
        w = Parameter("m.weight", np.array([1.0]))
        b = Parameter("m.bias", np.array([1.0]))
        w.grad[...] = 0.5
        b.grad[...] = 0.5
        opt = AdamW([w, b], lr=0.1, weight_decay=0.01)
        opt.step()
        mhat = 0.5  # first-step bias correction cancels exactly
        vhat = 0.25
        base_update = mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(w.data, 1.0 - 0.1 * (base_update + 0.01 * 1.0))
        np.testing.assert_allclose(b.data, 1.0 - 0.1 * base_update)

    def test_zero_grad_means_pure_decay(self):
        w = Parameter("m.weight", np.array([2.0]))
        opt = AdamW([w], lr=0.5, weight_decay=0.1)
        opt.step()
        np.testing.assert_allclose(w.data, 2.0 - 0.5 * 0.1 * 2.0)

    def test_requires_params(self):
        with pytest.raises(ContractError):
            AdamW([])

    def test_cosine_schedule_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
        assert cosine_lr(99, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(50, 101, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
        assert cosine_lr(500, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(0, 1, 1e-3, 1e-5) == 1e-3


TINY = ModelConfig(
    name="tiny",
    input_height=8,
    input_width=8,
    in_channels=2,
    num_classes=3,
    time_steps=2,
    stem=StemSpec(kernel=3, stride=1, padding=1, pool=False),
    stages=(StageSpec(d=8, heads=2, p=2, expansion=8, group_width=64),),
)

TINY_DATA = SyntheticSpec(classes=3, channels=2, height=8, width=8, coarse=4, noise=0.2, seed=1)


class TestTrainLoop:
    def test_evaluate_counts_matches(self):
        class Stub:
            def predict(self, images, batch_size=64):
                return np.array([0, 1, 2, 0])

        acc = evaluate(Stub(), np.zeros((4, 1)), np.array([0, 1, 0, 0]))
        assert acc == 0.75

    def test_snapshot_restore_round_trip(self):
        model = DualSpikeNet(TINY, seed=0)
        snap = _snapshot(model)
        for p in model.parameters():
            p.data += 1.0
        model.rate_emas()[0].initialized = True
        model.rate_emas()[0].value = 0.42
        _restore(model, snap)
        for name, arr in model.state_tensors():
            np.testing.assert_array_equal(arr, snap[0][name])
        assert not model.rate_emas()[0].initialized

    def test_two_epoch_run(self, tmp_path):
        model = DualSpikeNet(TINY, seed=0)
        train_ds = generate_split(TINY_DATA, 24, "train")
        eval_ds = generate_split(TINY_DATA, 12, "test")
        cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=0)
        log = tmp_path / "log.jsonl"
        ckpt = tmp_path / "model.dskc"
        result = train(model, train_ds, cfg, eval_ds=eval_ds, log_path=log, checkpoint_path=ckpt)

        assert result.epochs_run == 2
        assert not result.diverged and not result.stopped_early
        assert 0.0 <= result.train_accuracy <= 1.0
        assert 0.0 <= result.eval_accuracy <= 1.0

        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["record"] for r in records] == ["epoch", "epoch", "final"]
        assert records == result.history
        for r in records[:2]:
            assert np.isfinite(r["loss"])
            assert 0.0 <= r["rate_min"] <= r["rate_mean"] <= r["rate_max"] <= 1.0

        clone = load_checkpoint(ckpt)
        np.testing.assert_array_equal(clone.predict(eval_ds.images), model.predict(eval_ds.images))

    def test_training_is_deterministic(self):
        cfg = TrainConfig(epochs=1, batch_size=8, lr=1e-3, seed=3)
        histories = []
        for _ in range(2):
            model = DualSpikeNet(TINY, seed=1)
            result = train(model, generate_split(TINY_DATA, 16, "train"), cfg)
            histories.append(result.history)
        assert histories[0] == histories[1]

    def test_untrained_nano_scores_at_chance(self):
        model = build("Nano", seed=3)
        ds = generate_split(SyntheticSpec(seed=0), 160, "test")
        acc = evaluate(model, ds.images, ds.labels)
        assert 0.02 <= acc <= 0.18  # 3 sigma around 1/10 for 160 balanced draws

    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=1e-3, lr_min=1e-2)
        with pytest.raises(ConfigError):
            TrainConfig(weight_decay=-0.1)
