import numpy as np
import pytest

from losscape.autodiff import Batch, FlatParams, forward_loss, init_params
from losscape.errors import ConfigError, FormatError, TrainingDiverged
from losscape.modelzoo import (Dataset, OptimizerConfig, build_lenet_mini, build_mlp, build_model,
                               build_quadratic, expected_snapshot_count, lenet_param_count,
                               load_checkpoint, load_dataset, load_trajectory, make_synthetic,
                               save_checkpoint, save_dataset, save_trajectory, train_sgd)
from losscape.modelzoo.checkpoint import decode_checkpoint, encode_checkpoint


def test_mlp_param_counts():
    assert build_mlp([2, 3, 2]).num_params == 17
    assert build_mlp([784, 10]).num_params == 7850
    with pytest.raises(ConfigError):
        build_mlp([4])


def test_mlp_forward_matches_straight_line_oracle():
    g = build_mlp([3, 4, 2], activation="tanh")
    p = init_params(g, 0)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((5, 3)), rng.integers(0, 2, 5)
    w0 = p.values[:12].reshape(4, 3)
    b0 = p.values[12:16]
    w1 = p.values[16:24].reshape(2, 4)
    b1 = p.values[24:26]
    logits = np.tanh(x @ w0.T + b0) @ w1.T + b1
    shift = logits - logits.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    ref = -logp[np.arange(5), y].mean()
    assert forward_loss(g, p, Batch(x, y)) == pytest.approx(ref, rel=1e-13)


def test_lenet_structure(lenet):
    filters = [g for g in lenet.layout.groups if g.kind == "conv_filter"]
    assert len(filters) == 4 + 8
    assert lenet.num_params == lenet_param_count(8, (4, 8), 10)
    # conv3 -> 6, pool -> 3, conv3 -> 1, pool -> 1; fc 8 -> 32 -> 10
    analytic = (4 * 9 + 4) + (8 * 4 * 9 + 8) + (8 * 32 + 32) + (32 * 10 + 10)
    assert lenet.num_params == analytic
    with pytest.raises(ConfigError):
        build_lenet_mini(6)
    with pytest.raises(ConfigError):
        build_lenet_mini(8, kernel=7)


def test_build_model_round_trip(lenet):
    again = build_model(lenet.spec)
    assert again.layout == lenet.layout


def test_synthetic_is_deterministic_and_round_robin():
    a = make_synthetic(4, 5, 40, seed=9)
    b = make_synthetic(4, 5, 40, seed=9)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    one = make_synthetic(7, 3, 7, seed=0)
    assert sorted(one.labels.tolist()) == list(range(7))
    with pytest.raises(ConfigError):
        make_synthetic(5, 3, 4, seed=0)


def _logits_linear(g, p, x):
    w = p.values[:g.num_params - g.spec["layer_sizes"][-1]].reshape(g.spec["layer_sizes"][::-1])
    b = p.values[-g.spec["layer_sizes"][-1]:]
    return x @ w.T + b


def test_blobs_are_linearly_separable():
    ds = make_synthetic(5, 20, 200, seed=4)
    g = build_mlp([20, 5])
    cfg = OptimizerConfig(learning_rate=0.1, momentum=0.9, batch_size=20, epochs=20)
    traj = train_sgd(g, ds, cfg)
    pred = _logits_linear(g, traj.final, ds.inputs).argmax(axis=1)
    assert np.all(pred == ds.labels)


def test_dataset_file_round_trip(tmp_path):
    ds = make_synthetic(3, 4, 100, seed=1).reshape((2, 2))
    path = save_dataset(tmp_path / "d.gvds", ds)
    back = load_dataset(path)
    assert back.inputs.shape == (100, 2, 2)
    assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.labels, ds.labels)
    assert back.label_histogram().tolist() == [34, 33, 33]


def test_dataset_file_errors(tmp_path):
    ds = make_synthetic(3, 4, 10, seed=1)
    path = save_dataset(tmp_path / "d.gvds", ds)
    raw = path.read_bytes()
    (tmp_path / "t.gvds").write_bytes(raw[:-20])
    with pytest.raises(FormatError, match=r"needs \d+ bytes, file has \d+") as err:
        load_dataset(tmp_path / "t.gvds")
    assert err.value.offset is not None
    (tmp_path / "m.gvds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_dataset(tmp_path / "m.gvds")
    flipped = bytearray(raw)
    flipped[40] ^= 1
    (tmp_path / "c.gvds").write_bytes(bytes(flipped))
    with pytest.raises(FormatError, match="checksum"):
        load_dataset(tmp_path / "c.gvds")


def test_checkpoint_round_trip(tmp_path, lenet):
    p = init_params(lenet, 3)
    save_checkpoint(tmp_path / "a.gvck", p)
    back = load_checkpoint(tmp_path / "a.gvck")
    assert back.layout == p.layout and np.array_equal(back.values, p.values)
    data = encode_checkpoint(p.values)
    assert np.array_equal(decode_checkpoint(data), p.values)
    with pytest.raises(FormatError, match="length"):
        decode_checkpoint(data[:-1])
    bad = bytearray(data)
    bad[20] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        decode_checkpoint(bytes(bad))


def test_optimizer_config_validation():
    OptimizerConfig().validate()
    for kw in (dict(learning_rate=-1), dict(momentum=1.0), dict(batch_size=0), dict(checkpoint_every=0)):
        with pytest.raises(ConfigError):
            OptimizerConfig(**kw).validate()
    assert OptimizerConfig().learning_rate == 0.001
    assert (OptimizerConfig().momentum, OptimizerConfig().batch_size) == (0.9, 256)


def _scalar_quadratic():
    g = build_quadratic([[1.0]])
    ds = Dataset(np.zeros((1, 1)), np.zeros(1, dtype=np.int64), 1)
    return g, ds


def test_momentum_recurrence_by_hand():
    g, ds = _scalar_quadratic()
    init = FlatParams(np.array([1.0]), g.layout)
    one = train_sgd(g, ds, OptimizerConfig(0.1, 0.9, 1, 1), init=init)
    assert one.final.values[0] == pytest.approx(0.9, abs=1e-15)
    two = train_sgd(g, ds, OptimizerConfig(0.1, 0.9, 1, 2), init=init)
    assert two.final.values[0] == pytest.approx(0.72, abs=1e-15)


def test_zero_learning_rate_keeps_theta(lenet, image_data):
    traj = train_sgd(lenet, image_data, OptimizerConfig(0.0, 0.9, 64, 2), init_seed=1)
    first = traj.snapshots[0].params.values
    assert all(np.array_equal(s.params.values, first) for s in traj.snapshots)


@pytest.mark.parametrize("samples,bs,every", [(320, 32, 1), (320, 32, 3), (320, 32, 5), (300, 32, 4)])
def test_snapshot_schedule(lenet, samples, bs, every):
    ds = make_synthetic(10, 64, samples, seed=0).reshape((1, 8, 8))
    traj = train_sgd(lenet, ds, OptimizerConfig(0.01, 0.9, bs, 1, checkpoint_every=every))
    total = -(-samples // bs)
    assert len(traj) == expected_snapshot_count(total, every)
    its = [s.iteration for s in traj.snapshots]
    assert its[-1] == total and its[:-1] == list(range(0, total, every))


def test_recorded_losses_match_reevaluation(lenet, image_data, lenet_traj):
    cfg = lenet_traj.optimizer
    for s in lenet_traj.snapshots:
        epoch, idx = s.batch
        batch = image_data.batch(cfg.seed, epoch, idx, cfg.batch_size)
        assert forward_loss(lenet, s.params, batch) == pytest.approx(s.loss, abs=1e-12)


def test_training_is_deterministic(lenet, image_data, lenet_traj):
    again = train_sgd(lenet, image_data, lenet_traj.optimizer, init_seed=0)
    assert np.array_equal(again.matrix(), lenet_traj.matrix())
    assert lenet_traj.snapshots[-1].loss < lenet_traj.snapshots[0].loss


def test_divergence_keeps_good_snapshots():
    g, ds = _scalar_quadratic()
    init = FlatParams(np.array([1.0]), g.layout)
    with pytest.raises(TrainingDiverged) as err:
        train_sgd(g, ds, OptimizerConfig(1e150, 0.0, 1, 10), init=init)
    kept = err.value.trajectory
    assert len(kept) >= 1 and all(np.isfinite(s.params.values).all() for s in kept.snapshots)


def test_trajectory_directory_round_trip(tmp_path, lenet_traj):
    save_trajectory(tmp_path / "t", lenet_traj)
    assert (tmp_path / "t" / "iter_000000.gvck").exists()
    back = load_trajectory(tmp_path / "t")
    assert np.array_equal(back.matrix(), lenet_traj.matrix())
    assert [s.loss for s in back.snapshots] == [s.loss for s in lenet_traj.snapshots]
    assert back.optimizer == lenet_traj.optimizer and back.model_spec == lenet_traj.model_spec


def test_batches_depend_only_on_seed_and_epoch(image_data):
    a = [b.labels for b in image_data.batches(50, 3, 1)]
    b = [b.labels for b in image_data.batches(50, 3, 1)]
    c = [b.labels for b in image_data.batches(50, 3, 2)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    assert sum(len(x) for x in a) == len(image_data)


def test_subset_size_and_determinism(image_data):
    s = image_data.subset(0.2, seed=1)
    assert len(s) == 64
    assert np.array_equal(s.labels, image_data.subset(0.2, seed=1).labels)
    with pytest.raises(ConfigError):
        image_data.subset(0.0, seed=1)
