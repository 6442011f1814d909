import math

import numpy as np
import pytest

from granet import autodiff as ad
from granet import training
from granet.autodiff import Tensor
from granet.errors import ConfigError, ContractError, DimensionError
from granet.network import GraNetModel, NetworkConfig
from granet.spatial import tile_blocks
from granet.synthetic import synthetic_scene
from granet.training import (
    Adam,
    Block,
    TrainConfig,
    adam_step,
    cross_entropy_loss,
    inverse_frequency_weights,
    lr_schedule,
    make_blocks,
    predict_cloud,
    train,
)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.001
    assert lr_schedule(99, cfg) == 0.001
    assert lr_schedule(100, cfg) == pytest.approx(0.0007, abs=1e-15)
    assert lr_schedule(200, cfg) == pytest.approx(0.00049, abs=1e-15)
    assert lr_schedule(30, TrainConfig(decay_step_epochs=10)) == pytest.approx(0.001 * 0.7**3)
    with pytest.raises(ContractError):
        lr_schedule(-1, cfg)


@pytest.mark.parametrize(
    "changes", [dict(decay_factor=0.0), dict(decay_factor=1.5), dict(batch_size=0), dict(decay_step_epochs=0)]
)
def test_train_config_validation(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes)


def test_cross_entropy_examples():
    assert cross_entropy_loss(Tensor(np.zeros((5, 9))), np.arange(5)).item() == pytest.approx(math.log(9), abs=1e-15)
    confident = np.full((3, 4), -50.0)
    confident[np.arange(3), [0, 2, 3]] = 50.0
    assert cross_entropy_loss(Tensor(confident), [0, 2, 3]).item() < 1e-40
    scores = np.array([[1.0, 0.0], [0.0, 2.0]])
    # point 0: -log(e/(e+1)); point 1 (true class 0): -log(1/(1+e^2))
    hand = (-math.log(math.e / (math.e + 1)) - math.log(1 / (1 + math.e**2))) / 2
    assert abs(cross_entropy_loss(Tensor(scores), [0, 0]).item() - hand) < 1e-12
    # class weights: point 0 is class 0 (w=2), point 1 is class 1 (w=0.5)
    weighted = (2.0 * -math.log(math.e / (math.e + 1)) + 0.5 * -math.log(math.e**2 / (1 + math.e**2))) / 2
    assert abs(cross_entropy_loss(Tensor(scores), [0, 1], [2.0, 0.5]).item() - weighted) < 1e-12
    with pytest.raises(ContractError):
        cross_entropy_loss(Tensor(scores), [0, 2])
    with pytest.raises(DimensionError):
        cross_entropy_loss(Tensor(scores), [0])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    labels = rng.integers(0, 4, 6)
    assert ad.finite_diff_check(lambda t: cross_entropy_loss(t, labels, [1.0, 2.0, 0.5, 1.5]), x) < 1e-8


def test_inverse_frequency_weights():
    w = inverse_frequency_weights([0, 0, 0, 1], 3)
    assert w[2] == 0.0
    assert w[1] == pytest.approx(3 * w[0])
    assert w[:2].mean() == pytest.approx(1.0)


def test_adam_first_step_and_zero_gradient():
    p = Tensor(np.full(4, 2.0), requires_grad=True)
    opt = Adam([p])
    opt.step(0.001, [np.ones(4)])
    np.testing.assert_allclose(p.data, 2.0 - 0.001, rtol=0, atol=1e-10)
    q = Tensor(np.array([1.0, -3.0]), requires_grad=True)
    Adam([q]).step(0.001, [np.zeros(2)])
    assert q.data.tolist() == [1.0, -3.0]


def test_adam_shape_mismatch_and_wrong_state():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([p])
    with pytest.raises(DimensionError):
        opt.step(0.001, [np.zeros(4)])
    with pytest.raises(ContractError):
        adam_step([Tensor(np.zeros(3), requires_grad=True)], [np.zeros(3)], opt, 0.001)


def test_adam_reduces_convex_quadratic_and_is_deterministic():
    def run():
        x = Tensor(np.array([3.0, -2.0, 0.5]), requires_grad=True)
        opt = Adam([x])
        values = []
        for _ in range(50):
            x.grad = None
            loss = ad.sum(ad.mul(x, x))
            values.append(loss.item())
            ad.backward(loss)
            adam_step([x], [x.grad], opt, 0.05)
        return x.data.copy(), values

    a, va = run()
    b, vb = run()
    assert np.array_equal(a, b)
    assert va[1] < va[0]
    assert va[-1] < va[0]


def small_setup(n=256, seed=0):
    cloud = synthetic_scene(n, seed=seed)
    tiles = tile_blocks(cloud.xyz)
    cfg = NetworkConfig.miniature(points_per_block=n, class_count=3)
    return cloud, tiles, cfg


def test_make_blocks_and_predict_cover_cloud():
    cloud, tiles, cfg = small_setup()
    blocks = make_blocks(cloud, tiles, cfg.points_per_block)
    assert len(blocks) == len(tiles.members) == 1
    assert blocks[0].features.shape == (256, 5)
    assert np.array_equal(blocks[0].labels, cloud.labels[blocks[0].indices])
    pred = predict_cloud(GraNetModel(cfg), cloud, tiles, blocks)
    assert pred.shape == (256,) and pred.min() >= 0 and pred.max() < 3


def test_training_descends_and_saves_best_only(tmp_path):
    cloud, tiles, cfg = small_setup()
    blocks = make_blocks(cloud, tiles, cfg.points_per_block)
    model = GraNetModel(cfg)
    hist = train(model, blocks, None, TrainConfig(max_epochs=200), out_dir=tmp_path)
    losses = [r.train_loss for r in hist.epochs]
    assert losses[-1] < losses[0]
    assert len(hist.checkpoints) <= len(hist.epochs)
    saved = [loss for _, loss in hist.checkpoints]
    assert all(b < a for a, b in zip(saved, saved[1:]))
    assert (tmp_path / "checkpoint_best.bin").exists()
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert len(lines) == 201
    fields = lines[1].split("#")[0].split()
    assert len(fields) == 5 and fields[0] == "0"


def test_training_is_reproducible(tmp_path):
    cloud, tiles, cfg = small_setup()
    outs = []
    for run in ("a", "b"):
        blocks = make_blocks(cloud, tiles, cfg.points_per_block)
        train(GraNetModel(cfg), blocks, None, TrainConfig(max_epochs=5), out_dir=tmp_path / run, clock=lambda: "T")
        outs.append(((tmp_path / run / "checkpoint_best.bin").read_bytes(), (tmp_path / run / "train.log").read_text()))
    assert outs[0] == outs[1]


def test_each_epoch_visits_every_block_once(monkeypatch):
    cloud, tiles, cfg = small_setup()
    base = make_blocks(cloud, tiles, cfg.points_per_block)[0]
    blocks = [Block(base.features, base.labels, base.indices) for _ in range(5)]
    seen = []
    real = training._scores

    def spy(model, block):
        if model.training:
            seen.append(id(block))
        return real(model, block)

    monkeypatch.setattr(training, "_scores", spy)
    train(GraNetModel(cfg), blocks, blocks[:1], TrainConfig(max_epochs=3, batch_size=2))
    ids = sorted(id(b) for b in blocks)
    for e in range(3):
        assert sorted(seen[e * 5 : (e + 1) * 5]) == ids


def test_training_requires_labels():
    cloud, tiles, cfg = small_setup()
    blocks = make_blocks(cloud, tiles, cfg.points_per_block)
    unlabeled = [Block(b.features, None, b.indices) for b in blocks]
    with pytest.raises(ContractError):
        train(GraNetModel(cfg), unlabeled, None, TrainConfig(max_epochs=1))
    with pytest.raises(ContractError):
        train(GraNetModel(cfg), [], None, TrainConfig(max_epochs=1))


def test_initial_loss_finite():
    cloud, tiles, cfg = small_setup()
    b = make_blocks(cloud, tiles, cfg.points_per_block)[0]
    loss = cross_entropy_loss(GraNetModel(cfg)(b.features), b.labels).item()
    assert math.isfinite(loss)
