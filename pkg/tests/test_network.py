import math

import numpy as np
import pytest

from granet import autodiff as ad
from granet.autodiff import Tensor
from granet.errors import ConfigError, ContractError, ParseError
from granet.network import (
    GraNetModel,
    NetworkConfig,
    build_ablation,
    load_checkpoint,
    param_count,
    read_checkpoint,
    save_checkpoint,
    upsample,
)
from granet.nn import Module, param
from granet.spatial import Interpolation


def random_block(n, seed=0, width=5):
    rng = np.random.default_rng(seed)
    return np.column_stack(
        [rng.uniform(0, 25, (n, 2)), rng.uniform(0, 10, n), rng.uniform(0, 1, n), rng.integers(1, 4, n)]
    )[:, :width]


@pytest.fixture(scope="module")
def default_model():
    return GraNetModel(NetworkConfig())


def test_default_config_values():
    cfg = NetworkConfig()
    assert cfg.K == 32
    assert cfg.points_per_block == 4096
    assert cfg.decimation == 4
    assert cfg.level_sizes == [4096, 1024, 256, 64]


def test_point_count_trace_and_output_shape(default_model):
    trace = []
    out = default_model(random_block(4096), trace=trace)
    assert trace == [4096, 1024, 256, 64, 256, 1024, 4096]
    assert out.shape == (4096, 9)


def test_encoder_decimation_is_ceiling():
    cfg = NetworkConfig.miniature(points_per_block=1000)
    assert cfg.level_sizes == [1000, 250, 63, 16]
    trace = []
    GraNetModel(cfg)(random_block(1000), trace=trace)
    assert trace == [1000, 250, 63, 16, 63, 250, 1000]


def test_forward_is_deterministic():
    model = GraNetModel(NetworkConfig.miniature(points_per_block=256))
    block = random_block(256, seed=3)
    a = model(block).data
    b = model(block).data
    assert np.array_equal(a, b)
    model.eval()
    assert np.array_equal(model(block).data, model(block).data)


def test_block_size_mismatch_is_contract_error():
    model = GraNetModel(NetworkConfig.miniature(points_per_block=256))
    with pytest.raises(ContractError):
        model(random_block(255))
    with pytest.raises(ContractError):
        model(random_block(256, width=4))


def test_horizontal_shift_only_moves_through_rounding():
    model = GraNetModel(NetworkConfig.miniature(points_per_block=256))
    block = random_block(256, seed=5)
    shifted = block.copy()
    shifted[:, :2] += [1000.0, -500.0]
    np.testing.assert_allclose(model(block).data, model(shifted).data, rtol=0, atol=1e-8)


def test_plain_baseline_path_runs():
    cfg = NetworkConfig.miniature(points_per_block=256, gra_mode="off", interpolation_k=3)
    model = GraNetModel(cfg)
    assert model(random_block(256)).shape == (256, 9)
    assert all(d.gra.param_count() == 0 for d in model.decoders)


def test_three_neighbor_upsampling_matches_weighted_sum():
    rng = np.random.default_rng(0)
    coarse = rng.normal(size=(5, 3))
    idx = rng.integers(0, 5, size=(7, 3))
    w = rng.uniform(size=(7, 3))
    w /= w.sum(axis=1, keepdims=True)
    got = upsample(Tensor(coarse), Interpolation(idx, w)).data
    expected = np.array([[sum(w[i, j] * coarse[idx[i, j], c] for j in range(3)) for c in range(3)] for i in range(7)])
    np.testing.assert_allclose(got, expected, atol=1e-14)


@pytest.mark.parametrize(
    "changes",
    [
        dict(decimation=1),
        dict(encoder_widths=(64, 64, 128)),
        dict(encoder_widths=(64, 128)),
        dict(gra_mode="mode4"),
        dict(interpolation_k=2),
        dict(use_sde=False, use_dfe=False),
        dict(class_count=1),
        dict(input_width=3),
    ],
)
def test_config_validation(changes):
    with pytest.raises(ConfigError):
        NetworkConfig(**changes)


def test_config_text_round_trip():
    cfg = NetworkConfig.miniature(gra_mode="mode3", relative_ede=True, interpolation_k=3, class_count=4)
    assert NetworkConfig.from_text(cfg.to_text()) == cfg
    assert NetworkConfig.from_text(NetworkConfig().to_text()) == NetworkConfig()
    with pytest.raises(ConfigError):
        NetworkConfig.from_text("[network]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        NetworkConfig.from_text("[network]\nK = many\n")


def test_ablation_flags():
    e = build_ablation("E")
    assert (e.use_sde, e.use_dfe, e.use_ede, e.use_attention_pool) == (True, True, True, True)
    a = build_ablation("A")
    assert (a.use_sde, a.use_dfe, a.use_ede, a.use_attention_pool) == (True, False, False, False)
    b = build_ablation("B")
    assert (b.use_sde, b.use_dfe) == (False, True)
    for tag in "ABCDE":
        assert build_ablation(tag).gra_mode == "off"
    with pytest.raises(ConfigError):
        build_ablation("F")


def test_ablation_param_order():
    base = NetworkConfig.miniature(points_per_block=256)
    counts = {t: param_count(GraNetModel(build_ablation(t, base))).total for t in "ABCDE"}
    assert counts["D"] < counts["E"]
    assert counts["A"] < counts["C"] < counts["D"]


def test_param_count_toy_and_breakdown():
    class Toy(Module):
        def __init__(self, d):
            super().__init__()
            self.w = param(np.zeros((d, d)))

    assert param_count(Toy(7)).total == 49
    model = GraNetModel(NetworkConfig.miniature(points_per_block=256))
    rep = param_count(model)
    assert rep.total == sum(rep.by_module.values())
    assert rep.total == sum(p.size for p in model.parameters())
    assert len({id(p) for p in model.parameters()}) == len(model.parameters())
    assert list(rep.by_module) == ["lift", "encoder1", "encoder2", "encoder3", "decoder1", "decoder2", "decoder3", "head"]
    assert param_count(model) == rep


def test_gra_mode_param_pattern_at_default_size():
    totals = {m: param_count(GraNetModel(NetworkConfig(gra_mode=m))).total for m in ("mode1", "mode2", "mode3")}
    assert totals["mode1"] == totals["mode2"]
    assert totals["mode3"] > totals["mode1"]


def test_checkpoint_round_trip(tmp_path):
    cfg = NetworkConfig.miniature(points_per_block=256, class_count=3)
    model = GraNetModel(cfg)
    block = random_block(256)
    model(block)  # move the batch-norm running statistics off their defaults
    model.eval()
    path = tmp_path / "ck.bin"
    save_checkpoint(model, path, {"classes": "a,b,c"})
    ck = load_checkpoint(path)
    assert ck.config == cfg
    assert ck.meta == {"classes": "a,b,c"}
    for k, v in model.state_dict().items():
        assert np.array_equal(ck.state[k], v)
    assert np.array_equal(ck.model(block).data, model(block).data)
    assert path.read_bytes()[:8] == b"GRANETCK"


def test_checkpoint_corruption(tmp_path):
    model = GraNetModel(NetworkConfig.miniature(points_per_block=256))
    path = tmp_path / "ck.bin"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ParseError):
        read_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ParseError):
        read_checkpoint(tmp_path / "short.bin")
    with pytest.raises(ParseError):
        read_checkpoint(tmp_path / "missing.bin")


def test_full_gradient_on_miniature_subset():
    model = GraNetModel(NetworkConfig.miniature(batch_norm=False))
    block = random_block(64, seed=2)
    plan = model.plan(block)
    rng = np.random.default_rng(0)
    for _, p in model.named_parameters():
        if p.ndim == 1:
            p.data[...] = rng.uniform(0.05, 0.2, size=p.shape)
    w = Tensor(rng.normal(size=(64, 9)))
    f = lambda _: ad.sum(ad.mul(model(block, plan), w))  # noqa: E731
    for name in ("lift.weight", "encoder1.sde.weight", "decoder3.gra.sra.rel_row", "head.bias"):
        p = dict(model.named_parameters())[name]
        idx = rng.choice(p.size, size=min(5, p.size), replace=False)
        assert ad.finite_diff_check(f, p, indices=idx) < 1e-4, name


def test_level_sizes_formula():
    cfg = NetworkConfig()
    for l, size in enumerate(cfg.level_sizes):
        assert size == math.ceil(4096 / 4**l)
