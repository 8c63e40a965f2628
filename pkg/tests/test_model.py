import numpy as np
import pytest

from fecnet import autodiff as ad
from fecnet.errors import ConfigurationError, DimensionError, NonFiniteError
from fecnet.model import Model, ModelConfig, build_model, fec_micro, fec_small


def micro_batch(n=2, seed=0, size=64):
    return np.random.default_rng(seed).normal(size=(n, 3, size, size)).astype(np.float32)


@pytest.fixture(scope="module")
def micro():
    return build_model(fec_micro())


def test_micro_grids_and_logits(micro):
    assert micro.stage_grids() == [(16, 16), (8, 8), (4, 4), (2, 2)]
    logits, records = micro(micro_batch(3))
    assert logits.shape == (3, 10)
    assert records is None


def test_small_grids_match_resolution_ladder():
    cfg = fec_small()
    assert cfg.stage_grids() == [(56, 56), (28, 28), (14, 14), (7, 7)]
    for i, grid in enumerate(cfg.stage_grids(), start=1):
        assert grid[0] == 224 // (cfg.stem_stride * 2 ** (i - 1))


def test_small_parameter_count_near_reference():
    n = Model(fec_small()).num_parameters()
    assert abs(n - 5.5e6) / 5.5e6 <= 0.15


def test_record_completeness(micro):
    _, records = micro(micro_batch(1), record_assignments=True)
    cfg = micro.config
    assert len(records) == sum(cfg.stage_depths) + 3
    assert [r.layer_id for r in records] == list(range(len(records)))
    grids = cfg.stage_grids()
    pools = [r for r in records if r.kind == "pool"]
    for i, rec in enumerate(pools):
        assert rec.input_grid == grids[i] and rec.center_grid == grids[i + 1]
        assert rec.assignment.shape == (1, grids[i][0] * grids[i][1])
    for rec in records:
        assert rec.assignment.max() < rec.num_centers


def test_zero_head_gives_identical_logits():
    model = build_model(fec_micro(seed=4))
    model.head["weight"].data[...] = 0
    a, _ = model(micro_batch(2, seed=1))
    b, _ = model(micro_batch(2, seed=2))
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.data[0], a.data[1])


def test_identical_images_give_identical_rows(micro):
    x = np.repeat(micro_batch(1, seed=5), 2, axis=0)
    logits, records = micro(x, record_assignments=True)
    np.testing.assert_array_equal(logits.data[0], logits.data[1])
    for rec in records:
        np.testing.assert_array_equal(rec.assignment[0], rec.assignment[1])


def test_seeded_determinism():
    x = micro_batch(2, seed=6)
    outs = []
    for _ in range(2):
        model = build_model(fec_micro(seed=11))
        logits, _ = model(x)
        loss = ad.softmax_cross_entropy(logits, np.array([1, 2]))
        ad.backward(loss)
        outs.append((logits.data, model.named_parameters()["pool2.value_proj"].grad))
    for u, v in zip(*outs):
        np.testing.assert_array_equal(u, v)


def test_parameter_names_are_unique_and_ordered(micro):
    names = list(micro.named_parameters())
    assert names[0] == "stem.weight" and names[-1] == "head.bias"
    assert "stage1.block0.cluster.key_proj" in names and "pool3.pool_residual" in names
    assert len(names) == len(set(names))


def test_invalid_configs_name_the_stage():
    with pytest.raises(ConfigurationError, match="stem"):
        ModelConfig(input_size=(62, 64)).validate()
    with pytest.raises(ConfigurationError, match="stage"):
        ModelConfig(input_size=(48, 48)).validate()  # 12 -> 6 -> 3: cannot halve
    with pytest.raises(ConfigurationError, match="stage 4"):
        ModelConfig(input_size=(32, 32)).validate()  # 1x1 final grid cannot be encoded
    with pytest.raises(ConfigurationError):
        ModelConfig(stage_depths=(1, 1, 1)).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(similarity="l1")


def test_config_round_trip():
    cfg = fec_micro(dispatch_variant="s1_dense", similarity="dot", seed=3)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({**cfg.to_dict(), "depth": 3})


def test_wrong_input_shape(micro):
    with pytest.raises(DimensionError):
        micro(micro_batch(1, size=32))


def test_finite_watch_names_first_bad_layer():
    model = build_model(fec_micro())
    model.pools[1].value_proj.data[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="pool2"):
        model(micro_batch(1), check_finite=True)


def test_state_dict_shape_check(micro):
    state = micro.state_dict()
    state["head.weight"] = state["head.weight"][:, :3]
    with pytest.raises(ConfigurationError, match="head.weight"):
        build_model(fec_micro()).load_state_dict(state)


def test_ablation_switches_change_parameters():
    base = Model(fec_micro()).num_parameters()
    assert Model(fec_micro(normalize=False)).num_parameters() < base
    assert Model(fec_micro(mlp_depth=2)).num_parameters() > base
    assert Model(fec_micro(ffn_ratios=(0, 0, 0, 0))).num_parameters() < base
