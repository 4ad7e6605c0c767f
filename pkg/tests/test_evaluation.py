import itertools
import json

import numpy as np
import pytest

from nnattrib import MethodConfig, analyze, zoo
from nnattrib.errors import ConfigError, ShapeError
from nnattrib.evaluation import (
    PerturbationConfig,
    aopc,
    curve_for_order,
    curve_json,
    perturbation_curve,
    rank_regions,
    region_masks,
)
from nnattrib.forward import forward
from nnattrib.model_io import build_model

LIN3 = build_model([3], [{"kind": "dense", "in_features": 3, "out_features": 1, "weight_ref": "W"}],
                   {"W": [[3.0], [1.0], [2.0]]})
ONES = np.ones(3)


def test_linear_hand_curve():
    attr = np.array([3.0, 1.0, 2.0]) * ONES
    c = perturbation_curve(LIN3, ONES, attr, PerturbationConfig(steps=3))
    assert c.scores == [6.0, 3.0, 1.0, 0.0]
    assert c.order == [0, 2, 1]
    assert c.aopc == pytest.approx(14 / 3, abs=1e-15)


def test_aopc_examples():
    assert aopc([6.0, 3.0, 1.0, 0.0]) == pytest.approx(14 / 3, abs=1e-15)
    assert aopc([2.0, 2.0, 2.0]) == 0.0
    assert aopc([5.0, 4.0, 1.0, -3.0]) > 0
    with pytest.raises(ConfigError):
        aopc([1.0])


def test_descending_maximizes_aopc_over_all_orderings():
    attr = np.array([3.0, 1.0, 2.0])
    masks = region_masks((3,), (1, 1))
    best = max(aopc(curve_for_order(LIN3, ONES, 0, masks, p)) for p in itertools.permutations(range(3)))
    got = perturbation_curve(LIN3, ONES, attr, PerturbationConfig(steps=3)).aopc
    assert got == best


def test_zero_attribution_ties_to_region_index():
    c = perturbation_curve(LIN3, ONES, np.zeros(3), PerturbationConfig(steps=3))
    assert c.order == [0, 1, 2]


def test_random_order_is_deterministic():
    cfg = PerturbationConfig(steps=3, order="random", seed=5)
    a = perturbation_curve(LIN3, ONES, np.zeros(3), cfg)
    b = perturbation_curve(LIN3, ONES, np.zeros(3), cfg)
    assert a.order == b.order and a.scores == b.scores
    assert a.order == [int(r) for r in np.random.default_rng(5).permutation(3)]


def test_curve_is_bit_identical_across_runs(models):
    m = models["cnn"]
    x = np.random.default_rng(0).standard_normal(m.input_shape)
    attr = analyze(m, x, MethodConfig("gradient"))
    cfg = PerturbationConfig(steps=8, region=(2, 2))
    a, b = perturbation_curve(m, x, attr, cfg), perturbation_curve(m, x, attr, cfg)
    assert curve_json([a.to_record("gradient", cfg)]) == curve_json([b.to_record("gradient", cfg)])


def test_first_score_is_forward_logit(models):
    rng = np.random.default_rng(1)
    for m in models.values():
        x = rng.standard_normal(m.input_shape)
        attr = analyze(m, x, MethodConfig("gradient", selector=1))
        region = (1, 1) if len(m.input_shape) == 1 else (4, 4)
        c = perturbation_curve(m, x, attr, PerturbationConfig(steps=2, region=region))
        assert c.unit == 1
        assert c.scores[0] == forward(m, x)[0][1]
        assert len(c.scores) == 3


def test_selected_unit_is_kept_while_logits_change():
    # after removing x0 the argmax flips to unit 1, but unit 0 stays monitored
    m = build_model([2], [{"kind": "dense", "in_features": 2, "out_features": 2, "weight_ref": "W"}],
                    {"W": [[2.0, 0.0], [0.0, 1.0]]})
    x = np.array([1.0, 1.0])
    c = perturbation_curve(m, x, analyze(m, x, MethodConfig("gradient")), PerturbationConfig(steps=2))
    assert c.unit == 0 and c.scores == [2.0, 0.0, 0.0]


def test_region_tiling():
    masks = region_masks((2, 4, 6), (2, 3))
    assert len(masks) == 4
    assert np.array_equal(sum(m.astype(int) for m in masks), np.ones((2, 4, 6), dtype=int))
    assert masks[1][:, :2, 3:].all() and masks[1].sum() == 12
    with pytest.raises(ConfigError, match="tile"):
        region_masks((1, 5, 5), (2, 2))
    with pytest.raises(ConfigError, match="tile"):
        region_masks((7,), (2, 1))
    with pytest.raises(ShapeError):
        region_masks((2, 3), (1, 1))


def test_rank_by_region_sum():
    attr = np.array([[[1.0, 1.0, 5.0, -4.0], [1.0, 1.0, 0.0, 0.0]]])
    masks = region_masks(attr.shape, (2, 2))
    # region sums are 4 and 1
    assert rank_regions(attr, masks) == [0, 1]


@pytest.mark.parametrize("steps", [0, 17])
def test_steps_out_of_range(steps, models):
    m = models["cnn"]
    x = np.zeros(m.input_shape)
    with pytest.raises(ConfigError, match="steps"):
        perturbation_curve(m, x, np.zeros(m.input_shape), PerturbationConfig(steps=steps, region=(2, 2)))


def test_attribution_shape_mismatch():
    with pytest.raises(ShapeError):
        perturbation_curve(LIN3, ONES, np.zeros(4), PerturbationConfig(steps=1))


def test_per_channel_value():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((2, 2, 2, 2))
    m = build_model([2, 2, 2], [{"kind": "conv2d", "in_channels": 2, "out_channels": 2, "kernel_h": 2,
                                 "kernel_w": 2, "weight_ref": "w"}, {"kind": "flatten"}], {"w": w})
    x = rng.standard_normal((2, 2, 2))
    c = perturbation_curve(m, x, np.ones_like(x), PerturbationConfig(steps=1, region=(2, 2), value=[0.5, -1.0]))
    filled = np.stack([np.full((2, 2), 0.5), np.full((2, 2), -1.0)])
    assert c.scores[1] == forward(m, filled)[0][c.unit]
    with pytest.raises(ConfigError):
        perturbation_curve(m, x, np.ones_like(x), PerturbationConfig(steps=1, region=(2, 2), value=[0.5]))


def test_config_validation():
    with pytest.raises(ConfigError):
        PerturbationConfig(steps=1, order="ascending")
    with pytest.raises(ConfigError):
        PerturbationConfig(steps=1, region=(0, 1))
    assert PerturbationConfig(steps=1, region=2).region == (2, 2)


def test_curve_record_format():
    cfg = PerturbationConfig(steps=3)
    c = perturbation_curve(LIN3, ONES, np.array([3.0, 1.0, 2.0]), cfg)
    doc = json.loads(curve_json([c.to_record("input_t_gradient", cfg)]).decode("utf-8"))
    rec = doc[0]
    assert rec["scores"] == [6.0, 3.0, 1.0, 0.0]
    assert rec["method"] == "input_t_gradient"
    assert rec["config"]["clipping"] == "none"
    assert set(rec) >= {"scores", "aopc", "method", "config"}


def test_linear_zoo_gradient_input_beats_random():
    m = zoo.linear_model()
    x = np.random.default_rng(3).standard_normal(m.input_shape)
    attr = analyze(m, x, MethodConfig("input_t_gradient"))
    k = 3
    ours = perturbation_curve(m, x, attr, PerturbationConfig(steps=k)).aopc
    for seed in range(20):
        assert ours >= perturbation_curve(m, x, attr, PerturbationConfig(steps=k, order="random", seed=seed)).aopc
