import numpy as np
import pytest

from nnattrib.analyzers import Attribution
from nnattrib.errors import ShapeError
from nnattrib.heatmap import HeatmapSpec, heatmap_rgb, render_heatmap

GOLDEN = b"P6\n2 2\n255\n" + bytes([0, 0, 255, 255, 255, 255, 255, 255, 255, 255, 0, 0])


def test_golden_bytes():
    assert render_heatmap(np.array([[-1.0, 0.0], [0.0, 1.0]])) == GOLDEN


def test_colormap_endpoints():
    rgb = heatmap_rgb(np.array([[-2.0, 0.0, 2.0, 1.0]]))
    assert rgb[0, 0].tolist() == [0, 0, 255]
    assert rgb[0, 1].tolist() == [255, 255, 255]
    assert rgb[0, 2].tolist() == [255, 0, 0]
    assert rgb[0, 3].tolist() == [255, 128, 128]


def test_all_zero_is_white():
    out = render_heatmap(np.zeros((3, 4)))
    assert out == b"P6\n4 3\n255\n" + bytes([255] * 36)


def test_normalization_is_scale_free():
    a = np.random.default_rng(0).standard_normal((5, 6))
    assert render_heatmap(a) == render_heatmap(7.5 * a)


def test_channels_are_summed():
    a = np.random.default_rng(1).standard_normal((3, 4, 5))
    assert render_heatmap(a) == render_heatmap(a.sum(axis=0))


def test_flat_attribution_is_one_row():
    out = render_heatmap(np.array([1.0, -1.0, 0.0]))
    assert out.startswith(b"P6\n3 1\n255\n")
    assert len(out) == len(b"P6\n3 1\n255\n") + 9


def test_accepts_attribution_object():
    a = Attribution(np.array([[-1.0, 0.0], [0.0, 1.0]]), "gradient", 0)
    assert render_heatmap(a) == GOLDEN


def test_bad_rank_and_spec():
    with pytest.raises(ShapeError):
        heatmap_rgb(np.zeros((1, 1, 1, 1)))
    with pytest.raises(ValueError):
        render_heatmap(np.zeros((2, 2)), HeatmapSpec(colormap="viridis"))
