import numpy as np
import pytest

from services.graphon_service import KernelMatrix, step_kernel
from services.interactions_service import (
    DiscreteMeasure,
    LinearLowRes,
    LocalInteraction,
    LowResInteraction,
    PowerLowRes,
    TwoBodyInteraction,
    ZeroInteraction,
    custom_kernel,
    empirical_measure,
    eval_interaction,
    make_kernel,
)
from utils.errors import ConfigError
from utils.grids import PositionAtlas, grid_layout, uniform_atlas

IDENTITY = np.eye(2)


def test_two_body_on_atoms():
    spec = TwoBodyInteraction(make_kernel("constant"), IDENTITY)
    atlas = uniform_atlas(4)
    m = DiscreteMeasure([0.2, 0.8], [0, 1], [0.5, 0.5])
    assert eval_interaction(spec, 0, m, 0.3, atlas) == pytest.approx(0.5)
    assert eval_interaction(spec, 1, m, 0.3, atlas) == pytest.approx(0.5)


def test_two_body_kernel_weights_positions():
    spec = TwoBodyInteraction(make_kernel("average"), IDENTITY)
    atlas = uniform_atlas(4)
    m = DiscreteMeasure([0.2, 0.8], [0, 1], [0.5, 0.5])
    # 0.5 * (0.4 + 0.2) / 2 for the atom in state 0
    assert eval_interaction(spec, 0, m, 0.4, atlas) == pytest.approx(0.15)
    assert eval_interaction(spec, 1, m, 0.4, atlas) == pytest.approx(0.3)


def test_cell_densities_match_riemann_sum():
    spec = TwoBodyInteraction(make_kernel("product", scale=2.0), np.array([[1.0, 2.0], [0.0, 1.0]]))
    atlas = uniform_atlas(5)
    densities = np.column_stack([atlas.cells, 1 - atlas.cells])
    expected = sum(
        atlas.weights[k] * 2.0 * 0.3 * atlas.cells[k] * (densities[k, 0] + 2.0 * densities[k, 1])
        for k in range(atlas.size)
    )
    assert eval_interaction(spec, 0, densities, 0.3, atlas) == pytest.approx(expected)


def test_local_interaction_reads_own_cell():
    spec = LocalInteraction(np.array([[1.0, 0.5], [0.0, 2.0]]))
    atlas = uniform_atlas(3)
    densities = np.array([[0.2, 0.8], [0.6, 0.4], [1.0, 0.0]])
    np.testing.assert_allclose(spec.cell_field(densities, atlas), densities @ spec.f.T)


def test_empirical_measure_excludes_player():
    layout = grid_layout(4)
    m = empirical_measure(layout, [0, 1, 1, 0], 2)
    np.testing.assert_allclose(m.positions, [0.25, 0.5, 1.0])
    np.testing.assert_array_equal(m.states, [0, 1, 0])
    np.testing.assert_allclose(m.masses, 1 / 3)
    with pytest.raises(ConfigError):
        empirical_measure(grid_layout(1), [0], 0)


@pytest.mark.parametrize(
    "spec",
    [
        TwoBodyInteraction(make_kernel("gaussian", bandwidth=0.3), np.array([[1.0, -0.5], [0.2, 1.0]])),
        LocalInteraction(np.array([[1.0, 0.0], [0.3, 1.0]])),
        LowResInteraction(make_kernel("min"), PowerLowRes(2.0, 1.5), make_kernel("gaussian", bandwidth=0.5)),
        LowResInteraction(make_kernel("average"), LinearLowRes(np.array([[0.0, 1.0], [1.0, 0.0]])), make_kernel("constant")),
    ],
)
def test_player_values_match_empirical_measures(spec):
    layout = grid_layout(6)
    atlas = uniform_atlas(6)
    rng = np.random.default_rng(4)
    states = rng.integers(0, 2, size=(3, 6))
    table = spec.player_values(layout.positions, states, 2, atlas)
    for r in range(3):
        for i in range(6):
            m = empirical_measure(layout, states[r], i)
            expected = spec.measure_values(m, layout.positions[i : i + 1], 2, atlas)[0]
            np.testing.assert_allclose(table[r, i], expected, atol=1e-12)


def test_mixed_values_with_point_masses_match_player_values():
    spec = TwoBodyInteraction(make_kernel("average"), IDENTITY)
    layout = grid_layout(5)
    atlas = uniform_atlas(5)
    states = np.array([[0, 1, 1, 0, 1]])
    np.testing.assert_allclose(
        spec.mixed_values(layout.positions, np.eye(2)[states[0]], atlas),
        spec.player_values(layout.positions, states, 2, atlas)[0],
    )


def test_zero_interaction_is_zero_everywhere():
    spec = ZeroInteraction()
    atlas = uniform_atlas(3)
    assert spec.cell_field(np.full((4, 3, 2), 0.5), atlas).shape == (4, 3, 2)
    assert not spec.player_values(np.array([0.5, 1.0]), np.array([[0, 1]]), 2, atlas).any()


def test_validation_errors():
    atlas = uniform_atlas(4)
    with pytest.raises(ConfigError):
        TwoBodyInteraction(make_kernel("constant"), np.ones((2, 3)))
    with pytest.raises(ConfigError):
        TwoBodyInteraction(make_kernel("constant"), IDENTITY).validate(atlas, 3)
    with pytest.raises(ConfigError):
        TwoBodyInteraction(custom_kernel(lambda u, v: u + v, bound=1.0), IDENTITY).validate(atlas, 2)
    narrow = LowResInteraction(make_kernel("constant"), PowerLowRes(), make_kernel("indicator_band", width=0.01))
    with pytest.raises(ConfigError):
        narrow.validate(atlas, 2)
    with pytest.raises(ConfigError):
        make_kernel("cosine")


def test_kernel_configs():
    assert make_kernel("gaussian", bandwidth=0.2).to_config() == {"name": "gaussian", "bandwidth": 0.2, "scale": 1.0}
    spec = TwoBodyInteraction(make_kernel("average"), IDENTITY)
    assert spec.to_config() == {"kind": "two_body", "kernel": {"name": "average", "scale": 1.0}, "f": IDENTITY.tolist()}
    with pytest.raises(ConfigError):
        step_kernel(KernelMatrix(np.eye(2))).to_config()


def test_measure_validation():
    with pytest.raises(ConfigError):
        DiscreteMeasure([0.1, 0.2], [0, 1], [0.5, 0.6])
    atlas = PositionAtlas(cells=[0.5], weights=[1.0])
    with pytest.raises(ConfigError):
        eval_interaction(TwoBodyInteraction(make_kernel("constant"), IDENTITY), 0, np.ones((2, 2)) / 2, 0.5, atlas)


def test_low_res_state_count_comes_from_its_matrix():
    spec = LowResInteraction(make_kernel("constant"), LinearLowRes(np.eye(3)), make_kernel("constant"))
    atlas = uniform_atlas(4)
    m = DiscreteMeasure([0.2, 0.8], [0, 1], [0.25, 0.75])
    assert eval_interaction(spec, 0, m, 0.5, atlas) == pytest.approx(0.25)
    assert eval_interaction(spec, 1, m, 0.5, atlas) == pytest.approx(0.75)
    assert eval_interaction(spec, 2, m, 0.5, atlas) == pytest.approx(0.0)


def test_state_count_must_be_given_for_nonlinear_f():
    spec = LowResInteraction(make_kernel("constant"), PowerLowRes(), make_kernel("constant"))
    m = DiscreteMeasure([0.2, 0.8], [0, 1], [0.5, 0.5])
    with pytest.raises(ConfigError, match="pass d"):
        eval_interaction(spec, 0, m, 0.5, uniform_atlas(4))
    assert np.isfinite(eval_interaction(spec, 0, m, 0.5, uniform_atlas(4), d=3))


@pytest.mark.parametrize(
    "spec",
    [
        TwoBodyInteraction(make_kernel("constant"), np.ones((2, 2))),
        LocalInteraction(IDENTITY),
        LowResInteraction(make_kernel("constant"), PowerLowRes(), make_kernel("constant")),
    ],
)
def test_single_player_has_no_opponents(spec):
    layout = grid_layout(1)
    atlas = uniform_atlas(2)
    with pytest.raises(ConfigError, match="N >= 2"):
        spec.player_values(layout.positions, np.array([[0]]), 2, atlas)
    if not isinstance(spec, LowResInteraction):
        with pytest.raises(ConfigError, match="N >= 2"):
            spec.mixed_values(layout.positions, np.array([[1.0, 0.0]]), atlas)


def test_zero_interaction_allows_a_single_player():
    spec = ZeroInteraction()
    assert not spec.player_values(np.array([1.0]), np.array([[0]]), 2, uniform_atlas(2)).any()
