import warnings

import numpy as np
import pytest

import iplab as lab
from iplab import FitError, IpCurve, NoiseSpec, ObjectiveMode, ParamGrid, SimConfig

CONFIG = SimConfig(duration=20.0, dynamics="linear")
PROTOCOL = SimConfig(dynamics="linear")
GENERATOR = (1e6, (0.2, 0.1, 0.3), (1.0, 1.0, 1.0))


def flat_curve(height, reference_height=0.85):
    centers = lab.band_spec_default().centers
    return IpCurve(centers, np.full(38, height), reference_height, np.ones(38))


def cell_of(params):
    return (params["alpha"], tuple(params["beta"]), tuple(params["sigma"]))


def simulated_target(model, alpha, beta, sigma, n_trials=3, seed=11, config=CONFIG):
    noise = NoiseSpec(sigma, base_seed=seed)
    trials = lab.run_batch(model, lab.LqrSpec(alpha, beta), noise, config, n_trials, n_jobs=1, silent=True)
    spec = lab.band_spec_default()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        curves = [lab.ip_curve(s.cop_x, s.grf, spec, 0.85) for s in trials]
    return lab.mean_curve(curves)


def test_objective_identical_curves():
    curve = flat_curve(0.9)

    assert lab.objective(curve, curve) == 0
    assert lab.objective(curve, curve, mode="curve-error") == 0


def test_objective_flat_curves():
    sim, target = flat_curve(0.8), flat_curve(1.0)

    assert lab.objective(sim, target) == pytest.approx(2.375, rel=1e-12)
    assert lab.objective(sim, target, ObjectiveMode.CURVE_ERROR) == pytest.approx(38 * (0.2 / 0.85) ** 2, rel=1e-12)
    assert lab.objective(sim, target, ObjectiveMode.CURVE_ERROR) == pytest.approx(2.104, abs=1e-3)
    assert lab.objective(sim, target, return_count=True)[1] == 38


def test_objective_nonnegative():
    rng = np.random.default_rng(0)
    target = flat_curve(0.9)
    for _ in range(20):
        heights = rng.uniform(0.3, 1.5, 38)
        sim = IpCurve(target.band_centers, heights, 0.85, np.ones(38))
        assert lab.objective(sim, target) >= 0
        assert lab.objective(sim, target, "curve-error") >= 0


def test_objective_incompatible_curves():
    target = flat_curve(0.9)
    shifted = IpCurve(target.band_centers + 0.1, target.ip_height, 0.85, np.ones(38))

    with pytest.raises(ValueError):
        lab.objective(shifted, target)
    with pytest.raises(ValueError):
        lab.objective(flat_curve(0.9, reference_height=1.0), target)

    reliable = np.zeros(38, dtype=bool)
    reliable[:5] = True
    sparse = IpCurve(target.band_centers, target.ip_height, 0.85, np.ones(38), reliable)
    with pytest.raises(ValueError, match="mutually reliable"):
        lab.objective(sparse, target)


def test_grid_cells_default():
    grid = ParamGrid()
    stance = lab.grid_cells(grid, lab.Gait.STANCE)
    kneeling = lab.grid_cells(grid, lab.Gait.KNEELING)

    assert len(stance) == 3 * 4 * 27
    assert len(kneeling) == 3 * 2 * 9
    assert stance[0] == (10.0, (0.2, 0.1, 0.3), (1.0, 1.0, 1.0))
    assert kneeling[0] == (10.0, (0.1, 0.3), (1.0, 1.0))


def test_grid_validation():
    with pytest.raises(ValueError):
        ParamGrid(alpha_values=())
    with pytest.raises(ValueError):
        ParamGrid(beta_values=((0.2,), (-0.1,), (0.3,)))
    assert ParamGrid.from_dict(ParamGrid().to_dict()).to_dict() == ParamGrid().to_dict()


def test_grid_search_rejects_sparse_target():
    reliable = np.zeros(38, dtype=bool)
    reliable[:5] = True
    target = IpCurve(lab.band_spec_default().centers, np.full(38, 0.9), 0.85, np.ones(38), reliable)

    with pytest.raises(ValueError):
        lab.grid_search(lab.tip_default(), ParamGrid(), target, CONFIG, 1, 0, n_jobs=1, silent=True)


@pytest.mark.slow
def test_grid_search_reproduces_common_stream_target():
    # Target and search share the root seed, so the generating cell replays it.
    model = lab.tip_default()
    target = simulated_target(model, 1e6, (0.2, 0.1, 0.3), (1.0, 1.0, 1.0))
    grid = ParamGrid((1e6,), ((0.2,), (0.1,), (0.3,)), ((1.0,), (1.0,), (1.0,)))

    result = lab.grid_search(model, grid, target, CONFIG, 3, 11, n_jobs=1, silent=True)

    assert result.best_params == {"alpha": 1e6, "beta": [0.2, 0.1, 0.3], "sigma": [1.0, 1.0, 1.0]}
    assert result.best_objective == 0
    assert len(result.cells) == 1


def test_equivalent_cells():
    model = lab.tip_default()
    grid = ParamGrid((1e1, 1e6, 1e10), ((0.2,), (0.1,), (0.3, 33.3)), ((1.0, 0.5), (1.0, 0.5), (1.0, 0.5)))
    cells = lab.grid_cells(grid, lab.Gait.STANCE)

    found = lab.equivalent_cells(model, cells, GENERATOR)

    assert (1e10, (0.2, 0.1, 0.3), (1.0, 1.0, 1.0)) in found
    assert (1e1, (0.2, 0.1, 0.3), (1.0, 1.0, 1.0)) in found
    assert (1e6, (0.2, 0.1, 0.3), (0.5, 0.5, 0.5)) in found
    assert (1e6, (0.2, 0.1, 0.3), (1.0, 0.5, 1.0)) not in found
    assert all(beta == (0.2, 0.1, 0.3) for _, beta, _ in found)
    assert GENERATOR not in found
    assert len(found) == 3 * 2 - 1

    strict = lab.equivalent_cells(model, cells, GENERATOR, proportional_sigma=False)
    assert strict == [(1e1, (0.2, 0.1, 0.3), (1.0, 1.0, 1.0)), (1e10, (0.2, 0.1, 0.3), (1.0, 1.0, 1.0))]


@pytest.mark.slow
def test_grid_search_flags_indistinguishable_cells():
    model = lab.tip_default()
    target = simulated_target(model, *GENERATOR, seed=1000)
    grid = ParamGrid((1e6, 1e10), ((0.2,), (0.1,), (0.3,)), ((1.0, 0.5), (1.0, 0.5), (1.0, 0.5)))
    calls = []

    result = lab.grid_search(
        model, grid, target, CONFIG, 3, 1, n_jobs=1, silent=True, progress_hook=lambda i, n: calls.append((i, n))
    )

    assert len(result.cells) == 16
    assert calls[0] == (0, 16) and calls[-1] == (16, 16)
    alpha, beta, sigma = cell_of(result.best_params)
    assert (1e10 if alpha == 1e6 else 1e6, beta, sigma) in result.ties

    # Under linear dynamics halving every sigma leaves the IP heights unchanged.
    by_cell = {(c.alpha, c.beta, c.sigma): c.objective for c in result.cells}
    for a in (1e6, 1e10):
        assert by_cell[(a, beta, (1.0, 1.0, 1.0))] == by_cell[(a, beta, (0.5, 0.5, 0.5))]


@pytest.mark.slow
def test_grid_search_recovers_generator_from_independent_streams():
    model = lab.tip_default()
    grid = ParamGrid((1e6, 1e10), ((0.2,), (0.1,), (0.3, 33.3)), ((1.0, 0.3), (1.0,), (1.0,)))
    recovered = 0

    for rep in range(10):
        target = simulated_target(model, *GENERATOR, n_trials=30, seed=1000 + rep, config=PROTOCOL)
        result = lab.grid_search(model, grid, target, PROTOCOL, 30, rep, silent=True)
        recovered += GENERATOR in [cell_of(result.best_params), *result.ties]

    assert recovered >= 9


@pytest.mark.slow
@pytest.mark.parametrize("mode", ["slope-error", "curve-error"])
def test_objective_grows_with_hip_weight_distance(mode):
    model = lab.tip_default()
    target = simulated_target(model, *GENERATOR, n_trials=30, seed=500, config=PROTOCOL)
    grid = ParamGrid((1e6,), ((0.2,), (0.1,), (0.3, 1.5, 5.0)), ((1.0,), (1.0,), (1.0,)))

    result = lab.grid_search(model, grid, target, PROTOCOL, 30, 5500, mode=mode, silent=True)

    values = [c.objective for c in result.cells]
    assert [c.beta[2] for c in result.cells] == [0.3, 1.5, 5.0]
    assert values == sorted(values)
    assert cell_of(result.best_params) == GENERATOR


@pytest.mark.slow
def test_grid_search_is_deterministic():
    model = lab.tip_default()
    target = simulated_target(model, 1e6, (0.2, 0.1, 0.3), (1.0, 1.0, 1.0), seed=5)
    grid = ParamGrid((1e6, 1e10), ((0.2,), (0.1,), (0.3,)), ((1.0,), (1.0,), (1.0,)))

    first = lab.grid_search(model, grid, target, CONFIG, 2, 21, n_jobs=1, silent=True)
    second = lab.grid_search(model, grid, target, CONFIG, 2, 21, n_jobs=2, silent=True)

    assert [c.objective for c in first.cells] == [c.objective for c in second.cells]
    assert first.to_dict() == second.to_dict()


def test_grid_search_all_invalid(monkeypatch):
    def refuse(plant, spec):
        raise lab.SynthesisError("refused")

    monkeypatch.setattr(lab.fit, "lqr_gain", refuse)
    grid = ParamGrid((1e6,), ((0.2,), (0.1,), (0.3,)), ((1.0,), (1.0,), (1.0,)))

    with pytest.raises(FitError):
        lab.grid_search(lab.tip_default(), grid, flat_curve(0.9), CONFIG, 1, 0, n_jobs=1, silent=True)
