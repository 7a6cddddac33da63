import enum
import itertools
import timeit
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .control import LqrSpec, SynthesisError, linearize, lqr_gain, select_joints
from .ipcurve import IpCurveError, ip_curve, mean_curve
from .sim import NoiseSpec, run_trial, worker_count
from .spectral import BandSpec


class FitError(RuntimeError):
    """No cell of the parameter grid produced a valid simulation."""


class ObjectiveMode(str, enum.Enum):
    SLOPE_ERROR = "slope-error"
    CURVE_ERROR = "curve-error"


# -----------------------------------------------------------------------------
# Domain records
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamGrid:
    """Candidate controller parameters.

    Beta and sigma hold one candidate list per joint in stance order (ankle,
    knee, hip); kneeling grids drop the ankle list. The default grid spans the
    values of the controller presets. Sigma candidates are listed from
    the largest down, which decides ties between cells whose sigma vectors are
    proportional.
    """

    alpha_values: tuple = (1e1, 1e6, 1e10)
    beta_values: tuple = ((0.2, 0.3), (0.1,), (0.3, 33.3))
    sigma_values: tuple = ((1.0, 0.7, 0.3), (1.0, 0.7, 0.3), (1.0, 0.7, 0.3))

    def __post_init__(self):
        object.__setattr__(self, "alpha_values", tuple(float(a) for a in self.alpha_values))
        object.__setattr__(self, "beta_values", tuple(tuple(float(b) for b in row) for row in self.beta_values))
        object.__setattr__(self, "sigma_values", tuple(tuple(float(s) for s in row) for row in self.sigma_values))
        if not self.alpha_values or any(not a > 0 for a in self.alpha_values):
            raise ValueError(f"alpha candidates must be positive and non-empty, got {self.alpha_values}")
        for name in ("beta_values", "sigma_values"):
            rows = getattr(self, name)
            if len(rows) not in (2, 3):
                raise ValueError(f"{name} needs one candidate list per joint, got {len(rows)} lists")
            if any(not row for row in rows) or any(not v > 0 for row in rows for v in row):
                raise ValueError(f"{name} candidates must be positive and non-empty, got {rows}")

    def to_dict(self):
        return {
            "alpha_values": list(self.alpha_values),
            "beta_values": [list(row) for row in self.beta_values],
            "sigma_values": [list(row) for row in self.sigma_values],
        }

    @classmethod
    def from_dict(cls, doc):
        defaults = cls()
        try:
            return cls(
                doc.get("alpha_values", defaults.alpha_values),
                doc.get("beta_values", defaults.beta_values),
                doc.get("sigma_values", defaults.sigma_values),
            )
        except (TypeError, AttributeError) as err:
            raise ValueError(f"malformed parameter grid: {err}") from None


@dataclass(frozen=True)
class FitCell:
    alpha: float
    beta: tuple
    sigma: tuple
    objective: float = float("nan")
    curve_error: float = float("nan")
    slope_error: float = float("nan")
    n_bands: int = 0
    n_failed_trials: int = 0
    valid: bool = True
    reason: str = ""

    @property
    def params(self):
        return {"alpha": self.alpha, "beta": list(self.beta), "sigma": list(self.sigma)}

    def to_dict(self):
        def clean(v):
            return None if not np.isfinite(v) else float(v)

        return {
            **self.params,
            "objective": clean(self.objective),
            "slope_error": clean(self.slope_error),
            "curve_error": clean(self.curve_error),
            "n_bands": self.n_bands,
            "n_failed_trials": self.n_failed_trials,
            "valid": self.valid,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class FitResult:
    best_params: dict
    best_objective: float
    cells: tuple
    target_id: str = ""
    mode: str = ObjectiveMode.SLOPE_ERROR.value
    ties: tuple = field(default_factory=tuple)

    def to_dict(self):
        return {
            "target_id": self.target_id,
            "mode": self.mode,
            "best_params": self.best_params,
            "best_objective": self.best_objective,
            "ties": [list(t) for t in self.ties],
            "cells": [c.to_dict() for c in self.cells],
        }


# -----------------------------------------------------------------------------
# objective
# -----------------------------------------------------------------------------


def objective(sim_curve, target_curve, mode=ObjectiveMode.SLOPE_ERROR, min_bands=10, return_count=False):
    """Mismatch between a simulated and a target IP curve.

    Parameters
    ----------
    sim_curve : IpCurve
        Simulated curve.
    target_curve : IpCurve
        Target curve on the same band grid and reference height.
    mode : ObjectiveMode or str
        "slope-error": sum over bands of (1/h_sim - 1/h_target)^2 (1/m^2), the
        squared error of the q-per-COP band gain. "curve-error": sum of
        ((h_sim - h_target) / h_ref)^2. Defaults to "slope-error".
    min_bands : int
        Minimum number of bands reliable in both curves. Defaults to 10.
    return_count : bool
        If True, also return the number of bands used. Defaults to False.

    Returns
    -------
    value : float
        The objective, or (value, n_bands) when `return_count` is set.
    """

    mode = ObjectiveMode(mode)
    if sim_curve.band_centers.shape != target_curve.band_centers.shape or not np.allclose(
        sim_curve.band_centers, target_curve.band_centers
    ):
        raise ValueError("simulated and target curves use different band grids")
    if not np.isclose(sim_curve.reference_height, target_curve.reference_height):
        raise ValueError(
            f"reference heights differ: {sim_curve.reference_height} vs {target_curve.reference_height}"
        )

    both = sim_curve.reliable & target_curve.reliable
    n_bands = int(np.count_nonzero(both))
    if n_bands < min_bands:
        raise ValueError(f"only {n_bands} mutually reliable bands, at least {min_bands} are needed")

    h_sim = sim_curve.ip_height[both]
    h_target = target_curve.ip_height[both]
    if mode is ObjectiveMode.SLOPE_ERROR:
        value = float(np.sum((1.0 / h_sim - 1.0 / h_target) ** 2))
    else:
        value = float(np.sum(((h_sim - h_target) / target_curve.reference_height) ** 2))
    return (value, n_bands) if return_count else value


# -----------------------------------------------------------------------------
# grid_search
# -----------------------------------------------------------------------------


def grid_cells(grid, gait):
    """Cells of the grid as (alpha, beta, sigma) tuples, in a fixed order.

    Alpha varies slowest, then the beta entries, then the sigma entries.
    """

    betas = select_joints(grid.beta_values, gait)
    sigmas = select_joints(grid.sigma_values, gait)
    return [
        (alpha, tuple(beta), tuple(sigma))
        for alpha, beta, sigma in itertools.product(
            grid.alpha_values, itertools.product(*betas), itertools.product(*sigmas)
        )
    ]


def equivalent_cells(model, cells, reference, proportional_sigma=True, rtol=1e-2):
    """Cells indistinguishable from `reference` by their IP curves.

    Two cells are equivalent when their LQR gains agree to `rtol` and their
    sigma vectors are equal, or only proportional when `proportional_sigma` is
    set (linear dynamics, where IP heights do not depend on the noise scale).
    With Q = I the gains barely move once alpha exceeds about 10, so cells that
    differ only in such alphas are equivalent.

    Parameters
    ----------
    model : PendulumModel
        The pendulum.
    cells : sequence of tuple
        Candidate (alpha, beta, sigma) cells.
    reference : tuple
        The (alpha, beta, sigma) cell to compare against.
    proportional_sigma : bool
        Accept sigma vectors equal up to a positive factor. Defaults to True.
    rtol : float
        Relative gain tolerance, against the largest gain entry. Defaults to 1e-2.

    Returns
    -------
    cells : list of tuple
        The equivalent cells in input order, `reference` excluded.
    """

    plant = linearize(model)
    gains = {}

    def gain_of(alpha, beta):
        key = (alpha, tuple(beta))
        if key not in gains:
            try:
                gains[key] = lqr_gain(plant, LqrSpec(alpha, beta)).gain
            except SynthesisError:
                gains[key] = None
        return gains[key]

    def direction(sigma):
        sigma = np.asarray(sigma, dtype=float)
        return sigma / sigma.max() if proportional_sigma else sigma

    ref_gain = gain_of(reference[0], reference[1])
    if ref_gain is None:
        return []
    ref_sigma = direction(reference[2])
    scale = np.abs(ref_gain).max()

    out = []
    for cell in cells:
        if tuple(cell) == tuple(reference) or len(cell[2]) != ref_sigma.size:
            continue
        if not np.allclose(direction(cell[2]), ref_sigma, rtol=1e-9, atol=0.0):
            continue
        gain = gain_of(cell[0], cell[1])
        if gain is not None and np.allclose(gain, ref_gain, rtol=rtol, atol=rtol * scale):
            out.append(tuple(cell))
    return out


def _evaluate_cell(model, cell, cell_index, target, bands, sim_config, n_trials, base_seed, torque_scale, mode):
    alpha, beta, sigma = cell
    try:
        gain = lqr_gain(linearize(model), LqrSpec(alpha, beta))
    except SynthesisError as err:
        return FitCell(alpha, beta, sigma, valid=False, reason=f"synthesis: {err}")

    noise = NoiseSpec(sigma, base_seed=base_seed, torque_scale=torque_scale)
    curves = []
    n_failed = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for trial in range(n_trials):
            series = run_trial(model, gain, noise, sim_config, trial, cell_index)
            if series.failed or series.n_samples < 2:
                n_failed += 1
                continue
            try:
                curves.append(ip_curve(series.cop_x, series.grf, bands, target.reference_height))
            except (IpCurveError, ValueError):
                n_failed += 1

    if not curves:
        return FitCell(alpha, beta, sigma, n_failed_trials=n_failed, valid=False, reason="all trials failed")

    sim_curve = mean_curve(curves)
    try:
        slope_error, n_bands = objective(sim_curve, target, ObjectiveMode.SLOPE_ERROR, return_count=True)
        curve_error = objective(sim_curve, target, ObjectiveMode.CURVE_ERROR)
    except ValueError as err:
        return FitCell(alpha, beta, sigma, n_failed_trials=n_failed, valid=False, reason=str(err))

    value = slope_error if mode is ObjectiveMode.SLOPE_ERROR else curve_error
    return FitCell(
        alpha,
        beta,
        sigma,
        objective=value,
        curve_error=curve_error,
        slope_error=slope_error,
        n_bands=n_bands,
        n_failed_trials=n_failed,
    )


def grid_search(
    model,
    grid,
    target,
    sim_config,
    n_trials,
    base_seed,
    mode=ObjectiveMode.SLOPE_ERROR,
    torque_scale=1.0,
    common_random_numbers=True,
    band_width=0.2,
    target_id="",
    n_jobs=None,
    silent=False,
    progress_hook=None,
):
    """Grid search of the controller parameters that best reproduce a target
    IP curve.

    Every cell synthesizes its LQR gain, runs `n_trials` trials, averages the
    per-trial IP curves band-wise and scores the mean curve against `target`.

    Parameters
    ----------
    model : PendulumModel
        The pendulum.
    grid : ParamGrid
        Candidate alpha, beta and sigma values.
    target : IpCurve
        Target curve; its band centres and reference height are reused for the
        simulated curves.
    sim_config : SimConfig
        Trial protocol. `dynamics="linear"` makes large grids affordable.
    n_trials : int
        Trials per cell.
    base_seed : int
        Root seed of every trial stream.
    mode : ObjectiveMode or str
        Objective minimised. Defaults to "slope-error".
    torque_scale : float
        Base torque standard deviation (N m) multiplied by sigma. Defaults to 1.
    common_random_numbers : bool
        If True, trial i of every cell reuses the same noise stream. Otherwise
        each cell spawns its own streams. Defaults to True.
    band_width : float
        Width of the simulated curve bands (Hz). Defaults to 0.2.
    target_id : str
        Label echoed in the result. Defaults to "".
    n_jobs : int, optional
        joblib workers over cells. Defaults to IPLAB_THREADS or all cores.
    silent : bool
        If False, elapsed time is printed. Defaults to False.
    progress_hook : callable, optional
        A hook that take two int, the first is the number of evaluated cells
        and the second is the number of cells. Defaults to None.

    Returns
    -------
    result : FitResult
        The argmin cell and the whole landscape. The first minimum in grid
        order is reported as best. `ties` lists the other cells whose objective
        equals the minimum to 1e-9 relative, followed by the cells that
        :func:`equivalent_cells` finds indistinguishable from the best one.
        Cells that differ only in alpha within the expensive-control regime
        are such cells. Under linear dynamics so are cells whose sigma vectors
        are proportional, since IP heights do not change when every sigma is
        scaled together. Only the largest-first sigma ordering then separates
        them, and the grid cannot identify either difference from IP curves.
    """

    mode = ObjectiveMode(mode)
    if int(n_trials) != n_trials or n_trials < 1:
        raise ValueError(f"n_trials must be an integer >= 1, got {n_trials}")
    if target.n_reliable < 10:
        raise ValueError(f"target curve has {target.n_reliable} reliable bands, at least 10 are needed")

    t = timeit.default_timer()
    bands = BandSpec(target.band_centers, band_width, sim_config.output_rate)
    cells = grid_cells(grid, model.gait)
    n_cells = len(cells)

    if progress_hook is not None:
        progress_hook(0, n_cells)
    jobs = (
        delayed(_evaluate_cell)(
            model,
            cell,
            None if common_random_numbers else index,
            target,
            bands,
            sim_config,
            int(n_trials),
            base_seed,
            torque_scale,
            mode,
        )
        for index, cell in enumerate(cells)
    )
    results = []
    for result in Parallel(n_jobs=worker_count(n_jobs), return_as="generator")(jobs):
        results.append(result)
        if progress_hook is not None:
            progress_hook(len(results), n_cells)

    valid = [c for c in results if c.valid]
    if not valid:
        raise FitError(f"all {n_cells} grid cells are invalid")

    best_value = min(c.objective for c in valid)
    tolerance = 1e-9 * abs(best_value) + 1e-300
    ties = [c for c in valid if c.objective <= best_value + tolerance]
    best = ties[0]
    ties = [(c.alpha, c.beta, c.sigma) for c in ties[1:]]
    linear = sim_config.dynamics == "linear"
    valid_cells = [(c.alpha, c.beta, c.sigma) for c in valid]
    for cell in equivalent_cells(model, valid_cells, (best.alpha, best.beta, best.sigma), proportional_sigma=linear):
        if cell not in ties:
            ties.append(cell)

    if not silent:
        elapsed = timeit.default_timer() - t
        print(" -Evaluated", n_cells, "grid cells,", len(valid), "valid")
        print("   %.2f" % elapsed, "s")

    return FitResult(
        best_params=best.params,
        best_objective=best.objective,
        cells=tuple(results),
        target_id=target_id,
        mode=mode.value,
        ties=tuple(ties),
    )
