import os
import timeit
import warnings
from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import signal as sps

from .control import ExoSpec, exo_gain, exo_torque, linearize, lqr_gain, output_matrices
from .model import (
    GroundReaction,
    JointState,
    _accelerations,
    _chain,
    com_acceleration,
    forward_dynamics,
    ground_reaction,
    mass_center_kinematics,
)

# -----------------------------------------------------------------------------
# Domain records
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Torque disturbance of the simulated controller.

    Parameters
    ----------
    sigma : tuple of float
        Per-joint multipliers of `torque_scale`; the held disturbance on joint i
        has standard deviation sigma[i] * torque_scale (N m).
    base_seed : int
        Root of every random stream of a batch. Defaults to 0.
    torque_scale : float
        Base torque standard deviation (N m). Defaults to 1.0.
    """

    sigma: tuple
    base_seed: int = 0
    torque_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if any(s < 0 for s in self.sigma):
            raise ValueError(f"sigma entries must be non-negative, got {self.sigma}")
        if not self.torque_scale > 0:
            raise ValueError(f"torque_scale must be positive, got {self.torque_scale}")
        object.__setattr__(self, "base_seed", int(self.base_seed))

    @property
    def std(self):
        return np.asarray(self.sigma) * self.torque_scale

    def to_dict(self):
        return {"sigma": list(self.sigma), "base_seed": self.base_seed, "torque_scale": self.torque_scale}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["sigma"]), int(doc.get("base_seed", 0)), float(doc.get("torque_scale", 1.0)))


@dataclass(frozen=True)
class SimConfig:
    """Trial protocol: 50 s at 100 Hz with a 1 kHz RK4 step by default."""

    duration: float = 50.0
    output_rate: float = 100.0
    internal_substeps: int = 10
    initial_state: JointState = None
    exo: ExoSpec = None
    include_exo: bool = False
    dynamics: str = "nonlinear"

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if not self.output_rate > 0:
            raise ValueError(f"output_rate must be positive, got {self.output_rate}")
        if int(self.internal_substeps) != self.internal_substeps or self.internal_substeps < 1:
            raise ValueError(f"internal_substeps must be an integer >= 1, got {self.internal_substeps}")
        if self.dynamics not in ("nonlinear", "linear"):
            raise ValueError(f"dynamics must be 'nonlinear' or 'linear', got '{self.dynamics}'")
        if self.include_exo and self.exo is None:
            raise ValueError("include_exo is set but no exoskeleton spec was given")

    @property
    def n_samples(self):
        return int(round(self.duration * self.output_rate))

    @property
    def step(self):
        return 1.0 / self.output_rate

    def to_dict(self):
        doc = {
            "duration": self.duration,
            "output_rate": self.output_rate,
            "internal_substeps": self.internal_substeps,
            "dynamics": self.dynamics,
            "include_exo": self.include_exo,
        }
        if self.initial_state is not None:
            doc["initial_state"] = self.initial_state.as_vector().tolist()
        if self.exo is not None:
            doc["exo"] = self.exo.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if doc.get("initial_state") is not None:
            doc["initial_state"] = JointState.from_vector(doc["initial_state"])
        if doc.get("exo") is not None:
            doc["exo"] = ExoSpec.from_dict(doc["exo"])
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class TrialSeries:
    """Uniformly sampled channels of one trial.

    Arrays are indexed by sample along the first axis. A failed trial keeps the
    samples recorded before the failure.
    """

    time: np.ndarray
    angles: np.ndarray
    rates: np.ndarray
    torques: np.ndarray
    fx: np.ndarray
    fz: np.ndarray
    cop_x: np.ndarray
    com_accel: np.ndarray
    trial_index: int = 0
    failed: bool = False
    failure_time: float = None

    @property
    def grf(self):
        return GroundReaction(self.fx, self.fz)

    @property
    def n_samples(self):
        return self.time.shape[0]

    @property
    def sample_rate(self):
        return float(np.round(1.0 / np.median(np.diff(self.time)), 6))


# -----------------------------------------------------------------------------
# Seeding and workers
# -----------------------------------------------------------------------------


def trial_seed_sequence(base_seed, trial_index, cell_index=None):
    """Independent stream of one trial, spawned from `base_seed` by index."""
    key = (int(trial_index),) if cell_index is None else (int(cell_index), int(trial_index))
    return np.random.SeedSequence(int(base_seed), spawn_key=key)


def worker_count(n_jobs=None):
    """joblib worker count: `n_jobs` if given, else IPLAB_THREADS, else all cores."""
    if n_jobs is not None:
        return n_jobs
    threads = os.environ.get("IPLAB_THREADS")
    if threads:
        try:
            return max(1, int(threads))
        except ValueError:
            raise ValueError(f"IPLAB_THREADS must be an integer, got '{threads}'") from None
    return -1


# -----------------------------------------------------------------------------
# compute_cop
# -----------------------------------------------------------------------------


def compute_cop(series, model):
    """Centre of pressure from the pin-joint moment balance.

    The pin joint sits on the support surface, so cop_x = tau_pin / F_z with
    tau_pin the ankle (stance) or knee (kneeling) torque. A held lean places the
    COP under the mass centre, on the same side as x_m.

    Parameters
    ----------
    series : TrialSeries
        Trial with torque and GRF channels.
    model : PendulumModel
        The simulated pendulum.

    Returns
    -------
    cop_x : numpy.ndarray
        Anterior-posterior COP (m).
    """

    if series.torques.shape[1] != model.n_joints:
        raise ValueError(f"series has {series.torques.shape[1]} torque channels, model has {model.n_joints} joints")
    fz = np.asarray(series.fz, dtype=float)
    bad = np.flatnonzero(~(fz > 0))
    if bad.size:
        raise ValueError(f"vertical force must be positive, got fz = {fz[bad[0]]} at sample {bad[0]}")
    return series.torques[:, 0] / fz


# -----------------------------------------------------------------------------
# run_trial
# -----------------------------------------------------------------------------


def _diverged(x, n):
    return not np.all(np.isfinite(x)) or np.any(np.abs(x[:n]) > np.pi / 2)


def _integrate_nonlinear(model, gain, config, x0, disturbance):
    n = model.n_joints
    chain = _chain(model)
    g = model.gravity
    K = gain.gain
    knee = model.gait.knee_index
    exo = config.exo if config.include_exo else None
    h = config.step / config.internal_substeps

    def command(x, w):
        tau = w - K @ x
        if exo is not None:
            tau[knee] += exo_torque(exo, JointState(x[:n], x[n:]), model)
        return tau

    def f(x, w):
        return np.concatenate((x[n:], _accelerations(chain, g, x[:n], x[n:], command(x, w))))

    n_samples = disturbance.shape[0]
    states = np.empty((n_samples, 2 * n))
    x = x0.copy()
    for k in range(n_samples):
        if _diverged(x, n):
            return states[:k], k
        states[k] = x
        w = disturbance[k]
        for _ in range(config.internal_substeps):
            k1 = f(x, w)
            k2 = f(x + 0.5 * h * k1, w)
            k3 = f(x + 0.5 * h * k2, w)
            k4 = f(x + h * k3, w)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return states, None


def _record_nonlinear(model, gain, config, states, disturbance):
    n = model.n_joints
    exo = config.exo if config.include_exo else None
    knee = model.gait.knee_index
    n_samples = states.shape[0]
    torques = disturbance[:n_samples] - states @ gain.gain.T
    fx = np.empty(n_samples)
    fz = np.empty(n_samples)
    com_accel = np.empty((n_samples, 2))
    for k in range(n_samples):
        state = JointState(states[k, :n], states[k, n:])
        if exo is not None:
            torques[k, knee] += exo_torque(exo, state, model)
        accelerations = forward_dynamics(model, state, torques[k])[n:]
        grf = ground_reaction(model, state, accelerations)
        fx[k], fz[k] = grf.fx, grf.fz
        com_accel[k] = com_acceleration(model, state, accelerations)
    return torques, fx, fz, com_accel


def _closed_loop_linear(model, gain, config):
    plant = linearize(model)
    A_cl = plant.a_matrix - plant.b_matrix @ gain.gain
    feedback = -gain.gain
    if config.include_exo:
        knee = model.gait.knee_index
        row = exo_gain(config.exo, model)
        A_cl = A_cl + np.outer(plant.b_matrix[:, knee], row)
        feedback = feedback.copy()
        feedback[knee] += row[0]
    return plant, A_cl, feedback


def _run_linear(model, gain, config, x0, disturbance):
    n = model.n_joints
    plant, A_cl, feedback = _closed_loop_linear(model, gain, config)
    dim = 2 * n
    Ad, Bd, _, _, _ = sps.cont2discrete((A_cl, plant.b_matrix, np.eye(dim), np.zeros((dim, n))), config.step, method="zoh")
    n_samples = disturbance.shape[0]
    _, _, states = sps.dlsim((Ad, Bd, np.eye(dim), np.zeros((dim, n)), config.step), disturbance, x0=x0)
    states = np.atleast_2d(states)[:n_samples]

    bad = np.flatnonzero(~np.all(np.isfinite(states), axis=1) | np.any(np.abs(states[:, :n]) > np.pi / 2, axis=1))
    failed_at = int(bad[0]) if bad.size else None
    if failed_at is not None:
        states = states[:failed_at]

    torques = states @ feedback.T + disturbance[: states.shape[0]]
    c_matrix, d1_matrix, _ = output_matrices(model, plant)
    fx = -(states @ c_matrix[0] + torques @ d1_matrix[0])
    fz = np.full(states.shape[0], model.total_mass * model.gravity)
    _, jacobian, _ = mass_center_kinematics(model, JointState.zero(n))
    accelerations = states @ plant.a_matrix[n:].T + torques @ plant.b_matrix[n:].T
    com_accel = np.column_stack((accelerations @ jacobian[0], np.zeros(states.shape[0])))
    return states, failed_at, torques, fx, fz, com_accel


def run_trial(model, gain, noise, config, trial_index, cell_index=None):
    """Simulate one closed-loop trial under held Gaussian torque noise.

    The commanded torque is tau = -K x + w, plus the exoskeleton torque on the
    knee row when `config.include_exo` is set. The disturbance w is drawn once
    per output sample and held over the RK4 substeps of that interval. The
    stream is fixed by (noise.base_seed, cell_index, trial_index).

    Parameters
    ----------
    model : PendulumModel
        The pendulum.
    gain : LqrGain
        State feedback synthesized for this model.
    noise : NoiseSpec
        Disturbance levels and root seed.
    config : SimConfig
        Protocol settings.
    trial_index : int
        Index of the trial inside its batch.
    cell_index : int, optional
        Extra spawn key used when several parameter cells must not share
        streams. Defaults to None.

    Returns
    -------
    series : TrialSeries
        Recorded channels. `failed` is set when the body falls (|theta| >
        pi/2), the state becomes non-finite or F_z drops to zero or below.
    """

    n = model.n_joints
    if gain.gain.shape != (n, 2 * n):
        raise ValueError(f"gain of shape {gain.gain.shape} does not match a {n}-joint model")
    if len(noise.sigma) != n:
        raise ValueError(f"noise has {len(noise.sigma)} sigma entries, model has {n} joints")
    if config.include_exo and config.exo.gait is not model.gait:
        raise ValueError(f"exoskeleton mode '{config.exo.mode.value}' cannot drive a {model.gait.value} model")

    x0 = np.zeros(2 * n) if config.initial_state is None else config.initial_state.as_vector()
    if x0.shape != (2 * n,):
        raise ValueError(f"initial state has {x0.shape[0]} entries, expected {2 * n}")

    rng = np.random.default_rng(trial_seed_sequence(noise.base_seed, trial_index, cell_index))
    disturbance = rng.standard_normal((config.n_samples, n)) * noise.std
    time = np.arange(config.n_samples) * config.step

    if config.dynamics == "linear":
        states, failed_at, torques, fx, fz, com_accel = _run_linear(model, gain, config, x0, disturbance)
    else:
        states, failed_at = _integrate_nonlinear(model, gain, config, x0, disturbance)
        torques, fx, fz, com_accel = _record_nonlinear(model, gain, config, states, disturbance)

    unsupported = np.flatnonzero(~(fz > 0))
    if unsupported.size:
        cut = int(unsupported[0])
        failed_at = cut if failed_at is None else min(failed_at, cut)
        states, torques, fx, fz, com_accel = states[:cut], torques[:cut], fx[:cut], fz[:cut], com_accel[:cut]

    m = states.shape[0]
    series = TrialSeries(
        time=time[:m],
        angles=states[:, :n],
        rates=states[:, n:],
        torques=torques,
        fx=fx,
        fz=fz,
        cop_x=np.zeros(m),
        com_accel=com_accel,
        trial_index=int(trial_index),
        failed=failed_at is not None,
        failure_time=None if failed_at is None else float(failed_at * config.step),
    )
    if m:
        series = replace(series, cop_x=compute_cop(series, model))
    return series


# -----------------------------------------------------------------------------
# run_batch
# -----------------------------------------------------------------------------


def run_batch(
    model,
    spec,
    noise,
    config,
    n_trials,
    cell_index=None,
    n_jobs=None,
    silent=False,
    progress_hook=None,
):
    """Synthesize the LQR gain of `spec` and simulate `n_trials` trials.

    Parameters
    ----------
    model : PendulumModel
        The pendulum.
    spec : LqrSpec
        Controller cost weights.
    noise : NoiseSpec
        Disturbance levels and root seed.
    config : SimConfig
        Protocol settings.
    n_trials : int
        Number of trials. Trial i uses the stream spawned from (base_seed, i).
    cell_index : int, optional
        Extra spawn key, see run_trial. Defaults to None.
    n_jobs : int, optional
        joblib workers. Defaults to IPLAB_THREADS or all cores.
    silent : bool
        If False, elapsed time and failures are printed. Defaults to False.
    progress_hook : callable, optional
        A hook that take two int, the first is the number of finished trials
        and the second is `n_trials`. Defaults to None.

    Returns
    -------
    trials : list of TrialSeries
        Ordered by trial index, independent of the worker schedule.
    """

    if int(n_trials) != n_trials or n_trials < 1:
        raise ValueError(f"n_trials must be an integer >= 1, got {n_trials}")
    n_trials = int(n_trials)

    t = timeit.default_timer()
    gain = lqr_gain(linearize(model), spec)

    if progress_hook is not None:
        progress_hook(0, n_trials)
    jobs = (delayed(run_trial)(model, gain, noise, config, i, cell_index) for i in range(n_trials))
    trials = []
    for series in Parallel(n_jobs=worker_count(n_jobs), return_as="generator")(jobs):
        trials.append(series)
        if progress_hook is not None:
            progress_hook(len(trials), n_trials)

    summary = batch_summary(trials)
    if summary["n_failed"]:
        warnings.warn(
            f"{summary['n_failed']} of {n_trials} trials failed (indices {summary['failed_indices']})",
            stacklevel=2,
        )
    if not silent:
        elapsed = timeit.default_timer() - t
        print(" -Simulated", n_trials, "trials")
        print("   %.2f" % elapsed, "s")
    return trials


def batch_summary(trials):
    """Counts and failure record of a batch, as written to its manifest."""
    failed = [s.trial_index for s in trials if s.failed]
    return {
        "n_trials": len(trials),
        "n_completed": len(trials) - len(failed),
        "n_failed": len(failed),
        "failed_indices": failed,
        "failure_times": {str(s.trial_index): s.failure_time for s in trials if s.failed},
    }
