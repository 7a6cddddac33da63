import enum
from dataclasses import dataclass

import numpy as np
from scipy import linalg as la

from .model import Gait, JointState, dynamics_terms, gravity_stiffness, mass_center_kinematics


class SynthesisError(RuntimeError):
    """LQR synthesis failed. `residual` holds the last Riccati residual norm, if any."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


# -----------------------------------------------------------------------------
# Domain records
# -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearPlant:
    """x_dot = A x + B tau about the upright equilibrium, x = [theta, theta_d]."""

    a_matrix: np.ndarray
    b_matrix: np.ndarray

    @property
    def n_joints(self):
        return self.b_matrix.shape[1]


@dataclass(frozen=True, eq=False)
class LqrSpec:
    """Cost weights of the balance controller, R = alpha diag(beta).

    Parameters
    ----------
    alpha : float
        Overall control effort scale.
    beta : tuple of float
        Relative effort weight per joint (ankle, knee, hip for stance; knee, hip
        for kneeling).
    q_matrix : numpy.ndarray, optional
        State penalty. Defaults to the 2n identity.
    """

    alpha: float
    beta: tuple
    q_matrix: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.beta or any(not b > 0 for b in self.beta):
            raise ValueError(f"every beta entry must be positive, got {self.beta}")
        n = len(self.beta)
        if self.q_matrix is None:
            object.__setattr__(self, "q_matrix", np.eye(2 * n))
        q = np.asarray(self.q_matrix, dtype=float)
        if q.shape != (2 * n, 2 * n):
            raise ValueError(f"q_matrix must be {2 * n}x{2 * n}, got {q.shape}")
        if not np.allclose(q, q.T):
            raise ValueError("q_matrix must be symmetric")
        if np.linalg.eigvalsh(q).min() < -1e-12 * max(1.0, np.abs(q).max()):
            raise ValueError("q_matrix must be positive semi-definite")
        object.__setattr__(self, "q_matrix", q)

    def to_dict(self):
        doc = {"alpha": self.alpha, "beta": list(self.beta)}
        if not np.array_equal(self.q_matrix, np.eye(2 * len(self.beta))):
            doc["q_matrix"] = self.q_matrix.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc):
        q = doc.get("q_matrix")
        return cls(float(doc["alpha"]), tuple(doc["beta"]), None if q is None else np.asarray(q, dtype=float))


@dataclass(frozen=True, eq=False)
class LqrGain:
    """State-feedback gain tau = -K x and the Riccati solution it came from."""

    gain: np.ndarray
    riccati: np.ndarray = None
    residual: float = 0.0


class ExoMode(str, enum.Enum):
    STANCE_STIFFNESS = "stance-stiffness"
    KNEEL_PD_GRAVITY = "kneel-pd-gravity"


@dataclass(frozen=True)
class ExoSpec:
    """Knee exoskeleton torque law.

    `stance-stiffness` uses k_r (N m/rad); `kneel-pd-gravity` uses k_p (N m/rad),
    k_d (N m s/rad) and the assistance weight gamma in (0, 1).
    """

    mode: ExoMode
    k_r: float = 0.0
    k_p: float = 0.0
    k_d: float = 0.0
    gamma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", ExoMode(self.mode))
        for name in ("k_r", "k_p", "k_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"exoskeleton gain {name} must be non-negative, got {getattr(self, name)}")
        if self.mode is ExoMode.KNEEL_PD_GRAVITY and not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def gait(self):
        return Gait.STANCE if self.mode is ExoMode.STANCE_STIFFNESS else Gait.KNEELING

    def to_dict(self):
        if self.mode is ExoMode.STANCE_STIFFNESS:
            return {"mode": self.mode.value, "k_r": self.k_r}
        return {"mode": self.mode.value, "k_p": self.k_p, "k_d": self.k_d, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


# -----------------------------------------------------------------------------
# Controller presets (best-fit quiet-stance parameters per test of interest)
# -----------------------------------------------------------------------------

CONTROLLER_PRESETS = {
    "toi1": {"alpha": 1e6, "beta": (0.2, 0.1, 0.3), "sigma": (1.0, 1.0, 1.0)},
    "toi2": {"alpha": 1e10, "beta": (0.3, 0.1, 33.3), "sigma": (1.0, 1.0, 1.0)},
    "toi3": {"alpha": 1e6, "beta": (0.2, 0.1, 0.3), "sigma": (0.7, 0.3, 1.0)},
    "toi4": {"alpha": 1e6, "beta": (0.2, 0.1, 0.3), "sigma": (0.7, 0.3, 1.0)},
    "toi5": {"alpha": 1e10, "beta": (0.2, 0.1, 0.3), "sigma": (1.0, 1.0, 1.0)},
    "toi6": {"alpha": 1e10, "beta": (0.2, 0.1, 0.3), "sigma": (1.0, 0.7, 0.3)},
    "toi7": {"alpha": 1e1, "beta": (0.3, 0.1, 33.3), "sigma": (1.0, 1.0, 1.0)},
    "toi8": {"alpha": 1e10, "beta": (0.2, 0.1, 0.3), "sigma": (1.0, 1.0, 1.0)},
}

# Effort scale of every preset in kneeling; the fitted values are stance-only.
KNEELING_ALPHA = 3e-4


def select_joints(values, gait):
    """Keep the entries of a stance-ordered (ankle, knee, hip) triple that exist
    for the gait. Vectors already sized for the gait are returned unchanged."""
    values = tuple(values)
    if len(values) == gait.n_joints:
        return values
    if len(values) == 3 and gait is Gait.KNEELING:
        return values[1:]
    raise ValueError(f"expected {gait.n_joints} (or 3 stance-ordered) joint values, got {len(values)}")


def lqr_spec_from_preset(name, gait):
    """Return (LqrSpec, sigma) of a named controller preset for the gait.

    Kneeling drops the ankle entries and uses `KNEELING_ALPHA` in place of the
    stance effort scale.
    """
    try:
        preset = CONTROLLER_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown controller preset '{name}', expected one of {sorted(CONTROLLER_PRESETS)}") from None
    gait = Gait(gait)
    alpha = preset["alpha"] if gait is Gait.STANCE else KNEELING_ALPHA
    spec = LqrSpec(alpha, select_joints(preset["beta"], gait))
    return spec, select_joints(preset["sigma"], gait)


# -----------------------------------------------------------------------------
# linearize
# -----------------------------------------------------------------------------


def linearize(model):
    """Linearize the pendulum about the upright equilibrium.

    Parameters
    ----------
    model : PendulumModel
        The pendulum.

    Returns
    -------
    plant : LinearPlant
        A = [[0, I], [-M(0)^-1 dG/dtheta, 0]] and B = [[0], [M(0)^-1]].
    """

    n = model.n_joints
    mass_inv = np.linalg.inv(dynamics_terms(model, JointState.zero(n)).mass_matrix)
    a_matrix = np.zeros((2 * n, 2 * n))
    a_matrix[:n, n:] = np.eye(n)
    a_matrix[n:, :n] = -mass_inv @ gravity_stiffness(model)
    b_matrix = np.vstack((np.zeros((n, n)), mass_inv))
    return LinearPlant(a_matrix, b_matrix)


# -----------------------------------------------------------------------------
# build_r
# -----------------------------------------------------------------------------


def build_r(spec):
    """Control penalty R = alpha diag(beta)."""
    return spec.alpha * np.diag(spec.beta)


# -----------------------------------------------------------------------------
# lqr_gain
# -----------------------------------------------------------------------------


def care_residual(plant, spec, riccati):
    """Residual of A^T P + P A - P B R^-1 B^T P + Q = 0."""
    A, B = plant.a_matrix, plant.b_matrix
    R = build_r(spec)
    return A.T @ riccati + riccati @ A - riccati @ B @ np.linalg.solve(R, B.T @ riccati) + spec.q_matrix


def _is_stabilizable(A, B, tol=1e-9):
    # Hautus test on the non-strictly-stable eigenvalues.
    n = A.shape[0]
    for eig in np.linalg.eigvals(A):
        if eig.real >= -tol:
            if np.linalg.matrix_rank(np.hstack((A - eig * np.eye(n), B)), tol=1e-10) < n:
                return False
    return True


def lqr_gain(plant, spec, tol=1e-10, max_iter=50):
    """Synthesize the LQR gain K = R^-1 B^T P.

    P is the stabilizing solution of the continuous algebraic Riccati equation.
    It is seeded by the Schur-method solver of scipy and then polished with
    Newton-Kleinman iterations (one Lyapunov solve each) until the Frobenius
    residual falls below `tol` relative to ||P||.

    Parameters
    ----------
    plant : LinearPlant
        Linearized pendulum.
    spec : LqrSpec
        Cost weights; beta must have one entry per joint.
    tol : float
        Relative residual that stops the refinement. Defaults to 1e-10.
    max_iter : int
        Maximum Newton-Kleinman iterations. Defaults to 50.

    Returns
    -------
    gain : LqrGain
        The gain matrix (n x 2n) with the Riccati solution and final residual.
    """

    A, B = plant.a_matrix, plant.b_matrix
    if len(spec.beta) != plant.n_joints:
        raise ValueError(f"LqrSpec has {len(spec.beta)} beta entries but the plant has {plant.n_joints} inputs")
    if not _is_stabilizable(A, B):
        raise SynthesisError("plant (A, B) is not stabilizable")

    R = build_r(spec)
    Q = spec.q_matrix
    try:
        P = la.solve_continuous_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as err:
        raise SynthesisError(f"Riccati solver failed: {err}") from err

    P = 0.5 * (P + P.T)
    residual = np.linalg.norm(care_residual(plant, spec, P))
    for _ in range(max_iter):
        if residual <= tol * np.linalg.norm(P):
            break
        K = np.linalg.solve(R, B.T @ P)
        closed = A - B @ K
        P_next = la.solve_continuous_lyapunov(closed.T, -(Q + K.T @ R @ K))
        P_next = 0.5 * (P_next + P_next.T)
        residual_next = np.linalg.norm(care_residual(plant, spec, P_next))
        if not residual_next < residual:
            break
        P, residual = P_next, residual_next

    if not residual <= 1e-8 * np.linalg.norm(P):
        raise SynthesisError(
            f"Riccati residual {residual:.3e} exceeds 1e-8 relative to ||P|| = {np.linalg.norm(P):.3e}",
            residual=residual,
        )

    K = np.linalg.solve(R, B.T @ P)
    poles = np.linalg.eigvals(A - B @ K)
    if not np.all(poles.real < 0):
        raise SynthesisError(f"closed loop is not Hurwitz, poles {poles}", residual=residual)
    return LqrGain(gain=K, riccati=P, residual=float(residual))


def closed_loop_poles(plant, gain):
    return np.linalg.eigvals(plant.a_matrix - plant.b_matrix @ gain.gain)


# -----------------------------------------------------------------------------
# output_matrices
# -----------------------------------------------------------------------------


def output_matrices(model, plant):
    """Output matrices of the linearized model.

    y1 = -F_x = C x + D1 tau, with F_x from the mass-weighted COM, and y2 = D2 tau, the pin-joint torque (ankle for
    stance, knee for kneeling).

    Returns
    -------
    c_matrix : numpy.ndarray
        1 x 2n.
    d1_matrix : numpy.ndarray
        1 x n.
    d2_matrix : numpy.ndarray
        1 x n selector [1, 0, ...].
    """

    n = model.n_joints
    _, jacobian, _ = mass_center_kinematics(model, JointState.zero(n))
    # At the equilibrium the Jacobian rate vanishes, so only J theta_dd remains.
    row = -model.total_mass * jacobian[0]
    c_matrix = (row @ plant.a_matrix[n:])[None, :]
    d1_matrix = (row @ plant.b_matrix[n:])[None, :]
    d2_matrix = np.zeros((1, n))
    d2_matrix[0, 0] = 1.0
    return c_matrix, d1_matrix, d2_matrix


# -----------------------------------------------------------------------------
# exo_torque
# -----------------------------------------------------------------------------


def exo_torque(spec, state, model):
    """Assistive knee torque of the exoskeleton (N m).

    Stance: tau_e = -k_r theta_2.
    Kneeling: tau_e = -k_p theta_2 - k_d theta_2_d
    - gamma g [(m_3 / 2)(l_2 sin theta_2 - l_c3 sin theta_3) + m_2 l_c2 sin theta_2].

    Parameters
    ----------
    spec : ExoSpec
        Torque law and gains.
    state : JointState
        Joint angles and rates of the model.
    model : PendulumModel
        The pendulum; its gait must match the torque law.

    Returns
    -------
    tau_e : float
        Torque to add on the knee row.
    """

    if spec.gait is not model.gait:
        raise ValueError(f"exoskeleton mode '{spec.mode.value}' cannot drive a {model.gait.value} model")
    if state.angles.shape != (model.n_joints,):
        raise ValueError(f"expected {model.n_joints} joint angles, got shape {state.angles.shape}")

    if spec.mode is ExoMode.STANCE_STIFFNESS:
        return float(-spec.k_r * state.angles[1])

    theta2, theta3 = state.angles
    thigh, hat = model.segments
    gravity_comp = (hat.mass / 2) * (thigh.length * np.sin(theta2) - hat.com_offset * np.sin(theta3))
    gravity_comp += thigh.mass * thigh.com_offset * np.sin(theta2)
    return float(-spec.k_p * theta2 - spec.k_d * state.rates[0] - spec.gamma * model.gravity * gravity_comp)


def exo_gain(spec, model, step=1e-7):
    """Linear feedback row L with tau_e ~ L x about upright (1 x 2n)."""
    n = model.n_joints
    row = np.zeros((1, 2 * n))
    for k in range(2 * n):
        dx = np.zeros(2 * n)
        dx[k] = step
        plus = exo_torque(spec, JointState.from_vector(dx), model)
        minus = exo_torque(spec, JointState.from_vector(-dx), model)
        row[0, k] = (plus - minus) / (2 * step)
    return row
