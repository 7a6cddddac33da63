import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# -----------------------------------------------------------------------------
# Domain records
# -----------------------------------------------------------------------------


class Gait(str, enum.Enum):
    """Posture modelled by the pendulum. Stance is the triple-link (ankle, knee,
    hip) pendulum, kneeling the double-link (knee, hip) one."""

    STANCE = "stance"
    KNEELING = "kneeling"

    @property
    def n_joints(self):
        return 3 if self is Gait.STANCE else 2

    @property
    def joint_labels(self):
        """Joint numbering used in tables and CSV headers (1 ankle, 2 knee, 3 hip)."""
        return (1, 2, 3) if self is Gait.STANCE else (2, 3)

    @property
    def knee_index(self):
        """Row of the knee joint inside the joint vector."""
        return 1 if self is Gait.STANCE else 0


@dataclass(frozen=True)
class SegmentParams:
    """Inertial parameters of one rigid link.

    Parameters
    ----------
    mass : float
        Segment mass (kg).
    length : float
        Joint-to-joint length (m).
    com_offset : float
        Distance from the lower joint of the link to its mass centre (m).
    inertia : float
        Moment of inertia about the segment mass centre (kg m^2).
    """

    mass: float
    length: float
    com_offset: float
    inertia: float

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"segment mass must be positive, got {self.mass}")
        if not self.length > 0:
            raise ValueError(f"segment length must be positive, got {self.length}")
        if not 0 < self.com_offset <= self.length:
            raise ValueError(
                f"segment com_offset must lie in (0, length={self.length}], got {self.com_offset}"
            )
        if not self.inertia > 0:
            raise ValueError(f"segment inertia must be positive, got {self.inertia}")


@dataclass(frozen=True)
class PendulumModel:
    """Planar serial inverted pendulum standing on a pin joint.

    Segments are ordered from the ground up: (shank, thigh, HAT) for stance and
    (thigh, HAT) for kneeling.
    """

    gait: Gait
    segments: tuple
    gravity: float = 9.8

    def __post_init__(self):
        object.__setattr__(self, "gait", Gait(self.gait))
        object.__setattr__(self, "segments", tuple(self.segments))
        if len(self.segments) != self.gait.n_joints:
            raise ValueError(
                f"{self.gait.value} model needs {self.gait.n_joints} segments, got {len(self.segments)}"
            )
        if not self.gravity > 0:
            raise ValueError(f"gravity must be positive, got {self.gravity}")

    @property
    def n_joints(self):
        return self.gait.n_joints

    @property
    def total_mass(self):
        return float(sum(s.mass for s in self.segments))


@dataclass(frozen=True, eq=False)
class JointState:
    """Relative joint angles (rad, 0 is upright) and their rates (rad/s)."""

    angles: np.ndarray
    rates: np.ndarray = None

    def __post_init__(self):
        angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        rates = np.zeros_like(angles) if self.rates is None else np.atleast_1d(np.asarray(self.rates, dtype=float))
        if angles.shape != rates.shape:
            raise ValueError(f"angles {angles.shape} and rates {rates.shape} must have the same shape")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "rates", rates)

    @classmethod
    def zero(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[0] // 2
        return cls(x[:n], x[n:])

    def as_vector(self):
        return np.concatenate((self.angles, self.rates))


@dataclass(frozen=True, eq=False)
class DynamicsTerms:
    """Terms of M(theta) theta_dd + C(theta, theta_d) theta_d + G(theta) = tau."""

    mass_matrix: np.ndarray
    coriolis_matrix: np.ndarray
    gravity_vector: np.ndarray


@dataclass(frozen=True, eq=False)
class GroundReaction:
    """Ground reaction force on the body. Scalars or equal-length arrays."""

    fx: np.ndarray
    fz: np.ndarray


# -----------------------------------------------------------------------------
# Presets
# -----------------------------------------------------------------------------


def tip_default():
    """Triple-link stance pendulum with the reference body parameters."""
    return PendulumModel(
        Gait.STANCE,
        (
            SegmentParams(mass=6.0, length=0.6, com_offset=0.3, inertia=0.264),
            SegmentParams(mass=14.0, length=0.42, com_offset=0.1, inertia=0.1722),
            SegmentParams(mass=48.0, length=0.7, com_offset=0.45, inertia=0.441),
        ),
    )


def dip_default():
    """Double-link kneeling pendulum with the reference body parameters."""
    return PendulumModel(
        Gait.KNEELING,
        (
            SegmentParams(mass=20.0, length=0.568, com_offset=0.284, inertia=0.5),
            SegmentParams(mass=42.0, length=0.622, com_offset=0.311, inertia=3.5),
        ),
    )


MODEL_PRESETS = {"tip-default": tip_default, "dip-default": dip_default}

# Upright stance COM height of the reference body, used to normalise kneeling
# IP curves ("virtual" descriptors).
STANCE_COM_HEIGHT = 0.85


def model_from_dict(doc):
    """Build a PendulumModel from a preset name or a JSON-like mapping with
    `gait`, `segments` (list of SegmentParams fields) and optional `gravity`."""
    if isinstance(doc, str):
        try:
            return MODEL_PRESETS[doc]()
        except KeyError:
            raise ValueError(f"unknown model preset '{doc}', expected one of {sorted(MODEL_PRESETS)}") from None
    if "preset" in doc:
        return model_from_dict(doc["preset"])
    try:
        segments = tuple(SegmentParams(**seg) for seg in doc["segments"])
        gait = Gait(doc["gait"])
    except KeyError as err:
        raise ValueError(f"model document is missing the entry {err}") from None
    except TypeError as err:
        raise ValueError(f"malformed model document: {err}") from None
    return PendulumModel(gait, segments, float(doc.get("gravity", 9.8)))


def model_to_dict(model):
    return {
        "gait": model.gait.value,
        "gravity": model.gravity,
        "segments": [
            {"mass": s.mass, "length": s.length, "com_offset": s.com_offset, "inertia": s.inertia}
            for s in model.segments
        ],
    }


# -----------------------------------------------------------------------------
# chain constants
# -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Chain:
    n: int
    masses: np.ndarray
    inertias: np.ndarray
    lumped: np.ndarray  # l_ci used by the lumped COM expressions
    lever: np.ndarray  # lever[i, j]: distance along link j contributing to segment i's mass centre
    coupling: np.ndarray  # lever^T diag(m) lever
    moment: np.ndarray  # lever^T m, gravity moment arm per link
    cumsum: np.ndarray  # absolute angles = cumsum @ relative angles


@lru_cache(maxsize=64)
def _chain(model):
    n = model.n_joints
    masses = np.array([s.mass for s in model.segments])
    lengths = np.array([s.length for s in model.segments])
    offsets = np.array([s.com_offset for s in model.segments])
    lever = np.tril(np.broadcast_to(lengths, (n, n)), k=-1) + np.diag(offsets)
    return _Chain(
        n=n,
        masses=masses,
        inertias=np.array([s.inertia for s in model.segments]),
        lumped=offsets.copy(),
        lever=lever,
        coupling=lever.T @ np.diag(masses) @ lever,
        moment=lever.T @ masses,
        cumsum=np.tril(np.ones((n, n))),
    )


def _check_state(model, state):
    if state.angles.shape != (model.n_joints,):
        raise ValueError(
            f"{model.gait.value} model expects {model.n_joints} joint angles, got shape {state.angles.shape}"
        )


def _absolute_mass_matrix(chain, phi):
    delta = phi[:, None] - phi[None, :]
    return chain.coupling * np.cos(delta) + np.diag(chain.inertias), delta


# -----------------------------------------------------------------------------
# dynamics_terms
# -----------------------------------------------------------------------------


def dynamics_terms(model, state):
    """Inertia, Coriolis and gravity terms of the pendulum in relative joint
    coordinates.

    Absolute link angles are cumulative sums of the relative joint angles. The
    Coriolis matrix uses the Christoffel factorization, so that dM/dt - 2C is
    skew-symmetric.

    Parameters
    ----------
    model : PendulumModel
        The pendulum.
    state : JointState
        Joint angles and rates, dimension matching the gait.

    Returns
    -------
    terms : DynamicsTerms
        M (n x n), C (n x n) and G (n) such that M theta_dd + C theta_d + G = tau.
    """

    _check_state(model, state)
    chain = _chain(model)
    S = chain.cumsum
    phi = S @ state.angles

    mass_abs, delta = _absolute_mass_matrix(chain, phi)
    mass_matrix = S.T @ mass_abs @ S

    # Partial derivatives of the absolute mass matrix with respect to each
    # absolute angle, then chained to relative angles.
    eye = np.eye(chain.n)
    skew = -chain.coupling * np.sin(delta)
    d_abs = skew[None, :, :] * (eye[:, :, None] - eye[:, None, :])
    d_abs = np.einsum("mjk,ml->ljk", d_abs, S)
    d_mass = np.einsum("ji,ljk,km->lim", S, d_abs, S)

    christoffel = 0.5 * (d_mass.transpose(1, 2, 0) + d_mass.transpose(1, 0, 2) - d_mass)
    coriolis_matrix = christoffel @ state.rates

    gravity_abs = -model.gravity * chain.moment * np.sin(phi)
    gravity_vector = S.T @ gravity_abs

    return DynamicsTerms(mass_matrix, coriolis_matrix, gravity_vector)


def gravity_stiffness(model):
    """Jacobian dG/dtheta at the upright equilibrium, -g S^T diag(moment) S."""
    chain = _chain(model)
    S = chain.cumsum
    return -model.gravity * S.T @ np.diag(chain.moment) @ S


def mass_matrix_rate(model, state):
    """Time derivative of M(theta) along the current joint rates."""
    _check_state(model, state)
    chain = _chain(model)
    S = chain.cumsum
    phi = S @ state.angles
    phid = S @ state.rates
    delta = phi[:, None] - phi[None, :]
    delta_rate = phid[:, None] - phid[None, :]
    return S.T @ (-chain.coupling * np.sin(delta) * delta_rate) @ S


# -----------------------------------------------------------------------------
# forward_dynamics
# -----------------------------------------------------------------------------


def _accelerations(chain, gravity, angles, rates, torques):
    # Equations of motion written in absolute link angles: the velocity terms
    # collapse to H_jk sin(phi_j - phi_k) phi_d_k^2.
    phi = np.cumsum(angles)
    phid = np.cumsum(rates)
    mass_abs, delta = _absolute_mass_matrix(chain, phi)
    velocity = (chain.coupling * np.sin(delta)) @ (phid * phid)
    gravity_abs = -gravity * chain.moment * np.sin(phi)
    generalized = torques - np.append(torques[1:], 0.0)
    phidd = np.linalg.solve(mass_abs, generalized - velocity - gravity_abs)
    return np.diff(phidd, prepend=0.0)


def forward_dynamics(model, state, torques):
    """State derivative of the pendulum under joint torques.

    Parameters
    ----------
    model : PendulumModel
        The pendulum.
    state : JointState
        Current joint angles and rates.
    torques : numpy.ndarray
        Joint torques (N m), one per joint.

    Returns
    -------
    x_dot : numpy.ndarray
        Vector [theta_d, theta_dd] of length 2n, with
        theta_dd = M^-1 (tau - C theta_d - G).
    """

    _check_state(model, state)
    torques = np.asarray(torques, dtype=float)
    if torques.shape != (model.n_joints,):
        raise ValueError(f"{model.gait.value} model expects {model.n_joints} torques, got shape {torques.shape}")
    accelerations = _accelerations(_chain(model), model.gravity, state.angles, state.rates, torques)
    return np.concatenate((state.rates, accelerations))


# -----------------------------------------------------------------------------
# com_kinematics
# -----------------------------------------------------------------------------


def com_kinematics(model, state):
    """Lumped centre-of-mass position, its Jacobian and the Jacobian rate.

    The COM is x_m = -sum(l_ci sin(phi_i)), z_m = sum(l_ci cos(phi_i)) where
    phi_i is the absolute angle of link i and l_ci the segment com_offset.

    Parameters
    ----------
    model : PendulumModel
        The pendulum.
    state : JointState
        Joint angles and rates.

    Returns
    -------
    com_position : numpy.ndarray
        (x_m, z_m) in meters.
    com_jacobian : numpy.ndarray
        2 x n matrix d r_m / d theta.
    com_jacobian_rate : numpy.ndarray
        2 x n time derivative of the Jacobian.
    """

    _check_state(model, state)
    chain = _chain(model)
    return _weighted_kinematics(chain, chain.lumped, state)


def mass_center_kinematics(model, state):
    """Mass-weighted centre-of-mass position, Jacobian and Jacobian rate.

    Same layout as :func:`com_kinematics`, but the weights are the segment
    moments over the total mass, so the position equals :func:`mass_center`.
    This is the body whose acceleration the ground reaction balances.
    """

    _check_state(model, state)
    chain = _chain(model)
    return _weighted_kinematics(chain, chain.moment / chain.masses.sum(), state)


def _weighted_kinematics(chain, weights, state):
    S = chain.cumsum
    phi = S @ state.angles
    phid = S @ state.rates
    s, c = np.sin(phi), np.cos(phi)

    position = np.array([-weights @ s, weights @ c])
    jacobian = np.vstack((-(weights * c) @ S, -(weights * s) @ S))
    jacobian_rate = np.vstack(((weights * s * phid) @ S, -(weights * c * phid) @ S))
    return position, jacobian, jacobian_rate


def segment_com_positions(model, state):
    """Mass-centre position (x, z) of every segment, as an n x 2 array."""
    _check_state(model, state)
    chain = _chain(model)
    phi = chain.cumsum @ state.angles
    return np.column_stack((-chain.lever @ np.sin(phi), chain.lever @ np.cos(phi)))


def mass_center(model, state):
    """Mass-weighted centre of the segment mass centres, (x, z) in meters."""
    chain = _chain(model)
    return chain.masses @ segment_com_positions(model, state) / model.total_mass


# -----------------------------------------------------------------------------
# ground_reaction
# -----------------------------------------------------------------------------


def ground_reaction(model, state, accelerations):
    """Ground reaction forces from the mass-weighted COM acceleration.

    Parameters
    ----------
    model : PendulumModel
        The pendulum.
    state : JointState
        Joint angles and rates.
    accelerations : numpy.ndarray
        Joint accelerations (rad/s^2).

    Returns
    -------
    grf : GroundReaction
        F_x = m_t x_m_dd and F_z = m_t (z_m_dd + g), where (x_m, z_m) is
        :func:`mass_center`.
    """

    accelerations = np.asarray(accelerations, dtype=float)
    if accelerations.shape != (model.n_joints,):
        raise ValueError(
            f"{model.gait.value} model expects {model.n_joints} accelerations, got shape {accelerations.shape}"
        )
    com_accel = com_acceleration(model, state, accelerations)
    m_t = model.total_mass
    return GroundReaction(fx=m_t * com_accel[0], fz=m_t * (com_accel[1] + model.gravity))


def com_acceleration(model, state, accelerations):
    """(x_m_dd, z_m_dd) = J theta_dd + J_d theta_d of the mass-weighted COM."""
    _, jacobian, jacobian_rate = mass_center_kinematics(model, state)
    return jacobian @ np.asarray(accelerations, dtype=float) + jacobian_rate @ state.rates


# -----------------------------------------------------------------------------
# Energies
# -----------------------------------------------------------------------------


def potential_energy(model, state):
    """Gravitational potential energy of the segment masses (J), zero at the pin."""
    positions = segment_com_positions(model, state)
    return float(model.gravity * _chain(model).masses @ positions[:, 1])


def kinetic_energy(model, state):
    terms = dynamics_terms(model, state)
    return float(0.5 * state.rates @ terms.mass_matrix @ state.rates)


def mechanical_energy(model, state):
    return kinetic_energy(model, state) + potential_energy(model, state)
