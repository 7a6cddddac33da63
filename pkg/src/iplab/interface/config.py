import json
from dataclasses import dataclass

from ..control import CONTROLLER_PRESETS, LqrSpec, lqr_spec_from_preset, select_joints
from ..model import STANCE_COM_HEIGHT, Gait, JointState, com_kinematics, model_from_dict, model_to_dict
from ..sim import NoiseSpec, SimConfig
from ..spectral import BandSpec


@dataclass(frozen=True)
class RunConfig:
    """Everything a simulate, analyze or fit run depends on.

    Parameters
    ----------
    model : PendulumModel
        The pendulum; its gait fixes the joint count of every other entry.
    lqr : LqrSpec
        Controller weights.
    sigma : tuple of float
        Torque noise multipliers, one per joint.
    sim : SimConfig
        Trial protocol.
    bands : BandSpec
        Band bank used to build IP curves.
    reference_height : float
        IP curve normalisation height (m). Kneeling runs use the upright stance
        COM height.
    seed : int
        Root seed of every random stream.
    torque_scale : float
        Base torque standard deviation (N m).
    model_name : str
        Preset name or "inline".
    controller_name : str
        Preset name or "inline".
    """

    model: object
    lqr: LqrSpec
    sigma: tuple
    sim: SimConfig
    bands: BandSpec
    reference_height: float
    seed: int = 0
    torque_scale: float = 1.0
    model_name: str = "inline"
    controller_name: str = "inline"

    def __post_init__(self):
        n = self.model.n_joints
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if len(self.lqr.beta) != n:
            raise ValueError(f"controller has {len(self.lqr.beta)} beta entries, the model has {n} joints")
        if len(self.sigma) != n:
            raise ValueError(f"controller has {len(self.sigma)} sigma entries, the model has {n} joints")
        if self.sim.initial_state is not None and self.sim.initial_state.angles.shape != (n,):
            raise ValueError(f"initial state has {self.sim.initial_state.angles.size} angles, the model has {n} joints")
        if self.sim.include_exo and self.sim.exo.gait is not self.model.gait:
            raise ValueError(f"exoskeleton mode '{self.sim.exo.mode.value}' cannot drive a {self.gait.value} model")
        if not self.reference_height > 0:
            raise ValueError(f"reference_height must be positive, got {self.reference_height}")
        if abs(self.bands.sample_rate - self.sim.output_rate) > 1e-9:
            raise ValueError(
                f"band sample rate {self.bands.sample_rate} Hz differs from the output rate {self.sim.output_rate} Hz"
            )

    @property
    def gait(self):
        return self.model.gait

    @property
    def noise(self):
        return NoiseSpec(self.sigma, base_seed=self.seed, torque_scale=self.torque_scale)

    def to_dict(self):
        controller = (
            self.controller_name
            if self.controller_name in CONTROLLER_PRESETS
            else {**self.lqr.to_dict(), "sigma": list(self.sigma)}
        )
        return {
            "gait": self.gait.value,
            "model": self.model_name if self.model_name != "inline" else model_to_dict(self.model),
            "controller": controller,
            "sim": self.sim.to_dict(),
            "bands": self.bands.to_dict(),
            "reference_height": self.reference_height,
            "seed": self.seed,
            "torque_scale": self.torque_scale,
        }

    @classmethod
    def from_dict(cls, doc):
        return run_config_from_dict(doc)


def default_reference_height(model):
    """Upright COM height for stance, the stance COM height for kneeling."""
    if model.gait is Gait.KNEELING:
        return STANCE_COM_HEIGHT
    position, _, _ = com_kinematics(model, JointState.zero(model.n_joints))
    return float(position[1])


def run_config_from_dict(doc):
    """Build a RunConfig from its JSON document.

    Missing entries fall back to the stance preset `tip-default`, controller
    `toi1` and the default trial protocol. A malformed document raises
    ValueError naming the missing entry or the offending value.
    """

    try:
        return _run_config(dict(doc))
    except KeyError as err:
        raise ValueError(f"run config is missing the entry {err}") from None
    except (TypeError, AttributeError) as err:
        raise ValueError(f"malformed run config: {err}") from None


def _run_config(doc):
    model_doc = doc.get("model")
    if model_doc is None:
        model_doc = "dip-default" if doc.get("gait") == Gait.KNEELING.value else "tip-default"
    model = model_from_dict(model_doc)
    model_name = model_doc if isinstance(model_doc, str) else model_doc.get("preset", "inline")
    if "gait" in doc and Gait(doc["gait"]) is not model.gait:
        raise ValueError(f"gait '{doc['gait']}' does not match the {model.gait.value} model")

    controller = doc.get("controller", "toi1")
    if isinstance(controller, str):
        lqr, sigma = lqr_spec_from_preset(controller, model.gait)
        controller_name = controller
    else:
        lqr = LqrSpec.from_dict(
            {**controller, "beta": select_joints(controller["beta"], model.gait)}
        )
        sigma = select_joints(controller.get("sigma", (1.0,) * model.n_joints), model.gait)
        controller_name = "inline"

    sim = SimConfig.from_dict(doc.get("sim", {}))
    bands = BandSpec.from_dict(doc.get("bands", {}), sample_rate=sim.output_rate)
    reference_height = doc.get("reference_height")
    if reference_height is None:
        reference_height = default_reference_height(model)

    return RunConfig(
        model=model,
        lqr=lqr,
        sigma=tuple(sigma),
        sim=sim,
        bands=bands,
        reference_height=float(reference_height),
        seed=int(doc.get("seed", 0)),
        torque_scale=float(doc.get("torque_scale", 1.0)),
        model_name=model_name,
        controller_name=controller_name,
    )


def load_run_config(path):
    with open(path) as f:
        return run_config_from_dict(json.load(f))
