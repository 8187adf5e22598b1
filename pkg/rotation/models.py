from dataclasses import dataclass, field, asdict
from enum import Enum


class Distribution(Enum):
    TRAIN = "train"
    OOD = "ood"


class Activation(Enum):
    ELU = "elu"
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


class PolicyVariant(Enum):
    RMA = "rma"          # encodeur appris mu(e) -> z (8)
    SYSID = "sysid"      # encodeur identité : z = e normalisé (9)
    DR = "dr"            # pas d'entrée privilégiée, k paires en entrée


class InputMode(Enum):
    PRIVILEGED = "privileged"
    ESTIMATED = "estimated"
    NONE = "none"


class VariantTag(Enum):
    EXPERT = "expert"
    OURS = "ours"
    DR_MLP = "dr_mlp"
    SYSID = "sysid"
    NOADAPT = "noadapt"
    PERIODIC = "periodic"


class DoneCause(Enum):
    RUNNING = 0
    DROP = 1
    TIMEOUT = 2
    FAULT = 3


class StreamPurpose(Enum):
    """Sous-flux du générateur à compteur, indexés par (graine, env, pas)."""
    RESET = 1
    PHYSICS = 2
    NOISE = 3
    ACTION = 4
    SWAP = 5


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    artifacts: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    tool_version: str = ""
    started_at: str = ""
    finished_at: str = ""
    input_hash: str = ""

    def to_dict(self):
        return asdict(self)
