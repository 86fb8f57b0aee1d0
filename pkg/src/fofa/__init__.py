"""Per-device structure and weight generation for sequential recommenders, in numpy.

A controller picks which residual blocks of a backbone each device runs, a
hypernetwork writes the weights of the kept blocks from the device's latent
interest, and a simulated cloud/device channel delivers the assembled
sub-model with one forward pass.

Commands (train, evaluate, simulate, sweep, report) live in :mod:`fofa.commands`
and are runnable as ``python -m fofa <command>``.
"""

from .backbone import BackboneConfig, attention_config, conv_config, flops_count
from .checkpoint import Checkpoint, CheckpointError
from .controller import GumbelConfig, StructureLogits, harden
from .data import SplitDataset, SyntheticSpec, ingest, preprocess, synthesize
from .metrics import EvalResult, evaluate, rank_metrics
from .model import MODES, ForwardOFA, ModelConfig
from .protocol import AssembledModel, DeviceRequest, cloud_assemble, device_prepare_request, privacy_audit
from .rng import RngState
from .sim import CloudService, SessionPolicy, run_session, simulate_fleet
from .training import TrainConfig, TrainingAborted, fit, lambda_sweep

__version__ = "0.1.0"

__all__ = [
    "AssembledModel", "BackboneConfig", "Checkpoint", "CheckpointError", "CloudService", "DeviceRequest",
    "EvalResult", "ForwardOFA", "GumbelConfig", "MODES", "ModelConfig", "RngState", "SessionPolicy",
    "SplitDataset", "StructureLogits", "SyntheticSpec", "TrainConfig", "TrainingAborted", "attention_config",
    "cloud_assemble", "conv_config", "device_prepare_request", "evaluate", "fit", "flops_count", "harden",
    "ingest", "lambda_sweep", "preprocess", "privacy_audit", "rank_metrics", "run_session", "simulate_fleet",
    "synthesize",
]
