"""FedPall: prototype-based adversarial and collaborative federated learning under feature drift."""

from .config import ExperimentConfig, format_config, parse_config
from .data import ClientDataset, DriftSpec, generate_drifted_clients, load_csv_clients
from .federation import EvalReport, RunResult, run, run_fedavg, run_fedpall, run_local_only
from .losses import LossWeights, combined_local_loss, cross_entropy, info_nce_loss, kl_uniform_loss
from .neural import MlpParams, MlpSpec, backward_mlp, forward_mlp, init_mlp, make_rng, sgd_step, softmax
from .prototypes import MixConfig, PrototypeSet, aggregate_global_prototypes, compute_local_prototypes

__version__ = "0.1.0"
