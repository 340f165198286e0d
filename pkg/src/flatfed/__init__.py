"""Federated learning simulator with sharpness-aware local training,
server-side stochastic weight averaging, and curvature diagnostics."""

from .analysis import (
    PlaneGrid,
    SpectrumReport,
    SurfaceGrid,
    eval_random_surface,
    feature_norm_probe,
    per_client_lambda_max,
    plane_basis,
    plane_grid,
    sharpness_ratio,
    top_k_eigs,
)
from .autodiff import backward, forward_logits, forward_loss, hvp, loss_and_grad
from .config import ExperimentConfig, parse_config
from .data import (
    ClientShard,
    Dataset,
    PartitionSpec,
    cutout,
    dirichlet_partition,
    load_cifar_binary,
    mixup_batch,
    standard_augment,
    synth_classification,
)
from .errors import (
    ConfigError,
    DataFormatError,
    FlatFedError,
    GeometryError,
    NumericsError,
    UsageError,
)
from .federation import (
    ClientUpdate,
    FederationConfig,
    ServerState,
    evaluate,
    fedavg_aggregate,
    fedavgm_update,
    init_server,
    local_train,
    run_round,
    sample_clients,
    swa_absorb,
)
from .models import ModelSpec, init_params, lenet_cifar, mlp
from .optim import CyclicLr, SamConfig, SgdConfig, cyclic_lr, sam_perturb, sam_step, sgd_step
from .runner import compare_runs, load_checkpoint, run_experiment, save_checkpoint
from .tensor import Batch, ParamVector, Tensor

__version__ = "0.1.0"
