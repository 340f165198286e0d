"""The federated round loop: client sampling, local training, weighted
aggregation with optional server momentum, and server-side weight averaging.

Every source of randomness is keyed by (seed, round) or (seed, round,
client_id), so rounds are reproducible and clients can run in any order,
serially or concurrently, with bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import forward_logits, loss_and_grad, _softmax_ce
from .data import ClientShard, Dataset, cutout, make_batch, mixup_batch, standard_augment
from .errors import ConfigError, UsageError
from .models import ModelSpec
from .optim import CyclicLr, SamConfig, SgdConfig, SgdState, cyclic_lr, sam_step, sgd_step
from .tensor import Batch, ParamVector, Tensor

__all__ = [
    "ServerState",
    "RoundPlan",
    "ClientUpdate",
    "RoundMetrics",
    "AugmentConfig",
    "LocalTrainConfig",
    "SwaConfig",
    "FederationConfig",
    "init_server",
    "sample_clients",
    "local_train",
    "fedavg_aggregate",
    "fedavgm_update",
    "swa_absorb",
    "run_round",
    "evaluate",
]


@dataclass(frozen=True)
class ServerState:
    """Global model, server momentum buffer, and the weight-average line."""

    theta: ParamVector
    momentum_v: ParamVector
    swa_theta: ParamVector
    n_models: int
    round: int


@dataclass(frozen=True)
class RoundPlan:
    round: int
    client_ids: tuple[int, ...]
    lr: float


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    theta_k: ParamVector
    n_k: int
    train_loss: float

    def __post_init__(self):
        if self.n_k <= 0:
            raise ConfigError("client update with no samples")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    lr: float
    mean_client_train_loss: float
    test_acc_sgd: float
    test_loss_sgd: float
    test_acc_swa: float | None
    test_loss_swa: float | None


@dataclass(frozen=True)
class AugmentConfig:
    """Client-side augmentation switches; mean/std feed the standard pipeline."""

    standard: bool = False
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    cutout_size: int = 0
    mixup_alpha: float = 0.0


@dataclass(frozen=True)
class LocalTrainConfig:
    model: ModelSpec
    epochs: int
    batch_size: int
    optimizer: str  # "sgd" | "sam" | "asam"
    sgd: SgdConfig
    sam: SamConfig | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("local epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "sam", "asam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer in ("sam", "asam") and self.sam is None:
            raise ConfigError(f"{self.optimizer} requires a SamConfig")


@dataclass(frozen=True)
class SwaConfig:
    """Server-side averaging: absorb the global model every ``cycle`` rounds
    from ``start_round`` on, with the cyclic client learning rate."""

    start_round: int
    cycle: int
    gamma1: float
    gamma2: float
    cyclic_from_start: bool = False  # if True, cycle the lr from round 1

    def schedule(self) -> CyclicLr:
        return CyclicLr(self.gamma1, self.gamma2, self.cycle)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int
    clients_per_round: int
    local: LocalTrainConfig
    server_beta: float = 0.0
    server_lr: float = 1.0
    swa: SwaConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.clients_per_round > self.num_clients:
            raise ConfigError(
                f"clients_per_round {self.clients_per_round} > num_clients {self.num_clients}"
            )
        if not 0.0 <= self.server_beta < 1.0:
            raise ConfigError("server momentum must be in [0, 1)")


def init_server(theta: ParamVector) -> ServerState:
    return ServerState(
        theta=theta.copy(),
        momentum_v=theta.zeros_like(),
        swa_theta=theta.zeros_like(),
        n_models=0,
        round=0,
    )


def sample_clients(num_clients: int, m: int, round_index: int, seed: int) -> tuple[int, ...]:
    """Sample m distinct client ids, uniform without replacement,
    deterministic per (seed, round)."""
    if m > num_clients:
        raise ConfigError(f"cannot sample {m} of {num_clients} clients")
    rng = np.random.default_rng([seed, round_index])
    picked = rng.choice(num_clients, size=m, replace=False)
    return tuple(int(c) for c in np.sort(picked))


def _client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, client_id])


def _assemble_batch(
    ds: Dataset, idx: np.ndarray, aug: AugmentConfig, rng: np.random.Generator
) -> Batch:
    if not (aug.standard or aug.cutout_size):
        batch = make_batch(ds, idx)
    else:
        xs = []
        for i in idx:
            img = Tensor(ds.images.data[i])
            if aug.standard:
                img = standard_augment(img, rng, aug.mean, aug.std)
            if aug.cutout_size:
                img = cutout(img, aug.cutout_size, rng)
            xs.append(img.data)
        batch = Batch(np.stack(xs), ds.labels[idx])
    if aug.mixup_alpha > 0 and batch.size >= 2:
        batch = mixup_batch(batch, aug.mixup_alpha, rng, ds.num_classes)
    return batch


def local_train(
    theta: ParamVector,
    shard: ClientShard,
    ds: Dataset,
    cfg: LocalTrainConfig,
    round_index: int,
    lr: float | None = None,
) -> ClientUpdate:
    """Run the client's local epochs from a copy of the global model.

    The input ``theta`` is never mutated. All client randomness (batch
    order, augmentation draws) comes from one stream keyed by
    (seed, round, client_id).
    """
    if shard.n_k == 0:
        raise ConfigError(f"client {shard.client_id} has an empty shard")
    rng = _client_rng(cfg.seed, round_index, shard.client_id)
    sgd_cfg = cfg.sgd if lr is None else replace(cfg.sgd, lr=lr)
    theta_k = theta.copy()
    state = SgdState()
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(shard.indices)
        for start in range(0, shard.n_k, cfg.batch_size):
            batch = _assemble_batch(ds, order[start : start + cfg.batch_size], cfg.augment, rng)
            if cfg.optimizer == "sgd":
                loss, grad = loss_and_grad(theta_k, cfg.model, batch)
                theta_k, state = sgd_step(theta_k, grad, state, sgd_cfg)
            else:
                theta_k, state, loss = sam_step(
                    theta_k, cfg.model, batch, state, cfg.sam, sgd_cfg
                )
            losses.append(loss)
    return ClientUpdate(shard.client_id, theta_k, shard.n_k, float(np.mean(losses)))


def fedavg_aggregate(updates: list[ClientUpdate]) -> ParamVector:
    """Sample-count weighted average of client models.

    Summation runs in ascending client-id order so the reduction is
    bit-deterministic regardless of how the updates were produced.
    """
    if not updates:
        raise UsageError("cannot aggregate zero updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    manifest = ordered[0].theta_k.manifest
    for u in ordered[1:]:
        if u.theta_k.manifest != manifest:
            raise ConfigError("client updates have mismatched manifests")
    total = float(sum(u.n_k for u in ordered))
    acc = np.zeros_like(ordered[0].theta_k.data)
    for u in ordered:
        acc += (u.n_k / total) * u.theta_k.data
    return ParamVector(acc, manifest)


def fedavgm_update(
    server: ServerState, aggregate: ParamVector, beta: float, server_lr: float = 1.0
) -> ServerState:
    """Server-side momentum step on the pseudo-gradient delta = theta - aggregate.

    v <- beta v + delta; theta <- theta - server_lr v. With beta = 0 and
    server_lr = 1 this is exactly FedAvg (theta <- aggregate), implemented
    as a direct assignment so the reduction is bitwise.
    """
    delta = server.theta.data - aggregate.data
    v = beta * server.momentum_v.data + delta
    if beta == 0.0 and server_lr == 1.0:
        new_theta = aggregate.copy()
    else:
        new_theta = server.theta.like(server.theta.data - server_lr * v)
    return replace(server, theta=new_theta, momentum_v=server.theta.like(v))


def swa_absorb(server: ServerState) -> ServerState:
    """Fold the current global model into the running weight average."""
    n = server.n_models
    if n == 0:
        swa = server.theta.copy()
    else:
        swa = server.theta.like((server.swa_theta.data * n + server.theta.data) / (n + 1))
    return replace(server, swa_theta=swa, n_models=n + 1)


def round_lr(round_index: int, cfg: FederationConfig) -> float:
    """Learning rate broadcast to clients this round."""
    base = cfg.local.sgd.lr
    if cfg.swa is None:
        return base
    if cfg.swa.cyclic_from_start:
        return cyclic_lr(round_index, cfg.swa.schedule())
    if round_index >= cfg.swa.start_round:
        return cyclic_lr(round_index - cfg.swa.start_round + 1, cfg.swa.schedule())
    return base


def swa_boundary(round_index: int, swa: SwaConfig) -> bool:
    return round_index >= swa.start_round and (
        (round_index - swa.start_round) % swa.cycle == swa.cycle - 1
    )


def run_round(
    server: ServerState,
    shards: list[ClientShard],
    train_ds: Dataset,
    test_ds: Dataset,
    cfg: FederationConfig,
) -> tuple[ServerState, RoundMetrics]:
    """Advance the federation by one communication round."""
    t = server.round + 1
    lr = round_lr(t, cfg)
    ids = sample_clients(cfg.num_clients, cfg.clients_per_round, t, cfg.seed)
    plan = RoundPlan(t, ids, lr)
    updates = [
        local_train(server.theta, shards[cid], train_ds, cfg.local, t, lr)
        for cid in plan.client_ids
    ]
    agg = fedavg_aggregate(updates)
    server = fedavgm_update(server, agg, cfg.server_beta, cfg.server_lr)
    server = replace(server, round=t)
    if cfg.swa is not None and swa_boundary(t, cfg.swa):
        server = swa_absorb(server)

    acc_sgd, loss_sgd = evaluate(server.theta, cfg.local.model, test_ds)
    acc_swa = loss_swa = None
    if cfg.swa is not None and server.n_models > 0:
        acc_swa, loss_swa = evaluate(server.swa_theta, cfg.local.model, test_ds)
    metrics = RoundMetrics(
        round=t,
        lr=lr,
        mean_client_train_loss=float(np.mean([u.train_loss for u in updates])),
        test_acc_sgd=acc_sgd,
        test_loss_sgd=loss_sgd,
        test_acc_swa=acc_swa,
        test_loss_swa=loss_swa,
    )
    return server, metrics


def evaluate(
    theta: ParamVector, model: ModelSpec, ds: Dataset, batch_size: int = 512
) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy over the whole dataset."""
    correct = 0
    loss_sum = 0.0
    for start in range(0, ds.n, batch_size):
        idx = np.arange(start, min(start + batch_size, ds.n))
        logits, _ = forward_logits(theta, model, ds.images.data[idx])
        y = ds.labels[idx]
        loss, _ = _softmax_ce(logits, y)
        loss_sum += loss * len(idx)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / ds.n, loss_sum / ds.n
