"""Experiment orchestration: build everything from a config, run the round
loop, stream metrics to CSV, checkpoint periodically, and write the final
report with last-100-round averaging.

Because every round's randomness is keyed by (seed, round), resuming from a
checkpoint replays the remaining rounds bit-identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .analysis import (
    ProbeConfig,
    feature_norm_probe,
    heatmap_export,
    per_client_lambda_max,
    probe_batch,
    top_k_eigs,
)
from .config import ExperimentConfig
from .data import (
    ClientShard,
    Dataset,
    PartitionSpec,
    channel_stats,
    dirichlet_partition,
    load_cifar_binary,
    normalize,
    split_per_class,
    synth_classification,
)
from .errors import ConfigError, DataFormatError
from .federation import (
    AugmentConfig,
    FederationConfig,
    LocalTrainConfig,
    ServerState,
    init_server,
    run_round,
)
from .models import ModelSpec, init_params, lenet_cifar, mlp
from .optim import SamConfig, SgdConfig
from .tensor import ParamVector, Tensor

__all__ = [
    "ExperimentSetup",
    "build_setup",
    "run_experiment",
    "compare_runs",
    "save_checkpoint",
    "load_checkpoint",
    "CSV_COLUMNS",
]

CSV_COLUMNS = (
    "round",
    "lr",
    "mean_client_train_loss",
    "test_acc_sgd_line",
    "test_acc_swa_line",
    "lambda_max",
)

CHECKPOINT_MAGIC = b"FLATFED-CKPT v1\n"


@dataclass(frozen=True)
class ExperimentSetup:
    """Everything the round loop needs, resolved from an ExperimentConfig."""

    cfg: ExperimentConfig
    model: ModelSpec
    train_ds: Dataset  # raw images, training batches are augmented from these
    train_eval_ds: Dataset  # normalized view used by probes and planes
    test_eval_ds: Dataset
    shards: list[ClientShard]
    fed: FederationConfig


def _concat_datasets(parts: list[Dataset]) -> Dataset:
    images = np.concatenate([p.images.data for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    return Dataset(Tensor(images), labels, parts[0].num_classes)


def _normalized_view(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    x = (ds.images.data - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(Tensor(x), ds.labels, ds.num_classes)


def build_setup(cfg: ExperimentConfig) -> ExperimentSetup:
    ds_spec = cfg.dataset
    mean = std = None
    if ds_spec.kind == "synthetic":
        full = synth_classification(
            ds_spec.num_classes,
            ds_spec.per_class + ds_spec.test_per_class,
            ds_spec.input_dim,
            ds_spec.seed,
            separation=ds_spec.separation,
            spread=ds_spec.spread,
        )
        train_ds, test_ds = split_per_class(full, ds_spec.per_class)
        train_eval, test_eval = train_ds, test_ds
    else:
        parts = [load_cifar_binary(p, ds_spec.kind) for p in ds_spec.train_paths]
        train_ds = _concat_datasets(parts)
        if not ds_spec.test_path:
            raise ConfigError("CIFAR datasets need 'test_path'")
        test_ds = load_cifar_binary(ds_spec.test_path, ds_spec.kind)
        if ds_spec.normalize:
            mean, std = channel_stats(train_ds)
            train_eval = _normalized_view(train_ds, mean, std)
            test_eval = _normalized_view(test_ds, mean, std)
        else:
            train_eval, test_eval = train_ds, test_ds

    if cfg.model_kind == "mlp":
        dims = [train_ds.images.data.shape[1], *cfg.hidden, train_ds.num_classes]
        model = mlp(dims)
    else:
        model = lenet_cifar(train_ds.num_classes)

    shards = dirichlet_partition(
        train_ds, PartitionSpec(cfg.clients, cfg.alpha, cfg.partition_seed)
    )

    opt = cfg.optimizer
    sam_cfg = None
    if opt.kind in ("sam", "asam"):
        sam_cfg = SamConfig(rho=opt.rho, adaptive=opt.kind == "asam", eta=opt.eta)
    aug = cfg.augment
    if aug.standard and (mean is None or std is None):
        raise ConfigError("standard augmentation requires a normalized CIFAR dataset")
    local = LocalTrainConfig(
        model=model,
        epochs=opt.epochs,
        batch_size=opt.batch_size,
        optimizer=opt.kind,
        sgd=SgdConfig(lr=opt.lr, momentum=opt.momentum, weight_decay=opt.weight_decay),
        sam=sam_cfg,
        augment=AugmentConfig(
            standard=aug.standard,
            mean=mean,
            std=std,
            cutout_size=aug.cutout,
            mixup_alpha=aug.mixup,
        ),
        seed=cfg.seed,
    )
    fed = FederationConfig(
        num_clients=cfg.clients,
        clients_per_round=cfg.clients_per_round,
        local=local,
        server_beta=cfg.server_beta,
        server_lr=cfg.server_lr,
        swa=cfg.swa,
        seed=cfg.seed,
    )
    return ExperimentSetup(
        cfg=cfg,
        model=model,
        train_ds=train_ds,
        train_eval_ds=train_eval,
        test_eval_ds=test_eval,
        shards=shards,
        fed=fed,
    )


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line with the manifest, then the named vectors
# as raw little-endian float64.


def save_checkpoint(path: str | os.PathLike, server: ServerState) -> None:
    header = {
        "round": server.round,
        "n_models": server.n_models,
        "vectors": ["theta", "momentum_v", "swa_theta"],
        "manifest": [[name, list(shape), offset] for name, shape, offset in server.theta.manifest],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for vec in (server.theta, server.momentum_v, server.swa_theta):
            fh.write(vec.data.astype("<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> ServerState:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        manifest = tuple(
            (name, tuple(int(s) for s in shape), int(offset))
            for name, shape, offset in header["manifest"]
        )
        size = sum(int(np.prod(shape)) for _, shape, _ in manifest)
        vectors = {}
        for name in header["vectors"]:
            raw = fh.read(size * 8)
            if len(raw) != size * 8:
                raise DataFormatError(f"{path}: truncated vector {name!r}")
            vectors[name] = ParamVector(np.frombuffer(raw, dtype="<f8").copy(), manifest)
    return ServerState(
        theta=vectors["theta"],
        momentum_v=vectors["momentum_v"],
        swa_theta=vectors["swa_theta"],
        n_models=int(header["n_models"]),
        round=int(header["round"]),
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_row(values) -> str:
    return ",".join(_fmt(v) for v in values) + "\n"


def _truncate_log(path: str, upto_round: int, fmt: str) -> list[str]:
    """Keep lines from a metrics CSV or probes JSONL up to a round (resume)."""
    if not os.path.exists(path):
        return []
    kept = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            if fmt == "csv":
                if i == 0:
                    kept.append(line)
                    continue
                head = line.split(",", 1)[0]
                if head.isdigit() and int(head) <= upto_round:
                    kept.append(line)
            else:
                if json.loads(line).get("round", 10**18) <= upto_round:
                    kept.append(line)
    return kept


def _latest_checkpoint(ckpt_dir: str) -> str | None:
    if not os.path.isdir(ckpt_dir):
        return None
    best = None
    best_round = -1
    for name in os.listdir(ckpt_dir):
        if name.startswith("round_") and name.endswith(".ckpt"):
            r = int(name[len("round_") : -len(".ckpt")])
            if r > best_round:
                best_round = r
                best = os.path.join(ckpt_dir, name)
    return best


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, resume: bool = False) -> dict:
    """Execute all rounds; returns the final report dict (also written to disk).

    Layout of the run directory: config.cfg (snapshot), metrics.csv,
    checkpoints/round_*.ckpt, probes.jsonl (if probing), exports/*.json,
    report.json.
    """
    setup = build_setup(cfg)
    run_dir = out_dir or cfg.output_dir or os.path.join(
        os.environ.get("FLATFED_OUT", "runs"), cfg.name
    )
    os.makedirs(run_dir, exist_ok=True)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    csv_path = os.path.join(run_dir, "metrics.csv")
    probes_path = os.path.join(run_dir, "probes.jsonl")

    snapshot_path = os.path.join(run_dir, "config.cfg")
    with open(snapshot_path, "w", encoding="utf-8") as fh:
        fh.write(cfg.source_text)

    server = None
    if resume:
        latest = _latest_checkpoint(ckpt_dir)
        if latest is not None:
            server = load_checkpoint(latest)
            if server.theta.manifest != setup.model.manifest:
                raise ConfigError("checkpoint manifest does not match the configured model")
    if server is None:
        server = init_server(init_params(setup.model, cfg.seed))

    csv_lines = [",".join(CSV_COLUMNS) + "\n"]
    probe_lines: list[str] = []
    if server.round > 0:
        csv_lines = _truncate_log(csv_path, server.round, "csv") or csv_lines
        probe_lines = _truncate_log(probes_path, server.round, "jsonl")

    probes = cfg.probes
    hvp_source = setup.train_eval_ds

    with open(csv_path, "w", encoding="utf-8") as csv_fh:
        csv_fh.writelines(csv_lines)
        csv_fh.flush()
        probe_fh = open(probes_path, "w", encoding="utf-8") if (
            probes.per_client_every or probes.feature_norm_every or probe_lines
        ) else None
        if probe_fh:
            probe_fh.writelines(probe_lines)
            probe_fh.flush()
        try:
            for t in range(server.round + 1, cfg.rounds + 1):
                theta_before = server.theta
                server, metrics = run_round(
                    server, setup.shards, setup.train_ds, setup.test_eval_ds, setup.fed
                )
                lam = None
                if probes.lambda_max_every and t % probes.lambda_max_every == 0:
                    batch = probe_batch(hvp_source, probes.hvp_batch, probes.seed)
                    report = top_k_eigs(
                        server.theta, setup.model, batch, k=1, seed=probes.seed
                    )
                    lam = report.lambda_max
                csv_fh.write(
                    _csv_row(
                        (
                            metrics.round,
                            metrics.lr,
                            metrics.mean_client_train_loss,
                            metrics.test_acc_sgd,
                            metrics.test_acc_swa,
                            lam,
                        )
                    )
                )
                csv_fh.flush()
                if probe_fh:
                    _write_probes(probe_fh, t, theta_before, server, setup, probes)
                if cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                    save_checkpoint(
                        os.path.join(ckpt_dir, f"round_{t:06d}.ckpt"), server
                    )
        finally:
            if probe_fh:
                probe_fh.close()

    final_ckpt = os.path.join(ckpt_dir, f"round_{cfg.rounds:06d}.ckpt")
    if not os.path.exists(final_ckpt):
        save_checkpoint(final_ckpt, server)

    _assemble_probe_exports(run_dir, probes_path)
    report = _final_report(cfg, csv_path)
    with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def _write_probes(
    fh, t: int, theta_before: ParamVector, server: ServerState, setup: ExperimentSetup, probes
) -> None:
    from .federation import local_train, round_lr, sample_clients

    if probes.per_client_every and t % probes.per_client_every == 0:
        # Re-derive this round's local models from the pre-aggregation
        # global weights; keyed client RNG streams make the replay exact.
        ids = sample_clients(setup.fed.num_clients, setup.fed.clients_per_round, t, setup.fed.seed)
        lr = round_lr(t, setup.fed)
        updates = [
            local_train(theta_before, setup.shards[cid], setup.train_ds, setup.fed.local, t, lr)
            for cid in ids
        ]
        probe_cfg = ProbeConfig(
            model=setup.model,
            dataset=setup.train_eval_ds,
            shards=setup.shards,
            batch_size=probes.hvp_batch,
            seed=probes.seed,
        )
        lams = per_client_lambda_max(updates, probe_cfg)
        fh.write(
            json.dumps(
                {"round": t, "kind": "client_lambda_max", "values": {str(c): v for c, v in lams}},
                sort_keys=True,
            )
            + "\n"
        )
        fh.flush()

    if probes.feature_norm_every and t % probes.feature_norm_every == 0:
        norms = feature_norm_probe(
            server.theta, setup.model, setup.train_eval_ds, setup.shards
        )
        fh.write(
            json.dumps(
                {"round": t, "kind": "feature_norms", "values": {str(c): v for c, v in norms}},
                sort_keys=True,
            )
            + "\n"
        )
        fh.flush()


def _assemble_probe_exports(run_dir: str, probes_path: str) -> None:
    if not os.path.exists(probes_path):
        return
    events: dict[str, list[dict]] = {}
    with open(probes_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            ev = json.loads(line)
            events.setdefault(ev["kind"], []).append(ev)
    if not events:
        return
    exports_dir = os.path.join(run_dir, "exports")
    os.makedirs(exports_dir, exist_ok=True)
    for kind, evs in events.items():
        rounds = [ev["round"] for ev in evs]
        client_ids = sorted({int(c) for ev in evs for c in ev["values"]})
        mat = np.full((len(rounds), len(client_ids)), np.nan)
        col = {c: i for i, c in enumerate(client_ids)}
        for i, ev in enumerate(evs):
            for c, v in ev["values"].items():
                mat[i, col[int(c)]] = v
        export = heatmap_export(rounds, client_ids, mat, kind)
        with open(os.path.join(exports_dir, f"{kind}.json"), "w", encoding="utf-8") as fh:
            json.dump(export, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_metrics(csv_path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(csv_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            row = {}
            for key, part in zip(header, parts):
                if part == "":
                    row[key] = None
                elif key == "round":
                    row[key] = int(part)
                else:
                    row[key] = float(part)
            rows.append(row)
    return rows


def _final_report(cfg: ExperimentConfig, csv_path: str) -> dict:
    rows = read_metrics(csv_path)
    window = min(100, len(rows))
    tail = rows[-window:]
    acc_sgd = float(np.mean([r["test_acc_sgd_line"] for r in tail]))
    swa_vals = [r["test_acc_swa_line"] for r in tail if r["test_acc_swa_line"] is not None]
    acc_swa = float(np.mean(swa_vals)) if swa_vals else None
    headline_line = "swa" if acc_swa is not None else "sgd"
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "window": window,
        "mean_acc_sgd_line": acc_sgd,
        "mean_acc_swa_line": acc_swa,
        "headline_line": headline_line,
        "headline_accuracy": acc_swa if acc_swa is not None else acc_sgd,
    }


def compare_runs(reports: list[dict], metric: str = "headline_accuracy") -> list[dict]:
    """Improvement table against the last report (the reference row).

    Relative improvement is 100 (a - b) / b, undefined (None) when the
    reference metric is zero.
    """
    if len(reports) < 2:
        raise ConfigError("compare needs at least two reports")
    for rep in reports:
        if metric not in rep:
            raise ConfigError(f"report {rep.get('name', '?')!r} lacks metric {metric!r}")
    base = reports[-1]
    b = float(base[metric])
    rows = []
    for rep in reports[:-1]:
        a = float(rep[metric])
        rows.append(
            {
                "name": rep.get("name", "?"),
                "metric": a,
                "reference": b,
                "absolute": a - b,
                "relative_pct": (100.0 * (a - b) / b) if b != 0.0 else None,
            }
        )
    return rows
