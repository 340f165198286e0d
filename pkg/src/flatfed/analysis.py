"""Curvature and landscape diagnostics.

Top-k Hessian eigenvalues by power iteration with Hotelling deflation (the
Hessian only ever appears through matrix-free products), per-client
dominant-eigenvalue probes, 2-D loss planes spanned by three checkpoints,
random-direction loss surfaces, and the per-client output-feature-norm
probe. Grids and spectra export as JSON for the plotting frontend.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import forward_logits, hvp
from .data import ClientShard, Dataset, make_batch
from .errors import ConfigError, GeometryError, NumericsError, UsageError
from .federation import ClientUpdate, evaluate
from .models import ModelSpec
from .tensor import Batch, ParamVector

__all__ = [
    "SpectrumReport",
    "PlaneGrid",
    "SurfaceGrid",
    "ProbeConfig",
    "probe_batch",
    "top_k_from_hvp",
    "top_k_eigs",
    "sharpness_ratio",
    "per_client_lambda_max",
    "plane_basis",
    "plane_coords",
    "plane_grid",
    "eval_plane",
    "eval_random_surface",
    "feature_norm_probe",
    "plane_export",
    "surface_export",
    "spectrum_export",
    "heatmap_export",
]

HvpOp = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SpectrumReport:
    """Top-k eigenvalues in descending order with convergence metadata."""

    eigenvalues: tuple[float, ...]
    iters_used: tuple[int, ...]
    residuals: tuple[float, ...]
    vectors: np.ndarray  # (k, dim), rows matching eigenvalues

    @property
    def lambda_max(self) -> float:
        return self.eigenvalues[0]


def probe_batch(ds: Dataset, size: int = 1024, seed: int = 0) -> Batch:
    """Fixed, seeded mega-batch used for every HVP of one spectrum solve."""
    n = min(size, ds.n)
    rng = np.random.default_rng([seed, ds.n])
    idx = np.sort(rng.choice(ds.n, size=n, replace=False))
    return make_batch(ds, idx)


def top_k_from_hvp(
    hvp_op: HvpOp,
    dim: int,
    k: int,
    max_iters: int = 20,
    tol: float = 1e-4,
    seed: int = 0,
) -> SpectrumReport:
    """Power iteration with Hotelling deflation over a matrix-free operator.

    For each j, iterates v <- normalize(Hv - sum_i lam_i <v_i, v> v_i) until
    the Rayleigh quotient changes by less than ``tol`` relative or
    ``max_iters`` is hit. Residuals are reported against the raw operator.
    The report is sorted descending by eigenvalue (power iteration itself
    discovers them in magnitude order).
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    rng = np.random.default_rng([seed, dim, k])
    found: list[tuple[float, int, float, np.ndarray]] = []
    for j in range(k):
        v = rng.normal(size=dim)
        for lam_i, _, _, v_i in found:
            v -= np.dot(v_i, v) * v_i
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise NumericsError(f"degenerate start vector for eigenvalue {j + 1}")
        v /= norm
        lam_prev = None
        lam = 0.0
        iters = 0
        residual = np.inf
        for _ in range(max_iters):
            iters += 1
            hv = hvp_op(v)
            if not np.all(np.isfinite(hv)):
                raise NumericsError(f"non-finite Hessian-vector product at eigenvalue {j + 1}")
            w = hv.copy()
            for lam_i, _, _, v_i in found:
                w -= lam_i * np.dot(v_i, v) * v_i
            lam = float(np.dot(v, w))
            residual = float(np.linalg.norm(hv - lam * v))
            wnorm = float(np.linalg.norm(w))
            if wnorm < 1e-32:
                break  # deflated operator annihilates v; lam ~ 0
            v_next = w / wnorm
            if lam_prev is not None and abs(lam - lam_prev) <= tol * max(abs(lam), 1e-30):
                break
            lam_prev = lam
            v = v_next
        found.append((lam, iters, residual, v))
    order = sorted(range(k), key=lambda i: found[i][0], reverse=True)
    return SpectrumReport(
        eigenvalues=tuple(found[i][0] for i in order),
        iters_used=tuple(found[i][1] for i in order),
        residuals=tuple(found[i][2] for i in order),
        vectors=np.stack([found[i][3] for i in order]),
    )


def top_k_eigs(
    params: ParamVector,
    model: ModelSpec,
    batch: Batch,
    k: int,
    max_iters: int = 20,
    tol: float = 1e-4,
    seed: int = 0,
) -> SpectrumReport:
    """Top-k eigenvalues of the batch-loss Hessian at ``params``."""

    def op(vec: np.ndarray) -> np.ndarray:
        return hvp(params, model, batch, params.like(vec)).data

    return top_k_from_hvp(op, params.size, k, max_iters=max_iters, tol=tol, seed=seed)


def sharpness_ratio(report: SpectrumReport) -> float | None:
    """lambda_max / lambda_5, the spectral sharpness proxy.

    Returns None when lambda_5 is numerically zero (undefined ratio).
    """
    if len(report.eigenvalues) < 5:
        raise UsageError("sharpness ratio needs at least 5 eigenvalues")
    lam5 = report.eigenvalues[4]
    if abs(lam5) < 1e-12:
        return None
    return report.eigenvalues[0] / lam5


@dataclass(frozen=True)
class ProbeConfig:
    """How per-client curvature probes evaluate their Hessians."""

    model: ModelSpec
    dataset: Dataset
    shards: list[ClientShard]
    batch_size: int = 1024
    seed: int = 0
    max_iters: int = 20
    tol: float = 1e-4
    # test harnesses may supply an analytic operator per client
    hvp_builder: Callable[[ParamVector, ClientShard], HvpOp] | None = None


def per_client_lambda_max(
    updates: list[ClientUpdate], probe: ProbeConfig
) -> list[tuple[int, float]]:
    """Dominant Hessian eigenvalue of each client's local model on its own data."""
    out = []
    for u in sorted(updates, key=lambda u: u.client_id):
        shard = probe.shards[u.client_id]
        if probe.hvp_builder is not None:
            op = probe.hvp_builder(u.theta_k, shard)
        else:
            n = min(probe.batch_size, shard.n_k)
            rng = np.random.default_rng([probe.seed, u.client_id])
            pick = np.sort(rng.choice(shard.indices, size=n, replace=False))
            batch = make_batch(probe.dataset, pick)

            def op(vec: np.ndarray, _b=batch, _t=u.theta_k) -> np.ndarray:
                return hvp(_t, probe.model, _b, _t.like(vec)).data

        report = top_k_from_hvp(
            op, u.theta_k.size, 1, max_iters=probe.max_iters, tol=probe.tol, seed=probe.seed
        )
        out.append((u.client_id, report.lambda_max))
    return out


def plane_basis(
    theta1: ParamVector, theta2: ParamVector, theta3: ParamVector
) -> tuple[ParamVector, ParamVector]:
    """Orthonormal basis of the plane through three weight vectors.

    u = theta2 - theta1; v = (theta3 - theta1) minus its projection on u;
    both normalized. Degenerate (coincident or collinear) anchors raise a
    GeometryError.
    """
    u = theta2.data - theta1.data
    nu = np.linalg.norm(u)
    if nu < 1e-300:
        raise GeometryError("theta2 coincides with theta1")
    w = theta3.data - theta1.data
    v = w - (np.dot(w, u) / (nu * nu)) * u
    nv = np.linalg.norm(v)
    if nv < 1e-10 * max(np.linalg.norm(w), nu):
        raise GeometryError("theta3 is collinear with theta1 and theta2")
    return theta1.like(u / nu), theta1.like(v / nv)


def plane_coords(
    theta: ParamVector, theta1: ParamVector, basis: tuple[ParamVector, ParamVector]
) -> tuple[float, float]:
    """In-plane (x, y) coordinates of a weight vector relative to theta1."""
    d = theta.data - theta1.data
    return float(np.dot(d, basis[0].data)), float(np.dot(d, basis[1].data))


def _axis_nodes(min_a: float, max_a: float, margin: float, n: int) -> tuple[np.ndarray, int]:
    """Grid coordinates covering [min_a, max_a] with a relative margin,
    arranged so that 0 falls exactly on a node (returned index)."""
    span = max_a - min_a
    lo = min_a - margin * span
    hi = max_a + margin * span
    k = int(round((0.0 - lo) / (hi - lo) * (n - 1)))
    if min_a < 0:
        k = max(k, 1)
    if max_a > 0:
        k = min(k, n - 2)
    k = min(max(k, 0), n - 1)
    if (min_a < 0 and k < 1) or (max_a > 0 and k > n - 2):
        raise ConfigError(f"grid resolution {n} too small to cover the anchors")
    steps = []
    if k > 0:
        steps.append(-lo / k)
    if k < n - 1:
        steps.append(hi / (n - 1 - k))
    step = max(steps)
    return (np.arange(n) - k) * step, k


@dataclass(frozen=True)
class PlaneGrid:
    """Loss or error values over a 2-D slice through three checkpoints."""

    basis_u: ParamVector
    basis_v: ParamVector
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # (len(ys), len(xs)), row-major in y
    metric: str
    anchors: tuple[tuple[float, float], ...]  # in-plane coords of the three models
    origin_node: tuple[int, int]  # (ix, iy) of the (0, 0) grid point

    @property
    def extent(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return ((float(self.xs[0]), float(self.xs[-1])), (float(self.ys[0]), float(self.ys[-1])))


Metric = str | Callable[[ParamVector], float]


def _metric_name(metric: Metric) -> str:
    return metric if isinstance(metric, str) else getattr(metric, "__name__", "custom")


def _metric_fn(metric: Metric, model: ModelSpec | None, ds: Dataset | None):
    if callable(metric):
        return metric
    if metric == "loss":
        return lambda p: evaluate(p, model, ds)[1]
    if metric == "error":
        return lambda p: 1.0 - evaluate(p, model, ds)[0]
    raise ConfigError(f"unknown plane metric {metric!r} (use 'loss' or 'error')")


def eval_plane(
    theta1: ParamVector,
    basis: tuple[ParamVector, ParamVector],
    xs: np.ndarray,
    ys: np.ndarray,
    model: ModelSpec,
    ds: Dataset,
    metric: Metric = "loss",
) -> np.ndarray:
    """Evaluate the metric at theta1 + x u + y v over the coordinate grid."""
    if len(xs) < 2 or len(ys) < 2:
        raise ConfigError("plane grid needs at least 2 nodes per axis")
    fn = _metric_fn(metric, model, ds)
    u, v = basis
    values = np.empty((len(ys), len(xs)), dtype=np.float64)
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            p = theta1.like(theta1.data + x * u.data + y * v.data)
            values[iy, ix] = fn(p)
    return values


def plane_grid(
    theta1: ParamVector,
    theta2: ParamVector,
    theta3: ParamVector,
    model: ModelSpec,
    ds: Dataset,
    n: int = 21,
    metric: Metric = "loss",
    margin: float = 0.2,
) -> PlaneGrid:
    """Full pipeline: basis, auto extent containing all anchors, evaluation.

    The extent adds a 20% margin around the anchor triangle's bounding box
    and is snapped so theta1 sits exactly on a grid node.
    """
    basis = plane_basis(theta1, theta2, theta3)
    coords = [
        (0.0, 0.0),
        plane_coords(theta2, theta1, basis),
        plane_coords(theta3, theta1, basis),
    ]
    axs = [c[0] for c in coords]
    ays = [c[1] for c in coords]
    xs, kx = _axis_nodes(min(axs), max(axs), margin, n)
    ys, ky = _axis_nodes(min(ays), max(ays), margin, n)
    values = eval_plane(theta1, basis, xs, ys, model, ds, metric)
    return PlaneGrid(
        basis_u=basis[0],
        basis_v=basis[1],
        xs=xs,
        ys=ys,
        values=values,
        metric=_metric_name(metric),
        anchors=tuple(coords),
        origin_node=(kx, ky),
    )


@dataclass(frozen=True)
class SurfaceGrid:
    """Loss over theta + a d1 + b d2 for two seeded random unit directions."""

    offsets: np.ndarray  # shared axis for both directions
    values: np.ndarray  # (len(offsets), len(offsets))
    center_value: float
    seed: int
    metric: str


def eval_random_surface(
    theta: ParamVector,
    model: ModelSpec,
    ds: Dataset,
    resolution: int = 21,
    seed: int = 0,
    radius: float = 1.0,
    metric: Metric = "loss",
) -> SurfaceGrid:
    if resolution < 2:
        raise ConfigError("surface resolution must be >= 2")
    rng = np.random.default_rng([seed, theta.size])
    d1 = rng.normal(size=theta.size)
    d1 /= np.linalg.norm(d1)
    d2 = rng.normal(size=theta.size)
    d2 /= np.linalg.norm(d2)
    fn = _metric_fn(metric, model, ds)
    offsets = np.linspace(-radius, radius, resolution)
    values = np.empty((resolution, resolution), dtype=np.float64)
    for ib, b in enumerate(offsets):
        for ia, a in enumerate(offsets):
            p = theta.like(theta.data + a * d1 + b * d2)
            values[ib, ia] = fn(p)
    return SurfaceGrid(
        offsets=offsets,
        values=values,
        center_value=fn(theta),
        seed=seed,
        metric=_metric_name(metric),
    )


def feature_norm_probe(
    theta: ParamVector,
    model: ModelSpec,
    ds: Dataset,
    shards: list[ClientShard],
    chunk: int = 512,
) -> list[tuple[int, float]]:
    """Mean L2 norm of the classifier output over each client's samples."""
    out = []
    for shard in shards:
        total = 0.0
        for start in range(0, shard.n_k, chunk):
            idx = shard.indices[start : start + chunk]
            logits, _ = forward_logits(theta, model, ds.images.data[idx])
            total += float(np.linalg.norm(logits, axis=1).sum())
        out.append((shard.client_id, total / shard.n_k if shard.n_k else 0.0))
    return out


# ---------------------------------------------------------------------------
# JSON export schemas consumed by the plotting frontend


def plane_export(grid: PlaneGrid) -> dict:
    return {
        "kind": "plane",
        "meta": {
            "N": int(len(grid.xs)),
            "extent": [list(grid.extent[0]), list(grid.extent[1])],
            "xs": [float(x) for x in grid.xs],
            "ys": [float(y) for y in grid.ys],
            "metric": grid.metric,
            "anchors": [list(a) for a in grid.anchors],
            "origin_node": list(grid.origin_node),
        },
        "values": [float(v) for v in grid.values.ravel()],
    }


def surface_export(grid: SurfaceGrid) -> dict:
    return {
        "kind": "surface",
        "meta": {
            "resolution": int(len(grid.offsets)),
            "extent": [float(grid.offsets[0]), float(grid.offsets[-1])],
            "seed": grid.seed,
            "metric": grid.metric,
            "center_value": grid.center_value,
        },
        "values": [float(v) for v in grid.values.ravel()],
    }


def spectrum_export(report: SpectrumReport, seed: int = 0) -> dict:
    return {
        "kind": "spectrum",
        "meta": {
            "k": len(report.eigenvalues),
            "seed": seed,
            "iters_used": list(report.iters_used),
            "residuals": [float(r) for r in report.residuals],
        },
        "values": [float(v) for v in report.eigenvalues],
    }


def heatmap_export(
    rounds: list[int], client_ids: list[int], values: np.ndarray, label: str
) -> dict:
    """Round-by-client matrix (feature norms, per-client eigenvalues, ...)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(rounds), len(client_ids)):
        raise ConfigError("heatmap values must be (rounds, clients)")
    return {
        "kind": "heatmap",
        "meta": {"rounds": list(rounds), "client_ids": list(client_ids), "label": label},
        "values": [float(v) for v in values.ravel()],
    }
