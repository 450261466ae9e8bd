"""Similarity metrics, prototypes, nearest-center prediction, and the episode loss.

Four metrics are supported between a query embedding q and a center p:

  euclidean   -||q - p||^2
  cosine      <q, p> / (||q|| * ||p|| * tau)
  inner       <q, p>
  sns         <q, p> / ||p||          (only the center is normalized)

``sns`` equals ``||q||`` times the cosine similarity (tau=1), so it ranks
centers identically while scaling each query's logits by its own norm.
Every loss-path function returns analytic gradients with respect to the
embeddings; all are verified against central finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .sampler import Task

NORM_EPS = 1e-12

METRIC_KINDS = ("euclidean", "cosine", "inner", "sns")


@dataclass(frozen=True)
class MetricSpec:
    """Which similarity to use; `temperature` applies to cosine only."""

    kind: str = "sns"
    temperature: float = 0.5

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ParameterError(f"unknown metric kind {self.kind!r}")
        if self.temperature <= 0:
            raise ParameterError("temperature must be > 0")


@dataclass(frozen=True)
class PrototypeSet:
    """Class centers plus their owning task class (-1 marks a distractor center)."""

    protos: np.ndarray
    owner_class: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.protos, dtype=np.float64)
        o = np.asarray(self.owner_class, dtype=np.int64)
        if p.ndim != 2 or p.shape[0] < 1 or o.shape != (p.shape[0],):
            raise ParameterError("protos must be (n_centers, d) with matching owner_class")
        object.__setattr__(self, "protos", p)
        object.__setattr__(self, "owner_class", o)


def _clamped_norm(x: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Norms clamped below at NORM_EPS, plus the mask of rows that were not clamped."""
    n = np.linalg.norm(x, axis=axis)
    active = n > NORM_EPS
    return np.maximum(n, NORM_EPS), active


def pair_similarity(metric: MetricSpec, q: np.ndarray, p: np.ndarray):
    """Similarity of every query against every shared center.

    q: (..., m, d); p: (..., c, d) -> logits (..., m, c) and a cache for the VJP.
    """
    kind = metric.kind
    if kind == "inner":
        z = np.einsum("...md,...cd->...mc", q, p)
        return z, (kind, q, p)
    if kind == "sns":
        n_p, act = _clamped_norm(p)
        z = np.einsum("...md,...cd->...mc", q, p) / n_p[..., None, :]
        return z, (kind, q, p, n_p, act, z)
    if kind == "euclidean":
        diff = q[..., :, None, :] - p[..., None, :, :]
        z = -np.sum(diff * diff, axis=-1)
        return z, (kind, diff)
    n_q, act_q = _clamped_norm(q)
    n_p, act_p = _clamped_norm(p)
    u = q / n_q[..., None]
    v = p / n_p[..., None]
    g = np.einsum("...md,...cd->...mc", u, v)
    z = g / metric.temperature
    return z, (kind, u, v, g, n_q, act_q, n_p, act_p, metric.temperature)


def pair_similarity_vjp(cache, dz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate dz through pair_similarity; returns (dq, dp)."""
    kind = cache[0]
    if kind == "inner":
        _, q, p = cache
        dq = np.einsum("...mc,...cd->...md", dz, p)
        dp = np.einsum("...mc,...md->...cd", dz, q)
        return dq, dp
    if kind == "sns":
        _, q, p, n_p, act, z = cache
        dzn = dz / n_p[..., None, :]
        dq = np.einsum("...mc,...cd->...md", dzn, p)
        dp = np.einsum("...mc,...md->...cd", dzn, q)
        coef = np.einsum("...mc,...mc->...c", dz, z) / n_p * act
        dp -= (coef / n_p)[..., None] * p
        return dq, dp
    if kind == "euclidean":
        _, diff = cache
        dq = -2.0 * np.einsum("...mc,...mcd->...md", dz, diff)
        dp = 2.0 * np.einsum("...mc,...mcd->...cd", dz, diff)
        return dq, dp
    _, u, v, g, n_q, act_q, n_p, act_p, tau = cache
    dg = dz / tau
    du = np.einsum("...mc,...cd->...md", dg, v)
    dv = np.einsum("...mc,...md->...cd", dg, u)
    dq = (du - u * np.sum(du * u, axis=-1, keepdims=True) * act_q[..., None]) / n_q[..., None]
    dp = (dv - v * np.sum(dv * v, axis=-1, keepdims=True) * act_p[..., None]) / n_p[..., None]
    return dq, dp


def grouped_similarity(metric: MetricSpec, q: np.ndarray, centers: np.ndarray):
    """Similarity of each query against its own center set.

    q: (..., m, d); centers: (..., m, c, d) -> logits (..., m, c) and a cache.
    """
    kind = metric.kind
    if kind == "inner":
        z = np.einsum("...md,...mcd->...mc", q, centers)
        return z, (kind, q, centers)
    if kind == "sns":
        n_c, act = _clamped_norm(centers)
        z = np.einsum("...md,...mcd->...mc", q, centers) / n_c
        return z, (kind, q, centers, n_c, act, z)
    if kind == "euclidean":
        diff = q[..., :, None, :] - centers
        z = -np.sum(diff * diff, axis=-1)
        return z, (kind, diff)
    n_q, act_q = _clamped_norm(q)
    n_c, act_c = _clamped_norm(centers)
    u = q / n_q[..., None]
    v = centers / n_c[..., None]
    g = np.einsum("...md,...mcd->...mc", u, v)
    z = g / metric.temperature
    return z, (kind, u, v, g, n_q, act_q, n_c, act_c, metric.temperature)


def grouped_similarity_vjp(cache, dz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate dz through grouped_similarity; returns (dq, dcenters)."""
    kind = cache[0]
    if kind == "inner":
        _, q, centers = cache
        dq = np.einsum("...mc,...mcd->...md", dz, centers)
        dc = dz[..., None] * q[..., :, None, :]
        return dq, dc
    if kind == "sns":
        _, q, centers, n_c, act, z = cache
        dzn = dz / n_c
        dq = np.einsum("...mc,...mcd->...md", dzn, centers)
        dc = dzn[..., None] * q[..., :, None, :]
        dc -= ((dz * z / n_c**2 * act))[..., None] * centers
        return dq, dc
    if kind == "euclidean":
        _, diff = cache
        dq = -2.0 * np.einsum("...mc,...mcd->...md", dz, diff)
        dc = 2.0 * dz[..., None] * diff
        return dq, dc
    _, u, v, g, n_q, act_q, n_c, act_c, tau = cache
    dg = dz / tau
    du = np.einsum("...mc,...mcd->...md", dg, v)
    dv = dg[..., None] * u[..., :, None, :]
    dq = (du - u * np.sum(du * u, axis=-1, keepdims=True) * act_q[..., None]) / n_q[..., None]
    dc = (dv - v * np.sum(dv * v, axis=-1, keepdims=True) * act_c[..., None]) / n_c[..., None]
    return dq, dc


def similarity(metric: MetricSpec, q: np.ndarray, p: np.ndarray) -> float:
    """Similarity between a single query vector and a single center."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise ParameterError("q and p must be vectors of equal dimension")
    z, _ = pair_similarity(metric, q[None, :], p[None, :])
    return float(z[0, 0])


def prototypes(support_emb: np.ndarray, task: Task) -> PrototypeSet:
    """Mean of each task class's K support embeddings.

    `support_emb` rows must follow task.support_idx in row-major order.
    """
    n, k = task.support_idx.shape
    emb = np.asarray(support_emb, dtype=np.float64)
    if emb.shape[0] != n * k:
        raise ParameterError(f"expected {n * k} support embeddings, got {emb.shape[0]}")
    protos = emb.reshape(n, k, -1).mean(axis=1)
    return PrototypeSet(protos=protos, owner_class=np.arange(n))


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the last axis, log-sum-exp stabilized."""
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def predict(metric: MetricSpec, q: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """Softmax class probabilities of one query over a center set."""
    q = np.asarray(q, dtype=np.float64)
    z, _ = pair_similarity(metric, q[None, :], protos.protos)
    return np.exp(log_softmax(z[0]))


def _uniform_shapes(tasks: list[Task]) -> bool:
    first = tasks[0]
    return all(
        t.support_idx.shape == first.support_idx.shape
        and t.query_idx.shape == first.query_idx.shape
        for t in tasks
    )


def _stacked_episode_loss(tasks: list[Task], all_emb: np.ndarray, metric: MetricSpec):
    """Loss and embedding gradient for tasks sharing one (N, K, Qe) shape."""
    t_count = len(tasks)
    n, k = tasks[0].support_idx.shape
    qe = tasks[0].query_idx.shape[1]
    s_idx = np.stack([t.support_idx for t in tasks])            # (T, N, K)
    q_idx = np.stack([t.query_idx for t in tasks])              # (T, N, Qe)
    q_rows = q_idx.reshape(t_count, n * qe)

    sup_emb = all_emb[s_idx]                                    # (T, N, K, d)
    protos = sup_emb.mean(axis=2)                               # (T, N, d)
    q_emb = all_emb[q_rows]                                     # (T, N*Qe, d)
    y = np.repeat(np.arange(n), qe)                             # class of each query row

    z, cache = pair_similarity(metric, q_emb, protos)           # (T, N*Qe, N)
    logp = log_softmax(z)
    loss = -logp[:, np.arange(n * qe), y].mean(axis=1).mean()

    dz = np.exp(logp)
    dz[:, np.arange(n * qe), y] -= 1.0
    dz /= t_count * n * qe
    dq, dp = pair_similarity_vjp(cache, dz)

    grad = np.zeros_like(all_emb)
    np.add.at(grad, q_rows.ravel(), dq.reshape(-1, all_emb.shape[1]))
    dsup = np.broadcast_to(dp[:, :, None, :] / k, sup_emb.shape)
    np.add.at(grad, s_idx.ravel(), dsup.reshape(-1, all_emb.shape[1]))
    return float(loss), grad


def episode_loss(
    tasks: list[Task], all_emb: np.ndarray, metric: MetricSpec
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all tasks' queries, plus d(loss)/d(embedding).

    The loss is the mean over tasks of the mean over each task's queries of
    ``-log p(true class)``. Gradients are accumulated in ascending task order
    (queries first, then supports), so results are bit-stable.
    """
    if not tasks:
        raise ParameterError("episode_loss needs at least one task")
    all_emb = np.asarray(all_emb, dtype=np.float64)
    hi = max(
        max(int(t.support_idx.max()) for t in tasks),
        max(int(t.query_idx.max()) for t in tasks),
    )
    if hi >= all_emb.shape[0]:
        raise ParameterError("task references row beyond the embedding matrix")
    if _uniform_shapes(tasks):
        return _stacked_episode_loss(tasks, all_emb, metric)
    total = 0.0
    grad = np.zeros_like(all_emb)
    for t in tasks:
        l_t, g_t = _stacked_episode_loss([t], all_emb, metric)
        total += l_t
        grad += g_t
    return total / len(tasks), grad / len(tasks)


def grad_norm_diagnostic(grad_emb: np.ndarray, referenced_rows) -> float:
    """Mean Euclidean norm of the per-row embedding gradients over the given rows."""
    rows = np.asarray(sorted(set(int(r) for r in np.asarray(referenced_rows).ravel())))
    if rows.size == 0:
        raise ParameterError("referenced_rows must be non-empty")
    return float(np.linalg.norm(grad_emb[rows], axis=1).mean())
