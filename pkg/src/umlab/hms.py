"""Hard mixed supports: per-query distractor centers built by mixup.

For every query, the most similar rows of the task's own support+query pool
that carry a different pseudo label are mined, pulled toward the query by a
mixup draw lambda ~ U(0, lambda_max), and appended to that query's center
set as singleton distractors. The cross-entropy target stays the query's
true class; the distractors only soak up softmax mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .sampler import Task
from .simcore import (
    MetricSpec,
    episode_loss,
    grouped_similarity,
    grouped_similarity_vjp,
    log_softmax,
    pair_similarity,
)


@dataclass(frozen=True)
class HmsConfig:
    """Neighbor count and the upper bound of the mixup coefficient."""

    m_neighbors: int = 10
    lambda_max: float = 0.5

    def __post_init__(self):
        if self.m_neighbors < 1:
            raise ParameterError("m_neighbors must be >= 1")
        if not 0.0 < self.lambda_max <= 1.0:
            raise ParameterError("lambda_max must be in (0, 1]")


def mine_neighbors(
    query_row: int,
    pool_emb: np.ndarray,
    pool_labels: np.ndarray,
    m_neighbors: int,
    metric: MetricSpec,
) -> list[int]:
    """Up-to-M pool rows most similar to the query, different pseudo label only.

    Results are ordered by descending similarity; equal similarities fall back
    to ascending row index. With no eligible rows the list is empty.
    """
    pool_emb = np.asarray(pool_emb, dtype=np.float64)
    pool_labels = np.asarray(pool_labels)
    if pool_emb.ndim != 2 or pool_labels.shape != (pool_emb.shape[0],):
        raise ParameterError("pool_emb must be (m, d) with one label per row")
    if not 0 <= query_row < pool_emb.shape[0]:
        raise ParameterError("query_row must index into the pool")
    if m_neighbors < 1:
        raise ParameterError("m_neighbors must be >= 1")
    z, _ = pair_similarity(metric, pool_emb[query_row][None, :], pool_emb)
    eligible = pool_labels != pool_labels[query_row]
    masked = np.where(eligible, z[0], -np.inf)
    # stable sort on the negated scores: descending similarity, index tie-break
    order = np.argsort(-masked, kind="stable")
    count = min(m_neighbors, int(eligible.sum()))
    return [int(i) for i in order[:count]]


def mix_supports(
    q_emb: np.ndarray, neighbor_embs: np.ndarray, lam: float
) -> np.ndarray:
    """Interpolate each neighbor toward the query: lam*q + (1-lam)*neighbor."""
    q_emb = np.asarray(q_emb, dtype=np.float64)
    neighbor_embs = np.asarray(neighbor_embs, dtype=np.float64)
    if q_emb.ndim != 1 or neighbor_embs.ndim != 2 or neighbor_embs.shape[1] != q_emb.size:
        raise ParameterError("need q_emb (d,) and neighbor_embs (m, d)")
    if not 0.0 <= lam <= 1.0:
        raise ParameterError("lam must be in [0, 1]")
    return lam * q_emb[None, :] + (1.0 - lam) * neighbor_embs


def _hms_stacked(
    tasks: list[Task], all_emb: np.ndarray, metric: MetricSpec,
    cfg: HmsConfig, rng,
):
    """HMS loss for tasks sharing one (N, K, Qe) shape, N >= 2."""
    t_count = len(tasks)
    n, k_shots = tasks[0].support_idx.shape
    qe = tasks[0].query_idx.shape[1]
    d = all_emb.shape[1]
    nq = n * qe
    s_rows = np.stack([t.support_idx.ravel() for t in tasks])      # (T, N*K)
    q_rows = np.stack([t.query_idx.ravel() for t in tasks])        # (T, NQ)
    pool_rows = np.concatenate([s_rows, q_rows], axis=1)           # (T, m_pool)
    class_maps = np.stack([t.class_map for t in tasks])            # (T, N)
    pool_labels = np.concatenate(
        [np.repeat(class_maps, k_shots, axis=1), np.repeat(class_maps, qe, axis=1)],
        axis=1,
    )

    lam = rng.uniform(0.0, cfg.lambda_max, size=(t_count, nq))

    sup_emb = all_emb[s_rows].reshape(t_count, n, k_shots, d)
    protos = sup_emb.mean(axis=2)                                  # (T, N, d)
    q_emb = all_emb[q_rows]                                        # (T, NQ, d)
    pool_emb = all_emb[pool_rows]                                  # (T, m_pool, d)

    sim, _ = pair_similarity(metric, q_emb, pool_emb)              # (T, NQ, m_pool)
    q_labels = np.repeat(class_maps, qe, axis=1)                   # (T, NQ)
    eligible = pool_labels[:, None, :] != q_labels[:, :, None]
    masked = np.where(eligible, sim, -np.inf)
    order = np.argsort(-masked, axis=-1, kind="stable")
    # every query has exactly (N-1)*(K+Qe) rows of another class
    m_eff = min(cfg.m_neighbors, (n - 1) * (k_shots + qe))
    nb_pos = order[:, :, :m_eff]                                   # (T, NQ, m_eff)
    t_ix = np.arange(t_count)[:, None, None]
    nb_emb = pool_emb[t_ix, nb_pos]                                # (T, NQ, m_eff, d)
    mixed = lam[:, :, None, None] * q_emb[:, :, None, :] + (
        1.0 - lam[:, :, None, None]
    ) * nb_emb

    centers = np.concatenate(
        [np.broadcast_to(protos[:, None, :, :], (t_count, nq, n, d)), mixed],
        axis=2,
    )                                                              # (T, NQ, N+m_eff, d)
    y = np.repeat(np.arange(n), qe)
    z, cache = grouped_similarity(metric, q_emb, centers)
    logp = log_softmax(z)
    loss = -logp[:, np.arange(nq), y].mean(axis=1).mean()

    dz = np.exp(logp)
    dz[:, np.arange(nq), y] -= 1.0
    dz /= t_count * nq
    dq, dcenters = grouped_similarity_vjp(cache, dz)
    dprot = dcenters[:, :, :n, :].sum(axis=1)                      # (T, N, d)
    dmix = dcenters[:, :, n:, :]                                   # (T, NQ, m_eff, d)
    dq = dq + (lam[:, :, None, None] * dmix).sum(axis=2)
    dnb = (1.0 - lam[:, :, None, None]) * dmix

    grad = np.zeros_like(all_emb)
    np.add.at(grad, q_rows.ravel(), dq.reshape(-1, d))
    dsup = np.broadcast_to(dprot[:, :, None, :] / k_shots, sup_emb.shape)
    np.add.at(grad, s_rows.ravel(), dsup.reshape(-1, d))
    nb_rows = pool_rows[t_ix, nb_pos]
    np.add.at(grad, nb_rows.ravel(), dnb.reshape(-1, d))
    return float(loss), grad


def hms_episode_loss(
    tasks: list[Task],
    all_emb: np.ndarray,
    metric: MetricSpec,
    cfg: HmsConfig,
    rng,
) -> tuple[float, np.ndarray]:
    """Episode loss with per-query mixed distractor centers.

    One lambda is drawn per query and shared by its distractors. Tasks with a
    single class have no eligible neighbors anywhere; they take the plain
    episode-loss path unchanged (and consume no lambda draws), so the result
    is bit-identical to episode_loss in that case.
    """
    if not tasks:
        raise ParameterError("hms_episode_loss needs at least one task")
    all_emb = np.asarray(all_emb, dtype=np.float64)
    first = tasks[0]
    uniform = all(
        t.support_idx.shape == first.support_idx.shape
        and t.query_idx.shape == first.query_idx.shape
        for t in tasks
    )
    if uniform:
        if first.num_ways == 1:
            return episode_loss(tasks, all_emb, metric)
        return _hms_stacked(tasks, all_emb, metric, cfg, rng)
    total = 0.0
    grad = np.zeros_like(all_emb)
    w = 1.0 / len(tasks)
    for t in tasks:
        if t.num_ways == 1:
            l_t, g_t = episode_loss([t], all_emb, metric)
        else:
            l_t, g_t = _hms_stacked([t], all_emb, metric, cfg, rng)
        total += w * l_t
        grad += w * g_t
    return total, grad
