"""Task sampling: minibatch re-splitting for meta-training and labeled meta-test episodes.

Re-splitting turns one forward pass over a minibatch into many N-way K-shot
tasks; all tasks index into the same embedding matrix, so the average of their
losses drives a single update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datahub import Dataset, MiniBatch
from .errors import ParameterError, SamplingError


@dataclass(frozen=True)
class Task:
    """One support/query split. Index matrices reference rows of a backing matrix.

    ``support_idx`` is (N, K), ``query_idx`` is (N, Qe); row n of both holds
    instances of task class n, whose original (pseudo or true) label is
    ``class_map[n]``.
    """

    support_idx: np.ndarray
    query_idx: np.ndarray
    class_map: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.support_idx, dtype=np.int64)
        q = np.asarray(self.query_idx, dtype=np.int64)
        cm = np.asarray(self.class_map, dtype=np.int64)
        if s.ndim != 2 or q.ndim != 2 or s.shape[0] != q.shape[0] or cm.shape != (s.shape[0],):
            raise ParameterError("support (N,K), query (N,Qe), class_map (N,) shapes must agree")
        if len(np.unique(cm)) != len(cm):
            raise ParameterError("class_map entries must be distinct")
        if np.intersect1d(s.ravel(), q.ravel()).size:
            raise ParameterError("support and query index sets must be disjoint")
        object.__setattr__(self, "support_idx", s)
        object.__setattr__(self, "query_idx", q)
        object.__setattr__(self, "class_map", cm)

    @property
    def num_ways(self) -> int:
        return self.support_idx.shape[0]

    @property
    def num_shots(self) -> int:
        return self.support_idx.shape[1]

    @property
    def num_queries(self) -> int:
        return self.query_idx.shape[1]


@dataclass(frozen=True)
class EpisodeConfig:
    """Shape of one meta-training episode: T tasks of N-way K-shot with Q queries, over C anchors."""

    N: int = 16
    K: int = 1
    Q: int = 3
    T: int = 64
    C: int = 16

    def __post_init__(self):
        if not (1 <= self.N <= self.C):
            raise ParameterError(f"need 1 <= N <= C, got N={self.N}, C={self.C}")
        if self.K < 1 or self.Q < 1 or self.T < 1:
            raise ParameterError("K, Q, T must all be >= 1")


def _trusted_task(support: np.ndarray, query: np.ndarray, cm: np.ndarray) -> Task:
    # construction in ses_split guarantees the Task invariants; skip the checks
    t = object.__new__(Task)
    object.__setattr__(t, "support_idx", support)
    object.__setattr__(t, "query_idx", query)
    object.__setattr__(t, "class_map", cm)
    return t


def ses_split(batch: MiniBatch, cfg: EpisodeConfig, rng: np.random.Generator) -> list[Task]:
    """Re-split one minibatch into cfg.T independent tasks.

    Per task: pick N of the C pseudo classes without replacement, permute each
    chosen class's views, take the first K as support and the next Q as query.
    Task classes are relabeled 0..N-1 via class_map. All draws come from the
    provided stream in one batch, so the result is a pure function of the rng
    state and never depends on thread count.
    """
    if cfg.N > batch.C:
        raise ParameterError(f"N={cfg.N} exceeds batch pseudo-class count C={batch.C}")
    if cfg.K + cfg.Q > batch.views_per_class:
        raise ParameterError(
            f"K+Q={cfg.K + cfg.Q} exceeds views per pseudo class ({batch.views_per_class})"
        )
    views_per = batch.views_per_class
    # argsort of iid uniforms is a uniform random permutation per row
    classes = np.argsort(rng.random((cfg.T, batch.C)), axis=1)[:, : cfg.N]
    perms = np.argsort(rng.random((cfg.T, cfg.N, views_per)), axis=2)
    rows = classes[:, :, None] * views_per + perms[:, :, : cfg.K + cfg.Q]
    return [
        _trusted_task(rows[t, :, : cfg.K], rows[t, :, cfg.K :], classes[t])
        for t in range(cfg.T)
    ]


def sample_meta_test_episode(
    data: Dataset, N: int, K: int, Qe: int, rng: np.random.Generator
) -> Task:
    """Sample one labeled N-way K-shot episode with Qe queries per class.

    Classes are drawn uniformly without replacement; rows within a class are
    drawn without replacement and never augmented. Indices reference dataset rows.
    """
    if data.labels is None:
        raise SamplingError("meta-test episode sampling requires a labeled dataset")
    num_classes = data.num_classes
    if N < 1 or N > num_classes:
        raise SamplingError(f"cannot sample {N} ways from {num_classes} classes")
    if K < 1 or Qe < 1:
        raise ParameterError("K and Qe must be >= 1")
    classes = rng.choice(num_classes, size=N, replace=False)
    support = np.empty((N, K), dtype=np.int64)
    query = np.empty((N, Qe), dtype=np.int64)
    for n, c in enumerate(classes):
        rows = np.flatnonzero(data.labels == c)
        if rows.size < K + Qe:
            raise SamplingError(
                f"class {int(c)} has {rows.size} rows, needs {K + Qe} for K={K}, Qe={Qe}"
            )
        picked = rng.choice(rows, size=K + Qe, replace=False)
        support[n] = picked[:K]
        query[n] = picked[K:]
    return Task(support_idx=support, query_idx=query, class_map=classes)
