"""Meta-test evaluation: few-shot episodes with confidence intervals, and a
linear probe over frozen embeddings.

Evaluation always embeds with the checkpoint's MLP alone; a projection-head
section in the checkpoint is ignored entirely, so reports are byte-identical
with or without it. Episodes use per-index random substreams, which makes
results independent of how many worker threads score them.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datahub import Dataset
from .errors import FormatError, ParameterError
from .model import Checkpoint, forward
from .sampler import sample_meta_test_episode
from .simcore import MetricSpec, log_softmax, pair_similarity
from .streams import substream


@dataclass(frozen=True)
class EvalReport:
    """Mean few-shot accuracy with its 95% confidence half-width."""

    mean_accuracy: float
    ci95: float
    num_tasks: int
    way: int
    shot: int
    query: int
    metric: MetricSpec

    def __post_init__(self):
        if self.ci95 < 0 or self.num_tasks < 1:
            raise ParameterError("need ci95 >= 0 and num_tasks >= 1")


def ci95_half_width(accuracies: np.ndarray) -> float:
    """1.96 * sample std (n-1 divisor) / sqrt(n); zero for fewer than 2 tasks."""
    accuracies = np.asarray(accuracies, dtype=np.float64)
    n = accuracies.size
    if n < 2:
        return 0.0
    return float(1.96 * accuracies.std(ddof=1) / np.sqrt(n))


def _score_episode(
    emb: np.ndarray, data: Dataset, way: int, shot: int, query: int,
    metric: MetricSpec, seed: int, index: int,
) -> float:
    rng = substream(seed, "eval", index)
    task = sample_meta_test_episode(data, way, shot, query, rng)
    protos = emb[task.support_idx].mean(axis=1)                # (N, d)
    q = emb[task.query_idx].reshape(way * query, -1)
    z, _ = pair_similarity(metric, q, protos)
    pred = np.argmax(z, axis=1)
    truth = np.repeat(np.arange(way), query)
    return float(np.mean(pred == truth))


def evaluate_fsl(
    ckpt: Checkpoint,
    data: Dataset,
    way: int = 5,
    shot: int = 1,
    query: int = 15,
    num_tasks: int = 10000,
    metric: MetricSpec | None = None,
    seed: int = 0,
    threads: int = 1,
) -> EvalReport:
    """Accuracy over sampled N-way K-shot episodes, embedding with phi only."""
    if num_tasks < 1:
        raise ParameterError("num_tasks must be >= 1")
    if threads < 1:
        raise ParameterError("threads must be >= 1")
    metric = metric or MetricSpec()
    emb = forward(ckpt.params, data.features)
    accs = np.empty(num_tasks)

    def fill(lo: int, hi: int):
        for i in range(lo, hi):
            accs[i] = _score_episode(emb, data, way, shot, query, metric, seed, i)

    if threads == 1:
        fill(0, num_tasks)
    else:
        bounds = np.linspace(0, num_tasks, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(fill, bounds[b], bounds[b + 1]) for b in range(threads)
            ]
            for f in futures:
                f.result()
    return EvalReport(
        mean_accuracy=float(accs.mean()),
        ci95=ci95_half_width(accs),
        num_tasks=num_tasks,
        way=way,
        shot=shot,
        query=query,
        metric=metric,
    )


_REPORT_FLOAT_KEYS = ("mean_accuracy", "ci95", "temperature")
_REPORT_INT_KEYS = ("num_tasks", "way", "shot", "query")


def format_report(report: EvalReport) -> str:
    """One `key: value` line per field; floats at 4 decimals, LF endings."""
    lines = [
        f"mean_accuracy: {report.mean_accuracy:.4f}",
        f"ci95: {report.ci95:.4f}",
        f"num_tasks: {report.num_tasks}",
        f"way: {report.way}",
        f"shot: {report.shot}",
        f"query: {report.query}",
        f"metric: {report.metric.kind}",
        f"temperature: {report.metric.temperature:.4f}",
    ]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_report(report))


def read_report(path: str) -> EvalReport:
    """Parse a report file written by write_report."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    fields: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        if ":" not in raw:
            raise FormatError("expected 'key: value'", line=lineno)
        key, val = (part.strip() for part in raw.split(":", 1))
        try:
            if key in _REPORT_FLOAT_KEYS:
                fields[key] = float(val)
            elif key in _REPORT_INT_KEYS:
                fields[key] = int(val)
            elif key == "metric":
                fields[key] = val
            else:
                raise FormatError(f"unknown report key {key!r}", line=lineno)
        except ValueError:
            raise FormatError(f"bad value for {key!r}", line=lineno) from None
    missing = (
        set(_REPORT_FLOAT_KEYS) | set(_REPORT_INT_KEYS) | {"metric"}
    ) - set(fields)
    if missing:
        raise FormatError(f"missing report keys: {sorted(missing)}")
    return EvalReport(
        mean_accuracy=fields["mean_accuracy"],
        ci95=fields["ci95"],
        num_tasks=fields["num_tasks"],
        way=fields["way"],
        shot=fields["shot"],
        query=fields["query"],
        metric=MetricSpec(kind=fields["metric"], temperature=fields["temperature"]),
    )


@dataclass(frozen=True)
class ProbeConfig:
    """Linear-probe protocol: outer folds, L2 grid, inner CV, solver bounds."""

    folds: int = 10
    reg_grid: tuple[float, ...] = tuple(10.0**k for k in range(-4, 5))
    inner_cv_folds: int = 5
    max_iters: int = 300
    tol: float = 1e-6

    def __post_init__(self):
        if self.folds < 2 or self.inner_cv_folds < 2:
            raise ParameterError("folds and inner_cv_folds must be >= 2")
        if not self.reg_grid or any(r <= 0 for r in self.reg_grid):
            raise ParameterError("reg_grid must be non-empty and positive")


def _stratified_folds(labels: np.ndarray, folds: int, rng) -> np.ndarray:
    """Fold id per row; each class dealt round-robin after a shuffle."""
    assignment = np.empty(labels.size, dtype=np.int64)
    for c in range(int(labels.max()) + 1):
        rows = np.flatnonzero(labels == c)
        if rows.size < folds:
            raise ParameterError(
                f"class {c} has {rows.size} rows, needs >= {folds} for stratification"
            )
        perm = rng.permutation(rows)
        assignment[perm] = np.arange(perm.size) % folds
    return assignment


def _softmax_ce(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: np.ndarray, reg: float):
    logits = x @ w + b
    logp = log_softmax(logits)
    n = x.shape[0]
    loss = -logp[np.arange(n), y].mean() + 0.5 * reg * float(np.sum(w * w))
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    p /= n
    gw = x.T @ p + reg * w
    gb = p.sum(axis=0)
    return loss, gw, gb


def _fit_logreg(
    x: np.ndarray, y: np.ndarray, num_classes: int, reg: float,
    cfg: ProbeConfig, w0: np.ndarray | None = None, b0: np.ndarray | None = None,
):
    """Full-batch gradient descent with backtracking, to a gradient-norm tol."""
    w = np.zeros((x.shape[1], num_classes)) if w0 is None else w0.copy()
    b = np.zeros(num_classes) if b0 is None else b0.copy()
    loss, gw, gb = _softmax_ce(x, y, w, b, reg)
    step = 1.0
    for _ in range(cfg.max_iters):
        gnorm2 = float(np.sum(gw * gw) + np.sum(gb * gb))
        if np.sqrt(gnorm2) <= cfg.tol:
            break
        step = min(step * 2.0, 1e4)
        while True:
            w_new = w - step * gw
            b_new = b - step * gb
            loss_new, gw_new, gb_new = _softmax_ce(x, y, w_new, b_new, reg)
            if loss_new <= loss - 1e-4 * step * gnorm2 or step < 1e-12:
                break
            step *= 0.5
        w, b, loss, gw, gb = w_new, b_new, loss_new, gw_new, gb_new
    return w, b


def _accuracy(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.argmax(x @ w + b, axis=1) == y))


def linear_probe(
    ckpt: Checkpoint, data: Dataset, cfg: ProbeConfig | None = None, seed: int = 0
) -> float:
    """Mean held-out accuracy of an L2 logistic regression on frozen embeddings.

    Stratified outer folds; per fold the regularization weight is picked by
    inner cross-validation over the grid, then the model is refit on the full
    training split. Deterministic for a fixed seed.
    """
    cfg = cfg or ProbeConfig()
    if data.labels is None:
        raise ParameterError("linear_probe needs a labeled dataset")
    emb = forward(ckpt.params, data.features)
    labels = data.labels
    num_classes = data.num_classes
    fold_of = _stratified_folds(labels, cfg.folds, substream(seed, "probe-split"))

    fold_accs = []
    for f in range(cfg.folds):
        train_rows = np.flatnonzero(fold_of != f)
        test_rows = np.flatnonzero(fold_of == f)
        x_tr, y_tr = emb[train_rows], labels[train_rows]
        inner_of = _stratified_folds(
            y_tr, cfg.inner_cv_folds, substream(seed, "probe-inner", f)
        )
        grid_scores = np.zeros(len(cfg.reg_grid))
        for g in range(cfg.inner_cv_folds):
            tr = np.flatnonzero(inner_of != g)
            va = np.flatnonzero(inner_of == g)
            w = b = None
            for r, reg in enumerate(cfg.reg_grid):
                w, b = _fit_logreg(
                    x_tr[tr], y_tr[tr], num_classes, reg, cfg, w0=w, b0=b
                )
                grid_scores[r] += _accuracy(x_tr[va], y_tr[va], w, b)
        best = cfg.reg_grid[int(np.argmax(grid_scores))]
        w, b = _fit_logreg(x_tr, y_tr, num_classes, best, cfg)
        fold_accs.append(_accuracy(emb[test_rows], labels[test_rows], w, b))
    return float(np.mean(fold_accs))
