import numpy as np
import pytest

from conftest import central_fd, rel_err
from umlab.errors import ParameterError
from umlab.sampler import Task
from umlab.simcore import (
    METRIC_KINDS,
    MetricSpec,
    PrototypeSet,
    episode_loss,
    grad_norm_diagnostic,
    grouped_similarity,
    grouped_similarity_vjp,
    log_softmax,
    pair_similarity,
    pair_similarity_vjp,
    predict,
    prototypes,
    similarity,
)
from umlab.streams import substream


def naive_similarity(kind: str, q: np.ndarray, p: np.ndarray, tau: float) -> float:
    """Direct per-pair formulas, independent of the vectorized implementation."""
    if kind == "inner":
        return float(q @ p)
    if kind == "sns":
        return float(q @ p / np.linalg.norm(p))
    if kind == "euclidean":
        return float(-np.sum((q - p) ** 2))
    return float(q @ p / (np.linalg.norm(q) * np.linalg.norm(p) * tau))


class TestMetricValues:
    @pytest.mark.parametrize("kind", METRIC_KINDS)
    def test_matches_naive_formula(self, kind, rng):
        met = MetricSpec(kind=kind, temperature=0.7)
        q = rng.normal(size=(5, 3))
        p = rng.normal(size=(4, 3))
        z, _ = pair_similarity(met, q, p)
        for i in range(5):
            for j in range(4):
                want = naive_similarity(kind, q[i], p[j], 0.7)
                assert z[i, j] == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_sns_equals_norm_times_cosine(self, rng):
        sns = MetricSpec(kind="sns")
        cos = MetricSpec(kind="cosine", temperature=1.0)
        for _ in range(200):
            q = rng.normal(size=(1, 4))
            p = rng.normal(size=(1, 4))
            zs, _ = pair_similarity(sns, q, p)
            zc, _ = pair_similarity(cos, q, p)
            assert abs(zs[0, 0] - np.linalg.norm(q) * zc[0, 0]) < 1e-12

    def test_batched_leading_dims(self, rng):
        met = MetricSpec(kind="euclidean")
        q = rng.normal(size=(3, 5, 2))
        p = rng.normal(size=(3, 4, 2))
        z, _ = pair_similarity(met, q, p)
        assert z.shape == (3, 5, 4)
        for t in range(3):
            zt, _ = pair_similarity(met, q[t], p[t])
            assert np.array_equal(z[t], zt)

    def test_similarity_scalar_wrapper(self, rng):
        q, p = rng.normal(size=4), rng.normal(size=4)
        assert similarity(MetricSpec(kind="inner"), q, p) == pytest.approx(q @ p)
        with pytest.raises(ParameterError):
            similarity(MetricSpec(), q, p[:3])

    def test_grouped_matches_pairwise_per_row(self, rng):
        # grouped with centers[i] == p reproduces pair_similarity row i
        met = MetricSpec(kind="sns")
        q = rng.normal(size=(6, 3))
        p = rng.normal(size=(4, 3))
        centers = np.broadcast_to(p, (6, 4, 3)).copy()
        zg, _ = grouped_similarity(met, q, centers)
        zp, _ = pair_similarity(met, q, p)
        assert np.allclose(zg, zp, atol=1e-15)

    def test_metric_spec_validation(self):
        with pytest.raises(ParameterError):
            MetricSpec(kind="manhattan")
        with pytest.raises(ParameterError):
            MetricSpec(temperature=0.0)


class TestSimilarityGradients:
    @pytest.mark.parametrize("kind", METRIC_KINDS)
    def test_pair_vjp_against_fd(self, kind, rng):
        met = MetricSpec(kind=kind, temperature=0.6)
        q0 = rng.normal(size=(4, 3))
        p0 = rng.normal(size=(3, 3))
        w = rng.normal(size=(4, 3))  # fixed cotangent

        def f(flat):
            q = flat[:12].reshape(4, 3)
            p = flat[12:].reshape(3, 3)
            z, _ = pair_similarity(met, q, p)
            return float((z * w).sum())

        z, cache = pair_similarity(met, q0, p0)
        dq, dp = pair_similarity_vjp(cache, w)
        flat0 = np.concatenate([q0.ravel(), p0.ravel()])
        fd = central_fd(f, flat0)
        assert rel_err(np.concatenate([dq.ravel(), dp.ravel()]), fd) < 1e-6

    @pytest.mark.parametrize("kind", METRIC_KINDS)
    def test_grouped_vjp_against_fd(self, kind, rng):
        met = MetricSpec(kind=kind, temperature=0.6)
        q0 = rng.normal(size=(3, 2))
        c0 = rng.normal(size=(3, 4, 2))
        w = rng.normal(size=(3, 4))

        def f(flat):
            q = flat[:6].reshape(3, 2)
            c = flat[6:].reshape(3, 4, 2)
            z, _ = grouped_similarity(met, q, c)
            return float((z * w).sum())

        z, cache = grouped_similarity(met, q0, c0)
        dq, dc = grouped_similarity_vjp(cache, w)
        fd = central_fd(f, np.concatenate([q0.ravel(), c0.ravel()]))
        assert rel_err(np.concatenate([dq.ravel(), dc.ravel()]), fd) < 1e-6


class TestPrototypesAndPredict:
    def test_prototypes_are_class_means(self, rng):
        task = Task(
            support_idx=np.array([[0, 1], [2, 3]]),
            query_idx=np.array([[4], [5]]),
            class_map=np.array([0, 1]),
        )
        sup = rng.normal(size=(4, 3))
        ps = prototypes(sup, task)
        assert np.allclose(ps.protos[0], sup[:2].mean(axis=0))
        assert np.allclose(ps.protos[1], sup[2:].mean(axis=0))
        assert np.array_equal(ps.owner_class, [0, 1])

    def test_prototypes_row_count_check(self, rng):
        task = Task(
            support_idx=np.array([[0], [1]]),
            query_idx=np.array([[2], [3]]),
            class_map=np.array([0, 1]),
        )
        with pytest.raises(ParameterError):
            prototypes(rng.normal(size=(3, 2)), task)

    def test_predict_is_softmax_over_logits(self, rng):
        met = MetricSpec()
        q = rng.normal(size=4)
        ps = PrototypeSet(protos=rng.normal(size=(3, 4)), owner_class=np.arange(3))
        probs = predict(met, q, ps)
        assert probs.shape == (3,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        z, _ = pair_similarity(met, q[None], ps.protos)
        assert np.argmax(probs) == np.argmax(z[0])

    def test_log_softmax_shift_invariant(self, rng):
        z = rng.normal(size=(3, 5))
        assert np.allclose(log_softmax(z), log_softmax(z + 100.0), atol=1e-12)
        naive = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        assert np.allclose(log_softmax(z), naive, atol=1e-12)


def _toy_tasks(rng, t_count=3, n=3, k=2, qe=2):
    rows_per = n * (k + qe)
    tasks = []
    for t in range(t_count):
        off = t * rows_per
        sup = off + np.arange(n * k).reshape(n, k)
        qry = off + n * k + np.arange(n * qe).reshape(n, qe)
        tasks.append(
            Task(support_idx=sup, query_idx=qry, class_map=rng.permutation(10)[:n])
        )
    emb = rng.normal(size=(t_count * rows_per, 4))
    return tasks, emb


def naive_episode_loss(tasks, emb, met):
    """Per-task, per-query cross entropy computed with explicit loops."""
    per_task = []
    for t in tasks:
        protos = np.stack([emb[r].mean(axis=0) for r in t.support_idx])
        losses = []
        for n in range(t.num_ways):
            for r in t.query_idx[n]:
                z = np.array(
                    [naive_similarity(met.kind, emb[r], p, met.temperature) for p in protos]
                )
                losses.append(-(z[n] - np.log(np.exp(z - z.max()).sum()) - z.max()))
        per_task.append(np.mean(losses))
    return float(np.mean(per_task))


class TestEpisodeLoss:
    @pytest.mark.parametrize("kind", METRIC_KINDS)
    def test_matches_naive_loops(self, kind, rng):
        met = MetricSpec(kind=kind, temperature=0.8)
        tasks, emb = _toy_tasks(rng)
        loss, _ = episode_loss(tasks, emb, met)
        assert loss == pytest.approx(naive_episode_loss(tasks, emb, met), rel=1e-10)

    @pytest.mark.parametrize("kind", METRIC_KINDS)
    def test_gradient_against_fd(self, kind, rng):
        met = MetricSpec(kind=kind, temperature=0.8)
        tasks, emb = _toy_tasks(rng, t_count=2)

        def f(flat):
            l, _ = episode_loss(tasks, flat.reshape(emb.shape), met)
            return l

        _, grad = episode_loss(tasks, emb, met)
        fd = central_fd(f, emb.ravel().copy())
        assert rel_err(grad.ravel(), fd) < 1e-6

    def test_mean_over_tasks_equals_single_task_mean(self, rng):
        # the T-task episode loss is the mean of the single-task losses
        met = MetricSpec()
        tasks, emb = _toy_tasks(rng, t_count=5)
        joint, _ = episode_loss(tasks, emb, met)
        singles = [episode_loss([t], emb, met)[0] for t in tasks]
        assert abs(joint - np.mean(singles)) < 1e-12

    def test_ragged_task_shapes_fall_back_to_per_task_path(self, rng):
        met = MetricSpec()
        tasks, emb = _toy_tasks(rng, t_count=2)
        extra = Task(
            support_idx=np.array([[0, 1, 2]]),
            query_idx=np.array([[3, 4]]),
            class_map=np.array([0]),
        )
        mixed = tasks + [extra]
        joint, _ = episode_loss(mixed, emb, met)
        singles = [episode_loss([t], emb, met)[0] for t in mixed]
        assert joint == pytest.approx(np.mean(singles), abs=1e-12)

    def test_row_bounds_checked(self, rng):
        tasks, emb = _toy_tasks(rng, t_count=1)
        with pytest.raises(ParameterError):
            episode_loss(tasks, emb[:-1], MetricSpec())

    def test_empty_task_list(self, rng):
        with pytest.raises(ParameterError):
            episode_loss([], rng.normal(size=(4, 2)), MetricSpec())


class TestGradDiagnostic:
    def test_mean_row_norm(self):
        g = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]])
        assert grad_norm_diagnostic(g, [0, 2]) == pytest.approx(3.0)
        # duplicates collapse
        assert grad_norm_diagnostic(g, [0, 0, 2]) == pytest.approx(3.0)

    def test_empty_rows_rejected(self):
        with pytest.raises(ParameterError):
            grad_norm_diagnostic(np.zeros((2, 2)), [])
