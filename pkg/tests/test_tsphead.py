import dataclasses

import numpy as np
import pytest

from conftest import central_fd, rel_err
from umlab.errors import ParameterError
from umlab.sampler import Task
from umlab.simcore import MetricSpec
from umlab.streams import substream
from umlab.tsphead import (
    TspHeadConfig,
    TspHeadParams,
    attention_weights,
    identity_head,
    init_tsp_head,
    transform_set,
    tsp_episode_loss,
)


class TestConfigAndInit:
    def test_config_validation(self):
        with pytest.raises(ParameterError):
            TspHeadConfig(heads=0)
        with pytest.raises(ParameterError):
            TspHeadConfig(layers=0)
        with pytest.raises(ParameterError):
            TspHeadConfig(dropout=1.0)

    def test_init_shapes_and_determinism(self):
        cfg = TspHeadConfig(heads=3, layers=2, dropout=0.2)
        hp = init_tsp_head(cfg, dim=5, seed=7)
        assert hp.heads == 3 and hp.dim == 5 and len(hp.layers) == 2
        for lp in hp.layers:
            assert lp.w_q.shape == (3, 5, 5)
            assert lp.w_o.shape == (15, 5)
            assert np.array_equal(lp.ln_gain, np.ones(5))
            assert np.array_equal(lp.ln_bias, np.zeros(5))
        again = init_tsp_head(cfg, dim=5, seed=7)
        assert np.array_equal(hp.flatten(), again.flatten())
        assert not np.array_equal(hp.flatten(), init_tsp_head(cfg, 5, seed=8).flatten())

    def test_linear_identity_init(self):
        cfg = TspHeadConfig(heads=2, linear_identity_init=True)
        hp = init_tsp_head(cfg, dim=4, seed=0)
        assert np.array_equal(hp.layers[0].w_l, np.eye(4))

    def test_flatten_round_trip(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=2, layers=2), dim=3, seed=1)
        flat = hp.flatten()
        back = hp.with_flat(flat.copy())
        assert np.array_equal(back.flatten(), flat)
        with pytest.raises(ParameterError):
            hp.with_flat(flat[:-1])

    def test_param_validation(self):
        hp = init_tsp_head(TspHeadConfig(heads=2), dim=3, seed=0)
        bad = dataclasses.replace(hp.layers[0], w_q=np.zeros((1, 3, 3)))
        with pytest.raises(ParameterError):
            TspHeadParams(heads=2, dim=3, layers=(bad,))
        nan = dataclasses.replace(hp.layers[0], w_l=np.full((3, 3), np.nan))
        with pytest.raises(ParameterError):
            TspHeadParams(heads=2, dim=3, layers=(nan,))


class TestAttention:
    def test_rows_sum_to_one(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=4), dim=6, seed=2)
        x = rng.normal(size=6)
        xs = rng.normal(size=(9, 6))
        for head in range(1, 5):
            w = attention_weights(hp, head, x, xs)
            assert w.shape == (9,)
            assert abs(w.sum() - 1.0) < 1e-9
            assert np.all(w > 0)

    def test_matches_manual_softmax(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=2), dim=4, seed=3)
        x = rng.normal(size=4)
        xs = rng.normal(size=(5, 4))
        lp = hp.layers[0]
        logits = (xs @ lp.w_k[1]) @ (x @ lp.w_q[1]) / 2.0  # sqrt(4)
        want = np.exp(logits - logits.max())
        want /= want.sum()
        got = attention_weights(hp, 2, x, xs)
        assert np.allclose(got, want, atol=1e-12)

    def test_head_and_layer_bounds(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=2), dim=3, seed=0)
        x, xs = rng.normal(size=3), rng.normal(size=(4, 3))
        with pytest.raises(ParameterError):
            attention_weights(hp, 0, x, xs)
        with pytest.raises(ParameterError):
            attention_weights(hp, 3, x, xs)
        with pytest.raises(ParameterError):
            attention_weights(hp, 1, x, xs, layer=2)


class TestTransformSet:
    def test_identity_head_on_singleton(self, rng):
        # a singleton's attention weight is exactly 1, so psi == phi
        hp = identity_head(dim=5)
        x = rng.normal(size=(1, 5))
        out = transform_set(hp, x)
        assert np.array_equal(out.psi, x)

    def test_identity_head_multi_head_average(self, rng):
        hp = identity_head(dim=4, heads=3)
        x = rng.normal(size=(1, 4))
        assert np.allclose(transform_set(hp, x).psi, x, atol=1e-12)

    def test_permutation_equivariance_exact(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=3, dropout=0.0), dim=4, seed=5)
        x = rng.normal(size=(8, 4))
        perm = rng.permutation(8)
        a = transform_set(hp, x).psi[perm]
        b = transform_set(hp, x[perm]).psi
        assert np.array_equal(a, b)  # bit for bit, not just close

    def test_depends_on_whole_set(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=2, dropout=0.0), dim=3, seed=1)
        x = rng.normal(size=(5, 3))
        y = x.copy()
        y[4] += 1.0
        # row 0 unchanged on input, but its transform sees the edited set
        assert not np.allclose(transform_set(hp, x).psi[0], transform_set(hp, y).psi[0])

    def test_dropout_needs_stream_and_training(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=2, dropout=0.4), dim=3, seed=1)
        x = rng.normal(size=(4, 3))
        with pytest.raises(ParameterError):
            transform_set(hp, x, rng=None, training=True)
        a = transform_set(hp, x, rng=substream(1, "d"), training=True).psi
        b = transform_set(hp, x, rng=substream(2, "d"), training=True).psi
        assert not np.array_equal(a, b)
        # inference ignores dropout entirely
        assert np.array_equal(transform_set(hp, x).psi, transform_set(hp, x).psi)

    def test_shape_validation(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=2), dim=3, seed=0)
        with pytest.raises(ParameterError):
            transform_set(hp, rng.normal(size=(4, 2)))


def _tasks_and_emb(rng, t_count=2, n=3, k=1, qe=2, d=4):
    rows_per = n * (k + qe)
    tasks = []
    for t in range(t_count):
        off = t * rows_per
        tasks.append(
            Task(
                support_idx=off + np.arange(n * k).reshape(n, k),
                query_idx=off + n * k + np.arange(n * qe).reshape(n, qe),
                class_map=np.arange(n) + 10 * t,
            )
        )
    return tasks, rng.normal(size=(t_count * rows_per, d))


class TestTspEpisodeLoss:
    @pytest.mark.parametrize("layers", [1, 2])
    def test_embedding_gradient_against_fd(self, layers, rng):
        met = MetricSpec()
        hp = init_tsp_head(TspHeadConfig(heads=2, layers=layers, dropout=0.0), 4, seed=5)
        tasks, emb = _tasks_and_emb(rng)

        def f(flat):
            l, _, _ = tsp_episode_loss(tasks, flat.reshape(emb.shape), met, hp)
            return l

        loss, gemb, _ = tsp_episode_loss(tasks, emb, met, hp)
        fd = central_fd(f, emb.ravel().copy(), h=1e-5)
        assert rel_err(gemb.ravel(), fd) < 1e-5

    def test_head_gradient_against_fd(self, rng):
        met = MetricSpec(kind="euclidean")
        hp = init_tsp_head(TspHeadConfig(heads=2, layers=1, dropout=0.0), 4, seed=5)
        tasks, emb = _tasks_and_emb(rng)

        def f(flat):
            l, _, _ = tsp_episode_loss(tasks, emb, met, hp.with_flat(flat))
            return l

        _, _, gpar = tsp_episode_loss(tasks, emb, met, hp)
        # b_l shifts every psi row equally, which the euclidean loss ignores,
        # so its gradient is exactly zero; a larger h keeps the FD cancellation
        # noise on those components below the error floor
        fd = central_fd(f, hp.flatten(), h=1e-4)
        assert rel_err(gpar.flatten(), fd) < 1e-5

    def test_residual_variant_gradient(self, rng):
        met = MetricSpec()
        cfg = TspHeadConfig(heads=2, layers=1, dropout=0.0, residual=True)
        hp = init_tsp_head(cfg, 4, seed=6)
        tasks, emb = _tasks_and_emb(rng)

        def f(flat):
            l, _, _ = tsp_episode_loss(tasks, flat.reshape(emb.shape), met, hp)
            return l

        _, gemb, _ = tsp_episode_loss(tasks, emb, met, hp)
        fd = central_fd(f, emb.ravel().copy(), h=1e-5)
        assert rel_err(gemb.ravel(), fd) < 1e-5

    def test_dropout_draws_are_keyed(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=2, dropout=0.3), 4, seed=0)
        tasks, emb = _tasks_and_emb(rng)
        met = MetricSpec()
        l1, _, _ = tsp_episode_loss(tasks, emb, met, hp, substream(7, "d"), training=True)
        l2, _, _ = tsp_episode_loss(tasks, emb, met, hp, substream(7, "d"), training=True)
        l3, _, _ = tsp_episode_loss(tasks, emb, met, hp, substream(8, "d"), training=True)
        assert l1 == l2
        assert l1 != l3

    def test_ragged_shapes_average_per_task(self, rng):
        met = MetricSpec()
        hp = init_tsp_head(TspHeadConfig(heads=2, dropout=0.0), 4, seed=2)
        tasks, emb = _tasks_and_emb(rng, t_count=2)
        extra = Task(
            support_idx=np.array([[0, 1]]),
            query_idx=np.array([[2], ]),
            class_map=np.array([3]),
        )
        mixed = tasks + [extra]
        joint, _, _ = tsp_episode_loss(mixed, emb, met, hp)
        singles = [tsp_episode_loss([t], emb, met, hp)[0] for t in mixed]
        assert joint == pytest.approx(np.mean(singles), abs=1e-12)

    def test_validation(self, rng):
        hp = init_tsp_head(TspHeadConfig(heads=2), 4, seed=0)
        with pytest.raises(ParameterError):
            tsp_episode_loss([], rng.normal(size=(4, 4)), MetricSpec(), hp)
        tasks, _ = _tasks_and_emb(rng)
        with pytest.raises(ParameterError):
            tsp_episode_loss(tasks, rng.normal(size=(20, 3)), MetricSpec(), hp)
