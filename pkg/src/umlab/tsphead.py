"""Task-specific projection head: a set-to-set attention transform.

During meta-training each task's support-and-query embeddings are passed
jointly through one or more multi-head attention layers before the episode
loss is computed; at meta-test time the head is ignored and the raw
embeddings are used. Heads use full d x d projections and an (H*d) -> d
output projection, followed by layer norm, dropout, and a linear map.

transform_set is permutation-equivariant by construction: rows are brought
into a canonical (lexicographic) order, transformed there, and scattered
back, so reordering the input permutes the output bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError
from .sampler import Task
from .simcore import MetricSpec, log_softmax, pair_similarity, pair_similarity_vjp
from .streams import substream

LN_EPS = 1e-5


@dataclass(frozen=True)
class TspHeadConfig:
    """Head/layer counts plus the behavior switches carried onto the params."""

    heads: int = 8
    layers: int = 1
    dropout: float = 0.1
    residual: bool = False
    identity_l: bool = False
    linear_identity_init: bool = False

    def __post_init__(self):
        if self.heads < 1 or self.layers < 1:
            raise ParameterError("heads and layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class TspLayerParams:
    """One attention layer: per-head projections, output map, and the L stage."""

    w_q: np.ndarray  # (H, d, d)
    w_k: np.ndarray  # (H, d, d)
    w_v: np.ndarray  # (H, d, d)
    w_o: np.ndarray  # (H*d, d)
    ln_gain: np.ndarray  # (d,)
    ln_bias: np.ndarray  # (d,)
    w_l: np.ndarray  # (d, d)
    b_l: np.ndarray  # (d,)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (
            self.w_q, self.w_k, self.w_v, self.w_o,
            self.ln_gain, self.ln_bias, self.w_l, self.b_l,
        )


@dataclass(frozen=True)
class TspHeadParams:
    heads: int
    dim: int
    layers: tuple[TspLayerParams, ...]
    dropout_prob: float = 0.1
    residual: bool = False
    identity_l: bool = False

    def __post_init__(self):
        if self.heads < 1:
            raise ParameterError("heads must be >= 1")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ParameterError("dropout_prob must be in [0, 1)")
        h, d = self.heads, self.dim
        for layer in self.layers:
            if layer.w_q.shape != (h, d, d) or layer.w_o.shape != (h * d, d):
                raise ParameterError("layer shapes do not match heads/dim")
            if not all(np.all(np.isfinite(a)) for a in layer.arrays()):
                raise ParameterError("head parameters must be finite")

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [a.ravel() for layer in self.layers for a in layer.arrays()]
        )

    def with_flat(self, flat: np.ndarray) -> "TspHeadParams":
        if flat.size != self.flatten().size:
            raise ParameterError("flat vector size does not match head shapes")
        layers = []
        pos = 0
        for layer in self.layers:
            fields = []
            for a in layer.arrays():
                fields.append(flat[pos : pos + a.size].reshape(a.shape))
                pos += a.size
            layers.append(TspLayerParams(*fields))
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class TransformedSet:
    """Row-aligned transformed embeddings psi, same order as the input set."""

    psi: np.ndarray


def init_tsp_head(config: TspHeadConfig, dim: int, seed: int = 0) -> TspHeadParams:
    """Uniform +-1/sqrt(d) projections; layer norm at gain 1 / bias 0."""
    if dim < 1:
        raise ParameterError("dim must be >= 1")
    rng = substream(seed, "tsp-init")
    limit = 1.0 / np.sqrt(dim)
    h = config.heads
    layers = []
    for _ in range(config.layers):
        layers.append(
            TspLayerParams(
                w_q=rng.uniform(-limit, limit, size=(h, dim, dim)),
                w_k=rng.uniform(-limit, limit, size=(h, dim, dim)),
                w_v=rng.uniform(-limit, limit, size=(h, dim, dim)),
                w_o=rng.uniform(-limit, limit, size=(h * dim, dim)),
                ln_gain=np.ones(dim),
                ln_bias=np.zeros(dim),
                w_l=np.eye(dim)
                if config.linear_identity_init
                else rng.uniform(-limit, limit, size=(dim, dim)),
                b_l=np.zeros(dim),
            )
        )
    return TspHeadParams(
        heads=h,
        dim=dim,
        layers=tuple(layers),
        dropout_prob=config.dropout,
        residual=config.residual,
        identity_l=config.identity_l,
    )


def identity_head(dim: int, heads: int = 1) -> TspHeadParams:
    """A head whose projections are identities and whose L stage is a no-op.

    On a singleton set the attention weight is 1, so psi(x) == phi(x) exactly.
    """
    eye = np.eye(dim)
    layer = TspLayerParams(
        w_q=np.broadcast_to(eye, (heads, dim, dim)).copy(),
        w_k=np.broadcast_to(eye, (heads, dim, dim)).copy(),
        w_v=np.broadcast_to(eye, (heads, dim, dim)).copy(),
        w_o=np.tile(eye / heads, (heads, 1)),
        ln_gain=np.ones(dim),
        ln_bias=np.zeros(dim),
        w_l=eye.copy(),
        b_l=np.zeros(dim),
    )
    return TspHeadParams(
        heads=heads, dim=dim, layers=(layer,), dropout_prob=0.0, identity_l=True
    )


def attention_weights(
    params: TspHeadParams, head: int, x_emb: np.ndarray, set_embs: np.ndarray,
    layer: int = 1,
) -> np.ndarray:
    """Softmax attention of one element over the set, for a 1-based head index."""
    if not 1 <= head <= params.heads:
        raise ParameterError(f"head must be in 1..{params.heads}")
    if not 1 <= layer <= len(params.layers):
        raise ParameterError(f"layer must be in 1..{len(params.layers)}")
    x = np.asarray(x_emb, dtype=np.float64)
    xs = np.asarray(set_embs, dtype=np.float64)
    if x.ndim != 1 or xs.ndim != 2 or xs.shape[0] < 1 or xs.shape[1] != x.size:
        raise ParameterError("need x_emb (d,) and set_embs (m, d)")
    lp = params.layers[layer - 1]
    q = x @ lp.w_q[head - 1]
    keys = xs @ lp.w_k[head - 1]
    return _softmax_lastaxis(keys @ q / np.sqrt(params.dim))


def _canonical_order(x: np.ndarray) -> np.ndarray:
    """Lexicographic row order, primary key first column."""
    return np.lexsort(x.T[::-1])


def _softmax_lastaxis(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis. Mutates and returns its argument."""
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def _layers_forward(
    params: TspHeadParams,
    x: np.ndarray,
    rng,
    training: bool,
    need_cache: bool,
):
    """Run the attention stack on stacked sets x: (T, m, d)."""
    t_count, m, d = x.shape
    scale = 1.0 / np.sqrt(d)
    use_dropout = training and params.dropout_prob > 0.0
    if use_dropout and rng is None:
        raise ParameterError("dropout needs a random stream")
    caches = []
    h = params.heads
    cur = x
    for lp in params.layers:
        # broadcasted matmul: (T,1,m,d) @ (1,H,d,d) -> (T,H,m,d)
        q = cur[:, None] @ lp.w_q[None]
        k = cur[:, None] @ lp.w_k[None]
        v = cur[:, None] @ lp.w_v[None]
        logits = q @ k.transpose(0, 1, 3, 2)
        logits *= scale
        p_att = _softmax_lastaxis(logits)
        u = p_att @ v
        concat = u.transpose(0, 2, 1, 3).reshape(t_count, m, h * d)
        a = concat @ lp.w_o
        if params.residual:
            a = a + cur
        if params.identity_l:
            out = a
            xhat = inv = mask = y2 = None
        else:
            mu = a.mean(axis=-1, keepdims=True)
            var = a.var(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + LN_EPS)
            xhat = (a - mu) * inv
            y = lp.ln_gain * xhat + lp.ln_bias
            if use_dropout:
                keep = 1.0 - params.dropout_prob
                mask = (rng.random(y.shape) < keep) / keep
                y2 = y * mask
            else:
                mask = None
                y2 = y
            out = y2 @ lp.w_l + lp.b_l
        if need_cache:
            caches.append((cur, q, k, v, p_att, concat, xhat, inv, mask, y2))
        cur = out
    return cur, caches


def _layers_backward(params: TspHeadParams, caches, d_out: np.ndarray):
    """VJP through the attention stack; returns (d_input, per-layer grads)."""
    t_count, m, d = d_out.shape
    scale = 1.0 / np.sqrt(d)
    h = params.heads
    grads: list[TspLayerParams] = [None] * len(params.layers)
    g = d_out
    for li in range(len(params.layers) - 1, -1, -1):
        lp = params.layers[li]
        x_in, q, k, v, p_att, concat, xhat, inv, mask, y2 = caches[li]
        if params.identity_l:
            da = g
            d_gain = np.zeros_like(lp.ln_gain)
            d_bias = np.zeros_like(lp.ln_bias)
            d_wl = np.zeros_like(lp.w_l)
            d_bl = np.zeros_like(lp.b_l)
        else:
            d_wl = y2.reshape(-1, d).T @ g.reshape(-1, d)
            d_bl = g.sum(axis=(0, 1))
            dy2 = g @ lp.w_l.T
            dy = dy2 * mask if mask is not None else dy2
            d_gain = (dy * xhat).sum(axis=(0, 1))
            d_bias = dy.sum(axis=(0, 1))
            dxhat = dy * lp.ln_gain
            da = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        dx = da if params.residual else np.zeros_like(x_in)
        d_wo = concat.reshape(-1, h * d).T @ da.reshape(-1, d)
        du = (da @ lp.w_o.T).reshape(t_count, m, h, d).transpose(0, 2, 1, 3)
        dp = du @ v.transpose(0, 1, 3, 2)
        dv = p_att.transpose(0, 1, 3, 2) @ du
        dp -= np.sum(dp * p_att, axis=-1, keepdims=True)
        dlog = dp
        dlog *= p_att
        dq = dlog @ k
        dq *= scale
        dk = dlog.transpose(0, 1, 3, 2) @ q
        dk *= scale
        x_t = x_in.transpose(0, 2, 1)[:, None]                 # (T, 1, d, m)
        d_wq = (x_t @ dq).sum(axis=0)
        d_wk = (x_t @ dk).sum(axis=0)
        d_wv = (x_t @ dv).sum(axis=0)
        dx = dx + (
            dq @ lp.w_q.transpose(0, 2, 1)[None]
            + dk @ lp.w_k.transpose(0, 2, 1)[None]
            + dv @ lp.w_v.transpose(0, 2, 1)[None]
        ).sum(axis=1)
        grads[li] = TspLayerParams(
            w_q=d_wq, w_k=d_wk, w_v=d_wv, w_o=d_wo,
            ln_gain=d_gain, ln_bias=d_bias, w_l=d_wl, b_l=d_bl,
        )
        g = dx
    return g, grads


def transform_set(
    params: TspHeadParams,
    set_embs: np.ndarray,
    rng=None,
    training: bool = False,
) -> TransformedSet:
    """Jointly transform one set of embeddings; row order is preserved."""
    x = np.asarray(set_embs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != params.dim:
        raise ParameterError(f"set_embs must be (m, {params.dim})")
    order = _canonical_order(x)
    out, _ = _layers_forward(params, x[order][None], rng, training, need_cache=False)
    psi = np.empty_like(x)
    psi[order] = out[0]
    return TransformedSet(psi=psi)


def _tsp_stacked(
    tasks: list[Task],
    all_emb: np.ndarray,
    metric: MetricSpec,
    params: TspHeadParams,
    rng,
    training: bool,
):
    t_count = len(tasks)
    n, k_shots = tasks[0].support_idx.shape
    qe = tasks[0].query_idx.shape[1]
    d = all_emb.shape[1]
    rows = np.concatenate(
        [
            np.stack([t.support_idx.ravel() for t in tasks]),
            np.stack([t.query_idx.ravel() for t in tasks]),
        ],
        axis=1,
    )                                                           # (T, m)
    x = all_emb[rows]                                           # (T, m, d)
    orders = np.stack([_canonical_order(x[t]) for t in range(t_count)])
    inv_orders = np.argsort(orders, axis=1)
    xs = np.take_along_axis(x, orders[:, :, None], axis=1)
    out, caches = _layers_forward(params, xs, rng, training, need_cache=True)
    psi = np.take_along_axis(out, inv_orders[:, :, None], axis=1)

    ns = n * k_shots
    protos = psi[:, :ns].reshape(t_count, n, k_shots, d).mean(axis=2)
    psi_q = psi[:, ns:]
    y = np.repeat(np.arange(n), qe)
    z, cache = pair_similarity(metric, psi_q, protos)
    logp = log_softmax(z)
    loss = -logp[:, np.arange(n * qe), y].mean(axis=1).mean()

    dz = np.exp(logp)
    dz[:, np.arange(n * qe), y] -= 1.0
    dz /= t_count * n * qe
    dq, dprot = pair_similarity_vjp(cache, dz)
    dpsi = np.empty_like(psi)
    dpsi[:, :ns] = np.broadcast_to(
        dprot[:, :, None, :] / k_shots, (t_count, n, k_shots, d)
    ).reshape(t_count, ns, d)
    dpsi[:, ns:] = dq

    dout = np.take_along_axis(dpsi, orders[:, :, None], axis=1)
    dxs, layer_grads = _layers_backward(params, caches, dout)
    dx = np.take_along_axis(dxs, inv_orders[:, :, None], axis=1)
    grad_emb = np.zeros_like(all_emb)
    np.add.at(grad_emb, rows.ravel(), dx.reshape(-1, d))
    return float(loss), grad_emb, layer_grads


def _add_layer_grads(acc, extra, weight: float):
    out = []
    for a, b in zip(acc, extra):
        out.append(
            TspLayerParams(
                *[x + weight * y for x, y in zip(a.arrays(), b.arrays())]
            )
        )
    return out


def tsp_episode_loss(
    tasks: list[Task],
    all_emb: np.ndarray,
    metric: MetricSpec,
    params: TspHeadParams,
    rng=None,
    training: bool = True,
) -> tuple[float, np.ndarray, TspHeadParams]:
    """Episode loss on head-transformed embeddings, with both gradients.

    Each task's support-and-query rows are transformed jointly, the usual
    prototype cross-entropy is computed on psi, and gradients flow back to
    the raw embeddings and to every head parameter.
    """
    if not tasks:
        raise ParameterError("tsp_episode_loss needs at least one task")
    all_emb = np.asarray(all_emb, dtype=np.float64)
    if all_emb.ndim != 2 or all_emb.shape[1] != params.dim:
        raise ParameterError(f"all_emb must be (rows, {params.dim})")
    first = tasks[0]
    uniform = all(
        t.support_idx.shape == first.support_idx.shape
        and t.query_idx.shape == first.query_idx.shape
        for t in tasks
    )
    if uniform:
        loss, grad_emb, layer_grads = _tsp_stacked(
            tasks, all_emb, metric, params, rng, training
        )
    else:
        loss = 0.0
        grad_emb = np.zeros_like(all_emb)
        layer_grads = [
            TspLayerParams(*[np.zeros_like(a) for a in lp.arrays()])
            for lp in params.layers
        ]
        w = 1.0 / len(tasks)
        for t in tasks:
            l_t, g_t, lg_t = _tsp_stacked([t], all_emb, metric, params, rng, training)
            loss += w * l_t
            grad_emb += w * g_t
            layer_grads = _add_layer_grads(layer_grads, lg_t, w)
    grad_params = replace(params, layers=tuple(layer_grads))
    return loss, grad_emb, grad_params
