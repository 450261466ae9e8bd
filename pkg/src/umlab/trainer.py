"""Episodic training: optimizers, cosine schedule, the UML loop, fine-tuning.

Every episode builds one minibatch, embeds it once, re-splits the embeddings
into T tasks, computes the mode-specific loss, and takes exactly one
optimizer step. Random draws come from counter-based substreams keyed by
(seed, purpose, epoch, episode), so runs are bit-reproducible; gradient
accumulation follows a fixed task order, making results independent of any
worker-thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datahub import Dataset, MiniBatch, default_policy, make_pseudo_batch
from .errors import ConfigError, ParameterError
from .hms import HmsConfig, hms_episode_loss
from .model import Checkpoint, ModelSpec, Parameters, backward, forward, init
from .sampler import EpisodeConfig, Task, ses_split
from .simcore import MetricSpec, episode_loss, grad_norm_diagnostic
from .streams import substream
from .tsphead import (
    TspHeadConfig,
    TspHeadParams,
    _canonical_order,
    _layers_backward,
    _layers_forward,
    init_tsp_head,
    tsp_episode_loss,
)

MODES = ("baseline", "hms", "tsphead", "hms+tsp")

OPTIMIZER_KINDS = ("adam", "sgd_momentum")


@dataclass(frozen=True)
class OptimizerSpec:
    """Adam or SGD-with-momentum hyperparameters; `lr` is the initial rate."""

    kind: str = "adam"
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ParameterError(f"optimizer kind must be one of {OPTIMIZER_KINDS}")
        if self.lr <= 0:
            raise ParameterError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and 0 <= self.momentum < 1):
            raise ParameterError("beta1, beta2, momentum must be in [0, 1)")
        if self.eps <= 0:
            raise ParameterError("eps must be > 0")


@dataclass
class OptimizerState:
    """Step counter plus the moment (Adam) or velocity (SGD) buffers."""

    step: int
    m: np.ndarray
    v: np.ndarray


def init_optimizer(num_params: int) -> OptimizerState:
    return OptimizerState(step=0, m=np.zeros(num_params), v=np.zeros(num_params))


def cosine_anneal(lr0: float, lr_min: float, t: int, total: int) -> float:
    """lr_min + 0.5*(lr0 - lr_min)*(1 + cos(pi*t/total))."""
    if total < 1:
        raise ParameterError("total must be >= 1")
    if not 0 <= t <= total:
        raise ParameterError(f"t must be in 0..{total}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * t / total))


def optimizer_step(
    spec: OptimizerSpec,
    state: OptimizerState,
    params: np.ndarray,
    grads: np.ndarray,
    lr: float,
) -> tuple[OptimizerState, np.ndarray]:
    """One update on flat parameter/gradient vectors."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ParameterError("params, grads, and state must have matching sizes")
    step = state.step + 1
    if spec.kind == "adam":
        m = spec.beta1 * state.m + (1.0 - spec.beta1) * grads
        v = spec.beta2 * state.v + (1.0 - spec.beta2) * grads * grads
        m_hat = m / (1.0 - spec.beta1**step)
        v_hat = v / (1.0 - spec.beta2**step)
        new = params - lr * m_hat / (np.sqrt(v_hat) + spec.eps)
        return OptimizerState(step=step, m=m, v=v), new
    vel = spec.momentum * state.v + grads
    new = params - lr * vel
    return OptimizerState(step=step, m=state.m, v=vel), new


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs; desk-scale defaults."""

    mode: str = "baseline"
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    metric: MetricSpec = field(default_factory=MetricSpec)
    hms: HmsConfig = field(default_factory=HmsConfig)
    tsp: TspHeadConfig = field(default_factory=TspHeadConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    epochs: int = 20
    episodes_per_epoch: int = 100
    lr_min: float = 0.0
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 16
    activation: str = "relu"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ParameterError("epochs must be >= 0, episodes_per_epoch >= 1")
        if not 0 <= self.lr_min < self.optimizer.lr:
            raise ParameterError("need lr > lr_min >= 0")
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ParameterError("embed_dim and all hidden dims must be >= 1")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    mean_grad_norm: float
    lr: float
    wall_time: float


@dataclass(frozen=True)
class TrainReport:
    """One record per epoch plus the optimizer's total step count."""

    epochs: tuple[EpochStats, ...]
    total_steps: int


def _uses_tsp(mode: str) -> bool:
    return mode in ("tsphead", "hms+tsp")


def _combined_loss(
    tasks: list[Task],
    all_emb: np.ndarray,
    metric: MetricSpec,
    hms_cfg: HmsConfig,
    tsp_params: TspHeadParams,
    rng_hms,
    rng_drop,
    training: bool,
):
    """Experimental hms+tsp mode: mixed supports built on head-transformed sets."""
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
    )
    x = all_emb[rows]
    orders = np.stack([_canonical_order(x[t]) for t in range(t_count)])
    inv_orders = np.argsort(orders, axis=1)
    xs = np.take_along_axis(x, orders[:, :, None], axis=1)
    out, caches = _layers_forward(tsp_params, xs, rng_drop, training, need_cache=True)
    psi = np.take_along_axis(out, inv_orders[:, :, None], axis=1)

    ns = n * k_shots
    local = Task(
        support_idx=np.arange(ns).reshape(n, k_shots),
        query_idx=np.arange(ns, ns + n * qe).reshape(n, qe),
        class_map=tasks[0].class_map,
    )
    loss = 0.0
    dpsi = np.empty_like(psi)
    w = 1.0 / t_count
    for t in range(t_count):
        local_t = replace(local, class_map=tasks[t].class_map)
        l_t, g_t = hms_episode_loss([local_t], psi[t], metric, hms_cfg, rng_hms)
        loss += w * l_t
        dpsi[t] = w * g_t
    dout = np.take_along_axis(dpsi, orders[:, :, None], axis=1)
    dxs, layer_grads = _layers_backward(tsp_params, caches, dout)
    dx = np.take_along_axis(dxs, inv_orders[:, :, None], axis=1)
    grad_emb = np.zeros_like(all_emb)
    np.add.at(grad_emb, rows.ravel(), dx.reshape(-1, d))
    return loss, grad_emb, replace(tsp_params, layers=tuple(layer_grads))


def _episode_step(
    config: TrainConfig,
    params: Parameters,
    tsp_params: TspHeadParams | None,
    batch: MiniBatch,
    epoch: int,
    episode: int,
):
    """Loss and flat gradient for one episode; pure given its inputs."""
    emb = forward(params, batch.views)
    tasks = ses_split(
        batch, config.episode, substream(config.seed, "split", epoch, episode)
    )
    if config.mode == "baseline":
        loss, grad_emb = episode_loss(tasks, emb, config.metric)
        grad_tsp = None
    elif config.mode == "hms":
        loss, grad_emb = hms_episode_loss(
            tasks, emb, config.metric, config.hms,
            substream(config.seed, "hms", epoch, episode),
        )
        grad_tsp = None
    elif config.mode == "tsphead":
        loss, grad_emb, grad_tsp = tsp_episode_loss(
            tasks, emb, config.metric, tsp_params,
            substream(config.seed, "dropout", epoch, episode), training=True,
        )
    else:
        loss, grad_emb, grad_tsp = _combined_loss(
            tasks, emb, config.metric, config.hms, tsp_params,
            substream(config.seed, "hms", epoch, episode),
            substream(config.seed, "dropout", epoch, episode),
            training=True,
        )
    grad_params, _ = backward(params, batch.views, grad_emb)
    rows = np.concatenate(
        [t.support_idx.ravel() for t in tasks] + [t.query_idx.ravel() for t in tasks]
    )
    diag = grad_norm_diagnostic(grad_emb, rows)
    return loss, grad_params, grad_tsp, diag


def _episodic_fit(
    config: TrainConfig,
    params: Parameters,
    tsp_params: TspHeadParams | None,
    batch_fn,
) -> tuple[Parameters, TspHeadParams | None, TrainReport]:
    """Shared loop for train and finetune; batch_fn(epoch, episode) -> MiniBatch."""
    n_model = params.flatten().size
    flat = params.flatten()
    if tsp_params is not None:
        flat = np.concatenate([flat, tsp_params.flatten()])
    state = init_optimizer(flat.size)
    stats = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = cosine_anneal(config.optimizer.lr, config.lr_min, epoch, config.epochs)
        losses = np.empty(config.episodes_per_epoch)
        diags = np.empty(config.episodes_per_epoch)
        for ep in range(config.episodes_per_epoch):
            batch = batch_fn(epoch, ep)
            loss, grad_params, grad_tsp, diag = _episode_step(
                config, params, tsp_params, batch, epoch, ep
            )
            gflat = grad_params.flatten()
            if tsp_params is not None:
                gtsp = (
                    grad_tsp.flatten()
                    if grad_tsp is not None
                    else np.zeros(flat.size - n_model)
                )
                gflat = np.concatenate([gflat, gtsp])
            state, flat = optimizer_step(config.optimizer, state, flat, gflat, lr)
            params = params.with_flat(flat[:n_model])
            if tsp_params is not None:
                tsp_params = tsp_params.with_flat(flat[n_model:])
            losses[ep] = loss
            diags[ep] = diag
        stats.append(
            EpochStats(
                epoch=epoch,
                mean_loss=float(losses.mean()),
                mean_grad_norm=float(diags.mean()),
                lr=float(lr),
                wall_time=time.perf_counter() - t0,
            )
        )
    return params, tsp_params, TrainReport(epochs=tuple(stats), total_steps=state.step)


def train(
    config: TrainConfig, data: Dataset, threads: int = 1
) -> tuple[Checkpoint, TrainReport]:
    """Unsupervised meta-training over pseudo classes built from augmentations.

    `threads` is accepted for interface symmetry with evaluation; episode math
    is vectorized with a fixed reduction order, so results never depend on it.
    """
    if data.num_rows < config.episode.C:
        raise ParameterError(
            f"dataset has {data.num_rows} rows, need >= C={config.episode.C}"
        )
    spec = ModelSpec(
        layer_dims=(data.dim, *config.hidden_dims, config.embed_dim),
        activation=config.activation,
        seed=config.seed,
    )
    params = init(spec)
    tsp_params = (
        init_tsp_head(config.tsp, config.embed_dim, config.seed)
        if _uses_tsp(config.mode)
        else None
    )
    policy = default_policy(float(data.features.std()))
    ep = config.episode

    def batch_fn(epoch: int, episode: int) -> MiniBatch:
        rng = substream(config.seed, "batch", epoch, episode)
        return make_pseudo_batch(data, ep.C, ep.K, ep.Q, policy, rng)

    params, tsp_params, report = _episodic_fit(config, params, tsp_params, batch_fn)
    return Checkpoint(params=params, tsp=tsp_params), report


def _retained_rows(
    data: Dataset, label_ratio: float, need: int, seed: int
) -> list[np.ndarray]:
    """Per class, a deterministic random subset of ceil(ratio*rows) rows."""
    rng = substream(seed, "label-subset")
    retained = []
    for c in range(data.num_classes):
        rows = np.flatnonzero(data.labels == c)
        keep = int(np.ceil(label_ratio * rows.size))
        chosen = np.sort(rng.choice(rows, size=keep, replace=False))
        if chosen.size < need:
            raise ParameterError(
                f"class {c} retains {chosen.size} rows at ratio {label_ratio}, "
                f"needs >= {need}"
            )
        retained.append(chosen)
    return retained


def finetune(
    ckpt: Checkpoint,
    labeled_data: Dataset,
    label_ratio: float,
    config: TrainConfig,
) -> Checkpoint:
    """Supervised episodic training from a checkpoint on a label subset.

    Episodes draw C true classes and K+Q real instances per class (no
    augmentation); SES re-splitting and the configured metric apply as in the
    unsupervised phase.
    """
    if labeled_data.labels is None:
        raise ParameterError("finetune needs a labeled dataset")
    if not 0.0 < label_ratio <= 1.0:
        raise ParameterError("label_ratio must be in (0, 1]")
    if ckpt.params.in_dim != labeled_data.dim:
        raise ParameterError(
            f"checkpoint expects {ckpt.params.in_dim}-dim rows, "
            f"data has {labeled_data.dim}"
        )
    ep = config.episode
    if labeled_data.num_classes < ep.C:
        raise ParameterError(
            f"need >= C={ep.C} classes, dataset has {labeled_data.num_classes}"
        )
    retained = _retained_rows(labeled_data, label_ratio, ep.K + ep.Q, config.seed)
    if config.epochs == 0:
        return ckpt

    params = ckpt.params
    tsp_params = None
    if _uses_tsp(config.mode):
        tsp_params = ckpt.tsp
        if tsp_params is None:
            tsp_params = init_tsp_head(config.tsp, params.out_dim, config.seed)
    views_per = ep.K + ep.Q
    feats = labeled_data.features

    def batch_fn(epoch: int, episode: int) -> MiniBatch:
        rng = substream(config.seed, "ft-batch", epoch, episode)
        classes = rng.choice(labeled_data.num_classes, size=ep.C, replace=False)
        rows = np.concatenate(
            [rng.choice(retained[c], size=views_per, replace=False) for c in classes]
        )
        return MiniBatch(
            views=feats[rows],
            pseudo_labels=np.repeat(np.arange(ep.C), views_per),
            anchor_ids=np.repeat(classes, views_per),
            C=ep.C,
            K=ep.K,
            Q=ep.Q,
        )

    params, tsp_params, _ = _episodic_fit(config, params, tsp_params, batch_fn)
    return Checkpoint(
        params=params, tsp=tsp_params if tsp_params is not None else ckpt.tsp
    )


def default_finetune_config(base: TrainConfig | None = None) -> TrainConfig:
    """Fine-tuning defaults: same machinery, lr 1e-4, 10 short epochs."""
    base = base or TrainConfig()
    return replace(
        base,
        optimizer=replace(base.optimizer, lr=1e-4),
        epochs=10,
        episodes_per_epoch=10,
    )


_CONFIG_KEYS = {
    "mode": str,
    "metric": str,
    "temperature": float,
    "ways": int,
    "shots": int,
    "queries": int,
    "tasks": int,
    "batch_classes": int,
    "optimizer": str,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "momentum": float,
    "epochs": int,
    "episodes_per_epoch": int,
    "lr_min": float,
    "seed": int,
    "hidden_dims": "int_list",
    "embed_dim": int,
    "activation": str,
    "hms_neighbors": int,
    "hms_lambda_max": float,
    "tsp_heads": int,
    "tsp_layers": int,
    "tsp_dropout": float,
    "tsp_residual": bool,
    "tsp_identity_init": bool,
    "tsp_identity_l": bool,
}


def _parse_value(key: str, raw: str, lineno: int):
    kind = _CONFIG_KEYS[key]
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if kind == "int_list":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for key {key!r}") from None


def load_config(path: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read a flat `key = value` config file; unknown keys are errors."""
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    values = {}
    for lineno, raw in enumerate(raw_lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, val, lineno)

    cfg = base or TrainConfig()
    try:
        episode = replace(
            cfg.episode,
            **{
                f: values[k]
                for k, f in [
                    ("ways", "N"), ("shots", "K"), ("queries", "Q"),
                    ("tasks", "T"), ("batch_classes", "C"),
                ]
                if k in values
            },
        )
        metric = replace(
            cfg.metric,
            **{
                f: values[k]
                for k, f in [("metric", "kind"), ("temperature", "temperature")]
                if k in values
            },
        )
        optimizer = replace(
            cfg.optimizer,
            **{
                f: values[k]
                for k, f in [
                    ("optimizer", "kind"), ("lr", "lr"), ("beta1", "beta1"),
                    ("beta2", "beta2"), ("eps", "eps"), ("momentum", "momentum"),
                ]
                if k in values
            },
        )
        hms_cfg = replace(
            cfg.hms,
            **{
                f: values[k]
                for k, f in [
                    ("hms_neighbors", "m_neighbors"),
                    ("hms_lambda_max", "lambda_max"),
                ]
                if k in values
            },
        )
        tsp_cfg = replace(
            cfg.tsp,
            **{
                f: values[k]
                for k, f in [
                    ("tsp_heads", "heads"), ("tsp_layers", "layers"),
                    ("tsp_dropout", "dropout"), ("tsp_residual", "residual"),
                    ("tsp_identity_init", "linear_identity_init"),
                    ("tsp_identity_l", "identity_l"),
                ]
                if k in values
            },
        )
        return replace(
            cfg,
            episode=episode,
            metric=metric,
            optimizer=optimizer,
            hms=hms_cfg,
            tsp=tsp_cfg,
            **{
                f: values[f]
                for f in [
                    "mode", "epochs", "episodes_per_epoch", "lr_min", "seed",
                    "hidden_dims", "embed_dim", "activation",
                ]
                if f in values
            },
        )
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
