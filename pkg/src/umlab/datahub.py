"""Dataset synthesis, UMLV1 file I/O, vector augmentation, and pseudo-class minibatches.

A minibatch holds ``C * (K + Q)`` augmented views: C anchor rows are drawn from
the dataset and each anchor is expanded into K+Q stochastic views that share
one pseudo label. The anchor itself never appears unaugmented.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError

FLOAT_FMT = "%.9g"


@dataclass(frozen=True)
class Dataset:
    """A matrix of feature rows, optionally labeled with contiguous class ids."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise ParameterError(f"features must be 2-D with D >= 1, got shape {feats.shape}")
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (feats.shape[0],):
                raise ParameterError("labels length must match number of rows")
            if len(labels) == 0:
                raise ParameterError("labeled dataset must be non-empty")
            present = np.unique(labels)
            expected = np.arange(present.size)
            if not np.array_equal(present, expected):
                raise ParameterError(
                    f"labels must be contiguous 0..{present.size - 1} with every class present"
                )
            object.__setattr__(self, "labels", labels)

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise ParameterError("dataset has no labels")
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class AugmentPolicy:
    """A stochastic view-generating transform for feature vectors.

    kind is one of ``gaussian_noise`` (add isotropic noise), ``scale_jitter``
    (multiply by a scalar drawn from ``scale_range``), ``mask_dropout`` (zero
    coordinates independently with ``mask_prob``), or ``compose`` (apply
    ``children`` in order).
    """

    kind: str
    noise_sigma: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    mask_prob: float = 0.0
    children: tuple["AugmentPolicy", ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("gaussian_noise", "scale_jitter", "mask_dropout", "compose"):
            raise ParameterError(f"unknown augmentation kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ParameterError("scale_range must satisfy 0 < lo <= hi")
        if not (0 <= self.mask_prob < 1):
            raise ParameterError("mask_prob must be in [0, 1)")
        if self.kind == "compose" and not self.children:
            raise ParameterError("compose policy needs at least one child")


def default_policy(feature_std: float) -> AugmentPolicy:
    """Default augmentation: noise at 0.1x the feature scale, mild scale jitter, 10% masking."""
    return AugmentPolicy(
        kind="compose",
        children=(
            AugmentPolicy(kind="gaussian_noise", noise_sigma=0.1 * feature_std),
            AugmentPolicy(kind="scale_jitter", scale_range=(0.8, 1.2)),
            AugmentPolicy(kind="mask_dropout", mask_prob=0.1),
        ),
    )


@dataclass(frozen=True)
class MiniBatch:
    """C anchors expanded into K+Q augmented views each, in anchor-major order."""

    views: np.ndarray
    pseudo_labels: np.ndarray
    anchor_ids: np.ndarray
    C: int
    K: int
    Q: int

    @property
    def views_per_class(self) -> int:
        return self.K + self.Q


def synth_generate(
    num_clusters: int,
    per_cluster: int,
    dim: int,
    cluster_sep: float = 5.0,
    noise: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Sample a labeled Gaussian-blob dataset.

    Cluster centers are uniform in the hypercube ``[-cluster_sep, cluster_sep]^dim``
    and each row is its center plus isotropic Gaussian noise with the given
    standard deviation. Deterministic for a fixed seed.
    """
    if num_clusters < 2 or per_cluster < 1 or dim < 2:
        raise ParameterError("need num_clusters >= 2, per_cluster >= 1, dim >= 2")
    if cluster_sep <= 0 or noise <= 0:
        raise ParameterError("cluster_sep and noise must be > 0")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed % 2**64, 0x5E_ED])))
    centers = rng.uniform(-cluster_sep, cluster_sep, size=(num_clusters, dim))
    rows = np.repeat(centers, per_cluster, axis=0)
    rows = rows + rng.normal(0.0, noise, size=rows.shape)
    labels = np.repeat(np.arange(num_clusters), per_cluster)
    return Dataset(features=rows, labels=labels)


def save_dataset(data: Dataset, path: str) -> None:
    """Write `data` to `path` in the UMLV1 text format (9 significant digits, LF)."""
    has_labels = 1 if data.labels is not None else 0
    lines = [f"UMLV1 {data.num_rows} {data.dim} {has_labels}"]
    for i in range(data.num_rows):
        parts = [FLOAT_FMT % v for v in data.features[i]]
        if has_labels:
            parts.append(str(int(data.labels[i])))
        lines.append(" ".join(parts))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> Dataset:
    """Read a UMLV1 file. Raises FormatError naming the offending line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty file", line=1)
    header = lines[0].split()
    if len(header) != 4 or header[0] != "UMLV1":
        raise FormatError("header must be 'UMLV1 <rows> <dim> <has_labels>'", line=1)
    try:
        num_rows, dim, has_labels = int(header[1]), int(header[2]), int(header[3])
    except ValueError:
        raise FormatError("header fields must be integers", line=1) from None
    if has_labels not in (0, 1):
        raise FormatError("has_labels flag must be 0 or 1", line=1)
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != num_rows:
        raise FormatError(
            f"header declares {num_rows} rows but file has {len(body)}", line=len(lines)
        )
    expected = dim + has_labels
    feats = np.empty((num_rows, dim), dtype=np.float64)
    labels = np.empty(num_rows, dtype=np.int64) if has_labels else None
    for i, ln in enumerate(body):
        parts = ln.split()
        lineno = i + 2
        if len(parts) != expected:
            raise FormatError(
                f"expected {expected} fields, got {len(parts)}", line=lineno
            )
        try:
            feats[i] = [float(p) for p in parts[:dim]]
            if has_labels:
                labels[i] = int(parts[dim])
        except ValueError:
            raise FormatError("unparseable numeric field", line=lineno) from None
    try:
        return Dataset(features=feats, labels=labels)
    except ParameterError as exc:
        raise FormatError(str(exc)) from None


def augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Return one stochastic view of `x` under `policy`, consuming from `rng`."""
    x = np.asarray(x, dtype=np.float64)
    if policy.kind == "gaussian_noise":
        return x + policy.noise_sigma * rng.standard_normal(x.shape)
    if policy.kind == "scale_jitter":
        lo, hi = policy.scale_range
        return x * rng.uniform(lo, hi)
    if policy.kind == "mask_dropout":
        keep = rng.random(x.shape) >= policy.mask_prob
        return x * keep
    out = x
    for child in policy.children:
        out = augment(out, child, rng)
    return out


def make_pseudo_batch(
    data: Dataset,
    C: int,
    K: int,
    Q: int,
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> MiniBatch:
    """Sample C anchors without replacement and expand each into K+Q views.

    Views are laid out anchor-major: rows ``c*(K+Q) .. (c+1)*(K+Q)-1`` all
    carry pseudo label c.
    """
    if C < 1 or K < 1 or Q < 1:
        raise ParameterError("C, K, Q must all be >= 1")
    if C > data.num_rows:
        raise ParameterError(f"C={C} exceeds dataset size {data.num_rows}")
    anchors = rng.choice(data.num_rows, size=C, replace=False)
    views_per = K + Q
    views = np.empty((C * views_per, data.dim), dtype=np.float64)
    for c, row in enumerate(anchors):
        base = data.features[row]
        for v in range(views_per):
            views[c * views_per + v] = augment(base, policy, rng)
    pseudo_labels = np.repeat(np.arange(C), views_per)
    anchor_ids = np.repeat(anchors, views_per)
    return MiniBatch(
        views=views, pseudo_labels=pseudo_labels, anchor_ids=anchor_ids, C=C, K=K, Q=Q
    )
