"""The embedding model: a small MLP with an explicit, testable backward pass.

Also owns the CKPTV1 text checkpoint format. A checkpoint stores the MLP
weights and, optionally, a trailing ``TSP`` section with projection-head
weights; evaluation only ever reads the MLP part.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, ParameterError
from .streams import substream
from .tsphead import TspHeadParams, TspLayerParams

FLOAT_FMT = "%.9g"

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    """Layer sizes [D, h1, ..., d] plus the hidden activation and init seed."""

    layer_dims: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ParameterError("layer_dims needs >= 2 entries, all >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"activation must be one of {_ACTIVATIONS}")
        object.__setattr__(self, "layer_dims", dims)


@dataclass(frozen=True)
class Parameters:
    """Per-layer weight matrices (in x out) and bias vectors."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def flatten(self) -> np.ndarray:
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b)
        return np.concatenate(chunks)

    def with_flat(self, flat: np.ndarray) -> "Parameters":
        """Rebuild parameters of this shape from a flat vector."""
        weights, biases = [], []
        pos = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[pos : pos + w.size].reshape(w.shape))
            pos += w.size
            biases.append(flat[pos : pos + b.size])
            pos += b.size
        if pos != flat.size:
            raise ParameterError("flat vector size does not match parameter shapes")
        return Parameters(tuple(weights), tuple(biases), self.activation)


def init(spec: ModelSpec) -> Parameters:
    """Glorot-uniform weights, zero biases; deterministic per spec.seed."""
    rng = substream(spec.seed, "model-init")
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Parameters(tuple(weights), tuple(biases), spec.activation)


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def forward(params: Parameters, x: np.ndarray) -> np.ndarray:
    """Apply the affine+activation stack to a batch of rows (m x D) -> (m x d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ParameterError(
            f"input must be (m, {params.in_dim}), got {x.shape}"
        )
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = _act(h, params.activation)
    return h


def backward(
    params: Parameters, x: np.ndarray, grad_out: np.ndarray
) -> tuple[Parameters, np.ndarray]:
    """Exact reverse-mode gradients of forward, contracted with grad_out.

    Returns gradients shaped like `params` plus the gradient on the input rows.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    last = len(params.weights) - 1
    # Replay the forward pass, keeping pre-activation inputs of each layer.
    inputs = []
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ w + b
        if i < last:
            if params.activation == "relu":
                h = np.maximum(h, 0.0)
            else:
                h = np.tanh(h)
    if grad_out.shape != h.shape:
        raise ParameterError(f"grad_out must have shape {h.shape}, got {grad_out.shape}")

    d_weights = [None] * len(params.weights)
    d_biases = [None] * len(params.biases)
    g = grad_out
    for i in range(last, -1, -1):
        if i < last:
            pre = inputs[i] @ params.weights[i] + params.biases[i]
            if params.activation == "relu":
                g = g * (pre > 0)
            else:
                g = g * (1.0 - np.tanh(pre) ** 2)
        d_weights[i] = inputs[i].T @ g
        d_biases[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return Parameters(tuple(d_weights), tuple(d_biases), params.activation), g


@dataclass(frozen=True)
class Checkpoint:
    """Embedding parameters plus optional projection-head weights."""

    params: Parameters
    tsp: TspHeadParams | None = None


def _write_matrix_rows(lines: list[str], mat: np.ndarray) -> None:
    for row in np.atleast_2d(mat):
        lines.append(" ".join(FLOAT_FMT % v for v in row))


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write CKPTV1 text: MLP layers, then an optional TSP weight section."""
    lines = [f"CKPTV1 {len(ckpt.params.weights)}"]
    for w, b in zip(ckpt.params.weights, ckpt.params.biases):
        lines.append(f"{w.shape[0]} {w.shape[1]}")
        _write_matrix_rows(lines, w)
        lines.append(" ".join(FLOAT_FMT % v for v in b))
    if ckpt.tsp is not None:
        head = ckpt.tsp
        lines.append(f"TSP {head.heads} {head.dim}")
        for layer in head.layers:
            for h in range(head.heads):
                _write_matrix_rows(lines, layer.w_q[h])
                _write_matrix_rows(lines, layer.w_k[h])
                _write_matrix_rows(lines, layer.w_v[h])
            _write_matrix_rows(lines, layer.w_o)
            lines.append(" ".join(FLOAT_FMT % v for v in layer.ln_gain))
            lines.append(" ".join(FLOAT_FMT % v for v in layer.ln_bias))
            _write_matrix_rows(lines, layer.w_l)
            lines.append(" ".join(FLOAT_FMT % v for v in layer.b_l))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_floats(line: str, count: int, lineno: int) -> np.ndarray:
    parts = line.split()
    if len(parts) != count:
        raise FormatError(f"expected {count} numbers, got {len(parts)}", line=lineno)
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError:
        raise FormatError("unparseable numeric field", line=lineno) from None


class _LineReader:
    def __init__(self, lines: list[str]):
        self.lines = lines
        self.pos = 0

    def next(self) -> tuple[str, int]:
        if self.pos >= len(self.lines):
            raise FormatError("unexpected end of file", line=len(self.lines))
        self.pos += 1
        return self.lines[self.pos - 1], self.pos

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        out = np.empty((rows, cols))
        for r in range(rows):
            line, no = self.next()
            out[r] = _parse_floats(line, cols, no)
        return out

    def remaining(self) -> int:
        return len(self.lines) - self.pos


def load_checkpoint(path: str, activation: str = "relu") -> Checkpoint:
    """Read a CKPTV1 file. The activation is not stored and must be supplied."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    reader = _LineReader(lines)
    header, no = reader.next()
    parts = header.split()
    if len(parts) != 2 or parts[0] != "CKPTV1":
        raise FormatError("header must be 'CKPTV1 <num_layers>'", line=no)
    try:
        num_layers = int(parts[1])
    except ValueError:
        raise FormatError("layer count must be an integer", line=no) from None
    if num_layers < 1:
        raise FormatError("layer count must be >= 1", line=no)
    weights, biases = [], []
    for _ in range(num_layers):
        shape_line, no = reader.next()
        fields = shape_line.split()
        if len(fields) != 2:
            raise FormatError("layer header must be '<rows> <cols>'", line=no)
        try:
            rows, cols = int(fields[0]), int(fields[1])
        except ValueError:
            raise FormatError("layer shape must be integers", line=no) from None
        weights.append(reader.matrix(rows, cols))
        bias_line, no = reader.next()
        biases.append(_parse_floats(bias_line, cols, no))
    params = Parameters(tuple(weights), tuple(biases), activation)

    tsp = None
    if reader.remaining():
        tsp_line, no = reader.next()
        fields = tsp_line.split()
        if len(fields) != 3 or fields[0] != "TSP":
            raise FormatError("trailing section must start with 'TSP <H> <d>'", line=no)
        heads, dim = int(fields[1]), int(fields[2])
        per_layer_lines = 3 * heads * dim + heads * dim + dim + 3
        if reader.remaining() % per_layer_lines:
            raise FormatError(
                f"TSP section length {reader.remaining()} is not a multiple of "
                f"{per_layer_lines} lines per layer",
                line=no,
            )
        layers = []
        for _ in range(reader.remaining() // per_layer_lines):
            w_q = np.empty((heads, dim, dim))
            w_k = np.empty((heads, dim, dim))
            w_v = np.empty((heads, dim, dim))
            for h in range(heads):
                w_q[h] = reader.matrix(dim, dim)
                w_k[h] = reader.matrix(dim, dim)
                w_v[h] = reader.matrix(dim, dim)
            w_o = reader.matrix(heads * dim, dim)
            gain_line, no = reader.next()
            ln_gain = _parse_floats(gain_line, dim, no)
            bias_line, no = reader.next()
            ln_bias = _parse_floats(bias_line, dim, no)
            w_l = reader.matrix(dim, dim)
            bl_line, no = reader.next()
            b_l = _parse_floats(bl_line, dim, no)
            layers.append(
                TspLayerParams(
                    w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o,
                    ln_gain=ln_gain, ln_bias=ln_bias, w_l=w_l, b_l=b_l,
                )
            )
        tsp = TspHeadParams(heads=heads, dim=dim, layers=tuple(layers))
    return Checkpoint(params=params, tsp=tsp)


def strip_tsp(ckpt: Checkpoint) -> Checkpoint:
    """Drop the projection-head section, keeping the embedding untouched."""
    return replace(ckpt, tsp=None)
