"""Dense ReLU feedforward networks: evaluation, margins, gradients, text I/O."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import meter

RELU = "relu"
IDENTITY = "identity"


class NetworkError(ValueError):
    pass


class NetworkParseError(NetworkError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray  # (n_out,)
    activation: str

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        if w.ndim != 2:
            raise NetworkError("weight matrix must be 2-D")
        if b.shape != (w.shape[0],):
            raise NetworkError(
                f"bias length {b.shape} does not match weight rows {w.shape[0]}"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NetworkError("weights and biases must be finite")
        if self.activation not in (RELU, IDENTITY):
            raise NetworkError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]


@dataclass(frozen=True)
class Network:
    """Composition of affine+ReLU layers; final layer must be affine only."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise NetworkError("network needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise NetworkError(
                    f"layer dims disagree: {prev.out_dim} -> {cur.in_dim}"
                )
        if layers[-1].activation != IDENTITY:
            raise NetworkError("final layer activation must be identity")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def hidden_dims(self):
        return [lay.out_dim for lay in self.layers[:-1]]


@dataclass(frozen=True)
class LabeledQuery:
    """An input point with its correct label, an attack target, and a ball radius."""

    x_o: np.ndarray
    y_c: int
    y_t: int
    epsilon: float

    def __post_init__(self):
        x = np.asarray(self.x_o, dtype=float)
        if x.ndim != 1:
            raise NetworkError("query point must be a vector")
        if (x < 0).any() or (x > 1).any():
            raise NetworkError("query point must lie in the unit box")
        if self.y_c == self.y_t:
            raise NetworkError("correct and target labels must differ")
        if self.y_c < 0 or self.y_t < 0:
            raise NetworkError("labels must be non-negative")
        if not self.epsilon > 0:
            raise NetworkError("epsilon must be positive")
        x.setflags(write=False)
        object.__setattr__(self, "x_o", x)


def forward(net: Network, x) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Evaluate the network at x; returns (logits, per-layer (pre, post) trace)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise NetworkError(f"input shape {x.shape} != ({net.input_dim},)")
    meter.add(1)
    trace = []
    h = x
    for lay in net.layers:
        pre = lay.weight @ h + lay.bias
        post = np.maximum(pre, 0.0) if lay.activation == RELU else pre
        trace.append((pre, post))
        h = post
    return trace[-1][0], trace


def forward_batch(net: Network, xs) -> np.ndarray:
    """Logits for a (k, n_0) batch of inputs."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != net.input_dim:
        raise NetworkError(f"batch shape {xs.shape} incompatible with input dim")
    meter.add(len(xs))
    h = xs
    for lay in net.layers:
        pre = h @ lay.weight.T + lay.bias
        h = np.maximum(pre, 0.0) if lay.activation == RELU else pre
    return h


def margin(net: Network, x, y_t: int) -> float:
    """Target-class margin [f(x)]_{y_t} - max_{y != y_t} [f(x)]_y."""
    logits, _ = forward(net, x)
    return float(logits[y_t] - _best_rival(logits, y_t)[1])


def _best_rival(logits: np.ndarray, y_t: int) -> tuple[int, float]:
    # lowest index among the argmax of the non-target logits
    rival = None
    for y in range(len(logits)):
        if y == y_t:
            continue
        if rival is None or logits[y] > logits[rival]:
            rival = y
    return rival, logits[rival]


def margin_gradient(net: Network, x, y_t: int) -> np.ndarray:
    """Gradient of the margin at x. ReLU subgradient at 0 is taken as 0."""
    logits, trace = forward(net, x)
    rival, _ = _best_rival(logits, y_t)
    g = np.zeros(net.output_dim)
    g[y_t] = 1.0
    g[rival] = -1.0
    for lay, (pre, _) in zip(reversed(net.layers), reversed(trace)):
        if lay.activation == RELU:
            g = g * (pre > 0)
        g = g @ lay.weight
    return g


def predicted_label(net: Network, x) -> int:
    logits, _ = forward(net, x)
    return int(np.argmax(logits))


# --- text format -------------------------------------------------------------
#
# relu-ffn v1 <n_0> <l>
# layer <n_i> <relu|identity>
#   n_i weight rows of n_{i-1} decimals, then one bias row.
# '#' starts a comment.

_MAGIC = "relu-ffn"
_VERSION = "v1"


def save_network(net: Network, path) -> None:
    lines = [f"{_MAGIC} {_VERSION} {net.input_dim} {len(net.layers)}"]
    for lay in net.layers:
        lines.append(f"layer {lay.out_dim} {lay.activation}")
        for row in lay.weight:
            lines.append(" ".join(format(v, ".17g") for v in row))
        lines.append(" ".join(format(v, ".17g") for v in lay.bias))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_network(path) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.readlines()
    tokens = []  # (line_number, list_of_fields)
    for lineno, line in enumerate(raw, start=1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            tokens.append((lineno, stripped.split()))

    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(tokens):
            last = tokens[-1][0] if tokens else 1
            raise NetworkParseError(f"unexpected end of file, expected {what}", last)
        item = tokens[pos]
        pos += 1
        return item

    lineno, fields = take("header")
    if len(fields) != 4 or fields[0] != _MAGIC or fields[1] != _VERSION:
        raise NetworkParseError(f"bad header, expected '{_MAGIC} {_VERSION} <n_0> <l>'", lineno)
    try:
        n_in, n_layers = int(fields[2]), int(fields[3])
    except ValueError:
        raise NetworkParseError("header dims must be integers", lineno) from None
    if n_in < 1 or n_layers < 1:
        raise NetworkParseError("header dims must be positive", lineno)

    layers = []
    prev = n_in
    for k in range(1, n_layers + 1):
        lineno, fields = take(f"'layer' line for layer {k}")
        if len(fields) != 3 or fields[0] != "layer":
            raise NetworkParseError(f"expected 'layer <n> <activation>' for layer {k}", lineno)
        try:
            n_out = int(fields[1])
        except ValueError:
            raise NetworkParseError(f"layer {k}: size must be an integer", lineno) from None
        act = fields[2]
        if act not in (RELU, IDENTITY):
            raise NetworkParseError(f"layer {k}: unknown activation {act!r}", lineno)
        rows = []
        for r in range(n_out):
            lineno, fields = take(f"weight row {r + 1} of layer {k}")
            if len(fields) != prev:
                raise NetworkParseError(
                    f"layer {k}: weight row {r + 1} has {len(fields)} entries, expected {prev}",
                    lineno,
                )
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise NetworkParseError(f"layer {k}: bad decimal in weight row {r + 1}", lineno) from None
        lineno, fields = take(f"bias row of layer {k}")
        if len(fields) != n_out:
            raise NetworkParseError(
                f"layer {k}: bias row has {len(fields)} entries, expected {n_out}", lineno
            )
        try:
            bias = [float(v) for v in fields]
        except ValueError:
            raise NetworkParseError(f"layer {k}: bad decimal in bias row", lineno) from None
        layers.append(Layer(np.array(rows), np.array(bias), act))
        prev = n_out

    if pos != len(tokens):
        raise NetworkParseError("trailing content after last layer", tokens[pos][0])
    try:
        return Network(tuple(layers))
    except NetworkError as exc:
        raise NetworkParseError(str(exc)) from exc
