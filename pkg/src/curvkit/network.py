"""Feedforward single-output networks: definition, forward pass, Jacobians.

Conventions used everywhere in the package:

* Layer l maps activations of width n_{l-1} to width n_l through a weight
  matrix W_l stored with shape (n_{l-1}, n_l): output = W_l^T input.  There
  are no biases.
* Hidden layers apply relu elementwise when the architecture says so; the
  final (scalar) output layer is always linear, so a twice differentiable
  loss of the output stays twice differentiable in the weights.
* The flat parameter vector concatenates layers in ascending order; within
  a layer, all weights feeding output unit 0 come first (ascending input
  index), then output unit 1, and so on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ActivationError, DimensionError
from .rng import GAUSSIAN, InitDistribution, RngStream, as_generator

IDENTITY = "identity"
RELU = "relu"

ACTIVATIONS = (IDENTITY, RELU)


@dataclass(frozen=True)
class Architecture:
    """Layer widths plus activation choice.

    widths lists n_0 .. n_L (input width first, output width last).  For the
    constant-shape families used by the statistical checks, optional
    width_multipliers (m_0 .. m_L) record the shape n_l = base * m_l; the
    scalar output layer is exempt from that consistency check because its
    width is pinned to 1.
    """

    widths: tuple[int, ...]
    activation: str = IDENTITY
    width_multipliers: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise DimensionError("architecture needs at least an input and an output width")
        if any(w < 1 for w in self.widths):
            raise DimensionError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ActivationError(f"unknown activation: {self.activation!r}")
        if self.width_multipliers is not None:
            mult = tuple(float(m) for m in self.width_multipliers)
            object.__setattr__(self, "width_multipliers", mult)
            if len(mult) != len(self.widths):
                raise DimensionError("need one width multiplier per layer width")
            if any(m <= 0 for m in mult):
                raise DimensionError("width multipliers must be positive")
            base = self.widths[0] / mult[0]
            for l, (w, m) in enumerate(zip(self.widths, mult)):
                if l == self.depth and w == 1:
                    continue
                if round(base * m) != w:
                    raise DimensionError(
                        f"width {w} at layer {l} inconsistent with multiplier {m}"
                    )

    @property
    def depth(self) -> int:
        """Number of weight layers L."""
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    @classmethod
    def constant_shape(
        cls,
        base_width: int,
        multipliers: tuple[float, ...],
        activation: str = IDENTITY,
    ) -> "Architecture":
        """Build the n_l = base_width * m_l family with a scalar output."""
        if base_width < 1:
            raise DimensionError("base_width must be >= 1")
        widths = [round(base_width * m) for m in multipliers[:-1]]
        widths.append(1)
        return cls(tuple(widths), activation, tuple(multipliers))


class WeightCoord(NamedTuple):
    """Position of one weight: layer index, output unit, input unit."""

    layer: int
    out_unit: int
    in_unit: int


class ParamIndex:
    """Bijection between flat parameter indices and weight coordinates.

    Flat order: layers ascending; within layer, output-unit major with
    ascending input index (i.e. column-major traversal of the stored
    weight matrices).
    """

    def __init__(self, widths: tuple[int, ...]):
        self.widths = tuple(widths)
        sizes = [a * b for a, b in zip(widths[:-1], widths[1:])]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.n_params = int(self.offsets[-1])

    def layer_slice(self, layer: int) -> slice:
        return slice(int(self.offsets[layer]), int(self.offsets[layer + 1]))

    def to_coord(self, flat: int) -> WeightCoord:
        if not 0 <= flat < self.n_params:
            raise DimensionError(f"flat index {flat} outside [0, {self.n_params})")
        layer = int(np.searchsorted(self.offsets, flat, side="right")) - 1
        within = flat - int(self.offsets[layer])
        fan_in = self.widths[layer]
        return WeightCoord(layer, within // fan_in, within % fan_in)

    def to_flat(self, coord: WeightCoord) -> int:
        layer, out_unit, in_unit = coord
        if not 0 <= layer < len(self.widths) - 1:
            raise DimensionError(f"layer {layer} outside network")
        fan_in, fan_out = self.widths[layer], self.widths[layer + 1]
        if not (0 <= out_unit < fan_out and 0 <= in_unit < fan_in):
            raise DimensionError(f"unit indices {coord} outside layer shape")
        return int(self.offsets[layer]) + out_unit * fan_in + in_unit

    def flatten(self, weights: list[np.ndarray]) -> np.ndarray:
        return np.concatenate([w.ravel(order="F") for w in weights])

    def unflatten(self, vec: np.ndarray) -> list[np.ndarray]:
        if vec.shape != (self.n_params,):
            raise DimensionError(f"expected flat vector of length {self.n_params}")
        out = []
        for layer in range(len(self.widths) - 1):
            block = vec[self.layer_slice(layer)]
            shape = (self.widths[layer], self.widths[layer + 1])
            out.append(block.reshape(shape, order="F").copy())
        return out


@dataclass
class Network:
    arch: Architecture
    weights: list[np.ndarray]

    def __post_init__(self):
        expected = list(zip(self.arch.widths[:-1], self.arch.widths[1:]))
        got = [w.shape for w in self.weights]
        if got != expected:
            raise DimensionError(f"weight shapes {got} do not match widths {self.arch.widths}")

    @property
    def depth(self) -> int:
        return self.arch.depth

    @property
    def param_index(self) -> ParamIndex:
        return ParamIndex(self.arch.widths)

    def param_vector(self) -> np.ndarray:
        return self.param_index.flatten(self.weights)

    def with_params(self, vec: np.ndarray) -> "Network":
        return Network(self.arch, self.param_index.unflatten(vec))

    def copy(self) -> "Network":
        return Network(self.arch, [w.copy() for w in self.weights])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights)


def init_network(
    arch: Architecture,
    distribution: str | InitDistribution = GAUSSIAN,
    rng: RngStream | np.random.Generator = RngStream(0),
    rectifier_gain: float = 1.0,
) -> Network:
    """Sample a network with each layer drawn at fan_in = its input width.

    rectifier_gain multiplies the standard deviation of every layer whose
    inputs passed through relu (layers 2..L of a relu network); sqrt(2)
    restores signal-norm preservation that rectification otherwise destroys.
    The default of 1.0 keeps the plain 1/fan_in second moment everywhere,
    and the gain never applies to identity networks.
    """
    kind = distribution.kind if isinstance(distribution, InitDistribution) else distribution
    gen = as_generator(rng)
    weights = []
    for l, (fan_in, fan_out) in enumerate(zip(arch.widths[:-1], arch.widths[1:]), start=1):
        dist = InitDistribution(kind, fan_in)
        w = dist.sample((fan_in, fan_out), gen)
        if arch.activation == RELU and l >= 2 and rectifier_gain != 1.0:
            w = w * rectifier_gain
        weights.append(w)
    return Network(arch, weights)


@dataclass
class ActivationTrace:
    """Per-layer activations of a single forward pass (input included)."""

    activations: list[np.ndarray]
    masks: list[np.ndarray] | None = None  # active-unit masks, hidden layers only

    @property
    def output(self) -> float:
        return float(self.activations[-1][0])


@dataclass
class BatchTrace:
    """Stacked activations for a batch; arrays are (n_samples, width)."""

    activations: list[np.ndarray]
    masks: list[np.ndarray] | None = None

    @property
    def outputs(self) -> np.ndarray:
        return self.activations[-1][:, 0]


def forward(net: Network, x: np.ndarray) -> ActivationTrace:
    """Run a single input through the network, caching every layer output."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != net.arch.widths[0]:
        raise DimensionError(
            f"input length {x.shape[0]} does not match input width {net.arch.widths[0]}"
        )
    relu = net.arch.activation == RELU
    depth = net.depth
    acts = [x]
    masks: list[np.ndarray] | None = [] if relu else None
    for l, w in enumerate(net.weights, start=1):
        z = w.T @ acts[-1]
        if relu and l < depth:
            mask = z > 0.0
            z = np.where(mask, z, 0.0)
            masks.append(mask.astype(np.float64))
        acts.append(z)
    return ActivationTrace(acts, masks)


def batch_forward(net: Network, inputs: np.ndarray) -> BatchTrace:
    """Forward a (n_samples, n_0) batch; rows are samples."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.arch.widths[0]:
        raise DimensionError(
            f"batch shape {x.shape} does not match input width {net.arch.widths[0]}"
        )
    relu = net.arch.activation == RELU
    acts = [x]
    masks: list[np.ndarray] | None = [] if relu else None
    depth = net.depth
    for l, w in enumerate(net.weights, start=1):
        z = acts[-1] @ w
        if relu and l < depth:
            mask = z > 0.0
            z = np.where(mask, z, 0.0)
            masks.append(mask.astype(np.float64))
        acts.append(z)
    return BatchTrace(acts, masks)


def interlayer_jacobian(
    net: Network, trace: ActivationTrace, from_layer: int, to_layer: int
) -> np.ndarray:
    """Matrix of partial derivatives of layer to_layer w.r.t. layer from_layer.

    Entry [u, j] is d(activation j of to_layer) / d(activation u of
    from_layer) at the traced point.  For identity activation this is the
    plain product of the intervening weight matrices; for relu each hidden
    factor is masked by the trace's active units.
    """
    depth = net.depth
    if not 0 <= from_layer < to_layer <= depth:
        raise IndexError(f"need 0 <= from_layer < to_layer <= {depth}, got ({from_layer}, {to_layer})")
    relu = net.arch.activation == RELU
    out = None
    for l in range(from_layer + 1, to_layer + 1):
        factor = net.weights[l - 1]
        if relu and l < depth:
            factor = factor * trace.masks[l - 1][None, :]
        out = factor if out is None else out @ factor
    return out


def save_network(net: Network, path) -> None:
    """Write a self-describing text file: widths header + row-major blocks."""
    lines = ["curvkit-network v1", f"activation {net.arch.activation}"]
    lines.append("widths " + " ".join(str(w) for w in net.arch.widths))
    for l, w in enumerate(net.weights, start=1):
        lines.append(f"layer {l} {w.shape[0]}x{w.shape[1]}")
        for row in w:
            lines.append(" ".join(format(v, ".17g") for v in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_network(path, strict: bool = True) -> Network:
    """Read a network written by save_network.

    strict=True rejects non-finite weights at load time; strict=False defers
    that to downstream numeric checks (useful for diagnosing damaged files).
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "curvkit-network v1":
        raise DimensionError(f"{path}: not a curvkit network file")
    if not lines[1].startswith("activation "):
        raise DimensionError(f"{path}: missing activation line")
    activation = lines[1].split()[1]
    if not lines[2].startswith("widths "):
        raise DimensionError(f"{path}: missing widths line")
    widths = tuple(int(tok) for tok in lines[2].split()[1:])
    arch = Architecture(widths, activation)
    weights = []
    cursor = 3
    for l in range(arch.depth):
        rows, cols = widths[l], widths[l + 1]
        header = lines[cursor]
        if not header.startswith(f"layer {l + 1} "):
            raise DimensionError(f"{path}: malformed layer header {header!r}")
        cursor += 1
        block = np.array(
            [[float(tok) for tok in lines[cursor + r].split()] for r in range(rows)],
            dtype=np.float64,
        )
        if block.shape != (rows, cols):
            raise DimensionError(f"{path}: layer {l + 1} block has shape {block.shape}")
        cursor += rows
        weights.append(block)
    net = Network(arch, weights)
    if strict and not net.all_finite():
        raise DimensionError(f"{path}: network contains non-finite weights")
    return net
