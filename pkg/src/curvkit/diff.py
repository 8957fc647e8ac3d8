"""Gradients, curvature products, and dense curvature oracles.

Two routes exist for every second-order quantity: a closed-form route that
exploits the layered structure (exact, linear-activation networks only for
the dense output Hessian), and finite-difference routes that know nothing
about that structure and serve as independent oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ActivationError,
    CapacityError,
    DimensionError,
    DirectionError,
)
from .network import (
    IDENTITY,
    RELU,
    BatchTrace,
    Network,
    batch_forward,
    forward,
)

# Dense P x P storage above this parameter count is refused; matrix-free
# operations have no such cap.
DENSE_CAP = 20_000

_SQRT_EPS = float(np.sqrt(np.finfo(np.float64).eps))
# Second-derivative stencils: rounding error scales like eps/h^2 against
# truncation h^2, so the balanced step is the quarter root, not the cube
# root that suits first derivatives.
_QUART_EPS = float(np.finfo(np.float64).eps ** 0.25)


# ---------------------------------------------------------------------------
# Loss functions
# ---------------------------------------------------------------------------

SQUARED_ERROR = "squared_error"
HALF_SQUARED_ERROR = "half_squared_error"
RAW_OUTPUT = "raw_output"


@dataclass(frozen=True)
class LossFunction:
    """Convex twice differentiable scalar loss of the network output.

    Kinds:
      squared_error       (y - t)^2        slope 2(y - t), curvature 2
      half_squared_error  (y - t)^2 / 2    slope (y - t),  curvature 1
      raw_output          y                slope 1,        curvature 0

    The default target is overridden per sample by passing explicit targets
    to the batch evaluators.  curvature_min is the declared lower bound on
    the second derivative.
    """

    kind: str = SQUARED_ERROR
    target: float = 0.0

    def _t(self, targets):
        return self.target if targets is None else targets

    def value(self, y, targets=None):
        if self.kind == SQUARED_ERROR:
            return (y - self._t(targets)) ** 2
        if self.kind == HALF_SQUARED_ERROR:
            return 0.5 * (y - self._t(targets)) ** 2
        return y

    def d1(self, y, targets=None):
        if self.kind == SQUARED_ERROR:
            return 2.0 * (y - self._t(targets))
        if self.kind == HALF_SQUARED_ERROR:
            return y - self._t(targets)
        return np.ones_like(y) if isinstance(y, np.ndarray) else 1.0

    def d2(self, y, targets=None):
        if self.kind in (SQUARED_ERROR, HALF_SQUARED_ERROR):
            c = 2.0 if self.kind == SQUARED_ERROR else 1.0
            return c * np.ones_like(y) if isinstance(y, np.ndarray) else c
        return np.zeros_like(y) if isinstance(y, np.ndarray) else 0.0

    @property
    def curvature_min(self) -> float:
        if self.kind == SQUARED_ERROR:
            return 2.0
        if self.kind == HALF_SQUARED_ERROR:
            return 1.0
        return 0.0


def squared_error(target: float = 0.0) -> LossFunction:
    return LossFunction(SQUARED_ERROR, target)


def half_squared_error(target: float = 0.0) -> LossFunction:
    return LossFunction(HALF_SQUARED_ERROR, target)


def raw_output() -> LossFunction:
    """Identity "loss" L(y) = y; turns loss oracles into output oracles."""
    return LossFunction(RAW_OUTPUT, 0.0)


# ---------------------------------------------------------------------------
# Batched forward/backward machinery
# ---------------------------------------------------------------------------


def _as_batch(inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"batch inputs must be 1-D or 2-D, got shape {x.shape}")
    if x.shape[0] == 0:
        raise DimensionError("empty batch")
    return x


def _as_targets(targets, n: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.size == 1:
        return np.full(n, float(t[0]))
    if t.size != n:
        raise DimensionError(f"{t.size} targets for {n} samples")
    return t


def _require_scalar_output(net: Network) -> None:
    if net.arch.widths[-1] != 1:
        raise DimensionError("curvature analysis requires a single output unit")


def _require_identity(net: Network, what: str) -> None:
    if net.arch.activation != IDENTITY:
        raise ActivationError(f"{what} is defined for identity-activation (linear) networks only")


def _backward_signals(net: Network, trace: BatchTrace) -> list[np.ndarray]:
    """Per-sample derivatives of the scalar output w.r.t. pre-activations.

    Returns b[k] of shape (n_samples, n_k) for k = 1 .. L (list index k-1),
    so the per-sample gradient block of layer k is outer(y_{k-1}, b_k).
    """
    depth = net.depth
    n = trace.activations[0].shape[0]
    b = [None] * depth
    b[depth - 1] = np.ones((n, 1))
    for k in range(depth - 1, 0, -1):
        upstream = b[k] @ net.weights[k].T  # d(output)/d(activation of layer k)
        if net.arch.activation == RELU:
            upstream = upstream * trace.masks[k - 1]
        b[k - 1] = upstream
    return b


def batch_loss(net: Network, inputs, targets, loss: LossFunction) -> float:
    """Mean loss over the batch."""
    x = _as_batch(inputs)
    t = _as_targets(targets, x.shape[0])
    _require_scalar_output(net)
    trace = batch_forward(net, x)
    return float(np.mean(loss.value(trace.outputs, t)))


def _weighted_gradient(net: Network, trace: BatchTrace, sample_weights: np.ndarray) -> np.ndarray:
    """Flat vector sum_s w_s * (gradient of output_s w.r.t. all weights)."""
    b = _backward_signals(net, trace)
    blocks = []
    for k in range(net.depth):
        y_prev = trace.activations[k]
        weighted = b[k] * sample_weights[:, None]
        blocks.append((weighted.T @ y_prev).reshape(-1))  # (n_k, n_{k-1}) row-major
    return np.concatenate(blocks)


def output_gradient(net: Network, x) -> np.ndarray:
    """Flat gradient of the scalar output w.r.t. every weight.

    Entry for weight (layer k, out unit i, in unit j) equals the output
    sensitivity to unit i of layer k times activation j of layer k-1.
    """
    _require_scalar_output(net)
    xb = _as_batch(x)
    if xb.shape[0] != 1:
        raise DimensionError("output_gradient takes a single input")
    bt = batch_forward(net, xb)
    return _weighted_gradient(net, bt, np.ones(1))


def loss_gradient(net: Network, inputs, targets, loss: LossFunction) -> np.ndarray:
    """Batch-mean gradient of the loss w.r.t. the flat parameter vector."""
    x = _as_batch(inputs)
    t = _as_targets(targets, x.shape[0])
    _require_scalar_output(net)
    trace = batch_forward(net, x)
    slopes = loss.d1(trace.outputs, t) / x.shape[0]
    return _weighted_gradient(net, trace, slopes)


def loss_and_gradient(net: Network, inputs, targets, loss: LossFunction) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient from a single forward pass."""
    x = _as_batch(inputs)
    t = _as_targets(targets, x.shape[0])
    _require_scalar_output(net)
    trace = batch_forward(net, x)
    value = float(np.mean(loss.value(trace.outputs, t)))
    slopes = loss.d1(trace.outputs, t) / x.shape[0]
    return value, _weighted_gradient(net, trace, slopes)


def per_sample_output_gradients(net: Network, inputs) -> np.ndarray:
    """(n_samples, P) matrix of per-sample output gradients."""
    x = _as_batch(inputs)
    _require_scalar_output(net)
    trace = batch_forward(net, x)
    b = _backward_signals(net, trace)
    blocks = []
    for k in range(net.depth):
        outer = b[k][:, :, None] * trace.activations[k][:, None, :]  # (N, n_k, n_{k-1})
        blocks.append(outer.reshape(x.shape[0], -1))
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# Closed-form output Hessian (linear networks)
# ---------------------------------------------------------------------------


def _jacobian_table(net: Network) -> dict[tuple[int, int], np.ndarray]:
    """All interlayer Jacobians J[(l, k)] for 0 <= l < k <= L - 1."""
    depth = net.depth
    table: dict[tuple[int, int], np.ndarray] = {}
    for l in range(depth):
        for k in range(l + 1, depth):
            if k == l + 1:
                table[(l, k)] = net.weights[k - 1]
            else:
                table[(l, k)] = table[(l, k - 1)] @ net.weights[k - 1]
    return table


def _output_sensitivities(net: Network) -> list[np.ndarray]:
    """a[k] = d(output)/d(layer k activations) as a vector, for k = 0 .. L."""
    depth = net.depth
    a = [None] * (depth + 1)
    a[depth] = np.ones(1)
    for k in range(depth - 1, -1, -1):
        a[k] = net.weights[k] @ a[k + 1]
    return a


def output_hessian(net: Network, x, dense_cap: int = DENSE_CAP) -> np.ndarray:
    """Dense P x P Hessian of the scalar output w.r.t. all weights.

    Assembled block by block from the five closed-form cases for a pair of
    layers (row layer k, column layer l): l < k-1, l = k-1, l = k (zero),
    l = k+1, and l > k+1.  Only identity-activation networks admit this
    closed form; a relu network raises.
    """
    _require_identity(net, "the closed-form output Hessian")
    _require_scalar_output(net)
    index = net.param_index
    if index.n_params > dense_cap:
        raise CapacityError(
            f"P = {index.n_params} exceeds dense cap {dense_cap}; use matrix-free products"
        )
    trace = forward(net, x)
    y = trace.activations
    depth = net.depth
    P = index.n_params
    hess = np.zeros((P, P))
    if depth == 1:
        return hess  # output linear in the only weight layer
    a = _output_sensitivities(net)
    jac = _jacobian_table(net)
    widths = net.arch.widths
    for k in range(1, depth + 1):
        rows = index.layer_slice(k - 1)
        n_k, n_k1 = widths[k], widths[k - 1]
        for l in range(1, depth + 1):
            if l == k:
                continue
            cols = index.layer_slice(l - 1)
            n_l, n_l1 = widths[l], widths[l - 1]
            if l == k - 1:
                block = np.einsum("i,ju,v->ijuv", a[k], np.eye(n_k1), y[l - 1])
            elif l < k - 1:
                block = np.einsum("i,uj,v->ijuv", a[k], jac[(l, k - 1)], y[l - 1])
            elif l == k + 1:
                block = np.einsum("u,j,vi->ijuv", a[l], y[k - 1], np.eye(n_k))
            else:  # l > k + 1
                block = np.einsum("u,iv,j->ijuv", a[l], jac[(k, l - 1)], y[k - 1])
            hess[rows, cols] = block.reshape(n_k * n_k1, n_l * n_l1)
    return hess


def output_hessian_grad_product(net: Network, x) -> np.ndarray:
    """Product of the output Hessian with the output gradient, without the
    dense matrix.

    Evaluated from the layered case formula: the entries of the product at
    column layer l collect four kinds of contributions (row layer two or
    more above l, two or more below l, directly above, directly below), and
    the five printed branches below (first layer, second layer, generic
    middle, next-to-last, last) each keep exactly the contributions that
    exist for that layer.
    """
    _require_identity(net, "the output Hessian-gradient case formula")
    _require_scalar_output(net)
    index = net.param_index
    trace = forward(net, x)
    y = trace.activations
    depth = net.depth
    if depth == 1:
        return np.zeros(index.n_params)
    a = _output_sensitivities(net)
    jac = _jacobian_table(net)
    a_sq = [None] + [float(a[k] @ a[k]) for k in range(1, depth + 1)]
    y_sq = [float(y[l] @ y[l]) for l in range(depth + 1)]

    def rows_far_above(l):
        # row layers k >= l + 2: sum_k ||a_k||^2 * (J(l, k-1) @ y_{k-1})
        acc = np.zeros(net.arch.widths[l])
        for k in range(l + 2, depth + 1):
            acc += a_sq[k] * (jac[(l, k - 1)] @ y[k - 1])
        return np.outer(y[l - 1], acc)

    def rows_far_below(l):
        # row layers k <= l - 2: sum_k ||y_{k-1}||^2 * (J(k, l-1)^T @ a_k)
        acc = np.zeros(net.arch.widths[l - 1])
        for k in range(1, l - 1):
            acc += y_sq[k - 1] * (jac[(k, l - 1)].T @ a[k])
        return np.outer(acc, a[l])

    def row_directly_above(l):
        return a_sq[l + 1] * np.outer(y[l - 1], y[l])

    def row_directly_below(l):
        return y_sq[l - 2] * np.outer(a[l - 1], a[l])

    blocks = []
    for l in range(1, depth + 1):
        if l == 1:
            delta = row_directly_above(l) + rows_far_above(l)
        elif l == depth:
            delta = row_directly_below(l) + rows_far_below(l)
        elif l == 2:
            delta = row_directly_below(l) + row_directly_above(l) + rows_far_above(l)
        elif l == depth - 1:
            delta = row_directly_above(l) + row_directly_below(l) + rows_far_below(l)
        else:
            delta = (
                rows_far_above(l)
                + rows_far_below(l)
                + row_directly_above(l)
                + row_directly_below(l)
            )
        blocks.append(delta.ravel(order="F"))
    return np.concatenate(blocks)


def output_hessian_vp(net: Network, x, direction: np.ndarray) -> np.ndarray:
    """Exact product of the output Hessian with an arbitrary flat direction.

    Forward-mode derivative of the output gradient along the direction:
    propagate activation tangents up, sensitivity tangents down, and combine.
    Linear networks only (the dense Hessian of the output is defined there).
    """
    _require_identity(net, "the exact output Hessian product")
    _require_scalar_output(net)
    index = net.param_index
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    if d.shape[0] != index.n_params:
        raise DimensionError(f"direction length {d.shape[0]} != P = {index.n_params}")
    dirs = index.unflatten(d)
    trace = forward(net, x)
    y = trace.activations
    depth = net.depth

    y_dot = [np.zeros_like(y[0])]
    for l in range(1, depth + 1):
        y_dot.append(net.weights[l - 1].T @ y_dot[l - 1] + dirs[l - 1].T @ y[l - 1])

    a = _output_sensitivities(net)
    a_dot = [None] * (depth + 1)
    a_dot[depth] = np.zeros(1)
    for k in range(depth - 1, 0, -1):
        a_dot[k] = dirs[k] @ a[k + 1] + net.weights[k] @ a_dot[k + 1]

    blocks = []
    for l in range(1, depth + 1):
        block = np.outer(y_dot[l - 1], a[l]) + np.outer(y[l - 1], a_dot[l])
        blocks.append(block.ravel(order="F"))
    return np.concatenate(blocks)


# ---------------------------------------------------------------------------
# Finite-difference oracles
# ---------------------------------------------------------------------------


def _loss_at_param_stack(
    net: Network, inputs: np.ndarray, targets: np.ndarray, loss: LossFunction, stack: np.ndarray
) -> np.ndarray:
    """Batch loss evaluated at a stack of flat parameter vectors.

    stack has shape (B, P); returns (B,).  Used to vectorize the dense
    finite-difference Hessian, which otherwise needs millions of tiny
    forward passes.
    """
    index = net.param_index
    widths = net.arch.widths
    relu = net.arch.activation == RELU
    depth = net.depth
    acts = np.broadcast_to(inputs, (stack.shape[0],) + inputs.shape)
    for l in range(1, depth + 1):
        # Layer block in flat order is column-major, i.e. (n_l, n_{l-1}) row-major.
        w_t = stack[:, index.layer_slice(l - 1)].reshape(-1, widths[l], widths[l - 1])
        z = np.einsum("bnj,bij->bni", acts, w_t)
        if relu and l < depth:
            z = np.maximum(z, 0.0)
        acts = z
    outputs = acts[:, :, 0]
    return np.mean(loss.value(outputs, targets[None, :]), axis=1)


def fd_hessian(
    net: Network,
    inputs,
    targets,
    loss: LossFunction,
    step: float | None = None,
    dense_cap: int = DENSE_CAP,
) -> np.ndarray:
    """Central-difference dense Hessian of the batch loss.

    Per-coordinate step h_a = eps**0.25 * (1 + |w_a|) unless an explicit
    step is given; diagonal entries use the three-point stencil, off-diagonal
    entries the four-point stencil, and the result is symmetrized.
    Deliberately ignorant of network structure: this is the oracle the
    closed-form routes are judged against.
    """
    x = _as_batch(inputs)
    t = _as_targets(targets, x.shape[0])
    _require_scalar_output(net)
    index = net.param_index
    P = index.n_params
    if P > dense_cap:
        raise CapacityError(f"P = {P} exceeds dense cap {dense_cap}")
    w0 = net.param_vector()
    h = np.full(P, step) if step is not None else _QUART_EPS * (1.0 + np.abs(w0))

    def eval_stack(stack):
        return _loss_at_param_stack(net, x, t, loss, stack)

    f0 = float(eval_stack(w0[None, :])[0])
    hess = np.zeros((P, P))

    # Diagonal: f(w + h e_a) and f(w - h e_a).
    diag_stack = np.repeat(w0[None, :], 2 * P, axis=0)
    diag_stack[np.arange(P), np.arange(P)] += h
    diag_stack[P + np.arange(P), np.arange(P)] -= h
    f_diag = eval_stack(diag_stack)
    hess[np.arange(P), np.arange(P)] = (f_diag[:P] - 2.0 * f0 + f_diag[P:]) / h**2

    # Off-diagonal four-point stencils, evaluated in chunks of pairs.
    pairs = [(a, b) for a in range(P) for b in range(a + 1, P)]
    chunk = max(1, 65536 // max(P, 1))
    for start in range(0, len(pairs), chunk):
        block = pairs[start : start + chunk]
        m = len(block)
        stack = np.repeat(w0[None, :], 4 * m, axis=0)
        for i, (a, b) in enumerate(block):
            stack[4 * i + 0, a] += h[a]
            stack[4 * i + 0, b] += h[b]
            stack[4 * i + 1, a] += h[a]
            stack[4 * i + 1, b] -= h[b]
            stack[4 * i + 2, a] -= h[a]
            stack[4 * i + 2, b] += h[b]
            stack[4 * i + 3, a] -= h[a]
            stack[4 * i + 3, b] -= h[b]
        vals = eval_stack(stack).reshape(m, 4)
        for i, (a, b) in enumerate(block):
            v = (vals[i, 0] - vals[i, 1] - vals[i, 2] + vals[i, 3]) / (4.0 * h[a] * h[b])
            hess[a, b] = v
            hess[b, a] = v
    return 0.5 * (hess + hess.T)


def _mask_signature(net: Network, inputs: np.ndarray) -> list[np.ndarray] | None:
    if net.arch.activation != RELU:
        return None
    return batch_forward(net, inputs).masks


def _same_masks(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _piecewise_safe_step(net: Network, inputs: np.ndarray, w0, unit, h: float) -> float:
    """Shrink the probe step until no relu unit changes state inside it.

    The Hessian of a relu network is defined piecewise; a unit crossing zero
    between W - h*u and W + h*u would inject a slope jump amplified by 1/h
    into any central difference.  Matching active-unit masks at both probe
    points keeps the stencil inside one smooth piece.
    """
    base = _mask_signature(net, inputs)
    if base is None:
        return h
    for _ in range(4):
        plus = _mask_signature(net.with_params(w0 + h * unit), inputs)
        minus = _mask_signature(net.with_params(w0 - h * unit), inputs)
        if _same_masks(base, plus) and _same_masks(base, minus):
            return h
        h /= 8.0
    return h


def hvp(net: Network, inputs, targets, loss: LossFunction, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product via central differences of the loss gradient.

    Two gradient evaluations at W +- h * v_hat with h = sqrt(eps) * (1 +
    ||W||), rescaled by ||v||.  Zero direction maps to the zero vector.  For
    relu networks the step shrinks as needed so both probe points share the
    active-unit pattern of the base point.
    """
    index = net.param_index
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != index.n_params:
        raise DimensionError(f"direction length {v.shape[0]} != P = {index.n_params}")
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        return np.zeros_like(v)
    w0 = net.param_vector()
    h = _SQRT_EPS * (1.0 + float(np.linalg.norm(w0)))
    unit = v / v_norm
    xb = _as_batch(inputs)
    h = _piecewise_safe_step(net, xb, w0, unit, h)
    g_plus = loss_gradient(net.with_params(w0 + h * unit), xb, targets, loss)
    g_minus = loss_gradient(net.with_params(w0 - h * unit), xb, targets, loss)
    return (g_plus - g_minus) * (v_norm / (2.0 * h))


def ggn_vp(net: Network, inputs, targets, loss: LossFunction, v: np.ndarray) -> np.ndarray:
    """Exact product with the generalized Gauss-Newton part of the Hessian.

    For a scalar output the curvature part is a mean of rank-one terms, so
    the product is (1/N) sum_s L''(y_s) (g_s . v) g_s with per-sample output
    gradients g_s; no finite differences involved.
    """
    x = _as_batch(inputs)
    t = _as_targets(targets, x.shape[0])
    _require_scalar_output(net)
    index = net.param_index
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != index.n_params:
        raise DimensionError(f"direction length {v.shape[0]} != P = {index.n_params}")
    trace = batch_forward(net, x)
    b = _backward_signals(net, trace)
    v_layers = index.unflatten(v)
    n = x.shape[0]
    dots = np.zeros(n)
    for k in range(net.depth):
        dots += np.sum((trace.activations[k] @ v_layers[k]) * b[k], axis=1)
    coeff = loss.d2(trace.outputs, t) * dots / n
    return _weighted_gradient(net, trace, coeff)


def directional_output_curvature(net: Network, x, direction: np.ndarray) -> float:
    """Second derivative of the scalar output along a unit direction.

    Three-point stencil in parameter space; equals the quadratic form of the
    output Hessian along the normalized direction.  Works for either
    activation (for relu it probes the local smooth piece).
    """
    index = net.param_index
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    if d.shape[0] != index.n_params:
        raise DimensionError(f"direction length {d.shape[0]} != P = {index.n_params}")
    d_norm = float(np.linalg.norm(d))
    if d_norm == 0.0:
        raise DirectionError("direction has zero norm")
    unit = d / d_norm
    w0 = net.param_vector()
    h = _QUART_EPS * (1.0 + float(np.linalg.norm(w0)))
    xb = _as_batch(x)
    h = _piecewise_safe_step(net, xb, w0, unit, h)
    f = lambda w: float(batch_forward(net.with_params(w), xb).outputs[0])
    return (f(w0 + h * unit) - 2.0 * f(w0) + f(w0 - h * unit)) / h**2
