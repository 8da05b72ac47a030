""" Layer mathematics: convolution and fully-connected passes, activations and loss.

Every reduction goes through ``ordered_sum``, which adds terms one at a time in ascending
index order starting from 0.0. A full-tensor pass and a single-element recomputation
therefore perform the same IEEE-754 operations in the same order and agree bit for bit,
which is what lets an audit compare recomputed values exactly.

Indices are 0-based throughout; the 1-based formulas translate with (r-1)δ -> rδ.
"""
from dataclasses import dataclass, field
import math
from typing import NamedTuple

import numpy as np

from .enumerations import ActivationKind, DEFAULT_LEARNING_RATE
from .exceptions import InvalidSpec, ShapeMismatch


#region Specs
@dataclass(frozen=True)
class ConvSpec:
    """ Convolution hyperparameters for a single-channel ``alpha_X`` x ``alpha_X`` input.

    Attributes
    ----------
    n_F: int
        Number of filters.
    alpha_F: int
        Filter side length.
    delta: int
        Stride.
    alpha_X: int
        Input side length.
    eta: float
        Learning rate.
    """
    n_F: int
    alpha_F: int
    delta: int
    alpha_X: int
    eta: float = DEFAULT_LEARNING_RATE

    def __post_init__(self):
        if self.n_F < 1:
            raise InvalidSpec("n_F must be >= 1.")
        if self.delta < 1:
            raise InvalidSpec("delta must be >= 1.")
        if not 1 <= self.alpha_F <= self.alpha_X:
            raise InvalidSpec("alpha_F must lie in [1, alpha_X].")

    @property
    def alpha_Y(self):
        return conv_output_dim(self)

    @property
    def alpha_F_landmark(self):
        """ Landmark block side: delta * ceil(alpha_F / delta). """
        return self.delta * math.ceil(self.alpha_F / self.delta)

    @property
    def n_outputs(self):
        return self.n_F * self.alpha_Y * self.alpha_Y


@dataclass(frozen=True, eq=False)
class FcSpec:
    """ Fully-connected layer with weight matrix ``theta`` of shape (l_X, l_Y). """
    l_X: int
    l_Y: int
    theta: np.ndarray = field(repr=False)
    eta: float = DEFAULT_LEARNING_RATE

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (self.l_X, self.l_Y):
            raise ShapeMismatch(f"theta has shape {theta.shape}, expected ({self.l_X}, {self.l_Y}).")
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta):
        return FcSpec(self.l_X, self.l_Y, theta, self.eta)


def conv_output_dim(spec):
    """ Output side length floor(1 + (alpha_X - alpha_F) / delta).

    Raises
    ------
    InvalidSpec
        The result is < 1.
    """
    alpha_Y = 1 + (spec.alpha_X - spec.alpha_F) // spec.delta
    if alpha_Y < 1:
        raise InvalidSpec("Convolution output would be empty.")
    return alpha_Y


def split_size(length):
    """ Splits ``length`` into ``n`` sub-vectors of ``s`` elements, n the divisor nearest sqrt(length).

    Ties resolve toward the smaller divisor.

    Returns
    -------
    tuple[int, int]
        (n, s) with n * s == length.
    """
    if length < 1:
        raise InvalidSpec("Cannot split an empty vector.")
    root = math.sqrt(length)
    divisors = [d for d in range(1, length + 1) if length % d == 0]
    n = min(divisors, key=lambda d: (abs(d - root), d))
    return n, length // n
#endregion


#region Ordered summation
def ordered_sum(terms, axis=-1):
    """ Sums ``terms`` along ``axis`` one term at a time in ascending index order.

    Returns a float for 1-D input and an array otherwise.
    """
    terms = np.moveaxis(np.asarray(terms, dtype=np.float64), axis, 0)
    acc = np.zeros(terms.shape[1:], dtype=np.float64)
    for k in range(terms.shape[0]):
        acc = acc + terms[k]
    if acc.ndim == 0:
        return float(acc)
    return acc
#endregion


#region Convolution
def _check_conv_input(spec, X, filters):
    X = np.asarray(X, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    if X.shape != (spec.alpha_X, spec.alpha_X):
        raise ShapeMismatch(f"X has shape {X.shape}, expected ({spec.alpha_X}, {spec.alpha_X}).")
    if filters.shape != (spec.n_F, spec.alpha_F, spec.alpha_F):
        raise ShapeMismatch(
            f"filters have shape {filters.shape}, expected ({spec.n_F}, {spec.alpha_F}, {spec.alpha_F}).")
    return X, filters


def receptive_field(spec, X, r, c):
    """ The alpha_F x alpha_F patch of X used by output (r, c). """
    top, left = r * spec.delta, c * spec.delta
    return X[top:top + spec.alpha_F, left:left + spec.alpha_F]


def conv_forward(spec, X, filters):
    """ Valid convolution of X with every filter.

    Y[t, r, c] = sum over (i, j) in row-major order of X[r*delta + i, c*delta + j] * F[t, i, j].

    Parameters
    ----------
    spec: ConvSpec
    X: array-like, shape (alpha_X, alpha_X)
    filters: array-like, shape (n_F, alpha_F, alpha_F)

    Returns
    -------
    np.ndarray, shape (n_F, alpha_Y, alpha_Y)
    """
    X, filters = _check_conv_input(spec, X, filters)
    a_Y, d = spec.alpha_Y, spec.delta
    span = d * (a_Y - 1) + 1
    Y = np.zeros((spec.n_F, a_Y, a_Y), dtype=np.float64)
    for i in range(spec.alpha_F):
        for j in range(spec.alpha_F):
            patch = X[i:i + span:d, j:j + span:d]
            Y = Y + patch[None, :, :] * filters[:, i, j, None, None]
    return Y


def conv_forward_element(patch, filt):
    """ One output of ``conv_forward`` from its receptive field and filter. """
    patch = np.asarray(patch, dtype=np.float64)
    filt = np.asarray(filt, dtype=np.float64)
    return ordered_sum((patch * filt).ravel())


class ConvGradients(NamedTuple):
    grad_x: np.ndarray
    grad_x_per_filter: np.ndarray
    grad_f: np.ndarray
    grad_f_expanded: np.ndarray


def conv_dx_rows(spec, i):
    """ Rows u of grad_Y whose receptive fields contain input row i, ascending. """
    lo = max(0, -((spec.alpha_F - 1 - i) // spec.delta))
    hi = min(i // spec.delta, spec.alpha_Y - 1)
    return list(range(lo, hi + 1))


def conv_dx_terms(spec, i, j):
    """ (u, v) pairs contributing to grad_X[t, i, j], in summation order. """
    return [(u, v) for u in conv_dx_rows(spec, i) for v in conv_dx_rows(spec, j)]


def x_group(spec, X, i, j, u):
    """ Elements X[u*delta + i, v*delta + j] for every v, the group behind one expanded entry. """
    d, a_Y = spec.delta, spec.alpha_Y
    return np.asarray(X, dtype=np.float64)[u * d + i, j:j + d * (a_Y - 1) + 1:d]


def conv_backward(spec, X, filters, grad_y):
    """ Backward pass through a convolution.

    Parameters
    ----------
    spec: ConvSpec
    X: array-like, shape (alpha_X, alpha_X)
    filters: array-like, shape (n_F, alpha_F, alpha_F)
    grad_y: array-like, shape (n_F, alpha_Y, alpha_Y)

    Returns
    -------
    ConvGradients
        grad_x_per_filter[t, i, j]: sum over valid (u, v), ascending, of
            grad_y[t, u, v] * F[t, i - u*delta, j - v*delta];
        grad_x: sum over t, ascending, of grad_x_per_filter[t];
        grad_f_expanded[t, i, j, u]: sum over v of grad_y[t, u, v] * X[u*delta + i, v*delta + j]
            (stored before the learning rate is applied);
        grad_f[t, i, j]: -eta * sum over u of grad_f_expanded[t, i, j, u].
    """
    X, filters = _check_conv_input(spec, X, filters)
    grad_y = np.asarray(grad_y, dtype=np.float64)
    a_F, a_Y, d = spec.alpha_F, spec.alpha_Y, spec.delta
    if grad_y.shape != (spec.n_F, a_Y, a_Y):
        raise ShapeMismatch(f"grad_y has shape {grad_y.shape}, expected ({spec.n_F}, {a_Y}, {a_Y}).")

    per_filter = np.zeros((spec.n_F, spec.alpha_X, spec.alpha_X), dtype=np.float64)
    for u in range(a_Y):
        for v in range(a_Y):
            window = per_filter[:, u * d:u * d + a_F, v * d:v * d + a_F]
            per_filter[:, u * d:u * d + a_F, v * d:v * d + a_F] = window + grad_y[:, u, v, None, None] * filters
    grad_x = ordered_sum(per_filter, axis=0)

    offsets = np.arange(a_F)
    rows = offsets[:, None, None] + (np.arange(a_Y) * d)[None, None, :]
    expanded = np.zeros((spec.n_F, a_F, a_F, a_Y), dtype=np.float64)
    for v in range(a_Y):
        cols = (v * d + offsets)[None, :, None]
        x_sel = X[rows, cols]
        expanded = expanded + grad_y[:, None, None, :, v] * x_sel[None]
    grad_f = -spec.eta * ordered_sum(expanded, axis=-1)
    return ConvGradients(grad_x, per_filter, grad_f, expanded)


def conv_backward_dx_element(spec, grad_y_rows, filt, i, j):
    """ Recomputes grad_X^(t)[i, j] from the grad_Y^(t) rows it depends on.

    Parameters
    ----------
    grad_y_rows: dict[int, array-like]
        Row u of grad_Y^(t) for every u in ``conv_dx_rows(spec, i)``.
    filt: array-like, shape (alpha_F, alpha_F)
    """
    filt = np.asarray(filt, dtype=np.float64)
    d = spec.delta
    terms = [grad_y_rows[u][v] * filt[i - u * d, j - v * d] for u, v in conv_dx_terms(spec, i, j)]
    return ordered_sum(np.asarray(terms, dtype=np.float64)) if terms else 0.0


def conv_expanded_df_element(grad_y_row, group):
    """ Recomputes one expanded filter-gradient entry from a grad_Y row and an X group. """
    grad_y_row = np.asarray(grad_y_row, dtype=np.float64)
    group = np.asarray(group, dtype=np.float64)
    return ordered_sum(grad_y_row * group)


def conv_grad_f_direct(spec, X, grad_y):
    """ Filter gradients evaluated directly, summing over (u, v) in one pass. Used as an oracle. """
    X = np.asarray(X, dtype=np.float64)
    grad_y = np.asarray(grad_y, dtype=np.float64)
    a_F, a_Y, d = spec.alpha_F, spec.alpha_Y, spec.delta
    out = np.zeros((spec.n_F, a_F, a_F), dtype=np.float64)
    for t in range(spec.n_F):
        for i in range(a_F):
            for j in range(a_F):
                window = X[i:i + d * (a_Y - 1) + 1:d, j:j + d * (a_Y - 1) + 1:d]
                out[t, i, j] = -spec.eta * float(np.sum(grad_y[t] * window))
    return out
#endregion


#region Fully connected
def _check_vector(x, length, name):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (length,):
        raise ShapeMismatch(f"{name} has shape {x.shape}, expected ({length},).")
    return x


def fc_forward(spec, X):
    """ Y[i] = sum over j, ascending, of theta[j, i] * X[j]. """
    X = _check_vector(X, spec.l_X, "X")
    return ordered_sum(spec.theta * X[:, None], axis=0)


def fc_backward(spec, X, grad_y):
    """ Backward pass through a fully-connected layer.

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        grad_x[j] = sum over i of theta[j, i] * grad_y[i];
        grad_theta[j, i] = -eta * (grad_y[i] * X[j]).
    """
    X = _check_vector(X, spec.l_X, "X")
    grad_y = _check_vector(grad_y, spec.l_Y, "grad_y")
    grad_x = ordered_sum(spec.theta * grad_y[None, :], axis=1)
    grad_theta = -spec.eta * np.outer(X, grad_y)
    return grad_x, grad_theta


def fc_grad_theta_element(eta, grad_y_i, x_j):
    return -eta * (float(grad_y_i) * float(x_j))


def fc_partials(spec, X, n_X=None):
    """ Hierarchical forward pass.

    X is split into n_X sub-vectors of s_X elements and
    Y'[i, k] = sum over u, ascending, of X[k*s_X + u] * theta[k*s_X + u, i].

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        Y' of shape (l_Y, n_X) and Y[i] = sum over k, ascending, of Y'[i, k].
    """
    X = _check_vector(X, spec.l_X, "X")
    if n_X is None:
        n_X, _ = split_size(spec.l_X)
    s_X = spec.l_X // n_X
    products = (X[:, None] * spec.theta).reshape(n_X, s_X, spec.l_Y)
    y_prime = ordered_sum(products, axis=1).T
    return y_prime, ordered_sum(y_prime, axis=1)


def fc_backward_partials(spec, grad_y, n_Y=None):
    """ Hierarchical backward pass.

    grad_Y is split into n_Y sub-vectors of s_Y elements and
    grad_X'[j, k] = sum over u, ascending, of grad_Y[k*s_Y + u] * theta[j, k*s_Y + u].

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        grad_X' of shape (l_X, n_Y) and grad_X[j] = sum over k of grad_X'[j, k].
    """
    grad_y = _check_vector(grad_y, spec.l_Y, "grad_y")
    if n_Y is None:
        n_Y, _ = split_size(spec.l_Y)
    s_Y = spec.l_Y // n_Y
    products = (grad_y[None, :] * spec.theta).reshape(spec.l_X, n_Y, s_Y)
    grad_x_prime = ordered_sum(products, axis=2)
    return grad_x_prime, ordered_sum(grad_x_prime, axis=1)


def fc_partial_element(sub_vector, weights):
    """ One hierarchical partial sum from a sub-vector and its matching weight group. """
    sub_vector = np.asarray(sub_vector, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return ordered_sum(sub_vector * weights)
#endregion


#region Activation and loss
def _sigmoid_scalar(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def activation_apply(kind, x):
    """ Elementwise activation. """
    kind = ActivationKind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind == ActivationKind.RELU:
        return np.where(x > 0.0, x, 0.0)
    if kind == ActivationKind.SIGMOID:
        flat = np.fromiter((_sigmoid_scalar(v) for v in x.ravel().tolist()), dtype=np.float64, count=x.size)
        return flat.reshape(x.shape)
    return x.copy()


def activation_grad(kind, x, grad_out):
    """ Elementwise a'(x) * grad_out, with relu'(0) = 0. """
    kind = ActivationKind(kind)
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if x.shape != grad_out.shape:
        raise ShapeMismatch(f"x has shape {x.shape} but grad_out has shape {grad_out.shape}.")
    if kind == ActivationKind.RELU:
        return np.where(x > 0.0, grad_out, 0.0)
    if kind == ActivationKind.SIGMOID:
        s = activation_apply(kind, x)
        return (s * (1.0 - s)) * grad_out
    return grad_out.copy()


def loss_eval(yhat, y):
    """ Mean squared error and its gradient.

    Returns
    -------
    tuple[float, np.ndarray]
        loss = (1/n) sum (yhat - y)^2 and grad = (2/n)(yhat - y).
    """
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape or yhat.ndim != 1:
        raise ShapeMismatch(f"yhat has shape {yhat.shape} but y has shape {y.shape}.")
    n = yhat.size
    diff = yhat - y
    return ordered_sum(diff * diff) / n, (2.0 / n) * diff
#endregion


#region Layers
@dataclass(frozen=True, eq=False)
class ConvLayer:
    spec: ConvSpec
    filters: np.ndarray = field(repr=False)

    kind = "conv"

    def __post_init__(self):
        filters = np.asarray(self.filters, dtype=np.float64)
        if filters.shape != (self.spec.n_F, self.spec.alpha_F, self.spec.alpha_F):
            raise ShapeMismatch(f"filters have shape {filters.shape}, expected "
                                f"({self.spec.n_F}, {self.spec.alpha_F}, {self.spec.alpha_F}).")
        object.__setattr__(self, "filters", filters)

    @property
    def input_length(self):
        return self.spec.alpha_X * self.spec.alpha_X

    @property
    def output_length(self):
        return self.spec.n_outputs

    @property
    def weights(self):
        return self.filters

    def with_weights(self, filters):
        return ConvLayer(self.spec, filters)


@dataclass(frozen=True, eq=False)
class FcLayer:
    spec: FcSpec

    kind = "fc"

    @property
    def input_length(self):
        return self.spec.l_X

    @property
    def output_length(self):
        return self.spec.l_Y

    @property
    def weights(self):
        return self.spec.theta

    def with_weights(self, theta):
        return FcLayer(self.spec.with_theta(theta))


@dataclass(frozen=True)
class ActivationLayer:
    activation: ActivationKind
    length: int

    kind = "activation"

    @property
    def input_length(self):
        return self.length

    @property
    def output_length(self):
        return self.length

    @property
    def weights(self):
        return None


def check_layer_stack(layers, n_X, n_Y):
    """ Checks that consecutive layers chain and that the stack maps n_X inputs to n_Y outputs.

    Convolutions are single-channel, so only the first layer may be one.

    Raises
    ------
    InvalidSpec
        The stack is empty or does not chain.
    """
    if len(layers) == 0:
        raise InvalidSpec("A model needs at least one layer.")
    length = n_X
    for position, layer in enumerate(layers):
        if layer.kind == "conv" and position > 0:
            raise InvalidSpec("Only the first layer may be a convolution.")
        if layer.input_length != length:
            raise InvalidSpec(f"Layer {position} expects {layer.input_length} inputs but receives {length}.")
        length = layer.output_length
    if length != n_Y:
        raise InvalidSpec(f"The model produces {length} outputs but records carry {n_Y} labels.")
    if layers[-1].kind == "conv":
        raise InvalidSpec("The final layer must be fully connected or an activation.")
#endregion


#region Helpers
def numerical_gradient(f, x, h=1e-6):
    """ Central-difference gradient of the scalar function ``f`` at ``x``. """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        f_plus = f(x)
        flat[k] = orig - h
        f_minus = f(x)
        flat[k] = orig
        grad_flat[k] = (f_plus - f_minus) / (2 * h)
    return grad


def tensor_to_json(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": a.ravel().tolist()}


def tensor_from_json(obj):
    values = np.asarray(obj["values"], dtype=np.float64)
    shape = tuple(obj["shape"])
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatch(f"{values.size} values do not fill shape {shape}.")
    return values.reshape(shape)
#endregion
