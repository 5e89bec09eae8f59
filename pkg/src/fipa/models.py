"""Dense MLPs with exact parameter Jacobians and input Laplacians.

Everything is batched over samples: ``X`` has shape ``(N, d)``. Parameters
live in one flat float64 vector, laid out layer by layer as the row-major
weight matrix ``W`` (out x in) followed by the bias ``b``.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
LOSS_KINDS = ("mse", "softmax_ce")


def _act_derivs(name, z, order):
    """Return ``[sigma(z), sigma'(z), ...]`` up to the requested derivative order."""
    if name == "tanh":
        t = np.tanh(z)
        out = [t]
        if order >= 1:
            d1 = 1.0 - t * t
            out.append(d1)
        if order >= 2:
            out.append(-2.0 * t * d1)
        if order >= 3:
            out.append(d1 * (4.0 * t * t - 2.0 * d1))
        return out
    if name == "identity":
        zero = np.zeros_like(z)
        return [z, np.ones_like(z), zero, zero][: order + 1]
    if name == "relu":
        if order >= 2:
            raise ValueError("relu is not twice differentiable; input Laplacian unsupported")
        out = [np.maximum(z, 0.0)]
        if order >= 1:
            out.append((z > 0).astype(np.float64))
        return out
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(d, hidden..., C)`` and the hidden-layer activations."""

    layer_widths: tuple
    activation: object = "tanh"  # one name, or one per hidden layer

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if min(widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        acts = self.activations
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def activations(self):
        n_hidden = len(self.layer_widths) - 2
        if isinstance(self.activation, str):
            return (self.activation,) * n_hidden
        acts = tuple(self.activation)
        if len(acts) != n_hidden:
            raise ValueError(f"expected {n_hidden} activations, got {len(acts)}")
        return acts

    @property
    def input_dim(self):
        return self.layer_widths[0]

    @property
    def output_dim(self):
        return self.layer_widths[-1]

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def n_params(self):
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layer_slices(self):
        """``[(weight_slice, bias_slice), ...]`` into the flat parameter vector."""
        out, start = [], 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            nw = w[i] * w[i + 1]
            out.append((slice(start, start + nw), slice(start + nw, start + nw + w[i + 1])))
            start += nw + w[i + 1]
        return out

    def unpack(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {values.shape}")
        w = self.layer_widths
        return [
            (values[sw].reshape(w[i + 1], w[i]), values[sb])
            for i, (sw, sb) in enumerate(self.layer_slices())
        ]


@dataclass
class ParamVector:
    """Flat parameters plus a trainable mask. Masked-off entries are frozen."""

    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.array(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ValueError("mask and values must have the same length")

    @property
    def p(self):
        return self.values.size

    @property
    def p_eff(self):
        return int(self.mask.sum())

    @property
    def trainable(self):
        return np.flatnonzero(self.mask)

    def copy(self):
        return ParamVector(self.values.copy(), self.mask.copy())

    def restrict(self, full):
        """Trainable coordinates of a full-length vector."""
        return np.asarray(full, dtype=np.float64)[..., self.mask]

    def expand(self, reduced):
        """Full-length vector with ``reduced`` in the trainable slots and zeros elsewhere."""
        out = np.zeros(self.p)
        out[self.mask] = reduced
        return out

    def apply_update(self, delta):
        """``theta + delta`` on trainable coordinates; frozen ones are copied bit-for-bit."""
        delta = np.asarray(delta, dtype=np.float64)
        values = self.values.copy()
        if delta.size == self.p_eff and self.p_eff != self.p:
            values[self.mask] += delta
        elif delta.size == self.p:
            values[self.mask] += delta[self.mask]
        else:
            raise ValueError(f"update of length {delta.size} matches neither p nor p_eff")
        return ParamVector(values, self.mask.copy())


def _values(theta):
    return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)


def layer_mask(spec, layers):
    """Trainable mask selecting whole layers (negative indices count from the output)."""
    mask = np.zeros(spec.n_params, dtype=bool)
    slices = spec.layer_slices()
    for i in layers:
        sw, sb = slices[i]
        mask[sw] = True
        mask[sb] = True
    return mask


def init_params(spec, seed=0, mask=None):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.n_params)
    w = spec.layer_widths
    for i, (sw, _) in enumerate(spec.layer_slices()):
        limit = np.sqrt(6.0 / (w[i] + w[i + 1]))
        values[sw] = rng.uniform(-limit, limit, size=w[i] * w[i + 1])
    return ParamVector(values, mask)


def _as_batch(spec, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs with {spec.input_dim} features, got shape {X.shape}")
    return X, single


def _forward_cache(spec, values, X, order=1):
    layers = spec.unpack(values)
    acts = spec.activations
    a = X
    cache = []
    for (W, b), name in zip(layers[:-1], acts):
        z = a @ W.T + b
        d = _act_derivs(name, z, order)
        cache.append((a, d))
        a = d[0]
    W, b = layers[-1]
    return layers, cache, a, a @ W.T + b


def forward(spec, theta, X):
    """Network output, ``(C,)`` for a single input or ``(N, C)`` for a batch."""
    X, single = _as_batch(spec, X)
    out = _forward_cache(spec, _values(theta), X, order=0)[3]
    return out[0] if single else out


def _pack(spec, grads):
    """Concatenate per-layer ``(gW, gb)`` with leading batch axes into flat vectors."""
    parts = []
    for gW, gb in grads:
        lead = gb.shape[:-1]
        parts.append(gW.reshape(lead + (-1,)))
        parts.append(gb)
    return np.concatenate(parts, axis=-1)


def param_jacobian_batch(spec, theta, X):
    """Per-sample Jacobians of the outputs, shape ``(N, C, p)``."""
    X, _ = _as_batch(spec, X)
    layers, cache, a_last, _ = _forward_cache(spec, _values(theta), X)
    N, C = X.shape[0], spec.output_dim
    Z = np.broadcast_to(np.eye(C), (N, C, C))
    grads = []
    a_in = a_last
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        grads.append((Z[:, :, :, None] * a_in[:, None, None, :], Z))
        if li == 0:
            break
        a_prev, d = cache[li - 1]
        Z = (Z @ W) * d[1][:, None, :]
        a_in = a_prev
    return _pack(spec, grads[::-1])


def param_jacobian(spec, theta, x):
    """Jacobian ``d f(x) / d theta`` of a single input, shape ``(C, p)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("param_jacobian takes a single input vector")
    return param_jacobian_batch(spec, theta, x[None, :])[0]


def jvp(spec, theta, X, v):
    """Forward-mode product ``J_i v`` for every sample, shape ``(N, C)``."""
    X, _ = _as_batch(spec, X)
    values = _values(theta)
    layers = spec.unpack(values)
    tangents = spec.unpack(np.asarray(v, dtype=np.float64))
    a, da = X, np.zeros_like(X)
    for (W, b), (V, vb), name in zip(layers[:-1], tangents[:-1], spec.activations):
        z = a @ W.T + b
        dz = da @ W.T + a @ V.T + vb
        s0, s1 = _act_derivs(name, z, 1)
        a, da = s0, s1 * dz
    (W, _), (V, vb) = layers[-1], tangents[-1]
    return da @ W.T + a @ V.T + vb


def vjp(spec, theta, X, U):
    """Reverse-mode product ``sum_i J_i^T u_i`` for cotangents ``U`` of shape ``(N, C)``."""
    X, _ = _as_batch(spec, X)
    layers, cache, a_in, _ = _forward_cache(spec, _values(theta), X)
    Z = np.asarray(U, dtype=np.float64).reshape(X.shape[0], spec.output_dim)
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        grads.append((Z.T @ a_in, Z.sum(axis=0)))
        if li == 0:
            break
        a_prev, d = cache[li - 1]
        Z = (Z @ W) * d[1]
        a_in = a_prev
    return _pack(spec, grads[::-1])


def _laplacian_cache(spec, values, X):
    """Forward pass carrying first and second input-derivative tangents per coordinate."""
    if spec.output_dim != 1:
        raise ValueError("input Laplacian needs a scalar-output network")
    layers = spec.unpack(values)
    N, d = X.shape
    a = X
    da = np.broadcast_to(np.eye(d), (N, d, d)).copy()
    dda = np.zeros((N, d, d))
    cache = []
    for (W, b), name in zip(layers[:-1], spec.activations):
        z = a @ W.T + b
        dz = da @ W.T
        ddz = dda @ W.T
        s = _act_derivs(name, z, 3)
        cache.append((a, da, dda, dz, ddz, s))
        a = s[0]
        da = s[1][:, None, :] * dz
        dda = s[2][:, None, :] * dz * dz + s[1][:, None, :] * ddz
    return layers, cache, a, dda


def input_laplacian_batch(spec, theta, X):
    """Values ``u`` and Laplacians ``sum_i d^2u/dx_i^2``, each of shape ``(N,)``."""
    X, _ = _as_batch(spec, X)
    layers, _, a, dda = _laplacian_cache(spec, _values(theta), X)
    W, b = layers[-1]
    u = (a @ W.T + b)[:, 0]
    lap = (dda.sum(axis=1) @ W.T)[:, 0]
    return u, lap


def input_laplacian(spec, theta, x):
    """``(u, lap)`` at a single point via second-order tangents swept per coordinate."""
    u, lap = input_laplacian_batch(spec, theta, np.asarray(x, dtype=np.float64)[None, :])
    return float(u[0]), float(lap[0])


def laplacian_residual_jacobian(spec, theta, X, coef_u, coef_lap):
    """Per-sample gradients of ``coef_u * u + coef_lap * lap`` w.r.t. theta, shape ``(N, p)``.

    ``coef_u`` and ``coef_lap`` are per-sample arrays (or scalars); a PDE residual
    ``-lap + G(u) - f`` has row ``coef_u = G'(u)``, ``coef_lap = -1``.
    """
    X, _ = _as_batch(spec, X)
    N = X.shape[0]
    layers, cache, a_last, dda_last = _laplacian_cache(spec, _values(theta), X)
    cu = np.broadcast_to(np.asarray(coef_u, dtype=np.float64), (N,))
    cl = np.broadcast_to(np.asarray(coef_lap, dtype=np.float64), (N,))
    W, _ = layers[-1]
    w_row = W[0]
    gW = (cu[:, None] * a_last + cl[:, None] * dda_last.sum(axis=1))[:, None, :]
    grads = [(gW, cu[:, None].copy())]
    A = cu[:, None] * w_row
    dA = np.zeros_like(dda_last)
    ddA = np.broadcast_to((cl[:, None] * w_row)[:, None, :], dda_last.shape).copy()
    for li in range(len(layers) - 2, -1, -1):
        W, _ = layers[li]
        a, da, dda, dz, ddz, s = cache[li]
        s1, s2, s3 = (si[:, None, :] for si in s[1:4])
        ddZ = ddA * s1
        dZ = dA * s1 + 2.0 * ddA * s2 * dz
        Z = (
            A * s[1]
            + (dA * s2 * dz).sum(axis=1)
            + (ddA * (s3 * dz * dz + s2 * ddz)).sum(axis=1)
        )
        gW = (
            Z[:, :, None] * a[:, None, :]
            + np.einsum("niw,niv->nwv", dZ, da)
            + np.einsum("niw,niv->nwv", ddZ, dda)
        )
        grads.append((gW, Z))
        A, dA, ddA = Z @ W, dZ @ W, ddZ @ W
    return _pack(spec, grads[::-1])


class OutputHessian(NamedTuple):
    kind: str
    matrix: np.ndarray


def softmax(Z):
    Z = np.asarray(Z, dtype=np.float64)
    e = np.exp(Z - Z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def output_hessian(kind, z):
    """Hessian of the per-sample loss w.r.t. the network output ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite network output")
    if kind == "mse":
        return OutputHessian(kind, np.eye(z.size))
    if kind == "softmax_ce":
        p = softmax(z)
        return OutputHessian(kind, np.diag(p) - np.outer(p, p))
    raise ValueError(f"unknown loss kind {kind!r}")


def apply_output_hessian(kind, Z, R):
    """Batched ``S_i r_i`` for outputs ``Z`` and vectors ``R``, both ``(N, C)``."""
    if kind == "mse":
        return R
    if kind == "softmax_ce":
        P = softmax(Z)
        return P * R - P * np.sum(P * R, axis=1, keepdims=True)
    raise ValueError(f"unknown loss kind {kind!r}")


def unpack_dataset(dataset):
    if isinstance(dataset, tuple):
        X, Y = dataset
    else:
        X, Y = dataset.inputs, dataset.targets
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) == 0:
        raise ValueError("empty dataset")
    return X, np.asarray(Y)


def loss_terms(kind, Z, Y):
    """Per-sample losses and output gradients ``d loss / d z``."""
    if kind == "mse":
        R = Z - np.asarray(Y, dtype=np.float64).reshape(Z.shape)
        return 0.5 * np.sum(R * R, axis=1), R
    if kind == "softmax_ce":
        y = np.asarray(Y).astype(int).reshape(-1)
        shifted = Z - Z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        losses = logsum - shifted[np.arange(len(y)), y]
        G = softmax(Z)
        G[np.arange(len(y)), y] -= 1.0
        return losses, G
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_and_gradient(spec, theta, dataset, loss_kind):
    """Mean loss over the dataset and its gradient; frozen coordinates get zero gradient.

    MSE uses ``0.5 * ||f - y||^2`` per sample so the output Hessian is exactly ``I``.
    """
    X, Y = unpack_dataset(dataset)
    Z = forward(spec, theta, X)
    losses, G = loss_terms(loss_kind, Z, Y)
    n = X.shape[0]
    grad = vjp(spec, theta, X, G / n)
    if isinstance(theta, ParamVector):
        grad[~theta.mask] = 0.0
    return float(losses.mean()), grad
