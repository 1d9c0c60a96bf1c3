"""Small fully connected networks with exact first and second order derivatives.

Parameters live in one flat float32 vector; every computation casts to float64
first so that gradients survive a central-difference comparison.  Layer ``l``
occupies ``out_l * in_l`` weights (row-major, shape ``(out, in)``) followed by
``out_l`` biases.

A batch may carry ``group > 1``: consecutive rows are then treated as frames of
one sample and the first layer's activations are mean-pooled per group.  Every
later layer is affine-then-activation, so with a linear layer directly after
the pooled one this is the same as pooling the per-frame embeddings.

Second derivatives are obtained with the R-operator (a forward-mode sweep of
the backward pass), which yields exact Hessian-vector products.  That is all
MAML needs when only one inner step is differentiated through.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, ShapeError

HIDDEN_ACTIVATIONS = ("tanh", "relu", "linear")
LOSS_KINDS = ("softmax_ce", "logistic_ce", "mse")


@dataclass(frozen=True)
class NetSpec:
    layer_sizes: tuple
    activations: tuple = ()
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layer_sizes) < 2:
            raise ShapeError("a network needs at least an input and an output width")
        if any(s < 1 for s in self.layer_sizes):
            raise ShapeError(f"layer widths must be positive: {self.layer_sizes}")
        if len(self.activations) != len(self.layer_sizes) - 2:
            raise ShapeError(
                f"{len(self.layer_sizes) - 2} hidden layers but "
                f"{len(self.activations)} activations"
            )
        for act in self.activations:
            if act not in HIDDEN_ACTIVATIONS:
                raise ShapeError(f"unknown activation {act!r}")
        if self.output_activation != "linear":
            raise ShapeError("only a linear output layer is supported")

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return param_count(self)

    def fingerprint(self):
        text = f"{self.layer_sizes}|{self.activations}|{self.output_activation}"
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["layer_sizes"], d["activations"], d.get("output_activation", "linear"))


def mlp(sizes, activation="tanh"):
    """Shorthand: every hidden layer uses the same activation."""
    return NetSpec(tuple(sizes), (activation,) * (len(sizes) - 2))


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    loss_kind: str
    group: int = 1

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ShapeError(f"unknown loss kind {self.loss_kind!r}")
        self.inputs = np.atleast_2d(np.asarray(self.inputs))
        self.targets = np.asarray(self.targets)
        if self.inputs.shape[0] % self.group:
            raise ShapeError(f"{self.inputs.shape[0]} rows do not split into groups of {self.group}")
        if self.targets.shape[0] != self.n_samples:
            raise ShapeError(
                f"{self.n_samples} samples but {self.targets.shape[0]} targets"
            )

    @property
    def n_samples(self):
        return self.inputs.shape[0] // self.group

    def __len__(self):
        return self.n_samples


def param_count(spec):
    s = spec.layer_sizes
    return sum(s[i + 1] * (s[i] + 1) for i in range(len(s) - 1))


def unflatten(spec, theta):
    """Split a flat vector into ``[(W, b), ...]`` views (no copies)."""
    theta = np.asarray(theta)
    if theta.ndim != 1 or theta.shape[0] != param_count(spec):
        raise ShapeError(f"expected {param_count(spec)} parameters, got {theta.shape}")
    layers, k = [], 0
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = theta[k:k + n_out * n_in].reshape(n_out, n_in)
        k += n_out * n_in
        b = theta[k:k + n_out]
        k += n_out
        layers.append((w, b))
    return layers


def flatten(layers):
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers])


def init_params(spec, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        parts.append(rng.uniform(-bound, bound, size=n_out * n_in))
        parts.append(np.zeros(n_out))
    return np.concatenate(parts).astype(np.float32)


# -- activations -------------------------------------------------------------

def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _dact(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


def _ddact(name, z, a):
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    return np.zeros_like(z)


def _layer_acts(spec):
    return list(spec.activations) + [spec.output_activation]


def _pool(a, group):
    if group == 1:
        return a
    return a.reshape(-1, group, a.shape[1]).mean(axis=1)


def _unpool(g, group):
    if group == 1:
        return g
    return np.repeat(g / group, group, axis=0)


# -- forward / backward ------------------------------------------------------

def _check_input(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != spec.n_in:
        raise ShapeError(f"input width {x.shape[1]} does not match network input {spec.n_in}")
    return x


def forward_trace(spec, params, x, group=1):
    """Forward pass that keeps what the backward pass needs.

    Returns ``(out, trace)``; ``trace`` holds the layer list and, per layer,
    the (pooled) input, the pre-activation and the activation.
    """
    layers = unflatten(spec, np.asarray(params, dtype=np.float64))
    x = _check_input(spec, x)
    if group > 1 and len(layers) == 1:
        x = _pool(x, group)
    acts = _layer_acts(spec)
    a = x
    steps = []
    for i, ((w, b), name) in enumerate(zip(layers, acts)):
        z = a @ w.T + b
        out = _act(name, z)
        steps.append((a, z, out))
        a = _pool(out, group) if (i == 0 and group > 1 and len(layers) > 1) else out
    return a, {"layers": layers, "steps": steps, "group": group}


def forward(spec, params, x, group=1):
    """Output-layer values for each input row (or each group of rows)."""
    out, _ = forward_trace(spec, params, x, group)
    return out


def backprop(spec, trace, g_out, need_input=False):
    """Reverse sweep. Returns ``(flat_grad, grad_wrt_input_or_None)``."""
    layers, steps, group = trace["layers"], trace["steps"], trace["group"]
    acts = _layer_acts(spec)
    n = len(layers)
    grads = [None] * n
    g = g_out
    for i in range(n - 1, -1, -1):
        a_in, z, out = steps[i]
        w, _ = layers[i]
        if i == 0 and group > 1 and n > 1:
            g = _unpool(g, group)
        gz = g * _dact(acts[i], z, out)
        grads[i] = (gz.T @ a_in, gz.sum(axis=0))
        if i > 0 or need_input:
            g = gz @ w
    g_in = None
    if need_input:
        g_in = _unpool(g, group) if (group > 1 and n == 1) else g
    return flatten(grads), g_in


def _loss_terms(kind, out, targets):
    """Per-sample losses and d(mean loss)/d(out)."""
    n = out.shape[0]
    if kind == "softmax_ce":
        y = np.asarray(targets).astype(np.int64).ravel()
        if y.min() < 0 or y.max() >= out.shape[1]:
            raise ShapeError(f"labels must lie in [0, {out.shape[1]})")
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        per = logz - shifted[np.arange(n), y]
        p = np.exp(shifted - logz[:, None])
        g = p.copy()
        g[np.arange(n), y] -= 1.0
        return per, g / n
    if kind == "logistic_ce":
        if out.shape[1] != 1:
            raise ShapeError("logistic_ce needs a single output")
        z = out[:, 0]
        t = np.asarray(targets, dtype=np.float64).reshape(n)
        per = np.logaddexp(0.0, z) - t * z
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return per, ((sig - t) / n)[:, None]
    t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    diff = out - t
    return (diff ** 2).sum(axis=1), 2.0 * diff / n


def _loss_hessian_vec(kind, out, r_out):
    """(d^2 mean loss / d out^2) applied to the tangent ``r_out``."""
    n = out.shape[0]
    if kind == "softmax_ce":
        shifted = out - out.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        return p * (r_out - (p * r_out).sum(axis=1, keepdims=True)) / n
    if kind == "logistic_ce":
        sig = 0.5 * (1.0 + np.tanh(0.5 * out))
        return sig * (1.0 - sig) * r_out / n
    return 2.0 * r_out / n


def _check_finite(per):
    bad = np.flatnonzero(~np.isfinite(per))
    if bad.size:
        raise NumericError(f"non-finite loss at example {bad[0]}", index=int(bad[0]))


def batch_loss(spec, params, batch):
    out = forward(spec, params, batch.inputs, batch.group)
    per, _ = _loss_terms(batch.loss_kind, out, batch.targets)
    _check_finite(per)
    return float(per.mean())


def loss_and_grad(spec, params, batch):
    """Mean batch loss and its exact gradient with respect to ``params``."""
    if len(batch) == 0:
        raise ShapeError("empty batch")
    out, trace = forward_trace(spec, params, batch.inputs, batch.group)
    per, g_out = _loss_terms(batch.loss_kind, out, batch.targets)
    _check_finite(per)
    grad, _ = backprop(spec, trace, g_out)
    return float(per.mean()), grad


def hvp(spec, params, batch, vec):
    """Exact Hessian-vector product of the mean batch loss."""
    out, trace = forward_trace(spec, params, batch.inputs, batch.group)
    layers, steps, group = trace["layers"], trace["steps"], trace["group"]
    dlayers = unflatten(spec, np.asarray(vec, dtype=np.float64))
    acts = _layer_acts(spec)
    n = len(layers)
    pool_first = group > 1 and n > 1

    # forward R-sweep
    r_in = [None] * n
    r_z = [None] * n
    r_a = np.zeros_like(steps[0][0])
    for i in range(n):
        a_in, z, a_out = steps[i]
        (w, _), (dw, db) = layers[i], dlayers[i]
        r_in[i] = r_a
        r_z[i] = a_in @ dw.T + r_a @ w.T + db
        r_out = _dact(acts[i], z, a_out) * r_z[i]
        r_a = _pool(r_out, group) if (i == 0 and pool_first) else r_out

    _, g = _loss_terms(batch.loss_kind, out, batch.targets)
    r_g = _loss_hessian_vec(batch.loss_kind, out, r_a)

    hv = [None] * n
    for i in range(n - 1, -1, -1):
        a_in, z, a_out = steps[i]
        (w, _), (dw, _) = layers[i], dlayers[i]
        if i == 0 and pool_first:
            g, r_g = _unpool(g, group), _unpool(r_g, group)
        d1 = _dact(acts[i], z, a_out)
        gz = g * d1
        r_gz = _ddact(acts[i], z, a_out) * r_z[i] * g + d1 * r_g
        hv[i] = (r_gz.T @ a_in + gz.T @ r_in[i], r_gz.sum(axis=0))
        if i > 0:
            g, r_g = gz @ w, r_gz @ w + gz @ dw
    return flatten(hv)


def finite_diff_grad(spec, params, batch, rel_step=1e-3):
    """Central differences, step ``rel_step * max(1, |theta_i|)`` per coordinate."""
    theta = np.asarray(params, dtype=np.float64).copy()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        h = rel_step * max(1.0, abs(theta[i]))
        orig = theta[i]
        theta[i] = orig + h
        up = batch_loss(spec, theta, batch)
        theta[i] = orig - h
        down = batch_loss(spec, theta, batch)
        theta[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


# -- optimizers --------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray | None = field(default=None, repr=False)
    second_moment: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def sgd(learning_rate):
    return OptimizerState("sgd", learning_rate)


def adam(learning_rate, n_params, beta1=0.9, beta2=0.999, epsilon=1e-8):
    return OptimizerState(
        "adam", learning_rate, beta1, beta2, epsilon, 0,
        np.zeros(n_params), np.zeros(n_params),
    )


def optimizer_step(state, params, grad):
    """One update. Returns new ``(params, state)``; inputs are not modified."""
    theta = np.asarray(params, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if theta.shape != g.shape:
        raise ShapeError(f"params {theta.shape} vs grad {g.shape}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NumericError(f"non-finite gradient entry {bad[0]}", index=int(bad[0]))
    if state.kind == "sgd":
        new = theta - state.learning_rate * g
        return new.astype(np.float32), replace(state, step_count=state.step_count + 1)
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new.astype(np.float32), replace(state, step_count=t, first_moment=m, second_moment=v)


# -- meta-gradient -----------------------------------------------------------

def meta_grad_maml(spec, theta, support, query, alpha, first_order=False):
    """Gradient of the query loss after one SGD step on the support batch.

    ``theta_task = theta - alpha * grad L_support(theta)``.  The exact
    meta-gradient is ``(I - alpha H_support(theta)) grad L_query(theta_task)``;
    the first-order variant drops the Hessian term.
    """
    if support.loss_kind != query.loss_kind:
        raise ShapeError("support and query must share a loss kind")
    theta = np.asarray(theta, dtype=np.float64)
    if alpha == 0:
        return loss_and_grad(spec, theta, query)
    _, g_support = loss_and_grad(spec, theta, support)
    adapted = theta - alpha * g_support
    q_loss, g_query = loss_and_grad(spec, adapted, query)
    if first_order:
        return q_loss, g_query
    return q_loss, g_query - alpha * hvp(spec, theta, support, g_query)
