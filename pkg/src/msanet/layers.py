"""Network layers as discrete-time dynamics with co-state pullbacks.

A network x_{t+1} = f_t(x_t, theta_t) is a list of layers. Each layer knows
three things: how to map a batch of states forward, how to pull a batch of
co-states backward through itself (the transpose-Jacobian action, evaluated
at given input states), and how to score a candidate parameter value by the
summed per-sample Hamiltonian

    H_t = sum_s [ p_{s,t+1} . f_t(x_{s,t}, theta) - (1/S) L_t(x_{s,t}, theta) ]

where S is the batch size. Weight-decay style running costs L_t only appear
on ternary layers (lam * ||theta||_F^2, state independent); everywhere else
L_t = 0.

Batches are float64 arrays of shape (S, dim), one row per sample.
"""

import copy

import numpy as np

from .linalg import Array, NonFiniteError, ShapeError, as_array, check_finite


class DiscreteLayerError(TypeError):
    """A smooth-parameter operation targeted a layer without float parameters."""


def coefficient_matrix(xs: Array, ps_next: Array) -> Array:
    """Sum of outer products sum_s p_{s,t+1} x_{s,t}^T.

    For any layer whose map is linear in its weight matrix, the summed
    Hamiltonian is <M, theta> up to parameter-free terms, so this matrix is
    the whole story for per-layer maximization.
    """
    xs = as_array(xs, ndim=2)
    ps_next = as_array(ps_next, ndim=2)
    if xs.shape[0] != ps_next.shape[0]:
        raise ShapeError(
            f"batch sizes differ: states {xs.shape} vs co-states {ps_next.shape}"
        )
    if xs.shape[0] == 0:
        raise ShapeError("empty batch has no coefficient matrix")
    return check_finite(ps_next.T @ xs, "coefficient matrix")


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    """Shared shape bookkeeping. Subclasses fill in the math."""

    in_dim: int
    out_dim: int
    trainable = False
    discrete = False

    def _check_states(self, xs: Array) -> Array:
        xs = as_array(xs, ndim=2)
        if xs.shape[1] != self.in_dim:
            raise ShapeError(
                f"{type(self).__name__} expects state dim {self.in_dim}, "
                f"got batch of shape {xs.shape}"
            )
        return check_finite(xs, "input states")

    def _check_costates(self, ps_next: Array, batch: int) -> Array:
        ps_next = as_array(ps_next, ndim=2)
        if ps_next.shape != (batch, self.out_dim):
            raise ShapeError(
                f"{type(self).__name__} expects co-state batch "
                f"({batch}, {self.out_dim}), got {ps_next.shape}"
            )
        return check_finite(ps_next, "co-states")

    def forward(self, xs: Array, training: bool = False) -> Array:
        raise NotImplementedError

    def costate_pullback(self, xs: Array, ps_next: Array, training: bool = False) -> Array:
        raise NotImplementedError

    def hamiltonian_sum(self, xs, ps_next, theta=None, training: bool = False) -> float:
        raise NotImplementedError

    def grad_theta_hamiltonian(self, xs, ps_next, training: bool = False):
        raise DiscreteLayerError(
            f"{type(self).__name__} has no float parameters to differentiate"
        )

    def forward_with(self, theta, xs: Array, training: bool = False) -> Array:
        """Forward map under a candidate parameter value, states unchanged."""
        raise DiscreteLayerError(
            f"{type(self).__name__} takes no candidate parameters"
        )


def _check_discrete(theta: Array, allowed, name: str) -> Array:
    theta = as_array(theta, ndim=2)
    check_finite(theta, f"{name} weights")
    if not np.all(np.isin(theta, allowed)):
        raise ValueError(f"{name} weights must take values in {sorted(allowed)}")
    return theta.copy()


class BinaryDense(Layer):
    """x -> theta x with theta in {-1, +1}^(out x in). No bias, no running cost."""

    trainable = True
    discrete = True

    def __init__(self, theta):
        self.theta = _check_discrete(theta, (-1.0, 1.0), "binary")
        self.out_dim, self.in_dim = self.theta.shape

    @classmethod
    def random(cls, in_dim: int, out_dim: int, rng: np.random.Generator):
        return cls(rng.choice([-1.0, 1.0], size=(out_dim, in_dim)))

    def _apply(self, theta: Array, xs: Array) -> Array:
        return xs @ theta.T

    def forward(self, xs, training=False):
        return self._apply(self.theta, self._check_states(xs))

    def costate_pullback(self, xs, ps_next, training=False):
        xs = self._check_states(xs)
        return self._check_costates(ps_next, xs.shape[0]) @ self.theta

    def hamiltonian_sum(self, xs, ps_next, theta=None, training=False):
        xs = self._check_states(xs)
        ps_next = self._check_costates(ps_next, xs.shape[0])
        th = self.theta if theta is None else as_array(theta, ndim=2)
        if th.shape != self.theta.shape:
            raise ShapeError(f"candidate shape {th.shape} != {self.theta.shape}")
        return float(np.sum(ps_next * self._apply(th, xs)))

    def forward_with(self, theta, xs, training=False):
        th = as_array(theta, ndim=2)
        if th.shape != self.theta.shape:
            raise ShapeError(f"candidate shape {th.shape} != {self.theta.shape}")
        return self._apply(th, self._check_states(xs))


class TernaryDense(Layer):
    """x -> theta x with theta in {-1, 0, +1} and running cost lam ||theta||_F^2.

    The running cost is state independent, so its (1/S) sum_s collapses and
    the summed Hamiltonian is <M, theta> - lam ||theta||_F^2.
    """

    trainable = True
    discrete = True

    def __init__(self, theta, lam: float):
        self.theta = _check_discrete(theta, (-1.0, 0.0, 1.0), "ternary")
        self.out_dim, self.in_dim = self.theta.shape
        if not (np.isfinite(lam) and lam >= 0.0):
            raise ValueError(f"lam must be finite and >= 0, got {lam}")
        self.lam = float(lam)

    @classmethod
    def random(cls, in_dim: int, out_dim: int, lam: float, rng: np.random.Generator):
        return cls(rng.choice([-1.0, 0.0, 1.0], size=(out_dim, in_dim)), lam)

    def _apply(self, theta: Array, xs: Array) -> Array:
        return xs @ theta.T

    def forward(self, xs, training=False):
        return self._apply(self.theta, self._check_states(xs))

    def costate_pullback(self, xs, ps_next, training=False):
        xs = self._check_states(xs)
        return self._check_costates(ps_next, xs.shape[0]) @ self.theta

    def running_cost(self, theta=None) -> float:
        th = self.theta if theta is None else theta
        return self.lam * float(np.sum(th * th))

    def hamiltonian_sum(self, xs, ps_next, theta=None, training=False):
        xs = self._check_states(xs)
        ps_next = self._check_costates(ps_next, xs.shape[0])
        th = self.theta if theta is None else as_array(theta, ndim=2)
        if th.shape != self.theta.shape:
            raise ShapeError(f"candidate shape {th.shape} != {self.theta.shape}")
        return float(np.sum(ps_next * self._apply(th, xs))) - self.running_cost(th)

    def forward_with(self, theta, xs, training=False):
        th = as_array(theta, ndim=2)
        if th.shape != self.theta.shape:
            raise ShapeError(f"candidate shape {th.shape} != {self.theta.shape}")
        return self._apply(th, self._check_states(xs))


class FloatDense(Layer):
    """Affine layer x -> W x + b with unconstrained float64 parameters."""

    trainable = True

    def __init__(self, weight, bias=None):
        self.weight = check_finite(as_array(weight, ndim=2), "weight")
        self.out_dim, self.in_dim = self.weight.shape
        if bias is None:
            self.bias = None
        else:
            self.bias = check_finite(as_array(bias, ndim=1), "bias")
            if self.bias.shape != (self.out_dim,):
                raise ShapeError(
                    f"bias shape {self.bias.shape} != ({self.out_dim},)"
                )

    @classmethod
    def random(cls, in_dim: int, out_dim: int, rng: np.random.Generator, bias=True):
        w = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
        return cls(w, np.zeros(out_dim) if bias else None)

    def _apply(self, params: dict, xs: Array) -> Array:
        out = xs @ params["weight"].T
        if params.get("bias") is not None:
            out = out + params["bias"]
        return out

    def params(self) -> dict:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def set_params(self, params: dict):
        self.weight = check_finite(as_array(params["weight"], ndim=2), "weight")
        if self.weight.shape != (self.out_dim, self.in_dim):
            raise ShapeError(f"weight shape changed to {self.weight.shape}")
        if self.bias is not None:
            self.bias = check_finite(as_array(params["bias"], ndim=1), "bias")

    def forward(self, xs, training=False):
        return self._apply(self.params(), self._check_states(xs))

    def costate_pullback(self, xs, ps_next, training=False):
        xs = self._check_states(xs)
        return self._check_costates(ps_next, xs.shape[0]) @ self.weight

    def hamiltonian_sum(self, xs, ps_next, theta=None, training=False):
        xs = self._check_states(xs)
        ps_next = self._check_costates(ps_next, xs.shape[0])
        params = self.params() if theta is None else theta
        return float(np.sum(ps_next * self._apply(params, xs)))

    def grad_theta_hamiltonian(self, xs, ps_next, training=False):
        """d/dtheta sum_s H: weight part is the coefficient matrix."""
        xs = self._check_states(xs)
        ps_next = self._check_costates(ps_next, xs.shape[0])
        grad = {"weight": ps_next.T @ xs}
        if self.bias is not None:
            grad["bias"] = ps_next.sum(axis=0)
        return grad

    def forward_with(self, theta, xs, training=False):
        return self._apply(theta, self._check_states(xs))


_ACTIVATIONS = {
    "relu": (
        lambda x: np.maximum(x, 0.0),
        # subgradient 0 at the kink
        lambda x: (x > 0.0).astype(np.float64),
    ),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "sigmoid": (_sigmoid, lambda x: _sigmoid(x) * (1.0 - _sigmoid(x))),
    "softplus": (lambda x: np.logaddexp(0.0, x), _sigmoid),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


class Activation(Layer):
    """Entrywise nonlinearity; the pullback multiplies by sigma'(x)."""

    def __init__(self, kind: str, dim: int):
        if kind not in _ACTIVATIONS:
            raise ValueError(
                f"unknown activation {kind!r}, expected one of {sorted(_ACTIVATIONS)}"
            )
        if dim < 1:
            raise ShapeError(f"activation dim must be >= 1, got {dim}")
        self.kind = kind
        self.in_dim = self.out_dim = int(dim)
        self._fn, self._deriv = _ACTIVATIONS[kind]

    def forward(self, xs, training=False):
        return check_finite(self._fn(self._check_states(xs)), f"{self.kind} output")

    def costate_pullback(self, xs, ps_next, training=False):
        xs = self._check_states(xs)
        return self._check_costates(ps_next, xs.shape[0]) * self._deriv(xs)

    def hamiltonian_sum(self, xs, ps_next, theta=None, training=False):
        if theta is not None:
            raise DiscreteLayerError("activation layers have no parameters")
        xs = self._check_states(xs)
        ps_next = self._check_costates(ps_next, xs.shape[0])
        return float(np.sum(ps_next * self._fn(xs)))


class BatchNorm(Layer):
    """Per-feature normalization with trainable scale gamma and shift beta.

    Training mode normalizes by the current batch's mean and (biased)
    variance and needs at least two samples; inference mode uses the stored
    running statistics. forward() never touches the running statistics;
    update_running() does, and the train loop calls it explicitly after each
    training-mode forward pass.
    """

    trainable = True

    def __init__(self, gamma, beta, running_mean=None, running_var=None,
                 eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = check_finite(as_array(gamma, ndim=1), "gamma")
        self.beta = check_finite(as_array(beta, ndim=1), "beta")
        dim = self.gamma.shape[0]
        if self.beta.shape != (dim,):
            raise ShapeError(f"beta shape {self.beta.shape} != ({dim},)")
        self.in_dim = self.out_dim = dim
        self.running_mean = (
            np.zeros(dim) if running_mean is None
            else check_finite(as_array(running_mean, ndim=1), "running_mean").copy()
        )
        self.running_var = (
            np.ones(dim) if running_var is None
            else check_finite(as_array(running_var, ndim=1), "running_var").copy()
        )
        if self.running_mean.shape != (dim,) or self.running_var.shape != (dim,):
            raise ShapeError("running statistics must match feature dim")
        if np.any(self.running_var < 0.0):
            raise ValueError("running_var must be nonnegative")
        if not (np.isfinite(eps) and eps > 0.0):
            raise ValueError(f"eps must be positive, got {eps}")
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.eps = float(eps)
        self.momentum = float(momentum)

    @classmethod
    def identity(cls, dim: int):
        return cls(np.ones(dim), np.zeros(dim))

    def _batch_stats(self, xs: Array):
        if xs.shape[0] < 2:
            raise ShapeError(
                f"batch statistics need >= 2 samples, got {xs.shape[0]}"
            )
        return xs.mean(axis=0), xs.var(axis=0)

    def _stats(self, xs: Array, training: bool):
        if training:
            return self._batch_stats(xs)
        return self.running_mean, self.running_var

    def _apply(self, params: dict, xs: Array, training: bool) -> Array:
        mean, var = self._stats(xs, training)
        xhat = (xs - mean) / np.sqrt(var + self.eps)
        return params["gamma"] * xhat + params["beta"]

    def params(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def set_params(self, params: dict):
        gamma = check_finite(as_array(params["gamma"], ndim=1), "gamma")
        beta = check_finite(as_array(params["beta"], ndim=1), "beta")
        if gamma.shape != (self.in_dim,) or beta.shape != (self.in_dim,):
            raise ShapeError("gamma/beta shape changed")
        self.gamma, self.beta = gamma, beta

    def forward(self, xs, training=False):
        return self._apply(self.params(), self._check_states(xs), training)

    def update_running(self, xs):
        """Fold the batch statistics of xs into the running statistics."""
        mean, var = self._batch_stats(self._check_states(xs))
        m = self.momentum
        self.running_mean = m * self.running_mean + (1.0 - m) * mean
        self.running_var = m * self.running_var + (1.0 - m) * var

    def costate_pullback(self, xs, ps_next, training=False):
        """Transpose Jacobian of the whole-batch map applied to the co-states.

        In training mode every input sample influences every output through
        the shared batch mean and variance, so the pullback couples rows:

            dxhat_s = gamma . p_s
            dvar    = sum_s dxhat_s (x_s - mu) * (-1/2) (var + eps)^(-3/2)
            dmu     = -(var + eps)^(-1/2) sum_s dxhat_s
            p'_s    = dxhat_s / sqrt(var + eps) + 2 dvar (x_s - mu) / m + dmu / m

        Inference mode is a fixed diagonal map.
        """
        xs = self._check_states(xs)
        ps_next = self._check_costates(ps_next, xs.shape[0])
        if not training:
            return ps_next * (self.gamma / np.sqrt(self.running_var + self.eps))
        mean, var = self._batch_stats(xs)
        m = xs.shape[0]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        centered = xs - mean
        dxhat = ps_next * self.gamma
        dvar = np.sum(dxhat * centered, axis=0) * (-0.5) * inv_std**3
        dmean = -inv_std * np.sum(dxhat, axis=0)
        return dxhat * inv_std + centered * (2.0 * dvar / m) + dmean / m

    def hamiltonian_sum(self, xs, ps_next, theta=None, training=False):
        xs = self._check_states(xs)
        ps_next = self._check_costates(ps_next, xs.shape[0])
        params = self.params() if theta is None else theta
        return float(np.sum(ps_next * self._apply(params, xs, training)))

    def grad_theta_hamiltonian(self, xs, ps_next, training=False):
        xs = self._check_states(xs)
        ps_next = self._check_costates(ps_next, xs.shape[0])
        mean, var = self._stats(xs, training)
        xhat = (xs - mean) / np.sqrt(var + self.eps)
        return {
            "gamma": np.sum(ps_next * xhat, axis=0),
            "beta": np.sum(ps_next, axis=0),
        }

    def forward_with(self, theta, xs, training=False):
        return self._apply(theta, self._check_states(xs), training)


class Network:
    """An ordered list of layers with consistent dimensions."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer output dim {a.out_dim} feeds layer expecting {b.in_dim}"
                )
        self.layers = layers

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list:
        """State dimensions d_0 .. d_T along the chain."""
        return [self.layers[0].in_dim] + [lay.out_dim for lay in self.layers]

    def trainable_layers(self):
        """(index, layer) pairs for layers with parameters, in forward order."""
        return [(t, lay) for t, lay in enumerate(self.layers) if lay.trainable]

    def has_discrete(self) -> bool:
        return any(lay.discrete for lay in self.layers)

    def clone(self):
        return copy.deepcopy(self)

    def update_running_stats(self, states):
        """Refresh batch-norm running statistics from a forward trajectory."""
        for t, lay in enumerate(self.layers):
            if isinstance(lay, BatchNorm):
                lay.update_running(states[t])
