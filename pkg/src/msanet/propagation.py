"""Forward state propagation, terminal losses, and backward co-state sweeps.

The sample-mean objective for a batch of S samples is

    J = (1/S) sum_s Phi_s(x_{s,T}) + sum_t running_cost_t

and the co-states are seeded at the top with p_{s,T} = -(1/S) dPhi_s/dx and
pulled back one layer at a time. With that scaling, doubling S by repeating
the same samples halves every co-state exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .layers import Network
from .linalg import Array, ShapeError, as_array, check_finite

LOSS_KINDS = ("mean_square", "squared_hinge", "softmax_cross_entropy")


def _logsumexp(x: Array) -> Array:
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=1, keepdims=True)))[:, 0]


def _softmax(x: Array) -> Array:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TerminalLoss:
    """Per-sample terminal cost Phi_s, bound to one batch's targets.

    mean_square takes target vectors (S, d) and is (1/2)||x - y||^2.
    squared_hinge and softmax_cross_entropy take integer labels (S,);
    squared_hinge scores one-vs-rest targets in {-1, +1} as
    sum_j max(0, 1 - x_j y_j)^2.
    """

    def __init__(self, kind: str, targets):
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {kind!r}, expected one of {LOSS_KINDS}")
        self.kind = kind
        if kind == "mean_square":
            self.targets = as_array(targets, ndim=2)
            check_finite(self.targets, "targets")
        else:
            targets = np.asarray(targets)
            if targets.ndim != 1:
                raise ShapeError(f"labels must be 1-d, got shape {targets.shape}")
            if not np.issubdtype(targets.dtype, np.integer):
                raise ValueError("labels must be integers")
            if targets.size and targets.min() < 0:
                raise ValueError("labels must be nonnegative")
            self.targets = targets.astype(np.int64)

    @property
    def batch_size(self) -> int:
        return self.targets.shape[0]

    def _check_outputs(self, x: Array) -> Array:
        x = as_array(x, ndim=2)
        if x.shape[0] != self.batch_size:
            raise ShapeError(
                f"outputs batch {x.shape[0]} != targets batch {self.batch_size}"
            )
        if self.kind == "mean_square" and x.shape != self.targets.shape:
            raise ShapeError(
                f"outputs shape {x.shape} != targets shape {self.targets.shape}"
            )
        if self.kind != "mean_square" and self.targets.size and \
                self.targets.max() >= x.shape[1]:
            raise ValueError(
                f"label {self.targets.max()} out of range for {x.shape[1]} outputs"
            )
        return check_finite(x, "network outputs")

    def _signed_targets(self, dim: int) -> Array:
        y = -np.ones((self.batch_size, dim))
        y[np.arange(self.batch_size), self.targets] = 1.0
        return y

    def value_per_sample(self, x: Array) -> Array:
        x = self._check_outputs(x)
        if self.kind == "mean_square":
            d = x - self.targets
            return 0.5 * np.sum(d * d, axis=1)
        if self.kind == "squared_hinge":
            margin = np.maximum(0.0, 1.0 - x * self._signed_targets(x.shape[1]))
            return np.sum(margin * margin, axis=1)
        return _logsumexp(x) - x[np.arange(self.batch_size), self.targets]

    def grad(self, x: Array) -> Array:
        """dPhi_s/dx, one row per sample."""
        x = self._check_outputs(x)
        if self.kind == "mean_square":
            return x - self.targets
        if self.kind == "squared_hinge":
            y = self._signed_targets(x.shape[1])
            return -2.0 * np.maximum(0.0, 1.0 - x * y) * y
        g = _softmax(x)
        g[np.arange(self.batch_size), self.targets] -= 1.0
        return g


@dataclass
class Trajectory:
    """States x_0..x_T (and, after a backward pass, co-states p_0..p_T)."""

    states: list
    training: bool = False
    costates: list | None = field(default=None)

    @property
    def batch_size(self) -> int:
        return self.states[0].shape[0]


def forward_pass(net: Network, x0: Array, training: bool = False) -> Trajectory:
    """Run a batch through every layer, keeping all intermediate states.

    Pure: batch-norm running statistics are read (inference) but never
    written here.
    """
    x = as_array(x0, ndim=2)
    if x.shape[1] != net.layers[0].in_dim:
        raise ShapeError(
            f"input dim {x.shape[1]} != network input dim {net.layers[0].in_dim}"
        )
    check_finite(x, "network input")
    states = [x]
    for lay in net.layers:
        x = lay.forward(x, training=training)
        states.append(x)
    return Trajectory(states=states, training=training)


def backward_pass(net: Network, traj: Trajectory, loss: TerminalLoss) -> Trajectory:
    """Seed p_T from the terminal loss and pull co-states back layer by layer.

    Uses the same mode (training or inference) the trajectory was produced
    with, which matters for batch-norm's batch-coupled Jacobian.
    """
    if len(traj.states) != net.depth + 1:
        raise ShapeError(
            f"trajectory has {len(traj.states)} states for depth {net.depth}"
        )
    S = traj.batch_size
    p = -loss.grad(traj.states[-1]) / S
    costates = [p]
    for t in range(net.depth - 1, -1, -1):
        p = net.layers[t].costate_pullback(traj.states[t], p, training=traj.training)
        costates.append(p)
    traj.costates = costates[::-1]
    return traj


def regularizer_total(net: Network) -> float:
    """Sum of state-independent running costs over the layers."""
    total = 0.0
    for lay in net.layers:
        cost = getattr(lay, "running_cost", None)
        if cost is not None:
            total += cost()
    return total


def objective(net: Network, x0: Array, loss: TerminalLoss,
              training: bool = False) -> float:
    """J = mean terminal loss + running costs, for this batch."""
    traj = forward_pass(net, x0, training=training)
    return float(np.mean(loss.value_per_sample(traj.states[-1]))) \
        + regularizer_total(net)


def predictions(x: Array) -> Array:
    """Class predictions by argmax; ties go to the first index."""
    return np.argmax(as_array(x, ndim=2), axis=1)


def error_rate(x: Array, loss: TerminalLoss) -> float:
    """Fraction of samples whose argmax misses the target.

    For label losses this is the usual classification error; for vector
    targets the target argmax stands in, so a perfect fit scores zero.
    """
    pred = predictions(x)
    if loss.kind == "mean_square":
        want = np.argmax(loss.targets, axis=1)
    else:
        want = loss.targets
    return float(np.mean(pred != want))
