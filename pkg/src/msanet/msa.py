"""Successive-approximation training by layer-wise Hamiltonian maximization.

One training step is: run the batch forward, pull co-states back, then update
every layer from the same frozen trajectory. Discrete layers maximize their
summed Hamiltonian exactly over the admissible weight set, with two
stabilizers against the oscillation that plain maximization produces:

  * a moving average Mbar of the coefficient matrix replaces the raw
    per-batch M, and
  * a proximal penalty rho ||theta - theta_k||_F^2 discourages flips whose
    evidence |Mbar_ij| is weak; the flip threshold is set adaptively to a
    fraction of the largest entry currently disagreeing in sign with theta.

Float layers (batch norm scale/shift) follow the ascent direction of the
same Hamiltonian through Adam, which for them is ordinary training in
disguise: the parameter gradient of J is exactly minus the parameter
gradient of the summed Hamiltonian.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, minibatches
from .layers import (
    BinaryDense,
    DiscreteLayerError,
    Network,
    TernaryDense,
    coefficient_matrix,
)
from .linalg import Array, ShapeError, as_array, check_finite
from .propagation import (
    TerminalLoss,
    backward_pass,
    error_rate,
    forward_pass,
    regularizer_total,
)

OPTIMIZERS = ("binary_msa", "ternary_msa", "basic_msa", "gradient")


def _check_update_args(theta: Array, mbar: Array, rho: float) -> tuple:
    theta = as_array(theta, ndim=2)
    mbar = as_array(mbar, ndim=2)
    check_finite(mbar, "coefficient average")
    if theta.shape != mbar.shape:
        raise ShapeError(f"theta shape {theta.shape} != Mbar shape {mbar.shape}")
    if not (np.isfinite(rho) and rho >= 0.0):
        raise ValueError(f"rho must be finite and >= 0, got {rho}")
    return theta, mbar


def binary_update(theta: Array, mbar: Array, rho: float) -> Array:
    """Per-entry argmax of Mbar_ij t - rho (t - theta_ij)^2 over t in {-1, +1}.

    An entry flips to sgn(Mbar_ij) exactly when |Mbar_ij| >= 2 rho; entries
    with Mbar_ij = 0 keep their current value (no evidence either way).
    """
    theta, mbar = _check_update_args(theta, mbar, rho)
    if not np.all(np.abs(theta) == 1.0):
        raise ValueError("binary_update needs theta entries in {-1, +1}")
    flip = (np.abs(mbar) >= 2.0 * rho) & (mbar != 0.0)
    return np.where(flip, np.sign(mbar), theta)


def ternary_update(theta: Array, mbar: Array, rho: float, lam: float) -> Array:
    """Per-entry argmax of Mbar_ij t - lam t^2 - rho (t - theta_ij)^2 over
    t in {-1, 0, +1}.

    Working through the three candidate values gives the closed form

        +1  if Mbar_ij >= rho (1 - 2 theta_ij) + lam
        -1  if Mbar_ij <= -rho (1 + 2 theta_ij) - lam
         0  otherwise

    checked in that order, so exact threshold ties go to the signed value.
    """
    theta, mbar = _check_update_args(theta, mbar, rho)
    if not np.all(np.isin(theta, (-1.0, 0.0, 1.0))):
        raise ValueError("ternary_update needs theta entries in {-1, 0, +1}")
    if not (np.isfinite(lam) and lam >= 0.0):
        raise ValueError(f"lam must be finite and >= 0, got {lam}")
    up = mbar >= rho * (1.0 - 2.0 * theta) + lam
    down = mbar <= -rho * (1.0 + 2.0 * theta) - lam
    return np.where(up, 1.0, np.where(down, -1.0, 0.0))


def update_moving_average(mbar: Array, m: Array, alpha: float) -> Array:
    """Mbar <- alpha Mbar + (1 - alpha) M. alpha = 0 keeps the raw M."""
    mbar = as_array(mbar, ndim=2)
    m = as_array(m, ndim=2)
    if mbar.shape != m.shape:
        raise ShapeError(f"Mbar shape {mbar.shape} != M shape {m.shape}")
    if not (np.isfinite(alpha) and 0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return check_finite(alpha * mbar + (1.0 - alpha) * m, "moving average")


def rho_from_heuristic(mbar: Array, theta: Array, fraction: float) -> float:
    """Adaptive flip threshold: fraction * max |Mbar_ij| over entries whose
    sign disagrees with theta_ij.

    The returned value is the threshold compared directly against |Mbar|
    (i.e. twice the proximal coefficient of binary_update); callers pass
    half of it as rho. No disagreeing entries means nothing is pushing any
    weight to change, and the threshold is 0.
    """
    theta, mbar = _check_update_args(theta, mbar, 0.0)
    if not (np.isfinite(fraction) and fraction >= 0.0):
        raise ValueError(f"fraction must be finite and >= 0, got {fraction}")
    disagree = np.sign(mbar) != np.sign(theta)
    if not np.any(disagree):
        return 0.0
    return float(fraction * np.max(np.abs(mbar[disagree])))


def _exact_discrete_argmax(lay, xs: Array, ps_next: Array) -> Array:
    m = coefficient_matrix(xs, ps_next)
    if isinstance(lay, BinaryDense):
        return binary_update(lay.theta, m, 0.0)
    return ternary_update(lay.theta, m, 0.0, lay.lam)


def basic_msa_step(net: Network, x0: Array, loss: TerminalLoss,
                   maximizers: dict | None = None) -> Network:
    """One unstabilized sweep: exact per-layer Hamiltonian argmax.

    Every layer's update is computed from the trajectory under the current
    parameters before any assignment, so the sweep order does not matter.
    Discrete layers get the closed-form argmax; any other trainable layer
    must be covered by an entry in maximizers (a map from layer index to a
    callable (layer, xs, ps_next) -> new parameter value), since the
    Hamiltonian of an unconstrained affine layer has no maximum.
    """
    maximizers = maximizers or {}
    traj = backward_pass(net, forward_pass(net, x0, training=True), loss)
    updates = []
    for t, lay in net.trainable_layers():
        xs, ps_next = traj.states[t], traj.costates[t + 1]
        if t in maximizers:
            updates.append((lay, maximizers[t](lay, xs, ps_next)))
        elif lay.discrete:
            updates.append((lay, _exact_discrete_argmax(lay, xs, ps_next)))
        else:
            raise DiscreteLayerError(
                f"layer {t} ({type(lay).__name__}) has an unbounded Hamiltonian; "
                "provide a maximizer for it"
            )
    for lay, new in updates:
        if lay.discrete:
            lay.theta = as_array(new, ndim=2)
        else:
            lay.set_params(new)
    return net


def gradient_msa_step(net: Network, x0: Array, loss: TerminalLoss,
                      eta: float) -> Network:
    """Replace the argmax by one ascent step theta += eta d(sum_s H)/dtheta.

    Defined only for networks whose trainable layers are all smooth; this is
    gradient descent on J with step eta, reached through the co-states.
    """
    if not (np.isfinite(eta) and eta >= 0.0):
        raise ValueError(f"eta must be finite and >= 0, got {eta}")
    for t, lay in net.trainable_layers():
        if lay.discrete:
            raise DiscreteLayerError(
                f"gradient step cannot target discrete layer {t}"
            )
    traj = backward_pass(net, forward_pass(net, x0, training=True), loss)
    updates = []
    for t, lay in net.trainable_layers():
        grads = lay.grad_theta_hamiltonian(
            traj.states[t], traj.costates[t + 1], training=True
        )
        params = lay.params()
        updates.append(
            (lay, {k: params[k] + eta * grads[k] for k in grads})
        )
    for lay, params in updates:
        lay.set_params(params)
    return net


class Adam:
    """Adam ascent on the summed Hamiltonian, one slot per parameter array."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.slots: dict = {}

    def direction(self, key, grad: Array) -> Array:
        """Bias-corrected step to add to the parameter."""
        m, v, k = self.slots.get(key, (0.0, 0.0, 0))
        k += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.slots[key] = (m, v, k)
        mhat = m / (1.0 - self.beta1**k)
        vhat = v / (1.0 - self.beta2**k)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    """Hyperparameters of the training loop.

    c is the disagreement fraction of the flip-threshold heuristic; left as
    None it resolves to 0.5 for binary_msa and 0.25 for ternary_msa. The
    moving-average weight follows alpha_epoch = 1 - (1 - alpha0) *
    alpha_decay^epoch, so alpha_decay = 1 freezes it at alpha0 and alpha0 =
    0 with alpha_decay = 1 disables averaging entirely. rho_refresh picks
    how often the threshold is recomputed from Mbar: every batch or once
    per epoch.
    """

    optimizer: str = "binary_msa"
    epochs: int = 1
    batch_size: int = 100
    seed: int = 0
    c: float | None = None
    alpha0: float = 0.999
    alpha_decay: float = 0.5
    adam_lr: float = 1e-3
    eta: float = 0.05
    rho_refresh: str = "batch"

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(
                f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}"
            )
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.c is not None and not (np.isfinite(self.c) and self.c >= 0.0):
            raise ValueError(f"c must be finite and >= 0, got {self.c}")
        if not (0.0 <= self.alpha0 < 1.0):
            raise ValueError(f"alpha0 must be in [0, 1), got {self.alpha0}")
        if not (0.0 < self.alpha_decay <= 1.0):
            raise ValueError(
                f"alpha_decay must be in (0, 1], got {self.alpha_decay}"
            )
        if self.rho_refresh not in ("batch", "epoch"):
            raise ValueError(
                f"rho_refresh must be 'batch' or 'epoch', got {self.rho_refresh!r}"
            )
        for name in ("adam_lr", "eta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        return self

    def resolved_c(self) -> float:
        if self.c is not None:
            return self.c
        return 0.25 if self.optimizer == "ternary_msa" else 0.5


@dataclass
class MsaState:
    """Mutable training state carried across steps."""

    mbar: dict = field(default_factory=dict)
    adam: Adam = field(default_factory=Adam)
    epoch_thresholds: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0


@dataclass
class MetricsRecord:
    """One epoch's evaluation snapshot."""

    epoch: int
    step: int
    j_train: float
    train_error: float
    test_error: float | None
    nonzero_fraction: float | None
    sparsity_per_layer: list
    wall_ms: float


def _check_net_for_optimizer(net: Network, optimizer: str):
    kinds = {type(lay) for _, lay in net.trainable_layers()}
    if optimizer == "binary_msa" and TernaryDense in kinds:
        raise ValueError("binary_msa cannot train ternary layers")
    if optimizer == "ternary_msa" and BinaryDense in kinds:
        raise ValueError("ternary_msa cannot train binary layers")
    if optimizer == "gradient":
        for _, lay in net.trainable_layers():
            if lay.discrete:
                raise DiscreteLayerError(
                    "gradient optimizer needs an all-smooth network"
                )


def sparsity_per_layer(net: Network) -> list:
    """Fraction of nonzero entries for each discrete layer, forward order."""
    return [
        float(np.mean(lay.theta != 0.0))
        for _, lay in net.trainable_layers()
        if lay.discrete
    ]


def _evaluate(net, ds, loss_kind) -> tuple:
    loss = TerminalLoss(loss_kind, ds.targets)
    traj = forward_pass(net, ds.inputs, training=False)
    j = float(np.mean(loss.value_per_sample(traj.states[-1])))
    return j + regularizer_total(net), error_rate(traj.states[-1], loss)


def _train_step(net, state, xb, loss_b, config, dataset_size):
    """One minibatch update; returns nothing, mutates net and state."""
    traj = backward_pass(net, forward_pass(net, xb, training=True), loss_b)
    alpha = 1.0 - (1.0 - config.alpha0) * config.alpha_decay**state.epoch
    c = config.resolved_c()
    # Each batch contributes its share of the dataset-averaged coefficient
    # matrix, so Mbar and the weight penalty lam stay on the objective scale
    # no matter the batch size.  Full-batch runs have scale 1.
    m_scale = xb.shape[0] / dataset_size
    updates = []
    for t, lay in net.trainable_layers():
        xs, ps_next = traj.states[t], traj.costates[t + 1]
        if lay.discrete and config.optimizer in ("binary_msa", "ternary_msa"):
            m = m_scale * coefficient_matrix(xs, ps_next)
            if t not in state.mbar:
                state.mbar[t] = np.zeros_like(m)
            state.mbar[t] = update_moving_average(state.mbar[t], m, alpha)
            if config.rho_refresh == "epoch" and t in state.epoch_thresholds:
                threshold = state.epoch_thresholds[t]
            else:
                threshold = rho_from_heuristic(state.mbar[t], lay.theta, c)
                state.epoch_thresholds[t] = threshold
            # heuristic returns the |Mbar| threshold, i.e. 2 rho
            rho = 0.5 * threshold
            if isinstance(lay, BinaryDense):
                updates.append((lay, binary_update(lay.theta, state.mbar[t], rho)))
            else:
                updates.append(
                    (lay, ternary_update(lay.theta, state.mbar[t], rho, lay.lam))
                )
        elif lay.discrete:
            updates.append((lay, _exact_discrete_argmax(lay, xs, ps_next)))
        elif config.optimizer == "gradient":
            grads = lay.grad_theta_hamiltonian(xs, ps_next, training=True)
            params = lay.params()
            updates.append(
                (lay, {k: params[k] + config.eta * grads[k] for k in grads})
            )
        else:
            grads = lay.grad_theta_hamiltonian(xs, ps_next, training=True)
            params = lay.params()
            updates.append(
                (lay, {
                    k: params[k] + state.adam.direction((t, k), grads[k])
                    for k in grads
                })
            )
    for lay, new in updates:
        if lay.discrete:
            lay.theta = new
        else:
            lay.set_params(new)
    net.update_running_stats(traj.states)
    state.step += 1


def train(net: Network, dataset: Dataset, loss: str, config: TrainConfig,
          test_dataset: Dataset | None = None, callback=None) -> tuple:
    """Run the configured optimizer over the dataset.

    loss is a terminal-loss kind name; each minibatch binds its own targets.
    Returns (net, records) where records holds one MetricsRecord per epoch,
    evaluated in inference mode on the full train (and optional test) split.
    The whole run is a deterministic function of (net, dataset, config).
    """
    config.validate()
    _check_net_for_optimizer(net, config.optimizer)
    state = MsaState(adam=Adam(lr=config.adam_lr))
    rng = np.random.default_rng(config.seed)
    records = []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        state.epoch = epoch
        state.epoch_thresholds = {}
        for xb, yb in minibatches(dataset, config.batch_size, rng):
            _train_step(net, state, xb, TerminalLoss(loss, yb), config,
                        len(dataset))
        j_train, train_err = _evaluate(net, dataset, loss)
        test_err = None
        if test_dataset is not None:
            _, test_err = _evaluate(net, test_dataset, loss)
        sparsity = sparsity_per_layer(net)
        record = MetricsRecord(
            epoch=epoch,
            step=state.step,
            j_train=j_train,
            train_error=train_err,
            test_error=test_err,
            nonzero_fraction=float(np.mean(
                np.concatenate([
                    lay.theta.ravel()
                    for _, lay in net.trainable_layers() if lay.discrete
                ]) != 0.0
            )) if sparsity else None,
            sparsity_per_layer=sparsity,
            wall_ms=(time.perf_counter() - start) * 1e3,
        )
        records.append(record)
        if callback is not None:
            callback(record, net)
    return net, records
