"""Numerical checks of the optimality conditions and the error estimate.

Everything here works on a concrete batch: the co-state trajectory under the
current parameters theta is computed once, and candidate parameters phi are
scored against it. The central inequality being exercised is

    J(phi) - J(theta) <= -(Hamiltonian gain of phi) + C * penalty_total

where the penalty terms measure how far phi's layer maps and their state
Jacobians drift from theta's along theta's own trajectory. The constant C
is not knowable a priori; fit_error_constant/check_error_constant implement
the fit-then-verify protocol.

All trajectories in this module run in training mode, matching the
Hamiltonians the optimizer maximizes.
"""

from dataclasses import dataclass

import numpy as np

from .layers import (
    BatchNorm,
    BinaryDense,
    FloatDense,
    Network,
    TernaryDense,
    coefficient_matrix,
)
from .linalg import Array, ShapeError, as_array, frobenius_norm_sq
from .msa import gradient_msa_step
from .propagation import TerminalLoss, backward_pass, forward_pass, objective


@dataclass
class ErrorEstimateReport:
    """The pieces of the error estimate for one (theta, phi) pair."""

    delta_j: float
    hamiltonian_gain: float
    penalty_f: float
    penalty_grad_f: float
    penalty_grad_l: float

    @property
    def penalty_total(self) -> float:
        return self.penalty_f + self.penalty_grad_f + self.penalty_grad_l

    def residual(self, c: float) -> float:
        """Positive means the estimate with this C fails for this pair."""
        return self.delta_j + self.hamiltonian_gain - c * self.penalty_total

    def bound_holds(self, c: float, slack: float = 1e-12) -> bool:
        return self.residual(c) <= slack

    def to_dict(self) -> dict:
        return {
            "delta_j": self.delta_j,
            "hamiltonian_gain": self.hamiltonian_gain,
            "penalty_f": self.penalty_f,
            "penalty_grad_f": self.penalty_grad_f,
            "penalty_grad_l": self.penalty_grad_l,
        }


def _candidate_layer(lay, phi_t):
    """Rebuild a trainable layer around candidate parameters, validating them."""
    if isinstance(lay, BinaryDense):
        return BinaryDense(phi_t)
    if isinstance(lay, TernaryDense):
        return TernaryDense(phi_t, lay.lam)
    clone = lay.__class__.__new__(lay.__class__)
    clone.__dict__.update(lay.__dict__)
    clone.set_params(phi_t)
    return clone


def apply_parameters(net: Network, phi: list) -> Network:
    """A clone of net with its trainable layers' parameters replaced by phi.

    phi is aligned with net.trainable_layers(): an array for discrete
    layers, a parameter dict for smooth ones.
    """
    trainable = net.trainable_layers()
    if len(phi) != len(trainable):
        raise ShapeError(
            f"phi has {len(phi)} entries for {len(trainable)} trainable layers"
        )
    out = net.clone()
    for (t, _), phi_t in zip(trainable, phi):
        out.layers[t] = _candidate_layer(out.layers[t], phi_t)
    return out


def current_parameters(net: Network) -> list:
    """Parameter snapshot in the phi layout, with copies."""
    phi = []
    for _, lay in net.trainable_layers():
        if lay.discrete:
            phi.append(lay.theta.copy())
        else:
            phi.append({k: v.copy() for k, v in lay.params().items()})
    return phi


def _grad_f_penalty(lay, phi_t, xs) -> float:
    """(1/S) sum_s ||grad_x f(x_s; phi) - grad_x f(x_s; theta)||_F^2.

    Dense maps have a constant Jacobian, the weight matrix itself. For batch
    norm only the per-feature scale gamma / sqrt(var + eps) enters.
    """
    if isinstance(lay, (BinaryDense, TernaryDense)):
        return frobenius_norm_sq(as_array(phi_t) - lay.theta)
    if isinstance(lay, FloatDense):
        return frobenius_norm_sq(as_array(phi_t["weight"]) - lay.weight)
    if isinstance(lay, BatchNorm):
        _, var = lay._batch_stats(xs)
        dgamma = as_array(phi_t["gamma"]) - lay.gamma
        return frobenius_norm_sq(dgamma / np.sqrt(var + lay.eps))
    raise ShapeError(f"no Jacobian penalty rule for {type(lay).__name__}")


def theorem2_terms(net: Network, phi: list, x0: Array,
                   loss: TerminalLoss) -> ErrorEstimateReport:
    """Evaluate every term of the error estimate for candidate phi.

    The state/co-state trajectory is computed once under theta; phi only
    ever enters through layer maps evaluated on that frozen trajectory,
    plus one full forward pass for J(phi). The running-cost penalty is
    identically zero because every running cost is state independent.
    """
    traj = backward_pass(net, forward_pass(net, x0, training=True), loss)
    j_theta = objective(net, x0, loss, training=True)
    net_phi = apply_parameters(net, phi)
    j_phi = objective(net_phi, x0, loss, training=True)

    S = traj.batch_size
    gain = 0.0
    penalty_f = 0.0
    penalty_grad_f = 0.0
    for (t, lay), phi_t in zip(net.trainable_layers(), phi):
        xs, ps_next = traj.states[t], traj.costates[t + 1]
        gain += lay.hamiltonian_sum(xs, ps_next, theta=phi_t, training=True) \
            - lay.hamiltonian_sum(xs, ps_next, training=True)
        diff = lay.forward_with(phi_t, xs, training=True) - traj.states[t + 1]
        penalty_f += frobenius_norm_sq(diff) / S
        penalty_grad_f += _grad_f_penalty(lay, phi_t, xs)
    return ErrorEstimateReport(
        delta_j=j_phi - j_theta,
        hamiltonian_gain=gain,
        penalty_f=penalty_f,
        penalty_grad_f=penalty_grad_f,
        penalty_grad_l=0.0,
    )


def fit_error_constant(reports) -> float:
    """Smallest C making the estimate hold on every report, 0 if none binds."""
    c_star = 0.0
    for rep in reports:
        if rep.penalty_total > 0.0:
            c_star = max(
                c_star, (rep.delta_j + rep.hamiltonian_gain) / rep.penalty_total
            )
    return c_star


def check_error_constant(reports, c: float) -> bool:
    """Does the estimate with this C hold on every report?"""
    return all(rep.bound_holds(c) for rep in reports)


@dataclass
class LayerResidual:
    """Optimality measure for one trainable layer.

    Discrete layers report the Hamiltonian gap (best attainable summed
    Hamiltonian minus the current one, always >= 0, zero iff the layer is a
    maximizer). Smooth layers report the stationarity residual
    ||d(sum_s H)/dtheta||_2 instead, since their maximum is interior.
    """

    index: int
    kind: str
    hamiltonian_gap: float | None
    stationarity_residual: float | None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind,
            "hamiltonian_gap": self.hamiltonian_gap,
            "stationarity_residual": self.stationarity_residual,
        }


@dataclass
class PmpResidualReport:
    """How far a trained network sits from the optimality conditions."""

    layers: list
    state_residual: float
    costate_residual: float

    @property
    def max_hamiltonian_gap(self) -> float:
        gaps = [e.hamiltonian_gap for e in self.layers if e.hamiltonian_gap
                is not None]
        return max(gaps) if gaps else 0.0

    def to_dict(self) -> dict:
        return {
            "layers": [e.to_dict() for e in self.layers],
            "state_residual": self.state_residual,
            "costate_residual": self.costate_residual,
        }


_KIND_NAMES = {
    BinaryDense: "binary_dense",
    TernaryDense: "ternary_dense",
    FloatDense: "float_dense",
    BatchNorm: "batch_norm",
}


def pmp_residual(net: Network, x0: Array, loss: TerminalLoss) -> PmpResidualReport:
    """Evaluate the three optimality conditions on one batch.

    State and co-state residuals recompute both recursions and report the
    largest deviation (zero up to roundoff by construction; nonzero values
    flag a broken layer implementation). Layer entries quantify how far
    each parameter is from maximizing its Hamiltonian.
    """
    traj = backward_pass(net, forward_pass(net, x0, training=True), loss)
    S = traj.batch_size

    state_res = 0.0
    for t, lay in enumerate(net.layers):
        redo = lay.forward(traj.states[t], training=True)
        state_res = max(state_res, float(np.max(np.abs(redo - traj.states[t + 1]))))

    costate_res = float(np.max(np.abs(
        traj.costates[-1] + loss.grad(traj.states[-1]) / S
    )))
    for t, lay in enumerate(net.layers):
        redo = lay.costate_pullback(traj.states[t], traj.costates[t + 1],
                                    training=True)
        costate_res = max(costate_res, float(np.max(np.abs(redo - traj.costates[t]))))

    entries = []
    for t, lay in net.trainable_layers():
        xs, ps_next = traj.states[t], traj.costates[t + 1]
        kind = _KIND_NAMES.get(type(lay), type(lay).__name__)
        if isinstance(lay, BinaryDense):
            m = coefficient_matrix(xs, ps_next)
            gap = float(np.sum(np.abs(m)) - np.sum(m * lay.theta))
            entries.append(LayerResidual(t, kind, gap, None))
        elif isinstance(lay, TernaryDense):
            m = coefficient_matrix(xs, ps_next)
            best = float(np.sum(np.maximum(0.0, np.abs(m) - lay.lam)))
            cur = float(np.sum(m * lay.theta) - lay.running_cost())
            entries.append(LayerResidual(t, kind, best - cur, None))
        else:
            grads = lay.grad_theta_hamiltonian(xs, ps_next, training=True)
            sq = sum(frobenius_norm_sq(g) for g in grads.values())
            entries.append(LayerResidual(t, kind, None, float(np.sqrt(sq))))
    return PmpResidualReport(
        layers=entries, state_residual=state_res, costate_residual=costate_res
    )


def backprop_equivalence_check(net: Network, x0: Array, loss: TerminalLoss,
                               eta: float, h: float = 1e-5) -> float:
    """Compare one Hamiltonian ascent step against -eta * finite-difference
    gradient of J, parameter by parameter.

    Returns the largest relative deviation over parameter arrays (infinity
    norm, denominator floored at 1e-12). Only defined for all-smooth
    networks, like the gradient step itself. Parameters the objective is
    exactly indifferent to (a bias feeding straight into batch
    normalization) carry nothing but roundoff on both sides and can report
    a spurious deviation; leave them out of the network.
    """
    stepped = gradient_msa_step(net.clone(), x0, loss, eta)
    before = current_parameters(net)
    after = current_parameters(stepped)

    work = net.clone()
    worst = 0.0
    for slot, (_, lay) in enumerate(work.trainable_layers()):
        for name, arr in lay.params().items():
            delta_msa = after[slot][name] - before[slot][name]
            delta_fd = np.zeros_like(arr)
            flat = arr.reshape(-1)
            fd_flat = delta_fd.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                jp = objective(work, x0, loss, training=True)
                flat[i] = keep - h
                jm = objective(work, x0, loss, training=True)
                flat[i] = keep
                fd_flat[i] = -eta * (jp - jm) / (2.0 * h)
            denom = max(
                float(np.max(np.abs(delta_fd))),
                float(np.max(np.abs(delta_msa))),
                1e-12,
            )
            worst = max(
                worst, float(np.max(np.abs(delta_msa - delta_fd))) / denom
            )
    return worst


@dataclass
class GronwallReport:
    """Premise and conclusion of the discrete comparison bound."""

    premise_holds: bool
    bound: float
    bound_holds: bool

    @property
    def ok(self) -> bool:
        """The implication: a sequence satisfying the premise obeys the bound."""
        return (not self.premise_holds) or self.bound_holds


def gronwall_check(u, big_k: float, w) -> GronwallReport:
    """Check u_{t+1} <= K u_t + w_t implies
    u_t <= max(1, K^T) (u_0 + sum_s w_s) for all t.

    u has T+1 entries, w has T; everything must be nonnegative and finite.
    """
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if u.ndim != 1 or w.ndim != 1 or u.size != w.size + 1:
        raise ShapeError(
            f"need len(u) == len(w) + 1, got {u.shape} and {w.shape}"
        )
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(w))
            and np.isfinite(big_k)):
        raise ValueError("u, w, K must be finite")
    if np.any(u < 0.0) or np.any(w < 0.0) or big_k < 0.0:
        raise ValueError("u, w, K must be nonnegative")
    premise = bool(np.all(u[1:] <= big_k * u[:-1] + w))
    big_t = u.size - 1
    bound = float(max(1.0, big_k**big_t) * (u[0] + np.sum(w)))
    return GronwallReport(
        premise_holds=premise,
        bound=bound,
        bound_holds=bool(np.all(u <= bound)),
    )


def perturb_parameters(net: Network, rng: np.random.Generator,
                       flip_prob: float = 0.1, scale: float = 0.1) -> list:
    """Random admissible candidate phi near the current parameters.

    Discrete entries move to a different admissible value with probability
    flip_prob; smooth parameters get Gaussian noise scaled to the array's
    RMS (floored so zero arrays still move).
    """
    if not (0.0 <= flip_prob <= 1.0):
        raise ValueError(f"flip_prob must be in [0, 1], got {flip_prob}")
    phi = []
    for _, lay in net.trainable_layers():
        if isinstance(lay, BinaryDense):
            signs = np.where(
                rng.random(lay.theta.shape) < flip_prob, -1.0, 1.0
            )
            phi.append(lay.theta * signs)
        elif isinstance(lay, TernaryDense):
            move = rng.random(lay.theta.shape) < flip_prob
            pick = rng.integers(0, 2, size=lay.theta.shape)
            # the two admissible values other than the current one
            others = {
                -1.0: (0.0, 1.0), 0.0: (-1.0, 1.0), 1.0: (-1.0, 0.0),
            }
            new = lay.theta.copy()
            for cur, (a, b) in others.items():
                here = move & (lay.theta == cur)
                new[here] = np.where(pick[here] == 0, a, b)
            phi.append(new)
        else:
            params = {}
            for name, arr in lay.params().items():
                rms = float(np.sqrt(np.mean(arr * arr)))
                sigma = scale * max(rms, 1e-2)
                params[name] = arr + sigma * rng.standard_normal(arr.shape)
            phi.append(params)
    return phi
