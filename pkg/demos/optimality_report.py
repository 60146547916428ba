"""Check the optimality conditions and the error estimate on a small net.

Training by per-layer Hamiltonian maximization comes with conditions one
can test after the fact, no gradients involved:

  * the state recursion holds along the stored trajectory,
  * the co-state recursion holds backward from the loss gradient,
  * each layer's weights maximize its summed Hamiltonian, so the gap
    between the best attainable value and the current one is zero.

This script trains a binary layer on a planted regression problem to zero
loss and shows all three residuals vanish, then contrasts with an
untrained net whose Hamiltonian gap is strictly positive.

The second half probes the error estimate behind the thresholded update:
for any admissible candidate phi, the increase in objective is bounded by
the Hamiltonian gain plus C times quadratic penalty terms measuring how
far phi drifts from the current trajectory. The constant C is fit on one
set of random candidates and the bound is then checked, with margin, on a
fresh set.
"""

import numpy as np

import msanet as mn

D0, D1, SAMPLES = 6, 3, 500
DRAWS = 200
SEED = 11

prob = mn.make_binary_regression(D0, D1, SAMPLES, seed=SEED)
data = prob.dataset()
loss = mn.TerminalLoss("mean_square", data.targets)

cfg = mn.TrainConfig(optimizer="binary_msa", epochs=10, batch_size=SAMPLES,
                     seed=0, c=0.5, alpha0=0.0, alpha_decay=1.0)
net, records = mn.train(
    mn.Network([mn.BinaryDense.random(D0, D1, np.random.default_rng(1))]),
    data, "mean_square", cfg)
print(f"trained binary layer on planted regression: "
      f"J = {records[-1].j_train}\n")


def show_residuals(label, network):
    rep = mn.pmp_residual(network, data.inputs, loss)
    print(f"{label}:")
    for entry in rep.layers:
        print(f"  layer {entry.index} ({entry.kind}): "
              f"Hamiltonian gap {entry.hamiltonian_gap}")
    print(f"  state residual {rep.state_residual}, "
          f"co-state residual {rep.costate_residual}")


show_residuals("at the trained weights", net)
show_residuals("at a random initialization",
               mn.Network([mn.BinaryDense.random(D0, D1,
                                                 np.random.default_rng(7))]))

print("\nerror estimate over random admissible candidates:")
rng = np.random.default_rng(2)
fit_reports = [
    mn.theorem2_terms(net, mn.perturb_parameters(net, rng, flip_prob=0.2),
                      data.inputs, loss)
    for _ in range(DRAWS)
]
top_gain = max(rep.hamiltonian_gain for rep in fit_reports)
print(f"  {DRAWS} draws: every Hamiltonian gain <= 0 "
      f"(largest {top_gain:.4f}), as expected at an argmax")

c_star = mn.fit_error_constant(fit_reports)
print(f"  smallest C making the bound hold on all draws: {c_star:.4f}")

fresh = [
    mn.theorem2_terms(net, mn.perturb_parameters(net, rng, flip_prob=0.2),
                      data.inputs, loss)
    for _ in range(DRAWS)
]
print(f"  bound holds at 2C on {DRAWS} fresh draws: "
      f"{mn.check_error_constant(fresh, 2.0 * c_star)}")

same = mn.theorem2_terms(net, [lay.theta.copy()
                               for _, lay in net.trainable_layers()],
                         data.inputs, loss)
print(f"  phi = theta: delta_J = {same.delta_j}, gain = "
      f"{same.hamiltonian_gain}, penalties = {same.penalty_total}")
