"""Selective Gaussian regression on data whose noise grows with x1.

The model learns to abstain where the conditional entropy of Y exceeds the
abstention cost delta, and reports a 90% prediction interval elsewhere.
"""
import numpy as np

from ulmguards import TrainConfig, UlmHyper, gen_entropy_sim, train_ulm

ds = gen_entropy_sim(3000, seed=0)

# delta is the price of abstaining, in nats of predictive entropy
hyper = UlmHyper(alpha=0.1, delta=1.0, lam=1e-4)
cfg = TrainConfig(hyper=hyper, kind="gaussian", epochs=25, seed=0)
metrics = []
model = train_ulm(ds, cfg, metrics)
print("final objective %.3f, mean acceptance %.2f" % (metrics[-1]["objective"], metrics[-1]["mean_psi"]))

# walk along x1 with x2 fixed; sd is 0.3 + max(0, x1), so entropy crosses 1.0 near x1 = 0.94
x1 = np.linspace(-3, 3, 13)
X = np.column_stack([x1, np.zeros_like(x1)])
psi = model.accept_prob(X)
lo, hi = model.interval_bounds(X, 0.1)
true_h = ds.truth.entropy(X)
print("\n   x1  true H  accept  interval")
for x, h, p, a, b in zip(x1, true_h, psi, lo, hi):
    tag = "[%6.2f, %5.2f]" % (a, b) if p >= 0.5 else "abstain"
    print("%5.1f  %6.2f  %6.2f  %s" % (x, h, p, tag))

# hard decisions versus the oracle rule on a grid
g = np.linspace(-3, 3, 40)
G = np.array([(a, b) for a in g for b in g])
agree = np.mean((model.accept_prob(G) >= 0.5) == (ds.truth.entropy(G) < hyper.delta))
print("\nagreement with 1{H(x) < delta} on a 40x40 grid: %.3f" % agree)
