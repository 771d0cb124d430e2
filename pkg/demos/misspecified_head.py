"""A linear prediction head with a separate decision network.

The true mean is linear except for a bump on [-1, 1]^2 that a linear model
cannot fit. The decision network learns to abstain there.
"""
import numpy as np

from ulmguards import TrainConfig, UlmHyper, gen_misspec_sim, train_ulm

ds = gen_misspec_sim(4000, seed=0)
cfg = TrainConfig(
    hyper=UlmHyper(alpha=0.1, delta=2.0, lam=1e-3),
    hidden=(),                      # linear head
    decision_mode="separate",
    decision_hidden=(15, 15),
    epochs=30,
    warmup_epochs=5,                # fit the head before the decision net can saturate
    seed=0,
)
model = train_ulm(ds, cfg)

g = np.linspace(-3, 3, 13)
print("accept_prob on a coarse grid (rows x2 = 3 .. -3, columns x1 = -3 .. 3)")
for x2 in g[::-1]:
    X = np.column_stack([g, np.full_like(g, x2)])
    print(" ".join("%4.1f" % p for p in model.accept_prob(X)))

G = ds.truth.sample_x(20_000, np.random.default_rng(1))
inside = np.all(np.abs(G) <= 1, axis=1)
psi = model.accept_prob(G)
print("\nmean accept inside the bump %.2f, outside %.2f" % (psi[inside].mean(), psi[~inside].mean()))
