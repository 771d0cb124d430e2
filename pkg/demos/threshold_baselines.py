"""Comparing learned abstention with post-hoc thresholding.

A plain maximum-likelihood model is thresholded on its predictive entropy,
optionally gated by an isolation forest. Neither notices that data thins
out far from the origin; the penalized selective model does.
"""
import numpy as np

from ulmguards import TrainConfig, UlmHyper, fit_threshold_policy, gen_density_sim, train_ulm

ds = gen_density_sim(3000, seed=5)
cfg = TrainConfig(hyper=UlmHyper(alpha=0.1, delta=2.5, lam=0.02), epochs=25, seed=2)

selective = train_ulm(ds, cfg)
thresh = fit_threshold_policy(ds, cfg, delta=2.5)
gated = fit_threshold_policy(ds, cfg, delta=2.5, outlier_quantile=0.95)

radii = [0.0, 1.0, 2.0, 3.0, 4.0]
print("radius  selective  threshold  threshold+forest")
for r in radii:
    ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    X = r * np.column_stack([np.cos(ang), np.sin(ang)])
    print("%6.1f  %9.2f  %9.2f  %16.2f" % (
        r, np.mean(selective.accept_prob(X) >= 0.5), thresh.accept(X).mean(), gated.accept(X).mean()))
