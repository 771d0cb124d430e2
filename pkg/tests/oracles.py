"""Independent reference computations used by the tests.

Written with plain Python loops and explicit matrices, deliberately sharing no
code with the package.
"""

import math


def _mean(v):
    return sum(v) / len(v)


def _cov2(a, b):
    # 2x2 sample covariance, denominator n - 1
    n = len(a)
    ma, mb = _mean(a), _mean(b)
    saa = sum((x - ma) ** 2 for x in a) / (n - 1)
    sbb = sum((y - mb) ** 2 for y in b) / (n - 1)
    sab = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / (n - 1)
    return [[saa, sab], [sab, sbb]]


def single_coverage(psi, hit):
    w = [p * h for p, h in zip(psi, hit)]
    gamma = _mean(w)
    q = _mean(psi)
    theta = gamma / q
    C = _cov2(w, psi)
    a = [1.0 / q, -gamma / q**2]
    var = sum(a[i] * C[i][j] * a[j] for i in range(2) for j in range(2))
    return theta, math.sqrt(max(var, 0.0)), gamma, q


def aggregate_coverage(folds):
    """``folds`` is a list of (psi, hit) pairs."""
    K = len(folds)
    gammas, qs, covs = [], [], []
    for psi, hit in folds:
        w = [p * h for p, h in zip(psi, hit)]
        gammas.append(_mean(w))
        qs.append(_mean(psi))
        covs.append(_cov2(w, psi))
    gamma = sum(gammas) / K
    q = sum(qs) / K
    theta = gamma / q
    # full 2K x 2K block-diagonal matrix and tiled gradient
    Sigma = [[0.0] * (2 * K) for _ in range(2 * K)]
    for k, C in enumerate(covs):
        for i in range(2):
            for j in range(2):
                Sigma[2 * k + i][2 * k + j] = C[i][j]
    a = []
    for _ in range(K):
        a += [1.0 / (K * q), -gamma / (K * q**2)]
    var = sum(a[i] * Sigma[i][j] * a[j] for i in range(2 * K) for j in range(2 * K))
    return theta, math.sqrt(max(var, 0.0)), gamma, q


def normal_quantile(p):
    """Inverse standard normal CDF by bisection on math.erf."""
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mlp_forward(weights, biases, x):
    """Loop-based dense ReLU network; weights[l][i][j] maps input i to unit j."""
    h = list(x)
    L = len(weights)
    for l in range(L):
        W, b = weights[l], biases[l]
        z = [b[j] + sum(h[i] * W[i][j] for i in range(len(h))) for j in range(len(b))]
        h = [max(v, 0.0) for v in z] if l < L - 1 else z
    return h


def central_difference(f, theta, step=1e-5):
    grad = []
    for i in range(len(theta)):
        up = list(theta)
        dn = list(theta)
        up[i] += step
        dn[i] -= step
        grad.append((f(up) - f(dn)) / (2 * step))
    return grad
