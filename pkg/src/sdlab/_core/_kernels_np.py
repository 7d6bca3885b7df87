"""Pure-numpy mixture kernels, used when the compiled extension is unavailable.

All functions take an isotropic Gaussian mixture as three arrays
(weights (K,), means (K, d), variances (K,)) and evaluation points x (n, d),
and stabilize every responsibility computation with log-sum-exp.
"""

import numpy as np

_LOG_2PI = float(np.log(2.0 * np.pi))


def _log_components(weights, means, variances, x):
    """Per-component log joint log(w_i) + log N(x; mu_i, v_i I), shape (n, K)."""
    d = x.shape[1]
    diff = x[:, None, :] - means[None, :, :]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    return (
        np.log(weights)[None, :]
        - 0.5 * (d * (_LOG_2PI + np.log(variances))[None, :] + sq / variances[None, :])
    )


def mixture_logpdf(weights, means, variances, x):
    """Log-density of the mixture at each row of x, shape (n,)."""
    lc = _log_components(weights, means, variances, x)
    m = lc.max(axis=1)
    return m + np.log(np.exp(lc - m[:, None]).sum(axis=1))


def mixture_responsibilities(weights, means, variances, x):
    """Posterior component probabilities at each row of x, shape (n, K)."""
    lc = _log_components(weights, means, variances, x)
    lc -= lc.max(axis=1, keepdims=True)
    r = np.exp(lc)
    r /= r.sum(axis=1, keepdims=True)
    return r


def mixture_score(weights, means, variances, x):
    """Gradient of the mixture log-density at each row of x, shape (n, d).

    score(x) = sum_i r_i(x) (mu_i - x) / v_i with responsibilities r_i.
    """
    r = mixture_responsibilities(weights, means, variances, x)
    coef = r / variances[None, :]
    return coef @ means - coef.sum(axis=1)[:, None] * x
