"""Compiled sampler loops.

All random numbers are drawn beforehand by numpy Generators and passed in, so
the kernels are deterministic functions of their arguments.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True)
def _logit_loglik(theta, y, n, mu, tau):
    return y * theta - n * _softplus(theta) - 0.5 * tau * (theta - mu) ** 2


@njit(cache=True)
def logit_normal_mwg(
    y,
    n,
    theta_init,
    mu_init,
    tau_init,
    update_hyper,
    mu0,
    tau0,
    tau_rate,
    z_prop,
    log_u,
    z_mu,
    g_tau,
    prop_sd_init,
    burn_in,
    thin,
    target,
):
    """Metropolis-within-Gibbs for one cluster of the binomial-logit hierarchy.

    theta_i | .  adaptive random-walk Metropolis, proposal sd tuned during burn-in
    mu | .       normal conjugate update
    tau | .      gamma conjugate update; g_tau holds standard gamma draws at
                 the posterior shape

    With ``update_hyper`` false, mu and tau stay at their initial values and the
    subgroups are independent logit-normal posteriors.
    """
    iters, m = z_prop.shape
    n_keep = (iters - burn_in) // thin
    theta = theta_init.copy()
    mu = mu_init
    tau = tau_init
    log_sd = np.log(prop_sd_init)
    cur = np.empty(m)
    for i in range(m):
        cur[i] = _logit_loglik(theta[i], y[i], n[i], mu, tau)

    theta_out = np.empty((n_keep, m))
    mu_out = np.empty(n_keep)
    tau_out = np.empty(n_keep)
    accepted = np.zeros(m)
    k = 0
    for t in range(iters):
        for i in range(m):
            prop = theta[i] + math.exp(log_sd[i]) * z_prop[t, i]
            new = _logit_loglik(prop, y[i], n[i], mu, tau)
            acc = log_u[t, i] < new - cur[i]
            if acc:
                theta[i] = prop
                cur[i] = new
            if t < burn_in:
                gain = (t + 1.0) ** -0.6
                log_sd[i] += gain * ((1.0 if acc else 0.0) - target)
            elif acc:
                accepted[i] += 1.0
        if update_hyper:
            s = 0.0
            for i in range(m):
                s += theta[i]
            prec = tau0 + m * tau
            mu = (tau0 * mu0 + tau * s) / prec + z_mu[t] / math.sqrt(prec)
            ss = 0.0
            for i in range(m):
                ss += (theta[i] - mu) ** 2
            tau = g_tau[t] / (tau_rate + 0.5 * ss)
            for i in range(m):
                cur[i] = _logit_loglik(theta[i], y[i], n[i], mu, tau)
        if t >= burn_in and (t - burn_in + 1) % thin == 0:
            for i in range(m):
                theta_out[k, i] = theta[i]
            mu_out[k] = mu
            tau_out[k] = tau
            k += 1
    kept = iters - burn_in
    for i in range(m):
        accepted[i] = accepted[i] / kept if kept > 0 else 0.0
    return theta_out, mu_out, tau_out, accepted, np.exp(log_sd)


@njit(cache=True)
def normal_gibbs(
    ybar,
    ss_within,
    counts,
    cluster,
    n_clusters,
    theta_init,
    mu_init,
    tau_init,
    tau_y_init,
    update_hyper,
    mu0,
    tau0,
    tau_rate,
    tau_y_rate,
    z_theta,
    z_mu,
    g_tau,
    g_tau_y,
    burn_in,
    thin,
):
    """Fully conjugate Gibbs sweep for the normal-endpoint hierarchy.

    Subgroup i has counts[i] outcomes with mean ybar[i] and within-subgroup
    sum of squares ss_within[i]. The outcome precision tau_y is shared by all
    subgroups; mu and tau are per cluster.
    """
    iters, m = z_theta.shape
    n_keep = (iters - burn_in) // thin
    theta = theta_init.copy()
    mu = mu_init.copy()
    tau = tau_init.copy()
    tau_y = tau_y_init
    theta_out = np.empty((n_keep, m))
    mu_out = np.empty((n_keep, n_clusters))
    tau_out = np.empty((n_keep, n_clusters))
    tau_y_out = np.empty(n_keep)
    sums = np.empty(n_clusters)
    sq = np.empty(n_clusters)
    sizes = np.zeros(n_clusters)
    for i in range(m):
        sizes[cluster[i]] += 1.0
    k = 0
    for t in range(iters):
        for i in range(m):
            j = cluster[i]
            prec = tau[j] + counts[i] * tau_y
            mean = (tau[j] * mu[j] + tau_y * counts[i] * ybar[i]) / prec
            theta[i] = mean + z_theta[t, i] / math.sqrt(prec)
        if update_hyper:
            sums[:] = 0.0
            for i in range(m):
                sums[cluster[i]] += theta[i]
            for j in range(n_clusters):
                prec = tau0 + sizes[j] * tau[j]
                mu[j] = (tau0 * mu0 + tau[j] * sums[j]) / prec + z_mu[t, j] / math.sqrt(prec)
            sq[:] = 0.0
            for i in range(m):
                sq[cluster[i]] += (theta[i] - mu[cluster[i]]) ** 2
            for j in range(n_clusters):
                tau[j] = g_tau[t, j] / (tau_rate + 0.5 * sq[j])
        resid = 0.0
        for i in range(m):
            resid += ss_within[i] + counts[i] * (ybar[i] - theta[i]) ** 2
        tau_y = g_tau_y[t] / (tau_y_rate + 0.5 * resid)
        if t >= burn_in and (t - burn_in + 1) % thin == 0:
            for i in range(m):
                theta_out[k, i] = theta[i]
            for j in range(n_clusters):
                mu_out[k, j] = mu[j]
                tau_out[k, j] = tau[j]
            tau_y_out[k] = tau_y
            k += 1
    return theta_out, mu_out, tau_out, tau_y_out
