"""Independent reference implementations used only by the tests.

Everything here is deliberately written against the package's public
surface but with a different algorithm (dense Newton, dual projected
gradient, reparameterized ISTA, adaptive quadrature) so agreement is
evidence, not tautology.
"""

import math

import numpy as np

from tvdensity.model import LogSplineProblem
from tvdensity.trendfilter import TfProblem, tfpp_penalty_matrix


def fd_gradient(fn, beta, h=1e-5):
    """Central finite differences of a scalar function of beta."""
    beta = np.asarray(beta, dtype=np.float64)
    out = np.empty_like(beta)
    for j in range(beta.size):
        step = h * max(1.0, abs(beta[j]))
        up = beta.copy()
        dn = beta.copy()
        up[j] += step
        dn[j] -= step
        out[j] = (fn(up) - fn(dn)) / (2.0 * step)
    return out


def fd_jacobian(fn, beta, h=1e-5):
    """Central finite differences of a vector function of beta, K x K."""
    beta = np.asarray(beta, dtype=np.float64)
    cols = []
    for j in range(beta.size):
        step = h * max(1.0, abs(beta[j]))
        up = beta.copy()
        dn = beta.copy()
        up[j] += step
        dn[j] -= step
        cols.append((fn(up) - fn(dn)) / (2.0 * step))
    return np.column_stack(cols)


def dense_newton_mle(problem: LogSplineProblem, max_iters=300, grad_tol=1e-11):
    """Unpenalized MLE by dense Newton with the intercept pinned at zero.

    The intercept direction is flat (its score is identically zero), so the
    solve runs on the remaining coordinates with a tiny Levenberg ridge and
    Armijo backtracking.  Returns the coefficient vector.
    """
    beta = np.zeros(problem.num_cols)
    free = np.arange(1, problem.num_cols)
    for _ in range(max_iters):
        val, grad, masses = problem.eval_all(beta)
        g = grad[free]
        if np.max(np.abs(g)) <= grad_tol * max(1.0, problem.n):
            break
        hess = problem.n * problem.information_from_masses(masses)
        block = hess[np.ix_(free, free)]
        ridge = 1e-12 * max(1.0, float(np.trace(block)) / free.size)
        for _ in range(30):
            try:
                step = np.linalg.solve(block + ridge * np.eye(free.size), -g)
                break
            except np.linalg.LinAlgError:
                ridge *= 100.0
        slope = float(g @ step)
        t = 1.0
        cand = beta
        for _ in range(60):
            cand = beta.copy()
            cand[free] += t * step
            try:
                if problem.value(cand) <= val + 1e-4 * t * slope:
                    break
            except Exception:
                pass
            t *= 0.5
        beta = cand
    return beta


def tv_prox_dual(values, weight, iters=30000):
    """1-D total-variation prox by accelerated projected gradient on the dual.

    Solves max over |z_i| <= weight of -1/2 ||v - D'z||^2 and maps back to
    the primal x = v - D'z, which is the exact prox for the convex problem.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n <= 1 or weight == 0.0:
        return v.copy()
    d_mat = np.diff(np.eye(n), axis=0)
    lip = float(np.linalg.norm(d_mat @ d_mat.T, 2))
    z = np.zeros(n - 1)
    y = z.copy()
    t = 1.0
    for _ in range(iters):
        grad = -(d_mat @ (v - d_mat.T @ y))
        z_new = np.clip(y - grad / lip, -weight, weight)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = z_new + ((t - 1.0) / t_new) * (z_new - z)
        z, t = z_new, t_new
    return v - d_mat.T @ z


def binned_mle_theta(counts):
    """Closed-form unpenalized binned MLE with theta_0 pinned: log(c_j/c_0)."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0.0):
        raise ValueError("closed form needs every bin occupied")
    return np.log(counts / counts[0])


def _softmax(logits):
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def tf_objective(problem: TfProblem, theta):
    """Binned NLL plus the trend-filter penalty, shift-invariant in theta."""
    theta = np.asarray(theta, dtype=np.float64)
    logits = theta + np.log(problem.widths)
    logz = logits.max() + math.log(np.exp(logits - logits.max()).sum())
    nll = -float(problem.counts @ theta) + problem.n * logz
    pen = float(np.abs(np.diff(theta, n=problem.order + 1)).sum())
    return nll + problem.lam * pen


def tf_oracle_objective(problem: TfProblem, iters=200000):
    """Reference optimum of the trend-filter objective by reparameterized FISTA.

    Substituting gamma = H theta with the invertible penalty matrix turns
    ``lambda ||D^(k+1) theta||_1`` into a plain soft-threshold penalty on the
    trailing block of gamma, so accelerated proximal gradient applies
    directly.  Only sensible for small J.
    """
    k = problem.order
    j_bins = problem.num_bins
    h_mat = tfpp_penalty_matrix(k, j_bins)
    h_inv = np.linalg.inv(h_mat)
    delta = 1.0 / j_bins
    scale = math.factorial(k) * delta**k
    lam_vec = np.zeros(j_bins)
    lam_vec[k + 1 :] = problem.lam * scale
    log_w = np.log(problem.widths)
    counts = problem.counts
    n = problem.n

    def grad_theta(theta):
        return -counts + n * _softmax(theta + log_w)

    lip = 0.5 * n * float(np.linalg.norm(h_inv, 2)) ** 2
    gamma = np.zeros(j_bins)
    y = gamma.copy()
    t = 1.0
    for _ in range(iters):
        theta = h_inv @ y
        g = h_inv.T @ grad_theta(theta)
        raw = y - g / lip
        gamma_new = np.sign(raw) * np.maximum(np.abs(raw) - lam_vec / lip, 0.0)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = gamma_new + ((t - 1.0) / t_new) * (gamma_new - gamma)
        gamma, t = gamma_new, t_new
    theta = h_inv @ gamma
    theta = theta - theta[0]
    return tf_objective(problem, theta), theta
