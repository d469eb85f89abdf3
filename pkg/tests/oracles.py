"""Independent numerical oracles shared by the unit and acceptance tests."""

import mpmath
import numpy as np

from overid.partial_mle import P_INDEX, Q_INDEX, fisher_information


def _block_cov(t, idx):
    """Implied covariance block from the noise loadings, as mpmath numbers."""
    e, a, b, d = t[:4]
    c = e / a
    # rows x, y, w, m as combinations of the noises (u_w, u_x, u_m, u_y)
    rows = [[d, 1, 0, 0], [a * c * d + b, a * c, a, 1], [1, 0, 0, 0], [c * d, c, 1, 0]]
    L = [rows[i] for i in idx]
    return [[sum(L[i][r] * L[j][r] * t[4 + r] for r in range(4)) for j in range(3)] for i in range(3)]


def _logdet_and_trace(T, S):
    cof = [[None] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(3):
            r = [k for k in range(3) if k != i]
            q = [k for k in range(3) if k != j]
            cof[i][j] = (-1) ** (i + j) * (T[r[0]][q[0]] * T[r[1]][q[1]] - T[r[0]][q[1]] * T[r[1]][q[0]])
    det = sum(T[0][j] * cof[0][j] for j in range(3))
    # tr(T^-1 S) with T^-1 = cof^T / det
    trace = sum(cof[j][i] * S[j][i] for i in range(3) for j in range(3)) / det
    return mpmath.log(det), trace


def expected_negative_loglik(theta, truth_blocks, k):
    """Per-sample expected negative log-likelihood in 40-digit arithmetic.

    Implied covariances reach condition numbers near 1e9 on the prior, so
    double precision cannot support a second-difference Hessian.
    """
    out = mpmath.mpf(0)
    for weight, idx, S in zip((k, 1 - k), (P_INDEX, Q_INDEX), truth_blocks):
        logdet, trace = _logdet_and_trace(_block_cov(theta, idx), S)
        out += mpmath.mpf(weight) * (logdet + trace) / 2
    return out


def fd_hessian(f, x, scale=1e-3):
    """Fourth-order central-difference Hessian.

    Each coordinate's step is ``scale`` over the square root of a rough
    second difference, so steps follow the curvature rather than |x|.
    """
    n = len(x)
    x = [mpmath.mpf(float(v)) for v in x]
    f0 = f(x)
    h = []
    for i in range(n):
        e = mpmath.mpf(1e-3) * max(1, abs(x[i]))
        curv = (f(_shift(x, i, e)) - 2 * f0 + f(_shift(x, i, -e))) / e**2
        step = scale / mpmath.sqrt(abs(curv))
        if i >= 4:
            step = min(step, x[i] / 20)  # stay inside the positive-variance region
        h.append(step)
    stencil = [(-2, mpmath.mpf(1) / 12), (-1, mpmath.mpf(-8) / 12), (1, mpmath.mpf(8) / 12), (2, mpmath.mpf(-1) / 12)]
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            total = mpmath.mpf(0)
            for si, wi in stencil:
                for sj, wj in stencil:
                    total += wi * wj * f(_shift(_shift(x, i, si * h[i]), j, sj * h[j]))
            H[i, j] = H[j, i] = float(total / (h[i] * h[j]))
    return H


def _shift(x, i, delta):
    y = list(x)
    y[i] = y[i] + delta
    return y


def max_information_error(thetas_and_ks):
    """Worst entrywise error of the analytic Fisher information.

    Errors are scaled by sqrt(I_ii I_jj) so every entry is compared on the
    scale of its own row and column.
    """
    worst = 0.0
    with mpmath.workdps(40):
        for theta, k in thetas_and_ks:
            info = fisher_information(theta, k)
            truth = [mpmath.mpf(float(v)) for v in theta]
            blocks = (_block_cov(truth, P_INDEX), _block_cov(truth, Q_INDEX))
            H = fd_hessian(lambda t: expected_negative_loglik(t, blocks, k), theta.as_array())
            scale = np.sqrt(np.outer(np.diag(info), np.diag(info)))
            worst = max(worst, float(np.max(np.abs(info - H) / scale)))
    return worst
