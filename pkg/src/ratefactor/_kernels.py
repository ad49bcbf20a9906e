"""Batched Poisson GLM kernels.

Every hot loop of the factor fit reduces to solving many small, independent
Poisson regressions that share one design matrix: each row ``y[r]`` is
regressed on ``X`` (p x K) under a fixed link. Two interchangeable
implementations live here:

* a numba ``@njit`` kernel that loops over rows and runs Fisher scoring with
  step-halving on each one;
* a pure-numpy fallback that runs the same iteration vectorised across rows.

``RATE_FACTOR_NUMBA=0`` in the environment (or numba being unavailable)
selects the numpy path. ``RATE_FACTOR_THREADS`` caps numba's thread pool.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("RATE_FACTOR_NUMBA", "1").lower() not in ("0", "false", "no", "off")

if HAVE_NUMBA and os.environ.get("RATE_FACTOR_THREADS"):
    try:
        numba.set_num_threads(max(1, min(int(os.environ["RATE_FACTOR_THREADS"]), numba.config.NUMBA_NUM_THREADS)))
    except ValueError:
        pass

# link codes shared with core.Link
IDENTITY, LOG, SQRT = 0, 1, 2

RATE_FLOOR = 1e-8
# smallest |eta| used when dividing by d(lambda)/d(eta); sqrt(RATE_FLOOR)
ETA_FLOOR = 1e-4
MAX_HALVINGS = 10


# ---------------------------------------------------------------------------
# numpy implementation
# ---------------------------------------------------------------------------

def inverse_link_np(eta, link):
    if link == IDENTITY:
        lam = np.array(eta, dtype=float, copy=True)
    elif link == LOG:
        lam = np.exp(np.minimum(eta, 700.0))
    else:
        lam = np.square(eta)
    return np.maximum(lam, RATE_FLOOR)


def row_deviance_np(y, lam):
    """Poisson deviance summed along the last axis (0 log 0 = 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / lam), 0.0)
    return 2.0 * np.sum(term - (y - lam), axis=-1)


def working_weights_np(eta, lam, link):
    """Fisher-scoring weights (d lambda / d eta)^2 / lambda.

    identity: 1/lambda, log: lambda, square-root: the constant 4.
    """
    if link == IDENTITY:
        return 1.0 / lam
    if link == LOG:
        return lam.copy()
    return np.full_like(eta, 4.0)


def _mu_eta_np(eta, lam, link):
    if link == IDENTITY:
        return np.ones_like(eta)
    if link == LOG:
        return lam
    safe = np.where(np.abs(eta) < ETA_FLOOR, np.where(eta < 0, -ETA_FLOOR, ETA_FLOOR), eta)
    return 2.0 * safe


def _solve_batched(A, b):
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(b)
        for r in range(A.shape[0]):
            out[r] = np.linalg.lstsq(A[r], b[r], rcond=None)[0]
        return out


def batch_glm_numpy(Y, X, beta0, link, max_iter=50, tol=1e-8, weight_floor=1e-10, trace=None):
    """Vectorised Fisher scoring for ``Y[r] ~ Poisson(g^-1(X @ beta[r]))``.

    Returns ``(beta, deviance, converged, iterations)`` with one entry per row.
    Each row's deviance never increases from its starting value. ``trace``, if
    a list, receives the working-weight array used at every iteration.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    beta = np.array(beta0, dtype=float, copy=True)
    r = Y.shape[0]
    eta = beta @ X.T
    lam = inverse_link_np(eta, link)
    dev = row_deviance_np(Y, lam)
    active = np.ones(r, dtype=bool)
    converged = np.zeros(r, dtype=bool)
    iters = np.zeros(r, dtype=np.int64)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        e, l, y, b = eta[idx], lam[idx], Y[idx], beta[idx]
        w = np.maximum(working_weights_np(e, l, link), weight_floor)
        if trace is not None:
            trace.append(w.copy())
        z = e + (y - l) / _mu_eta_np(e, l, link)
        A = np.einsum("rp,pk,pl->rkl", w, X, X)
        rhs = np.einsum("rp,pk->rk", w * z, X)
        b_new = _solve_batched(A, rhs)
        step = b_new - b
        t = np.ones(len(idx))
        accepted = np.zeros(len(idx), dtype=bool)
        cur_dev = dev[idx]
        new_b = b.copy()
        new_dev = cur_dev.copy()
        for _h in range(MAX_HALVINGS + 1):
            todo = ~accepted
            if not todo.any():
                break
            cand = b[todo] + t[todo, None] * step[todo]
            cand_dev = row_deviance_np(y[todo], inverse_link_np(cand @ X.T, link))
            ok = np.isfinite(cand_dev) & (cand_dev <= cur_dev[todo])
            sel = np.flatnonzero(todo)[ok]
            new_b[sel] = cand[ok]
            new_dev[sel] = cand_dev[ok]
            accepted[sel] = True
            t[todo] *= 0.5
        iters[idx] += 1
        rel = np.abs(cur_dev - new_dev) / (np.abs(new_dev) + 0.1)
        done = (rel < tol) | ~accepted
        converged[idx] = rel < tol
        beta[idx] = new_b
        dev[idx] = new_dev
        eta[idx] = new_b @ X.T
        lam[idx] = inverse_link_np(eta[idx], link)
        active[idx[done]] = False
    return beta, dev, converged, iters


# ---------------------------------------------------------------------------
# numba implementation
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _inv_link_scalar(eta, link):
        if link == 0:
            lam = eta
        elif link == 1:
            lam = np.exp(min(eta, 700.0))
        else:
            lam = eta * eta
        return max(lam, RATE_FLOOR)

    @njit(cache=True)
    def _row_dev(y, X, b, link):
        p, K = X.shape
        d = 0.0
        for j in range(p):
            eta = 0.0
            for k in range(K):
                eta += X[j, k] * b[k]
            lam = _inv_link_scalar(eta, link)
            if y[j] > 0:
                d += y[j] * np.log(y[j] / lam)
            d -= y[j] - lam
        return 2.0 * d

    @njit(cache=True)
    def _solve_small(A, rhs):
        # Gaussian elimination with partial pivoting; returns (x, ok)
        K = A.shape[0]
        M = A.copy()
        v = rhs.copy()
        scale = 0.0
        for i in range(K):
            scale = max(scale, abs(M[i, i]))
        if scale == 0.0:
            scale = 1.0
        for c in range(K):
            piv = c
            best = abs(M[c, c])
            for r in range(c + 1, K):
                if abs(M[r, c]) > best:
                    best = abs(M[r, c])
                    piv = r
            if best <= 1e-14 * scale:
                return v, False
            if piv != c:
                for q in range(K):
                    tmp = M[c, q]
                    M[c, q] = M[piv, q]
                    M[piv, q] = tmp
                tmp = v[c]
                v[c] = v[piv]
                v[piv] = tmp
            for r in range(c + 1, K):
                f = M[r, c] / M[c, c]
                if f != 0.0:
                    for q in range(c, K):
                        M[r, q] -= f * M[c, q]
                    v[r] -= f * v[c]
        x = np.empty(K)
        for c in range(K - 1, -1, -1):
            s = v[c]
            for q in range(c + 1, K):
                s -= M[c, q] * x[q]
            x[c] = s / M[c, c]
        return x, True

    @njit(cache=True)
    def _glm_row(y, X, b0, link, max_iter, tol, weight_floor):
        p, K = X.shape
        b = b0.copy()
        dev = _row_dev(y, X, b, link)
        converged = False
        it = 0
        A = np.empty((K, K))
        rhs = np.empty(K)
        while it < max_iter:
            it += 1
            A[:, :] = 0.0
            rhs[:] = 0.0
            for j in range(p):
                eta = 0.0
                for k in range(K):
                    eta += X[j, k] * b[k]
                lam = _inv_link_scalar(eta, link)
                if link == 0:
                    w = 1.0 / lam
                    mu_eta = 1.0
                elif link == 1:
                    w = lam
                    mu_eta = lam
                else:
                    w = 4.0
                    e = eta
                    if abs(e) < ETA_FLOOR:
                        e = -ETA_FLOOR if e < 0 else ETA_FLOOR
                    mu_eta = 2.0 * e
                if w < weight_floor:
                    w = weight_floor
                z = eta + (y[j] - lam) / mu_eta
                for k in range(K):
                    wx = w * X[j, k]
                    rhs[k] += wx * z
                    for q in range(K):
                        A[k, q] += wx * X[j, q]
            b_new, ok = _solve_small(A, rhs)
            if not ok:
                break
            t = 1.0
            accepted = False
            new_dev = dev
            cand = np.empty(K)
            for _h in range(MAX_HALVINGS + 1):
                for k in range(K):
                    cand[k] = b[k] + t * (b_new[k] - b[k])
                cd = _row_dev(y, X, cand, link)
                if np.isfinite(cd) and cd <= dev:
                    accepted = True
                    new_dev = cd
                    break
                t *= 0.5
            if not accepted:
                break
            rel = abs(dev - new_dev) / (abs(new_dev) + 0.1)
            for k in range(K):
                b[k] = cand[k]
            dev = new_dev
            if rel < tol:
                converged = True
                break
        return b, dev, converged, it

    @njit(cache=True)
    def _batch_glm_numba(Y, X, beta0, link, max_iter, tol, weight_floor):
        r = Y.shape[0]
        K = X.shape[1]
        beta = np.empty((r, K))
        dev = np.empty(r)
        conv = np.zeros(r, dtype=np.bool_)
        iters = np.zeros(r, dtype=np.int64)
        for i in range(r):
            b, d, c, it = _glm_row(Y[i], X, beta0[i], link, max_iter, tol, weight_floor)
            beta[i] = b
            dev[i] = d
            conv[i] = c
            iters[i] = it
        return beta, dev, conv, iters


def batch_glm_numba(Y, X, beta0, link, max_iter=50, tol=1e-8, weight_floor=1e-10):
    if not HAVE_NUMBA:  # pragma: no cover
        raise RuntimeError("numba is not installed")
    return _batch_glm_numba(
        np.ascontiguousarray(Y, dtype=np.float64),
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(beta0, dtype=np.float64),
        int(link),
        int(max_iter),
        float(tol),
        float(weight_floor),
    )


def batch_glm(Y, X, beta0, link, max_iter=50, tol=1e-8, weight_floor=1e-10):
    """Dispatch to the numba kernel or the numpy fallback per ``USE_NUMBA``."""
    if USE_NUMBA:
        return batch_glm_numba(Y, X, beta0, link, max_iter, tol, weight_floor)
    return batch_glm_numpy(Y, X, beta0, link, max_iter, tol, weight_floor)
