"""Poisson factor model fitting by alternating maximum likelihood.

The rate matrix is modelled as ``g(Lambda) = B @ F.T``. With ``F`` fixed each
row of the count matrix is an ordinary Poisson regression on ``F``; with ``B``
fixed each column is a Poisson regression on ``B``. The fit alternates the two
batches of regressions and re-orthogonalises the product after every sweep.
"""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .core import CountMatrix, DataError, FactorModel, Link, NumericError, SQRT, as_link, poisson_deviance

log = logging.getLogger(__name__)

NORMALIZATIONS = ("scores-orthonormal", "loadings-orthonormal")


@dataclass(frozen=True)
class AmlConfig:
    K: int
    link: Link = SQRT
    max_outer_iters: int = 100
    outer_tol: float = 1e-7
    glm_max_iters: int = 50
    glm_tol: float = 1e-8
    normalization: str = "scores-orthonormal"
    weight_floor: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "link", as_link(self.link))
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        if min(self.outer_tol, self.glm_tol, self.weight_floor) <= 0:
            raise ValueError("tolerances must be positive")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")


def truncated_svd(M, K: int):
    """Leading ``K`` singular triplets of ``M`` (singular values descending)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DataError("expected a 2-d array")
    if not np.all(np.isfinite(M)):
        raise NumericError("matrix has non-finite entries")
    if not 1 <= K <= min(M.shape):
        raise DataError(f"K={K} outside 1..{min(M.shape)}")
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    return U[:, :K], S[:K], Vt[:K].T


def _thin_product_svd(B, F):
    """SVD of ``B @ F.T`` from QR factors of ``B`` and ``F``; never forms the product."""
    Qb, Rb = np.linalg.qr(B)
    Qf, Rf = np.linalg.qr(F)
    u, s, vt = np.linalg.svd(Rb @ Rf.T)
    return Qb @ u, s, Qf @ vt.T


def _fix_signs(U, V):
    """Make the first nonzero entry of each column of ``V`` positive."""
    for k in range(V.shape[1]):
        nz = np.flatnonzero(np.abs(V[:, k]) > 1e-14)
        if nz.size and V[nz[0], k] < 0:
            V[:, k] *= -1
            U[:, k] *= -1
    return U, V


def _gauge(U, S, V, normalization):
    U, V = _fix_signs(U.copy(), V.copy())
    if normalization == "scores-orthonormal":
        return U, V * S
    return U * S, V


@dataclass
class GlmFit:
    beta: np.ndarray
    deviance: float
    converged: bool
    iterations: int
    weights_trace: list = field(default_factory=list)


def fit_poisson_glm(y, X, link=SQRT, beta0=None, max_iter: int = 50, tol: float = 1e-8, weight_floor: float = 1e-10, trace: bool = False) -> GlmFit:
    """Poisson regression ``y ~ Poisson(g^-1(X @ beta))`` by Fisher scoring.

    Working weights are 1/lambda (identity), lambda (log) and the constant 4
    (square root). Each step is halved up to ten times if it raises the
    deviance. With ``trace=True`` the weight vector of every iteration is kept
    in ``weights_trace``.
    """
    link = as_link(link)
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    p, K = X.shape
    if y.shape[0] != p:
        raise DataError(f"{y.shape[0]} responses for {p} design rows")
    if p < K or np.linalg.matrix_rank(X) < K:
        raise NumericError("design matrix is rank deficient")
    if beta0 is None:
        beta0 = np.linalg.lstsq(X, link.shifted_forward(y), rcond=None)[0]
    tr = [] if trace else None
    beta, dev, conv, iters = _kernels.batch_glm_numpy(
        y[None, :], X, np.asarray(beta0, dtype=float).reshape(1, K), link.code, max_iter, tol, weight_floor, trace=tr
    )
    return GlmFit(beta[0], float(dev[0]), bool(conv[0]), int(iters[0]), [w[0] for w in tr] if trace else [])


def _deviance_of(Y, B, F, link):
    lam = link.inverse(B @ F.T)
    return float(np.sum(_kernels.row_deviance_np(Y, lam)))


def _aml_loop(Y, B, F, cfg: AmlConfig, start_dev: float):
    """Alternating sweeps from ``(B, F)`` until the relative deviance change is small."""
    link = cfg.link
    dev = start_dev
    converged = False
    it = 0
    all_glm_ok = True
    for it in range(1, cfg.max_outer_iters + 1):
        B_new, _, conv_b, _ = _kernels.batch_glm(Y, F, B, link.code, cfg.glm_max_iters, cfg.glm_tol, cfg.weight_floor)
        F_new, _, conv_f, _ = _kernels.batch_glm(Y.T, B_new, F, link.code, cfg.glm_max_iters, cfg.glm_tol, cfg.weight_floor)
        all_glm_ok = bool(conv_b.all() and conv_f.all())
        U, S, V = _thin_product_svd(B_new, F_new)
        B_c, F_c = _gauge(U, S, V, cfg.normalization)
        new_dev = _deviance_of(Y, B_c, F_c, link)
        if not np.isfinite(new_dev) or new_dev > dev + cfg.outer_tol * dev:
            B_c, F_c, new_dev = _halve_toward(Y, B, F, B_c, F_c, dev, cfg)
            if B_c is None:
                log.debug("AML stopped: no deviance decrease after step halving at sweep %d", it)
                break
        rel = abs(dev - new_dev) / max(abs(new_dev), 1e-300)
        B, F, dev = B_c, F_c, new_dev
        if rel < cfg.outer_tol or new_dev == 0.0:
            converged = True
            break
    return B, F, dev, it, converged, all_glm_ok


def _halve_toward(Y, B, F, B_new, F_new, dev, cfg):
    """Step-halving in the linear-predictor grid, projected back to rank K."""
    old = B @ F.T
    new = B_new @ F_new.T
    t = 1.0
    for _ in range(10):
        t *= 0.5
        theta = old + t * (new - old)
        U, S, V = truncated_svd(theta, cfg.K)
        Bc, Fc = _gauge(U, S, V, cfg.normalization)
        d = _deviance_of(Y, Bc, Fc, cfg.link)
        if np.isfinite(d) and d <= dev:
            return Bc, Fc, d
    return None, None, dev


def _initial_factors(Y, cfg: AmlConfig):
    U, S, V = truncated_svd(cfg.link.shifted_forward(Y), cfg.K)
    return _gauge(U, S, V, cfg.normalization)


def _check_inputs(counts, cfg):
    Y = counts.values.astype(float) if isinstance(counts, CountMatrix) else np.asarray(counts, dtype=float)
    if Y.ndim != 2:
        raise DataError("counts must be a 2-d grid")
    if cfg.K > min(Y.shape):
        raise DataError(f"K={cfg.K} exceeds min(n, m)={min(Y.shape)}")
    notes = []
    if np.any(Y.sum(axis=1) == 0):
        notes.append("all-zero row present; rates floored")
    if np.any(Y.sum(axis=0) == 0):
        notes.append("all-zero column present; rates floored")
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return Y, tuple(notes)


def fit_factor_model(counts, cfg: AmlConfig, init=None) -> FactorModel:
    """Fit the K-factor Poisson model by alternating maximum likelihood.

    ``init`` optionally supplies a starting ``(scores, loadings)`` pair; by
    default the start is the rank-K SVD of the link-transformed counts.
    """
    Y, notes = _check_inputs(counts, cfg)
    if init is None:
        B, F = _initial_factors(Y, cfg)
    else:
        U, S, V = _thin_product_svd(np.asarray(init[0], float), np.asarray(init[1], float))
        B, F = _gauge(U, S, V, cfg.normalization)
    dev0 = _deviance_of(Y, B, F, cfg.link)
    B, F, dev, it, converged, glm_ok = _aml_loop(Y, B, F, cfg, dev0)
    if not glm_ok:
        notes = notes + ("some inner GLM fits hit glm_max_iters",)
    return FactorModel(cfg.link, B, F, cfg.normalization, dev, it, converged, notes)


def null_deviance(counts) -> float:
    """Deviance of the constant-rate model (every cell at the grand mean)."""
    Y = counts.values if isinstance(counts, CountMatrix) else np.asarray(counts)
    Y = np.asarray(Y, dtype=float)
    return poisson_deviance(Y, np.full_like(Y, max(Y.mean(), 1e-8)))


@dataclass(frozen=True)
class DevianceReductionTable:
    K: np.ndarray
    deviance: np.ndarray
    reduction: np.ndarray
    null_deviance: float

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("K,deviance,reduction\n")
        for k, d, r in zip(self.K, self.deviance, self.reduction):
            out.write(f"{int(k)},{float(d):.17g},{float(r):.17g}\n")
        return out.getvalue()

    def suggest_k(self, frac: float = 0.02) -> int:
        """Advisory elbow: factors kept before the first reduction below ``frac``.

        The first factor always soaks up the mean profile, so the yardstick is
        the deviance still left after it.
        """
        if self.K.shape[0] == 1:
            return 1
        total = self.deviance[0] - self.deviance[-1]
        if total <= 0:
            return 1
        for k, r in zip(self.K[1:], self.reduction[1:]):
            if r < frac * total:
                return int(k) - 1
        return int(self.K[-1])


def _append_component(Y, B, F, cfg):
    """Warm start for K+1 factors whose deviance does not exceed the K-factor fit."""
    link = cfg.link
    dev = _deviance_of(Y, B, F, link)
    resid = link.shifted_forward(Y) - B @ F.T
    u, s, v = truncated_svd(resid, 1)
    # orthogonalise the new direction against the current factors
    Qb, _ = np.linalg.qr(B)
    Qf, _ = np.linalg.qr(F)
    u = u - Qb @ (Qb.T @ u)
    v = v - Qf @ (Qf.T @ v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        rng = np.random.default_rng(cfg.K)
        u = rng.standard_normal((Y.shape[0], 1))
        v = rng.standard_normal((Y.shape[1], 1))
        u -= Qb @ (Qb.T @ u)
        v -= Qf @ (Qf.T @ v)
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    u, v = u / nu, v / nv
    scale = float(s[0]) if s[0] > 0 else 1.0
    best = None
    t = 1.0
    for _ in range(40):
        for sign in (1.0, -1.0):
            Bc = np.hstack([B, sign * t * scale * u])
            Fc = np.hstack([F, v])
            d = _deviance_of(Y, Bc, Fc, link)
            if np.isfinite(d) and d <= dev and (best is None or d < best[2]):
                best = (Bc, Fc, d)
        if best is not None:
            break
        t *= 0.5
    if best is None:
        best = (np.hstack([B, 1e-12 * scale * u]), np.hstack([F, v]), dev)
    return best[0], best[1]


def deviance_reduction_table(counts, K_max: int, cfg: AmlConfig | None = None) -> DevianceReductionTable:
    """Deviance of nested warm-started fits for ``K = 1..K_max``.

    ``deviance(0)`` is the constant-rate model. Each fit starts from the
    previous one plus a new component scaled so the start is no worse, so the
    deviance sequence is nonincreasing.
    """
    cfg = cfg or AmlConfig(K=1)
    Y = counts.values.astype(float) if isinstance(counts, CountMatrix) else np.asarray(counts, dtype=float)
    if not 1 <= K_max <= min(Y.shape):
        raise DataError(f"K_max={K_max} outside 1..{min(Y.shape)}")
    d0 = null_deviance(Y)
    devs = []
    model = None
    for K in range(1, K_max + 1):
        kcfg = replace(cfg, K=K)
        if model is None:
            model = fit_factor_model(Y, kcfg)
        else:
            B0, F0 = _append_component(Y, np.asarray(model.scores), np.asarray(model.loadings), kcfg)
            model = fit_factor_model(Y, kcfg, init=(B0, F0))
        devs.append(model.deviance)
    devs = np.array(devs)
    prev = np.concatenate([[d0], devs[:-1]])
    return DevianceReductionTable(np.arange(1, K_max + 1), devs, prev - devs, d0)
