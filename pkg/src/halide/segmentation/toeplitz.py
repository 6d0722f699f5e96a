"""Block-Toeplitz sparse precision estimation for stacked-window Gaussians."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .. import DataError

RIDGE = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ToeplitzClusterModel:
    theta: np.ndarray
    logdet: float
    converged: bool = True
    iterations: int = 0

    @classmethod
    def from_theta(cls, theta: np.ndarray, converged: bool = True, iterations: int = 0) -> "ToeplitzClusterModel":
        theta = np.asarray(theta, dtype=np.float64)
        L = np.linalg.cholesky(theta)
        return cls(theta, 2.0 * float(np.log(np.diag(L)).sum()), converged, iterations)

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def to_json(self) -> dict:
        return {"theta": self.theta.tolist(), "logdet": self.logdet,
                "converged": self.converged, "iterations": self.iterations}

    @classmethod
    def from_json(cls, rec: dict) -> "ToeplitzClusterModel":
        return cls(np.array(rec["theta"], dtype=np.float64), float(rec["logdet"]),
                   bool(rec.get("converged", True)), int(rec.get("iterations", 0)))


def empirical_cov(windows: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """``(1/n) sum X X^T + ridge * I`` over rows of ``windows`` (no mean removal)."""
    X = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one window")
    S = X.T @ X / X.shape[0]
    S = 0.5 * (S + S.T)
    S[np.diag_indices_from(S)] += ridge
    return S


@lru_cache(maxsize=64)
def toeplitz_groups(m: int, omega: int) -> tuple[np.ndarray, int]:
    """Integer label per entry of an (m*omega)^2 matrix; equal labels must hold equal values.

    Entry (i*m + r, j*m + c) lives in block offset k = j - i. Symmetry ties
    (k, r, c) to (-k, c, r), so labels are assigned on the canonical form.
    """
    d = m * omega
    idx = np.arange(d)
    blk, off = idx // m, idx % m
    k = blk[None, :] - blk[:, None]
    r = np.broadcast_to(off[:, None], (d, d))
    c = np.broadcast_to(off[None, :], (d, d))
    neg = k < 0
    kk = np.abs(k)
    rr = np.where(neg, c, r)
    cc = np.where(neg, r, c)
    diag_blk = kk == 0
    rr, cc = np.where(diag_blk, np.minimum(rr, cc), rr), np.where(diag_blk, np.maximum(rr, cc), cc)
    raw = (kk * m + rr) * m + cc
    _, labels = np.unique(raw, return_inverse=True)
    labels = labels.reshape(d, d)
    labels.setflags(write=False)
    return labels, int(labels.max()) + 1


def toeplitz_project(A: np.ndarray, m: int, omega: int) -> np.ndarray:
    """Average every tied group of entries (orthogonal projection onto symmetric block-Toeplitz)."""
    labels, n = toeplitz_groups(m, omega)
    flat = labels.ravel()
    sums = np.bincount(flat, weights=A.ravel(), minlength=n)
    counts = np.bincount(flat, minlength=n)
    return (sums / counts)[labels]


def toeplitz_violation(A: np.ndarray, m: int, omega: int) -> float:
    """Largest gap between entries that the structure requires to be equal."""
    labels, n = toeplitz_groups(m, omega)
    flat = labels.ravel()
    vals = A.ravel()
    hi = np.full(n, -np.inf)
    lo = np.full(n, np.inf)
    np.maximum.at(hi, flat, vals)
    np.minimum.at(lo, flat, vals)
    return float(np.max(hi - lo))


def offdiag_l1(theta: np.ndarray) -> float:
    return float(np.abs(theta).sum() - np.abs(np.diag(theta)).sum())


def glasso_objective(theta: np.ndarray, S: np.ndarray, lam: float) -> float:
    """``-logdet(theta) + tr(S theta) + lam * ||theta||_1`` over off-diagonal entries."""
    sign, logdet = np.linalg.slogdet(theta)
    if sign <= 0:
        return math.inf
    return -logdet + float(np.sum(S * theta)) + lam * offdiag_l1(theta)


def _check_psd(S: np.ndarray, tol: float = 1e-8) -> None:
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DataError("covariance must be square")
    if not np.all(np.isfinite(S)):
        raise DataError("covariance has non-finite entries")
    if np.max(np.abs(S - S.T)) > tol * max(1.0, np.max(np.abs(S))):
        raise DataError("covariance is not symmetric")
    ev = np.linalg.eigvalsh(S)
    if ev[0] < -tol * max(1.0, ev[-1]):
        raise DataError(f"covariance is not positive semidefinite (min eigenvalue {ev[0]:.3g})")


def _make_pd(Z: np.ndarray) -> np.ndarray:
    # adding c*I keeps the block-Toeplitz ties intact
    shift = 0.0
    for _ in range(60):
        try:
            np.linalg.cholesky(Z + shift * np.eye(len(Z)))
            return Z + shift * np.eye(len(Z)) if shift else Z
        except np.linalg.LinAlgError:
            ev0 = np.linalg.eigvalsh(Z)[0]
            shift = max(2 * shift, -ev0 + 1e-8, 1e-10)
    raise np.linalg.LinAlgError("could not make precision positive definite")


def toeplitz_glasso(S: np.ndarray, lambda_seg: float, omega: int = 1, rho: float = 1.0,
                    tol: float = 1e-5, max_iter: int = 1000,
                    init: np.ndarray | None = None) -> ToeplitzClusterModel:
    """Sparse block-Toeplitz precision by ADMM.

    Minimises ``-logdet(T) + tr(S T) + lambda_seg * sum_{i != j} |T_ij|`` with T
    constrained to symmetric block-Toeplitz structure (blocks of size
    ``len(S) // omega``). The returned matrix is the consensus variable, so the
    structure holds exactly; ``converged`` is False when ``max_iter`` ran out
    first.

    Parameters
    ----------
    S : (d, d) array
        Symmetric PSD covariance of the stacked windows.
    lambda_seg : float
        Off-diagonal L1 weight.
    omega : int
        Number of stacked time slices; ``d`` must be divisible by it.
    rho, tol, max_iter :
        ADMM penalty, stopping tolerance on max(primal, dual) residual
        (Frobenius norm), iteration cap.
    init : (d, d) array, optional
        Warm start for the consensus variable.
    """
    S = np.asarray(S, dtype=np.float64)
    _check_psd(S)
    d = S.shape[0]
    if d % omega:
        raise DataError(f"dimension {d} not divisible by omega={omega}")
    m = d // omega
    offdiag = ~np.eye(d, dtype=bool)
    thr = lambda_seg / rho

    if init is None:
        Z = np.diag(1.0 / np.diag(S))
    else:
        Z = np.array(init, dtype=np.float64)
    U = np.zeros_like(Z)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        ev, V = np.linalg.eigh(rho * (Z - U) - S)
        theta = (V * ((ev + np.sqrt(ev * ev + 4.0 * rho)) / (2.0 * rho))) @ V.T

        Z_old = Z
        A = toeplitz_project(theta + U, m, omega)
        Z = A.copy()
        Z[offdiag] = np.sign(A[offdiag]) * np.maximum(np.abs(A[offdiag]) - thr, 0.0)
        U = U + theta - Z

        r = np.linalg.norm(theta - Z)
        s = rho * np.linalg.norm(Z - Z_old)
        if max(r, s) < tol:
            converged = True
            break

    Z = _make_pd(0.5 * (Z + Z.T))
    return ToeplitzClusterModel.from_theta(Z, converged=converged, iterations=it)


def window_nll(X: np.ndarray, model: ToeplitzClusterModel) -> np.ndarray | float:
    """Zero-mean Gaussian negative log-likelihood of one window or a (n, d) stack."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    d = model.dim
    if X.shape[1] != d:
        raise DataError(f"window length {X.shape[1]} does not match model dimension {d}")
    quad = np.einsum("ij,jk,ik->i", X, model.theta, X)
    out = 0.5 * quad - 0.5 * model.logdet + 0.5 * d * LOG_2PI
    return float(out[0]) if single else out
