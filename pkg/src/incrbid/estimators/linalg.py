"""Iterative solvers and column standardization shared by the estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericError(RuntimeError):
    """A solver failed to converge or met an indefinite system."""


class IdentificationError(ValueError):
    """Instruments do not span the endogenous regressors."""


def pcg(A: np.ndarray, b: np.ndarray, *, tol: float = 1e-13, maxiter: int | None = None,
        x0: np.ndarray | None = None) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A`` by Jacobi-preconditioned CG.

    ``b`` may be a matrix, in which case each column is solved separately.
    Convergence is declared when ``||r|| <= tol * ||b||``; if the residual
    stalls above that, the iterate is accepted as long as ``||r|| <= 1e-7 ||b||``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim == 2:
        return np.column_stack([pcg(A, b[:, i], tol=tol, maxiter=maxiter) for i in range(b.shape[1])])
    n = len(b)
    if n == 0:
        return np.zeros(0)
    d = np.diag(A).copy()
    d[~(d > 0)] = 1.0
    minv = 1.0 / d
    maxiter = maxiter or max(1000, 50 * n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    best_x, best_r = x.copy(), np.inf
    # restart from the best iterate with a freshly computed residual to shed rounding drift
    for _ in range(3):
        r = b - A @ x
        z = minv * r
        p = z.copy()
        rz = r @ z
        for _ in range(maxiter):
            rn = np.linalg.norm(r)
            if rn < best_r:
                best_x, best_r = x.copy(), rn
            if rn <= tol * bnorm:
                return x
            Ap = A @ p
            pAp = p @ Ap
            if not pAp > 0:
                break
            alpha = rz / pAp
            x = x + alpha * p
            r = r - alpha * Ap
            z = minv * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        x = best_x.copy()
    true_r = np.linalg.norm(b - A @ best_x)
    if true_r <= 1e-7 * bnorm:
        return best_x
    raise NumericError(f"PCG did not converge: residual norm {true_r:.3e} (|b|={bnorm:.3e})")


def check_psd(A: np.ndarray, what: str = "Gram matrix", rtol: float = 1e-9) -> None:
    ev = np.linalg.eigvalsh((A + A.T) / 2)
    scale = max(float(np.max(np.abs(ev))), 1e-300)
    if ev[0] < -rtol * scale:
        raise NumericError(f"{what} is not positive semidefinite (min eigenvalue {ev[0]:.3e}, "
                           f"max {ev[-1]:.3e}); sample weights give an indefinite aggregate")


def weighted_mean(A: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (w @ A) / np.sum(w)


def find_intercept(X: np.ndarray) -> int | None:
    """Index of the first column identically equal to 1, if any."""
    if X.shape[0] == 0:
        return None
    for c in range(X.shape[1]):
        if np.all(X[:, c] == 1.0):
            return c
    return None


@dataclass
class Standardizer:
    """Affine column map ``X -> (X - mean) / scale`` leaving an intercept column untouched.

    Without an intercept nothing is centered (centering would add one).
    """

    mean: np.ndarray
    scale: np.ndarray
    intercept: int | None

    @classmethod
    def fit(cls, X: np.ndarray, w: np.ndarray) -> Standardizer:
        p = X.shape[1]
        icpt = find_intercept(X)
        sw = np.sum(w)
        mean = weighted_mean(X, w) if icpt is not None else np.zeros(p)
        if icpt is not None:
            mean[icpt] = 0.0
        var = (w @ (X - mean) ** 2) / sw
        scale = np.sqrt(np.where(var > 0, var, 0.0))
        tiny = 1e-12 * max(1.0, float(np.max(np.abs(X))) if X.size else 1.0)
        scale = np.where(np.isfinite(scale) & (scale > tiny), scale, 1.0)
        if icpt is not None:
            scale[icpt] = 1.0
        return cls(mean, scale, icpt)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def to_original(self, b: np.ndarray) -> np.ndarray:
        """Map standardized-space coefficients back to original units."""
        beta = b / self.scale
        if self.intercept is not None:
            beta[self.intercept] = b[self.intercept] - np.sum(self.mean * beta)
        return beta

    def penalty_mask(self) -> np.ndarray:
        m = np.ones(len(self.scale))
        if self.intercept is not None:
            m[self.intercept] = 0.0
        return m


def penalized_wls(X: np.ndarray, y: np.ndarray, w: np.ndarray, penalty: np.ndarray,
                  *, check: bool = True) -> np.ndarray:
    """Minimize ``sum w (y - X b)^2 / sum w + sum penalty * b_std^2`` and return ``b`` in original units.

    ``penalty`` holds one non-negative multiplier per column, applied to the
    standardized coefficient; the intercept column is never penalized.
    """
    st = Standardizer.fit(X, w)
    Xs = st.transform(X)
    sw = np.sum(w)
    if not sw > 0:
        raise NumericError(f"sum of sample weights must be positive, got {sw}")
    A = (Xs.T * w) @ Xs / sw
    if check:
        check_psd(A)
    A = A + np.diag(np.asarray(penalty, dtype=float) * st.penalty_mask())
    rhs = (Xs.T * w) @ y / sw
    return st.to_original(pcg(A, rhs))
