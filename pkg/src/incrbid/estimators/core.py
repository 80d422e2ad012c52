"""Weighted linear estimators: ridge, control-function 2SLS, penalized GMM and the Hausman test.

All estimators minimize weighted criteria normalized by ``sum(Wt)``; sample
weights may be negative row-wise as long as aggregate Gram matrices stay
positive semidefinite.  Penalties act on standardized coefficients and never
on the intercept; reported coefficients are always in original units.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .linalg import IdentificationError, NumericError, Standardizer, check_psd, pcg, penalized_wls

IDENTITY = "Identity"
DIAGONAL_TWO_STEP = "DiagonalTwoStep"
WEIGHTINGS = (IDENTITY, DIAGONAL_TWO_STEP)


@dataclass
class DesignMatrices:
    """Aligned regression inputs.

    ``X`` holds every regressor; ``endogenous`` flags the columns that need
    instruments.  ``Z`` holds the excluded instruments followed by the
    exogenous ``X`` columns.  ``groups`` labels rows sharing one bootstrap
    weight (users).
    """

    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    Wt: np.ndarray
    endogenous: np.ndarray
    x_keys: tuple = ()
    z_keys: tuple = ()
    groups: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        self.Wt = np.asarray(self.Wt, dtype=float).ravel()
        self.endogenous = np.asarray(self.endogenous, dtype=bool).ravel()
        n = len(self.Y)
        if self.X.shape[0] != n or self.Z.shape[0] != n or len(self.Wt) != n:
            raise ValueError("X, Z, Y and Wt must have the same number of rows")
        if len(self.endogenous) != self.X.shape[1]:
            raise ValueError("endogenous mask must have one entry per X column")
        if self.groups is not None and len(self.groups) != n:
            raise ValueError("groups must have one entry per row")
        for name in ("X", "Z", "Y", "Wt"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if not self.x_keys:
            self.x_keys = tuple(f"x{i}" for i in range(self.X.shape[1]))
        if not self.z_keys:
            self.z_keys = tuple(f"z{i}" for i in range(self.Z.shape[1]))
        if self.Z.shape[1] < self.X.shape[1]:
            raise IdentificationError(
                f"{self.Z.shape[1]} instrument columns cannot identify {self.X.shape[1]} regressors")

    @classmethod
    def build(cls, y, exog, endog=None, instruments=None, weights=None, groups=None,
              exog_keys: Sequence = (), endog_keys: Sequence = (), instrument_keys: Sequence = ()):
        """Assemble ``X = [exog, endog]`` and ``Z = [instruments, exog]``."""
        y = np.asarray(y, dtype=float).ravel()
        n = len(y)
        exog = np.zeros((n, 0)) if exog is None else np.asarray(exog, dtype=float).reshape(n, -1)
        endog = np.zeros((n, 0)) if endog is None else np.asarray(endog, dtype=float).reshape(n, -1)
        inst = np.zeros((n, 0)) if instruments is None else np.asarray(instruments, dtype=float).reshape(n, -1)
        X = np.column_stack([exog, endog])
        Z = np.column_stack([inst, exog])
        mask = np.r_[np.zeros(exog.shape[1], bool), np.ones(endog.shape[1], bool)]
        xk = tuple(exog_keys) + tuple(endog_keys)
        zk = tuple(instrument_keys) + tuple(exog_keys)
        w = np.ones(n) if weights is None else weights
        return cls(X, Z, y, w, mask, xk if len(xk) == X.shape[1] else (),
                   zk if len(zk) == Z.shape[1] else (), groups)

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def take(self, rows) -> DesignMatrices:
        rows = np.asarray(rows)
        return replace(self, X=self.X[rows], Z=self.Z[rows], Y=self.Y[rows], Wt=self.Wt[rows],
                       groups=None if self.groups is None else self.groups[rows])

    def with_y(self, y: np.ndarray) -> DesignMatrices:
        return replace(self, Y=np.asarray(y, dtype=float))

    def with_weights(self, w: np.ndarray) -> DesignMatrices:
        return replace(self, Wt=np.asarray(w, dtype=float))

    def residual(self, beta: np.ndarray) -> np.ndarray:
        return self.Y - self.X @ beta


def _lambda(lam: float) -> float:
    lam = float(lam)
    if not lam >= 0:
        raise ValueError(f"penalty must be non-negative, got {lam}")
    return lam


def ols(design: DesignMatrices) -> np.ndarray:
    return penalized_wls(design.X, design.Y, design.Wt, np.zeros(design.p))


def fit_ridge(design: DesignMatrices, lam: float) -> np.ndarray:
    """Weighted ridge on standardized features; the intercept is unpenalized."""
    lam = _lambda(lam)
    return penalized_wls(design.X, design.Y, design.Wt, np.full(design.p, lam))


def weighted_r2(design: DesignMatrices, beta: np.ndarray) -> float:
    w = design.Wt
    e = design.residual(beta)
    ybar = np.sum(w * design.Y) / np.sum(w)
    tss = np.sum(w * (design.Y - ybar) ** 2)
    return float(1.0 - np.sum(w * e * e) / tss) if tss > 0 else 0.0


def weighted_mse(design: DesignMatrices, beta: np.ndarray) -> float:
    e = design.residual(beta)
    return float(np.sum(design.Wt * e * e) / np.sum(design.Wt))


def first_stage(design: DesignMatrices) -> tuple[np.ndarray, np.ndarray]:
    """Regress each endogenous column on ``Z``; returns ``(pi, vhat)``."""
    Xe = design.X[:, design.endogenous]
    if Xe.shape[1] == 0:
        return np.zeros((design.Z.shape[1], 0)), np.zeros((design.n, 0))
    st = Standardizer.fit(design.Z, design.Wt)
    Zs = st.transform(design.Z)
    sw = np.sum(design.Wt)
    A = (Zs.T * design.Wt) @ Zs / sw
    check_psd(A, "instrument Gram matrix")
    if np.linalg.matrix_rank(A, tol=1e-10 * max(1.0, np.abs(A).max())) < A.shape[0]:
        raise IdentificationError("instrument matrix is rank deficient")
    pis = pcg(A, (Zs.T * design.Wt) @ Xe / sw)
    if pis.ndim == 1:
        pis = pis[:, None]
    pi = np.column_stack([st.to_original(pis[:, i].copy()) for i in range(pis.shape[1])])
    vhat = Xe - design.Z @ pi
    # every regressor must be spanned by the projected design
    Xhat = design.X.copy()
    Xhat[:, design.endogenous] = design.Z @ pi
    sx = Standardizer.fit(Xhat, design.Wt)
    H = sx.transform(Xhat)
    G = (H.T * design.Wt) @ H / sw
    if np.linalg.matrix_rank(G, tol=1e-10 * max(1.0, np.abs(G).max())) < design.p:
        raise IdentificationError("first stage is rank deficient: instruments do not move every endogenous column")
    return pi, vhat


def control_function_2sls(design: DesignMatrices, lambda_v: float) -> tuple[np.ndarray, np.ndarray]:
    """Regress ``Y`` on ``[X, vhat]`` penalizing only the control-function columns.

    ``lambda_v = 0`` gives 2SLS; ``lambda_v -> inf`` gives OLS.
    Returns ``(beta, beta_vhat)``.
    """
    lam = _lambda(lambda_v)
    _, vhat = first_stage(design)
    k = vhat.shape[1]
    # a control that vanishes (instrument == regressor) carries no information
    aw = np.abs(design.Wt)
    v_norm = np.sqrt(aw @ vhat ** 2)
    x_norm = np.sqrt(aw @ design.X[:, design.endogenous] ** 2)
    live = v_norm > 1e-10 * np.maximum(x_norm, 1e-300)
    beta_v = np.zeros(k)
    XA = np.column_stack([design.X, vhat[:, live]])
    pen = np.r_[np.zeros(design.p), np.full(int(live.sum()), lam)]
    b = penalized_wls(XA, design.Y, design.Wt, pen)
    beta_v[live] = b[design.p:]
    return b[: design.p], beta_v


def two_sls(design: DesignMatrices) -> np.ndarray:
    return control_function_2sls(design, 0.0)[0]


@dataclass
class GMMResult:
    beta: np.ndarray
    objective: float
    penalty: float
    omega: np.ndarray = field(repr=False)
    z_standardizer: Standardizer = field(repr=False)


def _moments(Zs: np.ndarray, w: np.ndarray, e: np.ndarray) -> np.ndarray:
    return (Zs.T * w) @ e / np.sum(w)


def gmm_iv(design: DesignMatrices, lam: float = 0.0, weighting: str = DIAGONAL_TWO_STEP) -> GMMResult:
    """Penalized linear GMM with moments ``Z'W(Y - X b) / sum(W)``.

    ``Identity`` uses unit weights on standardized instruments.
    ``DiagonalTwoStep`` solves once with identity weights, then re-solves
    weighting each moment by the inverse of its estimated variance.
    The normal equations are solved by preconditioned CG.
    """
    lam = _lambda(lam)
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    w = design.Wt
    sw = np.sum(w)
    if not sw > 0:
        raise NumericError(f"sum of sample weights must be positive, got {sw}")
    sx = Standardizer.fit(design.X, w)
    sz = Standardizer.fit(design.Z, w)
    Xs, Zs = sx.transform(design.X), sz.transform(design.Z)
    check_psd((Zs.T * w) @ Zs / sw, "instrument Gram matrix")
    G = (Zs.T * w) @ Xs / sw
    h = (Zs.T * w) @ design.Y / sw
    if lam == 0 and np.linalg.matrix_rank(G, tol=1e-10 * max(1.0, np.abs(G).max())) < design.p:
        raise IdentificationError("moment Jacobian is rank deficient: model is not identified")
    pen = lam * sx.penalty_mask()

    def solve(omega_inv: np.ndarray) -> np.ndarray:
        Gw = G.T * omega_inv
        return pcg(Gw @ G + np.diag(pen), Gw @ h)

    omega = np.ones(Zs.shape[1])
    b = solve(1.0 / omega)
    if weighting == DIAGONAL_TWO_STEP:
        e = design.Y - Xs @ b
        omega = (w * w) @ (Zs * e[:, None]) ** 2 / sw ** 2
        floor = 1e-12 * max(float(omega.max()), 1e-300)
        omega = np.maximum(omega, floor)
        b = solve(1.0 / omega)
    g = h - G @ b
    obj = float(np.sum(g * g / omega))
    return GMMResult(sx.to_original(b), obj, float(np.sum(pen * b * b)), omega, sz)


def moment_objective(design: DesignMatrices, beta: np.ndarray, z_standardizer: Standardizer | None = None,
                     omega: np.ndarray | None = None) -> float:
    """``g' diag(omega)^-1 g`` for ``g = Zs'W(Y - X beta)/sum(W)``; identity weighting by default."""
    sz = z_standardizer or Standardizer.fit(design.Z, design.Wt)
    g = _moments(sz.transform(design.Z), design.Wt, design.residual(beta))
    om = np.ones_like(g) if omega is None else omega
    return float(np.sum(g * g / om))


@dataclass(frozen=True)
class HausmanResult:
    H: float
    dof: int
    p_value: float


def hausman_statistic(beta_iv, beta_ols, var_iv, var_ols, *, rtol: float = 1e-10) -> HausmanResult:
    """Hausman contrast with an eigen-clipped pseudo-inverse of ``Var_iv - Var_ols``."""
    d = np.atleast_1d(np.asarray(beta_iv, dtype=float) - np.asarray(beta_ols, dtype=float))
    Vi = np.atleast_2d(np.asarray(var_iv, dtype=float))
    Vo = np.atleast_2d(np.asarray(var_ols, dtype=float))
    k = len(d)
    if Vi.shape != (k, k) or Vo.shape != (k, k) or np.shape(beta_ols) != np.shape(beta_iv):
        raise ValueError("dimension mismatch between coefficient vectors and variance matrices")
    D = Vi - Vo
    ev, U = np.linalg.eigh((D + D.T) / 2)
    top = float(ev.max()) if k else 0.0
    keep = ev > rtol * max(top, 0.0) if top > 0 else np.zeros(k, dtype=bool)
    dof = int(np.sum(keep))
    if dof == 0:
        return HausmanResult(0.0, 0, 1.0)
    proj = U[:, keep].T @ d
    H = float(np.sum(proj * proj / ev[keep]))
    return HausmanResult(H, dof, float(stats.chi2.sf(H, dof)))
