"""Sample covariance, vectorization, the real-valued lifted model and its noise covariance.

The lifted measurement stacks real and imaginary parts of the vectorized
covariance.  Its asymptotic noise covariance is the real lift of
C = (1/T) R^T kron R with the sample covariance standing in for R; both the
forward map and the inverse are applied through M x M congruences rather than
dense (2 M^2)^2 matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg


class NumericalError(RuntimeError):
    """Linear-algebra failure carrying diagnostics (condition numbers, iteration index)."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def vectorize_covariance(r: np.ndarray) -> np.ndarray:
    """Column-major stacking of a square matrix (vec of e_i e_j^T lands at j*M + i)."""
    r = np.asarray(r)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError("expected a square matrix")
    return r.reshape(-1, order="F")


def unvectorize(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vectorize_covariance`."""
    v = np.asarray(v)
    m = int(round(np.sqrt(v.shape[0])))
    if m * m != v.shape[0]:
        raise ValueError("vector length is not a perfect square")
    return v.reshape(m, m, order="F")


def identity_selector(m: int) -> np.ndarray:
    """vec(I_M): ones at the diagonal slots of the vectorized covariance."""
    return vectorize_covariance(np.eye(m))


def lift_vector(z: np.ndarray) -> np.ndarray:
    """Stack [Re(z); Im(z)]."""
    z = np.asarray(z, dtype=np.complex128)
    return np.concatenate([z.real, z.imag], axis=0)


class SpdFactor:
    """Cholesky factorization with an eigenvalue-floored fallback.

    Exactly rank-deficient inputs (noiseless covariances behind the pinned
    1e-8 ridge) produce systems conditioned far beyond float64; Cholesky then
    either fails or silently returns junk pivots.  When the pivot ratio
    signals that, the factorization falls back to an eigendecomposition with
    the spectrum floored at max(eig) * 1e-14 and sets ``regularized``.
    """

    def __init__(self, a: np.ndarray, cond_limit: float = 1e15):
        cho = None
        ok = False
        try:
            cho = scipy.linalg.cho_factor(a, lower=True)
            d = np.diag(cho[0])
            ok = bool(np.all(np.isfinite(d)) and np.min(d) > 0
                      and (np.min(d) / np.max(d)) ** 2 > 1.0 / cond_limit)
        except scipy.linalg.LinAlgError:
            ok = False
        if ok:
            self._cho = cho
            self._eig = None
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
            self.regularized = False
        else:
            evals, evecs = np.linalg.eigh(a)
            if not np.all(np.isfinite(evals)) or evals[-1] <= 0:
                raise NumericalError("SPD factorization failed",
                                     extremal_eigenvalues=[float(evals[0]), float(evals[-1])])
            evals = np.clip(evals, evals[-1] * 1e-14, None)
            self._cho = None
            self._eig = (evals, evecs)
            self.logdet = float(np.sum(np.log(evals)))
            self.regularized = True

    def solve(self, x: np.ndarray) -> np.ndarray:
        if self._cho is not None:
            return scipy.linalg.cho_solve(self._cho, x)
        evals, evecs = self._eig
        proj = evecs.T @ x
        scaled = proj / evals if proj.ndim == 1 else proj / evals[:, None]
        return evecs @ scaled


@dataclass(frozen=True)
class CovarianceData:
    """Sample covariance and its column-major vectorization."""

    r_hat_matrix: np.ndarray
    r_hat_vec: np.ndarray
    snapshots: int

    @property
    def num_sensors(self) -> int:
        return self.r_hat_matrix.shape[0]


def sample_covariance(snapshots) -> CovarianceData:
    """(1/T) sum_t y(t) y(t)^H, Hermitian-enforced by averaging with its adjoint."""
    y = snapshots.data
    t = y.shape[1]
    if t < 1:
        raise ValueError("at least one snapshot is required")
    r = y @ y.conj().T / t
    r = 0.5 * (r + r.conj().T)
    return CovarianceData(r, vectorize_covariance(r), t)


def covariance_from_matrix(r: np.ndarray, snapshots: int) -> CovarianceData:
    """Wrap a known covariance matrix (e.g. an exact model covariance) as CovarianceData."""
    r = np.asarray(r, dtype=np.complex128)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError("covariance must be square")
    if snapshots < 1:
        raise ValueError("snapshots must be >= 1")
    r = 0.5 * (r + r.conj().T)
    return CovarianceData(r, vectorize_covariance(r), int(snapshots))


class NoiseCovariance:
    """The lifted noise covariance R-bar and its inverse, applied via M x M factors.

    For x = [x1; x2], R-bar x = (1/(2T)) [Re; Im](vec(R Z R)) with
    Z = unvec(x1 + j x2), and R-bar^{-1} x = 2T [Re; Im](vec(R^{-1} Z R^{-1})).
    A numerically singular sample covariance is ridge-regularized with
    eps * tr(R)/M * I and flagged in ``diagnostics``.
    """

    def __init__(self, r_hat: np.ndarray, snapshots: int, ridge_eps: float = 1e-8):
        r = np.asarray(r_hat, dtype=np.complex128)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("covariance must be square")
        if snapshots < 1:
            raise ValueError("snapshots must be >= 1")
        r = 0.5 * (r + r.conj().T)
        m = r.shape[0]
        trace = float(np.trace(r).real)
        evals = np.linalg.eigvalsh(r)
        regularized = False
        if evals[0] <= 1e-12 * max(trace, 0.0) / m:
            r = r + (ridge_eps * trace / m) * np.eye(m)
            regularized = True
            evals = evals + ridge_eps * trace / m
        try:
            cho = scipy.linalg.cho_factor(r, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError("sample covariance is not positive definite",
                                 eigenvalues=evals.tolist()) from exc
        self.m = m
        self.snapshots = int(snapshots)
        self.r_hat = r
        self.r_inv = scipy.linalg.cho_solve(cho, np.eye(m, dtype=np.complex128))
        self.r_inv = 0.5 * (self.r_inv + self.r_inv.conj().T)
        self._logdet_rhat = 2.0 * float(np.sum(np.log(np.real(np.diag(cho[0])))))
        self.diagnostics = {
            "regularized": regularized,
            "condition": float(evals[-1] / evals[0]) if evals[0] > 0 else np.inf,
        }
        self._dense = None

    def _congruence(self, x: np.ndarray, mat: np.ndarray) -> np.ndarray:
        one_dim = x.ndim == 1
        xv = np.asarray(x, dtype=float)
        xv = xv[:, None] if one_dim else xv
        m, m2 = self.m, self.m * self.m
        if xv.shape[0] != 2 * m2:
            raise ValueError(f"expected vectors of length {2 * m2}")
        z = xv[:m2] + 1j * xv[m2:]
        zm = z.reshape(m, m, -1, order="F").transpose(2, 0, 1)
        w = np.matmul(np.matmul(mat, zm), mat)
        wv = w.transpose(1, 2, 0).reshape(m2, -1, order="F")
        out = np.concatenate([wv.real, wv.imag], axis=0)
        return out[:, 0] if one_dim else out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """R-bar x for real x of length 2 M^2 (or a stack of such columns)."""
        return self._congruence(x, self.r_hat) / (2.0 * self.snapshots)

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        """R-bar^{-1} x, using only the M x M inverse of the sample covariance."""
        return (2.0 * self.snapshots) * self._congruence(x, self.r_inv)

    def logdet(self) -> float:
        m2 = self.m * self.m
        return (-2.0 * m2 * np.log(2.0) - 2.0 * m2 * np.log(self.snapshots)
                + 4.0 * self.m * self._logdet_rhat)

    def dense(self) -> np.ndarray:
        """The full 2 M^2 x 2 M^2 matrix (cached; used by the direct Sigma path)."""
        if self._dense is None:
            c = np.kron(self.r_hat.T, self.r_hat) / self.snapshots
            self._dense = 0.5 * np.block([[c.real, -c.imag], [c.imag, c.real]])
        return self._dense


def apply_noise_covariance_inverse(cov: CovarianceData, x: np.ndarray,
                                   noise: NoiseCovariance | None = None) -> np.ndarray:
    """Convenience wrapper; build the operator once via NoiseCovariance for hot loops."""
    op = noise if noise is not None else NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
    return op.apply_inverse(x)


@dataclass(frozen=True)
class RealModel:
    """Lifted measurement model: r_bar = [Re(r_hat) - sigma_n2 vec(I); Im(r_hat)], B_bar = [Re(B); Im(B)]."""

    r_bar: np.ndarray
    b_bar: np.ndarray
    ones_n: np.ndarray
    noise: NoiseCovariance
    cov: CovarianceData
    sigma_n2: float
    dictionary: np.ndarray
    geometry: object | None = None

    @property
    def num_atoms(self) -> int:
        return self.b_bar.shape[1]

    def with_sigma(self, sigma_n2: float) -> "RealModel":
        r_bar = np.concatenate([self.cov.r_hat_vec.real - sigma_n2 * self.ones_n,
                                self.cov.r_hat_vec.imag])
        return replace(self, r_bar=r_bar, sigma_n2=float(sigma_n2))

    def with_dictionary(self, dictionary: np.ndarray) -> "RealModel":
        b = np.asarray(dictionary, dtype=np.complex128)
        return replace(self, dictionary=b,
                       b_bar=np.concatenate([b.real, b.imag], axis=0))


def build_real_model(cov: CovarianceData, sigma_n2: float, dictionary: np.ndarray,
                     noise: NoiseCovariance | None = None,
                     geometry=None) -> RealModel:
    """Assemble the real-valued model for a given noise level and dictionary."""
    if sigma_n2 < 0:
        raise ValueError("sigma_n2 must be nonnegative")
    b = np.asarray(dictionary, dtype=np.complex128)
    if b.ndim != 2 or b.shape[0] != cov.num_sensors ** 2:
        raise ValueError("dictionary rows must equal M^2 of the covariance")
    ones = identity_selector(cov.num_sensors)
    r_bar = np.concatenate([cov.r_hat_vec.real - sigma_n2 * ones, cov.r_hat_vec.imag])
    b_bar = np.concatenate([b.real, b.imag], axis=0)
    if noise is None:
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
    return RealModel(r_bar=r_bar, b_bar=b_bar, ones_n=ones, noise=noise, cov=cov,
                     sigma_n2=float(sigma_n2), dictionary=b, geometry=geometry)


class SigmaFactor:
    """Factorization of Sigma = B_bar diag(gamma) B_bar^T + R_bar.

    ``method='direct'`` forms the dense 2 M^2 matrix and Cholesky-factors it;
    ``method='woodbury'`` keeps Sigma implicit and inverts only an
    (active-support)-sized inner matrix.  Both expose solves, the log
    determinant and the per-column weights b_k^T Sigma^{-1} b_k.
    """

    def __init__(self, b_bar: np.ndarray, gamma: np.ndarray, noise: NoiseCovariance,
                 method: str = "auto"):
        gamma = np.asarray(gamma, dtype=float)
        if gamma.ndim != 1 or gamma.shape[0] != b_bar.shape[1]:
            raise ValueError("gamma must have one entry per dictionary column")
        if not np.all(np.isfinite(gamma)):
            raise ValueError("gamma must be finite")
        if np.any(gamma < 0):
            raise ValueError("gamma must be nonnegative")
        if method == "auto":
            method = "woodbury" if int(np.sum(gamma > 0)) < b_bar.shape[0] else "direct"
        if method not in ("direct", "woodbury"):
            raise ValueError(f"unknown sigma factorization method {method!r}")
        self.method = method
        self._noise = noise
        if method == "direct":
            sig = (b_bar * gamma) @ b_bar.T + noise.dense()
            self._factor = SpdFactor(0.5 * (sig + sig.T))
            self._logdet = self._factor.logdet
        else:
            pos = gamma > 0
            self._npos = int(np.sum(pos))
            if self._npos:
                bp = b_bar[:, pos]
                s = np.sqrt(gamma[pos])
                self._u = noise.apply_inverse(bp) * s
                inner = np.eye(self._npos) + (bp * s).T @ self._u
                self._factor = SpdFactor(0.5 * (inner + inner.T))
                self._logdet = noise.logdet() + self._factor.logdet
            else:
                self._u = None
                self._factor = None
                self._logdet = noise.logdet()

    @property
    def regularized(self) -> bool:
        return bool(self._factor is not None and self._factor.regularized)

    def solve(self, x: np.ndarray) -> np.ndarray:
        """Sigma^{-1} x for a vector or a stack of columns."""
        if self.method == "direct":
            return self._factor.solve(x)
        y = self._noise.apply_inverse(x)
        if self._u is None:
            return y
        return y - self._u @ self._factor.solve(self._u.T @ x)

    def logdet(self) -> float:
        return self._logdet

    def column_weights(self, b_bar: np.ndarray) -> np.ndarray:
        """diag(B_bar^T Sigma^{-1} B_bar), one weight per column."""
        return np.einsum("ij,ij->j", b_bar, self.solve(b_bar))


def assemble_sigma(model: RealModel, gamma: np.ndarray, method: str = "auto") -> SigmaFactor:
    """Factor Sigma for the model's dictionary and the given hyper-variances."""
    return SigmaFactor(model.b_bar, gamma, model.noise, method=method)
