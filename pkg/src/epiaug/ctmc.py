"""Rate matrices and transition probabilities for single-subject chains.

A subject embedded in a fixed environment with I' infectious neighbours
moves as a homogeneous CTMC whose rate matrix depends on the model and on
I'.  Transition probability matrices (TPMs) are computed from a cached
eigendecomposition: real eigensystems use P = T exp(dt*V) T^{-1} with V
diagonal; complex pairs are handled in real canonical form, where each
conjugate pair (alpha +- i omega) contributes a 2x2 block whose exponential
is exp(alpha*dt) times a rotation by omega*dt.  Near-defective matrices
(eigenvalue gap below a relative tolerance, or a basis too ill-conditioned
to reconstruct the input) are routed to a scaled-and-squared truncated
power series instead.

Everything here works on plain float64 arrays; negative TPM entries from
roundoff are clamped at zero and rows renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelSpec, ParameterVector

__all__ = [
    "DefectiveRateMatrix",
    "EigenSystem",
    "subject_rate_matrix",
    "validate_rate_matrix",
    "eigen_decompose",
    "transition_matrix",
    "transition_matrix_series",
    "tpm_product",
    "homogeneous_path_loglik",
    "DecompositionCache",
]

GAP_TOL = 1e-8  # relative eigenvalue gap below which we refuse to diagonalize
RECON_TOL = 1e-10  # max-norm reconstruction tolerance, relative
CLAMP_FLOOR = -1e-9  # TPM entries below this indicate a real problem
SERIES_TERMS = 30


class DefectiveRateMatrix(ValueError):
    """Eigendecomposition is unreliable; use the series method."""


def subject_rate_matrix(model: ModelSpec, theta: ParameterVector, i_excluded: int) -> np.ndarray:
    """Rate matrix of one subject given I' infectious others."""
    if i_excluded < 0:
        raise ValueError("excluded prevalence must be nonnegative")
    n = model.n_states
    q = np.zeros((n, n))
    for t in model.transitions:
        rate = theta.beta * i_excluded if t.param == "beta" else theta.rate(t.param)
        q[t.src, t.dst] = rate
        q[t.src, t.src] -= rate
    return q


def validate_rate_matrix(q: np.ndarray, tol: float = 1e-12) -> None:
    q = np.asarray(q)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError("rate matrix must be square")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        raise ValueError("off-diagonal rates must be nonnegative")
    if np.any(np.abs(q.sum(axis=1)) > tol * max(1.0, np.abs(q).max())):
        raise ValueError("rate matrix rows must sum to zero")


@dataclass(frozen=True)
class EigenSystem:
    """Real canonical eigendecomposition Q = basis @ V @ basis_inv.

    For real eigenvalues, V is diagonal.  Each complex conjugate pair
    occupies two adjacent canonical columns: alpha holds the shared real
    part, omega the signed imaginary part (+w then -w), and partner the
    index of the other column in the pair (partner[k] == k for real
    columns).
    """

    alpha: np.ndarray
    omega: np.ndarray
    partner: np.ndarray
    basis: np.ndarray
    basis_inv: np.ndarray

    @property
    def has_complex(self) -> bool:
        return bool(np.any(self.omega != 0.0))

    def middle_factor(self, dt: float) -> np.ndarray:
        """exp(dt * V) in the real canonical basis."""
        n = self.alpha.size
        damp = np.exp(self.alpha * dt)
        e = np.zeros((n, n))
        idx = np.arange(n)
        e[idx, self.partner] = damp * np.sin(self.omega * dt)
        e[idx, idx] = damp * np.cos(self.omega * dt)
        return e


def eigen_decompose(q: np.ndarray) -> EigenSystem:
    """Decompose a rate matrix, or raise DefectiveRateMatrix.

    Exactly repeated eigenvalues are accepted when the basis still
    reconstructs the input (semisimple case); eigenvalues that are close
    but not equal signal a near-defective matrix and are refused.
    """
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[0]
    w, v = np.linalg.eig(q)

    scale = max(1.0, float(np.abs(w).max()))
    for i in range(n):
        for j in range(i + 1, n):
            gap = abs(w[i] - w[j])
            if 0.0 < gap < GAP_TOL * scale:
                raise DefectiveRateMatrix(
                    f"eigenvalue gap {gap:.3e} below {GAP_TOL:.0e} relative"
                )

    alpha = np.empty(n)
    omega = np.zeros(n)
    partner = np.arange(n)
    basis = np.empty((n, n))
    col = 0
    used = np.zeros(n, dtype=bool)
    for k in range(n):
        if used[k]:
            continue
        lam, vec = w[k], v[:, k]
        if abs(lam.imag) <= 1e-14 * scale:
            alpha[col] = lam.real
            re, im = vec.real, vec.imag
            # a real eigenvalue's eigenvector may carry a complex phase
            basis[:, col] = re if np.abs(re).max() >= np.abs(im).max() else im
            used[k] = True
            col += 1
            continue
        # find the conjugate partner
        mate = None
        for m in range(k + 1, n):
            if not used[m] and abs(w[m] - lam.conjugate()) <= 1e-10 * scale:
                mate = m
                break
        if mate is None:
            raise DefectiveRateMatrix("unpaired complex eigenvalue")
        if lam.imag < 0:
            lam, vec = w[mate], v[:, mate]
        alpha[col] = alpha[col + 1] = lam.real
        omega[col], omega[col + 1] = lam.imag, -lam.imag
        partner[col], partner[col + 1] = col + 1, col
        basis[:, col] = vec.real
        basis[:, col + 1] = vec.imag
        used[k] = used[mate] = True
        col += 2

    try:
        basis_inv = np.linalg.inv(basis)
    except np.linalg.LinAlgError:
        raise DefectiveRateMatrix("eigenvector basis is singular") from None

    eig = EigenSystem(alpha, omega, partner, basis, basis_inv)
    vmat = np.zeros((n, n))
    idx = np.arange(n)
    vmat[idx, eig.partner] = eig.omega
    vmat[idx, idx] = eig.alpha
    recon = basis @ vmat @ basis_inv
    err = np.abs(recon - q).max()
    if err > RECON_TOL * max(1.0, np.abs(q).max()):
        raise DefectiveRateMatrix(f"reconstruction error {err:.3e}")
    return eig


def _finalize_tpm(p: np.ndarray) -> np.ndarray:
    """Clamp roundoff negatives and renormalize rows in place."""
    low = p.min()
    if low < CLAMP_FLOOR:
        raise FloatingPointError(f"TPM entry {low:.3e} below clamp floor")
    np.maximum(p, 0.0, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def transition_matrix(eig: EigenSystem, dt: float) -> np.ndarray:
    """TPM over an interval of length dt from a cached decomposition."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if dt == 0.0:
        return np.eye(eig.alpha.size)
    p = eig.basis @ eig.middle_factor(dt) @ eig.basis_inv
    return _finalize_tpm(p)


def transition_matrix_series(q: np.ndarray, dt: float, terms: int = SERIES_TERMS) -> np.ndarray:
    """Scaled-and-squared truncated power series exp(dt*Q).

    Fallback for near-defective rate matrices; exact enough (< 1e-12) for
    the small matrices used here once dt*Q is scaled below unit norm.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[0]
    a = q * dt
    norm = np.abs(a).sum(axis=1).max()
    s = int(np.ceil(np.log2(norm))) + 1 if norm > 1.0 else 0
    b = a / (2.0**s)
    p = np.eye(n)
    term = np.eye(n)
    for k in range(1, terms):
        term = term @ b / k
        p = p + term
    for _ in range(s):
        p = p @ p
    return _finalize_tpm(p)


def tpm_product(tpms: np.ndarray) -> np.ndarray:
    """Ordered product of a stack of TPMs (earliest interval first)."""
    tpms = np.asarray(tpms)
    if tpms.ndim != 3 or tpms.shape[0] == 0:
        raise ValueError("need a nonempty (m, n, n) stack")
    out = tpms[0].copy()
    for k in range(1, tpms.shape[0]):
        out = out @ tpms[k]
    return out


def homogeneous_path_loglik(
    initial_state: int,
    jump_times: np.ndarray,
    jump_to: np.ndarray,
    duration: float,
    q: np.ndarray,
) -> float:
    """Log density of a fully observed CTMC path on [0, duration].

    jump_times are offsets from the interval start, strictly increasing and
    strictly inside (0, duration).  A jump through a zero rate gives -inf.
    """
    jump_times = np.asarray(jump_times, dtype=np.float64)
    jump_to = np.asarray(jump_to, dtype=np.int64)
    ll = 0.0
    state = int(initial_state)
    t_prev = 0.0
    for t, dst in zip(jump_times, jump_to):
        if not 0.0 < t < duration or t <= t_prev:
            raise ValueError("jump times must be increasing, inside (0, duration)")
        rate = q[state, dst]
        if rate <= 0.0:
            return -np.inf
        ll += np.log(rate) - (t - t_prev) * (-q[state, state])
        state = int(dst)
        t_prev = t
    ll -= (duration - t_prev) * (-q[state, state])
    return float(ll)


class DecompositionCache:
    """Eigendecompositions of subject rate matrices, keyed by I'.

    Valid for one (model, theta) pair at a time; set_theta empties it.
    Matrices that cannot be diagonalized reliably are flagged and their
    TPMs computed by the series method instead.
    """

    def __init__(self, model: ModelSpec, theta: ParameterVector, max_excluded: int = 64):
        self.model = model
        self.n = model.n_states
        self._grow(max_excluded + 1)
        self.theta = theta
        self._objects: dict[int, EigenSystem] = {}
        self._rate_mats: dict[int, np.ndarray] = {}

    def _grow(self, cap: int):
        n = self.n
        self._have = np.zeros(cap, dtype=bool)
        self._fallback = np.zeros(cap, dtype=bool)
        self._alpha = np.zeros((cap, n))
        self._omega = np.zeros((cap, n))
        self._partner = np.tile(np.arange(n), (cap, 1))
        self._basis = np.zeros((cap, n, n))
        self._basis_inv = np.zeros((cap, n, n))

    def set_theta(self, theta: ParameterVector) -> None:
        """Invalidate everything; rates changed."""
        self.theta = theta
        self._have[:] = False
        self._fallback[:] = False
        self._objects.clear()
        self._rate_mats.clear()

    @property
    def size(self) -> int:
        return int(self._have.sum())

    def rate_matrix(self, i_excluded: int) -> np.ndarray:
        got = self._rate_mats.get(i_excluded)
        if got is None:
            got = subject_rate_matrix(self.model, self.theta, i_excluded)
            self._rate_mats[i_excluded] = got
        return got

    def _ensure(self, i_excluded: int) -> None:
        if i_excluded >= self._have.size:
            old = (self._have, self._fallback, self._alpha, self._omega,
                   self._partner, self._basis, self._basis_inv)
            k = old[0].size
            self._grow(max(i_excluded + 1, 2 * k))
            self._have[:k], self._fallback[:k] = old[0], old[1]
            self._alpha[:k], self._omega[:k], self._partner[:k] = old[2], old[3], old[4]
            self._basis[:k], self._basis_inv[:k] = old[5], old[6]
        if self._have[i_excluded]:
            return
        q = self.rate_matrix(i_excluded)
        try:
            eig = eigen_decompose(q)
        except DefectiveRateMatrix:
            self._fallback[i_excluded] = True
        else:
            self._alpha[i_excluded] = eig.alpha
            self._omega[i_excluded] = eig.omega
            self._partner[i_excluded] = eig.partner
            self._basis[i_excluded] = eig.basis
            self._basis_inv[i_excluded] = eig.basis_inv
            self._objects[i_excluded] = eig
        self._have[i_excluded] = True

    def get(self, i_excluded: int) -> EigenSystem | None:
        """Cached EigenSystem, or None when the series fallback applies."""
        self._ensure(i_excluded)
        return self._objects.get(i_excluded)

    def transition(self, i_excluded: int, dt: float) -> np.ndarray:
        eig = self.get(i_excluded)
        if eig is None:
            return transition_matrix_series(self.rate_matrix(i_excluded), dt)
        return transition_matrix(eig, dt)

    def tpms(self, i_excluded: np.ndarray, dts: np.ndarray) -> np.ndarray:
        """TPM stack for a partition: interval m spans dts[m] with I' = i_excluded[m]."""
        i_excluded = np.asarray(i_excluded, dtype=np.int64)
        dts = np.asarray(dts, dtype=np.float64)
        uniq = np.unique(i_excluded)
        if uniq.size and int(uniq[-1]) >= self._have.size:
            self._ensure(int(uniq[-1]))  # grows the storage in one step
        for i in uniq[~self._have[uniq]]:
            self._ensure(int(i))

        n = self.n
        m = i_excluded.size
        alpha = self._alpha[i_excluded]  # (m, n)
        omega = self._omega[i_excluded]
        damp = np.exp(alpha * dts[:, None])
        if not omega.any():
            # all-real spectra: the middle factor is plain diagonal
            p = (self._basis[i_excluded] * damp[:, None, :]) @ self._basis_inv[i_excluded]
        else:
            partner = self._partner[i_excluded]
            mid = np.zeros((m, n, n))
            rows = np.arange(m)[:, None]
            idx = np.arange(n)[None, :]
            mid[rows, idx, partner] = damp * np.sin(omega * dts[:, None])
            mid[rows, idx, idx] = damp * np.cos(omega * dts[:, None])
            p = self._basis[i_excluded] @ mid @ self._basis_inv[i_excluded]

        bad = self._fallback[i_excluded]
        if np.any(bad):
            for k in np.nonzero(bad)[0]:
                p[k] = transition_matrix_series(self.rate_matrix(int(i_excluded[k])), dts[k])
        return _finalize_tpm(p)
