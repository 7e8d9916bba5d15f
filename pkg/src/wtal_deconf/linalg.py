"""Small dense linear-algebra kernels used by the generator and the oracles.

The Jacobi eigensolver is deliberately self-contained: it serves as the
independent reference against which the gradient-trained projectors are
checked, so it must not share code with that training path.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, NumericalError


def gram_schmidt_rows(rows: np.ndarray) -> np.ndarray:
    """Orthonormalize the rows of a k x D matrix (modified Gram-Schmidt).

    Raises ConfigurationError if the rows are numerically dependent,
    which for the Gaussian draws used here has probability zero.
    """
    q = np.array(rows, dtype=np.float64, copy=True)
    k = q.shape[0]
    for i in range(k):
        for j in range(i):
            q[i] -= np.dot(q[i], q[j]) * q[j]
        norm = float(np.linalg.norm(q[i]))
        if norm < 1e-12:
            raise ConfigurationError(
                f"row {i} became numerically zero during orthonormalization"
            )
        q[i] /= norm
    return q


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigendecomposition of a dense symmetric matrix by cyclic Jacobi rotations.

    Sweeps over all off-diagonal (p, q) pairs, zeroing each in turn, until
    the off-diagonal Frobenius norm drops to ``tol``. Returns
    ``(eigenvalues, eigenvectors)`` with eigenvalues sorted descending and
    eigenvectors as rows.
    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ConfigurationError(f"matrix must be square, got {a.shape}")
    if not np.allclose(a, a.T, atol=1e-12):
        raise ConfigurationError("matrix must be symmetric")
    v = np.eye(n)

    def offdiag_norm() -> float:
        off = a - np.diag(np.diag(a))
        return float(np.linalg.norm(off))

    converged = False
    for _ in range(max_sweeps):
        if offdiag_norm() <= tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) == 0.0:
                    continue
                # Stable rotation angle (Golub & Van Loan style).
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(1.0, theta))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                rot_p = c * v[p, :] - s * v[q, :]
                rot_q = s * v[p, :] + c * v[q, :]
                v[p, :], v[q, :] = rot_p, rot_q
    if not converged and offdiag_norm() > tol:
        raise NumericalError(
            f"Jacobi iteration did not reach off-diagonal norm {tol} "
            f"within {max_sweeps} sweeps (residual {offdiag_norm():.3e})"
        )

    eigvals = np.diag(a).copy()
    order = np.argsort(-eigvals, kind="stable")
    return eigvals[order], v[order]
