"""Dense float64 matrix arithmetic and a deterministic full SVD.

Matrices are 2-D C-contiguous ``numpy.ndarray`` of dtype float64. Every public
operation validates its inputs and guarantees a finite result. The SVD is a
one-sided Jacobi iteration: slower than LAPACK but self-contained, accurate for
any conditioning, and bit-deterministic for identical input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# One-sided Jacobi stops once every column pair satisfies
# |<b_p, b_q>| <= OFFDIAG_TOL * ||b_p|| * ||b_q||, or errors at SWEEP_CAP.
SWEEP_CAP = 100
OFFDIAG_TOL = 1e-12

# Singular values below SIGMA_CLAMP * sigma_max are treated as exact zeros;
# the associated columns are kept so downstream rank selection sees them.
SIGMA_CLAMP = 1e-12


class LinalgError(ValueError):
    """Raised for invalid matrix inputs or a non-converging decomposition."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a 2-D finite float64 array.

    Accepts anything ``numpy.asarray`` understands. Raises LinalgError for
    wrong dimensionality, empty axes, or non-finite entries.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise LinalgError(f"{name} must have positive dimensions, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(m)


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with shape validation."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise LinalgError(
            f"dimension mismatch: cannot multiply {a.shape[0]}x{a.shape[1]} "
            f"by {b.shape[0]}x{b.shape[1]}"
        )
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise LinalgError("matrix product overflowed to non-finite values")
    return out


def frobenius_norm(a) -> float:
    """sqrt of the sum of squared entries."""
    a = as_matrix(a)
    return float(np.sqrt(np.einsum("ij,ij->", a, a)))


@dataclass(frozen=True)
class SvdResult:
    """Full singular value decomposition ``a = U @ diag(sigma) @ V.T``.

    U is m x s and V is n x s with orthonormal columns, s = min(m, n), and
    sigma is non-increasing and non-negative.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


_SCHEDULE_CACHE: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """All-pairs tournament schedule: each step pairs disjoint columns.

    Disjointness lets one step apply every rotation simultaneously with the
    same result as applying them one at a time.
    """
    cached = _SCHEDULE_CACHE.get(n)
    if cached is not None:
        return cached
    ids = list(range(n + (n % 2)))  # pad odd n with a dummy slot
    size = len(ids)
    steps = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            a, b = ids[i], ids[size - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        steps.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        ids = [ids[0], ids[-1]] + ids[1:-1]
    _SCHEDULE_CACHE[n] = steps
    return steps


def _jacobi_orthogonalize(b: np.ndarray, shape) -> np.ndarray:
    """Rotate the columns of ``b`` in place until mutually orthogonal.

    Returns the accumulated right rotation matrix V (b_in @ V == b_out).
    Columns whose norm has fallen below the clamp floor relative to the
    largest column are excluded from rotations and from the convergence
    measure: their singular values are clamped to zero downstream, and
    rotating residual round-off dust against a parallel large column would
    otherwise never satisfy the relative threshold.
    """
    n = b.shape[1]
    v = np.eye(n)
    tol2 = OFFDIAG_TOL * OFFDIAG_TOL
    floor2_scale = SIGMA_CLAMP * SIGMA_CLAMP
    for _ in range(SWEEP_CAP):
        off2_max = 0.0
        norms2 = np.einsum("ij,ij->j", b, b)
        floor2 = floor2_scale * float(norms2.max(initial=0.0))
        for p, q in _round_robin_pairs(n):
            bp = b[:, p]
            bq = b[:, q]
            alpha = np.einsum("ij,ij->j", bp, bp)
            beta = np.einsum("ij,ij->j", bq, bq)
            gamma = np.einsum("ij,ij->j", bp, bq)
            active = np.minimum(alpha, beta) > floor2
            # (gamma/alpha)*(gamma/beta) == gamma^2/(alpha*beta) without the
            # under/overflow of forming either product directly.
            ga = np.divide(gamma, alpha, out=np.zeros_like(gamma), where=active)
            gb = np.divide(gamma, beta, out=np.zeros_like(gamma), where=active)
            off2 = ga * gb
            step_max = float(off2.max()) if off2.size else 0.0
            if step_max > off2_max:
                off2_max = step_max
            rotate = off2 > tol2
            if not np.any(rotate):
                continue
            zeta = (beta[rotate] - alpha[rotate]) / (2.0 * gamma[rotate])
            # zeta == 0 (equal-norm correlated columns) needs the full 45
            # degree rotation, so the sign term must not vanish there.
            direction = np.where(zeta >= 0.0, 1.0, -1.0)
            t = direction / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            pr = p[rotate]
            qr = q[rotate]
            bp = b[:, pr]
            bq = b[:, qr]
            b[:, pr] = c * bp - s * bq
            b[:, qr] = s * bp + c * bq
            vp = v[:, pr]
            vq = v[:, qr]
            v[:, pr] = c * vp - s * vq
            v[:, qr] = s * vp + c * vq
        if off2_max <= tol2:
            return v
    raise LinalgError(
        f"Jacobi SVD did not converge within {SWEEP_CAP} sweeps "
        f"for matrix of shape {shape[0]}x{shape[1]}"
    )


def _fill_null_columns(u: np.ndarray, missing: np.ndarray) -> None:
    """Complete zero columns of ``u`` to an orthonormal set, deterministically.

    For each empty slot, every standard basis vector is projected against the
    current columns and the largest residual wins (argmax breaks ties at the
    lowest index). The winning residual norm is at least 1/sqrt(m) because the
    filled columns never span the full space while a slot remains.
    """
    m = u.shape[0]
    for j in np.flatnonzero(missing):
        residuals = np.eye(m) - u @ u.T
        norms = np.sqrt(np.einsum("ij,ij->j", residuals, residuals))
        k = int(np.argmax(norms))
        if norms[k] <= 0.0:  # pragma: no cover - impossible for valid shapes
            raise LinalgError("failed to complete orthonormal basis")
        # one re-orthogonalization pass tightens the completed direction
        cand = residuals[:, k] / norms[k]
        cand -= u @ (u.T @ cand)
        u[:, j] = cand / float(np.sqrt(cand @ cand))


def _apply_sign_convention(u: np.ndarray, v: np.ndarray) -> None:
    """Flip each singular pair so the largest-magnitude entry of u_i is positive.

    np.argmax takes the lowest index on ties, which fixes the tie-break rule.
    """
    for j in range(u.shape[1]):
        lead = int(np.argmax(np.abs(u[:, j])))
        if u[lead, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]


def svd(a) -> SvdResult:
    """Full SVD via one-sided Jacobi with a fixed sign convention.

    Deterministic: identical input bits produce identical output bits. Raises
    LinalgError if the rotation sweeps fail to converge (names the shape).
    """
    a = as_matrix(a)
    m, n = a.shape
    transposed = m < n
    b = np.array(a.T if transposed else a, dtype=np.float64, copy=True)
    rot = _jacobi_orthogonalize(b, a.shape)

    norms = np.sqrt(np.einsum("ij,ij->j", b, b))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    b = b[:, order]
    rot = rot[:, order]

    if sigma.size and sigma[0] > 0.0:
        sigma = np.where(sigma < SIGMA_CLAMP * sigma[0], 0.0, sigma)
    # Columns whose singular value clamps to zero carry only round-off dust
    # with no meaningful direction; their slots are kept and completed to an
    # orthonormal basis so U satisfies its invariant.
    cols = norms[order]
    live = sigma > 0.0
    u = np.zeros_like(b)
    u[:, live] = b[:, live] / cols[live]
    _fill_null_columns(u, ~live)

    if transposed:
        u, rot = rot, u
    _apply_sign_convention(u, rot)
    return SvdResult(U=u, sigma=sigma, V=rot)
