"""Dense tensor algebra: contraction, mode unfolding, SVD, Tucker decomposition.

Tensors are plain numpy arrays (row-major). Decomposition routines always
compute in float64 regardless of the input dtype; shape-manipulation and
contraction routines preserve the input dtype so they can sit on the 32-bit
training path.

Unfolding follows the convention where mode-n fibers become the columns of
the unfolded matrix and the remaining indices are enumerated with lower modes
varying fastest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def contract(
    a: np.ndarray,
    b: np.ndarray,
    axes_a: int | Sequence[int],
    axes_b: int | Sequence[int],
) -> np.ndarray:
    """Sum ``a * b`` over the paired axes.

    The result carries the non-contracted axes of ``a`` (in order) followed by
    those of ``b``. Contracting every axis yields a 0-d array (a scalar with
    shape ``()``). Generalizes matrix multiplication.
    """
    ax_a = [axes_a] if np.isscalar(axes_a) else list(axes_a)
    ax_b = [axes_b] if np.isscalar(axes_b) else list(axes_b)
    if len(ax_a) != len(ax_b):
        raise ShapeMismatchError(
            f"axis lists have different lengths: {len(ax_a)} vs {len(ax_b)}"
        )
    for name, axes, arr in (("a", ax_a, a), ("b", ax_b, b)):
        if len(set(axes)) != len(axes):
            raise ShapeMismatchError(f"duplicate axes for {name}: {axes}")
        for ax in axes:
            if not -arr.ndim <= ax < arr.ndim:
                raise ShapeMismatchError(
                    f"axis {ax} out of range for {name} with {arr.ndim} dimensions"
                )
    for ia, ib in zip(ax_a, ax_b):
        if a.shape[ia] != b.shape[ib]:
            raise ShapeMismatchError(
                f"cannot contract axis {ia} of a (length {a.shape[ia]}) "
                f"with axis {ib} of b (length {b.shape[ib]})"
            )
    return np.tensordot(a, b, axes=(ax_a, ax_b))


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Matricize ``t`` along ``mode``.

    Rows index the chosen mode; columns enumerate all remaining indices with
    lower modes varying fastest. ``fold`` inverts this exactly.
    """
    if not 0 <= mode < t.ndim:
        raise ShapeMismatchError(f"mode {mode} out of range for rank-{t.ndim} tensor")
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Invert :func:`unfold`: rebuild the tensor of ``shape`` from its mode
    unfolding."""
    shape = tuple(shape)
    if not 0 <= mode < len(shape):
        raise ShapeMismatchError(f"mode {mode} out of range for shape {shape}")
    rest = tuple(s for i, s in enumerate(shape) if i != mode)
    if m.shape != (shape[mode], int(np.prod(rest, dtype=np.int64))):
        raise ShapeMismatchError(
            f"matrix shape {m.shape} does not match mode-{mode} unfolding of {shape}"
        )
    return np.moveaxis(np.reshape(m, (shape[mode],) + rest, order="F"), 0, mode)


def mode_multiply(t: np.ndarray, mat: np.ndarray, mode: int) -> np.ndarray:
    """Contract ``t`` with ``mat`` along ``mode``.

    ``mat`` has shape ``(new_dim, t.shape[mode])``; the result replaces that
    mode's length with ``new_dim`` and leaves all other axes in place.
    """
    if mat.ndim != 2 or mat.shape[1] != t.shape[mode]:
        raise ShapeMismatchError(
            f"matrix {mat.shape} cannot multiply mode {mode} of tensor {t.shape}"
        )
    return np.ascontiguousarray(
        np.moveaxis(np.tensordot(mat, t, axes=([1], [mode])), 0, mode)
    )


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt`` with ``k = min(*m.shape)``.

    ``u`` is (p, k) with orthonormal columns, ``s`` is nonincreasing and
    nonnegative, ``vt`` is (k, q) with orthonormal rows.
    """

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


# Rotations with |off-diagonal| below this multiple of the column-norm product
# are skipped; cyclic sweeps stop once a full sweep applies none.
_JACOBI_SKIP = 1e-15
_JACOBI_MAX_SWEEPS = 64

# Singular values below this multiple of the largest are treated as zero when
# counting effective rank (keeps noise from inflating the rank).
RANK_CUTOFF = 1e-12


def _orthonormal_completion(u: np.ndarray, start: int) -> np.ndarray:
    """Fill columns ``start:`` of ``u`` with an orthonormal complement of the
    leading columns, built deterministically from the canonical basis by
    greedily taking the basis vector with the largest residual."""
    p, k = u.shape
    for col in range(start, k):
        resid = np.eye(p)
        # two rounds of Gram-Schmidt for numerical safety
        for _ in range(2):
            resid -= u[:, :col] @ (u[:, :col].T @ resid)
        norms = np.linalg.norm(resid, axis=0)
        best = int(np.argmax(norms))
        if norms[best] < 1e-8:
            raise RuntimeError("failed to complete orthonormal basis")
        u[:, col] = resid[:, best] / norms[best]
    return u


def _jacobi_orthogonalize(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi: rotate column pairs of ``a`` (p >= q) until mutually
    orthogonal. Returns the rotated matrix and the accumulated rotation ``v``
    (q x q orthogonal) with ``a_in @ v = a_out``."""
    _, q = a.shape
    v = np.eye(q)
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for i in range(q - 1):
            for j in range(i + 1, q):
                ci = a[:, i]
                cj = a[:, j]
                app = ci @ ci
                aqq = cj @ cj
                apq = ci @ cj
                if apq == 0.0 or abs(apq) <= _JACOBI_SKIP * np.sqrt(app * aqq):
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                if tau == 0.0:
                    t = 1.0
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ci - s * cj
                new_j = s * ci + c * cj
                a[:, i] = new_i
                a[:, j] = new_j
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            break
    return a, v


def svd(m: np.ndarray) -> SvdResult:
    """Singular value decomposition via one-sided Jacobi rotations.

    Always computed in float64. Deterministic: cyclic sweep order plus a fixed
    sign convention (the largest-magnitude entry of each left singular vector
    is positive) make repeated calls bit-identical. Zero singular values get
    orthonormal filler vectors so ``u``/``vt`` stay orthonormal.
    """
    if m.ndim != 2:
        raise ShapeMismatchError(f"svd expects a matrix, got rank-{m.ndim} input")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    a = np.array(m, dtype=np.float64)
    p, q = a.shape
    transposed = p < q
    if transposed:
        a = a.T.copy()
        p, q = q, p
    # Jacobi works on the side with fewer columns; q <= p here.
    a, v = _jacobi_orthogonalize(a)
    s = np.linalg.norm(a, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros((p, q))
    smax = s[0] if s.size else 0.0
    n_ok = 0
    for j in range(q):
        if smax > 0.0 and s[j] > smax * 1e-14:
            u[:, j] = a[:, j] / s[j]
            n_ok = j + 1
        else:
            s[j] = 0.0
    _orthonormal_completion(u, n_ok)
    vt = v.T
    if transposed:
        u, vt = vt.T, u.T
    # sign convention on left singular vectors
    u = u.copy()
    vt = vt.copy()
    for j in range(s.size):
        col = u[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return SvdResult(u=u, s=s, vt=vt)


def effective_rank(s: np.ndarray) -> int:
    """Number of singular values above ``RANK_CUTOFF`` times the largest."""
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > RANK_CUTOFF * s[0]))


@dataclass(frozen=True)
class TuckerFactors:
    """Core tensor plus one factor matrix per mode of a rank-4 tensor.

    ``core`` has shape ``(r1, r2, r3, r4)``; ``factors[i]`` has shape
    ``(dim_i, r_i)``. When produced by :func:`tucker_decompose` the factors
    have orthonormal columns; during training they are free parameters.
    """

    core: np.ndarray
    factors: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.core.shape

    @property
    def full_shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    def validate(self) -> None:
        if self.core.ndim != 4 or len(self.factors) != 4:
            raise ShapeMismatchError("Tucker factors require a rank-4 core and 4 factors")
        for i, f in enumerate(self.factors):
            if f.ndim != 2 or f.shape[1] != self.core.shape[i]:
                raise ShapeMismatchError(
                    f"factor {i} shape {f.shape} does not match core {self.core.shape}"
                )
            if f.shape[1] > f.shape[0]:
                raise ShapeMismatchError(
                    f"factor {i} rank {f.shape[1]} exceeds dimension {f.shape[0]}"
                )

    def astype(self, dtype) -> "TuckerFactors":
        return TuckerFactors(
            core=self.core.astype(dtype),
            factors=tuple(f.astype(dtype) for f in self.factors),
        )


def _complete_factor(u: np.ndarray, rank: int) -> np.ndarray:
    """Pad ``u`` with orthonormal columns up to ``rank`` (needed when the
    requested rank exceeds the matrix rank of an unfolding)."""
    p, k = u.shape
    if rank <= k:
        return u[:, :rank]
    out = np.zeros((p, rank))
    out[:, :k] = u
    return _orthonormal_completion(out, k)


def tucker_decompose(w: np.ndarray, ranks: Sequence[int]) -> TuckerFactors:
    """Truncated higher-order SVD of a rank-4 tensor.

    Factor ``i`` holds the leading ``ranks[i]`` left singular vectors of the
    mode-``i`` unfolding; the core is ``w`` contracted with every factor
    transpose. The squared reconstruction error is bounded by the sum of the
    discarded squared singular values over all four modes.
    """
    if w.ndim != 4:
        raise ShapeMismatchError(f"expected a rank-4 tensor, got rank {w.ndim}")
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 4:
        raise ShapeMismatchError(f"expected 4 ranks, got {len(ranks)}")
    for i, (r, d) in enumerate(zip(ranks, w.shape)):
        if r < 1 or r > d:
            raise ShapeMismatchError(
                f"rank {r} for mode {i} outside valid range 1..{d}"
            )
    if not np.all(np.isfinite(w)):
        raise ValueError("tucker_decompose input contains non-finite entries")
    w64 = np.asarray(w, dtype=np.float64)
    factors = []
    for i in range(4):
        res = svd(unfold(w64, i))
        factors.append(_complete_factor(res.u, ranks[i]))
    core = w64
    for i, f in enumerate(factors):
        core = mode_multiply(core, f.T, i)
    return TuckerFactors(core=core, factors=tuple(factors))


def tucker_reconstruct(f: TuckerFactors) -> np.ndarray:
    """Contract the core with all four factors, recovering the full tensor."""
    f.validate()
    w = f.core
    for i, fac in enumerate(f.factors):
        w = mode_multiply(w, fac, i)
    return w
