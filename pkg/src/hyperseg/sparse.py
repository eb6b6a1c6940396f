"""Compressed sparse row matrices used for graph operators and incidences.

Values are 64-bit floats, column indices are sorted within each row, and no
explicit zeros are stored. Products accumulate in ascending column order per
row, which keeps results bitwise reproducible and lets tests compare against
a naive dense loop exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as _sp

from .errors import ShapeMismatchError


@dataclass
class SparseMatrix:
    rows: int
    cols: int
    indptr: np.ndarray   # int64, len rows+1
    indices: np.ndarray  # int64, ascending within each row
    data: np.ndarray     # float64, no explicit zeros

    _csr: _sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _transpose: "SparseMatrix | None" = field(default=None, repr=False, compare=False)

    @property
    def nnz(self) -> int:
        return int(self.data.shape[0])

    @staticmethod
    def from_triplets(rows: int, cols: int, i, j, v) -> "SparseMatrix":
        """Build from COO triplets; duplicates are summed, zeros dropped."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        v = np.asarray(v, dtype=np.float64)
        if i.shape != j.shape or i.shape != v.shape:
            raise ShapeMismatchError("triplet arrays must have equal length")
        if i.size and (i.min() < 0 or i.max() >= rows or j.min() < 0 or j.max() >= cols):
            raise ShapeMismatchError("triplet index out of range")
        csr = _sp.csr_matrix((v, (i, j)), shape=(rows, cols), dtype=np.float64)
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        return SparseMatrix._from_scipy(csr)

    @staticmethod
    def from_dense(arr) -> "SparseMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        csr = _sp.csr_matrix(arr)
        csr.eliminate_zeros()
        csr.sort_indices()
        return SparseMatrix._from_scipy(csr)

    @staticmethod
    def identity(n: int) -> "SparseMatrix":
        idx = np.arange(n, dtype=np.int64)
        return SparseMatrix(n, n, np.arange(n + 1, dtype=np.int64), idx,
                            np.ones(n, dtype=np.float64))

    @staticmethod
    def _from_scipy(csr: _sp.csr_matrix) -> "SparseMatrix":
        out = SparseMatrix(csr.shape[0], csr.shape[1],
                           csr.indptr.astype(np.int64),
                           csr.indices.astype(np.int64),
                           csr.data.astype(np.float64))
        out._csr = csr
        return out

    def scipy(self) -> _sp.csr_matrix:
        if self._csr is None:
            self._csr = _sp.csr_matrix(
                (self.data, self.indices, self.indptr), shape=(self.rows, self.cols))
        return self._csr

    def validate(self) -> None:
        """Check the CSR invariants; raises ShapeMismatchError on violation."""
        if self.indptr.shape != (self.rows + 1,):
            raise ShapeMismatchError("indptr length must be rows+1")
        if self.indptr[0] != 0 or self.indptr[-1] != self.nnz:
            raise ShapeMismatchError("indptr endpoints inconsistent with data")
        if np.any(np.diff(self.indptr) < 0):
            raise ShapeMismatchError("indptr must be non-decreasing")
        for r in range(self.rows):
            seg = self.indices[self.indptr[r]:self.indptr[r + 1]]
            if seg.size and (np.any(np.diff(seg) <= 0) or seg[0] < 0 or seg[-1] >= self.cols):
                raise ShapeMismatchError(f"row {r}: column indices not strictly increasing in range")
        if np.any(self.data == 0.0):
            raise ShapeMismatchError("explicit zeros stored")
        if not np.all(np.isfinite(self.data)):
            raise ShapeMismatchError("non-finite values stored")

    def to_dense(self) -> np.ndarray:
        return np.asarray(self.scipy().todense(), dtype=np.float64)

    def transpose(self) -> "SparseMatrix":
        if self._transpose is None:
            t = self.scipy().T.tocsr()
            t.sort_indices()
            self._transpose = SparseMatrix._from_scipy(t)
        return self._transpose

    def matmul_dense(self, x: np.ndarray) -> np.ndarray:
        """Sparse-dense product with fixed ascending accumulation order."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or self.cols != x.shape[0]:
            raise ShapeMismatchError(
                f"spmm shape mismatch: {self.rows}x{self.cols} @ {x.shape}")
        return np.asarray(self.scipy() @ x, dtype=np.float64)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.scipy().sum(axis=1)).ravel().astype(np.float64)

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (row, col, value) arrays in CSR iteration order."""
        counts = np.diff(self.indptr)
        rows = np.repeat(np.arange(self.rows, dtype=np.int64), counts)
        return rows, self.indices.copy(), self.data.copy()

    def structurally_equal(self, other: "SparseMatrix") -> bool:
        return (self.rows == other.rows and self.cols == other.cols
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.data, other.data))
