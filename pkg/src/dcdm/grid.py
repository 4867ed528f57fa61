"""Voxel domains and the discrete Poisson operator.

Cells are labeled fluid or boundary; the pressure unknowns live at cell
centers, so a domain of shape ``(nx, ny, nz)`` yields an ``n = nx*ny*nz``
operator. Boundary rows are kept as empty rows so vectors index the grid
directly.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

__all__ = [
    "CellLabel",
    "DomainFormatError",
    "SparseMatrix",
    "VoxelDomain",
    "assemble_poisson",
    "load_domain",
    "matvec",
    "remove_mean",
    "save_domain",
]

DOMAIN_MAGIC = b"VOXD"
DOMAIN_VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


class CellLabel(enum.IntEnum):
    FLUID = 0
    BOUNDARY = 1


class DomainFormatError(ValueError):
    """Raised when a domain file cannot be decoded."""


@dataclass(frozen=True, eq=False)
class VoxelDomain:
    """Labeled voxel grid. ``labels`` has shape ``dims`` in C (x-major) order."""

    dims: tuple[int, int, int]
    dx: float
    labels: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"invalid dims {self.dims}")
        if not self.dx > 0:
            raise ValueError("dx must be positive")
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.size != int(np.prod(dims)):
            raise ValueError(f"labels size {labels.size} does not match dims {dims}")
        labels = labels.reshape(dims).copy()
        if np.any(labels > 1):
            raise ValueError("labels must be 0 (fluid) or 1 (boundary)")
        labels.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "labels", labels)

    @classmethod
    def full(cls, nx: int, ny: int | None = None, nz: int | None = None, dx: float | None = None):
        """All-fluid box, i.e. the training domain."""
        ny = nx if ny is None else ny
        nz = nx if nz is None else nz
        dx = 1.0 / max(nx, ny, nz) if dx is None else dx
        return cls((nx, ny, nz), dx, np.zeros((nx, ny, nz), dtype=np.uint8))

    @classmethod
    def from_boundary_mask(cls, mask, dx: float | None = None):
        mask = np.asarray(mask, dtype=bool)
        dx = 1.0 / max(mask.shape) if dx is None else dx
        return cls(mask.shape, dx, mask.astype(np.uint8))

    @property
    def n(self) -> int:
        return self.labels.size

    @cached_property
    def fluid(self) -> np.ndarray:
        """Boolean fluid mask with shape ``dims``."""
        m = self.labels == CellLabel.FLUID
        m.flags.writeable = False
        return m

    @property
    def n_fluid(self) -> int:
        return int(self.fluid.sum())

    def __eq__(self, other):
        if not isinstance(other, VoxelDomain):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.dx == other.dx
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Square CSR matrix with sorted column indices."""

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        ro = np.asarray(self.row_offsets, dtype=np.int64)
        ci = np.asarray(self.col_indices, dtype=np.int64)
        va = np.asarray(self.values, dtype=np.float64)
        if ro.shape != (self.n + 1,) or ro[0] != 0 or np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing with length n+1")
        if ci.shape != va.shape or ro[-1] != ci.size:
            raise ValueError("col_indices/values length must equal row_offsets[-1]")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n):
            raise ValueError("column index out of range")
        for a in (ro, ci, va):
            a.flags.writeable = False
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "values", va)
        csr = sp.csr_matrix((va, ci, ro), shape=(self.n, self.n))
        if not csr.has_sorted_indices:
            raise ValueError("column indices must be strictly increasing within each row")
        object.__setattr__(self, "_csr", csr)

    @classmethod
    def from_scipy(cls, m) -> SparseMatrix:
        csr = sp.csr_matrix(m, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_dense(cls, a) -> SparseMatrix:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        return cls.from_scipy(sp.csr_matrix(a))

    @property
    def nnz(self) -> int:
        return self.values.size

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()

    def __matmul__(self, x):
        return matvec(self, x)

    def export_matrix_market(self, path) -> None:
        scipy.io.mmwrite(str(path), self._csr, symmetry="general")


def matvec(A: SparseMatrix, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[0] != A.n:
        raise ValueError(f"dimension mismatch: matrix is {A.n}, vector is {x.shape[0]}")
    return A.to_scipy() @ x


def assemble_poisson(domain: VoxelDomain) -> SparseMatrix:
    """Dimensionless 7-point Neumann Laplacian on the fluid cells of ``domain``.

    Each fluid row has diagonal equal to its number of fluid face-neighbors and
    -1 per fluid neighbor; boundary neighbors and the grid exterior contribute
    nothing.
    """
    fluid = domain.fluid
    idx = np.arange(domain.n).reshape(domain.dims)
    rows, cols = [], []
    deg = np.zeros(domain.dims, dtype=np.float64)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        both = fluid[lo] & fluid[hi]
        a, b = idx[lo][both], idx[hi][both]
        rows += [a, b]
        cols += [b, a]
        deg[lo] += both
        deg[hi] += both
    n_off = sum(r.size for r in rows)
    rows = np.concatenate(rows + [idx.ravel()])
    cols = np.concatenate(cols + [idx.ravel()])
    vals = np.concatenate([-np.ones(n_off), deg.ravel()])
    m = sp.coo_matrix((vals, (rows, cols)), shape=(domain.n, domain.n)).tocsr()
    m.eliminate_zeros()
    return SparseMatrix.from_scipy(m)


def remove_mean(v, fluid) -> np.ndarray:
    """Project out the constant nullspace over fluid cells; zero elsewhere."""
    v = np.array(v, dtype=np.float64).ravel()
    mask = np.asarray(fluid, dtype=bool).ravel()
    out = np.zeros_like(v)
    if mask.any():
        out[mask] = v[mask] - v[mask].mean()
    return out


def save_domain(domain: VoxelDomain, path) -> None:
    nx, ny, nz = domain.dims
    header = _HEADER.pack(DOMAIN_MAGIC, DOMAIN_VERSION, nx, ny, nz, domain.dx)
    Path(path).write_bytes(header + domain.labels.astype(np.uint8).tobytes(order="C"))


def load_domain(path) -> VoxelDomain:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DomainFormatError("malformed header")
    magic, version, nx, ny, nz, dx = _HEADER.unpack_from(raw)
    if magic != DOMAIN_MAGIC or version != DOMAIN_VERSION:
        raise DomainFormatError("malformed header")
    if min(nx, ny, nz) < 1 or not dx > 0:
        raise DomainFormatError("invalid dims")
    n = nx * ny * nz
    payload = raw[_HEADER.size:]
    if len(payload) < n:
        raise DomainFormatError("truncated payload")
    if len(payload) > n:
        raise DomainFormatError("dims product mismatch")
    labels = np.frombuffer(payload, dtype=np.uint8)
    if np.any(labels > 1):
        raise DomainFormatError("invalid label value")
    return VoxelDomain((nx, ny, nz), dx, labels.reshape(nx, ny, nz))
