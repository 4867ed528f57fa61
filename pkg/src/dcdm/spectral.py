"""Training data from the spectrum of the Poisson matrix.

Pipeline: Lanczos tridiagonalization (fully reorthogonalized) -> implicit QL
on the tridiagonal matrix -> Rayleigh-Ritz vectors -> random combinations
biased toward the low end of the spectrum.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .grid import SparseMatrix, matvec

__all__ = [
    "DatasetFormatError",
    "EarlyBreakdown",
    "LanczosResult",
    "NoPositiveSpectrum",
    "RitzBasis",
    "TrainingSet",
    "default_lanczos_steps",
    "default_theta",
    "deflation_vectors",
    "lanczos",
    "load_dataset",
    "ritz_vectors",
    "sample_coefficients",
    "sample_training_vectors",
    "save_dataset",
    "tridiag_eig",
]

log = logging.getLogger(__name__)

DATASET_MAGIC = b"DCDS"
DATASET_VERSION = 1
BREAKDOWN_TOL = 1e-12
NULL_TOL = 1e-8
BOOST = 9.0


class EarlyBreakdown(ArithmeticError):
    """The Krylov space was exhausted after ``steps`` Lanczos vectors.

    ``result`` holds the valid shorter decomposition.
    """

    def __init__(self, steps: int, result: "LanczosResult"):
        super().__init__(f"Lanczos breakdown after {steps} steps")
        self.steps = steps
        self.result = result


class NoPositiveSpectrum(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class LanczosResult:
    Q: np.ndarray  # n x m, orthonormal columns
    alpha: np.ndarray  # m
    beta: np.ndarray  # m - 1

    @property
    def m(self) -> int:
        return self.alpha.size

    def tridiagonal(self) -> np.ndarray:
        return np.diag(self.alpha) + np.diag(self.beta, 1) + np.diag(self.beta, -1)


@dataclass
class RitzBasis:
    Q: np.ndarray  # n x m
    lambdas: np.ndarray  # nondecreasing


@dataclass
class TrainingSet:
    vectors: np.ndarray  # count x n, unit rows
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.vectors.shape[0]


def default_lanczos_steps(n_fluid: int) -> int:
    return int(min(n_fluid // 2, 1024))


def default_theta(m: int) -> int:
    # same theta/m ratio as the 500/10000 used at 64^3
    return m // 20


def _to_range(v, mask):
    v[~mask] = 0.0
    v[mask] -= v[mask].mean()
    return v


def _mgs(w, Q, k):
    for i in range(k):
        q = Q[:, i]
        w -= (q @ w) * q
    return w


def lanczos(
    A: SparseMatrix,
    m: int,
    seed: int,
    fluid=None,
    checkpoint=None,
    checkpoint_every: int = 64,
) -> LanczosResult:
    """``m``-step Lanczos with full reorthogonalization.

    The start vector is Gaussian; if ``fluid`` is given it is restricted to the
    fluid cells with the constant removed, which puts it in range(A) for a
    Neumann operator. With ``checkpoint`` the basis is saved every
    ``checkpoint_every`` columns and a matching checkpoint is resumed.
    """
    n = A.n
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}]")
    Q = np.zeros((n, m))
    alpha = np.zeros(m)
    beta = np.zeros(max(m - 1, 0))

    mask = None if fluid is None else np.asarray(fluid, dtype=bool).ravel()
    start = 0
    ckpt = Path(checkpoint) if checkpoint is not None else None
    if ckpt is not None and ckpt.exists():
        start = _resume(ckpt, Q, alpha, beta, n, seed)
    if start == 0:
        rng = np.random.default_rng(seed)
        q = rng.standard_normal(n)
        if mask is not None:
            q = _to_range(q, mask)
        Q[:, 0] = q / np.linalg.norm(q)

    anorm = max(np.abs(alpha[:start]).max(initial=0.0), beta[:start].max(initial=0.0))
    for j in range(start, m):
        q = Q[:, j]
        w = matvec(A, q)
        alpha[j] = q @ w
        w -= alpha[j] * q
        if j > 0:
            w -= beta[j - 1] * Q[:, j - 1]
        w = _mgs(_mgs(w, Q, j + 1), Q, j + 1)
        if mask is not None:
            # the null mode sits outside the range spectrum and round-off
            # components of it grow geometrically unless removed every step
            w = _to_range(w, mask)
        if j == m - 1:
            break
        b = np.linalg.norm(w)
        anorm = max(anorm, abs(alpha[j]), b)
        if b <= BREAKDOWN_TOL * max(anorm, 1.0):
            res = LanczosResult(Q[:, : j + 1].copy(), alpha[: j + 1].copy(), beta[:j].copy())
            raise EarlyBreakdown(j + 1, res)
        beta[j] = b
        Q[:, j + 1] = w / b
        if ckpt is not None and (j + 2) % checkpoint_every == 0:
            _save_checkpoint(ckpt, Q, alpha, beta, j + 2, seed)
            log.info("lanczos checkpoint at %d/%d columns", j + 2, m)
    return LanczosResult(Q, alpha, beta)


def _save_checkpoint(path, Q, alpha, beta, k, seed):
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, Q=Q[:, :k], alpha=alpha[: k - 1], beta=beta[: k - 1], seed=seed, n=Q.shape[0])
    tmp.replace(path)


def _resume(path, Q, alpha, beta, n, seed) -> int:
    with np.load(path) as z:
        if int(z["n"]) != n or int(z["seed"]) != seed:
            log.warning("ignoring checkpoint %s: different problem or seed", path)
            return 0
        k = min(z["Q"].shape[1], Q.shape[1])
        Q[:, :k] = z["Q"][:, :k]
        alpha[: k - 1] = z["alpha"][: k - 1]
        beta[: k - 1] = z["beta"][: k - 1]
    log.info("resuming lanczos from %d columns", k)
    return k - 1


@numba.njit(cache=True)
def _tql(d, e, z):
    # implicit QL with Wilkinson shifts; e[i] couples d[i], d[i+1]; e[n-1] = 0
    n = d.size
    budget = 30 * n
    used = 0
    for l in range(n):
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) + dd == dd:
                    break
                m += 1
            if m == l:
                break
            used += 1
            if used > budget:
                return False
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + (r if g >= 0.0 else -r))
            s = 1.0
            c = 1.0
            p = 0.0
            underflow = False
            i = m - 1
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = np.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                for k in range(n):
                    f = z[k, i + 1]
                    z[k, i + 1] = s * z[k, i] + c * f
                    z[k, i] = c * z[k, i] - s * f
                i -= 1
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return True


def tridiag_eig(alpha, beta) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of the symmetric tridiagonal matrix (alpha, beta).

    Returns ascending eigenvalues and the orthogonal matrix whose columns are
    the matching eigenvectors.
    """
    d = np.array(alpha, dtype=np.float64)
    m = d.size
    e = np.zeros(m)
    e[: m - 1] = beta
    z = np.eye(m)
    if not _tql(d, e, z):
        raise ArithmeticError("implicit QL did not converge")
    order = np.argsort(d, kind="stable")
    return d[order], z[:, order]


def ritz_vectors(lr: LanczosResult) -> RitzBasis:
    lam, S = tridiag_eig(lr.alpha, lr.beta)
    return RitzBasis(lr.Q @ S, lam)


def deflation_vectors(A: SparseMatrix, fluid, k: int, seed: int, steps: int | None = None) -> np.ndarray:
    """Approximate low eigenvectors of ``A`` restricted to range(A), as columns.

    Ritz vectors from a short Lanczos run; Ritz values at or below the null
    threshold (constants of disconnected fluid pockets) are skipped.
    """
    mask = np.asarray(fluid, dtype=bool).ravel()
    n_fluid = int(mask.sum())
    if n_fluid < 2 or k < 1:
        return np.zeros((A.n, 0))
    m = min(steps or 4 * k, n_fluid - 1)
    try:
        lr = lanczos(A, m, seed, fluid=mask)
    except EarlyBreakdown as exc:
        lr = exc.result
    basis = ritz_vectors(lr)
    keep = basis.lambdas > NULL_TOL * basis.lambdas.max(initial=0.0)
    return basis.Q[:, keep][:, :k]


def sample_coefficients(lambdas, count: int, theta: float, seed: int) -> tuple[np.ndarray, int]:
    """Random Ritz-basis coefficients, boosted 9x on ``j_null <= j <= m/2 + theta``.

    ``j_null`` is the first index with a positive Ritz value (relative
    threshold 1e-8 of the largest). Coefficients below it would put
    nullspace content in the sample and are set to zero. Each row comes from
    its own seeded substream, so row ``i`` does not depend on ``count``.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    if count < 1 or theta < 0:
        raise ValueError("count must be >= 1 and theta >= 0")
    lam_max = lam.max(initial=0.0)
    positive = lam > NULL_TOL * lam_max
    if lam_max <= 0.0 or not positive.any():
        raise NoPositiveSpectrum("no Ritz value above the nullspace threshold")
    m = lam.size
    j_null = int(np.argmax(positive))
    j = np.arange(m)
    scale = np.where((j >= j_null) & (j <= m / 2 + theta), BOOST, 1.0)
    scale[:j_null] = 0.0
    C = np.empty((count, m))
    for i in range(count):
        C[i] = np.random.default_rng([seed, i]).standard_normal(m)
    return C * scale, j_null


def sample_training_vectors(
    basis: RitzBasis, count: int, theta: float, seed: int, fluid=None
) -> TrainingSet:
    C, j_null = sample_coefficients(basis.lambdas, count, theta, seed)
    V = C @ basis.Q.T
    if fluid is not None:
        mask = np.asarray(fluid, dtype=bool).ravel()
        V[:, ~mask] = 0.0
        V[:, mask] -= V[:, mask].mean(axis=1, keepdims=True)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    meta = {"m": basis.lambdas.size, "theta": theta, "seed": seed, "count": count, "j_null": j_null}
    return TrainingSet(V, meta)


_DS_HEADER = struct.Struct("<4sIII")


def save_dataset(ds: TrainingSet, path) -> None:
    count, n = ds.vectors.shape
    meta = "".join(f"{k}={v}\n" for k, v in ds.meta.items())
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, count, n))
        fh.write(np.ascontiguousarray(ds.vectors, dtype="<f4").tobytes())
        fh.write(meta.encode())


def _parse_value(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    if v.startswith("(") and v.endswith(")"):
        return tuple(int(x) for x in v[1:-1].split(",") if x.strip())
    return v


def load_dataset(path) -> TrainingSet:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise DatasetFormatError("malformed header")
    magic, version, count, n = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise DatasetFormatError("malformed header")
    end = _DS_HEADER.size + 4 * count * n
    if len(raw) < end:
        raise DatasetFormatError("truncated payload")
    V = np.frombuffer(raw, dtype="<f4", count=count * n, offset=_DS_HEADER.size)
    meta = {}
    for line in raw[end:].decode().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = _parse_value(v.strip())
    return TrainingSet(V.reshape(count, n).astype(np.float64), meta)
