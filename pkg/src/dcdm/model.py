"""The direction network f(c, r) and its unsupervised training.

The network maps a unit residual on the voxel grid to a search direction
meant to be parallel to A^{-1} r. It is fully convolutional (zero padding,
one 2x average-pooling level, nearest-neighbor upsampling, 1x1x1 output), so
weights trained on one grid size apply to any even-sized grid.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .grid import SparseMatrix, VoxelDomain

__all__ = [
    "CollapsedOutput",
    "ConvSpec",
    "DirectionNet",
    "EpochStats",
    "PoissonOperator",
    "ShapeError",
    "TrainConfig",
    "WeightFormatError",
    "as_oracle",
    "blocks_for_tier",
    "evaluate",
    "forward",
    "gradient",
    "load_weights",
    "loss",
    "per_sample_loss",
    "save_weights",
    "train",
]

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"DCDW"
WEIGHTS_VERSION = 1
CURVATURE_TOL = 1e-14
CHANNELS = 16


class ShapeError(ValueError):
    pass


class CollapsedOutput(ArithmeticError):
    """Network output has no curvature (f^T A f <= tol), so the step is undefined."""


class WeightFormatError(ValueError):
    pass


def blocks_for_tier(tier: int) -> tuple[int, int, int]:
    """Residual blocks (upper before branch, upper after branch, lower level)."""
    if tier <= 32:
        return (1, 1, 2)
    if tier <= 64:
        return (1, 2, 3)
    return (2, 3, 4)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int  # 3 or 1
    activation: str  # "relu" or "linear"

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError("kernel must be 3x3x3 or 1x1x1")
        if self.activation not in ("relu", "linear"):
            raise ValueError("activation must be relu or linear")


def _conv(spec: ConvSpec) -> nn.Conv3d:
    return nn.Conv3d(spec.in_channels, spec.out_channels, spec.kernel, padding=spec.kernel // 2)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv(ConvSpec(channels, channels, 3, "relu"))
        self.conv2 = _conv(ConvSpec(channels, channels, 3, "relu"))

    def forward(self, x):
        return x + F.relu(self.conv2(F.relu(self.conv1(x))))


class DirectionNet(nn.Module):
    """Two-level residual CNN.

    input conv (1->C, linear) -> upper blocks -> [avg-pool -> lower blocks ->
    upsample] added back -> upper blocks -> 1x1x1 conv (C->1, linear).
    """

    def __init__(self, tier: int = 16, channels: int = CHANNELS, blocks: Sequence[int] | None = None):
        super().__init__()
        self.tier = int(tier)
        self.channels = int(channels)
        self.blocks = tuple(blocks) if blocks is not None else blocks_for_tier(tier)
        before, after, lower = self.blocks
        self.inp = _conv(ConvSpec(1, channels, 3, "linear"))
        self.upper_before = nn.Sequential(*[ResidualBlock(channels) for _ in range(before)])
        self.lower = nn.Sequential(*[ResidualBlock(channels) for _ in range(lower)])
        self.upper_after = nn.Sequential(*[ResidualBlock(channels) for _ in range(after)])
        self.out = _conv(ConvSpec(channels, 1, 1, "linear"))

    def forward(self, x):
        h = self.upper_before(self.inp(x))
        low = self.lower(F.avg_pool3d(h, 2))
        up = low.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)
        return self.out(self.upper_after(h + up))

    def layers(self) -> list[tuple[ConvSpec, nn.Conv3d]]:
        """Convolutions in evaluation order with their specs."""
        C = self.channels
        out = [(ConvSpec(1, C, 3, "linear"), self.inp)]
        for seq in (self.upper_before, self.lower, self.upper_after):
            for blk in seq:
                out.append((ConvSpec(C, C, 3, "relu"), blk.conv1))
                out.append((ConvSpec(C, C, 3, "relu"), blk.conv2))
        out.append((ConvSpec(C, 1, 1, "linear"), self.out))
        return out

    def init_weights(self, seed: int) -> "DirectionNet":
        """He-uniform (fan-in) weights, zero biases."""
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for _, conv in self.layers():
                fan_in = conv.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=g, dtype=conv.weight.dtype) * 2 * bound - bound)
                conv.bias.zero_()
        return self


def _check_dims(dims):
    if dims is None:
        raise ShapeError("grid dims are required with a matrix operator")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 2 or d % 2 for d in dims):
        raise ShapeError(f"grid dims {dims} must be even (one 2x pooling level)")
    return dims


def _as_grid(r, dims, dtype):
    t = torch.as_tensor(np.asarray(r), dtype=dtype)
    if t.ndim == 1:
        t = t[None]
    if t.shape[-1] != int(np.prod(dims)):
        raise ShapeError(f"vector length {t.shape[-1]} does not match dims {dims}")
    return t.reshape(t.shape[0], 1, *dims)


def forward(net: DirectionNet, r, dims) -> np.ndarray:
    """Evaluate the network on one flat vector (or a batch of rows)."""
    dims = _check_dims(dims)
    dtype = next(net.parameters()).dtype
    x = _as_grid(r, dims, dtype)
    with torch.no_grad():
        y = net(x).reshape(x.shape[0], -1).double().numpy()
    return y[0] if np.ndim(r) == 1 else y


class PoissonOperator:
    """Applies a Poisson-type matrix to batches of flat torch vectors.

    Built from a domain it uses the 7-point stencil directly; built from a
    ``SparseMatrix`` it uses a torch sparse product. Both are differentiable.
    """

    def __init__(self, A: VoxelDomain | SparseMatrix):
        if isinstance(A, VoxelDomain):
            self.dims = A.dims
            self.n = A.n
            self._fluid = torch.from_numpy(A.fluid.astype(np.float64))
            self._sparse = None
        elif isinstance(A, SparseMatrix):
            self.dims = None
            self.n = A.n
            coo = A.to_scipy().tocoo()
            idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
            self._sparse = torch.sparse_coo_tensor(idx, torch.from_numpy(coo.data), (A.n, A.n), check_invariants=True).coalesce()
        else:
            raise TypeError("expected a VoxelDomain or SparseMatrix")

    def __call__(self, f: torch.Tensor) -> torch.Tensor:
        if self._sparse is not None:
            S = self._sparse.to(f.dtype)
            return torch.sparse.mm(S, f.T).T
        fluid = self._fluid.to(f.dtype)
        g = f.reshape(f.shape[0], *self.dims) * fluid
        out = torch.zeros_like(g)
        for axis in (1, 2, 3):
            n = g.shape[axis]
            lo, hi = g.narrow(axis, 0, n - 1), g.narrow(axis, 1, n - 1)
            pair = fluid.narrow(axis - 1, 0, n - 1) * fluid.narrow(axis - 1, 1, n - 1)
            flux = pair * (lo - hi)
            out = out + F.pad(flux, _pad_spec(axis, 0, 1)) - F.pad(flux, _pad_spec(axis, 1, 0))
        return out.reshape(f.shape[0], -1)


def _pad_spec(axis, before, after):
    # F.pad lists (last dim first); tensors here are (batch, x, y, z)
    spec = [0, 0, 0, 0, 0, 0]
    k = 3 - axis
    spec[2 * k], spec[2 * k + 1] = before, after
    return tuple(spec)


def per_sample_loss(r: torch.Tensor, f: torch.Tensor, Af: torch.Tensor):
    """``||r - alpha A f||`` with the optimal step ``alpha = r.f / f.A.f``.

    Returns ``(loss, collapsed)``; collapsed rows have ``f.A.f <= tol * f.f``
    and their loss entry is meaningless.
    """
    fAf = (f * Af).sum(dim=1)
    ff = (f * f).sum(dim=1)
    collapsed = ~(fAf > CURVATURE_TOL * ff)
    safe = torch.where(collapsed, torch.ones_like(fAf), fAf)
    alpha = (r * f).sum(dim=1) / safe
    return torch.linalg.vector_norm(r - alpha[:, None] * Af, dim=1), collapsed


def _batch_loss(net, op: PoissonOperator, R: torch.Tensor, dims):
    f = net(R.reshape(R.shape[0], 1, *dims)).reshape(R.shape[0], -1)
    return per_sample_loss(R, f, op(f))


def _tensor(R, net):
    dtype = next(net.parameters()).dtype
    t = torch.as_tensor(np.asarray(R), dtype=dtype)
    return t[None] if t.ndim == 1 else t


def loss(net: DirectionNet, A, r, dims=None) -> float:
    """Mean scale-invariant loss over the rows of ``r``."""
    op = A if isinstance(A, PoissonOperator) else PoissonOperator(A)
    dims = _check_dims(dims or op.dims)
    R = _tensor(r, net)
    with torch.no_grad():
        vals, collapsed = _batch_loss(net, op, R, dims)
    if collapsed.any():
        raise CollapsedOutput(f"{int(collapsed.sum())} sample(s) with f^T A f <= tol")
    return float(vals.mean())


def gradient(net: DirectionNet, A, R, dims=None) -> dict[str, np.ndarray]:
    """Exact gradient of the mean loss (through the step size) per parameter."""
    op = A if isinstance(A, PoissonOperator) else PoissonOperator(A)
    dims = _check_dims(dims or op.dims)
    R = _tensor(R, net)
    net.zero_grad()
    vals, collapsed = _batch_loss(net, op, R, dims)
    if collapsed.any():
        raise CollapsedOutput(f"{int(collapsed.sum())} sample(s) with f^T A f <= tol")
    vals.mean().backward()
    return {name: p.grad.detach().double().numpy().copy() for name, p in net.named_parameters()}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    val_fraction: float = 0.05
    max_collapsed_fraction: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    collapsed: int


def _split(count, cfg: TrainConfig):
    perm = np.random.default_rng([cfg.seed, 0x5B11]).permutation(count)
    n_val = int(round(cfg.val_fraction * count)) if count > 1 else 0
    if cfg.val_fraction > 0 and count > 1:
        n_val = max(n_val, 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate(net: DirectionNet, op: PoissonOperator, R: torch.Tensor, dims, batch_size=64) -> float:
    """Mean loss; collapsed samples count as 1 (= ||r||)."""
    total = 0.0
    with torch.no_grad():
        for s in range(0, R.shape[0], batch_size):
            vals, collapsed = _batch_loss(net, op, R[s:s + batch_size], dims)
            total += float(torch.where(collapsed, torch.ones_like(vals), vals).sum())
    return total / max(R.shape[0], 1)


def train(
    net: DirectionNet,
    vectors,
    A: VoxelDomain | SparseMatrix,
    cfg: TrainConfig = TrainConfig(),
    dims=None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[DirectionNet, list[EpochStats]]:
    """ADAM on shuffled mini-batches; returns the best-validation weights.

    ``vectors`` is a (count, n) array or a TrainingSet. 5% of it is held out
    for epoch selection. Samples whose output collapses contribute a constant
    loss of 1 and no gradient. Training stops early (keeping the best finite
    weights) if the loss turns non-finite or too many samples collapse.
    """
    net = copy.deepcopy(net)
    if cfg.epochs == 0:
        return net, []
    op = PoissonOperator(A)
    dims = _check_dims(dims or op.dims)
    V = getattr(vectors, "vectors", vectors)
    dtype = next(net.parameters()).dtype
    data = torch.as_tensor(np.asarray(V), dtype=dtype)
    if data.shape[1] != int(np.prod(dims)):
        raise ShapeError("training vectors do not match the grid")
    tr_idx, va_idx = _split(data.shape[0], cfg)
    train_data, val_data = data[tr_idx], data[va_idx]

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    best_state, best_val = copy.deepcopy(net.state_dict()), math.inf
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(train_data.shape[0])
        total, collapsed_total, seen = 0.0, 0, 0
        aborted = False
        for s in range(0, len(order), cfg.batch_size):
            R = train_data[order[s:s + cfg.batch_size]]
            vals, collapsed = _batch_loss(net, op, R, dims)
            n_col = int(collapsed.sum())
            collapsed_total += n_col
            seen += R.shape[0]
            keep = vals[~collapsed]
            batch_total = float(keep.detach().sum()) + n_col
            if not math.isfinite(batch_total):
                log.warning("non-finite loss in epoch %d; stopping", epoch)
                aborted = True
                break
            total += batch_total
            if keep.numel():
                opt.zero_grad()
                # collapsed samples still count in the mean, with zero gradient
                (keep.sum() / R.shape[0]).backward()
                opt.step()
        if aborted or collapsed_total > cfg.max_collapsed_fraction * max(seen, 1):
            if not aborted:
                log.warning("%d collapsed samples in epoch %d; stopping", collapsed_total, epoch)
            break
        val = evaluate(net, op, val_data, dims) if val_data.shape[0] else total / seen
        stats = EpochStats(epoch, total / seen, val, collapsed_total)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if not math.isfinite(val):
            break
        if val < best_val:
            best_val, best_state = val, copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    return net, history


def as_oracle(net: DirectionNet, domain: VoxelDomain) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap the network as a direction oracle on ``domain``.

    The output is zeroed on boundary cells. The wrapper holds no mutable
    state, so concurrent calls are safe.
    """
    dims = _check_dims(domain.dims)
    if max(dims) < net.tier:
        warnings.warn(
            f"model trained at {net.tier}^3 applied to a smaller grid {dims}", RuntimeWarning, stacklevel=2
        )
    fluid = domain.fluid.ravel()
    dtype = next(net.parameters()).dtype
    net.eval()

    def oracle(r):
        r = np.asarray(r, dtype=np.float64)
        if not np.any(r):
            return np.zeros_like(r)
        x = torch.from_numpy(r.astype(np.float32 if dtype == torch.float32 else np.float64)).reshape(1, 1, *dims)
        with torch.no_grad():
            d = net(x).reshape(-1).double().numpy()
        return np.where(fluid, d, 0.0)

    return oracle


_W_HEADER = struct.Struct("<4sIII")
_L_HEADER = struct.Struct("<IIII")


def save_weights(net: DirectionNet, path) -> None:
    layers = net.layers()
    chunks = [_W_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, net.tier, len(layers))]
    for spec, conv in layers:
        act = 1 if spec.activation == "relu" else 0
        chunks.append(_L_HEADER.pack(spec.in_channels, spec.out_channels, spec.kernel, act))
        chunks.append(conv.weight.detach().cpu().numpy().astype("<f4").tobytes())
        chunks.append(conv.bias.detach().cpu().numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> DirectionNet:
    raw = Path(path).read_bytes()
    if len(raw) < _W_HEADER.size:
        raise WeightFormatError("malformed header")
    magic, version, tier, n_layers = _W_HEADER.unpack_from(raw)
    if magic != WEIGHTS_MAGIC or version != WEIGHTS_VERSION:
        raise WeightFormatError("bad magic or version")
    off = _W_HEADER.size
    specs, blobs = [], []
    for _ in range(n_layers):
        if off + _L_HEADER.size > len(raw):
            raise WeightFormatError("truncated layer header")
        cin, cout, k, act = _L_HEADER.unpack_from(raw, off)
        off += _L_HEADER.size
        spec = ConvSpec(cin, cout, k, "relu" if act else "linear")
        nw, nb = cin * cout * k**3, cout
        if off + 4 * (nw + nb) > len(raw):
            raise WeightFormatError("truncated layer payload")
        w = np.frombuffer(raw, "<f4", nw, off).reshape(cout, cin, k, k, k)
        b = np.frombuffer(raw, "<f4", nb, off + 4 * nw)
        off += 4 * (nw + nb)
        specs.append(spec)
        blobs.append((w, b))
    if off != len(raw):
        raise WeightFormatError("trailing bytes after last layer")
    channels = specs[0].out_channels if specs else 0
    net = DirectionNet(tier, channels)
    if [s for s, _ in net.layers()] != specs:
        raise WeightFormatError(f"layer list does not match the tier-{tier} architecture")
    with torch.no_grad():
        for (_, conv), (w, b) in zip(net.layers(), blobs):
            conv.weight.copy_(torch.from_numpy(w.copy()))
            conv.bias.copy_(torch.from_numpy(b.copy()))
    return net
