"""Incompressible smoke on a MAC grid, used to produce realistic pressure systems.

Each frame runs advect -> forces -> obstacle update -> pressure projection.
Pressure is solved in a rescaled, dimensionless form: with ``A`` the
dimensionless Poisson matrix and ``D`` the net face flux of each cell (in
velocity units), the projection solves ``A P = -D`` and subtracts ``P_j - P_i``
from the face between fluid cells ``i`` and ``j``. After the update the flux of
every fluid cell equals ``-(b - A P)``, so the divergence left behind is exactly
the solver residual. The physical pressure is ``p = rho * dx / dt * P``.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .grid import SparseMatrix, VoxelDomain, assemble_poisson, load_domain
from .krylov import KrylovError, SolverConfig, SolveReport, cg, deflated_pcg, dcdm, ic0_factor, pcg
from .spectral import deflation_vectors

__all__ = [
    "Inlet",
    "MacGrid",
    "RotatingBox",
    "SimConfig",
    "SimResult",
    "Sphere",
    "StaticMask",
    "advect",
    "apply_forces",
    "build_rhs",
    "divergence",
    "initial_grid",
    "load_snapshot",
    "make_solver",
    "pre_projection",
    "pressure_project",
    "run",
    "save_snapshot",
    "set_boundary_velocities",
    "step",
    "update_obstacle",
]

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"DCDF"
CFL_BOUND = 5.0

Solver = Callable[[SparseMatrix, np.ndarray, VoxelDomain], SolveReport]


@dataclass
class MacGrid:
    """Staggered velocities (u on x-faces, v on y-faces, w on z-faces) and density.

    z is the vertical axis.
    """

    domain: VoxelDomain
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    density: np.ndarray
    solid_velocity: Optional[Callable] = None  # rigid obstacle velocity at points

    @classmethod
    def zeros(cls, domain: VoxelDomain) -> "MacGrid":
        nx, ny, nz = domain.dims
        return cls(
            domain,
            np.zeros((nx + 1, ny, nz)),
            np.zeros((nx, ny + 1, nz)),
            np.zeros((nx, ny, nz + 1)),
            np.zeros((nx, ny, nz)),
        )

    def copy(self) -> "MacGrid":
        return replace(self, u=self.u.copy(), v=self.v.copy(), w=self.w.copy(), density=self.density.copy())

    def velocity_vector(self) -> np.ndarray:
        return np.concatenate([self.u.ravel(), self.v.ravel(), self.w.ravel()])


@dataclass(frozen=True)
class Inlet:
    center: tuple[float, float]  # (x, y) in units of the domain size, on the bottom face
    radius: float  # in units of the domain size
    speed: float


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]  # in units of the domain size
    radius: float


@dataclass(frozen=True)
class RotatingBox:
    center: tuple[float, float, float]
    half_width: tuple[float, float, float]
    angular_speed: float  # rad/s about the vertical axis


@dataclass(frozen=True)
class StaticMask:
    path: str


@dataclass(frozen=True)
class SimConfig:
    n: int = 32
    dt: float = 0.02
    rho: float = 1.0
    frames: int = 50
    inlet: Inlet = Inlet((0.5, 0.5), 0.15, 1.0)
    obstacle: Optional[object] = None
    buoyancy: float = 1.0
    solver: str = "cg"
    solver_cfg: SolverConfig = SolverConfig(rel_tol=1e-4, max_iter=1000)
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not (self.dt > 0 and self.rho > 0):
            raise ValueError("dt and rho must be positive")
        if self.frames < 0 or self.n < 2:
            raise ValueError("frames must be >= 0 and n >= 2")
        dx = 1.0 / self.n
        speed = self.inlet.speed
        if isinstance(self.obstacle, RotatingBox):
            reach = math.hypot(*self.obstacle.half_width[:2])
            speed = max(speed, abs(self.obstacle.angular_speed) * reach)
        if self.dt * speed > CFL_BOUND * dx:
            raise ValueError(f"dt*speed = {self.dt * speed:g} exceeds {CFL_BOUND}*dx = {CFL_BOUND * dx:g}")

    @property
    def dx(self) -> float:
        return 1.0 / self.n


# -- interpolation ---------------------------------------------------------------------

# index-space offset of each staggered array relative to cell-corner coordinates
_OFFSETS = {"u": (0.0, 0.5, 0.5), "v": (0.5, 0.0, 0.5), "w": (0.5, 0.5, 0.0), "c": (0.5, 0.5, 0.5)}


def _sample(field_, kind, pts):
    off = _OFFSETS[kind]
    coords = [pts[a] - off[a] for a in range(3)]
    return ndimage.map_coordinates(field_, coords, order=1, mode="nearest")


def _positions(shape, kind):
    off = _OFFSETS[kind]
    axes = [np.arange(s, dtype=np.float64) + off[a] for a, s in enumerate(shape)]
    return np.meshgrid(*axes, indexing="ij")


def _velocity_at(grid: MacGrid, pts):
    return (_sample(grid.u, "u", pts), _sample(grid.v, "v", pts), _sample(grid.w, "w", pts))


def advect(grid: MacGrid, dt: float) -> MacGrid:
    """Backward semi-Lagrangian step for all velocity components and density.

    Departure points are clamped to the grid by the interpolation.
    """
    dx = grid.domain.dx
    out = grid.copy()
    for name, kind in (("u", "u"), ("v", "v"), ("w", "w"), ("density", "c")):
        field_ = getattr(grid, name)
        pts = _positions(field_.shape, kind)
        vel = _velocity_at(grid, pts)
        back = [pts[a] - dt * vel[a] / dx for a in range(3)]
        setattr(out, name, _sample(field_, kind, back).reshape(field_.shape))
    np.maximum(out.density, 0.0, out=out.density)
    return out


def apply_forces(grid: MacGrid, dt: float, cfg: SimConfig) -> MacGrid:
    """Buoyancy: interior vertical faces gain dt * beta * (mean density of the two cells)."""
    out = grid.copy()
    if cfg.buoyancy != 0.0:
        rho_face = 0.5 * (grid.density[:, :, 1:] + grid.density[:, :, :-1])
        out.w[:, :, 1:-1] += dt * cfg.buoyancy * rho_face
    return out


# -- boundaries ------------------------------------------------------------------------


def _inlet_cells(domain: VoxelDomain, inlet: Inlet) -> np.ndarray:
    nx, ny, _ = domain.dims
    x = (np.arange(nx) + 0.5) / nx
    y = (np.arange(ny) + 0.5) / ny
    X, Y = np.meshgrid(x, y, indexing="ij")
    disc = (X - inlet.center[0]) ** 2 + (Y - inlet.center[1]) ** 2 <= inlet.radius**2
    return disc & domain.fluid[:, :, 0]


def set_boundary_velocities(grid: MacGrid, cfg: SimConfig) -> None:
    """Prescribe every face that touches a boundary cell or the domain wall.

    Obstacle faces take the rigid obstacle velocity, walls are no-through-flow,
    the inlet disc on the bottom injects ``speed`` upward, and the top wall
    carries a uniform outflow that balances it over the fluid cells of the top
    layer, keeping the enclosed Neumann problem compatible.
    """
    d = grid.domain
    solid = ~d.fluid
    nx, ny, nz = d.dims
    for comp, axis in ((grid.u, 0), (grid.v, 1), (grid.w, 2)):
        touch = np.zeros(comp.shape, dtype=bool)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        touch[tuple(lo)] |= solid
        touch[tuple(hi)] |= solid
        if touch.any():
            if grid.solid_velocity is None:
                comp[touch] = 0.0
            else:
                kind = "uvw"[axis]
                idx = np.nonzero(touch)
                off = _OFFSETS[kind]
                pts = [(idx[a] + off[a]) * d.dx for a in range(3)]
                comp[touch] = grid.solid_velocity(pts)[axis]
        wall = [slice(None)] * 3
        wall[axis] = [0, -1]
        comp[tuple(wall)] = 0.0
    inlet = _inlet_cells(d, cfg.inlet)
    grid.w[:, :, 0][inlet] = cfg.inlet.speed
    top = d.fluid[:, :, nz - 1]
    if inlet.any() and top.any():
        grid.w[:, :, nz][top] = cfg.inlet.speed * inlet.sum() / top.sum()


def update_obstacle(domain: VoxelDomain, t: float, cfg: SimConfig):
    """Relabel cells whose centers lie inside the obstacle at time ``t``.

    Returns ``(domain, solid_velocity)``; ``solid_velocity(points)`` gives the
    rigid velocity at physical points, or is None for a static obstacle.
    """
    ob = cfg.obstacle
    nx, ny, nz = domain.dims
    dx = domain.dx
    if ob is None:
        return VoxelDomain.full(nx, ny, nz, dx=dx), None
    if isinstance(ob, StaticMask):
        loaded = load_domain(ob.path)
        if loaded.dims != domain.dims:
            raise ValueError(f"mask dims {loaded.dims} do not match grid {domain.dims}")
        return VoxelDomain(domain.dims, dx, loaded.labels), None
    X, Y, Z = [(p + 0.5) * dx for p in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")]
    L = (nx * dx, ny * dx, nz * dx)
    if isinstance(ob, Sphere):
        c = [ob.center[a] * L[a] for a in range(3)]
        mask = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= (ob.radius * L[0]) ** 2
        return VoxelDomain.from_boundary_mask(mask, dx=dx), None
    if isinstance(ob, RotatingBox):
        c = [ob.center[a] * L[a] for a in range(3)]
        h = [ob.half_width[a] * L[a] for a in range(3)]
        th = ob.angular_speed * t
        cos, sin = math.cos(th), math.sin(th)
        # body-frame coordinates: rotate back by -theta
        bx = cos * (X - c[0]) + sin * (Y - c[1])
        by = -sin * (X - c[0]) + cos * (Y - c[1])
        mask = (np.abs(bx) <= h[0]) & (np.abs(by) <= h[1]) & (np.abs(Z - c[2]) <= h[2])
        om = ob.angular_speed

        def solid_velocity(pts):
            px, py, _ = pts
            return (-om * (py - c[1]), om * (px - c[0]), np.zeros_like(px))

        return VoxelDomain.from_boundary_mask(mask, dx=dx), solid_velocity
    raise TypeError(f"unknown obstacle {ob!r}")


# -- projection ------------------------------------------------------------------------


def _net_flux(grid: MacGrid) -> np.ndarray:
    return (
        grid.u[1:] - grid.u[:-1] + grid.v[:, 1:] - grid.v[:, :-1] + grid.w[:, :, 1:] - grid.w[:, :, :-1]
    )


def divergence(grid: MacGrid) -> np.ndarray:
    """MAC divergence per cell (1/time), zero on boundary cells."""
    return np.where(grid.domain.fluid, _net_flux(grid) / grid.domain.dx, 0.0)


def build_rhs(grid: MacGrid, cfg: SimConfig | None = None) -> np.ndarray:
    """``b = -(net face flux)`` on fluid cells, mean removed; zero elsewhere.

    Prescribed boundary faces (inlet, obstacles) enter through the flux of the
    fluid cells next to them.
    """
    fluid = grid.domain.fluid
    b = np.where(fluid, -_net_flux(grid), 0.0).ravel()
    f = fluid.ravel()
    if f.any():
        b[f] -= b[f].mean()
    return b


def _apply_pressure(grid: MacGrid, P: np.ndarray) -> None:
    fluid = grid.domain.fluid
    P = P.reshape(grid.domain.dims)
    for comp, axis in ((grid.u, 0), (grid.v, 1), (grid.w, 2)):
        n = fluid.shape[axis]
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        both = fluid[tuple(lo)] & fluid[tuple(hi)]
        inner = [slice(None)] * 3
        inner[axis] = slice(1, n)
        comp[tuple(inner)] -= np.where(both, P[tuple(hi)] - P[tuple(lo)], 0.0)


def pressure_project(grid: MacGrid, solver: Solver, cfg: SimConfig) -> tuple[MacGrid, SolveReport]:
    """Make the velocity discretely divergence-free on fluid cells.

    Boundary faces are set to their prescribed values first, then the pressure
    system is solved and its gradient subtracted from fluid-fluid faces.
    Non-convergence is reported, not raised.
    """
    out = grid.copy()
    set_boundary_velocities(out, cfg)
    A = assemble_poisson(out.domain)
    b = build_rhs(out, cfg)
    report = solver(A, b, out.domain)
    _apply_pressure(out, report.final_x)
    return out, report


class _DomainCache:
    # recompute per-domain setup (factor, basis, oracle) only when labels change
    def __init__(self, build):
        self._build = build
        self._key = None
        self._val = None

    def get(self, A, domain):
        key = (domain.dims, domain.labels.tobytes())
        if key != self._key:
            self._key, self._val = key, self._build(A, domain)
        return self._val


def make_solver(name: str, cfg: SolverConfig, model=None, deflation_size: int = 16, seed: int = 0) -> Solver:
    """Pressure solver by name: cg, icpcg, dpcg, dcdm (needs ``model``)."""
    if name == "cg":
        return lambda A, b, domain: cg(A, b, cfg=cfg)
    if name == "icpcg":
        cache = _DomainCache(lambda A, d: ic0_factor(A))
        return lambda A, b, domain: pcg(A, b, None, cache.get(A, domain), cfg)
    if name == "dpcg":

        def setup(A, d):
            return deflation_vectors(A, d.fluid, deflation_size, seed), ic0_factor(A)

        cache = _DomainCache(setup)

        def solve_dpcg(A, b, domain):
            W, L = cache.get(A, domain)
            return deflated_pcg(A, b, W, cfg, L=L)

        return solve_dpcg
    if name == "dcdm":
        if model is None:
            raise ValueError("dcdm needs a trained model")
        from .model import as_oracle

        cache = _DomainCache(lambda A, d: as_oracle(model, d))
        return lambda A, b, domain: dcdm(A, b, np.zeros(A.n), cache.get(A, domain), cfg)
    raise ValueError(f"unknown solver {name!r}")


# -- driver ----------------------------------------------------------------------------


@dataclass
class SimResult:
    grid: MacGrid
    reports: list[SolveReport] = field(default_factory=list)
    divergence_reduction: list[float] = field(default_factory=list)


def initial_grid(cfg: SimConfig) -> MacGrid:
    base = VoxelDomain.full(cfg.n, dx=cfg.dx)
    domain, vel = update_obstacle(base, 0.0, cfg)
    grid = MacGrid.zeros(domain)
    grid.solid_velocity = vel
    _inject(grid, cfg)
    return grid


def _inject(grid: MacGrid, cfg: SimConfig) -> None:
    grid.density[:, :, 0][_inlet_cells(grid.domain, cfg.inlet)] = 1.0
    grid.density[~grid.domain.fluid] = 0.0


def step(grid: MacGrid, t: float, cfg: SimConfig, solver: Solver) -> tuple[MacGrid, SolveReport, float]:
    """One frame; returns the new grid, the solve report and the divergence reduction."""
    g = pre_projection(grid, t, cfg)
    before = np.linalg.norm(divergence(_with_boundaries(g, cfg)))
    g, report = pressure_project(g, solver, cfg)
    after = np.linalg.norm(divergence(g))
    return g, report, (after / before if before > 0 else 0.0)


def _with_boundaries(grid, cfg):
    g = grid.copy()
    set_boundary_velocities(g, cfg)
    return g


def pre_projection(grid: MacGrid, t: float, cfg: SimConfig) -> MacGrid:
    """Advect, add forces and move the obstacle: the state handed to the projection."""
    g = apply_forces(advect(grid, cfg.dt), cfg.dt, cfg)
    domain, vel = update_obstacle(g.domain, t + cfg.dt, cfg)
    g.domain, g.solid_velocity = domain, vel
    _inject(g, cfg)
    return g


def save_snapshot(grid: MacGrid, path) -> None:
    nx, ny, nz = grid.domain.dims
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", SNAPSHOT_MAGIC, nx, ny, nz))
        fh.write(np.ascontiguousarray(grid.density, dtype="<f4").tobytes())


def load_snapshot(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, nx, ny, nz = struct.unpack_from("<4sIII", raw)
    if magic != SNAPSHOT_MAGIC or len(raw) != 16 + 4 * nx * ny * nz:
        raise ValueError("malformed snapshot")
    return np.frombuffer(raw, "<f4", offset=16).reshape(nx, ny, nz).astype(np.float64)


def run(cfg: SimConfig, solver: Solver | None = None, model=None) -> SimResult:
    """Simulate ``cfg.frames`` frames, writing snapshots and residuals when ``out_dir`` is set."""
    if solver is None:
        solver = make_solver(cfg.solver, cfg.solver_cfg, model=model)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    grid = initial_grid(cfg)
    result = SimResult(grid)
    rows = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_snapshot(grid, out / "frame_0000.dcdf")
    for frame in range(1, cfg.frames + 1):
        t = (frame - 1) * cfg.dt
        try:
            grid, report, red = step(grid, t, cfg, solver)
        except KrylovError as exc:
            log.error("frame %d: solver failed: %s", frame, exc)
            raise
        if not report.converged:
            log.warning("frame %d: solver stopped after %d iterations", frame, report.iterations)
        result.reports.append(report)
        result.divergence_reduction.append(red)
        rows.extend((frame, i, r) for i, r in enumerate(report.residual_history))
        if out is not None:
            save_snapshot(grid, out / f"frame_{frame:04d}.dcdf")
    result.grid = grid
    if out is not None:
        with open(out / "residuals.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame", "iter", "residual"])
            wr.writerows((f, i, repr(float(r))) for f, i, r in rows)
    return result
