"""Deterministic 2D rigid-body simulator.

Bodies are discs or axis-aligned squares inside a walled square frame
``[-L, L]^2``. Collisions use bounding circles (squares get radius
``half_extent * sqrt(2)``) and are resolved impulsively; integration is
semi-implicit Euler with linear drag. There is no rotation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .config import SceneConfig

PENETRATION_TOL = 1e-6
_MAX_RESOLVE_ITERS = 16


class SimulationError(ValueError):
    pass


class Shape(IntEnum):
    DISC = 0
    SQUARE = 1


SHAPE_NAMES = {"disc": Shape.DISC, "square": Shape.SQUARE}


@dataclass(frozen=True)
class Body:
    shape: Shape
    size: float
    position: tuple[float, float]
    velocity: tuple[float, float]
    mass: float

    @property
    def bounding_radius(self) -> float:
        return bounding_radius(self.shape, self.size)


def bounding_radius(shape, size):
    return np.where(np.asarray(shape) == Shape.SQUARE, np.asarray(size) * np.sqrt(2.0), size)


@dataclass(frozen=True, eq=False)
class WorldState:
    """Immutable scene state. Per-body quantities are stored column-wise.

    Index 0 is the agent in the controlled paradigm and the body receiving
    the initial impulse in the uncontrolled one.
    """

    shapes: np.ndarray  # (n,) int8
    sizes: np.ndarray  # (n,)
    positions: np.ndarray  # (n, 2)
    velocities: np.ndarray  # (n, 2)
    masses: np.ndarray  # (n,)
    frame_half_extent: float
    drag: float
    restitution: float

    def __post_init__(self):
        for name in ("shapes", "sizes", "positions", "velocities", "masses"):
            arr = getattr(self, name)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @property
    def n_bodies(self) -> int:
        return len(self.sizes)

    @property
    def bodies(self) -> list[Body]:
        return [
            Body(Shape(int(s)), float(r), (float(p[0]), float(p[1])), (float(v[0]), float(v[1])), float(m))
            for s, r, p, v, m in zip(self.shapes, self.sizes, self.positions, self.velocities, self.masses)
        ]

    @property
    def bounding_radii(self) -> np.ndarray:
        return bounding_radius(self.shapes, self.sizes)

    def kinetic_energy(self) -> float:
        return float(0.5 * np.sum(self.masses * np.sum(self.velocities**2, axis=1)))

    def momentum(self) -> np.ndarray:
        return np.sum(self.masses[:, None] * self.velocities, axis=0)

    def replace(self, **kw) -> "WorldState":
        fields = dict(shapes=self.shapes, sizes=self.sizes, positions=self.positions,
                      velocities=self.velocities, masses=self.masses,
                      frame_half_extent=self.frame_half_extent, drag=self.drag,
                      restitution=self.restitution)
        fields.update(kw)
        return WorldState(**fields)

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (
            np.array_equal(self.shapes, other.shapes)
            and np.array_equal(self.sizes, other.sizes)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.velocities, other.velocities)
            and np.array_equal(self.masses, other.masses)
            and self.frame_half_extent == other.frame_half_extent
            and self.drag == other.drag
            and self.restitution == other.restitution
        )

    __hash__ = None


def make_state(bodies: list[Body], frame_half_extent=1.0, drag=0.0, restitution=1.0) -> WorldState:
    return WorldState(
        shapes=np.array([int(b.shape) for b in bodies], dtype=np.int8),
        sizes=np.array([b.size for b in bodies], dtype=np.float64),
        positions=np.array([b.position for b in bodies], dtype=np.float64).reshape(-1, 2),
        velocities=np.array([b.velocity for b in bodies], dtype=np.float64).reshape(-1, 2),
        masses=np.array([b.mass for b in bodies], dtype=np.float64),
        frame_half_extent=float(frame_half_extent),
        drag=float(drag),
        restitution=float(restitution),
    )


@dataclass(frozen=True)
class ActionPush:
    """Force in Newtons applied to body 0 for one frame."""

    force: tuple[float, float]

    @property
    def magnitude(self) -> float:
        return float(np.hypot(*self.force))


@dataclass(frozen=True)
class StepReport:
    wall_contact: bool
    pair_contacts: int


def check_state(state: WorldState) -> None:
    n = state.n_bodies
    if not 1 <= n <= 4:
        raise SimulationError(f"body count must be in [1, 4], got {n}")
    for name in ("sizes", "positions", "velocities", "masses"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise SimulationError(f"non-finite values in state.{name}")
    if not all(np.isfinite([state.frame_half_extent, state.drag, state.restitution])):
        raise SimulationError("non-finite world constants")
    if np.any(state.sizes <= 0):
        raise SimulationError("body sizes must be positive")
    if np.any(state.masses <= 0):
        raise SimulationError("body masses must be positive")


def step(state: WorldState, action: ActionPush | None, dt: float, substeps: int = 4,
         max_force: float | None = None) -> WorldState:
    """Advance ``state`` by one frame of length ``dt``."""
    return simulate_step(state, action, dt, substeps, max_force)[0]


def simulate_step(state: WorldState, action: ActionPush | None, dt: float, substeps: int = 4,
                  max_force: float | None = None) -> tuple[WorldState, StepReport]:
    """Like :func:`step` but also reports whether walls or pairs were touched."""
    if not dt > 0:
        raise SimulationError(f"dt must be positive, got {dt}")
    check_state(state)
    force = np.zeros(2)
    if action is not None:
        force = np.asarray(action.force, dtype=np.float64)
        if force.shape != (2,) or not np.all(np.isfinite(force)):
            raise SimulationError(f"non-finite or malformed action force {action.force}")
        if max_force is not None and action.magnitude > max_force * (1 + 1e-12):
            raise SimulationError(f"action magnitude {action.magnitude} exceeds maximum {max_force}")

    h = dt / substeps
    damp = 1.0 - state.drag * h
    if not 0 < damp <= 1:
        raise SimulationError(f"drag {state.drag} too large for substep {h}")
    pos = state.positions.copy()
    vel = state.velocities.copy()
    inv_mass = 1.0 / state.masses
    radii = state.bounding_radii
    e = state.restitution
    L = state.frame_half_extent
    wall = False
    pairs = 0
    for _ in range(substeps):
        vel[0] += force * (inv_mass[0] * h)
        vel *= damp
        pos += vel * h
        w, p = _resolve(pos, vel, radii, inv_mass, e, L)
        wall |= w
        pairs += p
    out = state.replace(positions=pos, velocities=vel)
    return out, StepReport(wall_contact=wall, pair_contacts=pairs)


def _resolve_walls(pos, vel, radii, e, L) -> bool:
    touched = False
    n = len(radii)
    for i in range(n):
        lim = L - radii[i]
        for ax in range(2):
            if pos[i, ax] > lim:
                pos[i, ax] = lim
                if vel[i, ax] > 0:
                    vel[i, ax] = -e * vel[i, ax]
                touched = True
            elif pos[i, ax] < -lim:
                pos[i, ax] = -lim
                if vel[i, ax] < 0:
                    vel[i, ax] = -e * vel[i, ax]
                touched = True
    return touched


def _resolve_pairs(pos, vel, radii, inv_mass, e) -> tuple[int, bool]:
    contacts = 0
    moved = False
    n = len(radii)
    for i in range(n):
        for j in range(i + 1, n):
            d = pos[j] - pos[i]
            dist = float(np.hypot(d[0], d[1]))
            overlap = radii[i] + radii[j] - dist
            if overlap <= 0:
                continue
            contacts += 1
            normal = d / dist if dist > 0 else np.array([1.0, 0.0])
            w = inv_mass[i] + inv_mass[j]
            vrel = float((vel[j] - vel[i]) @ normal)
            if vrel < 0:
                impulse = -(1.0 + e) * vrel / w
                vel[i] -= (impulse * inv_mass[i]) * normal
                vel[j] += (impulse * inv_mass[j]) * normal
            if overlap > PENETRATION_TOL * 0.5:
                pos[i] -= (overlap * inv_mass[i] / w) * normal
                pos[j] += (overlap * inv_mass[j] / w) * normal
                moved = True
    return contacts, moved


def _resolve(pos, vel, radii, inv_mass, e, L) -> tuple[bool, int]:
    # walls first, then pairs in ascending index order; repeat until separated
    wall = _resolve_walls(pos, vel, radii, e, L)
    contacts = 0
    for _ in range(_MAX_RESOLVE_ITERS):
        c, moved = _resolve_pairs(pos, vel, radii, inv_mass, e)
        contacts += c
        if not moved:
            break
        wall |= _resolve_walls(pos, vel, radii, e, L)
    return wall, contacts


def contained(state: WorldState, tol: float = 1e-12) -> bool:
    lim = state.frame_half_extent - state.bounding_radii
    return bool(np.all(np.abs(state.positions) <= lim[:, None] + tol))


def max_overlap(state: WorldState) -> float:
    r = state.bounding_radii
    worst = 0.0
    for i in range(state.n_bodies):
        for j in range(i + 1, state.n_bodies):
            dist = float(np.hypot(*(state.positions[j] - state.positions[i])))
            worst = max(worst, r[i] + r[j] - dist)
    return worst


def _body_size_range(config: SceneConfig, index: int) -> tuple[float, float]:
    if index == 0 and config.agent_size_range is not None:
        return config.agent_size_range
    return config.size_range


def sample_initial_state(rng: np.random.Generator, config: SceneConfig) -> WorldState:
    """Random shapes, sizes, masses and non-overlapping positions; zero velocities.

    Each body is placed by rejection sampling; bodies already placed are never
    moved, so body 0's position is exactly uniform over its feasible box.
    """
    config.validate()
    n = config.n_bodies
    L = config.frame_half_extent
    shape_pool = [SHAPE_NAMES[s] for s in config.shapes]
    shapes = np.array([shape_pool[int(rng.integers(len(shape_pool)))] for _ in range(n)], dtype=np.int8)
    sizes = np.array([rng.uniform(*_body_size_range(config, i)) for i in range(n)])
    masses = np.array([rng.uniform(*config.mass_range) for _ in range(n)])
    radii = bounding_radius(shapes, sizes)
    positions = np.zeros((n, 2))
    for i in range(n):
        lim = L - radii[i]
        for _attempt in range(config.max_placement_attempts):
            candidate = rng.uniform(-lim, lim, size=2)
            if all(np.hypot(*(candidate - positions[j])) >= radii[i] + radii[j] for j in range(i)):
                positions[i] = candidate
                break
        else:
            raise SimulationError(
                f"could not place body {i} after {config.max_placement_attempts} attempts "
                f"(scene config: n_bodies={n}, size_range={config.size_range}, "
                f"frame_half_extent={L})"
            )
    return WorldState(
        shapes=shapes,
        sizes=sizes,
        positions=positions,
        velocities=np.zeros((n, 2)),
        masses=masses,
        frame_half_extent=L,
        drag=config.drag,
        restitution=config.restitution,
    )


def sample_push(rng: np.random.Generator, magnitude_range: tuple[float, float]) -> ActionPush:
    lo, hi = magnitude_range
    if not 0 <= lo <= hi:
        raise SimulationError(f"invalid force magnitude range {magnitude_range}")
    angle = rng.uniform(0.0, 2.0 * np.pi)
    mag = rng.uniform(lo, hi)
    return ActionPush((float(mag * np.cos(angle)), float(mag * np.sin(angle))))


def sample_initial_impulse(rng: np.random.Generator, config: SceneConfig) -> ActionPush:
    """Uniform direction on the circle, magnitude uniform in ``impulse_range``."""
    return sample_push(rng, config.impulse_range)


def sample_action(rng: np.random.Generator, config: SceneConfig) -> ActionPush:
    return sample_push(rng, config.action_range)
