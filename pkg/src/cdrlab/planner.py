"""Greedy one-step model-predictive control in latent space."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, PlanConfig, SceneConfig
from .datagen import derive_seed, family_pools
from .evaluation import object_distance
from .models import Encoder, ForwardModel, encode
from .renderer import DomainParams, render, sample_domain
from .worldsim import ActionPush, WorldState, sample_action, sample_initial_state, step

Sampler = Callable[[np.random.Generator, int], np.ndarray]


class PlanError(ValueError):
    pass


def push_sampler(scene: SceneConfig) -> Sampler:
    """Candidate pushes drawn like the training actions (uniform angle and magnitude)."""
    lo, hi = scene.action_range

    def sample(rng: np.random.Generator, count: int) -> np.ndarray:
        angle = rng.uniform(0.0, 2.0 * np.pi, size=count)
        mag = rng.uniform(lo, hi, size=count)
        return np.stack([mag * np.cos(angle), mag * np.sin(angle)], axis=1)

    return sample


def latent_distance(preds: np.ndarray, goal: np.ndarray, kind: str = "negl2") -> np.ndarray:
    """Distance of each predicted latent to the goal; smaller is closer."""
    diff = preds - goal[None, :]
    if kind in ("negl2", "sqeuclidean"):
        return np.sum(diff * diff, axis=1)
    if kind == "euclidean":
        return np.sqrt(np.sum(diff * diff, axis=1))
    if kind == "cosine":
        pn = np.linalg.norm(preds, axis=1) * max(np.linalg.norm(goal), 1e-300)
        return 1.0 - preds @ goal / np.maximum(pn, 1e-300)
    raise PlanError(f"unknown planning distance {kind!r}")


def plan_step(z_t, z_goal, forward_model, sampler: Sampler, rng: np.random.Generator,
              config: PlanConfig) -> ActionPush:
    """Sample candidate actions and return the one whose predicted next
    latent is closest to ``z_goal``. Ties go to the lowest candidate index.

    ``forward_model`` is a :class:`ForwardModel` or any callable
    ``(z (1, d), actions (n, 2)) -> (n, d)``.
    """
    if config.candidates < 1:
        raise PlanError("at least one candidate action is required")
    cands = np.asarray(sampler(rng, config.candidates), dtype=np.float64).reshape(-1, 2)
    z = np.asarray(z_t, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        out = forward_model(z, cands)
    preds = out.data if isinstance(out, ad.Tensor) else np.asarray(out, dtype=np.float64)
    d = latent_distance(preds, np.asarray(z_goal, dtype=np.float64).ravel(), config.distance)
    best = int(np.argmin(d))
    return ActionPush((float(cands[best, 0]), float(cands[best, 1])))


@dataclass
class PlanEpisode:
    states: list[WorldState]
    actions: list[ActionPush]
    initial_distance: float
    final_distance: float
    reached: bool


def run_planning_episode(initial: WorldState, goal: WorldState, encoder: Encoder, forward_model: ForwardModel,
                         config: PlanConfig, scene: SceneConfig, domain: DomainParams,
                         goal_domain: DomainParams | None = None, rng: np.random.Generator | None = None,
                         resolution: int = 32, policy: str = "mpc") -> PlanEpisode:
    """Render, encode, pick an action, simulate; at most ``config.max_steps`` times.

    The episode stops early once the summed object distance to the goal is
    within ``config.goal_tolerance``. ``policy="random"`` executes a freshly
    sampled action instead of planning.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    sampler = push_sampler(scene)
    z_goal = encode(encoder, render(goal, goal_domain or domain, resolution))
    s = initial
    states, actions = [s], []
    d0 = object_distance(initial, goal)
    for _ in range(config.max_steps):
        if object_distance(s, goal) <= config.goal_tolerance:
            break
        if policy == "random":
            a = sample_action(rng, scene)
        else:
            z = encode(encoder, render(s, domain, resolution))
            a = plan_step(z, z_goal, forward_model, sampler, rng, config)
        s = step(s, a, scene.dt, scene.substeps, max_force=scene.action_range[1])
        states.append(s)
        actions.append(a)
    final = object_distance(s, goal)
    return PlanEpisode(states, actions, d0, final, final <= config.goal_tolerance)


def make_goal(initial: WorldState, scene: SceneConfig, steps: int, rng: np.random.Generator) -> WorldState:
    """Goal reached from ``initial`` by ``steps`` random pushes."""
    s = initial
    for _ in range(steps):
        s = step(s, sample_action(rng, scene), scene.dt, scene.substeps, max_force=scene.action_range[1])
    return s


@dataclass
class PlanReport:
    goal_domain: str
    policy: str
    initial: np.ndarray
    final: np.ndarray
    reached: np.ndarray
    episodes: list[PlanEpisode] = field(default_factory=list, repr=False)

    @property
    def mean_initial(self) -> float:
        return float(self.initial.mean())

    @property
    def mean_final(self) -> float:
        return float(self.final.mean())

    @property
    def success_rate(self) -> float:
        return float(self.reached.mean())

    def as_dict(self) -> dict:
        return {"goal_domain": self.goal_domain, "policy": self.policy, "episodes": len(self.final),
                "mean_initial_distance": self.mean_initial, "mean_final_distance": self.mean_final,
                "final_std": float(self.final.std()), "success_rate": self.success_rate}


def planning_eval(cfg: ExperimentConfig, encoder: Encoder, forward_model, goal_domain: str = "same",
                  policy: str = "mpc", episodes: int | None = None) -> PlanReport:
    """Run the planning benchmark on seeded controlled episodes.

    Every episode draws its start state, goal pushes and domains from its own
    seed, so the MPC and random policies (and both goal-domain settings) face
    identical tasks.
    """
    if goal_domain not in ("same", "different"):
        raise PlanError(f"goal_domain must be same or different, got {goal_domain!r}")
    if policy not in ("mpc", "random"):
        raise PlanError(f"policy must be mpc or random, got {policy!r}")
    pc = cfg.planning
    scene = cfg.scene.controlled
    pool = family_pools(cfg)[0]
    kw = cfg.renderer.domain_kwargs()
    runs = []
    for i in range(episodes or pc.episodes):
        seed = derive_seed(cfg.seed, "controlled", "plan", pc.seed, i)
        initial = sample_initial_state(np.random.default_rng([seed, 0]), scene)
        goal = make_goal(initial, scene, pc.goal_steps, np.random.default_rng([seed, 1]))
        dom_rng = np.random.default_rng([seed, 2])
        domain = sample_domain(dom_rng, pool, scene.n_bodies, **kw)
        other = sample_domain(dom_rng, pool, scene.n_bodies, **kw)
        runs.append(run_planning_episode(
            initial, goal, encoder, forward_model, pc, scene, domain,
            other if goal_domain == "different" else domain,
            np.random.default_rng([seed, 3]), cfg.renderer.resolution, policy))
    return PlanReport(goal_domain, policy, np.array([r.initial_distance for r in runs]),
                      np.array([r.final_distance for r in runs]), np.array([r.reached for r in runs]), runs)


def relative_degradation(same: PlanReport, different: PlanReport) -> float:
    """Fractional increase of the mean final distance when the goal domain changes."""
    return (different.mean_final - same.mean_final) / max(same.mean_final, 1e-12)
