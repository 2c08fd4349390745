"""Quantitative evaluation: nearest-neighbour retrieval, latent invariance,
and the separable-encoder experiment showing domain weights vanish."""

from __future__ import annotations

import math
import warnings
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, adam_step, forward_backward
from .config import ExperimentConfig, Prop1Config
from .contrastive import info_nce_logits, similarity_logits
from .datagen import derive_seed, gen_controlled_episode, gen_uncontrolled_episode
from .models import SeparableEncoder, encode_batched
from .renderer import render, render_mask, sample_domain
from .worldsim import WorldState


class EvalError(ValueError):
    pass


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise EvalError(f"iou: mask shapes differ {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def object_distance(state_a: WorldState, state_b: WorldState) -> float:
    """Sum over body index of center-to-center distances (meters)."""
    if state_a.n_bodies != state_b.n_bodies:
        raise EvalError(f"object_distance: {state_a.n_bodies} vs {state_b.n_bodies} bodies")
    d = state_a.positions - state_b.positions
    return float(np.sum(np.sqrt(np.sum(d * d, axis=1))))


def pairwise_iou(masks_a: np.ndarray, masks_b: np.ndarray) -> np.ndarray:
    """(n_a, n_b) IOU matrix for stacks of masks."""
    a = masks_a.reshape(len(masks_a), -1).astype(np.float64)
    b = masks_b.reshape(len(masks_b), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return out


def pairwise_object_distance(pos_a: np.ndarray, pos_b: np.ndarray) -> np.ndarray:
    """(n_a, n_b) summed per-body distances from (n, bodies, 2) position stacks."""
    diff = pos_a[:, None, :, :] - pos_b[None, :, :, :]
    return np.sqrt((diff**2).sum(-1)).sum(-1)


@dataclass
class RenderedSet:
    """States with their rendered images and object masks."""

    states: list[WorldState]
    images: np.ndarray
    masks: np.ndarray
    domains: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([s.positions for s in self.states])

    def subset(self, idx) -> "RenderedSet":
        idx = list(idx)
        return RenderedSet([self.states[i] for i in idx], self.images[idx], self.masks[idx],
                           [self.domains[i] for i in idx] if self.domains else [])


def sample_states(cfg: ExperimentConfig, paradigm: str, purpose: str, count: int) -> list[WorldState]:
    """States at random frames of fresh episodes (seeds disjoint from training)."""
    scene = cfg.scene.for_paradigm(paradigm)
    gen = gen_controlled_episode if paradigm == "controlled" else gen_uncontrolled_episode
    out = []
    for i in range(count):
        seed = derive_seed(cfg.seed, paradigm, purpose, i)
        ep = gen(seed, scene.episode_length, scene, {0})
        t = int(np.random.default_rng([seed, 9]).integers(ep.length))
        out.append(ep.states[t])
    return out


def make_rendered_set(cfg: ExperimentConfig, states: list[WorldState], family_pool, seed: int) -> RenderedSet:
    rng = np.random.default_rng(seed)
    res = cfg.renderer.resolution
    doms = [sample_domain(rng, family_pool, s.n_bodies, **cfg.renderer.domain_kwargs())
            for s in states]
    images = np.stack([render(s, d, res) for s, d in zip(states, doms)])
    masks = np.stack([render_mask(s, res) for s in states])
    return RenderedSet(states, images, masks, doms)


def _latents(encoder, images: np.ndarray) -> np.ndarray:
    if callable(encoder) and not hasattr(encoder, "resolution"):
        return np.asarray(encoder(images), dtype=np.float64)
    return encode_batched(encoder, images)


def nearest_neighbors(query_z: np.ndarray, pool_z: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Index of the nearest pool latent for every query; ties go to the lowest index."""
    if len(pool_z) == 0:
        raise EvalError("retrieval pool is empty")
    if metric == "cosine":
        qn = query_z / np.maximum(np.linalg.norm(query_z, axis=1, keepdims=True), 1e-300)
        pn = pool_z / np.maximum(np.linalg.norm(pool_z, axis=1, keepdims=True), 1e-300)
        dist = 1.0 - qn @ pn.T
    elif metric == "euclidean":
        dist = ((query_z[:, None, :] - pool_z[None, :, :]) ** 2).sum(-1)
    else:
        raise EvalError(f"unknown retrieval metric {metric!r}")
    return np.argmin(dist, axis=1)


@dataclass
class RetrievalReport:
    split: str
    n_queries: int
    pool_size: int
    iou_mean: float
    iou_std: float
    distance_mean: float
    distance_std: float
    random_iou_mean: float
    random_distance_mean: float

    def as_dict(self) -> dict:
        return asdict(self)


def retrieval_eval(encoder, queries: RenderedSet, pool: RenderedSet, metric: str = "cosine",
                   split: str = "ood") -> RetrievalReport:
    """Retrieve each query's latent nearest neighbour from ``pool`` and score it
    by mask IOU and summed object distance against the query's true state.

    ``encoder`` is an :class:`Encoder` or any callable mapping an image stack to
    latents. The random baseline averages over all (query, pool) pairs.
    """
    if len(pool) == 0:
        raise EvalError("retrieval pool is empty")
    qz = _latents(encoder, queries.images)
    pz = _latents(encoder, pool.images)
    nn = nearest_neighbors(qz, pz, metric)
    ious = np.array([iou(queries.masks[i], pool.masks[j]) for i, j in enumerate(nn)])
    qpos, ppos = queries.positions, pool.positions
    dists = np.sqrt(((qpos - ppos[nn]) ** 2).sum(-1)).sum(-1)
    rand_iou = float(pairwise_iou(queries.masks, pool.masks).mean())
    rand_dist = float(pairwise_object_distance(qpos, ppos).mean())
    return RetrievalReport(split, len(queries), len(pool), float(ious.mean()), float(ious.std()),
                           float(dists.mean()), float(dists.std()), rand_iou, rand_dist)


@dataclass
class InvarianceReport:
    n_pairs: int
    n_excluded: int
    cosine_mean: float
    cosine_std: float
    mse_mean: float
    mse_std: float

    def as_dict(self) -> dict:
        return asdict(self)


def invariance_eval(encoder, states: list[WorldState], domain_pairs: list, resolution: int = 32,
                    min_pairs: int = 200, allow_equal: bool = False) -> InvarianceReport:
    """Cosine similarity and MSE between latents of o(x, e1) and o(x, e2)."""
    if len(states) != len(domain_pairs):
        raise EvalError("one domain pair per state is required")
    if len(states) < min_pairs:
        raise EvalError(f"invariance_eval needs at least {min_pairs} (x, e1, e2) triples, got {len(states)}")
    if not allow_equal and any(e1 == e2 for e1, e2 in domain_pairs):
        raise EvalError("invariance_eval: e1 must differ from e2")
    img1 = np.stack([render(s, e1, resolution) for s, (e1, _) in zip(states, domain_pairs)])
    img2 = np.stack([render(s, e2, resolution) for s, (_, e2) in zip(states, domain_pairs)])
    return invariance_from_images(encoder, img1, img2)


def invariance_from_images(encoder, img1: np.ndarray, img2: np.ndarray) -> InvarianceReport:
    z1 = _latents(encoder, img1)
    z2 = _latents(encoder, img2)
    n1 = np.linalg.norm(z1, axis=1)
    n2 = np.linalg.norm(z2, axis=1)
    ok = (n1 > 0) & (n2 > 0)
    excluded = int((~ok).sum())
    if excluded:
        warnings.warn(f"invariance_eval: {excluded} pairs with an all-zero latent excluded", RuntimeWarning)
    same = np.all(z1 == z2, axis=1)
    cos = np.where(same, 1.0, np.sum(z1 * z2, axis=1) / np.where(ok, n1 * n2, 1.0))
    cos = np.clip(cos[ok], -1.0, 1.0)
    mse = np.mean((z1 - z2) ** 2, axis=1)[ok]
    if len(cos) == 0:
        return InvarianceReport(len(z1), excluded, float("nan"), float("nan"), float("nan"), float("nan"))
    return InvarianceReport(len(z1), excluded, float(cos.mean()), float(cos.std()),
                            float(mse.mean()), float(mse.std()))


def invariance_pairs(cfg: ExperimentConfig, states: list[WorldState], family_pool, seed: int):
    rng = np.random.default_rng(seed)
    kw = cfg.renderer.domain_kwargs()
    return [(sample_domain(rng, family_pool, s.n_bodies, **kw), sample_domain(rng, family_pool, s.n_bodies, **kw))
            for s in states]


# separable-encoder experiment

@dataclass
class Prop1Trial:
    seed: int
    ratio: float
    loss_full: float
    loss_restricted: float
    loss_substituted: float
    converged: bool


@dataclass
class Prop1Report:
    regime: str
    trials: list[Prop1Trial]

    @property
    def ratios(self) -> np.ndarray:
        return np.array([t.ratio for t in self.trials])

    @property
    def median_ratio(self) -> float:
        return float(np.median(self.ratios))

    def count_below(self, threshold: float) -> int:
        return int(np.sum(self.ratios <= threshold))

    @property
    def max_restricted_gap(self) -> float:
        return max(abs(t.loss_restricted - t.loss_full) / t.loss_full for t in self.trials)

    @property
    def max_substituted_gap(self) -> float:
        return max((t.loss_substituted - t.loss_full) / t.loss_full for t in self.trials)

    @property
    def all_converged(self) -> bool:
        return all(t.converged for t in self.trials)


def _feature_map(rng, in_dim: int, out_dim: int) -> Callable[[np.ndarray], np.ndarray]:
    a = rng.standard_normal((in_dim, out_dim))
    c = rng.uniform(-0.5, 0.5, size=out_dim)
    return lambda v: np.tanh(v @ a + c)


def prop1_problem(cfg: Prop1Config, regime: str, seed: int):
    """Synthetic (phi_x, phi_e, y) data. In the dependent regime y also reads e."""
    if regime not in ("indep", "dep"):
        raise EvalError(f"regime must be indep or dep, got {regime!r}")
    rng = np.random.default_rng([cfg.seed, seed])
    phi_x = _feature_map(rng, cfg.x_dim, cfg.feature_dim)
    phi_e = _feature_map(rng, cfg.e_dim, cfg.feature_dim)
    b_true = rng.standard_normal((cfg.feature_dim, cfg.out_dim)) / np.sqrt(cfg.feature_dim)
    c_true = rng.standard_normal((cfg.feature_dim, cfg.out_dim)) / np.sqrt(cfg.feature_dim)
    x = rng.uniform(-1, 1, size=(cfg.n_samples, cfg.x_dim))
    e = rng.uniform(-1, 1, size=(cfg.n_samples, cfg.e_dim))
    fx, fe = phi_x(x), phi_e(e)
    pre = fx @ b_true
    if regime == "dep":
        pre = pre + cfg.dep_strength * (fe @ c_true)
    y = np.tanh(pre) if cfg.activation == "tanh" else pre
    y = y + cfg.noise_std * rng.standard_normal(y.shape)
    return fx, fe, y, rng


def _prop1_loss(model: SeparableEncoder, fx, fe, y, loss: str, use_e: bool = True) -> ad.Tensor:
    out = model(fx, fe, use_e)
    if loss == "mse":
        diff = out - y
        return (diff * diff).mean()
    return info_nce_logits(similarity_logits(out, y, "dotexp"))


def _fit(model: SeparableEncoder, fx, fe, y, cfg: Prop1Config, use_e: bool, rng) -> tuple[float, bool]:
    params = model.params
    names = params.names() if use_e else [n for n in params.names() if not n.endswith("w_e")]
    batch = None
    for t in range(cfg.steps):
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.steps))
        if cfg.loss == "infonce":
            batch = rng.choice(len(fx), size=min(128, len(fx)), replace=False)
            args = (fx[batch], fe[batch], y[batch])
        else:
            args = (fx, fe, y)
        _, grads = forward_backward(lambda: _prop1_loss(model, *args, cfg.loss, use_e), params)
        if not use_e:
            grads = {k: (g if k in names else np.zeros_like(g)) for k, g in grads.items()}
        adam_step(params, grads, lr=max(lr, 1e-12))
    with ad.no_grad():
        final = _full_loss(model, fx, fe, y, cfg, use_e, rng)
    _, grads = forward_backward(lambda: _prop1_loss(model, fx, fe, y, "mse" if cfg.loss == "mse" else cfg.loss, use_e),
                                params)
    gnorm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
    return final, (cfg.loss != "mse") or gnorm < 1e-3


def _full_loss(model, fx, fe, y, cfg: Prop1Config, use_e: bool, rng) -> float:
    if cfg.loss == "mse":
        return float(_prop1_loss(model, fx, fe, y, "mse", use_e).data)
    # fixed sweep of minibatches for a deterministic InfoNCE estimate
    sweep = np.random.default_rng(0).permutation(len(fx))
    vals = [float(_prop1_loss(model, fx[i], fe[i], y[i], "infonce", use_e).data)
            for i in np.array_split(sweep, max(1, len(fx) // 128))]
    return float(np.mean(vals))


def _norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(a * a)))


def prop1_trial(cfg: Prop1Config, regime: str, seed: int) -> Prop1Trial:
    fx, fe, y, rng = prop1_problem(cfg, regime, seed)
    init_rng = np.random.default_rng([cfg.seed, seed, 1])
    full = SeparableEncoder(cfg.feature_dim, cfg.feature_dim, cfg.out_dim, ParamStore(), cfg.activation, init_rng)
    w_init = full.params.values()
    loss_full, converged = _fit(full, fx, fe, y, cfg, True, np.random.default_rng([seed, 2]))
    w_x = full.p("w_x").data
    w_e = full.p("w_e").data
    b = full.p("b").data

    # retrain with W_e clamped to zero and a free bias
    restricted = SeparableEncoder(cfg.feature_dim, cfg.feature_dim, cfg.out_dim, ParamStore(w_init), cfg.activation)
    restricted.p("w_e").data = np.zeros_like(w_e)
    loss_restricted, conv_r = _fit(restricted, fx, fe, y, cfg, False, np.random.default_rng([seed, 3]))

    # substitution: drop W_e and fold W_e^T phi_e(e*) into the bias, e* the best fixed domain
    candidates = fe[: min(256, len(fe))]
    best = math.inf
    for cand in candidates:
        fixed = np.broadcast_to(cand, fe.shape)
        pre = fx @ w_x + fixed @ w_e + b
        out = np.tanh(pre) if cfg.activation == "tanh" else pre
        g = float(np.mean((out - y) ** 2)) if cfg.loss == "mse" else None
        if g is None:
            break
        if g < best:
            best, e_star = g, cand
    if cfg.loss == "mse":
        b_sub = b + e_star @ w_e
        pre = fx @ w_x + b_sub
        out = np.tanh(pre) if cfg.activation == "tanh" else pre
        loss_sub = float(np.mean((out - y) ** 2))
    else:
        loss_sub = loss_restricted
    ratio = _norm(w_e) / max(_norm(w_x), 1e-300)
    return Prop1Trial(seed, ratio, loss_full, loss_restricted, loss_sub, converged and conv_r)


def prop1_experiment(cfg: Prop1Config, regime: str, trials: int | None = None) -> Prop1Report:
    """Train separable encoders over several seeds and report ||W_e|| / ||W_x||."""
    trials = trials or cfg.trials
    report = Prop1Report(regime, [prop1_trial(cfg, regime, s) for s in range(trials)])
    if not report.all_converged:
        warnings.warn(f"prop1 ({regime}): some trials did not converge", RuntimeWarning)
    return report


def retrieval_sets(cfg: ExperimentConfig, paradigm: str, pool_size: int | None = None,
                   n_queries: int | None = None, split: str = "ood") -> tuple[RenderedSet, RenderedSet]:
    """(queries, pool). Both use states from fresh episodes never seen in training.

    The pool is rendered under training-family domains; queries use the
    held-out families for ``split="ood"`` and the training families for ``"in"``.
    """
    from .datagen import family_pools

    if split not in ("in", "ood"):
        raise EvalError(f"split must be in or ood, got {split!r}")
    ec = cfg.evaluation
    train_pool, ood_pool = family_pools(cfg)
    pool_states = sample_states(cfg, paradigm, "retrieval-pool", pool_size or ec.pool_size)
    query_states = sample_states(cfg, paradigm, "retrieval-query", n_queries or ec.n_queries)
    pool = make_rendered_set(cfg, pool_states, train_pool, derive_seed(cfg.seed, ec.seed, "pool-domains"))
    queries = make_rendered_set(cfg, query_states, ood_pool if split == "ood" else train_pool,
                                derive_seed(cfg.seed, ec.seed, "query-domains", split))
    return queries, pool


def invariance_sets(cfg: ExperimentConfig, paradigm: str, n_pairs: int | None = None, split: str = "in"):
    """Fresh states with two independently drawn domains each."""
    from .datagen import family_pools

    if split not in ("in", "ood"):
        raise EvalError(f"split must be in or ood, got {split!r}")
    train_pool, ood_pool = family_pools(cfg)
    states = sample_states(cfg, paradigm, "invariance", n_pairs or cfg.evaluation.n_pairs)
    pairs = invariance_pairs(cfg, states, ood_pool if split == "ood" else train_pool,
                             derive_seed(cfg.seed, cfg.evaluation.seed, "invariance-domains", split))
    return states, pairs
