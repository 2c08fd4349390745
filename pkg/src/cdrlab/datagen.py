"""Episode generation, domain intervention, batch assembly and dataset files.

Every episode carries two independently drawn domains: ``domain_a`` (e) for
prediction inputs and ``domain_b`` (e') for intervened labels. Datasets store
states, domains and actions only; pixels are re-rendered on demand.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, SceneConfig
from .renderer import DomainParams, Family, TextureSpec, render, sample_domain, split_families
from .worldsim import (
    ActionPush,
    WorldState,
    sample_action,
    sample_initial_impulse,
    sample_initial_state,
    step,
)

MAGIC = b"CDRD"
FORMAT_VERSION = 1
PARADIGMS = ("uncontrolled", "controlled")
SPLITS = ("train", "val", "test", "all")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PairedEpisode:
    paradigm: str
    seed: int
    states: tuple[WorldState, ...]
    actions: tuple[ActionPush, ...]
    domain_a: DomainParams
    domain_b: DomainParams
    impulse: ActionPush | None = None

    @property
    def length(self) -> int:
        return len(self.states)

    def __eq__(self, other):
        if not isinstance(other, PairedEpisode):
            return NotImplemented
        return (
            self.paradigm == other.paradigm
            and self.seed == other.seed
            and len(self.states) == len(other.states)
            and all(a == b for a, b in zip(self.states, other.states))
            and self.actions == other.actions
            and self.domain_a == other.domain_a
            and self.domain_b == other.domain_b
            and self.impulse == other.impulse
        )

    __hash__ = None


@dataclass(eq=False)
class Dataset:
    paradigm: str
    episodes: list[PairedEpisode]
    split: str = "all"
    family_pool: frozenset = field(default_factory=frozenset)
    config_hash: bytes = b"\0" * 32
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise DatasetError(f"unknown paradigm {self.paradigm!r}")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        lengths = {ep.length for ep in self.episodes}
        if len(lengths) > 1:
            raise DatasetError(f"episode lengths must be uniform, got {sorted(lengths)}")

    def __len__(self):
        return len(self.episodes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.paradigm == other.paradigm
            and self.split == other.split
            and set(self.family_pool) == set(other.family_pool)
            and self.config_hash == other.config_hash
            and self.version == other.version
            and len(self.episodes) == len(other.episodes)
            and all(a == b for a, b in zip(self.episodes, other.episodes))
        )

    __hash__ = None

    @property
    def episode_length(self) -> int:
        return self.episodes[0].length if self.episodes else 0

    @property
    def seeds(self) -> set[int]:
        return {ep.seed for ep in self.episodes}

    def n_transitions(self) -> int:
        return len(self.episodes) * max(self.episode_length - 1, 0)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels (global seed, purpose, index...)."""
    text = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def _streams(seed: int):
    # physics, domain e, domain e' and actions come from separate streams
    return [np.random.default_rng([seed, k]) for k in range(4)]


def gen_uncontrolled_episode(seed: int, T: int, scene: SceneConfig, family_pool,
                             **domain_kw) -> PairedEpisode:
    """Random initial scene, a random push on body 0 during the first frame, then free motion.

    ``domain_kw`` is passed on to ``sample_domain`` for both renderings.
    """
    if T < 2:
        raise DatasetError(f"episode length must be >= 2, got {T}")
    rs, ra, rb, _ = _streams(seed)
    s = sample_initial_state(rs, scene)
    impulse = sample_initial_impulse(rs, scene)
    states = [s]
    for t in range(T - 1):
        s = step(s, impulse if t == 0 else None, scene.dt, scene.substeps)
        states.append(s)
    dom_a = sample_domain(ra, family_pool, scene.n_bodies, **domain_kw)
    dom_b = sample_domain(rb, family_pool, scene.n_bodies, **domain_kw)
    return PairedEpisode("uncontrolled", seed, tuple(states), (), dom_a, dom_b, impulse)


def gen_controlled_episode(seed: int, T: int, scene: SceneConfig, family_pool,
                           **domain_kw) -> PairedEpisode:
    """Random pushes on the agent (body 0) at every step."""
    if T < 2:
        raise DatasetError(f"episode length must be >= 2, got {T}")
    rs, ra, rb, ract = _streams(seed)
    s = sample_initial_state(rs, scene)
    states = [s]
    actions = []
    for _ in range(T - 1):
        a = sample_action(ract, scene)
        s = step(s, a, scene.dt, scene.substeps, max_force=scene.action_range[1])
        states.append(s)
        actions.append(a)
    dom_a = sample_domain(ra, family_pool, scene.n_bodies, **domain_kw)
    dom_b = sample_domain(rb, family_pool, scene.n_bodies, **domain_kw)
    return PairedEpisode("controlled", seed, tuple(states), tuple(actions), dom_a, dom_b, None)


def replay_episode(ep: PairedEpisode, scene: SceneConfig) -> list[WorldState]:
    """Re-simulate from the recorded initial state and actions."""
    s = ep.states[0]
    out = [s]
    for t in range(ep.length - 1):
        if ep.paradigm == "controlled":
            a = ep.actions[t]
        else:
            a = ep.impulse if t == 0 else None
        s = step(s, a, scene.dt, scene.substeps)
        out.append(s)
    return out


def family_pools(cfg: ExperimentConfig):
    return split_families(holdout_count=cfg.renderer.holdout_families, split_seed=cfg.renderer.split_seed)


def episode_seeds(cfg: ExperimentConfig, paradigm: str, purpose: str, count: int) -> list[int]:
    return [derive_seed(cfg.seed, paradigm, purpose, i) for i in range(count)]


def generate_dataset(cfg: ExperimentConfig, paradigm: str, n_episodes: int | None = None,
                     purpose: str = "train", family_pool=None, split: str = "all",
                     T: int | None = None) -> Dataset:
    scene = cfg.scene.for_paradigm(paradigm)
    if n_episodes is None:
        n_episodes = cfg.data.controlled_episodes if paradigm == "controlled" else cfg.data.uncontrolled_episodes
    if family_pool is None:
        family_pool = family_pools(cfg)[0]
    T = T or scene.episode_length
    gen = gen_controlled_episode if paradigm == "controlled" else gen_uncontrolled_episode
    eps = [
        gen(seed, T, scene, family_pool, **cfg.renderer.domain_kwargs())
        for seed in episode_seeds(cfg, paradigm, purpose, n_episodes)
    ]
    return Dataset(paradigm, eps, split, frozenset(family_pool), cfg.data_hash())


def split_train_val(dataset: Dataset, val_fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Hold out the episodes with the largest seeds as validation."""
    order = sorted(dataset.episodes, key=lambda ep: ep.seed)
    n_val = max(1, int(round(val_fraction * len(order)))) if len(order) > 1 else 0
    train = order[:len(order) - n_val]
    val = order[len(order) - n_val:]
    mk = lambda eps, tag: Dataset(dataset.paradigm, eps, tag, dataset.family_pool, dataset.config_hash)
    return mk(train, "train"), mk(val, "val")


# rendering and frame caches

def render_frame(ep: PairedEpisode, t: int, which: str, resolution: int) -> np.ndarray:
    dom = ep.domain_a if which == "a" else ep.domain_b
    return render(ep.states[t], dom, resolution)


class FrameCache:
    """Pre-rendered frames of a dataset under domain a and/or b (float32).

    Storing float32 halves memory; the cast is the only difference from
    :func:`render_frame` output.
    """

    def __init__(self, dataset: Dataset, resolution: int, which: tuple[str, ...] = ("a", "b")):
        self.dataset = dataset
        self.resolution = resolution
        n, T = len(dataset), dataset.episode_length
        self.frames = {}
        for w in which:
            arr = np.empty((n, T, resolution, resolution, 3), dtype=np.float32)
            for i, ep in enumerate(dataset.episodes):
                for t in range(T):
                    arr[i, t] = render_frame(ep, t, w, resolution)
            self.frames[w] = arr

    def get(self, ep_idx, t_idx, which: str) -> np.ndarray:
        return self.frames[which][ep_idx, t_idx].astype(np.float64)


def _frames(dataset, cache, ep_idx, t_idx, which, resolution) -> np.ndarray:
    if cache is not None and which in cache.frames:
        return cache.get(np.asarray(ep_idx), np.asarray(t_idx), which)
    return np.stack([render_frame(dataset.episodes[i], t, which, resolution)
                     for i, t in zip(np.ravel(ep_idx), np.ravel(t_idx))]).reshape(
        np.shape(ep_idx) + (resolution, resolution, 3))


@dataclass
class ControlledBatch:
    pred_obs: np.ndarray  # (N, H, W, 3) at time t
    actions: np.ndarray  # (N, 2)
    label_obs: np.ndarray  # (N, H, W, 3) at time t+1
    episode_idx: np.ndarray
    t_idx: np.ndarray
    pred_domains: list
    label_domains: list


@dataclass
class UncontrolledBatch:
    context_obs: np.ndarray  # (B, C, H, W, 3) frames t-C+1..t
    label_obs: np.ndarray  # (K, B, H, W, 3) frames t+1..t+K
    episode_idx: np.ndarray
    t_idx: np.ndarray
    pred_domains: list
    label_domains: list


def sample_items(dataset: Dataset, rng: np.random.Generator, n: int, t_lo: int, t_hi: int):
    """(episode indices, time indices) for n items, t uniform in [t_lo, t_hi].

    Episodes are distinct when n <= number of episodes; otherwise distinct
    (episode, t) pairs are drawn.
    """
    n_eps = len(dataset)
    span = t_hi - t_lo + 1
    if n < 1:
        raise DatasetError("batch size must be >= 1")
    if span < 1:
        raise DatasetError("episodes too short for the requested context/horizon")
    if n > n_eps * span:
        raise DatasetError(f"batch size {n} exceeds the {n_eps * span} available items")
    if n <= n_eps:
        eps = rng.choice(n_eps, size=n, replace=False)
        ts = rng.integers(t_lo, t_hi + 1, size=n)
    else:
        flat = rng.choice(n_eps * span, size=n, replace=False)
        eps, ts = flat // span, t_lo + flat % span
    return eps.astype(np.int64), ts.astype(np.int64)


def _time_window(dataset: Dataset, paradigm: str, horizons: int, context: int) -> tuple[int, int]:
    T = dataset.episode_length
    if paradigm == "controlled":
        return 0, T - 2
    return context - 1, T - 1 - horizons


def _check_paradigm(dataset: Dataset, paradigm: str) -> None:
    if dataset.paradigm != paradigm:
        raise DatasetError(f"dataset paradigm {dataset.paradigm!r} does not match {paradigm!r}")


def _fresh_frames(dataset, eps, t_idx, doms, resolution) -> np.ndarray:
    """Render ``t_idx[..., j]`` of episode ``eps[j]`` under ``doms[j]``; t_idx is (K, n) or (n,)."""
    t_idx = np.asarray(t_idx)
    flat = t_idx.reshape(-1, len(eps))
    out = np.stack([np.stack([render(dataset.episodes[i].states[t], d, resolution)
                              for i, t, d in zip(eps, row, doms)]) for row in flat])
    return out.reshape(t_idx.shape + (resolution, resolution, 3))


def _build(dataset, rng, n, paradigm, label_which, cache, resolution, horizons, context, resample=None):
    _check_paradigm(dataset, paradigm)
    lo, hi = _time_window(dataset, paradigm, horizons, context)
    eps, ts = sample_items(dataset, rng, n, lo, hi)
    if resample is not None:
        n_bodies = dataset.episodes[0].states[0].n_bodies
        fresh = lambda: [sample_domain(rng, dataset.family_pool, n_bodies, **resample) for _ in eps]
        pred_doms = fresh()
        label_doms = fresh() if label_which == "b" else pred_doms
    else:
        pred_doms = [dataset.episodes[i].domain_a for i in eps]
        label_doms = [getattr(dataset.episodes[i], "domain_" + label_which) for i in eps]

    def frames(t_idx, which, doms, ep_idx):
        if resample is not None:
            return _fresh_frames(dataset, eps, t_idx, doms, resolution)
        return _frames(dataset, cache, ep_idx, t_idx, which, resolution)

    if paradigm == "controlled":
        actions = np.array([dataset.episodes[i].actions[t].force for i, t in zip(eps, ts)]).reshape(n, 2)
        return ControlledBatch(
            frames(ts, "a", pred_doms, eps),
            actions,
            frames(ts + 1, label_which, label_doms, eps),
            eps, ts, pred_doms, label_doms,
        )
    ctx_t = ts[None, :] - np.arange(context - 1, -1, -1)[:, None]
    lab_t = ts[None, :] + np.arange(1, horizons + 1)[:, None]
    context_obs = frames(ctx_t, "a", pred_doms, np.broadcast_to(eps[None, :], ctx_t.shape))
    return UncontrolledBatch(
        np.moveaxis(context_obs, 0, 1),
        frames(lab_t, label_which, label_doms, np.broadcast_to(eps[None, :], lab_t.shape)),
        eps, ts, pred_doms, label_doms,
    )


def build_cdr_batch(dataset: Dataset, rng: np.random.Generator, n: int, paradigm: str,
                    cache: FrameCache | None = None, resolution: int = 32,
                    horizons: int = 6, context: int = 4, resample: tuple | None = None):
    """Prediction inputs under e, labels (next / future frames) under the intervened e'.

    By default e and e' are the episode's stored ``domain_a``/``domain_b``.
    With ``resample`` (keyword arguments for ``sample_domain``) every item instead gets
    fresh e and e' drawn from ``rng`` and is rendered on the spot, so no
    texture (or texture pairing) can identify an episode across epochs.
    """
    return _build(dataset, rng, n, paradigm, "b", cache, resolution, horizons, context, resample)


def build_naive_batch(dataset: Dataset, rng: np.random.Generator, n: int, paradigm: str,
                      cache: FrameCache | None = None, resolution: int = 32,
                      horizons: int = 6, context: int = 4, resample: tuple | None = None):
    """Labels rendered under the same domain as their prediction inputs.

    ``resample`` works as in :func:`build_cdr_batch`, with one fresh domain per item.
    """
    return _build(dataset, rng, n, paradigm, "a", cache, resolution, horizons, context, resample)


def build_same_domain_batch(dataset: Dataset, rng: np.random.Generator, n: int, paradigm: str,
                            resolution: int = 32, horizons: int = 6, context: int = 4,
                            **domain_kw):
    """One fresh domain for the whole batch; every item is re-rendered under it."""
    _check_paradigm(dataset, paradigm)
    lo, hi = _time_window(dataset, paradigm, horizons, context)
    eps, ts = sample_items(dataset, rng, n, lo, hi)
    n_bodies = dataset.episodes[0].states[0].n_bodies
    dom = sample_domain(rng, dataset.family_pool, n_bodies, **domain_kw)
    doms = [dom] * n

    def rend(i, t):
        return render(dataset.episodes[i].states[t], dom, resolution)

    if paradigm == "controlled":
        actions = np.array([dataset.episodes[i].actions[t].force for i, t in zip(eps, ts)]).reshape(n, 2)
        return ControlledBatch(
            np.stack([rend(i, t) for i, t in zip(eps, ts)]),
            actions,
            np.stack([rend(i, t + 1) for i, t in zip(eps, ts)]),
            eps, ts, doms, doms,
        )
    ctx = np.stack([np.stack([rend(i, t - c) for c in range(context - 1, -1, -1)]) for i, t in zip(eps, ts)])
    lab = np.stack([np.stack([rend(i, t + k) for i, t in zip(eps, ts)]) for k in range(1, horizons + 1)])
    return UncontrolledBatch(ctx, lab, eps, ts, doms, doms)


# binary dataset format

_TEX = struct.Struct("<B4d6d")
_BODY = struct.Struct("<Bd2d2dd")


def _family_mask(pool) -> int:
    m = 0
    for f in pool:
        m |= 1 << int(f)
    return m


def _pack_texture(t: TextureSpec) -> bytes:
    return _TEX.pack(int(t.family), *t.params, *t.palette[0], *t.palette[1])


def _pack_domain(d: DomainParams) -> bytes:
    parts = [_pack_texture(d.background), struct.pack("<B", len(d.body_textures))]
    parts += [_pack_texture(t) for t in d.body_textures]
    parts.append(struct.pack("<ddQ", d.light, d.pixel_noise_std, d.noise_seed))
    return b"".join(parts)


def encode_dataset(ds: Dataset) -> bytes:
    if len(ds.config_hash) != 32:
        raise DatasetError("config hash must be 32 bytes")
    out = [MAGIC, struct.pack("<H", ds.version), ds.config_hash,
           struct.pack("<IBBH", len(ds.episodes), PARADIGMS.index(ds.paradigm),
                       SPLITS.index(ds.split), _family_mask(ds.family_pool))]
    for ep in ds.episodes:
        s0 = ep.states[0]
        out.append(struct.pack("<QHB3d", ep.seed, ep.length, s0.n_bodies,
                               s0.frame_half_extent, s0.drag, s0.restitution))
        for s in ep.states:
            for i in range(s.n_bodies):
                out.append(_BODY.pack(int(s.shapes[i]), s.sizes[i], *s.positions[i], *s.velocities[i], s.masses[i]))
        out.append(_pack_domain(ep.domain_a))
        out.append(_pack_domain(ep.domain_b))
        out.append(struct.pack("<H", len(ep.actions)))
        for a in ep.actions:
            out.append(struct.pack("<2d", *a.force))
        if ep.impulse is None:
            out.append(struct.pack("<B2d", 0, 0.0, 0.0))
        else:
            out.append(struct.pack("<B2d", 1, *ep.impulse.force))
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, st: struct.Struct | str):
        if isinstance(st, str):
            st = struct.Struct(st)
        if self.pos + st.size > len(self.blob):
            raise DatasetError(f"{self.source}: truncated dataset file at byte {self.pos}")
        vals = st.unpack_from(self.blob, self.pos)
        self.pos += st.size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DatasetError(f"{self.source}: truncated dataset file at byte {self.pos}")
        b = self.blob[self.pos:self.pos + n]
        self.pos += n
        return b


def _read_texture(r: _Reader) -> TextureSpec:
    v = r.take(_TEX)
    return TextureSpec(Family(v[0]), tuple(v[1:5]), (tuple(v[5:8]), tuple(v[8:11])))


def _read_domain(r: _Reader) -> DomainParams:
    bg = _read_texture(r)
    (n,) = r.take("<B")
    bodies = tuple(_read_texture(r) for _ in range(n))
    light, noise, seed = r.take("<ddQ")
    return DomainParams(bg, bodies, light, noise, seed)


def decode_dataset(blob: bytes, source: str = "<bytes>") -> Dataset:
    r = _Reader(blob, source)
    magic = r.raw(4)
    if magic != MAGIC:
        raise DatasetError(f"{source}: bad magic {magic!r}, expected {MAGIC.decode()!r}")
    (version,) = r.take("<H")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{source}: unsupported dataset version {version} (expected {FORMAT_VERSION})")
    chash = r.raw(32)
    count, par, split, mask = r.take("<IBBH")
    if par >= len(PARADIGMS) or split >= len(SPLITS):
        raise DatasetError(f"{source}: corrupt header")
    pool = frozenset(f for f in Family if mask & (1 << int(f)))
    eps = []
    for _ in range(count):
        seed, T, nb, L, drag, rest = r.take("<QHB3d")
        states = []
        for _t in range(T):
            rows = [r.take(_BODY) for _ in range(nb)]
            states.append(WorldState(
                shapes=np.array([b[0] for b in rows], dtype=np.int8),
                sizes=np.array([b[1] for b in rows]),
                positions=np.array([b[2:4] for b in rows]).reshape(nb, 2),
                velocities=np.array([b[4:6] for b in rows]).reshape(nb, 2),
                masses=np.array([b[6] for b in rows]),
                frame_half_extent=L, drag=drag, restitution=rest,
            ))
        dom_a = _read_domain(r)
        dom_b = _read_domain(r)
        (na,) = r.take("<H")
        actions = tuple(ActionPush(r.take("<2d")) for _ in range(na))
        flag, fx, fy = r.take("<B2d")
        impulse = ActionPush((fx, fy)) if flag else None
        eps.append(PairedEpisode(PARADIGMS[par], seed, tuple(states), actions, dom_a, dom_b, impulse))
    if r.pos != len(blob):
        raise DatasetError(f"{source}: {len(blob) - r.pos} trailing bytes after last episode")
    return Dataset(PARADIGMS[par], eps, SPLITS[split], pool, chash, version)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"dataset file not found: {p}")
    return decode_dataset(p.read_bytes(), str(p))
