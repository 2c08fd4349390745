"""Software rasterizer: (WorldState, DomainParams) -> RGB image, plus object masks.

Overhead orthographic view of the frame. Pixel membership is decided by a
center-in-shape test (no anti-aliasing). Textures are procedural families
evaluated in world coordinates for the background and in body-local
coordinates for bodies, so a body's texture moves with it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from pathlib import Path

import numpy as np

from .worldsim import Shape, WorldState

RESOLUTIONS = (16, 32, 64)


class RenderError(ValueError):
    pass


class Family(IntEnum):
    SOLID = 0
    HSTRIPES = 1
    DSTRIPES = 2
    CHECKER = 3
    DOTS = 4
    RINGS = 5
    GRADIENT = 6
    VALUE_NOISE = 7


ALL_FAMILIES: tuple[Family, ...] = tuple(Family)


@dataclass(frozen=True)
class TextureSpec:
    """A procedural texture.

    ``params`` is (frequency, phase, rotation, mix), each in [0, 1];
    ``palette`` holds two RGB colors blended by the family's pattern value.
    """

    family: Family
    params: tuple[float, float, float, float]
    palette: tuple[tuple[float, float, float], tuple[float, float, float]]

    def __post_init__(self):
        if int(self.family) not in range(len(Family)):
            raise RenderError(f"unknown texture family {self.family}")
        if len(self.params) != 4 or not all(0.0 <= p <= 1.0 for p in self.params):
            raise RenderError(f"texture params must be 4 values in [0, 1], got {self.params}")
        if len(self.palette) != 2 or not all(
            len(c) == 3 and all(0.0 <= ch <= 1.0 for ch in c) for c in self.palette
        ):
            raise RenderError(f"palette must be two RGB colors in [0, 1], got {self.palette}")


def solid(color) -> TextureSpec:
    c = tuple(float(v) for v in color)
    return TextureSpec(Family.SOLID, (0.0, 0.0, 0.0, 0.0), (c, c))


@dataclass(frozen=True)
class DomainParams:
    background: TextureSpec
    body_textures: tuple[TextureSpec, ...]
    light: float = 1.0
    pixel_noise_std: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "body_textures", tuple(self.body_textures))
        if not 0.5 <= self.light <= 1.5:
            raise RenderError(f"light must lie in [0.5, 1.5], got {self.light}")
        if not 0.0 <= self.pixel_noise_std <= 0.05:
            raise RenderError(f"pixel_noise_std must lie in [0, 0.05], got {self.pixel_noise_std}")


@lru_cache(maxsize=8)
def pixel_centers(resolution: int, half_extent: float) -> tuple[np.ndarray, np.ndarray]:
    """World (x, y) of every pixel center; row 0 is the top edge (y = +L)."""
    idx = (np.arange(resolution) + 0.5) * (2.0 * half_extent / resolution)
    xs = -half_extent + idx
    ys = half_extent - idx
    gx, gy = np.meshgrid(xs, ys)
    gx.flags.writeable = False
    gy.flags.writeable = False
    return gx, gy


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    h = (ix.astype(np.int64) * 374761393 + iy.astype(np.int64) * 668265263 + seed * 2246822519) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return h.astype(np.float64) / 4294967295.0


def pattern(tex: TextureSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Pattern value in [0, 1] at coordinates (u, v) (roughly unit scale)."""
    freq, phase, rot, mix = tex.params
    fam = tex.family
    if fam == Family.SOLID:
        return np.zeros_like(u)
    ang = rot * np.pi
    c, s = np.cos(ang), np.sin(ang)
    ru = c * u - s * v
    rv = s * u + c * v
    k = 1.0 + 5.0 * freq  # cycles per unit length
    if fam == Family.HSTRIPES:
        # stripes stay horizontal; rotation only nudges their tilt
        w = np.sin(2 * np.pi * (k * (v + 0.2 * rot * u) + phase))
        return 0.5 + 0.5 * ((1 - mix) * w + mix * np.sign(w))
    if fam == Family.DSTRIPES:
        w = np.sin(2 * np.pi * (k * (u + v) / np.sqrt(2) + phase))
        return (w > (mix - 0.5)).astype(np.float64)
    if fam == Family.CHECKER:
        a = np.floor(k * ru + phase) + np.floor(k * rv + phase)
        return np.mod(a, 2.0)
    if fam == Family.DOTS:
        fu = k * ru + phase
        fv = k * rv + phase
        du = fu - np.floor(fu) - 0.5
        dv = fv - np.floor(fv) - 0.5
        radius = 0.15 + 0.25 * mix
        return (du * du + dv * dv < radius * radius).astype(np.float64)
    if fam == Family.RINGS:
        r = np.sqrt((u - (phase - 0.5)) ** 2 + (v - (mix - 0.5)) ** 2)
        return 0.5 + 0.5 * np.sin(2 * np.pi * k * r)
    if fam == Family.GRADIENT:
        return np.clip(0.5 + 0.5 * (ru + (phase - 0.5)) * (0.5 + freq), 0.0, 1.0)
    if fam == Family.VALUE_NOISE:
        seed = int(phase * 1e6) + int(mix * 1e3)
        fu = k * ru + 100.0
        fv = k * rv + 100.0
        iu = np.floor(fu)
        iv = np.floor(fv)
        tu = fu - iu
        tv = fv - iv
        tu = tu * tu * (3 - 2 * tu)
        tv = tv * tv * (3 - 2 * tv)
        a = _hash01(iu, iv, seed)
        b = _hash01(iu + 1, iv, seed)
        cc = _hash01(iu, iv + 1, seed)
        d = _hash01(iu + 1, iv + 1, seed)
        return (a * (1 - tu) + b * tu) * (1 - tv) + (cc * (1 - tu) + d * tu) * tv
    raise RenderError(f"unknown texture family {fam}")


def texture_colors(tex: TextureSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    t = pattern(tex, u, v)[..., None]
    c0 = np.asarray(tex.palette[0])
    c1 = np.asarray(tex.palette[1])
    return c0 + (c1 - c0) * t


def _check_resolution(resolution: int) -> None:
    if resolution not in RESOLUTIONS:
        raise RenderError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")


def body_masks(state: WorldState, resolution: int) -> np.ndarray:
    """(n_bodies, H, W) booleans: pixel center inside each body's shape."""
    _check_resolution(resolution)
    gx, gy = pixel_centers(resolution, state.frame_half_extent)
    n = state.n_bodies
    out = np.zeros((n, resolution, resolution), dtype=bool)
    for i in range(n):
        px, py = state.positions[i]
        r = state.sizes[i]
        dx = gx - px
        dy = gy - py
        if state.shapes[i] == Shape.SQUARE:
            out[i] = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        else:
            out[i] = dx * dx + dy * dy <= r * r
    return out


def render_mask(state: WorldState, resolution: int) -> np.ndarray:
    """H x W booleans, true where any body covers the pixel center."""
    return body_masks(state, resolution).any(axis=0)


def render(state: WorldState, domain: DomainParams, resolution: int = 32) -> np.ndarray:
    """Render an H x W x 3 float64 image in [0, 1].

    Bodies are painted in index order, so higher indices are on top.
    """
    _check_resolution(resolution)
    if len(domain.body_textures) != state.n_bodies:
        raise RenderError(
            f"domain has {len(domain.body_textures)} body textures but state has {state.n_bodies} bodies"
        )
    L = state.frame_half_extent
    gx, gy = pixel_centers(resolution, L)
    img = texture_colors(domain.background, gx / L, gy / L)
    masks = body_masks(state, resolution)
    for i in range(state.n_bodies):
        m = masks[i]
        if not m.any():
            continue
        px, py = state.positions[i]
        scale = 2.0 * state.sizes[i]
        img[m] = texture_colors(domain.body_textures[i], (gx[m] - px) / scale, (gy[m] - py) / scale)
    img *= domain.light
    if domain.pixel_noise_std > 0:
        noise = np.random.default_rng(domain.noise_seed).standard_normal(img.shape)
        img += domain.pixel_noise_std * noise
    np.clip(img, 0.0, 1.0, out=img)
    return img


def sample_texture(rng: np.random.Generator, family_pool, contrast: float = 1.0) -> TextureSpec:
    """Random texture; ``contrast`` < 1 pulls the two palette colors toward their midpoint."""
    pool = sorted(Family(f) for f in family_pool)
    fam = pool[int(rng.integers(len(pool)))]
    params = tuple(float(p) for p in rng.uniform(0.0, 1.0, size=4))
    pal = rng.uniform(0.0, 1.0, size=(2, 3))
    if contrast != 1.0:
        mid = pal.mean(axis=0)
        pal = mid + contrast * (pal - mid)
    return TextureSpec(fam, params, (tuple(map(float, pal[0])), tuple(map(float, pal[1]))))


def sample_domain(rng: np.random.Generator, family_pool, body_count: int,
                  light_range=(0.5, 1.5), noise_std_range=(0.0, 0.05),
                  background_contrast: float = 1.0) -> DomainParams:
    """Draw an independent domain: every texture's family comes from ``family_pool``.

    ``background_contrast`` scales the spread of the background palette only;
    body textures always use the full color range.
    """
    pool = set(family_pool)
    if not pool:
        raise RenderError("family pool must not be empty")
    if not 0.0 <= background_contrast <= 1.0:
        raise RenderError(f"background_contrast must lie in [0, 1], got {background_contrast}")
    background = sample_texture(rng, pool, background_contrast)
    bodies = tuple(sample_texture(rng, pool) for _ in range(body_count))
    light = float(rng.uniform(*light_range))
    noise = float(rng.uniform(*noise_std_range))
    seed = int(rng.integers(0, 2**63 - 1))
    return DomainParams(background, bodies, light, noise, seed)


def split_families(families=ALL_FAMILIES, holdout_count: int = 2, split_seed: int = 7):
    """Partition families into (train_pool, ood_pool) with a seeded permutation."""
    fams = sorted(Family(f) for f in families)
    if not 0 <= holdout_count < len(fams):
        raise RenderError(f"holdout_count must be in [0, {len(fams)}), got {holdout_count}")
    order = np.random.default_rng(split_seed).permutation(len(fams))
    ood = frozenset(fams[i] for i in order[:holdout_count])
    train = frozenset(f for f in fams if f not in ood)
    return train, ood


def to_ppm(image: np.ndarray) -> bytes:
    """Binary PPM (P6, 8-bit) encoding of an H x W x 3 image in [0, 1]."""
    h, w, _ = image.shape
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(to_ppm(image))


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise RenderError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
