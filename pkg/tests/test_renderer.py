import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdrlab.renderer import (
    ALL_FAMILIES,
    DomainParams,
    Family,
    RenderError,
    TextureSpec,
    read_ppm,
    render,
    render_mask,
    sample_domain,
    solid,
    split_families,
    write_ppm,
)
from cdrlab.worldsim import Shape, make_state
from conftest import disc, state_of


def empty_state():
    return make_state([], 1.0)


def flat_domain(color, n_bodies=0, light=1.0, noise=0.0, seed=0):
    return DomainParams(solid(color), tuple(solid((1, 1, 1)) for _ in range(n_bodies)), light, noise, seed)


def test_empty_frame_solid_background():
    c = (0.2, 0.4, 0.6)
    img = render(empty_state(), flat_domain(c), 32)
    assert img.shape == (32, 32, 3)
    assert np.all(img == np.array(c))


def test_render_is_deterministic(rng):
    s = state_of(disc((0.1, 0.2), size=0.2), disc((-0.4, -0.3), size=0.15))
    dom = sample_domain(rng, ALL_FAMILIES, 2)
    assert render(s, dom, 32).tobytes() == render(s, dom, 32).tobytes()


def test_disc_area_matches_analytic():
    r = 0.5
    res = 64
    s = state_of(disc((0.0, 0.0), size=r))
    count = render_mask(s, res).sum()
    px = 2.0 / res
    area = np.pi * (r / px) ** 2
    perimeter = 2 * np.pi * r / px
    assert abs(count - area) <= perimeter


def test_mask_oracle_center_test():
    s = state_of(disc((0.13, -0.21), size=0.3), disc((-0.5, 0.5), size=0.2, shape=Shape.SQUARE))
    res = 32
    mask = render_mask(s, res)
    oracle = np.zeros((res, res), dtype=bool)
    for row in range(res):
        for col in range(res):
            x = -1 + (col + 0.5) * 2 / res
            y = 1 - (row + 0.5) * 2 / res
            in_disc = (x - 0.13) ** 2 + (y + 0.21) ** 2 <= 0.3**2
            in_sq = abs(x + 0.5) <= 0.2 and abs(y - 0.5) <= 0.2
            oracle[row, col] = in_disc or in_sq
    assert np.array_equal(mask, oracle)


def test_mask_empty_and_domain_independent(rng):
    assert not render_mask(empty_state(), 32).any()
    s = state_of(disc((0.1, 0.2), size=0.2))
    m = render_mask(s, 32)
    a, b = sample_domain(rng, ALL_FAMILIES, 1), sample_domain(rng, ALL_FAMILIES, 1)
    assert not np.array_equal(render(s, a), render(s, b))
    assert np.array_equal(m, render_mask(s, 32))


def test_disc_mask_inside_square_mask():
    d = render_mask(state_of(disc((0.05, 0.1), size=0.3)), 64)
    q = render_mask(state_of(disc((0.05, 0.1), size=0.3, shape=Shape.SQUARE)), 64)
    assert np.all(q[d])
    assert q.sum() > d.sum()


def test_light_multiplies_and_topmost_body_wins():
    s = state_of(disc((0.0, 0.0), size=0.4), disc((0.0, 0.0), size=0.2))
    dom = DomainParams(solid((0.5, 0.5, 0.5)), (solid((0.2, 0.2, 0.2)), solid((0.6, 0.0, 0.0))), 1.5)
    img = render(s, dom, 32)
    np.testing.assert_allclose(img[16, 16], [0.9, 0.0, 0.0])
    np.testing.assert_allclose(img[0, 0], [0.75, 0.75, 0.75])


def test_noise_is_seeded_and_clipped():
    s = state_of(disc((0.0, 0.0), size=0.3))
    a = render(s, flat_domain((0.0, 0.5, 1.0), 1, noise=0.05, seed=7))
    b = render(s, flat_domain((0.0, 0.5, 1.0), 1, noise=0.05, seed=7))
    c = render(s, flat_domain((0.0, 0.5, 1.0), 1, noise=0.05, seed=8))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_texture_count_and_resolution_rejected():
    s = state_of(disc((0.0, 0.0)))
    with pytest.raises(RenderError, match="body textures"):
        render(s, flat_domain((0, 0, 0), 2))
    with pytest.raises(RenderError, match="resolution"):
        render(s, flat_domain((0, 0, 0), 1), 48)


def test_domain_param_ranges_validated():
    with pytest.raises(RenderError):
        DomainParams(solid((0, 0, 0)), (), light=2.0)
    with pytest.raises(RenderError):
        DomainParams(solid((0, 0, 0)), (), pixel_noise_std=0.1)
    with pytest.raises(RenderError):
        TextureSpec(Family.DOTS, (0.5, 0.5, 0.5, 1.5), ((0, 0, 0), (1, 1, 1)))


def test_sample_domain_pool_and_determinism():
    dom = sample_domain(np.random.default_rng(1), {Family.SOLID}, 3)
    assert all(t.family == Family.SOLID for t in (dom.background, *dom.body_textures))
    assert len(dom.body_textures) == 3
    assert sample_domain(np.random.default_rng(2), ALL_FAMILIES, 2) == sample_domain(np.random.default_rng(2), ALL_FAMILIES, 2)
    with pytest.raises(RenderError, match="empty"):
        sample_domain(np.random.default_rng(0), set(), 2)


def test_background_contrast_shrinks_background_palette_only():
    full = sample_domain(np.random.default_rng(5), ALL_FAMILIES, 2)
    low = sample_domain(np.random.default_rng(5), ALL_FAMILIES, 2, background_contrast=0.25)
    assert low.body_textures == full.body_textures and low.light == full.light
    assert low.background.family == full.background.family and low.background.params == full.background.params
    c0, c1 = np.array(full.background.palette)
    mid = (c0 + c1) / 2
    np.testing.assert_allclose(np.array(low.background.palette), [mid + 0.25 * (c0 - mid), mid + 0.25 * (c1 - mid)],
                               atol=1e-15)
    with pytest.raises(RenderError, match="background_contrast"):
        sample_domain(np.random.default_rng(5), ALL_FAMILIES, 2, background_contrast=1.5)


def test_family_frequencies_uniform():
    rng = np.random.default_rng(77)
    n = 10_000
    counts = np.zeros(len(ALL_FAMILIES))
    for _ in range(n):
        counts[int(sample_domain(rng, ALL_FAMILIES, 0).background.family)] += 1
    p = 1 / len(ALL_FAMILIES)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_split_families():
    train, ood = split_families()
    assert len(train) == 6 and len(ood) == 2 and not train & ood
    assert train | ood == set(ALL_FAMILIES)
    assert split_families() == (train, ood)
    t0, o0 = split_families(holdout_count=0)
    assert o0 == frozenset() and t0 == frozenset(ALL_FAMILIES)
    with pytest.raises(RenderError):
        split_families(holdout_count=8)


def test_families_are_visually_distinguishable():
    s = state_of(disc((0.2, 0.1), size=0.3), disc((-0.4, -0.3), size=0.2, shape=Shape.SQUARE))
    pal = ((0.1, 0.2, 0.8), (0.9, 0.7, 0.1))
    params = (0.5, 0.3, 0.2, 0.5)
    imgs = []
    for fam in ALL_FAMILIES:
        t = TextureSpec(fam, params, pal) if fam != Family.SOLID else solid(pal[0])
        imgs.append(render(s, DomainParams(t, (t, t)), 32))
    for i in range(len(imgs)):
        for j in range(i + 1, len(imgs)):
            assert np.abs(imgs[i] - imgs[j]).mean() > 0.01, (ALL_FAMILIES[i], ALL_FAMILIES[j])


def test_intervention_identity():
    s = state_of(disc((0.2, 0.1), size=0.3))
    e = sample_domain(np.random.default_rng(3), ALL_FAMILIES, 1)
    same = dataclasses.replace(e)
    assert render(s, e).tobytes() == render(s, same).tobytes()


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.uniform(0, 1, size=(16, 24, 3))
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), res=st.sampled_from([16, 32, 64]))
def test_images_are_clamped_and_finite(seed, res):
    rng = np.random.default_rng(seed)
    s = state_of(disc(rng.uniform(-0.6, 0.6, 2), size=0.2), disc(rng.uniform(-0.6, 0.6, 2), size=0.15))
    img = render(s, sample_domain(rng, ALL_FAMILIES, 2), res)
    assert img.shape == (res, res, 3)
    assert np.all(np.isfinite(img)) and img.min() >= 0 and img.max() <= 1
