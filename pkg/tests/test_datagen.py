import dataclasses

import numpy as np
import pytest
from scipy import stats

from cdrlab.config import ExperimentConfig
from cdrlab.datagen import (
    Dataset,
    DatasetError,
    FrameCache,
    build_cdr_batch,
    build_naive_batch,
    build_same_domain_batch,
    decode_dataset,
    encode_dataset,
    family_pools,
    gen_controlled_episode,
    gen_uncontrolled_episode,
    generate_dataset,
    load_dataset,
    render_frame,
    replay_episode,
    save_dataset,
    split_train_val,
)
from cdrlab.renderer import render


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig()


@pytest.fixture(scope="module")
def pool(cfg):
    return family_pools(cfg)[0]


@pytest.fixture(scope="module")
def small(cfg):
    return generate_dataset(cfg, "controlled", 12, T=6)


@pytest.fixture(scope="module")
def small_unc(cfg):
    return generate_dataset(cfg, "uncontrolled", 10, T=12)


def test_episode_shapes(cfg, pool):
    ep = gen_controlled_episode(3, 7, cfg.scene.controlled, pool)
    assert ep.length == 7 and len(ep.actions) == 6 and ep.impulse is None
    ep = gen_uncontrolled_episode(3, 7, cfg.scene.uncontrolled, pool)
    assert ep.length == 7 and ep.actions == () and ep.impulse is not None
    with pytest.raises(DatasetError):
        gen_controlled_episode(3, 1, cfg.scene.controlled, pool)


@pytest.mark.parametrize("paradigm", ["controlled", "uncontrolled"])
def test_replay_is_bitwise(cfg, pool, paradigm):
    scene = cfg.scene.for_paradigm(paradigm)
    gen = gen_controlled_episode if paradigm == "controlled" else gen_uncontrolled_episode
    ep = gen(42, 15, scene, pool)
    for a, b in zip(ep.states, replay_episode(ep, scene)):
        assert a.positions.tobytes() == b.positions.tobytes()
        assert a.velocities.tobytes() == b.velocities.tobytes()
    assert gen(42, 15, scene, pool) == ep


def test_domains_are_drawn_independently(cfg, pool):
    scene = cfg.scene.controlled
    same = sum(gen_controlled_episode(s, 2, scene, pool).domain_a == gen_controlled_episode(s, 2, scene, pool).domain_b
               for s in range(1000))
    assert same == 0


def test_domains_do_not_touch_dynamics(cfg, pool):
    # the physics stream is separate, so changing the family pool leaves states untouched
    scene = cfg.scene.controlled
    a = gen_controlled_episode(9, 8, scene, pool)
    b = gen_controlled_episode(9, 8, scene, family_pools(cfg)[1])
    assert all(x == y for x, y in zip(a.states, b.states)) and a.actions == b.actions
    assert a.domain_a != b.domain_a


def test_zero_action_range_keeps_agent_still(cfg, pool):
    scene = dataclasses.replace(cfg.scene.controlled, action_range=(0.0, 0.0))
    ep = gen_controlled_episode(5, 10, scene, pool)
    p0 = ep.states[0].positions[0]
    assert all(np.array_equal(s.positions[0], p0) for s in ep.states)


def test_controlled_batch_contract(small):
    rng = np.random.default_rng(0)
    b = build_cdr_batch(small, rng, 8, "controlled")
    assert b.pred_obs.shape == (8, 32, 32, 3) and b.label_obs.shape == (8, 32, 32, 3)
    assert b.actions.shape == (8, 2)
    assert len(set(b.episode_idx.tolist())) == 8
    for k in range(8):
        ep = small.episodes[b.episode_idx[k]]
        t = b.t_idx[k]
        np.testing.assert_array_equal(b.pred_obs[k], render(ep.states[t], ep.domain_a, 32))
        np.testing.assert_array_equal(b.label_obs[k], render(ep.states[t + 1], ep.domain_b, 32))
        assert b.actions[k].tolist() == list(ep.actions[t].force)
    nb = build_naive_batch(small, np.random.default_rng(0), 8, "controlled")
    assert all(p is l for p, l in zip(nb.pred_domains, nb.label_domains))


def test_batch_size_limits(small):
    rng = np.random.default_rng(0)
    assert build_cdr_batch(small, rng, 1, "controlled").pred_obs.shape[0] == 1
    big = build_cdr_batch(small, rng, 30, "controlled")  # more items than episodes
    assert len(set(zip(big.episode_idx.tolist(), big.t_idx.tolist()))) == 30
    with pytest.raises(DatasetError, match="exceeds"):
        build_cdr_batch(small, rng, 12 * 5 + 1, "controlled")
    with pytest.raises(DatasetError):
        build_cdr_batch(small, rng, 0, "controlled")
    with pytest.raises(DatasetError, match="paradigm"):
        build_cdr_batch(small, rng, 4, "uncontrolled")


def test_uncontrolled_batch_contract(small_unc):
    b = build_cdr_batch(small_unc, np.random.default_rng(1), 5, "uncontrolled", horizons=3, context=4)
    assert b.context_obs.shape == (5, 4, 32, 32, 3) and b.label_obs.shape == (3, 5, 32, 32, 3)
    for j in range(5):
        ep, t = small_unc.episodes[b.episode_idx[j]], b.t_idx[j]
        assert 3 <= t <= 12 - 1 - 3
        np.testing.assert_array_equal(b.context_obs[j, -1], render(ep.states[t], ep.domain_a, 32))
        np.testing.assert_array_equal(b.context_obs[j, 0], render(ep.states[t - 3], ep.domain_a, 32))
        np.testing.assert_array_equal(b.label_obs[2, j], render(ep.states[t + 3], ep.domain_b, 32))


def test_cache_matches_rendering(small):
    cache = FrameCache(small, 32)
    a = build_cdr_batch(small, np.random.default_rng(3), 6, "controlled", cache=cache)
    b = build_cdr_batch(small, np.random.default_rng(3), 6, "controlled")
    np.testing.assert_allclose(a.pred_obs, b.pred_obs, atol=1e-6)
    np.testing.assert_allclose(a.label_obs, b.label_obs, atol=1e-6)


def test_resampled_batches_use_fresh_domains(small, cfg):
    kw = cfg.renderer.domain_kwargs()
    b = build_cdr_batch(small, np.random.default_rng(4), 6, "controlled", resample=kw)
    for k in range(6):
        ep = small.episodes[b.episode_idx[k]]
        assert b.pred_domains[k] != ep.domain_a and b.pred_domains[k] != b.label_domains[k]
        np.testing.assert_array_equal(b.label_obs[k], render(ep.states[b.t_idx[k] + 1], b.label_domains[k], 32))
    n = build_naive_batch(small, np.random.default_rng(4), 6, "controlled", resample=kw)
    assert all(p is l for p, l in zip(n.pred_domains, n.label_domains))


def test_same_domain_batch(small, small_unc):
    b = build_same_domain_batch(small, np.random.default_rng(2), 5, "controlled")
    assert len({id(d) for d in b.pred_domains + b.label_domains}) == 1
    u = build_same_domain_batch(small_unc, np.random.default_rng(2), 4, "uncontrolled", horizons=2)
    assert u.context_obs.shape == (4, 4, 32, 32, 3) and u.label_obs.shape == (2, 4, 32, 32, 3)


def test_items_uniform_over_episodes(small):
    rng = np.random.default_rng(8)
    counts = np.zeros(len(small))
    for _ in range(600):
        b = build_cdr_batch(small, rng, 4, "controlled")
        np.add.at(counts, b.episode_idx, 1)
    assert stats.chisquare(counts).pvalue > 0.001


def test_roundtrip(small, small_unc, tmp_path):
    for ds in (small, small_unc):
        path = tmp_path / f"{ds.paradigm}.cdrd"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back == ds
        ep, ep2 = ds.episodes[3], back.episodes[3]
        np.testing.assert_array_equal(render_frame(ep, 2, "b", 32), render_frame(ep2, 2, "b", 32))


def test_corrupt_files(small, tmp_path):
    blob = encode_dataset(small)
    with pytest.raises(DatasetError, match="CDRD"):
        decode_dataset(b"XXXX" + blob[4:])
    with pytest.raises(DatasetError):
        decode_dataset(blob[:-5])
    with pytest.raises(DatasetError, match="trailing"):
        decode_dataset(blob + b"\0")
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "missing.cdrd")


def test_split_disjoint(small):
    train, val = split_train_val(small, 0.25)
    assert len(train) + len(val) == len(small) and len(val) == 3
    assert not train.seeds & val.seeds
    assert max(train.seeds) < min(val.seeds)


def test_generation_is_deterministic_and_purposes_differ(cfg):
    a = generate_dataset(cfg, "controlled", 3, T=4)
    assert a == generate_dataset(cfg, "controlled", 3, T=4)
    assert not a.seeds & generate_dataset(cfg, "controlled", 3, purpose="test", T=4).seeds
    assert a.config_hash == cfg.data_hash()


def test_mixed_lengths_rejected(cfg, pool):
    eps = [gen_controlled_episode(1, 4, cfg.scene.controlled, pool), gen_controlled_episode(2, 5, cfg.scene.controlled, pool)]
    with pytest.raises(DatasetError, match="uniform"):
        Dataset("controlled", eps)
