import numpy as np
import pytest

from cdrlab.config import ExperimentConfig, Prop1Config
from cdrlab.datagen import family_pools
from cdrlab.evaluation import (
    EvalError,
    RenderedSet,
    invariance_eval,
    invariance_from_images,
    invariance_pairs,
    invariance_sets,
    iou,
    make_rendered_set,
    nearest_neighbors,
    object_distance,
    pairwise_iou,
    prop1_experiment,
    retrieval_eval,
    retrieval_sets,
    sample_states,
)
from conftest import disc, state_of


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig()


@pytest.fixture(scope="module")
def sets(cfg):
    return retrieval_sets(cfg, "controlled", pool_size=150, n_queries=40, split="ood")


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    assert iou(a, b) == 1.0
    a[:2] = True
    assert iou(a, a) == 1.0 and iou(a, b) == 0.0
    b[1:3] = True
    assert iou(a, b) == pytest.approx(1 / 3)
    with pytest.raises(EvalError):
        iou(a, np.zeros((3, 4)))
    np.testing.assert_allclose(pairwise_iou(np.stack([a, b]), np.stack([a, b])), [[1, 1 / 3], [1 / 3, 1]])


def test_object_distance():
    s1 = state_of(disc((0.0, 0.0)), disc((0.5, 0.5)))
    s2 = state_of(disc((0.3, 0.4)), disc((0.5, 0.5)))
    assert object_distance(s1, s1) == 0.0
    assert object_distance(s1, s2) == pytest.approx(0.5)
    far = state_of(disc((-0.3, -0.4)), disc((0.8, 0.9)))
    assert object_distance(s2, far) == pytest.approx(1.0 + 0.5)
    with pytest.raises(EvalError):
        object_distance(s1, state_of(disc((0.0, 0.0))))


def test_nearest_neighbors_ties_and_metrics():
    pool = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    assert nearest_neighbors(np.array([[3.0, 0.0]]), pool).tolist() == [0]
    assert nearest_neighbors(np.array([[2.1, 0.0]]), pool, "euclidean").tolist() == [1]
    with pytest.raises(EvalError):
        nearest_neighbors(pool, pool[:0])


def test_states_are_fresh_and_sets_deterministic(cfg, sets):
    queries, pool = sets
    assert len(queries) == 40 and len(pool) == 150
    q2, _ = retrieval_sets(cfg, "controlled", pool_size=150, n_queries=40, split="ood")
    np.testing.assert_array_equal(q2.images, queries.images)
    ood = family_pools(cfg)[1]
    assert all(t.family in ood for d in queries.domains for t in (d.background, *d.body_textures))


def test_query_in_pool_retrieves_itself(sets):
    _, pool = sets
    flat = lambda imgs: imgs.reshape(len(imgs), -1)
    rep = retrieval_eval(flat, pool.subset(range(10)), pool)
    assert rep.iou_mean == 1.0 and rep.distance_mean == 0.0


def test_constant_encoder_matches_random_baseline(sets):
    queries, pool = sets
    rep = retrieval_eval(lambda imgs: np.ones((len(imgs), 4)), queries, pool)
    # every query gets pool item 0, so the scores are those of one random draw
    assert abs(rep.distance_mean - rep.random_distance_mean) < 0.35 * rep.random_distance_mean


def test_oracle_encoder_beats_random(cfg):
    queries, pool = retrieval_sets(cfg, "controlled", n_queries=40, split="ood")
    q_pos, p_pos = queries.positions, pool.positions

    def oracle(imgs):
        src = q_pos if imgs is queries.images else p_pos
        return src.reshape(len(src), -1)

    rep = retrieval_eval(oracle, queries, pool, metric="euclidean")
    assert rep.iou_mean >= 3 * rep.random_iou_mean
    assert rep.distance_mean < rep.random_distance_mean / 3


def test_invariance_identical_pairs():
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(5, 8, 8, 3))
    enc = lambda x: x.reshape(len(x), -1)[:, :6]
    rep = invariance_from_images(enc, imgs, imgs)
    assert rep.cosine_mean == 1.0 and rep.mse_mean == 0.0 and rep.n_excluded == 0


def test_invariance_excludes_zero_latents():
    imgs = np.ones((4, 2, 2, 3))
    imgs[1] = 0.0
    enc = lambda x: x.reshape(len(x), -1)
    with pytest.warns(RuntimeWarning, match="excluded"):
        rep = invariance_from_images(enc, imgs, np.ones_like(imgs))
    assert rep.n_excluded == 1 and rep.cosine_mean == 1.0


def test_invariance_eval_contract(cfg):
    states, pairs = invariance_sets(cfg, "controlled", n_pairs=20)
    with pytest.raises(EvalError, match="at least"):
        invariance_eval(lambda x: x.reshape(len(x), -1), states, pairs, min_pairs=200)
    same = [(a, a) for a, _ in pairs]
    with pytest.raises(EvalError, match="differ"):
        invariance_eval(lambda x: x.reshape(len(x), -1), states, same, min_pairs=20)
    rep = invariance_eval(lambda x: x.reshape(len(x), -1), states, same, min_pairs=20, allow_equal=True)
    assert rep.cosine_mean == 1.0
    pixel = invariance_eval(lambda x: x.reshape(len(x), -1), states, pairs, min_pairs=20)
    assert pixel.cosine_mean < 1.0 and pixel.mse_mean > 0


@pytest.mark.filterwarnings("ignore:prop1")  # 600 steps is too short to meet the tolerance
def test_prop1_small_run():
    pc = Prop1Config(n_samples=1000, steps=600)
    indep = prop1_experiment(pc, "indep", trials=2)
    dep = prop1_experiment(pc, "dep", trials=2)
    assert len(indep.trials) == 2
    assert indep.median_ratio < 0.2 < dep.median_ratio
    assert indep.max_substituted_gap < 0.1
