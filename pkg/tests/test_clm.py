import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cecdr import clm, kernels
from cecdr.synthworld import SOURCE, TARGET, EmbeddingTable, InteractionLog, WorldConfig, generate_world

WORLD200 = WorldConfig(n_users=200, n_source_items=400, n_target_items=400, interactions_per_user=10, seed=11)


def _tables(src_c, tgt_c, src_b=None, tgt_b=None):
    src_b = src_c if src_b is None else src_b
    tgt_b = tgt_c if tgt_b is None else tgt_b
    return clm.Tables(EmbeddingTable("content", src_c, tgt_c), EmbeddingTable("behavior", src_b, tgt_b))


@pytest.fixture(scope="module")
def world200():
    w = generate_world(WORLD200)
    beh = clm.train_behavior_embeddings(w.log, epochs=3, seed=0)
    tables = clm.Tables(w.content, beh)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cal = clm.fit_calibrator(w.log, tables, M=2000, seed=0)
    return w, tables, cal


@pytest.fixture(scope="module")
def default_labeled():
    w = generate_world(WorldConfig())
    beh = clm.train_behavior_embeddings(w.log, seed=0)
    tables = clm.Tables(w.content, beh)
    cal = clm.fit_calibrator(w.log, tables, seed=0)
    return w, tables, cal, beh


# --- raw similarity ----------------------------------------------------------------

def test_raw_similarity_examples():
    t = _tables(np.array([[1.0, 2.0], [1.0, 0.0]]), np.array([[3.0, -1.0], [0.0, 1.0], [1.0, 0.0]]))
    assert clm.raw_similarity("content", 0, 0, t) == 1.0
    assert clm.raw_similarity("content", 1, 1, t) == 0.0
    assert clm.raw_similarity("behavior", 1, 2, t) == 1.0


def test_raw_similarity_unknown_item():
    t = _tables(np.eye(2), np.eye(2))
    with pytest.raises(clm.UnknownItemError, match="target item 5.*content"):
        clm.raw_similarity("content", 0, 5, t)


# --- calibration -------------------------------------------------------------------

def test_ecdf_examples():
    cal = clm.SimilarityCalibrator(np.array([0.1, 0.4, 0.7, 0.9]), np.array([0.5] * 4))
    assert cal.cdf("content", 0.4)[0] == 0.5
    assert cal.cdf("content", -np.inf)[0] == 0.0
    assert cal.cdf("content", np.inf)[0] == 1.0
    assert cal.cdf("behavior", 0.5)[0] == 1.0
    assert cal.cdf("behavior", 0.4999)[0] == 0.0


def test_calibrator_sorts_and_freezes():
    cal = clm.SimilarityCalibrator(np.array([0.9, 0.1, 0.4]), np.array([1.0]))
    np.testing.assert_array_equal(cal.content, [0.1, 0.4, 0.9])
    with pytest.raises(ValueError):
        cal.content[0] = 5.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=40), st.floats(-20, 20))
def test_ecdf_matches_count(sample, x):
    s = np.sort(np.array(sample))
    got = kernels.ecdf(s, x)[0]
    assert got == np.count_nonzero(s <= x) / s.size
    assert 0.0 <= got <= 1.0


def test_fit_calibrator_rejects_small_M(world200):
    w, tables, _ = world200
    with pytest.raises(ValueError):
        clm.fit_calibrator(w.log, tables, M=999)


def test_fit_calibrator_warns_when_short():
    log_ = InteractionLog([0, 0], [SOURCE, TARGET], [0, 0], [0, 1], 1, 1, 1)
    t = _tables(np.ones((1, 2)), np.ones((1, 2)))
    with pytest.warns(RuntimeWarning, match="with replacement"):
        cal = clm.fit_calibrator(log_, t, M=1000)
    assert cal.content.size == 1000


def test_cooccurring_pairs_respect_order():
    log_ = InteractionLog([0, 0, 0], [TARGET, SOURCE, TARGET], [0, 1, 2], [0, 1, 2], 1, 3, 3)
    np.testing.assert_array_equal(clm.cooccurring_pairs(log_), [[1, 2]])


def test_fused_is_max():
    # content calibrates to ~0.3, behavior to ~0.8
    t = _tables(np.array([[1.0]]), np.array([[0.3]]), np.array([[1.0]]), np.array([[0.8]]))
    cal = clm.SimilarityCalibrator(np.linspace(0.01, 1, 100), np.linspace(0.01, 1, 100))
    assert clm.fused_similarity(0, 0, cal, t) == pytest.approx(0.8)
    t_eq = _tables(np.array([[1.0]]), np.array([[0.5]]))
    assert clm.fused_similarity(0, 0, cal, t_eq) == cal.cdf("content", 0.5)[0]


def test_sequence_similarity_examples():
    cal = clm.SimilarityCalibrator(np.linspace(0.01, 1, 100), np.linspace(0.01, 1, 100))
    t = _tables(np.array([[0.2], [0.95], [0.5]]), np.array([[1.0]]))
    assert clm.sequence_similarity([1], 0, cal, t) == clm.fused_similarity(1, 0, cal, t)
    fused = [clm.fused_similarity(i, 0, cal, t) for i in range(3)]
    assert clm.sequence_similarity([0, 1, 2], 0, cal, t) == max(fused) == fused[1]
    assert clm.sequence_similarity([2, 0, 1], 0, cal, t) == clm.sequence_similarity([0, 1, 2], 0, cal, t)
    assert clm.sequence_similarity([], 0, cal, t) == 0.0


# --- dataset -----------------------------------------------------------------------

def test_tau_zero_labels_everything(world200):
    w, tables, cal = world200
    ds = clm.build_dataset(w.log, cal, tables, 0.0)
    assert len(ds) > 0 and ds.s.all()


def test_threshold_strict():
    cal = clm.SimilarityCalibrator(np.linspace(0.01, 1, 100), np.linspace(0.01, 1, 100))
    t = _tables(np.array([[0.95], [0.85], [0.9]]), np.array([[1.0]]))
    log_ = InteractionLog([0, 0, 1, 1, 2, 2], [SOURCE, TARGET] * 3, [0, 0, 1, 0, 2, 0],
                          [0, 1, 0, 1, 0, 1], 3, 3, 1)
    ds = clm.build_dataset(log_, cal, t, 0.9)
    np.testing.assert_array_equal(ds.s, [1, 0, 0])  # 0.9 itself is not > 0.9


def test_tau_range():
    cal = clm.SimilarityCalibrator(np.array([0.5]), np.array([0.5]))
    t = _tables(np.ones((1, 1)), np.ones((1, 1)))
    log_ = InteractionLog([0, 0], [SOURCE, TARGET], [0, 0], [0, 1], 1, 1, 1)
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            clm.build_dataset(log_, cal, t, bad)


def test_label_monotonicity_exhaustive(world200):
    w, tables, cal = world200
    ds = clm.build_dataset(w.log, cal, tables, 0.0)
    taus = np.unique(np.concatenate([[0.0, 0.5, 0.9, 0.999], ds.score[ds.score < 1]]))
    prev = None
    for tau in taus[::max(1, taus.size // 200)]:
        pos = ds.relabel(float(tau)).positives()
        if prev is not None:
            assert pos <= prev
        prev = pos


def test_snapshot_time_causality_exhaustive(world200):
    w, tables, cal = world200
    ds = clm.build_dataset(w.log, cal, tables, 0.9, L_max=5)
    for j in range(len(ds)):
        u, ts = ds.user[j], ds.ts[j]
        sl = w.log.user_events(u)
        src = (w.log.domain[sl] == SOURCE) & (w.log.ts[sl] < ts)
        want = w.log.item[sl][src][-5:]
        np.testing.assert_array_equal(ds.snapshot(j), want)
        assert 0 < ds.snapshot(j).size <= 5


def test_rank_invariance_exhaustive(world200):
    w, tables, cal = world200
    base = clm.build_dataset(w.log, cal, tables, 0.9)
    c = tables.content

    # a strictly increasing transform of every content dot product: scale by 3 keeps order
    scaled = clm.Tables(EmbeddingTable("content", 3.0 * c.source, c.target), tables.behavior)
    cal2 = clm.fit_calibrator(w.log, scaled, M=2000, seed=0)
    again = clm.build_dataset(w.log, cal2, scaled, 0.9)
    np.testing.assert_array_equal(base.s, again.s)
    np.testing.assert_array_equal(base.score, again.score)


def test_rank_invariance_nonlinear():
    """exp() of raw similarities, realised directly on the calibrator sample."""
    rng = np.random.default_rng(3)
    sims = rng.normal(size=1000)
    xs = rng.normal(size=200)
    a = clm.SimilarityCalibrator(np.sort(sims), np.sort(sims))
    b = clm.SimilarityCalibrator(np.sort(np.exp(sims)), np.sort(np.exp(sims)))
    np.testing.assert_array_equal(a.cdf("content", xs), b.cdf("content", np.exp(xs)))


def test_dataset_drops_empty_snapshots():
    log_ = InteractionLog([0, 0, 0], [TARGET, SOURCE, TARGET], [0, 0, 1], [0, 1, 2], 1, 1, 2)
    t = _tables(np.ones((1, 1)), np.ones((2, 1)))
    cal = clm.SimilarityCalibrator(np.array([0.5]), np.array([0.5]))
    ds = clm.build_dataset(log_, cal, t, 0.5)
    assert len(ds) == 1 and ds.target[0] == 1


def test_precision_rises_with_tau(default_labeled):
    w, tables, cal, _ = default_labeled
    ds = clm.build_dataset(w.log, cal, tables, 0.5, truth=w.truth)

    def precision(d):
        return d.y[d.s == 1].mean()

    assert precision(ds.relabel(0.9)) > precision(ds)


def test_behavior_similarity_of_causal_pairs(default_labeled):
    w, _, _, beh = default_labeled
    m = w.truth.y == 1
    tgt = w.log.item[w.log.domain == TARGET][m]
    causal = np.einsum("ij,ij->i", beh.source[w.truth.cause_item[m]], beh.target[tgt])
    rng = np.random.default_rng(0)
    rand = np.einsum("ij,ij->i", beh.source[rng.integers(0, 2000, 5000)], beh.target[rng.integers(0, 2000, 5000)])
    assert causal.mean() > rand.mean()


def test_propagation_zero_rounds_is_identity():
    log_ = InteractionLog([0, 0, 1], [SOURCE, TARGET, TARGET], [0, 0, 1], [0, 1, 0], 2, 1, 2)
    a = clm.train_behavior_embeddings(log_, dim=4, epochs=2, seed=5, rounds=0)
    b = clm.train_behavior_embeddings(log_, dim=4, epochs=2, seed=5, rounds=2)
    assert not np.array_equal(a.target, b.target)
    gid = log_.global_item()
    eu, ei = np.ones((2, 3)), np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(clm._propagate(log_.user, gid, 2, 3, eu, ei, 0), ei)


def test_propagation_symmetric_items_tie():
    # items 1 and 2 (target) have identical neighbourhoods; tied base vectors stay tied
    users = np.array([0, 0, 1, 1])
    items = np.array([1, 2, 1, 2])
    eu = np.array([[1.0, 0.0], [0.0, 1.0]])
    ei = np.array([[5.0, 5.0], [1.0, 2.0], [1.0, 2.0]])
    out = clm._propagate(users, items, 2, 3, eu, ei, 2)
    np.testing.assert_array_equal(out[1], out[2])


# --- files -------------------------------------------------------------------------

def test_embedding_round_trip(tmp_path, world200):
    _, tables, _ = world200
    p = tmp_path / "beh.txt"
    clm.export_embeddings(tables.behavior, p)
    back = clm.import_embeddings(p)
    np.testing.assert_array_equal(back.source, tables.behavior.source)
    np.testing.assert_array_equal(back.target, tables.behavior.target)
    assert p.read_text().splitlines()[0] == "800 16 behavior"


def test_dataset_round_trip(tmp_path, world200):
    w, tables, cal = world200
    ds = clm.build_dataset(w.log, cal, tables, 0.9)
    p = tmp_path / "ds.tsv"
    clm.export_dataset(ds, p)
    back = clm.import_dataset(p, 0.9)
    for col in ("user", "target", "s", "score", "offsets", "snap"):
        np.testing.assert_array_equal(getattr(back, col), getattr(ds, col))


def test_backends_agree_on_labels(world200):
    w, tables, cal = world200
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled backend not built")
    prev = kernels.use_backend("python")
    try:
        a = clm.build_dataset(w.log, cal, tables, 0.9)
    finally:
        kernels.use_backend("compiled")
    b = clm.build_dataset(w.log, cal, tables, 0.9)
    kernels.use_backend(prev)
    assert a.score.tobytes() == b.score.tobytes()
