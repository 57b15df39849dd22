import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cecdr import clm, dcmm, evalkit
from cecdr.gradcore import Graph, Tensor, backward
from cecdr.synthworld import WorldConfig, generate_world

from gradcheck import analytic_grad, numeric_grad, rel_error

probs = st.floats(0.001, 0.999)


def check_grad(build, arrays):
    num = numeric_grad(lambda *a: build(*[Tensor(x) for x in a]).item(), [a.copy() for a in arrays])
    ana = analytic_grad(build, arrays)
    for n, a in zip(num, ana):
        assert rel_error(n, a).max() < 1e-4


def brute_posterior(s, f, e):
    """P(y=1 | s) by enumerating y with P(y=1)=f and P(s=1 | y)=e*y."""
    joint = {y: (f if y else 1 - f) * ((e * y) if s else (1 - e * y)) for y in (0, 1)}
    return joint[1] / (joint[0] + joint[1])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1), probs, probs)
def test_corrected_label_matches_bayes(s, f, e):
    assert abs(dcmm.corrected_label(s, f, e) - brute_posterior(s, f, e)) <= 1e-12


@pytest.mark.parametrize("p,e", list(itertools.product((0.1, 0.5, 0.9), (0.2, 0.6, 0.99))))
def test_expected_label_is_prior(p, e):
    # with f equal to the true prior, averaging h over s recovers p
    eh = p * e * 1.0 + (1 - p * e) * dcmm.corrected_label(0, p, e)
    assert abs(eh - p) <= 1e-12


def test_corrected_label_edges():
    assert dcmm.corrected_label(1, 0.3, 0.5) == 1.0
    assert dcmm.corrected_label(0, 0.0, 0.5) == 0.0
    assert dcmm.corrected_label(0, 0.4, 0.0) == pytest.approx(0.4)
    # f = e = 1 is guarded by the denominator floor instead of dividing by zero
    assert np.isfinite(dcmm.corrected_label(0, 1.0, 1.0))


def test_corrected_label_vectorized():
    s = np.array([0, 1, 0])
    f = np.array([0.2, 0.3, 0.9])
    e = np.array([0.5, 0.5, 0.1])
    want = [brute_posterior(*x) for x in zip(s, f, e)]
    np.testing.assert_allclose(dcmm.corrected_label(s, f, e), want, rtol=0, atol=1e-12)


def test_plcl_f_loss_value_and_grad():
    f = Tensor(np.array([0.3, 0.8]), requires_grad=True)
    fn = Tensor(np.array([[0.1, 0.2], [0.4, 0.05]]), requires_grad=True)
    h = np.array([0.5, 1.0])
    with Graph() as g:
        loss = dcmm.plcl_f_loss(f, h, fn)
    want = (-(0.5 * np.log(0.3) + 0.5 * np.log(0.7)) - np.log(0.8)) / 2 - np.log(1 - fn.data).mean()
    assert loss.data == pytest.approx(want, rel=1e-12)
    backward(g, loss)
    check_grad(lambda a, b: dcmm.plcl_f_loss(a, h, b), [f.data, fn.data])


def test_plcl_e_loss_value_and_grad():
    e = Tensor(np.array([0.3, 0.6, 0.9]), requires_grad=True)
    s, h = np.array([1, 0, 0]), np.array([1.0, 0.4, 0.0])
    with Graph():
        loss = dcmm.plcl_e_loss(e, s, h)
    want = -(np.log(0.3) + 0.4 * np.log(0.4)) / 3
    assert loss.data == pytest.approx(want, rel=1e-12)
    check_grad(lambda a: dcmm.plcl_e_loss(a, s, h), [e.data])


def test_plcl_f_loss_empty_raises():
    with pytest.raises(ValueError):
        dcmm.plcl_f_loss(None, np.empty(0))


def test_all_positive_with_e_one_reduces_to_bce_on_ones():
    # s = 1 everywhere makes h = 1, so the loss is -mean log f
    f = Tensor(np.array([0.6, 0.9]))
    h = dcmm.corrected_label(np.ones(2), f.data, np.ones(2))
    with Graph():
        loss = dcmm.plcl_f_loss(f, h)
    assert loss.data == pytest.approx(-np.log([0.6, 0.9]).mean())


def test_negative_sampler_excludes_seen(rng):
    users = np.array([0, 0, 1])
    items = np.array([0, 1, 2])
    ns = dcmm.NegativeSampler(5, users, items)
    out = ns.sample(np.array([0, 1] * 50), 3, rng)
    assert not np.isin(out[::2], [0, 1]).any()
    assert not (out[1::2] == 2).any()


def test_negative_sampler_full_catalog(rng):
    ns = dcmm.NegativeSampler(2, np.array([0, 0]), np.array([0, 1]))
    with pytest.raises(RuntimeError):
        ns.sample(np.array([0]), 1, rng)


def test_pad_snapshots():
    offsets = np.array([0, 2, 2, 5])
    snap = np.array([4, 5, 6, 7, 8])
    items, mask, lengths = dcmm.pad_snapshots(offsets, snap, np.array([0, 2]))
    np.testing.assert_array_equal(items, [[4, 5, 0], [6, 7, 8]])
    np.testing.assert_array_equal(mask, [[1, 1, 0], [1, 1, 1]])
    np.testing.assert_array_equal(lengths, [2, 3])
    with pytest.raises(ValueError):
        dcmm.pad_snapshots(offsets, snap, np.array([1]))


def test_bucketed_batches_cover_once(rng):
    lengths = rng.integers(1, 50, size=1000)
    batches = list(dcmm.bucketed_batches(lengths, 64, rng))
    allrows = np.concatenate(batches)
    np.testing.assert_array_equal(np.sort(allrows), np.arange(1000))
    assert max(b.size for b in batches) <= 64


# --- models on a small world --------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    w = generate_world(WorldConfig(n_users=80, n_source_items=120, n_target_items=120,
                                   interactions_per_user=8, seed=2))
    split = evalkit.leave_one_out(w.log)
    tr = split.train
    beh = clm.train_behavior_embeddings(tr, dim=8, epochs=2, seed=0)
    tables = clm.Tables(w.content, beh)
    cal = clm.fit_calibrator(tr, tables, M=1000)
    ds = clm.build_dataset(tr, cal, tables, 0.5, L_max=10)
    feats = dcmm.user_features(tr, w.content)
    cfg = dcmm.DCMMConfig(d_id=8, d_ct=8, epochs=2, warmup=1, L_max=10, batch_size=64)
    f, e, trace = dcmm.train_dcmm(ds, w.content, beh, feats, tr.n_source_items, tr.n_target_items, cfg)
    return dict(world=w, train=tr, ds=ds, feats=feats, f=f, e=e, trace=trace, cfg=cfg, beh=beh)


def test_training_trace(small, tmp_path):
    rows = small["trace"].rows
    assert [r["epoch"] for r in rows] == [0, 1]
    for r in rows:
        assert all(np.isfinite(r[c]) for c in dcmm.TrainTrace.COLUMNS[1:])
        assert 0 < r["mean_e"] < 1
    p = tmp_path / "trace.csv"
    small["trace"].write_csv(p)
    assert p.read_text().splitlines()[0] == ",".join(dcmm.TrainTrace.COLUMNS)


def test_training_is_deterministic(small):
    w, tr = small["world"], small["train"]
    f2, _, t2 = dcmm.train_dcmm(small["ds"], w.content, small["beh"], small["feats"],
                                tr.n_source_items, tr.n_target_items, small["cfg"])
    for n in small["f"].params.names():
        np.testing.assert_array_equal(small["f"].params[n].data, f2.params[n].data)
    assert t2.rows == small["trace"].rows


def test_scores_in_open_interval(small):
    f, e, feats = small["f"], small["e"], small["feats"]
    for snap in ([0], [3, 7, 11], list(range(10))):
        for i_t in (0, 5, 119):
            assert 0 < dcmm.causal_score(f, feats[0], snap, i_t) < 1
            assert 0 < dcmm.propensity_score(e, snap, i_t) < 1


def test_scores_reject_unknown_items(small):
    with pytest.raises(KeyError):
        dcmm.causal_score(small["f"], small["feats"][0], [0], 120)
    with pytest.raises(KeyError):
        dcmm.propensity_score(small["e"], [500], 0)


def test_causal_model_is_causal(small):
    # appending a later item must not change the hidden state of earlier positions
    f, feats = small["f"], small["feats"][:1]
    h1 = f.encode(feats, np.array([[3, 4, 5]])).data
    h2 = f.encode(feats, np.array([[3, 4, 5, 9]])).data
    np.testing.assert_allclose(h1, h2[:, :4], rtol=0, atol=1e-12)


def test_padding_does_not_change_representation(small):
    f, feats = small["f"], small["feats"][:2]
    padded = f.represent(feats, np.array([[3, 4, 0, 0], [1, 2, 3, 4]]), np.array([2, 4])).data
    alone = f.represent(feats[:1], np.array([[3, 4]]), np.array([2])).data
    np.testing.assert_allclose(padded[0], alone[0], rtol=0, atol=1e-10)


def test_represent_users_empty_history_is_zero(small):
    f, tr = small["f"], small["train"]
    cutoff = np.zeros(tr.n_users, dtype=np.int64)   # nothing precedes ts 0
    r = dcmm.represent_users(f, tr, small["feats"], cutoff=cutoff)
    assert r.shape == (tr.n_users, small["cfg"].d)
    assert not r.any()


def test_represent_one_matches_users(small):
    f, tr, feats = small["f"], small["train"], small["feats"]
    r = dcmm.represent_users(f, tr, feats)
    hist = dcmm.user_source_histories(tr)
    for u in (0, 5, 40):
        assert r[u].tobytes() == dcmm.represent_one(f, feats[u], hist[u]).tobytes()


def test_bce_mode_keeps_e_at_init(small):
    w, tr = small["world"], small["train"]
    cfg = dcmm.DCMMConfig(**{**dcmm.config_dict(small["cfg"]), "mode": "bce", "epochs": 1})
    _, e, _ = dcmm.train_dcmm(small["ds"], w.content, small["beh"], small["feats"],
                              tr.n_source_items, tr.n_target_items, cfg)
    e0 = dcmm.PropensityModel(tr.n_source_items, tr.n_target_items, w.content, small["beh"], cfg, cfg.seed + 1)
    for n in e.params.names():
        np.testing.assert_array_equal(e.params[n].data, e0.params[n].data)
