import math
import warnings

import numpy as np
import pytest

import oracles
from uniprompt import evaluator as E
from uniprompt import synthdata as S
from uniprompt.encoders import EncoderConfig
from uniprompt.prompts import PromptConfig
from uniprompt.trainer import UniPromptModel


@pytest.mark.parametrize("rel,n,expect", [([1, 1, 0], 2, 1.0), ([1, 0, 1], 2, 5 / 6), ([0, 0, 1], 1, 1 / 3)])
def test_average_precision_examples(rel, n, expect):
    assert abs(E.average_precision(rel, n) - expect) <= 1e-15


def test_average_precision_errors():
    with pytest.raises(E.NoMatchError):
        E.average_precision([0, 0], 0)
    with pytest.raises(ValueError):
        E.average_precision([1, 1], 1)


def test_cmc_examples():
    assert E.cmc_at([1, 0, 0], 1) == 1
    assert E.cmc_at([0, 0, 1], 2) == 0
    assert E.cmc_at([0, 0, 1], 3) == 1
    assert E.cmc_at([0, 0, 0, 0, 1], 3) == 0
    with pytest.raises(ValueError):
        E.cmc_at([1], 0)


@pytest.mark.parametrize("name,cat", [
    ("U_R->G_R", E.CROSS_PLATFORM), ("G_R->U_R", E.CROSS_PLATFORM),
    ("G_I->G_R", E.CROSS_MODALITY), ("U_T->U_R", E.CROSS_MODALITY),
    ("U_T->G_R", E.CROSS_BOTH), ("G_I->U_T", E.CROSS_BOTH), ("U_R->G_I", E.CROSS_BOTH),
])
def test_classify_examples(name, cat):
    assert E.classify_setting(E.Setting.parse(name)) == cat


def test_category_sizes():
    counts = {c: 0 for c in E.CATEGORIES}
    for s in E.ALL_SETTINGS:
        counts[E.classify_setting(s)] += 1
    assert [counts[c] for c in E.CATEGORIES] == [2, 4, 6]
    assert len(set(E.ALL_SETTINGS)) == 12


def test_setting_validation():
    with pytest.raises(ValueError):
        E.Setting("G_R", "G_R")
    with pytest.raises(ValueError):
        E.Setting("G_T", "G_R")
    with pytest.raises(ValueError):
        E.Setting.parse("G_R U_R")


def synth(**kw):
    base = dict(n_identities=12, records_per_identity_per_source=5, n_cameras_per_source=3, d_feat=16)
    base.update(kw)
    return S.generate(S.SynthConfig(**base))


def test_split_one_query_per_camera_and_full_gallery():
    _, test, _ = synth()
    s = E.Setting("G_I", "U_T")
    q, g = E.build_split(test, s, np.random.default_rng(0))
    n_ids = len(test.identities)
    assert len(q) == n_ids * 3
    assert len(g) == len(test.from_source("U_T"))
    for ident in test.identities:
        cams = test.camera[q][test.identity[q] == ident]
        assert sorted(cams.tolist()) == sorted(set(cams.tolist())) and len(cams) == 3
    q2, g2 = E.build_split(test, s, np.random.default_rng(0))
    assert np.array_equal(q, q2) and np.array_equal(g, g2)
    _, g3 = E.build_split(test, s, np.random.default_rng(9))
    assert np.array_equal(g, g3)


def test_split_empty():
    _, test, _ = synth()
    with pytest.raises(E.EmptySplitError):
        E.build_split(test.subset(~test.source_mask("G_R")), E.Setting("G_R", "U_R"),
                      np.random.default_rng(0))


def _fake(n, id_start, source="G_R", d=2):
    mod, plat = S.SOURCES[source]
    return S.Dataset(np.arange(id_start, id_start + n), np.arange(id_start, id_start + n),
                     np.zeros(n), np.full(n, int(mod)), np.full(n, int(plat)), np.ones((n, d)), d)


def test_distractor_counts():
    gallery, pool = _fake(1000, 0), _fake(500, 10_000)
    out = E.inject_distractors(gallery, pool, 0.10, np.random.default_rng(0))
    assert len(out) == 1100
    assert set(out.record_id[1000:].tolist()) <= set(pool.record_id.tolist())
    assert E.inject_distractors(gallery, pool, 0.0, np.random.default_rng(0)) is gallery
    with pytest.warns(E.DistractorWarning):
        capped = E.inject_distractors(gallery, _fake(30, 10_000), 0.10, np.random.default_rng(0))
    assert len(capped) == 1030
    with pytest.raises(ValueError):
        E.inject_distractors(gallery, pool, -0.1, np.random.default_rng(0))


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        Q, G = int(rng.integers(1, 12)), int(rng.integers(1, 60))
        sims = np.round(rng.normal(size=(Q, G)), 1)  # coarse values force ties
        ql, gl = rng.integers(0, 5, size=Q), rng.integers(0, 5, size=G)
        gid = rng.permutation(10 * G)[:G]
        ap, cmc, excl = E.retrieval_metrics(sims, ql, gl, gid)
        ref = oracles.brute_metrics(sims.tolist(), ql.tolist(), gl.tolist(), gid.tolist())
        assert excl == ref[3]
        if len(ap):
            assert math.fsum(ap) / len(ap) == ref[0]
            assert math.fsum(cmc[1]) / len(ap) == ref[1]
            assert math.fsum(cmc[5]) / len(ap) == ref[2]


def test_order_preserving_gallery_permutation():
    rng = np.random.default_rng(1)
    sims = np.round(rng.normal(size=(5, 30)), 1)
    ql, gl, gid = rng.integers(0, 3, 5), rng.integers(0, 3, 30), np.arange(30)
    perm = rng.permutation(30)
    a = E.retrieval_metrics(sims, ql, gl, gid)
    b = E.retrieval_metrics(sims[:, perm], ql, gl[perm], gid[perm])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1][1], b[1][1])


def test_random_embedding_map_near_harmonic_mean():
    G, n_q = 400, 200
    rng = np.random.default_rng(2)
    sims = rng.normal(size=(n_q, G))
    gl = np.arange(G)
    ql = rng.integers(0, G, size=n_q)
    ap, _, _ = E.retrieval_metrics(sims, ql, gl, np.arange(G))
    mean = oracles.harmonic(G) / G
    var = math.fsum(1 / k ** 2 for k in range(1, G + 1)) / G - mean ** 2
    assert abs(ap.mean() - mean) <= 3 * math.sqrt(var / n_q)


def identity_model(d):
    m = UniPromptModel(EncoderConfig(d_feat=d, d_tok=8, d_emb=d), PromptConfig(d_tok=8, n_identities=2))
    return m


def test_perfect_world_gives_ones():
    _, test, _ = synth(gap_modality=0, gap_platform=0, noise_sigma=0)
    m = identity_model(16)
    for s in E.ALL_SETTINGS:
        r = E.evaluate(m, test, s, n_trials=2, rng=np.random.default_rng(0))
        assert r.mAP == 1.0 and r.rank1 == 1.0


def test_evaluate_deterministic_and_trial_means():
    _, test, pool = synth()
    m = identity_model(16)
    s = E.Setting("U_T", "G_R")
    a = E.evaluate(m, test, s, n_trials=4, rng=np.random.default_rng(5))
    b = E.evaluate(m, test, s, n_trials=4, rng=np.random.default_rng(5))
    assert a == b
    for k in E.METRICS:
        assert abs(getattr(a, k) - np.mean([t[k] for t in a.trials])) <= 1e-12
    assert 0 <= a.rank1 <= a.rank5 <= 1 and 0 <= a.mAP <= 1


def test_evaluate_with_distractors():
    _, test, pool = synth(n_identities=30, n_distractor_identities=20)
    m = identity_model(16)
    s = E.Setting("U_R", "G_R")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", E.DistractorWarning)
        r = E.evaluate(m, test, s, n_trials=3, distractor_fraction=0.1, rng=np.random.default_rng(0),
                       distractor_pool=pool)
    assert r.n_distractors > 0
    assert r.n_gallery == len(test.from_source("G_R")) + r.n_distractors
    with pytest.raises(ValueError):
        E.evaluate(m, test, s, distractor_fraction=0.1, distractor_pool=test)


def test_distractors_never_help():
    rng = np.random.default_rng(3)
    for _ in range(100):
        Q, G, D = 6, int(rng.integers(2, 40)), int(rng.integers(1, 20))
        sims = rng.normal(size=(Q, G + D))
        ql, gl = rng.integers(0, 4, Q), rng.integers(0, 4, G)
        ids = rng.permutation(G + D)
        base = E.retrieval_metrics(sims[:, :G], ql, gl, ids[:G])
        more = E.retrieval_metrics(sims, ql, np.concatenate([gl, np.full(D, -1)]), ids)
        assert np.all(more[0] <= base[0])
        for k in (1, 5):
            assert np.all(more[1][k] <= base[1][k])


def entry(name, r1, r5=None, mAP=None):
    s = E.Setting.parse(name)
    return E.SettingReport(name, E.classify_setting(s), r1, r5 if r5 is not None else r1,
                           mAP if mAP is not None else r1)


def test_summarize_constant():
    rep = E.summarize([entry(s.name, 0.4) for s in E.ALL_SETTINGS])
    for c in E.CATEGORIES:
        assert rep.categories[c]["rank1"] == pytest.approx(0.4, abs=1e-15)
    assert [rep.categories[c]["n_settings"] for c in E.CATEGORIES] == [2, 4, 6]


def test_summarize_conventions_on_published_rank1():
    # per-setting Rank-1 (%) of the reference method, in ALL_SETTINGS order
    r1 = [77.20, 80.34, 86.25, 81.77, 56.32, 58.70, 61.28, 61.67, 34.71, 31.82, 35.39, 34.08]
    rep = E.summarize([entry(s.name, v) for s, v in zip(E.ALL_SETTINGS, r1)])
    assert rep.overall_setting_mean["rank1"] == pytest.approx(58.29, abs=0.005)
    cp = rep.categories[E.CROSS_PLATFORM]["rank1"]
    assert cp == pytest.approx(78.77, abs=0.005)
    assert rep.overall["rank1"] == pytest.approx(np.mean([rep.categories[c]["rank1"] for c in E.CATEGORIES]))


def test_summarize_incomplete():
    with pytest.raises(E.IncompleteReportError):
        E.summarize([entry(s.name, 0.5) for s in E.ALL_SETTINGS[:-1]])
    assert E.build_report([entry("G_R->U_R", 0.5)]).categories is None


def test_table_lists_every_row():
    rep = E.summarize([entry(s.name, 0.5) for s in E.ALL_SETTINGS])
    text = E.format_table(rep)
    assert all(s.name in text for s in E.ALL_SETTINGS)
    assert "average (category mean)" in text and "50.00" in text
