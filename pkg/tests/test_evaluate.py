import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fromnet.evaluate import (
    Counts,
    EvalReport,
    ProtocolError,
    build_pairs,
    confusion,
    cosine_similarity,
    evaluate_pairs,
    load_pairs,
    occlusion_breakdown,
    pair_scores,
    plot_report,
    rank1_identification,
    report_from_scores,
    save_pairs,
    tar_at_far,
    verification_accuracy,
)
from fromnet.network import FROMNet, NetworkConfig
from fromnet.synth import SynthConfig, build_dataset


def brute_tar(scores, same, far_target):
    """Best TAR over every candidate threshold whose FAR stays within the target."""
    scores, same = np.asarray(scores), np.asarray(same)
    best = 0.0
    for t in np.concatenate([np.unique(scores), [np.inf]]):
        accept = scores >= t
        far = np.sum(accept & ~same) / np.sum(~same)
        if far <= far_target:
            best = max(best, np.sum(accept & same) / np.sum(same))
    return best


# -- scores ---------------------------------------------------------------------------


def test_cosine_examples():
    a = np.array([0.3, -1.2, 2.0])
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    assert cosine_similarity(a, -a) == pytest.approx(-1.0)
    assert cosine_similarity([1, 0, 0], [0, 5, 0]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity(a, np.zeros(3))
    rows = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(pair_scores(rows, rows[::-1]), [cosine_similarity(x, y) for x, y in zip(rows, rows[::-1])])


# -- verification ---------------------------------------------------------------------------


def test_counts_arithmetic():
    c = Counts(tp=50, tn=50, fp=0, fn=0)
    assert c.accuracy == 1.0
    c = Counts(tp=9, tn=80, fp=5, fn=1)
    assert c.tar == 0.9 and c.far == pytest.approx(5 / 85) and c.accuracy == pytest.approx(89 / 95)


def test_confusion_accepts_at_threshold():
    c = confusion([0.5, 0.5, 0.2], [True, False, True], 0.5)
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 0)


def test_perfect_separation():
    same = np.array([True, True, False, False] * 10)
    scores = np.where(same, 0.8, 0.1) + np.linspace(0, 0.01, 40)
    r = verification_accuracy(scores, same)
    assert r.accuracy == 1.0 and 0.11 < r.threshold < 0.8
    assert r.n_dev == r.n_test == 20


def test_random_scores_give_chance_accuracy():
    rng = np.random.default_rng(0)
    same = rng.random(20000) < 0.5
    r = verification_accuracy(rng.random(20000), same)
    assert abs(r.accuracy - 0.5) < 0.02


def test_verification_protocol_errors():
    with pytest.raises(ProtocolError):
        verification_accuracy([0.1, 0.2, 0.3], [True, True, True])
    with pytest.raises(ProtocolError):
        verification_accuracy([0.1], [True])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_report_counts_recompute(seed):
    rng = np.random.default_rng(seed)
    same = np.array([True, True, False, False] * 50)
    scores = rng.normal(size=200) + same
    report, _ = report_from_scores(scores, same, far_targets=(1e-2,))
    c = Counts(**report.counts)
    assert c.accuracy == report.accuracy
    assert c.tp + c.fn == same[1::2].sum() and c.tn + c.fp == (~same[1::2]).sum()
    tar = report.tar_at_far["0.01"]
    assert tar["far"] <= 0.01


# -- TAR@FAR --------------------------------------------------------------------------------


def test_tar_examples():
    scores = [0.9] * 9 + [0.1] + [0.5, 0.2] + [0.05] * 98
    same = [True] * 10 + [False] * 100
    r = tar_at_far(scores, same, 0.01)
    assert r.tar == 0.9 and r.counts.tp == 9 and r.counts.fn == 1 and r.far == 0.01
    r = tar_at_far(scores, same, 1.0)
    assert r.threshold == -1.0 and r.tar == 1.0 and r.far == 1.0


def test_tar_too_few_negatives_names_minimum():
    with pytest.raises(ProtocolError, match="1000"):
        tar_at_far([0.1] * 20, [True] * 10 + [False] * 10, 1e-3)
    with pytest.raises(ValueError):
        tar_at_far([0.1, 0.2], [True, False], 0.0)


def test_tar_random_scores_near_target():
    rng = np.random.default_rng(1)
    n = 200000
    same = rng.random(n) < 0.5
    r = tar_at_far(rng.random(n), same, 0.01)
    assert r.far <= 0.01
    assert abs(r.tar - 0.01) < 0.002


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.01, 0.05, 0.1, 0.5, 1.0]))
def test_tar_matches_brute_force(seed, far):
    rng = np.random.default_rng(seed)
    n = 300
    same = rng.random(n) < 0.4
    same[:2] = [True, False]
    scores = np.clip(np.round(rng.normal(size=n) * 0.4 + 0.3 * same, 1), -1, 1)  # rounding creates ties
    if (~same).sum() < 1 / far:
        return
    r = tar_at_far(scores, same, far)
    assert r.far <= far
    assert r.tar == pytest.approx(brute_tar(scores, same, far))


def test_tar_monotone_in_far():
    rng = np.random.default_rng(2)
    same = rng.random(5000) < 0.5
    scores = rng.normal(size=5000) + 1.5 * same
    tars = [tar_at_far(scores, same, f).tar for f in (1e-3, 1e-2, 0.05, 0.1, 0.5, 1.0)]
    assert tars == sorted(tars)


# -- identification ---------------------------------------------------------------------------


def test_rank1_cases():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(20, 8))
    ids = np.arange(20) % 5
    assert rank1_identification(emb, ids, emb, ids) == 1.0
    # a single gallery identity wins every probe of that identity
    assert rank1_identification(emb[:1], [0], rng.normal(size=(4, 8)), [0, 0, 0, 0]) == 1.0
    with pytest.raises(ProtocolError):
        rank1_identification(emb[:1], [0], rng.normal(size=(4, 8)), [0, 0, 1, 2])


def test_rank1_single_gallery_identity_counts_its_share():
    rng = np.random.default_rng(3)
    g = rng.normal(size=(1, 6))
    # probes of identity 0 and 1; only identity 0 in the gallery would be a protocol error,
    # so identity 1 is present but far away from every probe
    gallery = np.concatenate([g, -10 * np.ones((1, 6))])
    probes = g + 0.01 * rng.normal(size=(10, 6))
    probe_ids = [0] * 7 + [1] * 3
    assert rank1_identification(gallery, [0, 1], probes, probe_ids) == pytest.approx(0.7)


def test_rank1_separated_clusters():
    rng = np.random.default_rng(4)
    centres = rng.normal(size=(5, 16)) * 10
    ids = np.repeat(np.arange(5), 6)
    emb = centres[ids] + rng.normal(size=(30, 16)) * 0.1
    gallery = emb[::6]
    # brute-force nearest neighbour oracle
    oracle = np.mean([
        ids[::6][np.argmax([cosine_similarity(p, q) for q in gallery])] == i for p, i in zip(emb, ids)
    ])
    assert rank1_identification(gallery, ids[::6], emb, ids) == oracle == 1.0


# -- pairs ------------------------------------------------------------------------------------------


def test_pairs_balanced_in_both_halves():
    ids = np.repeat(np.arange(10), 4)
    pairs = build_pairs(ids, 200, seed=1)
    same = np.array([p.same_identity for p in pairs])
    assert same.sum() == 100
    assert same[::2].sum() == 50 and same[1::2].sum() == 50
    for p in pairs:
        assert p.sample_a != p.sample_b
        assert (ids[p.sample_a] == ids[p.sample_b]) == p.same_identity
    assert pairs == build_pairs(ids, 200, seed=1)
    with pytest.raises(ProtocolError):
        build_pairs([0, 1, 2], 10)


def test_pairs_file_roundtrip(tmp_path):
    pairs = build_pairs(np.repeat(np.arange(4), 3), 20)
    path = tmp_path / "pairs.jsonl"
    save_pairs(path, pairs, "m.jsonl", recipe="clean")
    header, back = load_pairs(path)
    assert back == pairs and header["recipe"] == "clean"
    assert header["manifest_a"].endswith("m.jsonl")
    path.write_text(json.dumps({"sample_a": 0}) + "\n")
    with pytest.raises(ProtocolError):
        load_pairs(path)


# -- model-level ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    cfg = NetworkConfig(height=32, width=32, stage_channels=(8, 8, 16), pyramid_channels=8, embedding_dim=16, K=3)
    return FROMNet(cfg).eval()


def test_evaluation_is_deterministic(tiny_model):
    m = build_dataset(SynthConfig(identities=4, samples_per_identity=6, height=32, width=32, K=3))
    pairs = build_pairs([r["identity"] for r in m.records], 40)
    imgs = m.images()
    a, _ = evaluate_pairs(tiny_model, pairs, imgs, far_targets=(0.1,))
    b, _ = evaluate_pairs(tiny_model, pairs, imgs, far_targets=(0.1,))
    assert a.to_json() == b.to_json()


def test_breakdown_mean_and_clean_entry(tiny_model):
    base = SynthConfig(identities=4, samples_per_identity=6, height=32, width=32, K=3, clean_fraction=0.0)
    clean = build_dataset(base.replace(clean_fraction=1.0))
    regions = {"clean": clean, "upper": build_dataset(base.replace(region="upper")),
               "full": build_dataset(base.replace(region="full"))}
    table = occlusion_breakdown(tiny_model, regions, n_pairs=40)
    assert table["avg"] == pytest.approx(np.mean([table[k] for k in ("clean", "upper", "full")]))
    direct, _ = evaluate_pairs(tiny_model, build_pairs([r["identity"] for r in clean.records], 40), clean.images())
    assert table["clean"] == direct.accuracy


def test_plot_report(tmp_path):
    rng = np.random.default_rng(0)
    same = np.array([True, True, False, False] * 250)
    scores = np.clip(rng.normal(size=1000) * 0.2 + 0.4 * same, -1, 1)
    report, raw = report_from_scores(scores, same)
    assert report.tar_at_far["0.001"] is None and report.notes
    paths = plot_report(raw["scores"], raw["same"], report, tmp_path)
    assert all(p.exists() and p.stat().st_size > 0 for p in paths)
    assert isinstance(EvalReport(**json.loads(report.to_json())), EvalReport)
