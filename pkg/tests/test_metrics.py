import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualprint.data import SynthParams, generate_dataset
from dualprint.errors import ConfigError, DataError
from dualprint.metrics import (
    EvalReport,
    ScoreSet,
    e_fake_at_e_live,
    enumerate_fvc_pairs,
    evaluate_matching,
    evaluate_pad,
    export_embeddings,
    export_histogram,
    frr_at_far,
    pad_errors,
)


@pytest.fixture(scope="module")
def protocol_manifest(tmp_path_factory):
    """10 fingers x 4 impressions, every finger in the test split."""
    out = tmp_path_factory.mktemp("protocol_ds")
    return generate_dataset(
        out, n_fingers=10, n_impressions=4, seed=7, test_finger_fraction=1.0,
        params=SynthParams(identity_seed=0, n_minutiae=3, image_size=160))


# ---------------------------------------------------------------------------
# PAD error rates.


def pad_oracle(live, spoof, thr):
    apcer = 100.0 * sum(1 for s in spoof if s < thr) / len(spoof)
    bpcer = 100.0 * sum(1 for s in live if s >= thr) / len(live)
    return apcer, bpcer, (apcer + bpcer) / 2.0


def test_pad_errors_worked_example():
    apcer, bpcer, acer = pad_errors([0.1, 0.6], [0.8, 0.4])
    assert (apcer, bpcer, acer) == (50.0, 50.0, 50.0)


def test_pad_errors_separated():
    assert pad_errors([0.0, 0.1], [0.9, 0.8]) == (0.0, 0.0, 0.0)


def test_pad_errors_matches_counting_oracle(rng):
    for _ in range(50):
        live = rng.uniform(0, 1, size=rng.integers(1, 40)).tolist()
        spoof = rng.uniform(0, 1, size=rng.integers(1, 40)).tolist()
        thr = float(rng.uniform(0, 1))
        assert pad_errors(live, spoof, thr) == pad_oracle(live, spoof, thr)


def test_pad_errors_counting_conservation(rng):
    live = rng.uniform(0, 1, size=31).tolist()
    spoof = rng.uniform(0, 1, size=17).tolist()
    apcer, bpcer, acer = pad_errors(live, spoof, 0.4)
    missed_spoofs = round(apcer / 100.0 * len(spoof))
    caught_spoofs = sum(1 for s in spoof if s >= 0.4)
    assert missed_spoofs + caught_spoofs == len(spoof)
    assert acer == (apcer + bpcer) / 2.0


def test_pad_errors_rejects_bad_input():
    with pytest.raises(DataError):
        pad_errors([], [0.5])
    with pytest.raises(DataError):
        pad_errors([0.5], [])
    with pytest.raises(DataError):
        pad_errors([0.5, float("nan")], [0.5])


# ---------------------------------------------------------------------------
# FRR at a FAR target.


def frr_sweep_oracle(genuine, imposter, far_target):
    candidates = sorted(set(imposter))
    candidates.append(float(np.nextafter(max(imposter), np.inf)))
    for t in candidates:
        far = 100.0 * sum(1 for s in imposter if s >= t) / len(imposter)
        if far <= far_target:
            return 100.0 * sum(1 for s in genuine if s < t) / len(genuine)
    raise AssertionError("sentinel threshold always satisfies the target")


def test_frr_at_far_worked_example():
    # FAR per ascending imposter threshold: 100, 75, 50, 25 -> t = 0.5.
    assert frr_at_far([0.9, 0.4], [0.5, 0.3, 0.2, 0.1], 25.0) == 50.0


def test_frr_at_far_separated_and_inverted():
    assert frr_at_far([0.9] * 5, [0.1] * 5, 0.1) == 0.0
    assert frr_at_far([0.1] * 5, [0.9] * 5, 0.0) == 100.0


def test_frr_at_far_zero_target_uses_sentinel():
    # No observed imposter threshold reaches FAR 0; the operating point sits
    # just above the imposter maximum, so a tied genuine score is rejected.
    assert frr_at_far([0.5, 0.6], [0.5], 0.0) == 50.0


def test_frr_at_far_rejects_bad_input():
    with pytest.raises(ConfigError):
        frr_at_far([0.5], [0.5], -1.0)
    with pytest.raises(DataError):
        frr_at_far([], [0.5], 1.0)
    with pytest.raises(DataError):
        frr_at_far([0.5], [], 1.0)


def test_frr_at_far_matches_sweep_oracle(rng):
    for _ in range(200):
        genuine = rng.uniform(0, 1, size=rng.integers(1, 200)).tolist()
        imposter = rng.uniform(0, 1, size=rng.integers(1, 200)).tolist()
        target = float(rng.choice([0.0, 0.1, 1.0, 5.0, 25.0, 100.0]))
        assert frr_at_far(genuine, imposter, target) == \
            frr_sweep_oracle(genuine, imposter, target)


def test_frr_at_far_handles_ties(rng):
    scores = rng.choice([0.2, 0.5, 0.8], size=60).tolist()
    other = rng.choice([0.2, 0.5, 0.8], size=40).tolist()
    for target in (0.0, 10.0, 50.0):
        assert frr_at_far(scores, other, target) == \
            frr_sweep_oracle(scores, other, target)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1, width=32), min_size=1, max_size=30),
       st.lists(st.floats(0, 1, width=32), min_size=1, max_size=30))
def test_frr_at_far_monotone_in_target(genuine, imposter):
    targets = [0.0, 1.0, 10.0, 50.0, 100.0]
    values = [frr_at_far(genuine, imposter, t) for t in targets]
    assert all(0.0 <= v <= 100.0 for v in values)
    assert all(a >= b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# Spoof-side operating point.


def test_e_fake_separated():
    assert e_fake_at_e_live([0.1, 0.2], [0.8, 0.9]) == 0.0


def test_e_fake_identical_distributions(rng):
    scores = rng.uniform(0, 1, size=400).tolist()
    value = e_fake_at_e_live(scores, list(scores), e_live=10.0)
    assert value == frr_sweep_oracle(scores, scores, 10.0)
    assert value == pytest.approx(90.0, abs=2.0)


def test_e_fake_role_mapping(rng):
    live = rng.uniform(0, 1, size=50).tolist()
    spoof = rng.uniform(0, 1, size=50).tolist()
    assert e_fake_at_e_live(live, spoof, 5.0) == frr_at_far(spoof, live, 5.0)


# ---------------------------------------------------------------------------
# Verification protocol enumeration.


def test_fvc_pair_counts_known_protocols():
    genuine, imposter = enumerate_fvc_pairs(100, 8)
    assert (len(genuine), len(imposter)) == (2800, 4950)
    genuine, imposter = enumerate_fvc_pairs(140, 12)
    assert (len(genuine), len(imposter)) == (9240, 9730)
    genuine, imposter = enumerate_fvc_pairs(1, 2)
    assert (len(genuine), len(imposter)) == (1, 0)


def test_fvc_pair_counts_match_closed_forms():
    for n in range(1, 21):
        for m in range(1, 13):
            genuine, imposter = enumerate_fvc_pairs(n, m)
            assert len(genuine) == n * math.comb(m, 2)
            assert len(imposter) == math.comb(n, 2)


def test_fvc_pair_structure():
    genuine, imposter = enumerate_fvc_pairs(4, 3)
    for (f1, i1), (f2, i2) in genuine:
        assert f1 == f2 and i1 < i2
    for (f1, i1), (f2, i2) in imposter:
        assert f1 < f2 and i1 == 1 and i2 == 1
    assert len(set(genuine)) == len(genuine)
    assert len(set(imposter)) == len(imposter)


def test_fvc_pairs_reject_bad_shape():
    with pytest.raises(ConfigError):
        enumerate_fvc_pairs(0, 5)
    with pytest.raises(ConfigError):
        enumerate_fvc_pairs(5, 0)


# ---------------------------------------------------------------------------
# Report container.


def test_eval_report_json_roundtrip(tmp_path):
    report = EvalReport(threshold=0.5, apcer=10.0, bpcer=20.0, acer=15.0,
                        frr_at_far={"1.0": 2.5}, counts={"live": 4, "spoof": 4})
    payload = json.loads(report.to_json())
    assert payload["acer"] == (payload["apcer"] + payload["bpcer"]) / 2.0
    assert payload["frr_at_far"]["1.0"] == 2.5
    path = tmp_path / "report.json"
    report.write(path)
    assert json.loads(path.read_text()) == payload


# ---------------------------------------------------------------------------
# Manifest-level evaluation.


def test_evaluate_pad_on_synthetic_split(tiny_model, protocol_manifest):
    report, scores = evaluate_pad(tiny_model, protocol_manifest, split="test")
    assert report.counts == {"live": 40, "spoof": 40}
    assert len(scores.genuine_scores) == 40  # live role
    assert len(scores.imposter_scores) == 40
    assert 0.0 <= report.acer <= 100.0
    assert report.acer == (report.apcer + report.bpcer) / 2.0
    assert all(0.0 <= s <= 1.0 for s in scores.genuine_scores)


def test_evaluate_pad_empty_split_is_an_error(tiny_model, protocol_manifest):
    with pytest.raises(DataError):
        evaluate_pad(tiny_model, protocol_manifest, split="val")


def test_evaluate_matching_protocol_counts(tiny_model, protocol_manifest):
    report, scores = evaluate_matching(tiny_model, protocol_manifest,
                                       far_targets=(1.0,), split="test")
    assert report.counts == {"genuine_pairs": 60, "imposter_pairs": 45,
                             "templates": 40}
    assert len(scores.genuine_scores) == 60
    assert len(scores.imposter_scores) == 45
    assert set(report.frr_at_far) == {"1.0"}


def test_evaluate_matching_is_deterministic(tiny_model, protocol_manifest):
    first = evaluate_matching(tiny_model, protocol_manifest,
                              far_targets=(1.0, 0.0), split="test")
    second = evaluate_matching(tiny_model, protocol_manifest,
                               far_targets=(1.0, 0.0), split="test")
    assert first[0].frr_at_far == second[0].frr_at_far
    assert first[1].genuine_scores == second[1].genuine_scores
    assert first[1].imposter_scores == second[1].imposter_scores


def test_evaluate_matching_needs_enough_impressions(tiny_model, tmp_path):
    manifest = generate_dataset(
        tmp_path / "thin", n_fingers=2, n_impressions=2, seed=3,
        test_finger_fraction=0.5,
        params=SynthParams(identity_seed=0, n_minutiae=3, image_size=160))
    with pytest.raises(DataError):
        evaluate_matching(tiny_model, manifest, split="test")


# ---------------------------------------------------------------------------
# CSV exports.


def test_export_histogram_conserves_counts(tmp_path, rng):
    scores = ScoreSet(genuine_scores=rng.uniform(0, 1, 37).tolist(),
                      imposter_scores=rng.uniform(0, 1, 23).tolist())
    path = tmp_path / "hist.csv"
    export_histogram(scores, bins=8, path=path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "bin_lo,bin_hi,genuine,imposter"
    assert len(rows) == 9
    data = [row.split(",") for row in rows[1:]]
    assert sum(int(r[2]) for r in data) == 37
    assert sum(int(r[3]) for r in data) == 23


def test_export_histogram_rewrites_identically(tmp_path, rng):
    scores = ScoreSet(rng.uniform(0, 1, 11).tolist(),
                      rng.uniform(0, 1, 13).tolist(), roles=("live", "spoof"))
    first = tmp_path / "a.csv"
    second = tmp_path / "b.csv"
    export_histogram(scores, bins=4, path=first)
    export_histogram(scores, bins=4, path=second)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text().splitlines()[0] == "bin_lo,bin_hi,live,spoof"


def test_export_histogram_degenerate_scores(tmp_path):
    scores = ScoreSet([0.5, 0.5], [0.5])
    path = tmp_path / "flat.csv"
    export_histogram(scores, bins=2, path=path)
    rows = path.read_text().strip().splitlines()[1:]
    assert sum(int(r.split(",")[2]) for r in rows) == 2


def test_export_histogram_validates_bins(tmp_path):
    with pytest.raises(ConfigError):
        export_histogram(ScoreSet([0.5], [0.5]), bins=0, path=tmp_path / "x.csv")


def test_export_embeddings_shape_and_determinism(tiny_model, tmp_path):
    manifest = generate_dataset(
        tmp_path / "micro", n_fingers=2, n_impressions=2, seed=5,
        params=SynthParams(identity_seed=0, n_minutiae=3, image_size=160))
    first = tmp_path / "emb_a.csv"
    second = tmp_path / "emb_b.csv"
    export_embeddings(tiny_model, manifest, first)
    export_embeddings(tiny_model, manifest, second)
    rows = first.read_text().strip().splitlines()
    header = rows[0].split(",")
    assert header[:3] == ["finger_id", "impression_id", "liveness"]
    assert len(header) == 3 + 64
    assert len(rows) - 1 == len(manifest.records) * 3  # 3 minutiae per image
    assert first.read_bytes() == second.read_bytes()


def test_export_embeddings_empty_selection(tiny_model, protocol_manifest,
                                           tmp_path):
    with pytest.raises(DataError):
        export_embeddings(tiny_model, protocol_manifest, tmp_path / "x.csv",
                          split="val")
