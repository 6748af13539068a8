import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualprint.data import (Minutia, RigidTransform, SynthParams,
                            assign_val_split, generate_dataset,
                            impression_transform, load_manifest,
                            read_image_pixels, read_minutiae, shift_minutiae,
                            synth_generate, write_image_pixels,
                            write_manifest, write_minutiae)
from dualprint.errors import (ConfigError, DataError, ManifestError,
                              MinutiaeParseError)

TAU = 2 * math.pi


def test_minutia_theta_normalized():
    m = Minutia(x=1.0, y=2.0, theta=-0.5)
    assert 0.0 <= m.theta < TAU
    assert m.theta == pytest.approx(TAU - 0.5)
    assert Minutia(x=0, y=0, theta=TAU + 1.0).theta == pytest.approx(1.0)


def test_minutia_quality_bounds():
    with pytest.raises(ConfigError):
        Minutia(x=0, y=0, theta=0, quality=1.5)
    with pytest.raises(ConfigError):
        Minutia(x=0, y=0, theta=0, quality=-0.1)


@given(rot=st.floats(-3, 3), tx=st.floats(-20, 20), ty=st.floats(-20, 20),
       px=st.floats(-100, 100), py=st.floats(-100, 100))
@settings(max_examples=50, deadline=None)
def test_rigid_transform_inverse_roundtrip(rot, tx, ty, px, py):
    t = RigidTransform(rotation=rot, tx=tx, ty=ty, cx=50.0, cy=50.0)
    inv = t.inverse()
    p = np.array([px, py])
    back = inv.apply(t.apply(p))
    assert np.allclose(back, p, atol=1e-9)


def test_rigid_transform_angle_composition():
    t = RigidTransform(rotation=0.7, tx=1.0, ty=2.0, cx=0.0, cy=0.0)
    assert t.apply_angle(0.5) == pytest.approx((0.5 + 0.7) % TAU)


def test_synth_deterministic():
    params = SynthParams(identity_seed=3, impression_seed=2)
    img_a, min_a = synth_generate(params)
    img_b, min_b = synth_generate(params)
    assert np.array_equal(img_a.pixels, img_b.pixels)
    assert min_a == min_b


def test_synth_impressions_differ_but_share_identity():
    base = SynthParams(identity_seed=5, impression_seed=1)
    other = SynthParams(identity_seed=5, impression_seed=2)
    img1, min1 = synth_generate(base)
    img2, min2 = synth_generate(other)
    assert not np.array_equal(img1.pixels, img2.pixels)
    assert len(min1) == len(min2)

    # Same template observed under two rigid transforms: mapping impression 1
    # minutiae through T1^-1 then T2 must land on impression 2's minutiae.
    t1 = impression_transform(5, 1, base.image_size)
    t2 = impression_transform(5, 2, base.image_size)
    for a, b in zip(min1, min2):
        template_xy = t1.inverse().apply(np.array([a.x, a.y]))
        moved = t2.apply(template_xy)
        assert math.hypot(moved[0] - b.x, moved[1] - b.y) < 1e-9
        expected_theta = (a.theta - t1.rotation + t2.rotation) % TAU
        diff = abs(expected_theta - b.theta) % TAU
        assert min(diff, TAU - diff) < 1e-9


def test_synth_spoof_same_minutiae_different_pixels():
    live = SynthParams(identity_seed=7, impression_seed=1, spoof=False)
    spoof = SynthParams(identity_seed=7, impression_seed=1, spoof=True)
    img_l, min_l = synth_generate(live)
    img_s, min_s = synth_generate(spoof)
    assert min_l == min_s
    assert img_s.liveness == "spoof"
    diff = np.abs(img_l.pixels.astype(int) - img_s.pixels.astype(int))
    assert diff.mean() > 2.0


def test_synth_minutiae_inside_image():
    for seed in range(4):
        img, minutiae = synth_generate(SynthParams(identity_seed=seed))
        assert len(minutiae) == 8
        for m in minutiae:
            assert img.contains(m)


def test_synth_param_validation():
    with pytest.raises(ConfigError):
        SynthParams(identity_seed=0, ridge_frequency=0.0).validate()
    with pytest.raises(ConfigError):
        SynthParams(identity_seed=0, n_minutiae=0).validate()
    with pytest.raises(ConfigError):
        SynthParams(identity_seed=0, image_size=64).validate()


def test_minutiae_file_roundtrip(tmp_path):
    minutiae = [Minutia(x=1.25, y=3.5, theta=0.75, quality=0.5),
                Minutia(x=200.0, y=100.125, theta=6.0, quality=1.0)]
    path = tmp_path / "a.min"
    write_minutiae(path, minutiae)
    back = read_minutiae(path)
    assert len(back) == 2
    for orig, got in zip(minutiae, back):
        assert got.x == pytest.approx(orig.x, abs=1e-6)
        assert got.y == pytest.approx(orig.y, abs=1e-6)
        assert got.theta == pytest.approx(orig.theta, abs=1e-6)
        assert got.quality == pytest.approx(orig.quality, abs=1e-6)


def test_minutiae_three_field_line_defaults_quality(tmp_path):
    path = tmp_path / "b.min"
    path.write_text("10.0 20.0 1.5\n\n30 40 2.5 0.25\n")
    got = read_minutiae(path)
    assert got[0].quality == 1.0
    assert got[1].quality == 0.25


def test_minutiae_parse_error_has_location(tmp_path):
    path = tmp_path / "bad.min"
    path.write_text("1.0 2.0 0.5\nnot numbers here\n")
    with pytest.raises(MinutiaeParseError) as err:
        read_minutiae(path)
    assert err.value.line_no == 2
    assert str(path) in str(err.value)
    assert ":2:" in str(err.value)


def test_minutiae_wrong_field_count(tmp_path):
    path = tmp_path / "bad2.min"
    path.write_text("1.0 2.0\n")
    with pytest.raises(MinutiaeParseError):
        read_minutiae(path)


def test_image_png_roundtrip(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(48, 64), dtype=np.uint8)
    path = tmp_path / "img.png"
    write_image_pixels(path, pixels)
    back = read_image_pixels(path)
    assert back.dtype == np.uint8
    assert np.array_equal(back, pixels)


def test_shift_minutiae():
    m = [Minutia(x=5.0, y=6.0, theta=1.0)]
    out = shift_minutiae(m, dx=-2.0, dy=3.0)
    assert out[0].x == 3.0 and out[0].y == 9.0 and out[0].theta == 1.0


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_generate_dataset_counts_and_determinism(tmp_path):
    man = generate_dataset(tmp_path / "a", n_fingers=3, n_impressions=2,
                           seed=9)
    # live + spoof counterpart for every impression
    assert len(man.records) == 3 * 2 * 2
    assert len(list((tmp_path / "a").glob("*.png"))) == 12
    assert len(list((tmp_path / "a").glob("*.min"))) == 12
    generate_dataset(tmp_path / "b", n_fingers=3, n_impressions=2, seed=9)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    # reload from disk agrees
    again = load_manifest(tmp_path / "a" / "manifest.json")
    assert again.records == man.records


def test_generate_dataset_different_seed_differs(tmp_path):
    generate_dataset(tmp_path / "a", n_fingers=2, n_impressions=2, seed=1)
    generate_dataset(tmp_path / "b", n_fingers=2, n_impressions=2, seed=2)
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "b")


def test_generate_dataset_spoof_ratio_zero(tmp_path):
    man = generate_dataset(tmp_path / "ds", n_fingers=2, n_impressions=2,
                           spoof_ratio=0.0, seed=0)
    assert all(r.liveness == "live" for r in man.records)
    assert len(man.records) == 4


def test_generate_dataset_split_structure(tmp_path):
    man = generate_dataset(tmp_path / "ds", n_fingers=10, n_impressions=2,
                           seed=0, test_finger_fraction=0.3)
    splits = {r.split for r in man.records}
    assert splits == {"train", "val", "test"}
    test_fingers = {r.finger_id for r in man.records if r.split == "test"}
    other_fingers = {r.finger_id for r in man.records if r.split != "test"}
    assert len(test_fingers) == 3
    assert test_fingers.isdisjoint(other_fingers)


def test_assign_val_split_stratified():
    from dualprint.data import ManifestRecord
    records = [ManifestRecord(image=f"i{k}.png", minutiae=f"i{k}.min",
                              finger_id=k, impression_id=1,
                              liveness="live" if k < 10 else "spoof",
                              split="train")
               for k in range(20)]
    out = assign_val_split(records, val_fraction=0.2, seed=0)
    val = [r for r in out if r.split == "val"]
    assert len(val) == 4
    assert sum(1 for r in val if r.liveness == "live") == 2
    # deterministic
    again = assign_val_split(records, val_fraction=0.2, seed=0)
    assert out == again


def test_manifest_validation_rejects_duplicates(tmp_path):
    man = generate_dataset(tmp_path / "ds", n_fingers=2, n_impressions=2,
                           seed=0)
    records = list(man.records) + [man.records[0]]
    with pytest.raises(ManifestError):
        write_manifest(records, tmp_path / "ds" / "dup.json")


def test_manifest_unknown_liveness_rejected(tmp_path):
    man = generate_dataset(tmp_path / "ds", n_fingers=2, n_impressions=2,
                           seed=0)
    import dataclasses
    bad = dataclasses.replace(man.records[0], liveness="alive")
    with pytest.raises(ManifestError):
        write_manifest([bad], tmp_path / "ds" / "bad.json")


def test_manifest_train_split_never_unknown(tmp_path):
    man = generate_dataset(tmp_path / "ds", n_fingers=2, n_impressions=2,
                           seed=0)
    import dataclasses
    bad = dataclasses.replace(man.records[0], liveness="unknown")
    with pytest.raises(ManifestError):
        write_manifest([bad], tmp_path / "ds" / "bad.json")


def test_manifest_missing_file_detected(tmp_path):
    man = generate_dataset(tmp_path / "ds", n_fingers=2, n_impressions=2,
                           seed=0)
    (tmp_path / "ds" / man.records[0].image).unlink()
    with pytest.raises(DataError):
        load_manifest(tmp_path / "ds" / "manifest.json")


def test_manifest_image_loading(tmp_path):
    man = generate_dataset(tmp_path / "ds", n_fingers=2, n_impressions=2,
                           seed=0)
    rec = man.records[0]
    img = man.load_image(rec)
    assert img.pixels.shape == (224, 224)
    assert img.finger_id == rec.finger_id
    assert img.liveness == rec.liveness
    minutiae = man.load_minutiae(rec)
    assert len(minutiae) == 8
