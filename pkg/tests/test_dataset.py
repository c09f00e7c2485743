import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasematch.dataset import (AlignedPair, Manifest, SampleRecord, SynthParams, Transform, augment,
                                build_dataset, derangement, list_pairs, load_pair, make_displaced_negatives,
                                make_negatives, read_manifest, save_pair, slice_positive, split,
                                synth_pair, write_manifest)
from phasematch.errors import (BadRatios, CannotDerange, CorruptHeader, InvalidSynthParams,
                               NoValidWindows)
from phasematch.imaging import GrayImage, Patch, window_inside


def random_pair(size=64, transform=Transform(), seed=0):
    rng = np.random.default_rng(seed)
    return AlignedPair(GrayImage(rng.random((size, size))), GrayImage(rng.random((size, size))), transform)


def positives(n, pair_id=0):
    rng = np.random.default_rng(n + 100 * pair_id)
    return [SampleRecord(Patch(rng.random((8, 8)), (i, 0)), Patch(rng.random((8, 8)), (i, 1)), 1, pair_id, i)
            for i in range(n)]


# --------------------------------------------------------------------- transforms

@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-3, 3), st.floats(0.5, 2), st.floats(0, 50))
def test_transform_inverse(tx, ty, theta, scale, c):
    t = Transform(tx, ty, theta, scale, c, c)
    pts = np.array([[0.0, 0.0], [10.0, -3.0], [40.0, 25.0]])
    np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-9)


def test_transform_dict_roundtrip():
    t = Transform(1, -2, math.pi, 1.0, 63.5, 63.5)
    assert Transform.from_dict(t.to_dict()) == t
    assert Transform().is_identity and not t.is_identity
    with pytest.raises(ValueError):
        Transform(scale=0)


# --------------------------------------------------------------------- slicing

def test_slice_identity_grid():
    pair = random_pair(64)
    recs = slice_positive(pair, 32, 32)
    assert len(recs) == 4
    for r in recs:
        assert r.label == 1 and r.size == 32
        cx, cy = r.patch_a.origin
        assert r.patch_b.origin == (cx, cy)
        np.testing.assert_array_equal(r.patch_a.pixels, pair.img_a.pixels[cy - 16:cy + 16, cx - 16:cx + 16])
        np.testing.assert_array_equal(r.patch_b.pixels, pair.img_b.pixels[cy - 16:cy + 16, cx - 16:cx + 16])


@pytest.mark.parametrize("t", [Transform(8, 0), Transform(-5, 7), Transform(3, 3, math.pi, 1, 31.5, 31.5)])
def test_slice_skips_windows_leaving_b(t):
    pair = random_pair(64, t)
    size, stride = 16, 4
    recs = slice_positive(pair, size, stride)
    expected = 0
    for cy in range(8, 64 - 8 + 1, stride):
        for cx in range(8, 64 - 8 + 1, stride):
            bx, by = np.rint(t.apply((cx, cy))).astype(int)
            expected += window_inside(64, 64, bx, by, size)
    assert len(recs) == expected
    for r in recs:
        bx, by = r.patch_b.origin
        assert window_inside(64, 64, bx, by, size)
        assert np.allclose(np.rint(t.apply(r.patch_a.origin)), (bx, by))


def test_slice_errors():
    with pytest.raises(NoValidWindows):
        slice_positive(random_pair(64, Transform(70, 0)), 16, 4)
    with pytest.raises(ValueError):
        slice_positive(random_pair(64), 16, 0)


# --------------------------------------------------------------------- negatives

def test_derangement_small_cases():
    with pytest.raises(CannotDerange):
        derangement(1, np.random.default_rng(0))
    assert derangement(2, np.random.default_rng(0)).tolist() == [1, 0]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_derangement_property(n, seed):
    perm = derangement(n, np.random.default_rng(seed))
    assert sorted(perm.tolist()) == list(range(n))
    assert not np.any(perm == np.arange(n))


def test_make_negatives():
    with pytest.raises(CannotDerange):
        make_negatives(positives(1))
    pos = positives(5)
    neg = make_negatives(pos, seed=3)
    assert len(neg) == 5 and all(r.label == -1 for r in neg)
    for p, n in zip(pos, neg):
        assert n.patch_a is p.patch_a
        assert n.patch_b is not p.patch_b
    # a deterministic permutation of the B side
    assert [id(n.patch_b) for n in neg] == [id(n.patch_b) for n in make_negatives(pos, seed=3)]
    assert sorted(id(n.patch_b) for n in neg) == sorted(id(p.patch_b) for p in pos)


def test_negatives_stay_within_their_pair_unless_asked():
    pos = positives(4, pair_id=0) + positives(3, pair_id=1)
    neg = make_negatives(pos, seed=0)
    by_id = {id(p.patch_b): p.pair_id for p in pos}
    assert all(by_id[id(n.patch_b)] == n.pair_id for n in neg)
    crossed = make_negatives(pos, seed=0, cross_pair=True)
    assert len(crossed) == 7 and all(c.patch_b is not p.patch_b for c, p in zip(crossed, pos))


def test_displaced_negatives_are_off_target():
    pair = random_pair(96)
    pos = slice_positive(pair, 16, 8)
    neg = make_displaced_negatives(pair, pos, 3, 6, seed=1)
    assert 0 < len(neg) <= len(pos)
    for n in neg:
        p = pos[n.index]
        d = max(abs(n.patch_b.origin[0] - p.patch_b.origin[0]), abs(n.patch_b.origin[1] - p.patch_b.origin[1]))
        assert 3 <= d <= 6 and n.label == -1


# --------------------------------------------------------------------- augmentation

def test_hflip_is_an_involution():
    pos = positives(3)
    twice = augment(augment(pos, ["hflip"])[3:], ["hflip"])[3:]
    for a, b in zip(pos, twice):
        np.testing.assert_array_equal(a.patch_a.pixels, b.patch_a.pixels)


@pytest.mark.parametrize("ops", [[], ["hflip"], ["hflip", "vflip"], ["hflip", "vflip", "rot90"]])
def test_augment_counts(ops):
    out = augment(positives(4), ops)
    assert len(out) == 4 * (len(ops) + 1)
    assert [r.label for r in out] == [1] * len(out)


def test_geometric_ops_act_on_both_patches():
    pos = positives(1)
    rot = augment(pos, ["rot90"])[1]
    np.testing.assert_array_equal(rot.patch_a.pixels, np.rot90(pos[0].patch_a.pixels))
    np.testing.assert_array_equal(rot.patch_b.pixels, np.rot90(pos[0].patch_b.pixels))


def test_gamma_jitter_range_and_independence():
    pos = positives(20)
    out = augment(pos, [], gamma_range=(0.5, 2.0), seed=1)
    assert len(out) == 40
    for r in out[20:]:
        for px in (r.patch_a.pixels, r.patch_b.pixels):
            assert px.min() >= 0 and px.max() <= 1
    with pytest.raises(ValueError):
        augment(pos, ["shear"])
    with pytest.raises(ValueError):
        augment(pos, [], gamma_range=(0.0, 1.0))


# --------------------------------------------------------------------- split and manifest

def grouped(n_groups):
    recs = []
    for g in range(n_groups):
        recs += positives(2, pair_id=g)
    return Manifest(recs)


def test_split_counts_and_determinism():
    m = split(grouped(100), (0.7, 0.15, 0.15), seed=4)
    groups = {}
    for r, tag in zip(m.records, m.splits):
        groups.setdefault(r.pair_id, set()).add(tag)
    assert all(len(tags) == 1 for tags in groups.values())
    counts = {t: sum(1 for tags in groups.values() if t in tags) for t in ("train", "val", "test")}
    assert counts == {"train": 70, "val": 15, "test": 15}
    assert split(grouped(100), (0.7, 0.15, 0.15), seed=4).splits == m.splits
    assert split(grouped(100), (0.7, 0.15, 0.15), seed=5).splits != m.splits


@pytest.mark.parametrize("ratios", [(0.5, 0.3, 0.1), (0.5, 0.5, 0.1), (1.0, 0.0, 0.0), (0.5, 0.5)])
def test_bad_ratios(ratios):
    with pytest.raises(BadRatios):
        split(grouped(3), ratios)


def test_build_dataset_balance_and_leakage():
    pairs = [random_pair(64, seed=s) for s in range(5)]
    m = build_dataset(pairs, 16, 16, seed=2, displaced_fraction=0.3)
    labels = [r.label for r in m.records]
    assert labels.count(1) == labels.count(-1) == 5 * 16
    tag_of_group = {}
    for r, tag in zip(m.records, m.splits):
        assert tag_of_group.setdefault(r.pair_id, tag) == tag
    assert set(m.splits) <= {"train", "val", "test"}


def test_single_pair_counts():
    m = build_dataset([random_pair(64)], 32, 32)
    assert [r.label for r in m.records].count(1) == 4 and len(m.records) == 8


def test_manifest_roundtrip_is_byte_exact(tmp_path):
    pairs = [random_pair(64, seed=s) for s in range(3)]
    m = build_dataset(pairs, 16, 16, seed=9)
    write_manifest(m, tmp_path / "a.txt")
    back = read_manifest(tmp_path / "a.txt")
    assert back.seed == 9 and back.params == m.params and back.splits == m.splits
    for r, s in zip(m.records, back.records):
        assert (r.label, r.pair_id, r.patch_a.origin, r.patch_b.origin) == (s.label, s.pair_id,
                                                                             s.patch_a.origin, s.patch_b.origin)
        np.testing.assert_array_equal(r.patch_a.pixels.astype(np.float32), s.patch_a.pixels)
    write_manifest(back, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert (tmp_path / "a.txt.bin").read_bytes() == (tmp_path / "b.txt.bin").read_bytes()
    lines = (tmp_path / "a.txt").read_text().splitlines()
    assert lines[3] == "# label size ax ay bx by pair_id split"
    assert lines[4].split()[0] in ("+1", "-1")


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "none.txt")
    (tmp_path / "x.txt").write_text("hello\n")
    with pytest.raises(CorruptHeader):
        read_manifest(tmp_path / "x.txt")
    write_manifest(build_dataset([random_pair(64)], 32, 32), tmp_path / "m.txt")
    (tmp_path / "m.txt.bin").write_bytes(b"\x00" * 16)
    with pytest.raises(CorruptHeader):
        read_manifest(tmp_path / "m.txt")


# --------------------------------------------------------------------- synthesis

def test_synth_pair_is_deterministic():
    p = SynthParams(size=64, max_shift=4)
    a, b = synth_pair(p, 12), synth_pair(p, 12)
    np.testing.assert_array_equal(a.img_a.pixels, b.img_a.pixels)
    np.testing.assert_array_equal(a.img_b.pixels, b.img_b.pixels)
    assert a.transform == b.transform


def test_aligned_mode_is_identity():
    assert synth_pair(SynthParams(size=64), 1).transform.is_identity


def test_translation_ground_truth_is_exact():
    # without remap/speckle/shadow change, B must equal A shifted by the transform
    p = SynthParams(size=96, max_shift=5, speckle_var=0.0, shadow_dir_b=0.0, gamma_range=(0.999, 1.0),
                    sigmoid_gain_range=(0.01, 0.02))
    for seed in range(4):
        pair = synth_pair(p, seed)
        t = pair.transform
        tx, ty = int(t.tx), int(t.ty)
        a, b = pair.img_a.pixels, pair.img_b.pixels
        ys, xs = np.mgrid[10:86, 10:86]
        ca = np.corrcoef(a[ys, xs].ravel(), b[ys + ty, xs + tx].ravel())[0, 1]
        assert ca > 0.999


def test_reversed_mode_rotates():
    p = SynthParams(size=64, viewpoint="reversed", max_shift=3)
    pair = synth_pair(p, 2)
    assert pair.transform.theta == pytest.approx(math.pi)
    np.testing.assert_allclose(pair.transform.apply((0.0, 0.0)),
                               (63 + pair.transform.tx, 63 + pair.transform.ty), atol=1e-9)


def test_nonlinear_difference_and_shadow_reversal():
    base = SynthParams(size=128)
    no_flip = SynthParams(size=128, shadow_dir_b=0.0)
    for seed in range(3):
        a = synth_pair(base, seed)
        b = synth_pair(no_flip, seed)
        r_rev = np.corrcoef(a.img_a.pixels.ravel(), a.img_b.pixels.ravel())[0, 1]
        r_same = np.corrcoef(b.img_a.pixels.ravel(), b.img_b.pixels.ravel())[0, 1]
        assert r_rev < 1.0 and r_rev < r_same


@pytest.mark.parametrize("kw", [dict(size=16), dict(speckle_var=-1), dict(gamma_range=(2, 1)),
                                dict(viewpoint="sideways"), dict(max_shift=40), dict(target_size=(3, 3))])
def test_invalid_synth_params(kw):
    with pytest.raises(InvalidSynthParams):
        synth_pair(SynthParams(**kw), 0)


def test_synth_params_dict_roundtrip():
    p = SynthParams(size=64, gamma_range=(0.5, 2.0))
    assert SynthParams.from_dict(p.to_dict()) == p
    with pytest.raises(InvalidSynthParams):
        SynthParams.from_dict({"colour": 1})


def test_pair_files_roundtrip(tmp_path):
    pair = synth_pair(SynthParams(size=64, max_shift=3), 4)
    save_pair(pair, tmp_path, "pair_0000", {"seed": 4})
    assert list_pairs(tmp_path) == ["pair_0000"]
    back = load_pair(tmp_path, "pair_0000")
    assert back.transform == pair.transform
    assert np.max(np.abs(back.img_a.pixels - pair.img_a.pixels)) <= 1 / 255
