import math
from dataclasses import replace

import numpy as np
import pytest

from driftsyn.data import (
    BadMagicError,
    ByteCountError,
    LABELS,
    PairedSample,
    PhantomSpec,
    PrepConfig,
    UnknownVersionError,
    Volume,
    VolumeFormatError,
    crop_or_pad,
    foreground_slices,
    generate_phantom_pair,
    normalize,
    phantom_dataset,
    phantom_labels,
    preprocess,
    preprocess_pair,
    read_pgm,
    read_volume,
    resample_isotropic,
    slices_from_pairs,
    write_pgm,
    write_volume,
)


def rand_volume(shape=(3, 8, 8), seed=0, spacing=(1.0, 1.0, 1.0), modality="condition"):
    return Volume(np.random.default_rng(seed).normal(size=shape), spacing, modality=modality)


# ---------------------------------------------------------------------- resampling


def test_resample_identity_is_bit_equal():
    v = rand_volume()
    out = resample_isotropic(v, 1.0)
    assert out.values.tobytes() == v.values.tobytes()


def test_resample_doubles_nz():
    v = rand_volume((10, 4, 4), spacing=(2.0, 1.0, 1.0))
    out = resample_isotropic(v, 1.0)
    assert out.shape == (20, 4, 4)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_linear_ramp_is_exact():
    nz, ny, nx = 6, 7, 5
    sz, sy, sx = 2.0, 1.5, 0.5
    z, y, x = np.meshgrid(np.arange(nz) * sz, np.arange(ny) * sy, np.arange(nx) * sx, indexing="ij")
    ramp = lambda z, y, x: 0.3 * z - 1.7 * y + 2.1 * x + 5.0  # noqa: E731
    v = Volume(ramp(z, y, x), (sz, sy, sx))
    out = resample_isotropic(v, 1.0)
    oz, oy, ox = np.meshgrid(*(np.arange(n) * 1.0 for n in out.shape), indexing="ij")
    inside = (oz <= (nz - 1) * sz) & (oy <= (ny - 1) * sy) & (ox <= (nx - 1) * sx)
    err = np.abs(out.values - ramp(oz, oy, ox))[inside]
    assert inside.sum() > 50
    assert err.max() <= 1e-9


def test_resample_rejects_non_positive_target():
    with pytest.raises(ValueError):
        resample_isotropic(rand_volume(), 0.0)


# ---------------------------------------------------------------------- crop / pad


def test_crop_600_to_512_offset_44():
    v = Volume(np.arange(600 * 600, dtype=np.float64).reshape(1, 600, 600))
    out = crop_or_pad(v, 512)
    np.testing.assert_array_equal(out.values, v.values[:, 44:556, 44:556])


def test_pad_400_to_512_with_56_wide_border():
    v = Volume(np.ones((1, 400, 400)))
    out = crop_or_pad(v, 512).values[0]
    assert out.shape == (512, 512)
    assert np.all(out[:56] == 0) and np.all(out[-56:] == 0)
    assert np.all(out[:, :56] == 0) and np.all(out[:, -56:] == 0)
    assert np.all(out[56:456, 56:456] == 1)


def test_crop_pad_identity_at_target():
    v = rand_volume((2, 16, 16))
    np.testing.assert_array_equal(crop_or_pad(v, 16).values, v.values)


def test_odd_remainder_goes_to_high_side():
    v = Volume(np.arange(5.0).reshape(1, 5, 1) * np.ones((1, 5, 5)))
    cropped = crop_or_pad(v, (2, 5)).values[0, :, 0]
    np.testing.assert_array_equal(cropped, [1.0, 2.0])
    padded = crop_or_pad(Volume(np.ones((1, 3, 3))), 6).values[0]
    np.testing.assert_array_equal(padded[:, 2], [0, 1, 1, 1, 0, 0])


@pytest.mark.parametrize("n,target", [(37, 64), (40, 41), (10, 17)])
def test_pad_then_crop_recovers_original(n, target):
    v = rand_volume((2, n, n), seed=n)
    back = crop_or_pad(crop_or_pad(v, target), n)
    np.testing.assert_array_equal(back.values, v.values)


# ---------------------------------------------------------------------- normalization


def test_target_window_maps_to_unit_interval():
    vals = np.linspace(-1000, 2000, 60).reshape(1, 6, 10)
    out = normalize(Volume(vals, modality="target"))
    assert out.values.min() == 0.0 and out.values.max() == 1.0
    assert out.norm.lo == -1000 and out.norm.hi == 2000
    np.testing.assert_allclose(out.norm.invert(out.values), vals, atol=1e-9)


def test_target_window_clips():
    out = normalize(Volume(np.array([[[-3000.0, 5000.0, 500.0]]]), modality="target"))
    np.testing.assert_allclose(out.values[0, 0], [0.0, 1.0, 0.5])


def test_constant_volume_maps_to_half_with_warning():
    with pytest.warns(UserWarning, match="constant"):
        out = normalize(Volume(np.full((2, 3, 3), 7.0)))
    assert np.all(out.values == 0.5)
    assert out.norm.constant


@pytest.mark.parametrize("seed", range(5))
def test_condition_clip_bounds_match_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.gamma(2.0, 100.0, size=(3, 17, 13))
    out = normalize(Volume(x))
    s = sorted(x.ravel().tolist())
    n = len(s)
    lo = s[math.floor(0.005 * (n - 1))]
    hi = s[math.ceil(0.995 * (n - 1))]
    assert out.norm.lo == lo and out.norm.hi == hi
    assert out.values.min() == 0.0 and out.values.max() == 1.0


def test_condition_normalization_idempotent():
    x = np.random.default_rng(1).gamma(2.0, 100.0, size=(2, 20, 20))
    once = normalize(Volume(x))
    twice = normalize(replace(once, domain="raw"))
    np.testing.assert_allclose(twice.values, once.values, rtol=0, atol=1e-15)


def test_normalized_domain_is_passthrough():
    once = normalize(rand_volume())
    np.testing.assert_array_equal(normalize(once).values, once.values)


# ---------------------------------------------------------------------- composition


def test_preprocess_equals_stepwise_pipeline():
    v = Volume(np.random.default_rng(2).gamma(2, 50, size=(4, 70, 50)), (2.0, 0.9, 1.1))
    cfg = PrepConfig(inplane_size=64)
    composed = preprocess(v, cfg)
    stepwise = normalize(crop_or_pad(resample_isotropic(v, 1.0), 64), "condition", cfg)
    np.testing.assert_array_equal(composed.values, stepwise.values)
    assert composed.shape == (8, 64, 64)


def test_preprocess_pair_shapes_agree():
    pair = generate_phantom_pair(PhantomSpec(size=48, n_slices=2, spacing=(2.0, 1.0, 1.0)))
    out = preprocess_pair(pair, PrepConfig(inplane_size=32))
    assert out.m.shape == out.c.shape == (4, 32, 32)
    assert 0.0 <= out.m.values.min() and out.c.values.max() <= 1.0


# ---------------------------------------------------------------------- phantoms


def test_phantom_deterministic():
    a = generate_phantom_pair(PhantomSpec(seed=4))
    b = generate_phantom_pair(PhantomSpec(seed=4))
    assert a.m.values.tobytes() == b.m.values.tobytes()
    assert a.c.values.tobytes() == b.c.values.tobytes()
    c = generate_phantom_pair(PhantomSpec(seed=5))
    assert not np.array_equal(a.c.values, c.c.values)


def _labels(spec):
    return phantom_labels(spec, np.random.default_rng(spec.seed))


@pytest.mark.parametrize("seed", range(8))
def test_phantom_class_means_ordered(seed):
    spec = PhantomSpec(seed=seed)
    pair = generate_phantom_pair(spec)
    lab = _labels(spec)
    t = {k: pair.c.values[lab == v].mean() for k, v in LABELS.items()}
    cnd = {k: pair.m.values[lab == v].mean() for k, v in LABELS.items()}
    assert t["cortex"] > t["marrow"] > t["soft"] > t["background"]
    # bone is brightest in the target but not in the condition
    assert max(cnd, key=cnd.get) != "cortex"
    assert cnd["cortex"] < cnd["soft"]


@pytest.mark.parametrize("seed", range(4))
def test_phantom_pair_is_pixel_aligned(seed):
    spec = PhantomSpec(seed=seed)
    pair = generate_phantom_pair(spec)
    lab = _labels(spec)
    assert 2 <= len(np.unique(lab)) <= 4 and np.any(lab == LABELS["cortex"])
    # recover labels from the (low-noise) target and compare to the shared label image
    t = pair.c.values
    from_target = np.select([t < -500, t < 150, t < 700], [0, 1, 2], 3)
    np.testing.assert_array_equal(from_target, lab)
    # the condition is constant per label up to bias and noise: within-label spread is
    # far smaller than the gap between the soft-tissue and cortex levels
    m = pair.m.values
    gap = m[lab == 1].mean() - m[lab == 3].mean()
    assert m[lab == 1].std() < 0.25 * gap and m[lab == 3].std() < 0.25 * gap


def test_phantom_dataset_slices():
    pairs = phantom_dataset(3, PhantomSpec(size=32, n_slices=2))
    ds = slices_from_pairs(pairs)
    assert ds.m.shape == (6, 1, 32, 32)
    assert ds.subject_ids == ["subj000", "subj001", "subj002"]
    assert len(ds.subset(["subj001"])) == 2


def test_foreground_filter_drops_empty_slices():
    vals = np.zeros((3, 10, 10))
    vals[1, 2:8, 2:8] = 0.8
    vals[2, 0, 0] = 0.8  # 1% foreground
    assert foreground_slices(Volume(vals, modality="target")) == [1]


# ---------------------------------------------------------------------- file formats


def test_volume_round_trip(tmp_path):
    v = normalize(Volume(np.random.default_rng(0).normal(size=(2, 5, 7)).astype(np.float32), (1.5, 0.5, 0.25)))
    v = replace(v, values=v.values.astype(np.float32))
    write_volume(tmp_path / "a", v)
    back = read_volume(tmp_path / "a.vhdr")
    assert back.shape == v.shape and back.spacing == v.spacing
    assert back.values.tobytes() == v.values.tobytes()
    assert back.modality == "condition" and back.domain == "normalized"
    assert back.norm == v.norm


def test_truncated_payload_names_byte_counts(tmp_path):
    write_volume(tmp_path / "a", rand_volume((2, 4, 4)))
    raw = tmp_path / "a.vraw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(ByteCountError, match="expected 128 bytes, found 124"):
        read_volume(tmp_path / "a")


def _edit_header(path, key, value):
    lines = path.read_text().splitlines()
    lines = [f"{key} = {value}" if ln.startswith(key) else ln for ln in lines]
    path.write_text("\n".join(lines) + "\n")


def test_negative_spacing_rejected(tmp_path):
    write_volume(tmp_path / "a", rand_volume())
    _edit_header(tmp_path / "a.vhdr", "spacing", "1.0 -1.0 1.0")
    with pytest.raises(VolumeFormatError, match="spacing"):
        read_volume(tmp_path / "a")


def test_bad_magic_and_version(tmp_path):
    write_volume(tmp_path / "a", rand_volume())
    _edit_header(tmp_path / "a.vhdr", "version", "7")
    with pytest.raises(UnknownVersionError):
        read_volume(tmp_path / "a")
    _edit_header(tmp_path / "a.vhdr", "format", "nifti")
    with pytest.raises(BadMagicError):
        read_volume(tmp_path / "a")


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))


def test_pgm_round_trip_and_clamp(tmp_path):
    img = np.array([[-0.5, 0.0, 0.5], [1.0, 2.0, 0.25]])
    write_pgm(tmp_path / "x.pgm", img)
    back = read_pgm(tmp_path / "x.pgm")
    np.testing.assert_array_equal(back, [[0, 0, 128], [255, 255, 64]])


def test_paired_sample_holds_subject():
    pair = generate_phantom_pair(PhantomSpec(seed=1), subject="abc")
    assert isinstance(pair, PairedSample) and pair.subject == "abc"
