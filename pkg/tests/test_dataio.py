import json
import struct

import numpy as np
import pytest

from radssl.cropper import admit_image, make_slice
from radssl.dataio import (Modality, PhantomSpec, Volume, generate_phantoms, load_volume, normalize_volume,
                           read_dataset, save_volume, window_normalize, write_dataset)
from radssl.errors import ChecksumError, HeaderError, TruncatedPayloadError, ValidationError


def _equal_volumes(a, b):
    assert np.array_equal(a.voxels, b.voxels)
    assert a.spacing == b.spacing and a.modality == b.modality
    assert set(a.labels) == set(b.labels)
    for k in a.labels:
        if isinstance(a.labels[k], np.ndarray):
            assert np.array_equal(a.labels[k], b.labels[k])
        else:
            assert a.labels[k] == b.labels[k]


def test_generation_is_deterministic():
    a = generate_phantoms(PhantomSpec(num_volumes=4, seed=7))
    b = generate_phantoms(PhantomSpec(num_volumes=4, seed=7))
    for x, y in zip(a, b):
        assert x.voxels.tobytes() == y.voxels.tobytes()
    c = generate_phantoms(PhantomSpec(num_volumes=4, seed=8))
    assert a[0].voxels.tobytes() != c[0].voxels.tobytes()


def test_volume_prefix_does_not_depend_on_count():
    a = generate_phantoms(PhantomSpec(num_volumes=2, seed=3))
    b = generate_phantoms(PhantomSpec(num_volumes=5, seed=3))
    assert a[1].voxels.tobytes() == b[1].voxels.tobytes()


def test_labels_present(small_phantoms):
    for v in small_phantoms:
        lab = v.labels
        assert 0 <= lab["organ_class"] < 4
        assert lab["lesion"] in (0, 1)
        assert lab["survival_time"] > 0 and lab["survival_event"] in (0, 1)
        assert np.isfinite(lab["age"])


def test_background_fraction_within_range():
    spec = PhantomSpec(num_volumes=20, seed=2, background_fraction_range=(0.4, 0.7))
    for v in generate_phantoms(spec):
        assert 0.35 <= v.labels["background_fraction"] <= 0.75


def test_measured_background_matches_label():
    from radssl.cropper import background_mask
    v = generate_phantoms(PhantomSpec(num_volumes=1, seed=9))[0]
    norm = normalize_volume(v)
    measured = np.mean([background_mask(s).mean() for s in norm])
    assert abs(measured - v.labels["background_fraction"]) <= 0.05


def test_heavy_background_slices_all_discarded():
    vols = generate_phantoms(PhantomSpec(num_volumes=10, seed=4, background_fraction_range=(0.9, 0.95)))
    for v in vols:
        norm = normalize_volume(v)
        mid = norm.shape[0] // 2
        assert not admit_image(make_slice(norm[mid]))


def test_noiseless_plateaus():
    for v in generate_phantoms(PhantomSpec(num_volumes=5, seed=1, organ_count=2, noise_sigma=0)):
        levels = np.unique(v.voxels)
        nonzero = levels[levels != 0]
        assert len(nonzero) == 2


@pytest.mark.parametrize("kw,field", [
    ({"organ_count": 1}, "organ_count"),
    ({"background_fraction_range": (0.6, 0.4)}, "background_fraction_range"),
    ({"grid": (4, 32, 32)}, "grid"),
])
def test_invalid_spec_names_field(kw, field):
    with pytest.raises(ValidationError) as e:
        generate_phantoms(PhantomSpec(**kw))
    assert e.value.field == field


def test_spec_from_dict_rejects_unknown_key():
    with pytest.raises(ValidationError) as e:
        PhantomSpec.from_dict({"num_volumes": 2, "colour": 1})
    assert e.value.field == "colour"


def test_window_normalize_ct_lower_bound():
    out = window_normalize(np.array([-200.0, 0.0, 200.0, 500.0]), "CT", window=(0, 400))
    assert out.tolist() == [0.0, 0.5, 1.0, 1.0]


def test_window_normalize_constant():
    assert np.all(window_normalize(np.full((4, 4), 3.0), "CT") == 0.5)
    assert np.all(window_normalize(np.full((4, 4), 3.0), "MR") == 0.5)


def test_window_normalize_mr_percentiles():
    raw = np.arange(1001, dtype=np.float64)
    out = window_normalize(raw, "MR")
    s = np.sort(raw)
    lo, hi = s[10], s[990]          # p1 / p99 of 0..1000 by linear interpolation
    assert np.isclose(np.percentile(raw, 1), lo) and np.isclose(np.percentile(raw, 99), hi)
    assert out.min() == 0.0 and out.max() == 1.0


def test_window_normalize_idempotent_and_monotone(rng):
    x = rng.uniform(0, 1, 200)
    assert np.array_equal(window_normalize(x, "CT", window=(0.5, 1.0)), x)
    y = np.sort(rng.uniform(-300, 300, 500))
    out = window_normalize(y, "CT", window=(0, 400))
    assert np.all(np.diff(out) >= 0) and out.min() >= 0 and out.max() <= 1


def test_round_trip(tmp_path, small_phantoms):
    for i, v in enumerate(small_phantoms[:3]):
        p = tmp_path / f"v{i}.rvol"
        save_volume(v, p)
        _equal_volumes(v, load_volume(p))


def test_round_trip_mr(tmp_path):
    v = Volume(np.arange(5 * 8 * 8, dtype=np.float32).reshape(5, 8, 8), (0.5, 0.5, 3.0), Modality.MR, {"x": 1.5})
    save_volume(v, tmp_path / "m.rvol")
    _equal_volumes(v, load_volume(tmp_path / "m.rvol"))


def _header_and_payload(path):
    blob = path.read_bytes()
    (n,) = struct.unpack("<I", blob[8:12])
    return blob, json.loads(blob[12:12 + n]), 12 + n


def test_truncated_payload(tmp_path):
    v = Volume(np.ones((10, 8, 8), np.float32))
    p = tmp_path / "t.rvol"
    save_volume(v, p)
    blob, header, start = _header_and_payload(p)
    p.write_bytes(blob[:start + 9 * 64 * 4])      # 9 of 10 slices
    with pytest.raises(TruncatedPayloadError):
        load_volume(p)


def test_checksum_mismatch(tmp_path):
    p = tmp_path / "c.rvol"
    save_volume(Volume(np.ones((5, 8, 8), np.float32)), p)
    blob = bytearray(p.read_bytes())
    blob[-10] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_volume(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "b.rvol"
    p.write_bytes(b"NOTAVOL1" + b"\0" * 20)
    with pytest.raises(HeaderError):
        load_volume(p)


def test_unknown_modality(tmp_path):
    p = tmp_path / "u.rvol"
    save_volume(Volume(np.ones((5, 8, 8), np.float32)), p)
    blob, header, start = _header_and_payload(p)
    header["modality"] = "PET"
    hb = json.dumps(header).encode()
    p.write_bytes(blob[:8] + struct.pack("<I", len(hb)) + hb + blob[start:])
    with pytest.raises(ValidationError):
        load_volume(p)


def test_volume_invariants():
    with pytest.raises(ValidationError):
        Volume(np.ones((4, 8, 8)))
    with pytest.raises(ValidationError):
        Volume(np.ones((5, 7, 8)))
    bad = np.ones((5, 8, 8))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        Volume(bad)


def test_dataset_index(tmp_path, small_phantoms):
    idx = write_dataset(small_phantoms[:3], tmp_path)
    assert json.loads(idx.read_text())["volumes"][2]["file"] == "vol_00002.rvol"
    back = read_dataset(tmp_path)
    assert len(back) == 3
    _equal_volumes(back[1], small_phantoms[1])
