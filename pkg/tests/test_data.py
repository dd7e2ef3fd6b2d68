"""HU windowing, raster persistence, manifests, synthetic data, and folds."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amseg.data import (Manifest, SampleRecord, SyntheticSpec, WindowSpec,
                        generate_synthetic, kfold_split, load_hu_grid,
                        load_manifest, load_pair, save_hu_grid, save_manifest,
                        window_hu, write_synthetic_dataset)
from amseg.errors import ValidationError

from oracles import window_u8_int


# -- HU windowing ------------------------------------------------------------------


def test_window_edges():
    hu = np.array([-1024, -231, -230, -229, 30, 289, 290, 291, 3071])
    out = window_hu(hu)
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, [0, 0, 0, 0, 128, 255, 255, 255, 255])


def test_window_matches_integer_oracle_on_sample():
    hu = np.arange(-300, 320, 7)
    out = window_hu(hu)
    expected = [window_u8_int(int(v)) for v in hu]
    np.testing.assert_array_equal(out, expected)


def test_window_monotone_non_decreasing():
    sweep = np.arange(-1024, 3072)
    out = window_hu(sweep)
    assert np.all(np.diff(out.astype(np.int32)) >= 0)


def test_window_custom_spec():
    out = window_hu(np.array([0]), WindowSpec(level=0, width=2))
    np.testing.assert_array_equal(out, [128])  # midpoint rounds up


def test_window_spec_rejects_bad_width():
    with pytest.raises(ValidationError):
        WindowSpec(level=30, width=0)


@given(st.integers(-1024, 3071), st.integers(0, 4000))
@settings(max_examples=100, deadline=None)
def test_window_pointwise_property(a, delta):
    b = min(a + delta, 3071)
    out = window_hu(np.array([a, b]))
    assert out[0] == window_u8_int(a)
    assert out[1] == window_u8_int(b)
    assert out[0] <= out[1]


# -- raw HU persistence ---------------------------------------------------------------


def test_hu_grid_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    grid = rng.integers(-1024, 3072, size=(13, 9), dtype=np.int16)
    path = tmp_path / "grid.hu16"
    save_hu_grid(path, grid)
    np.testing.assert_array_equal(load_hu_grid(path), grid)


def test_hu_grid_truncation_detected(tmp_path):
    path = tmp_path / "grid.hu16"
    save_hu_grid(path, np.zeros((4, 4), dtype=np.int16))
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(ValidationError):
        load_hu_grid(path)


def test_hu_grid_bad_magic(tmp_path):
    path = tmp_path / "grid.hu16"
    save_hu_grid(path, np.zeros((2, 2), dtype=np.int16))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        load_hu_grid(path)


# -- manifests --------------------------------------------------------------------


def _manifest(tmp_path, rows):
    lines = ["medseg-manifest v1"]
    lines += [f"{p}\t{i}\t{m}" for p, i, m in rows]
    path = tmp_path / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_manifest_roundtrip(tmp_path):
    manifest = Manifest(records=(
        SampleRecord("p0", tmp_path / "a.png", tmp_path / "b.png"),
        SampleRecord("p1", Path_abs := tmp_path / "c.png", Path_abs),
    ))
    path = tmp_path / "manifest.tsv"
    save_manifest(path, manifest)
    text = path.read_text()
    assert "a.png" in text and str(tmp_path) not in text.split("\n")[1]
    loaded = load_manifest(path)
    assert loaded.records == manifest.records


def test_manifest_missing_header(tmp_path):
    path = tmp_path / "manifest.tsv"
    path.write_text("p0\ta.png\tb.png\n")
    with pytest.raises(ValidationError) as err:
        load_manifest(path)
    assert "header" in str(err.value)


def test_manifest_field_count_error_names_line(tmp_path):
    path = _manifest(tmp_path, [("p0", "a.png", "b.png")])
    path.write_text(path.read_text() + "p1\tonly-two-fields\n")
    with pytest.raises(ValidationError) as err:
        load_manifest(path)
    assert ":3:" in str(err.value)


def test_manifest_empty_rejected(tmp_path):
    path = tmp_path / "manifest.tsv"
    path.write_text("medseg-manifest v1\n")
    with pytest.raises(ValidationError):
        load_manifest(path)


def test_manifest_missing_file_is_oserror(tmp_path):
    with pytest.raises(OSError):
        load_manifest(tmp_path / "absent.tsv")


def test_manifest_patients_sorted_unique(tmp_path):
    path = _manifest(tmp_path, [("pZ", "a", "a"), ("pA", "b", "b"),
                                ("pZ", "c", "c")])
    assert load_manifest(path).patients() == ["pA", "pZ"]


# -- synthetic corpus -----------------------------------------------------------------


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(image_size=32, seed=7)
    a = generate_synthetic(spec, 8)
    b = generate_synthetic(spec, 8)
    for sa, sb in zip(a, b):
        assert sa.patient_id == sb.patient_id
        np.testing.assert_array_equal(sa.hu, sb.hu)
        np.testing.assert_array_equal(sa.image, sb.image)
        np.testing.assert_array_equal(sa.mask, sb.mask)


def test_synthetic_sample_contracts():
    samples = generate_synthetic(SyntheticSpec(image_size=32, seed=1), 6)
    for s in samples:
        assert s.hu.dtype == np.int16
        assert s.image.dtype == np.uint8
        assert s.mask.dtype == np.uint8
        assert set(np.unique(s.mask)) <= {0, 1}
        fraction = s.mask.mean()
        assert 0.0 < fraction < 0.5
        assert s.hu.min() >= -1024 and s.hu.max() <= 3071
        np.testing.assert_array_equal(s.image, window_hu(s.hu))


def test_synthetic_patients_pair_consecutive_samples():
    samples = generate_synthetic(SyntheticSpec(image_size=32, seed=2), 6)
    ids = [s.patient_id for s in samples]
    assert ids == ["p000", "p000", "p001", "p001", "p002", "p002"]


def test_write_synthetic_dataset_layout(tmp_path):
    manifest_path = write_synthetic_dataset(
        tmp_path, SyntheticSpec(image_size=32, seed=3), 4)
    manifest = load_manifest(manifest_path)
    assert len(manifest) == 4
    for r in manifest.records:
        assert r.image_path.exists()
        assert r.mask_path.exists()
    hu_files = sorted((tmp_path / "hu").glob("*.hu16"))
    assert len(hu_files) == 4
    grid = load_hu_grid(hu_files[0])
    assert grid.shape == (32, 32)


def test_load_pair_contracts(tmp_path):
    manifest = load_manifest(write_synthetic_dataset(
        tmp_path, SyntheticSpec(image_size=32, seed=4), 2))
    image, mask = load_pair(manifest.records[0])
    assert image.shape == (3, 32, 32) and image.dtype == np.float32
    assert mask.shape == (1, 32, 32) and mask.dtype == np.float32
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert set(np.unique(mask)) <= {0.0, 1.0}
    np.testing.assert_array_equal(image[0], image[1])  # replicated gray


def test_load_pair_resizes(tmp_path):
    manifest = load_manifest(write_synthetic_dataset(
        tmp_path, SyntheticSpec(image_size=48, seed=5), 2))
    image, mask = load_pair(manifest.records[0], size=32)
    assert image.shape == (3, 32, 32)
    assert mask.shape == (1, 32, 32)
    assert set(np.unique(mask)) <= {0.0, 1.0}  # nearest keeps the mask binary


def test_load_pair_roundtrips_mask_values(tmp_path):
    samples = generate_synthetic(SyntheticSpec(image_size=32, seed=6), 2)
    manifest_path = write_synthetic_dataset(tmp_path,
                                            SyntheticSpec(image_size=32, seed=6), 2)
    manifest = load_manifest(manifest_path)
    image, mask = load_pair(manifest.records[0])
    np.testing.assert_array_equal(mask[0], samples[0].mask.astype(np.float32))
    np.testing.assert_allclose(image[0], samples[0].image / 255.0, atol=1e-7)


def test_load_pair_size_mismatch_rejected(tmp_path):
    from PIL import Image
    img = tmp_path / "img.png"
    msk = tmp_path / "msk.png"
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(img)
    Image.fromarray(np.zeros((16, 8), dtype=np.uint8)).save(msk)
    with pytest.raises(ValidationError):
        load_pair(SampleRecord("p", img, msk))


# -- k-fold splitting --------------------------------------------------------------


def _grouped_manifest(patients, per_patient=2):
    records = []
    for p in patients:
        for i in range(per_patient):
            records.append(SampleRecord(p, Path(f"/x/{p}_{i}.png"),
                                        Path(f"/x/{p}_{i}_m.png")))
    return Manifest(records=tuple(records))


def test_kfold_patient_disjoint_and_exhaustive():
    manifest = _grouped_manifest([f"p{i:02d}" for i in range(8)])
    folds = kfold_split(manifest, 4, seed=0)
    assert len(folds) == 4
    all_val = []
    for train_idx, val_idx in folds:
        train_patients = {manifest.records[i].patient_id for i in train_idx}
        val_patients = {manifest.records[i].patient_id for i in val_idx}
        assert not train_patients & val_patients
        assert len(val_patients) == 2
        assert sorted(train_idx + val_idx) == list(range(len(manifest)))
        all_val.extend(val_idx)
    assert sorted(all_val) == list(range(len(manifest)))  # each sample once


def test_kfold_deterministic_in_seed():
    manifest = _grouped_manifest([f"p{i}" for i in range(6)])
    assert kfold_split(manifest, 3, seed=5) == kfold_split(manifest, 3, seed=5)
    assert kfold_split(manifest, 3, seed=5) != kfold_split(manifest, 3, seed=6)


def test_kfold_invariant_to_record_order():
    patients = [f"p{i}" for i in range(6)]
    manifest = _grouped_manifest(patients)
    shuffled_records = list(manifest.records)
    np.random.default_rng(9).shuffle(shuffled_records)
    shuffled = Manifest(records=tuple(shuffled_records))

    def patient_folds(m):
        return [sorted({m.records[i].patient_id for i in val})
                for _, val in kfold_split(m, 3, seed=4)]

    assert patient_folds(manifest) == patient_folds(shuffled)


def test_kfold_requires_enough_patients():
    manifest = _grouped_manifest(["p0", "p1"])
    with pytest.raises(ValidationError):
        kfold_split(manifest, 4)
    with pytest.raises(ValidationError):
        kfold_split(manifest, 1)


def test_kfold_uneven_patient_counts():
    manifest = _grouped_manifest([f"p{i}" for i in range(5)])
    folds = kfold_split(manifest, 3, seed=0)
    val_sizes = sorted(len({manifest.records[i].patient_id for i in val})
                       for _, val in folds)
    assert val_sizes == [1, 2, 2]
