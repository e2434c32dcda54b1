from pathlib import Path

import nibabel as nib
import numpy as np
import pytest

from app.data.model import BoxSet, SegMask
from app.data.store import (
    BOXES_FILE,
    MASK_FILE,
    META_FILE,
    VOLUME_FILE,
    case_dir,
    import_nifti,
    list_cases,
    load_json,
    read_case,
    read_prediction,
    read_provenance,
    read_soft_label,
    save_json,
    write_case,
    write_prediction,
    write_soft_label,
)
from app.phantom.generator import gen_phantom
from app.utils.seed import sample_rng


@pytest.fixture
def phantom(phantom_cfg):
    return gen_phantom(phantom_cfg, sample_rng(0, 0), "p0")


def test_case_layout(tmp_path: Path, phantom):
    volume, mask = phantom
    d = write_case(tmp_path, volume, mask)
    for name in (VOLUME_FILE, MASK_FILE, BOXES_FILE, META_FILE):
        assert (d / name).exists()
    assert (d / VOLUME_FILE).stat().st_size == 2 * volume.voxels.size
    meta = load_json(d / META_FILE)
    assert meta["shape"] == list(volume.shape) and meta["has_mask"]
    assert meta["normalization"]["hu_min"] == -200

    rec = read_case(tmp_path, "p0")
    np.testing.assert_array_equal(rec.volume.voxels, volume.voxels)
    np.testing.assert_array_equal(rec.mask.labels, mask.labels)
    assert rec.boxes == BoxSet.from_mask(mask)
    assert rec.volume.spacing_mm == volume.spacing_mm


def test_weak_case_without_mask(tmp_path: Path, phantom, mixseg_logs):
    volume, mask = phantom
    write_case(tmp_path, volume, boxes=BoxSet.from_mask(mask))
    rec = read_case(tmp_path, "p0")
    assert rec.mask is None and len(rec.boxes) > 0
    assert read_case(tmp_path, "p0", with_mask=False).mask is None

    # meta claims a mask that is gone
    write_case(tmp_path, volume, mask)
    (tmp_path / "p0" / MASK_FILE).unlink()
    assert read_case(tmp_path, "p0").mask is None
    assert "has_mask" in mixseg_logs.text


def test_truncated_raw_file_is_rejected(tmp_path: Path, phantom):
    volume, mask = phantom
    d = write_case(tmp_path, volume, mask)
    raw = (d / VOLUME_FILE).read_bytes()
    (d / VOLUME_FILE).write_bytes(raw[:-2])
    with pytest.raises(ValueError, match="expected"):
        read_case(tmp_path, "p0")


@pytest.mark.parametrize("case_id", ["", "../up", "a/b", "c:d", ".hidden", "café"])
def test_case_ids_must_be_plain_names(tmp_path: Path, case_id: str):
    with pytest.raises(ValueError):
        case_dir(tmp_path, case_id)


def test_list_cases_only_counts_complete_cases(tmp_path: Path, phantom):
    volume, mask = phantom
    write_case(tmp_path, volume, mask)
    (tmp_path / "stray").mkdir()
    assert list_cases(tmp_path) == ["p0"]
    assert list_cases(tmp_path / "missing") == []


def test_save_json_is_atomic(tmp_path: Path):
    path = tmp_path / "nested" / "x.json"
    save_json(path, {"a": [1, 2]})
    assert load_json(path) == {"a": [1, 2]}
    assert not list(path.parent.glob("*.tmp"))
    assert load_json(tmp_path / "none.json", default={}) == {}
    with pytest.raises(FileNotFoundError):
        load_json(tmp_path / "none.json")


def test_soft_label_files(tmp_path: Path):
    soft = np.full((3, 4, 16, 16), 1 / 3, dtype=np.float32)
    d = write_soft_label(tmp_path / "pseudo" / "c", soft, {"config_hash": "abc"})
    np.testing.assert_array_equal(read_soft_label(d), soft)
    prov = read_provenance(d)
    assert prov["config_hash"] == "abc" and prov["shape"] == [3, 4, 16, 16]
    with pytest.raises(ValueError):
        write_soft_label(tmp_path / "bad", soft[:2], {})


def test_prediction_files(tmp_path: Path, phantom):
    _, mask = phantom
    d = write_prediction(tmp_path / "preds" / "p0", mask)
    np.testing.assert_array_equal(read_prediction(d, "p0").labels, mask.labels)


def test_import_nifti_reorders_axes(tmp_path: Path):
    rng = np.random.default_rng(0)
    data = rng.uniform(-500, 500, size=(20, 16, 4))           # (x, y, z)
    labels = np.zeros((20, 16, 4), dtype=np.uint8)
    labels[5:10, 4:8, 1:3] = 1
    affine = np.diag([0.7, 0.8, 2.5, 1.0])
    nib.save(nib.Nifti1Image(data, affine), str(tmp_path / "vol.nii.gz"))
    nib.save(nib.Nifti1Image(labels, affine), str(tmp_path / "lab.nii.gz"))

    d = import_nifti(tmp_path / "vol.nii.gz", tmp_path / "cases", "n0", tmp_path / "lab.nii.gz")
    rec = read_case(tmp_path / "cases", "n0")
    assert d.name == "n0"
    assert rec.volume.shape == (4, 16, 20)
    np.testing.assert_array_equal(rec.volume.voxels, np.rint(data).astype(np.int16).transpose(2, 1, 0))
    np.testing.assert_array_equal(rec.mask.labels, labels.transpose(2, 1, 0))
    assert rec.volume.spacing_mm == pytest.approx((2.5, 0.8, 0.7))
    assert len(rec.boxes) == 2


def test_import_nifti_rejects_bad_labels(tmp_path: Path):
    data = np.zeros((16, 16, 4))
    labels = np.full((16, 16, 4), 3, dtype=np.uint8)
    nib.save(nib.Nifti1Image(data, np.eye(4)), str(tmp_path / "vol.nii.gz"))
    nib.save(nib.Nifti1Image(labels, np.eye(4)), str(tmp_path / "lab.nii.gz"))
    with pytest.raises(ValueError, match="label values"):
        import_nifti(tmp_path / "vol.nii.gz", tmp_path / "cases", "n1", tmp_path / "lab.nii.gz")


def test_segmask_pairing_on_write(tmp_path: Path, phantom):
    volume, _ = phantom
    bad = SegMask(np.zeros((3, 16, 16), dtype=np.uint8), "p0")
    with pytest.raises(ValueError):
        write_case(tmp_path, volume, bad)
