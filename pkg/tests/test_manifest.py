import json

import numpy as np
import pytest

from liverstad.errors import ValidationError
from liverstad.manifest import load_manifest, parse_manifest, write_manifest
from liverstad.nifti import write_nifti
from liverstad.volume import LabelMask, VoxelVolume


def _records(n_by_vendor):
    recs = []
    stages = ["S1", "S2", "S3", "S4"]
    i = 0
    for vendor, n in n_by_vendor.items():
        for _ in range(n):
            recs.append({"case_id": f"c{i}", "vendor": vendor, "modality": "GED4",
                         "volume": f"v{i}.nii.gz", "stage": stages[i % 4]})
            i += 1
    return recs


def test_table_totals():
    m = parse_manifest(_records({"A": 130, "B1": 170, "B2": 60}))
    assert len(m.case_ids()) == 360
    assert m.vendor_counts() == {"A": 130, "B1": 170, "B2": 60}


def test_unknown_stage():
    rec = _records({"A": 1})
    rec[0]["stage"] = "S5"
    with pytest.raises(ValidationError):
        parse_manifest(rec)


def test_empty_manifest(tmp_path):
    (tmp_path / "m.json").write_text("[]")
    m = load_manifest(tmp_path / "m.json")
    assert len(m) == 0 and m.case_ids() == []


def test_duplicate_pair():
    rec = _records({"A": 1}) * 2
    with pytest.raises(ValidationError):
        parse_manifest(rec)


@pytest.mark.parametrize("field,value", [("vendor", "C"), ("modality", "CT"), ("case_id", ""), ("mask", 3)])
def test_bad_fields(field, value):
    rec = _records({"A": 1})
    rec[0][field] = value
    with pytest.raises(ValidationError):
        parse_manifest(rec)


def test_unknown_key_and_non_array():
    rec = _records({"A": 1})
    rec[0]["extra"] = 1
    with pytest.raises(ValidationError):
        parse_manifest(rec)
    with pytest.raises(ValidationError):
        parse_manifest({"a": 1})


def test_conflicting_case_properties():
    a = {"case_id": "c", "vendor": "A", "modality": "GED4", "volume": "x", "stage": "S1"}
    b = dict(a, modality="T2WI", stage="S2")
    with pytest.raises(ValidationError):
        parse_manifest([a, b])
    c = dict(a, modality="T2WI", vendor="B1")
    with pytest.raises(ValidationError):
        parse_manifest([a, c])


def test_invalid_json(tmp_path):
    (tmp_path / "m.json").write_text("[{")
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "m.json")


def test_mask_grid_check(tmp_path):
    write_nifti(VoxelVolume(np.zeros((4, 4, 4))), tmp_path / "v.nii")
    write_nifti(LabelMask(np.zeros((4, 4, 5), np.uint8)), tmp_path / "m.nii")
    rec = [{"case_id": "c", "vendor": "A", "modality": "GED4", "volume": "v.nii", "mask": "m.nii"}]
    (tmp_path / "man.json").write_text(json.dumps(rec))
    load_manifest(tmp_path / "man.json")
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "man.json", check_masks=True)


def test_write_round_trip(tmp_path):
    m = parse_manifest(_records({"A": 3, "B2": 2}), tmp_path)
    write_manifest(m, tmp_path / "out.json")
    back = load_manifest(tmp_path / "out.json")
    assert back.to_json() == m.to_json()
    assert back.resolve("v0.nii.gz") == tmp_path / "v0.nii.gz"
