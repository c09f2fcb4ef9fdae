import csv
import json
from pathlib import Path

import numpy as np
import pytest

from liverstad.manifest import DatasetManifest, ManifestEntry, load_manifest, write_manifest
from liverstad.metrics import dice
from liverstad.nifti import read_mask, read_nifti
from liverstad.pipeline.cli import main
from liverstad.pipeline.cohort import CohortSpec, plan_cohort, render_case
from liverstad.pipeline.commands import PROVENANCE, provenance_path
from liverstad.staging import ForestParams, RandomForestModel, Tree, save_model
from liverstad.stad.extract import CSV_HEADER, FEATURE_NAMES, extract_stad, read_feature_csv

SMALL = {"dims": [24, 24, 24], "spacing": [2.5, 2.5, 2.5]}


def write_spec(path, **kw):
    path.write_text(json.dumps(dict(SMALL, **kw)))
    return path


def tree_files(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def subset_manifest(src, dst, keep):
    m = load_manifest(src)
    entries = [e for e in m if keep(e)]
    # entries keep their paths, relative to the source folder
    write_manifest(DatasetManifest([ManifestEntry(e.case_id, e.vendor, e.modality,
                                                  str(m.resolve(e.volume)),
                                                  str(m.resolve(e.mask)) if e.mask else None, e.stage)
                                    for e in entries]), dst)
    return dst


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    spec = write_spec(root / "spec.json", n_cases=5, seed=3)
    assert main(["phantom", str(spec), str(root / "c")]) == 0
    return root / "c"


@pytest.fixture(scope="module")
def registered(cohort, tmp_path_factory):
    root = tmp_path_factory.mktemp("reg")
    man = subset_manifest(cohort / "manifest.json", root / "m.json", lambda e: e.case_id < "case003")
    assert main(["register", str(man), str(root / "r")]) == 0
    return man, root / "r"


def test_phantom_layout_and_determinism(cohort, tmp_path):
    files = tree_files(cohort)
    assert sum(k.startswith("volumes/") for k in files) == 15
    assert sum(k.startswith("masks/") for k in files) == 5
    assert sum(k.startswith("transforms/") for k in files) == 10
    m = load_manifest(cohort / "manifest.json", check_masks=True)
    assert len(m) == 15 and len(m.case_ids()) == 5
    spec = write_spec(tmp_path / "spec.json", n_cases=5, seed=3)
    assert main(["phantom", str(spec), str(tmp_path / "again")]) == 0
    assert tree_files(tmp_path / "again") == files


def test_register_outputs(registered):
    man, out = registered
    labels = sorted(p.name for p in (out / "pseudo_labels").iterdir())
    assert len(labels) == 6 and all(n.endswith(("_T2WI.nii.gz", "_GED2.nii.gz")) for n in labels)
    report = json.loads((out / "report.json").read_text())
    assert report["skipped"] == [] and len(report["processed"]) == 6
    m = load_manifest(man)
    fixed = read_nifti(m.resolve(m.get("case000", "T2WI").volume))
    assert read_mask(out / "pseudo_labels" / "case000_T2WI.nii.gz").grid.compatible(fixed.grid)
    log = json.loads((out / "logs" / "case000_T2WI.json").read_text())
    assert {"stage", "level", "iteration", "mi", "step", "accepted"} <= set(log[0])


def test_register_rerun_identical(registered, tmp_path):
    man, out = registered
    assert main(["register", str(man), str(tmp_path / "r2")]) == 0
    assert tree_files(tmp_path / "r2") == tree_files(out)


def test_register_pseudo_labels_overlap_truth(registered, cohort):
    _, out = registered
    scores = [dice(read_mask(p), read_mask(cohort / "truth" / p.name)) for p in (out / "pseudo_labels").iterdir()]
    assert min(scores) >= 0.85


def test_register_missing_annotation_exit_3(cohort, tmp_path):
    m = load_manifest(cohort / "manifest.json")
    entries = [ManifestEntry(e.case_id, e.vendor, e.modality, str(m.resolve(e.volume)),
                             None if e.case_id == "case001" else (str(m.resolve(e.mask)) if e.mask else None),
                             e.stage)
               for e in m if e.case_id in ("case000", "case001")]
    write_manifest(DatasetManifest(entries), tmp_path / "m.json")
    assert main(["register", str(tmp_path / "m.json"), str(tmp_path / "r")]) == 3
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert {s["reason"] for s in report["skipped"]} == {"missing_annotation"}
    assert {s["case_id"] for s in report["skipped"]} == {"case001"}
    assert len(report["processed"]) == 2


def test_overwrite_guard(registered, tmp_path):
    man, out = registered
    target = tmp_path / "r"
    target.mkdir()
    (target / "old.txt").write_text("x")
    assert main(["register", str(man), str(target)]) == 2
    assert main(["--overwrite", "register", str(man), str(target)]) == 0
    assert main(["register", "--overwrite", str(man), str(target)]) == 0


def test_augment_counts(tmp_path):
    spec = write_spec(tmp_path / "s.json", n_cases=4, vendors=["A", "B1"], modalities=["GED4"], seed=1)
    assert main(["phantom", str(spec), str(tmp_path / "c")]) == 0
    assert main(["augment", "--per-source", "1", str(tmp_path / "c" / "manifest.json"), str(tmp_path / "a")]) == 0
    out = load_manifest(tmp_path / "a" / "manifest.json", check_masks=True)
    assert len(out) == 4
    src = load_manifest(tmp_path / "c" / "manifest.json")
    for e in out:
        assert e.vendor in src.vendor_counts()
    specs = [json.loads(p.read_text()) for p in sorted((tmp_path / "a" / "specs").iterdir())]
    for s in specs:
        assert src.vendor_of(s["source"]) == src.vendor_of(s["target"]) and s["source"] != s["target"]
    # two same-vendor cases with per_source 2 cannot be planned
    assert main(["augment", "--per-source", "2", str(tmp_path / "c" / "manifest.json"), str(tmp_path / "b")]) == 2


def test_augment_thirty_cases(tmp_path):
    spec = {"n_cases": 30, "dims": [16, 16, 16], "spacing": [3.0, 3.0, 3.0], "modalities": ["GED4"],
            "semi_axes": [16.0, 12.0, 10.0], "seed": 2}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert main(["phantom", str(tmp_path / "s.json"), str(tmp_path / "c")]) == 0
    assert main(["augment", str(tmp_path / "c" / "manifest.json"), str(tmp_path / "a")]) == 0
    out = load_manifest(tmp_path / "a" / "manifest.json")
    assert len(out) == 150 and len(set(out.case_ids())) == 150


@pytest.fixture(scope="module")
def seven_modalities(tmp_path_factory):
    root = tmp_path_factory.mktemp("seven")
    spec = write_spec(root / "s.json", n_cases=2, seed=5,
                      modalities=["T1WI", "T2WI", "DWI", "GED1", "GED2", "GED3", "GED4"])
    assert main(["phantom", str(spec), str(root / "c")]) == 0
    return root / "c"


def test_extract_fourteen_rows(seven_modalities, tmp_path):
    c = seven_modalities
    out = tmp_path / "f.csv"
    assert main(["extract", str(c / "manifest.json"), str(out), "--predictions", str(c / "truth")]) == 0
    text = out.read_text()
    assert text.splitlines()[0].split(",") == list(CSV_HEADER)
    rows = read_feature_csv(text)
    assert len(rows) == 14 and all(len(line.split(",")) == 35 for line in text.splitlines())
    prov = list(csv.DictReader(provenance_path(out).open()))
    assert len(prov) == 14 and {p["provenance"] for p in prov} <= set(PROVENANCE)
    assert sum(p["provenance"] == "annotation" for p in prov) == 2
    assert all(np.all(np.isfinite(r.features.values)) for r in rows)


def test_extract_missing_mask_and_precedence(seven_modalities, tmp_path):
    c = seven_modalities
    pseudo = tmp_path / "pseudo"
    pseudo.mkdir()
    # a pseudo-label for one modality only; everything else falls back to truth
    name = "case000_T2WI.nii.gz"
    (pseudo / name).write_bytes((c / "truth" / name).read_bytes())
    out = tmp_path / "f.csv"
    assert main(["extract", str(c / "manifest.json"), str(out), "--pseudo-labels", str(pseudo),
                 "--predictions", str(c / "truth")]) == 0
    prov = {(p["case_id"], p["modality"]): p["provenance"] for p in csv.DictReader(provenance_path(out).open())}
    assert prov[("case000", "T2WI")] == "pseudo_label"
    assert prov[("case000", "T1WI")] == "prediction"
    assert prov[("case000", "GED4")] == "annotation"
    out2 = tmp_path / "g.csv"
    assert main(["extract", str(c / "manifest.json"), str(out2)]) == 3
    report = json.loads(out2.with_suffix(".report.json").read_text())
    assert {s["reason"] for s in report["skipped"]} == {"missing_mask"} and len(report["skipped"]) == 12


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    spec = write_spec(root / "s.json", n_cases=16, seed=4, modalities=["T2WI", "GED4"])
    assert main(["phantom", str(spec), str(root / "c")]) == 0
    c = root / "c"
    feats = root / "f.csv"
    assert main(["extract", str(c / "manifest.json"), str(feats), "--predictions", str(c / "truth")]) == 0
    assert main(["train", str(feats), str(c / "manifest.json"), str(root / "m")]) == 0
    return c, feats, root / "m"


def test_train_outputs(trained):
    c, _, out = trained
    split = json.loads((out / "split.json").read_text())
    assert not set(split["train"]) & set(split["validation"])
    assert sorted(split["train"] + split["validation"]) == load_manifest(c / "manifest.json").case_ids()
    report = json.loads((out / "report.json").read_text())
    assert len(report["processed"]) == 4
    for entry in report["processed"]:
        means = [i["mean"] for i in entry["importance"]]
        assert means == sorted(means, reverse=True) and len(means) == 33
        assert (out / f"model_{entry['task']}_{entry['group']}.json").is_file()


def test_train_rerun_identical(trained, tmp_path):
    c, feats, out = trained
    assert main(["train", str(feats), str(c / "manifest.json"), str(tmp_path / "m")]) == 0
    assert tree_files(tmp_path / "m") == tree_files(out)


def test_train_single_class_exit_2(trained, tmp_path):
    c, feats, _ = trained
    m = load_manifest(c / "manifest.json")
    write_manifest(DatasetManifest([ManifestEntry(e.case_id, e.vendor, e.modality, str(m.resolve(e.volume)),
                                                  None, "S1") for e in m]), tmp_path / "m.json")
    assert main(["train", "--task", "cirrhosis", str(feats), str(tmp_path / "m.json"), str(tmp_path / "o")]) == 2


def test_predict_and_eval(trained, tmp_path):
    c, feats, out = trained
    scores = tmp_path / "s.csv"
    assert main(["predict", str(feats), str(out / "model_cirrhosis_contrast.json"), str(scores)]) == 0
    rows = list(csv.DictReader(scores.open()))
    assert len(rows) == 16 and all(r["n_rows"] == "1" for r in rows)
    assert all(0.0 <= float(r["score"]) <= 1.0 for r in rows)
    report = tmp_path / "e.json"
    assert main(["eval", "--scores", str(scores), "--manifest", str(c / "manifest.json"),
                 "--task", "cirrhosis", "--out", str(report)]) == 0
    cls = json.loads(report.read_text())["classification"]["cirrhosis"]
    assert 0.0 <= cls["auc"] <= 1.0 and 0.0 <= cls["acc"] <= 1.0


def _stump_model(path):
    n = len(FEATURE_NAMES) + 1
    split = FEATURE_NAMES.index("mean")
    stump = Tree(np.array([split, -1, -1]), np.array([0.0, 0, 0]), np.array([1, -1, -1]),
                 np.array([2, -1, -1]), np.array([0.0, 0.2, 0.8]))
    names = FEATURE_NAMES + ("vendor_flag",)
    model = RandomForestModel([stump], n, ForestParams(n_trees=1), 0, names, np.zeros(n), np.zeros(n))
    model.meta = {"task": "cirrhosis", "group": "contrast", "modalities": ["GED2", "GED4"]}
    save_model(model, path)


def test_predict_averages_rows(tmp_path):
    rng = np.random.default_rng(0)
    from conftest import ball_mask
    from liverstad.stad.extract import FeatureRow, write_feature_csv
    from liverstad.volume import VoxelVolume
    m = ball_mask((16, 16, 16), (8, 8, 8), 5)
    mean_lo = extract_stad(VoxelVolume(rng.normal(-50, 5, m.dims)), m, "A")
    mean_hi = extract_stad(VoxelVolume(rng.normal(50, 5, m.dims)), m, "A")
    rows = [FeatureRow("p", "GED2", mean_lo), FeatureRow("p", "GED4", mean_hi),
            FeatureRow("q", "GED4", mean_hi), FeatureRow("q", "T2WI", mean_lo)]
    feats = tmp_path / "f.csv"
    feats.write_text(write_feature_csv(rows))
    _stump_model(tmp_path / "m.json")
    assert main(["predict", str(feats), str(tmp_path / "m.json"), str(tmp_path / "s.csv")]) == 0
    got = {r["case_id"]: (float(r["score"]), int(r["n_rows"])) for r in csv.DictReader((tmp_path / "s.csv").open())}
    # the stump splits on the mean: rows below 0 go left (0.2), above go right (0.8)
    assert got == {"p": (0.5, 2), "q": (0.8, 1)}


def test_predict_feature_name_mismatch(tmp_path, trained):
    _, feats, _ = trained
    _stump_model(tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    d["feature_names"] = list(reversed(d["feature_names"]))
    (tmp_path / "m.json").write_text(json.dumps(d))
    assert main(["predict", str(feats), str(tmp_path / "m.json"), str(tmp_path / "s.csv")]) == 2


def test_eval_segmentation(registered, cohort, tmp_path):
    _, out = registered
    report = tmp_path / "e.json"
    assert main(["eval", "--pred-dir", str(out / "pseudo_labels"), "--truth-dir", str(cohort / "truth"),
                 "--out", str(report)]) == 0
    d = json.loads(report.read_text())
    assert len(d["segmentation"]) == 6
    assert set(d["groups"]) == {"T2WI", "GED2"}
    for s in d["segmentation"].values():
        assert {"dice", "hausdorff_mm", "hd95_mm"} <= set(s)
    assert main(["eval", "--pred-dir", str(out / "pseudo_labels"), "--truth-dir", str(cohort / "truth"),
                 "--out", str(report)]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["eval", "--pred-dir", str(empty), "--truth-dir", str(cohort / "truth")]) == 2
    assert main(["eval", "--pred-dir", str(empty)]) == 2


def test_knob_moves_coherence():
    def coherence(knob):
        spec = CohortSpec(n_cases=6, modalities=("GED4",), knob_jitter=0.0, seed=11,
                          knob_by_stage={s: knob for s in ("S1", "S2", "S3", "S4")})
        vals = []
        for i, case in enumerate(plan_cohort(spec)):
            vol, mask = render_case(case, spec, "GED4", i)
            vals.append(extract_stad(vol, mask, case.vendor)["coherence_mean"])
        return np.array(vals)

    lo, hi = coherence(0.0), coherence(1.0)
    pooled = max(lo.std(ddof=1), hi.std(ddof=1))
    assert hi.mean() - lo.mean() >= 3 * pooled
