"""Batch commands behind the CLI.

Each command reads its inputs, writes every output atomically into a fresh
location and returns a :class:`BatchReport`. A failure on one case is
recorded with a reason code and the batch carries on; the report lists
items in case-id order regardless of how work was scheduled.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..augmentation import instance_mix, mix_case_id, plan_mixes
from ..errors import (
    ContractError,
    DegenerateInputError,
    LiverStadError,
    NiftiFormatError,
    TrainingError,
    ValidationError,
)
from ..manifest import MODALITIES, MODALITY_GROUPS, DatasetManifest, ManifestEntry, load_manifest, write_manifest
from ..metrics import EvalReport, classification_scores, segmentation_scores
from ..nifti import atomic_write_bytes, read_mask, read_nifti, write_nifti
from ..registration import register, transfer_label
from ..stad.extract import FEATURE_NAMES, FeatureRow, extract_stad, feature_matrix, read_feature_csv, write_feature_csv
from ..staging import (
    StagingTask,
    binarize_stage,
    feature_importance,
    fit_forest,
    load_model,
    save_model,
    stratified_split,
)
from .cohort import ANNOTATED, load_cohort_spec, write_cohort
from .config import PipelineConfig

MODEL_FEATURES = FEATURE_NAMES + ("vendor_flag",)
PROVENANCE = ("annotation", "pseudo_label", "prediction")


@dataclass
class BatchReport:
    command: str
    processed: List[dict] = field(default_factory=list)
    skipped: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def skip(self, case_id: str, modality: Optional[str], code: str, message: str):
        self.skipped.append({"case_id": case_id, "modality": modality, "reason": code, "message": message})

    @property
    def exit_code(self) -> int:
        return 3 if self.skipped else 0

    def to_json(self) -> dict:
        key = lambda r: (r.get("case_id") or "", r.get("modality") or "")
        return {
            "command": self.command,
            "processed": sorted(self.processed, key=key),
            "skipped": sorted(self.skipped, key=key),
            "summary": self.summary,
        }

    def write(self, path: Path) -> None:
        _write_text(path, json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def fresh_dir(path, overwrite: bool) -> Path:
    """Create ``path``; an existing nonempty directory needs ``overwrite``."""
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise ValidationError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise ValidationError(f"{path} is not empty; pass --overwrite to reuse it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def fresh_file(path, overwrite: bool) -> Path:
    path = Path(path)
    if path.exists() and not overwrite:
        raise ValidationError(f"{path} exists; pass --overwrite to replace it")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def run_pool(fn: Callable, items: Sequence, jobs: int = 1) -> List:
    """``[fn(x) for x in items]``, in input order, over ``jobs`` processes."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _reason(exc: Exception) -> str:
    """Machine-readable reason code for a per-item failure."""
    codes = (
        (NiftiFormatError, "unreadable_image"),
        (FileNotFoundError, "missing_file"),
        (DegenerateInputError, "degenerate_input"),
        (ContractError, "contract_violation"),
        (ValidationError, "invalid_input"),
    )
    for cls, code in codes:
        if isinstance(exc, cls):
            return code
    return "failed"


def case_file(case_id: str, modality: str, suffix: str = ".nii.gz") -> str:
    return f"{case_id}_{modality}{suffix}"


# -- register ---------------------------------------------------------------

def _register_case(job) -> List[Tuple[str, str, Optional[str], Optional[dict], str]]:
    """Register GED4 onto every other modality of one case.

    Returns ``(case, modality, reason or None, info, message)`` per modality.
    """
    manifest, case, out, cfg = job
    ged4 = manifest.get(case, ANNOTATED)
    others = [e for e in manifest if e.case_id == case and e.modality != ANNOTATED]
    others.sort(key=lambda e: MODALITIES.index(e.modality))
    if ged4 is None:
        return [(case, None, "missing_ged4", None, "case has no GED4 volume")]
    if ged4.mask is None:
        return [(case, None, "missing_annotation", None, "GED4 volume has no mask")]
    try:
        moving = read_nifti(manifest.resolve(ged4.volume))
        moving_mask = read_mask(manifest.resolve(ged4.mask))
        if not moving.grid.compatible(moving_mask.grid):
            raise ContractError("GED4 mask grid differs from its volume")
    except (LiverStadError, OSError) as exc:
        return [(case, None, _reason(exc), None, str(exc))]
    results = []
    for e in others:
        try:
            fixed = read_nifti(manifest.resolve(e.volume))
            res = register(fixed, moving, cfg.registration)
            label = transfer_label(moving_mask, res.transform, fixed.grid)
            write_nifti(label, out / "pseudo_labels" / case_file(case, e.modality))
            _write_json(out / "transforms" / case_file(case, e.modality, ".json"), res.to_dict())
            _write_json(out / "logs" / case_file(case, e.modality, ".json"), res.log)
            info = {"case_id": case, "modality": e.modality, "mi": res.mi, "iterations": res.iterations,
                    "label_voxels": label.count}
            results.append((case, e.modality, None, info, ""))
        except (LiverStadError, OSError) as exc:
            results.append((case, e.modality, _reason(exc), None, str(exc)))
    return results


def cmd_register(manifest_path, out, cfg: PipelineConfig, jobs: int = 1, overwrite: bool = False) -> BatchReport:
    """Register each case's GED4 volume to its other modalities and transfer the mask.

    Writes ``transforms/``, ``pseudo_labels/`` and ``logs/`` under ``out``
    plus ``report.json``.
    """
    manifest = load_manifest(manifest_path)
    out = fresh_dir(out, overwrite)
    for sub in ("transforms", "pseudo_labels", "logs"):
        (out / sub).mkdir(exist_ok=True)
    report = BatchReport("register")
    jobs_list = [(manifest, case, out, cfg) for case in manifest.case_ids()]
    for results in run_pool(_register_case, jobs_list, jobs):
        for case, mod, code, info, msg in results:
            if code is None:
                report.processed.append(info)
            else:
                report.skip(case, mod, code, msg)
    report.summary = {"pseudo_labels": len(report.processed), "skipped": len(report.skipped)}
    report.write(out / "report.json")
    return report


# -- augment ----------------------------------------------------------------

def cmd_augment(manifest_path, out, cfg: PipelineConfig, overwrite: bool = False) -> BatchReport:
    """Vendor-wise instance mixing of the annotated GED4 cases.

    Writes ``volumes/``, ``masks/``, ``specs/`` (one mix record per output),
    ``manifest.json`` for the synthetic cases and ``report.json``.
    """
    manifest = load_manifest(manifest_path)
    annotated = [e for e in manifest if e.modality == ANNOTATED and e.mask is not None]
    annotated.sort(key=lambda e: e.case_id)
    plan = plan_mixes([(e.case_id, e.vendor) for e in annotated], cfg.augmentation.per_source, cfg.seed)
    out = fresh_dir(out, overwrite)
    for sub in ("volumes", "masks", "specs"):
        (out / sub).mkdir(exist_ok=True)
    by_id = {e.case_id: e for e in annotated}
    cache: Dict[str, tuple] = {}

    def load(case):
        if case not in cache:
            e = by_id[case]
            cache[case] = (read_nifti(manifest.resolve(e.volume)), read_mask(manifest.resolve(e.mask)))
        return cache[case]

    report = BatchReport("augment")
    entries = []
    for item in plan:
        new_id = mix_case_id(item.source, item.target)
        try:
            vol, mask, spec = instance_mix(load(item.source), load(item.target), item.source, item.target, cfg.seed)
        except (LiverStadError, OSError) as exc:
            report.skip(new_id, ANNOTATED, _reason(exc), str(exc))
            continue
        name = case_file(new_id, ANNOTATED)
        write_nifti(vol, out / "volumes" / name)
        write_nifti(mask, out / "masks" / name)
        _write_json(out / "specs" / case_file(new_id, ANNOTATED, ".json"), spec.to_json())
        entries.append(ManifestEntry(new_id, by_id[item.source].vendor, ANNOTATED,
                                     f"volumes/{name}", f"masks/{name}"))
        report.processed.append({"case_id": new_id, "modality": ANNOTATED, "scale": spec.scale})
    write_manifest(DatasetManifest(entries, out), out / "manifest.json")
    report.summary = {"synthetic_cases": len(entries), "skipped": len(report.skipped)}
    report.write(out / "report.json")
    return report


# -- extract ----------------------------------------------------------------

def resolve_mask(entry: ManifestEntry, manifest: DatasetManifest, pseudo_dir: Optional[Path],
                 pred_dir: Optional[Path]) -> Tuple[Optional[Path], Optional[str]]:
    """The mask a row uses, in precedence annotation > pseudo-label > prediction."""
    if entry.mask is not None:
        return manifest.resolve(entry.mask), "annotation"
    name = case_file(entry.case_id, entry.modality)
    for folder, kind in ((pseudo_dir, "pseudo_label"), (pred_dir, "prediction")):
        if folder is not None and (Path(folder) / name).is_file():
            return Path(folder) / name, kind
    return None, None


def _extract_row(job):
    entry, manifest, pseudo_dir, pred_dir, params = job
    path, kind = resolve_mask(entry, manifest, pseudo_dir, pred_dir)
    if path is None:
        return entry, None, None, "missing_mask", "no annotation, pseudo-label or prediction mask"
    try:
        vol = read_nifti(manifest.resolve(entry.volume))
        mask = read_mask(path)
        fv = extract_stad(vol, mask, entry.vendor, params)
    except (LiverStadError, OSError) as exc:
        return entry, None, kind, _reason(exc), str(exc)
    return entry, fv, kind, None, ""


def provenance_path(features_csv) -> Path:
    p = Path(features_csv)
    return p.with_name(p.name[: -len(".csv")] + ".provenance.csv" if p.name.endswith(".csv")
                       else p.name + ".provenance.csv")


def cmd_extract(manifest_path, out_csv, cfg: PipelineConfig, pseudo_dir=None, pred_dir=None,
                jobs: int = 1, overwrite: bool = False) -> BatchReport:
    """One feature row per ``(case, modality)`` that has a usable mask.

    ``out_csv`` gets the canonical 35-column table. Mask provenance goes to
    a sibling ``*.provenance.csv`` (case_id, modality, provenance) and the
    batch report to ``*.report.json``.
    """
    manifest = load_manifest(manifest_path)
    out_csv = fresh_file(out_csv, overwrite)
    prov_csv = fresh_file(provenance_path(out_csv), overwrite)
    report_path = fresh_file(out_csv.with_suffix(".report.json"), overwrite)
    entries = sorted(manifest, key=lambda e: (e.case_id, MODALITIES.index(e.modality)))
    jobs_list = [(e, manifest, pseudo_dir, pred_dir, cfg.stad) for e in entries]
    report = BatchReport("extract")
    rows, prov = [], []
    for entry, fv, kind, code, msg in run_pool(_extract_row, jobs_list, jobs):
        if code is not None:
            report.skip(entry.case_id, entry.modality, code, msg)
            continue
        rows.append(FeatureRow(entry.case_id, entry.modality, fv))
        prov.append((entry.case_id, entry.modality, kind))
        report.processed.append({"case_id": entry.case_id, "modality": entry.modality, "provenance": kind})
    _write_text(out_csv, write_feature_csv(rows))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("case_id", "modality", "provenance"))
    writer.writerows(prov)
    _write_text(prov_csv, buf.getvalue())
    report.summary = {"rows": len(rows), "skipped": len(report.skipped)}
    report.write(report_path)
    return report


# -- train ------------------------------------------------------------------

def _group_rows(rows: Sequence[FeatureRow], group: str) -> List[FeatureRow]:
    mods = MODALITY_GROUPS[group]
    return [r for r in rows if r.modality in mods]


def case_scores(model, rows: Sequence[FeatureRow]) -> Dict[str, Tuple[float, int]]:
    """Per case: mean row probability and the number of rows averaged."""
    if not rows:
        return {}
    probs = model.predict_proba(feature_matrix(rows))
    acc: Dict[str, List[float]] = {}
    for r, p in zip(rows, probs):
        acc.setdefault(r.case_id, []).append(float(p))
    return {c: (float(np.mean(v)), len(v)) for c, v in sorted(acc.items())}


def cmd_train(features_csv, manifest_path, out, cfg: PipelineConfig, tasks: Optional[Sequence[str]] = None,
              groups: Optional[Sequence[str]] = None, overwrite: bool = False) -> BatchReport:
    """Case-level 4:1 split, then one forest per (task, modality group).

    Stage labels come from the manifest. The split is stratified by stage
    and shared by every model. Writes ``split.json``,
    ``model_<task>_<group>.json`` and ``report.json`` under ``out``.
    """
    rows = read_feature_csv(Path(features_csv).read_text(encoding="utf-8"))
    manifest = load_manifest(manifest_path)
    tasks = list(tasks or cfg.tasks)
    groups = list(groups or cfg.groups)
    labelled = sorted({r.case_id for r in rows if manifest.stage_of(r.case_id) is not None})
    if not labelled:
        raise ValidationError("no feature row belongs to a case with a stage label")
    train_ids, val_ids = stratified_split(labelled, [manifest.stage_of(c) for c in labelled], seed=cfg.seed)
    out = fresh_dir(out, overwrite)
    _write_json(out / "split.json", {"train": train_ids, "validation": val_ids, "seed": cfg.seed})
    train_set, val_set = set(train_ids), set(val_ids)
    report = BatchReport("train")
    for task in tasks:
        task = StagingTask(task)
        for group in groups:
            g_rows = _group_rows(rows, group)
            tr = [r for r in g_rows if r.case_id in train_set]
            va = [r for r in g_rows if r.case_id in val_set]
            if not tr:
                report.skip(f"{task.value}/{group}", None, "empty_group", "no training rows in this group")
                continue
            y = [binarize_stage(manifest.stage_of(r.case_id), task) for r in tr]
            if len(set(y)) < 2:
                raise TrainingError(f"{task.value}/{group}: training split has a single class")
            model = fit_forest(feature_matrix(tr), y, cfg.forest, seed=cfg.seed, feature_names=MODEL_FEATURES)
            model.meta = {"task": task.value, "group": group, "modalities": list(MODALITY_GROUPS[group])}
            save_model(model, out / f"model_{task.value}_{group}.json")
            scores = case_scores(model, va)
            labels = [binarize_stage(manifest.stage_of(c), task) for c in scores]
            entry = {"case_id": f"{task.value}/{group}", "modality": None, "task": task.value, "group": group,
                     "train_rows": len(tr), "validation_cases": len(scores),
                     "oob_accuracy": model.oob_accuracy,
                     "importance": [{"feature": n, "mean": m, "std": s} for n, m, s in feature_importance(model)]}
            if scores:
                entry.update(classification_scores([s for s, _ in scores.values()], labels))
            report.processed.append(entry)
    report.summary = {"train_cases": len(train_ids), "validation_cases": len(val_ids),
                      "models": len(report.processed)}
    report.write(out / "report.json")
    return report


# -- predict ----------------------------------------------------------------

def cmd_predict(features_csv, model_path, out_csv, overwrite: bool = False) -> BatchReport:
    """Per-case probability: mean over the case's rows in the model's modality group."""
    model = load_model(model_path, expected_names=MODEL_FEATURES)
    rows = read_feature_csv(Path(features_csv).read_text(encoding="utf-8"))
    mods = model.meta.get("modalities")
    if mods is not None:
        rows = [r for r in rows if r.modality in mods]
    out_csv = fresh_file(out_csv, overwrite)
    scores = case_scores(model, rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("case_id", "score", "n_rows"))
    for case, (score, n) in scores.items():
        writer.writerow((case, f"{score:.9g}", n))
    _write_text(out_csv, buf.getvalue())
    report = BatchReport("predict")
    report.processed = [{"case_id": c, "modality": None, "score": s} for c, (s, _) in scores.items()]
    report.summary = {"cases": len(scores)}
    return report


def read_scores_csv(path) -> Dict[str, float]:
    reader = csv.DictReader(io.StringIO(Path(path).read_text(encoding="utf-8")))
    if reader.fieldnames is None or not {"case_id", "score"} <= set(reader.fieldnames):
        raise ValidationError(f"{path}: expected columns case_id and score")
    try:
        return {r["case_id"]: float(r["score"]) for r in reader}
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


# -- eval -------------------------------------------------------------------

def _split_name(name: str) -> Tuple[str, str]:
    stem = name[: -len(".nii.gz")] if name.endswith(".nii.gz") else name.rsplit(".", 1)[0]
    case, _, mod = stem.rpartition("_")
    return case, mod


def eval_segmentation(pred_dir, truth_dir) -> EvalReport:
    """Dice and Hausdorff for every mask file name present in both folders."""
    pred = {p.name for p in Path(pred_dir).glob("*.nii*")}
    truth = {p.name for p in Path(truth_dir).glob("*.nii*")}
    common = sorted(pred & truth)
    if not common:
        raise ValidationError("prediction and truth folders share no case files")
    report = EvalReport()
    per_mod: Dict[str, List[dict]] = {}
    for name in common:
        scores = segmentation_scores(read_mask(Path(pred_dir) / name), read_mask(Path(truth_dir) / name))
        case, mod = _split_name(name)
        report.segmentation[f"{case}_{mod}"] = scores
        per_mod.setdefault(mod, []).append(scores)
    for mod, items in sorted(per_mod.items()):
        agg = {"dice": float(np.mean([s["dice"] for s in items]))}
        for key in ("hausdorff_mm", "hd95_mm"):
            vals = [s[key] for s in items if key in s]
            if vals:
                agg[key] = float(np.mean(vals))
        report.groups[mod] = agg
    report.counts = {"cases": len(common), "pred_only": len(pred - truth), "truth_only": len(truth - pred)}
    return report


def eval_scores(scores_csv, manifest_path, task: str) -> EvalReport:
    scores = read_scores_csv(scores_csv)
    manifest = load_manifest(manifest_path)
    task = StagingTask(task)
    cases = sorted(c for c in scores if c in set(manifest.case_ids()) and manifest.stage_of(c) is not None)
    if not cases:
        raise ValidationError("scores and manifest share no labelled case ids")
    labels = [binarize_stage(manifest.stage_of(c), task) for c in cases]
    report = EvalReport()
    report.classification[task.value] = classification_scores([scores[c] for c in cases], labels)
    report.counts = {"cases": len(cases), "unlabelled": len(scores) - len(cases)}
    return report


def cmd_eval(out_json, overwrite: bool = False, pred_dir=None, truth_dir=None, scores_csv=None,
             manifest_path=None, task: Optional[str] = None) -> EvalReport:
    """Segmentation mode (``pred_dir`` and ``truth_dir``) or staging mode (scores, manifest, task)."""
    if pred_dir is not None and truth_dir is not None:
        report = eval_segmentation(pred_dir, truth_dir)
    elif scores_csv is not None and manifest_path is not None and task is not None:
        report = eval_scores(scores_csv, manifest_path, task)
    else:
        raise ValidationError("eval needs --pred-dir and --truth-dir, or --scores, --manifest and --task")
    if out_json is not None:
        _write_text(fresh_file(out_json, overwrite), report.dumps() + "\n")
    return report


# -- phantom ----------------------------------------------------------------

def cmd_phantom(spec_path, out, seed: Optional[int] = None, overwrite: bool = False) -> BatchReport:
    spec = load_cohort_spec(spec_path)
    if seed is not None:
        spec = dataclasses.replace(spec, seed=int(seed))
    out = fresh_dir(out, overwrite)
    manifest = write_cohort(spec, out)
    report = BatchReport("phantom")
    report.processed = [{"case_id": e.case_id, "modality": e.modality} for e in manifest]
    report.summary = {"cases": len(manifest.case_ids()), "volumes": len(manifest)}
    return report
