"""Dataset manifest: a JSON array describing cases, modalities and files."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

from .errors import ValidationError

VENDORS = ("A", "B1", "B2", "other")
MODALITIES = ("T1WI", "T2WI", "DWI", "GED1", "GED2", "GED3", "GED4")
STAGES = ("S1", "S2", "S3", "S4")
NON_CONTRAST = ("T1WI", "T2WI", "DWI")
CONTRAST = ("GED1", "GED2", "GED3", "GED4")
MODALITY_GROUPS = {"noncontrast": NON_CONTRAST, "contrast": CONTRAST}


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    vendor: str
    modality: str
    volume: str
    mask: Optional[str] = None
    stage: Optional[str] = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


class DatasetManifest:
    """Validated list of manifest entries, indexed by ``(case_id, modality)``."""

    def __init__(self, entries=(), root: Optional[Path] = None):
        self.entries: List[ManifestEntry] = list(entries)
        self.root = Path(root) if root is not None else None
        self._index = {}
        stages = {}
        vendors = {}
        for e in self.entries:
            key = (e.case_id, e.modality)
            if key in self._index:
                raise ValidationError(f"duplicate entry for case {e.case_id!r} modality {e.modality}")
            self._index[key] = e
            # stage and vendor are per-case properties
            if e.stage is not None:
                if stages.setdefault(e.case_id, e.stage) != e.stage:
                    raise ValidationError(f"case {e.case_id!r} has conflicting stages")
            if vendors.setdefault(e.case_id, e.vendor) != e.vendor:
                raise ValidationError(f"case {e.case_id!r} has conflicting vendors")
        self._stages = stages
        self._vendors = vendors

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, case_id: str, modality: str) -> Optional[ManifestEntry]:
        return self._index.get((case_id, modality))

    def case_ids(self) -> List[str]:
        return sorted({e.case_id for e in self.entries})

    def vendor_of(self, case_id: str) -> str:
        return self._vendors[case_id]

    def stage_of(self, case_id: str) -> Optional[str]:
        return self._stages.get(case_id)

    def vendor_counts(self) -> dict:
        return dict(Counter(self._vendors.values()))

    def stage_counts(self) -> dict:
        return dict(Counter(self._stages.values()))

    def resolve(self, rel: Optional[str]) -> Optional[Path]:
        if rel is None:
            return None
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def to_json(self) -> list:
        return [e.to_json() for e in self.entries]

    def check_masks(self) -> None:
        """Verify every mask file resolves to a grid matching its volume."""
        from .nifti import read_mask, read_nifti

        for e in self.entries:
            if e.mask is None:
                continue
            vol = read_nifti(self.resolve(e.volume))
            mask = read_mask(self.resolve(e.mask))
            if not vol.grid.compatible(mask.grid):
                raise ValidationError(f"mask grid of {e.case_id}/{e.modality} differs from its volume")


def _parse_entry(i: int, rec) -> ManifestEntry:
    if not isinstance(rec, dict):
        raise ValidationError(f"entry {i}: expected an object")
    unknown = set(rec) - {"case_id", "vendor", "modality", "volume", "mask", "stage"}
    if unknown:
        raise ValidationError(f"entry {i}: unknown keys {sorted(unknown)}")
    for key in ("case_id", "vendor", "modality", "volume"):
        if not isinstance(rec.get(key), str) or not rec[key]:
            raise ValidationError(f"entry {i}: missing or empty {key!r}")
    if rec["vendor"] not in VENDORS:
        raise ValidationError(f"entry {i}: unknown vendor {rec['vendor']!r}")
    if rec["modality"] not in MODALITIES:
        raise ValidationError(f"entry {i}: unknown modality {rec['modality']!r}")
    stage = rec.get("stage")
    if stage is not None and stage not in STAGES:
        raise ValidationError(f"entry {i}: unknown stage {stage!r}")
    mask = rec.get("mask")
    if mask is not None and not isinstance(mask, str):
        raise ValidationError(f"entry {i}: mask must be a path string")
    return ManifestEntry(rec["case_id"], rec["vendor"], rec["modality"], rec["volume"], mask, stage)


def parse_manifest(records, root=None) -> DatasetManifest:
    if not isinstance(records, list):
        raise ValidationError("manifest must be a JSON array")
    return DatasetManifest([_parse_entry(i, r) for i, r in enumerate(records)], root)


def load_manifest(path, check_masks: bool = False) -> DatasetManifest:
    """Load and validate a manifest file; relative paths resolve against its folder."""
    path = Path(path)
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    manifest = parse_manifest(records, path.parent)
    if check_masks:
        manifest.check_masks()
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    from .nifti import atomic_write_bytes

    text = json.dumps(manifest.to_json(), indent=2) + "\n"
    atomic_write_bytes(Path(path), text.encode("utf-8"))
