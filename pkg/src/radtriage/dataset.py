"""MURA-layout study discovery, patient-disjoint splitting and a synthetic corpus generator.

On-disk layout::

    <root>/XR_<ANATOMY>/patient<id>/study<k>_<positive|negative>/image<j>.png

A root holding ``train/`` and ``valid/`` subtrees in that layout is treated as
carrying official splits.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.special import expit

from .autodiff import RngStream
from .errors import InputError, LabelError, PartitionError

logger = logging.getLogger(__name__)

ANATOMIES = ("elbow", "finger", "forearm", "hand", "humerus", "shoulder", "wrist")
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("patient_id", "anatomy", "study_id", "label", "view_count")

_STUDY_RE = re.compile(r"^(study\d+)_(positive|negative)$")
_IMAGE_SUFFIXES = {".png"}


@dataclass(frozen=True)
class StudyRecord:
    patient_id: str
    anatomy: str
    study_id: str
    label: int
    view_paths: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.anatomy not in ANATOMIES:
            raise InputError(f"unknown anatomy {self.anatomy!r}")
        if self.label not in (0, 1):
            raise LabelError(f"study label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "view_paths", tuple(str(p) for p in self.view_paths))

    @property
    def key(self) -> tuple[str, str, str]:
        return self.patient_id, self.anatomy, self.study_id


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if len(fr) != 3 or not all(0 < f < 1 for f in fr):
            raise PartitionError(f"split fractions must be three values in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise PartitionError(f"split fractions must sum to 1, got {sum(fr)}")


def _sort_key(r: StudyRecord):
    return ANATOMIES.index(r.anatomy), r.patient_id, r.study_id


def scan_layout(root: str | Path, warnings: list[str] | None = None) -> list[StudyRecord]:
    """One record per non-empty study directory under ``root``.

    Skipped directories are logged; pass a list as ``warnings`` to collect the
    messages as well.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a readable directory")

    def warn(msg: str) -> None:
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)

    records = []
    for anat_dir in sorted(p for p in root.iterdir() if p.is_dir() and p.name.upper().startswith("XR_")):
        anatomy = anat_dir.name[3:].lower()
        if anatomy not in ANATOMIES:
            warn(f"skipping unknown anatomy directory {anat_dir}")
            continue
        for patient_dir in sorted(p for p in anat_dir.iterdir() if p.is_dir()):
            for study_dir in sorted(p for p in patient_dir.iterdir() if p.is_dir()):
                m = _STUDY_RE.match(study_dir.name)
                if not m:
                    warn(f"skipping unparsable study directory {study_dir}")
                    continue
                views = sorted(
                    str(p) for p in study_dir.iterdir()
                    if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES
                )
                if not views:
                    warn(f"skipping empty study directory {study_dir}")
                    continue
                records.append(StudyRecord(
                    patient_id=patient_dir.name,
                    anatomy=anatomy,
                    study_id=m.group(1),
                    label=1 if m.group(2) == "positive" else 0,
                    view_paths=tuple(views),
                ))
    records.sort(key=_sort_key)
    return records


def has_official_splits(root: str | Path) -> bool:
    root = Path(root)
    return all(
        (root / sub).is_dir() and any(p.name.upper().startswith("XR_") for p in (root / sub).iterdir())
        for sub in ("train", "valid")
    )


def _assign_patients(patients: Sequence[str], fractions: Sequence[float], seed: int) -> list[set[str]]:
    k = len(fractions)
    if len(patients) < k:
        raise PartitionError(f"{len(patients)} patients cannot fill {k} splits")
    order = [patients[i] for i in RngStream(seed).permutation(len(patients))]
    n = len(order)
    counts = [max(1, round(f * n)) for f in fractions[:-1]]
    # the last split absorbs rounding; steal from the largest if it would be empty
    while n - sum(counts) < 1:
        counts[int(np.argmax(counts))] -= 1
    counts.append(n - sum(counts))
    groups, start = [], 0
    for c in counts:
        groups.append(set(order[start:start + c]))
        start += c
    return groups


def patient_disjoint_split(records: Sequence[StudyRecord], spec: SplitSpec):
    """Shuffle patients with ``spec.seed`` and deal them into (train, val, test).

    Assignment happens per patient, so no patient or study straddles two splits.
    """
    patients = sorted({r.patient_id for r in records})
    groups = _assign_patients(patients, spec.fractions, spec.seed)
    return tuple([r for r in records if r.patient_id in g] for g in groups)


def load_splits(root: str | Path, spec: SplitSpec):
    """(train, val, test) records for ``root``.

    With official ``train/`` and ``valid/`` subtrees, ``valid`` becomes the
    test split and validation patients are carved out of ``train`` in
    proportion to ``spec``'s train:val ratio.
    """
    root = Path(root)
    if has_official_splits(root):
        pool = scan_layout(root / "train")
        test = scan_layout(root / "valid")
        f_train, f_val, _ = spec.fractions
        share = f_val / (f_train + f_val)
        patients = sorted({r.patient_id for r in pool})
        train_ids, val_ids = _assign_patients(patients, (1 - share, share), spec.seed)
        return (
            [r for r in pool if r.patient_id in train_ids],
            [r for r in pool if r.patient_id in val_ids],
            test,
        )
    return patient_disjoint_split(scan_layout(root), spec)


def group_views(records: Iterable[StudyRecord]) -> dict[tuple[str, str, str], list[str]]:
    """Views keyed by (patient, anatomy, study) in sorted key order."""
    groups: dict[tuple[str, str, str], list[str]] = {}
    for r in records:
        groups.setdefault(r.key, []).extend(r.view_paths)
    return {k: groups[k] for k in sorted(groups)}


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["label"] = int(row["label"])
        row["view_count"] = int(row["view_count"])
    return rows


# ---------------------------------------------------------------- synthetic corpus


def _smooth_ellipse(yy, xx, cy, cx, a, b, angle, softness):
    ca, sa = math.cos(angle), math.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return expit((1.0 - r) / softness)


def synth_image(size: int, study: dict, view_rng: RngStream) -> np.ndarray:
    """One synthetic radiograph in [0, 1] for a study's shared geometry."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    base, grad_amp, grad_dir = view_rng.uniform((3,))
    grad_dir *= 2 * math.pi
    ramp = ((xx * math.cos(grad_dir) + yy * math.sin(grad_dir)) / size) % 1.0
    img = 0.35 + 0.02 * base + 0.02 * grad_amp * ramp

    jitter = view_rng.uniform((3,), low=-1.0, high=1.0)
    angle = study["angle"] + math.radians(15.0) * jitter[0]
    cy = study["cy"] + 0.03 * size * jitter[1]
    cx = study["cx"] + 0.03 * size * jitter[2]
    a, b = study["a"], study["b"]
    img = img + study["bone_level"] * _smooth_ellipse(yy, xx, cy, cx, a, b, angle, 0.08)

    if study["label"]:
        t = study["lesion_pos"] * a
        ly = cy + t * math.sin(angle)
        lx = cx + t * math.cos(angle)
        r = study["lesion_radius"]
        img = img + 0.35 * _smooth_ellipse(yy, xx, ly, lx, r, r, 0.0, 0.15)

    img = img + view_rng.normal((size, size), std=0.03)
    return np.clip(img, 0.0, 1.0)


def synth_generate(
    n_patients: int,
    studies_per_patient: int,
    views_per_study: int,
    image_size: int,
    abnormal_fraction: float,
    seed: int,
    out_dir: str | Path,
    cycle_anatomies: bool = False,
    anatomy: str = "wrist",
) -> list[StudyRecord]:
    """Write a MURA-layout PNG tree plus ``manifest.csv``; returns the written records.

    Every image holds a smooth background ramp, mild noise and a bright
    elongated bone. Abnormal studies add a round high-contrast lesion on the
    bone in every view.
    """
    if min(n_patients, studies_per_patient, views_per_study, image_size) < 1:
        raise InputError("synthetic corpus dimensions must be positive")
    if not 0 <= abnormal_fraction <= 1:
        raise InputError(f"abnormal_fraction must be in [0, 1], got {abnormal_fraction}")
    if anatomy not in ANATOMIES:
        raise InputError(f"unknown anatomy {anatomy!r}")
    out_dir = Path(out_dir)
    rng = RngStream(seed)
    total = n_patients * studies_per_patient
    n_abnormal = int(round(abnormal_fraction * total))
    labels = np.zeros(total, dtype=int)
    labels[rng.permutation(total)[:n_abnormal]] = 1

    records = []
    for p in range(n_patients):
        patient_id = f"patient{p + 1:05d}"
        anat = ANATOMIES[p % len(ANATOMIES)] if cycle_anatomies else anatomy
        for s in range(studies_per_patient):
            label = int(labels[p * studies_per_patient + s])
            srng = rng.substream(p, s)
            g = srng.uniform((8,))
            study = {
                "label": label,
                "angle": math.pi * g[0],
                "cy": image_size * (0.45 + 0.1 * g[1]),
                "cx": image_size * (0.45 + 0.1 * g[2]),
                "a": image_size * (0.34 + 0.04 * g[3]),
                "b": image_size * (0.08 + 0.01 * g[4]),
                "bone_level": 0.2 + 0.05 * g[5],
                "lesion_pos": -0.5 + g[6],
                "lesion_radius": image_size * (0.06 + 0.04 * g[7]),
            }
            study_id = f"study{s + 1}"
            study_dir = out_dir / f"XR_{anat.upper()}" / patient_id / (
                f"{study_id}_{'positive' if label else 'negative'}"
            )
            study_dir.mkdir(parents=True, exist_ok=True)
            paths = []
            for v in range(views_per_study):
                pixels = synth_image(image_size, study, srng.substream(v))
                path = study_dir / f"image{v + 1}.png"
                Image.fromarray(np.round(pixels * 255).astype(np.uint8), mode="L").save(path)
                paths.append(str(path))
            records.append(StudyRecord(patient_id, anat, study_id, label, tuple(paths)))

    records.sort(key=_sort_key)
    with open(out_dir / MANIFEST_NAME, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.patient_id, r.anatomy, r.study_id, r.label, len(r.view_paths)])
    return records
