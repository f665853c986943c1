"""CSV and JSON readers/writers for clouds, landmarks and transforms."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .core import LabeledCloud, Landmarks, SimilarityTransform

CLOUD_HEADER = ["x", "y", "z", "label"]
LANDMARK_HEADER = ["name", "x", "y", "z"]
LANDMARK_LABELED_HEADER = ["name", "x", "y", "z", "label"]


class InputFormatError(ValueError):
    pass


def _rows(path, expected: list[list[str]]):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise InputFormatError(f"{path}: empty file, expected header {','.join(expected[0])}")
        header = [h.strip() for h in header]
        if header not in expected:
            raise InputFormatError(f"{path}:1: unexpected header {','.join(header)}")
        for row in reader:
            if row and any(c.strip() for c in row):
                yield reader.line_num, header, row


def _floats(path, lineno, cells):
    try:
        vals = [float(c) for c in cells]
    except ValueError:
        raise InputFormatError(f"{path}:{lineno}: non-numeric coordinate in {cells}") from None
    if not all(math.isfinite(v) for v in vals):
        raise InputFormatError(f"{path}:{lineno}: non-finite coordinate")
    return vals


def read_cloud(path, n_labels: int = 0) -> LabeledCloud:
    pts, labs = [], []
    for lineno, _, row in _rows(path, [CLOUD_HEADER]):
        if len(row) != 4:
            raise InputFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        pts.append(_floats(path, lineno, row[:3]))
        try:
            lab = int(row[3])
        except ValueError:
            raise InputFormatError(f"{path}:{lineno}: label {row[3]!r} is not an integer") from None
        if lab < 1:
            raise InputFormatError(f"{path}:{lineno}: labels must be positive integers")
        labs.append(lab)
    if not pts:
        raise InputFormatError(f"{path}: no points")
    return LabeledCloud(np.array(pts), np.array(labs), n_labels)


def write_cloud(path, cloud: LabeledCloud) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CLOUD_HEADER)
        for p, lab in zip(cloud.points, cloud.labels):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(lab)])


def read_landmarks(path) -> Landmarks:
    names, pts, labs = [], [], []
    for lineno, header, row in _rows(path, [LANDMARK_HEADER, LANDMARK_LABELED_HEADER]):
        if len(row) != len(header):
            raise InputFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        names.append(row[0].strip())
        pts.append(_floats(path, lineno, row[1:4]))
        if len(header) == 5:
            labs.append(int(row[4]))
    if len(set(names)) != len(names):
        raise InputFormatError(f"{path}: duplicate landmark names")
    return Landmarks(tuple(names), np.array(pts).reshape(-1, 3), np.array(labs) if labs else None)


def write_landmarks(path, lm: Landmarks) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LANDMARK_HEADER if lm.labels is None else LANDMARK_LABELED_HEADER)
        for i, name in enumerate(lm.names):
            row = [name, *(repr(float(c)) for c in lm.points[i])]
            if lm.labels is not None:
                row.append(int(lm.labels[i]))
            w.writerow(row)


def write_transform(path, T: SimilarityTransform) -> None:
    Path(path).write_text(json.dumps(T.to_dict(), indent=2))


def read_transform(path) -> SimilarityTransform:
    return SimilarityTransform.from_dict(json.loads(Path(path).read_text()))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
