"""Gaussian-process interpolation of a fitted displacement field.

Given the fitted field ``v`` on the source cloud ``y``, the displacement at a
labeled query point ``q`` is the GP posterior mean ``G_int(q, y) G^-1 v``
under the same multi-organ prior used during fitting. The dual weights
``w = G^-1 v`` are solved once and cached.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, TextIO

import numpy as np
import scipy.linalg

from .core import DIM, LabeledCloud, SimilarityTransform
from .kernel import OrganModel, build_gram, cross_gram, validate_spd

OUTPUT_HEADER = ["x", "y", "z", "label", "dx", "dy", "dz", "x'", "y'", "z'"]
DEFAULT_CHUNK = 4096


class MalformedInputError(ValueError):
    pass


@dataclass(frozen=True)
class RegistrationModel:
    """Everything needed to evaluate a fitted deformation at new points."""

    source: LabeledCloud
    displacement: np.ndarray
    transform: SimilarityTransform
    organ_model: OrganModel

    def __post_init__(self):
        v = np.asarray(self.displacement, dtype=float)
        if v.shape != self.source.points.shape:
            raise ValueError("displacement must match the source cloud shape")
        object.__setattr__(self, "displacement", v)

    @classmethod
    def from_result(cls, result) -> "RegistrationModel":
        return cls(result.source, result.displacement, result.transform, result.config.organ_model)

    @cached_property
    def _gram(self):
        G, _ = validate_spd(build_gram(self.source, self.organ_model))
        return G

    @cached_property
    def weights(self) -> np.ndarray:
        """Dual weights ``G^-1 v``, one column per coordinate."""
        if not np.any(self.displacement):
            return np.zeros_like(self.displacement)
        G = self._gram.matrix
        cho = scipy.linalg.cho_factor(G, lower=True)
        w = scipy.linalg.cho_solve(cho, self.displacement)
        # one refinement step against the ill-conditioning of smooth kernels
        w += scipy.linalg.cho_solve(cho, self.displacement - G @ w)
        return w

    def to_dict(self) -> dict:
        return {
            "source": {
                "points": self.source.points.tolist(),
                "labels": self.source.labels.tolist(),
                "n_labels": self.source.n_labels,
            },
            "displacement": self.displacement.tolist(),
            "transform": self.transform.to_dict(),
            "lambda": self.organ_model.lam.tolist(),
            "bandwidth": self.organ_model.bandwidth.tolist(),
            "coupling": self.organ_model.coupling.tolist(),
            "label_transition": self.organ_model.label_transition.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationModel":
        try:
            src = d["source"]
            cloud = LabeledCloud(src["points"], src["labels"], src.get("n_labels", 0))
            L = len(d["lambda"])
            om = OrganModel(d["lambda"], d["bandwidth"], d["coupling"],
                            d.get("label_transition", np.eye(L)))
            return cls(cloud, np.asarray(d["displacement"], float),
                       SimilarityTransform.from_dict(d["transform"]), om)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"model bundle is missing or has a malformed field: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "RegistrationModel":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a valid model file ({exc})") from exc
        return cls.from_dict(d)


def _cross(model: RegistrationModel, points, labels) -> np.ndarray:
    src = model.source
    K = cross_gram(points, labels, src.points, src.labels, model.organ_model)
    nugget = model._gram.jitter
    if nugget > 0:
        # jitter added to make G factorizable acts as a nugget: it also applies
        # where a query coincides with a source point, keeping training points exact
        same = (points[:, None, :] == src.points[None]).all(-1) & (labels[:, None] == src.labels[None])
        K = K + nugget * same
    return K


def build_interp_kernel(model: RegistrationModel, q: LabeledCloud) -> np.ndarray:
    """Prior cross-covariance between query points and the source cloud."""
    return _cross(model, q.points, q.labels)


def _displace(model: RegistrationModel, points, labels) -> np.ndarray:
    K = _cross(model, np.asarray(points, float), np.asarray(labels))
    w = model.weights
    # row-wise reductions so results do not depend on how queries are chunked
    return np.stack([(K * w[:, d]).sum(axis=1) for d in range(DIM)], axis=1)


def interpolate(model: RegistrationModel, q: LabeledCloud,
                chunk: int = DEFAULT_CHUNK) -> tuple[np.ndarray, np.ndarray]:
    """Displacements at ``q`` and the deformed query points ``rho(q + v_q)``."""
    if q.labels.max() > model.organ_model.n_labels:
        raise ValueError("query labels exceed the organ model size")
    disp = np.empty((len(q), DIM))
    for start in range(0, len(q), chunk):
        sl = slice(start, start + chunk)
        disp[sl] = _displace(model, q.points[sl], q.labels[sl])
    return disp, model.transform.apply(q.points + disp)


def _read_query_rows(stream: TextIO, n_labels: int) -> Iterator[tuple[int, list[float], int]]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        return
    if [h.strip() for h in header] != ["x", "y", "z", "label"]:
        raise MalformedInputError(f"line 1: expected header x,y,z,label, got {','.join(header)}")
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise MalformedInputError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            xyz = [float(c) for c in row[:3]]
            lab = int(row[3])
        except ValueError:
            raise MalformedInputError(f"line {lineno}: could not parse {','.join(row)!r}") from None
        if not all(math.isfinite(c) for c in xyz):
            raise MalformedInputError(f"line {lineno}: non-finite coordinate")
        if not 1 <= lab <= n_labels:
            raise MalformedInputError(f"line {lineno}: label {lab} outside 1..{n_labels}")
        yield lineno, xyz, lab


def _fmt(a: float) -> str:
    return repr(float(a))


def warp_points_file(model: RegistrationModel, q_file, out, chunk: int = DEFAULT_CHUNK) -> int:
    """Stream a ``x,y,z,label`` CSV through the deformation.

    Writes ``x,y,z,label,dx,dy,dz,x',y',z'`` rows to ``out`` (path or text
    stream), holding at most ``chunk`` query rows in memory. Returns the
    number of rows written.
    """
    if chunk < 1:
        raise ValueError("chunk must be positive")
    L = model.organ_model.n_labels
    own_in = not hasattr(q_file, "read")
    own_out = not hasattr(out, "write")
    fin = open(q_file, newline="") if own_in else q_file
    fout = open(out, "w", newline="") if own_out else out
    try:
        writer = csv.writer(fout, lineterminator="\n")
        writer.writerow(OUTPUT_HEADER)
        count = 0
        buf_pts, buf_lab = [], []

        def flush():
            nonlocal count
            if not buf_pts:
                return
            pts = np.asarray(buf_pts)
            labs = np.asarray(buf_lab)
            disp = _displace(model, pts, labs)
            moved = model.transform.apply(pts + disp)
            for p, lab, dv, mv in zip(pts, labs, disp, moved):
                writer.writerow([*map(_fmt, p), int(lab), *map(_fmt, dv), *map(_fmt, mv)])
            count += len(pts)
            buf_pts.clear()
            buf_lab.clear()

        for _, xyz, lab in _read_query_rows(fin, L):
            buf_pts.append(xyz)
            buf_lab.append(lab)
            if len(buf_pts) >= chunk:
                flush()
        flush()
        return count
    finally:
        if own_in:
            fin.close()
        if own_out:
            fout.close()


def warp_points_text(model: RegistrationModel, text: str, chunk: int = DEFAULT_CHUNK) -> str:
    out = io.StringIO()
    warp_points_file(model, io.StringIO(text), out, chunk=chunk)
    return out.getvalue()
