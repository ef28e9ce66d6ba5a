"""In-memory datasets tying the synthetic cohort to the ROI pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import roi as roi_mod
from .synth import render_knee_image

CLINICAL_FEATURES = ("age", "sex", "bmi", "womac", "kl")


@dataclass
class RoiDataset:
    knee_ids: list
    subject_ids: list
    images: np.ndarray  # N x 1 x R x R float32, R = resize_to
    labels: np.ndarray
    lesion_boxes: list = field(default_factory=list)  # per knee, corners at resize_to scale

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return RoiDataset(
            [self.knee_ids[i] for i in idx],
            [self.subject_ids[i] for i in idx],
            self.images[idx],
            self.labels[idx],
            [self.lesion_boxes[i] for i in idx] if self.lesion_boxes else [],
        )


def build_roi_dataset(records, synth_cfg, pcfg: roi_mod.PreprocessConfig):
    """Render, preprocess and resize every record."""
    images = np.empty((len(records), 1, pcfg.resize_to, pcfg.resize_to), dtype=np.float32)
    boxes = []
    for i, rec in enumerate(records):
        img, lms, lesions = render_knee_image(rec, synth_cfg)
        r = roi_mod.preprocess_knee(img, lms, rec.side, pcfg, lesions)
        images[i, 0], b = roi_mod.model_input(r, pcfg)
        boxes.append(b)
    return RoiDataset(
        knee_ids=[r.knee_id for r in records],
        subject_ids=[r.subject_id for r in records],
        images=images,
        labels=np.array([r.label for r in records], dtype=int),
        lesion_boxes=boxes,
    )


def clinical_matrix(rows, features=CLINICAL_FEATURES):
    """Feature matrix from records or clinical-CSV dicts."""
    get = (lambda r, f: getattr(r, f)) if not isinstance(rows[0], dict) else (lambda r, f: r[f])
    return np.array([[float(get(r, f)) for f in features] for r in rows], dtype=np.float64)


def lesion_mask(boxes, size, offset=(0, 0)):
    """Boolean ``size x size`` mask of the union of lesion box hulls, after shifting by -offset."""
    mask = np.zeros((size, size), dtype=bool)
    for b in boxes:
        c = np.asarray(b["corners"], float) - [offset[1], offset[0]]
        x0, y0 = c.min(axis=0)
        x1, y1 = c.max(axis=0)
        xs = slice(max(int(np.ceil(x0)), 0), max(min(int(np.floor(x1)) + 1, size), 0))
        ys = slice(max(int(np.ceil(y0)), 0), max(min(int(np.floor(y1)) + 1, size), 0))
        mask[ys, xs] = True
    return mask
