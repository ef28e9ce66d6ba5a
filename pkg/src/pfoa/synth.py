"""Synthetic knee cohort with planted, recoverable signal.

Each knee gets clinical covariates, four latent radiographic grades
(osteophyte, joint-space narrowing, sclerosis, cysts) and a rendered lateral
view.  A continuous severity drives all four grades::

    severity = intercept + sum_f w_f * z_f + subject_effect + knee_noise

where ``z_f`` are standardised covariates and ``w_f`` the configured effect
strengths.  Grade ``k`` counts how many of its three thresholds
``severity + grade_noise_k`` exceeds.  The label follows from the grades
through :func:`assign_label`, and the intercept is solved so the realised
prevalence matches the target.

Images show only osteophytes (bright blobs at the patellar poles) and
joint-space narrowing (a thinner dark band between patella and femur);
sclerosis and cysts affect the label only.
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

GRADE_KINDS = ("osteophyte", "jsn", "sclerosis", "cysts")
DEFAULT_EFFECTS = {"kl": 1.0, "womac": 0.6, "bmi": 0.5, "sex": 0.3, "age": 0.0}

# per-grade thresholds on the noisy severity scale
_THRESHOLDS = {
    "osteophyte": (0.0, 1.0, 2.0),
    "jsn": (0.2, 1.2, 2.2),
    "sclerosis": (0.6, 1.6, 2.6),
    "cysts": (0.8, 1.8, 2.8),
}
# covariate standardisation (location, scale)
_COV_SCALE = {"age": (61.0, 8.0), "bmi": (30.0, 5.0), "womac": (15.0, 15.0), "kl": (0.9, 1.1), "sex": (0.6, 1.0)}
_KL_PROBS = (0.50, 0.20, 0.15, 0.10, 0.05)


@dataclass
class SynthConfig:
    n_subjects: int = 500
    knees_per_subject: int = 2
    target_prevalence: float = 0.12
    image_size: int = 256
    effect_strengths: dict = field(default_factory=lambda: dict(DEFAULT_EFFECTS))
    lesion_contrast: float = 0.6
    jsn_narrowing: float = 0.28  # fractional joint-space loss per JSN grade
    seed: int = 0
    severity_noise: float = 0.9
    subject_noise: float = 0.3
    grade_noise: float = 0.35
    noise_std: float = 0.015
    max_rotation: float = 15.0
    n_landmarks: int = 10

    def __post_init__(self):
        self.effect_strengths = {**{k: 0.0 for k in DEFAULT_EFFECTS}, **dict(self.effect_strengths)}
        self.validate()

    def validate(self):
        if not isinstance(self.n_subjects, (int, np.integer)) or self.n_subjects < 2:
            raise ConfigError(f"n_subjects must be an integer >= 2, got {self.n_subjects!r}", "n_subjects")
        if self.knees_per_subject not in (1, 2):
            raise ConfigError(f"knees_per_subject must be 1 or 2, got {self.knees_per_subject!r}", "knees_per_subject")
        p = self.target_prevalence
        if not isinstance(p, (int, float)) or not 0 < p < 1:
            raise ConfigError(f"target_prevalence must lie strictly between 0 and 1, got {p!r}", "target_prevalence")
        if self.image_size < 64:
            raise ConfigError(f"image_size must be >= 64, got {self.image_size}", "image_size")
        unknown = set(self.effect_strengths) - set(DEFAULT_EFFECTS)
        if unknown:
            raise ConfigError(f"unknown effect_strengths keys: {sorted(unknown)}", "effect_strengths")
        for key, w in self.effect_strengths.items():
            if not math.isfinite(w):
                raise ConfigError(f"effect_strengths[{key}] must be finite", "effect_strengths")
        for key in ("bmi", "womac", "kl"):
            if self.effect_strengths[key] < 0:
                raise ConfigError(f"effect_strengths[{key}] must be >= 0 (risk-increasing)", "effect_strengths")
        for name in ("severity_noise", "subject_noise", "grade_noise", "noise_std", "lesion_contrast"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", name)
        if not 0 <= self.jsn_narrowing * 3 < 1:
            raise ConfigError("jsn_narrowing must be in [0, 1/3) so the joint space stays open", "jsn_narrowing")
        if not 0 <= self.max_rotation < 45:
            raise ConfigError("max_rotation must be in [0, 45)", "max_rotation")
        if self.n_landmarks < 4:
            raise ConfigError("n_landmarks must be >= 4", "n_landmarks")

    @property
    def n_knees(self):
        return self.n_subjects * self.knees_per_subject


@dataclass(frozen=True)
class LatentSeverity:
    osteophyte: int = 0
    jsn: int = 0
    sclerosis: int = 0
    cysts: int = 0

    def __post_init__(self):
        for kind in GRADE_KINDS:
            g = getattr(self, kind)
            if isinstance(g, bool) or not isinstance(g, (int, np.integer)) or not 0 <= g <= 3:
                raise ValidationError(f"{kind} grade must be an integer in [0, 3], got {g!r}")


@dataclass
class CohortRecord:
    subject_id: str
    side: str
    age: float
    sex: int
    bmi: float
    womac: float
    kl: int
    label: int
    latent: LatentSeverity
    render_seed: int = 0
    rotation: float = 0.0
    lesion_boxes: list = field(default_factory=list)
    image: np.ndarray = None
    landmarks: np.ndarray = None

    @property
    def knee_id(self):
        return f"{self.subject_id}{'L' if self.side == 'left' else 'R'}"

    @property
    def progressor(self):
        return bool(self.label)


def assign_label(latent: LatentSeverity) -> int:
    """1 for a progressor: osteophyte >= 2, or JSN >= 1 with any other sign >= 1."""
    if not isinstance(latent, LatentSeverity):
        latent = LatentSeverity(**latent)
    other = latent.osteophyte >= 1 or latent.sclerosis >= 1 or latent.cysts >= 1
    return int(latent.osteophyte >= 2 or (latent.jsn >= 1 and other))


def _labels_from_grades(g):
    ost, jsn, scl, cys = g
    return ((ost >= 2) | ((jsn >= 1) & ((ost >= 1) | (scl >= 1) | (cys >= 1)))).astype(np.int8)


def _truncnorm(rng, mean, sd, lo, hi, size):
    out = rng.normal(mean, sd, size)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, sd, bad.sum())
        bad = (out < lo) | (out > hi)
    return out


def _grades(base, intercept):
    return [
        np.sum((base[k][:, None] + intercept) > np.asarray(_THRESHOLDS[kind])[None, :], axis=1)
        for k, kind in enumerate(GRADE_KINDS)
    ]


def _solve_intercept(base, target, n):
    """Smallest-error intercept for the (monotone) realised prevalence."""

    def prevalence(c):
        return _labels_from_grades(_grades(base, c)).mean()

    lo, hi = -30.0, 30.0
    if prevalence(lo) > target or prevalence(hi) < target:
        return None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if prevalence(mid) >= target:
            hi = mid
        else:
            lo = mid
    best = min((lo, hi), key=lambda c: abs(prevalence(c) - target))
    return best, prevalence(best)


def generate_cohort(config: SynthConfig, render=False):
    """Deterministic cohort for ``config.seed``.

    Images are rendered on demand with :func:`render_knee_image`; pass
    ``render=True`` to attach them (memory heavy for large cohorts).
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    ns, kps = config.n_subjects, config.knees_per_subject
    n = ns * kps

    age = _truncnorm(rng, 61.0, 8.0, 45.0, 80.0, ns)
    sex = (rng.random(ns) < 0.6).astype(int)  # 1 = female
    bmi = _truncnorm(rng, 30.0, 5.0, 17.0, 50.0, ns)
    subj_effect = rng.normal(0.0, config.subject_noise, ns)
    subj_womac = rng.normal(0.0, 1.0, ns)
    sides = ["left", "right"] if kps == 2 else None
    side_draw = rng.random(ns)

    sub_idx = np.repeat(np.arange(ns), kps)
    womac = np.clip(15.0 + 15.0 * (0.7 * subj_womac[sub_idx] + 0.71 * rng.normal(0, 1, n)), 0.0, 96.0)
    womac = np.round(womac, 1)
    kl = rng.choice(5, size=n, p=_KL_PROBS)

    cov = {
        "age": age[sub_idx],
        "sex": sex[sub_idx].astype(float),
        "bmi": bmi[sub_idx],
        "womac": womac,
        "kl": kl.astype(float),
    }
    risk = np.zeros(n)
    for key, w in config.effect_strengths.items():
        loc, scale = _COV_SCALE[key]
        risk += w * (cov[key] - loc) / scale
    knee_noise = rng.normal(0.0, config.severity_noise, n)
    grade_noise = rng.normal(0.0, config.grade_noise, (4, n))
    severity = risk + subj_effect[sub_idx] + knee_noise
    base = severity[None, :] + grade_noise

    solved = _solve_intercept(base, config.target_prevalence, n)
    tol = max(0.02, 1.0 / n)
    if solved is None or abs(solved[1] - config.target_prevalence) > tol:
        if solved is None:
            lo = _labels_from_grades(_grades(base, -30.0)).mean()
            hi = _labels_from_grades(_grades(base, 30.0)).mean()
            got = f"achievable prevalences span only [{lo:.4f}, {hi:.4f}]"
        else:
            got = f"closest achievable prevalence {solved[1]:.4f}"
        raise ConfigError(
            f"target_prevalence={config.target_prevalence} is not attainable for {n} knees with "
            f"effect_strengths={config.effect_strengths}; {got}",
            "target_prevalence",
        )
    intercept = solved[0]
    grades = _grades(base, intercept)
    labels = _labels_from_grades(grades)
    rotations = rng.uniform(-config.max_rotation, config.max_rotation, n)

    width = len(str(ns - 1))
    records = []
    for i in range(n):
        s = sub_idx[i]
        if kps == 2:
            side = sides[i % 2]
        else:
            side = "left" if side_draw[s] < 0.5 else "right"
        rec = CohortRecord(
            subject_id=f"S{s:0{width}d}",
            side=side,
            age=round(float(cov["age"][i]), 1),
            sex=int(cov["sex"][i]),
            bmi=round(float(cov["bmi"][i]), 2),
            womac=float(womac[i]),
            kl=int(kl[i]),
            label=int(labels[i]),
            latent=LatentSeverity(*(int(g[i]) for g in grades)),
            render_seed=int(np.random.SeedSequence([config.seed, 0xBEEF, i]).generate_state(1)[0]),
            rotation=float(rotations[i]),
        )
        if render:
            img, lms, boxes = render_knee_image(rec, config)
            rec.image, rec.landmarks, rec.lesion_boxes = img, lms, boxes
        records.append(rec)
    log.info("cohort: %d knees, prevalence %.4f (intercept %.3f)", n, labels.mean(), intercept)
    return records


# ---------------------------------------------------------------------------
# rendering


def _smooth_inside(signed_dist, width=0.8):
    # ~1 inside (negative distance), ~0 outside, antialiased edge
    return 0.5 * (1.0 - np.tanh(signed_dist / width))


def _rotate_points(pts, angle_deg, center):
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return (np.asarray(pts, float) - center) @ rot.T + center


def render_knee_image(record: CohortRecord, config: SynthConfig, rotation=None):
    """Render one lateral knee view.

    Returns ``(image, landmarks, lesion_boxes)``: a float image in roughly
    [0, 1.5], an ``n_landmarks x 2`` array of (x, y) points outlining the
    patella, and a list of dicts ``{"kind", "corners"}`` with the four
    corners of each planted lesion region in image coordinates.  Right knees
    are mirrored so the femur lies to the left of the patella.
    ``rotation`` (degrees) overrides the record's global rotation.
    """
    size = config.image_size
    if size < 64:
        raise ConfigError(f"image_size must be >= 64, got {size}", "image_size")
    rng = np.random.default_rng(record.render_seed)
    angle = record.rotation if rotation is None else float(rotation)
    lat = record.latent

    hp = rng.uniform(0.30, 0.40) * size
    b = hp / 2.0
    a = b * rng.uniform(0.38, 0.46)
    cx = size * (0.42 + rng.uniform(-0.04, 0.04))
    cy = size * (0.50 + rng.uniform(-0.04, 0.04))
    gap0 = hp * rng.uniform(0.085, 0.10)
    gap = gap0 * (1.0 - config.jsn_narrowing * lat.jsn)
    femur_r = 1.6 * hp
    fcx, fcy = cx + a + gap + femur_r, cy + 0.05 * hp
    base_level = rng.uniform(0.12, 0.2)
    bone_level = rng.uniform(0.55, 0.65)
    femur_level = rng.uniform(0.6, 0.72)

    # evaluate in the unrotated frame
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    qx, qy = xx, yy
    if angle:
        t = math.radians(-angle)
        dx, dy = xx - cx, yy - cy
        qx = cx + math.cos(t) * dx - math.sin(t) * dy
        qy = cy + math.sin(t) * dx + math.cos(t) * dy

    img = np.full((size, size), base_level)
    # soft tissue gradient anterior to the bones
    img += 0.08 * np.clip((qx - (cx - 2.2 * a)) / (4 * a), 0, 1)
    # patella: ellipse with brighter rim
    rho = np.sqrt(((qx - cx) / a) ** 2 + ((qy - cy) / b) ** 2)
    pat = _smooth_inside((rho - 1.0) * min(a, b))
    rim = _smooth_inside(np.abs(rho - 0.93) * min(a, b) - 1.5)
    img += (bone_level - base_level) * pat + 0.12 * rim * pat
    # femur: large disc
    dfem = np.sqrt((qx - fcx) ** 2 + (qy - fcy) ** 2) - femur_r
    fem = _smooth_inside(dfem)
    img = img * (1 - fem) + (femur_level + 0.1 * _smooth_inside(np.abs(dfem + 2.0) - 1.5)) * fem

    boxes = []
    # joint-space band, bounded by the posterior patella edge and the femur
    band_y = 0.6 * b
    band_x0 = cx + a * math.sqrt(1 - 0.6**2) - 1.0
    band_x1 = cx + a + gap + 2.0
    boxes.append(("joint_space", band_x0, cy - band_y, band_x1, cy + band_y))

    if lat.osteophyte > 0:
        radius = hp * (0.03 + 0.018 * lat.osteophyte)
        amp = config.lesion_contrast * lat.osteophyte / 3.0
        for kind, t_deg in (("osteophyte_superior", -62.0), ("osteophyte_inferior", 62.0)):
            tt = math.radians(t_deg)
            ox = cx + a * math.cos(tt) + 0.4 * radius
            oy = cy + b * math.sin(tt)
            d = np.sqrt((qx - ox) ** 2 + (qy - oy) ** 2) - radius
            img += amp * _smooth_inside(d, 1.0)
            pad = radius + 1.5
            boxes.append((kind, ox - pad, oy - pad, ox + pad, oy + pad))

    if config.noise_std:
        img += rng.normal(0.0, config.noise_std, img.shape)

    tl = np.pi / 2 + 2 * np.pi * np.arange(config.n_landmarks) / config.n_landmarks
    landmarks = np.stack([cx + a * np.cos(tl), cy + b * np.sin(tl)], axis=1)
    center = np.array([cx, cy])
    landmarks = _rotate_points(landmarks, angle, center)
    lesion = []
    for kind, x0, y0, x1, y1 in boxes:
        corners = _rotate_points([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], angle, center)
        lesion.append({"kind": kind, "corners": corners})

    if record.side == "right":
        img = img[:, ::-1].copy()
        landmarks = landmarks.copy()
        landmarks[:, 0] = size - 1 - landmarks[:, 0]
        for box in lesion:
            box["corners"] = box["corners"].copy()
            box["corners"][:, 0] = size - 1 - box["corners"][:, 0]
    return img, landmarks, lesion


def box_bounds(box):
    """Axis-aligned (x0, y0, x1, y1) hull of a lesion box."""
    c = np.asarray(box["corners"] if isinstance(box, dict) else box, float)
    return float(c[:, 0].min()), float(c[:, 1].min()), float(c[:, 0].max()), float(c[:, 1].max())


# ---------------------------------------------------------------------------
# persistence

CLINICAL_FIELDS = ("subject_id", "side", "age", "sex", "bmi", "womac", "kl", "label")
IMAGE_SCALE = 40000.0


def clinical_csv(records):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CLINICAL_FIELDS)
    for r in records:
        w.writerow([r.subject_id, r.side, repr(r.age), r.sex, repr(r.bmi), repr(r.womac), r.kl, r.label])
    return buf.getvalue()


def read_clinical_csv(path):
    """Rows of the clinical CSV as dicts with typed values."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CLINICAL_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rows.append(
                {
                    "subject_id": row["subject_id"],
                    "side": row["side"],
                    "age": float(row["age"]),
                    "sex": int(row["sex"]),
                    "bmi": float(row["bmi"]),
                    "womac": float(row["womac"]),
                    "kl": int(row["kl"]),
                    "label": int(row["label"]),
                    "knee_id": row["subject_id"] + ("L" if row["side"] == "left" else "R"),
                }
            )
    return rows


def write_cohort(records, config, out_dir):
    """Clinical CSV plus a 16-bit PNG, landmark JSON and lesion JSON per knee."""
    from .io import write_png16

    for sub in ("images", "landmarks", "lesions"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    with open(os.path.join(out_dir, "clinical.csv"), "w", newline="") as fh:
        fh.write(clinical_csv(records))
    latent_rows = []
    for rec in records:
        if rec.image is None:
            img, lms, boxes = render_knee_image(rec, config)
        else:
            img, lms, boxes = rec.image, rec.landmarks, rec.lesion_boxes
        kid = rec.knee_id
        write_png16(os.path.join(out_dir, "images", f"{kid}.png"), np.clip(img * IMAGE_SCALE, 0, 65535))
        with open(os.path.join(out_dir, "landmarks", f"{kid}.json"), "w") as fh:
            json.dump({"points": np.round(lms, 6).tolist()}, fh)
        with open(os.path.join(out_dir, "lesions", f"{kid}.json"), "w") as fh:
            json.dump(
                {"boxes": [{"kind": b["kind"], "corners": np.round(b["corners"], 6).tolist()} for b in boxes]}, fh
            )
        latent_rows.append({"knee_id": kid, **asdict(rec.latent), "rotation": round(rec.rotation, 6)})
    with open(os.path.join(out_dir, "latent.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["knee_id", *GRADE_KINDS, "rotation"], lineterminator="\n")
        w.writeheader()
        w.writerows(latent_rows)
