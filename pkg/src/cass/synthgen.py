"""Procedural curved-MPR stand-in data with full ground truth.

A branch is a bright sinusoidal band on a noisy, blotchy background, seen
from ``views_per_branch`` angles over 180 degrees.  A stenosis narrows the
band locally, but only in a contiguous arc of views (``visible_view_fraction``);
the remaining views of the same branch show a healthy vessel while still
carrying the branch label.  Optional extras: a burned-in text glyph block at
saturation, a fainter distractor vessel, and small calcification-like blobs.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from cass.imageio import write_pgm
from cass.preprocess import MAX_VIEWS, RawMprImage
from cass.reports import GRADE_BANDS, SECTIONS, DomainError, SYNONYMS, class_of, grade_of

log = logging.getLogger(__name__)

# share of patients with each section present (828 patients in the source cohort)
TABLE1_COUNTS = {
    "LAD": 822, "D-1": 729, "D-2": 356, "D-3": 68,
    "LCX": 639, "PLV-LCX": 15, "PDA-LCX": 17,
    "RCA": 91, "OM": 6, "OM-1": 81, "OM-2": 281, "OM-3": 75, "PLV-RCA": 609, "PDA-RCA": 71,
}
BRANCH_PRESENCE = {k: round(v / 828, 4) for k, v in TABLE1_COUNTS.items()}

# 3x5 bitmap glyphs for the view caption
_FONT = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111",
    "3": "111001111001111", "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001010010010", "8": "111101111101111",
    "9": "111101111001111", "V": "101101101101010", "A": "010101111101101",
}


@dataclass
class GenConfig:
    image_size: int = 64
    views_per_branch: int = 50
    patients: int = 10
    branch_presence: dict = field(default_factory=lambda: dict(BRANCH_PRESENCE))
    class_probs: tuple = (0.4, 0.3, 0.3)
    nonsig_range: tuple = (30, 45)
    sig_range: tuple = (60, 100)
    text_overlay: bool = True
    distractor_branch_prob: float = 0.1
    visible_view_fraction: float = 0.6
    calcified_distractor: bool = False
    vessel_width: float = 12.0
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.views_per_branch <= MAX_VIEWS:
            raise ValueError(f"views_per_branch must be in [1, {MAX_VIEWS}]")
        probs = [self.distractor_branch_prob, self.visible_view_fraction,
                 *self.class_probs, *self.branch_presence.values()]
        if any(not 0 <= p <= 1 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(sum(self.class_probs) - 1) > 1e-9:
            raise ValueError("class_probs must sum to 1")

    def to_dict(self):
        d = asdict(self)
        d["class_probs"] = list(self.class_probs)
        d["nonsig_range"] = list(self.nonsig_range)
        d["sig_range"] = list(self.sig_range)
        return d


@dataclass
class GroundTruth:
    severity: float
    vessel_mask: np.ndarray
    text_mask: np.ndarray
    visible: bool
    stenosis_column: int


def _flat_top(dx, flat=2.0, taper=4.0):
    a = np.abs(dx)
    out = np.where(a <= flat, 1.0, 0.5 * (1 + np.cos(np.pi * np.clip((a - flat) / taper, 0, 1))))
    return np.where(a >= flat + taper, 0.0, out)


def render_text(size, text, row=1, col=1):
    mask = np.zeros((size, size), dtype=bool)
    for ch in text:
        glyph = np.array([int(b) for b in _FONT[ch]], dtype=bool).reshape(5, 3)
        mask[row:row + 5, col:col + 3] |= glyph[:max(0, size - row), :max(0, size - col)]
        col += 4
    return mask


def visible_views(view_count, fraction, center):
    n = int(round(fraction * view_count))
    start = center - n // 2
    return sorted({(start + i) % view_count for i in range(n)})


def _background(rng, s, cfg):
    blobs = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=s / 10, mode="wrap")
    blobs *= 0.05 / max(blobs.std(), 1e-12)
    return 0.15 + blobs + rng.normal(0, cfg.noise_sigma, (s, s))


def generate_branch_views(severity, view_count, cfg, rng, branch_id="", patient_id=""):
    """Render every view of one branch; returns ``[(RawMprImage, GroundTruth)]``."""
    if not 0 <= severity <= 100:
        raise DomainError(f"severity {severity} outside [0, 100]")
    s = cfg.image_size
    cols = np.arange(s, dtype=float)
    rows = np.arange(s, dtype=float)[:, None]
    center = rng.uniform(0.4, 0.6) * s
    amp = rng.uniform(0.06, 0.12) * s
    period = rng.uniform(0.8, 1.4) * s
    phase = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(0, np.pi)
    intensity = rng.uniform(0.55, 0.7)
    sten_col = int(rng.integers(int(0.2 * s), int(0.8 * s)))
    plaque_view = int(rng.integers(view_count))
    visible = set(visible_views(view_count, cfg.visible_view_fraction, plaque_view)) if severity > 0 else set()
    narrowing = (severity / 100.0) * _flat_top(cols - sten_col)

    out = []
    for k in range(view_count):
        angle = np.pi * k / view_count
        yc = center + amp * np.cos(angle - tilt) * np.sin(2 * np.pi * cols / period + phase)
        width = cfg.vessel_width * (1 - narrowing if k in visible else np.ones(s))
        d = rows - yc[None, :]
        vessel_mask = np.abs(d) <= width[None, :] / 2
        sigma = width / 2.5
        with np.errstate(divide="ignore", invalid="ignore"):
            profile = np.where(sigma > 0, np.exp(-0.5 * (d / np.maximum(sigma, 1e-9)) ** 2), 0.0)
        img = _background(rng, s, cfg) + intensity * profile
        if rng.random() < cfg.distractor_branch_prob:
            off = rng.choice([-1, 1]) * rng.uniform(0.25, 0.35) * s
            yd = yc + off + amp * 0.5 * np.sin(2 * np.pi * cols / (period * 1.3))
            dd = rows - yd[None, :]
            img += 0.6 * intensity * np.exp(-0.5 * (dd / (cfg.vessel_width / 4)) ** 2)
        if cfg.calcified_distractor and rng.random() < 0.5:
            r0, c0 = rng.integers(4, s - 4, 2)
            blob = (rows - r0) ** 2 + (cols[None, :] - c0) ** 2 <= 2.5 ** 2
            img = np.where(blob & ~vessel_mask, 0.9, img)
        px = np.round(np.clip(img, 0, 0.9) * 255).astype(np.uint8)
        text_mask = np.zeros((s, s), dtype=bool)
        if cfg.text_overlay:
            text_mask = render_text(s, f"V{k:02d}A{int(round(180 * k / view_count)):03d}")
            px[text_mask] = 255
        raw = RawMprImage(px, k, branch_id, patient_id)
        out.append((raw, GroundTruth(float(severity), vessel_mask, text_mask, k in visible, sten_col)))
    return out


def sample_severity(cfg, rng):
    c = int(rng.choice(3, p=cfg.class_probs))
    if c == 0:
        return 0
    lo, hi = cfg.nonsig_range if c == 1 else cfg.sig_range
    return int(rng.integers(lo, hi + 1))


def sample_branches(cfg, rng):
    present = [sec for sec, p in cfg.branch_presence.items() if rng.random() < p]
    return present or ["LAD"]


def patient_rng(seed, index):
    return np.random.default_rng([seed, index])


def generate_dataset(cfg, out_dir):
    """Write ``patient_xxx/ARTERY/SECTION/view_NN.pgm`` trees plus manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    patients = []
    for i in range(cfg.patients):
        rng = patient_rng(cfg.seed, i)
        pid = f"patient_{i:03d}"
        truth, branches = {}, []
        for section in sample_branches(cfg, rng):
            artery = SECTIONS[section]
            severity = sample_severity(cfg, rng)
            truth[section] = severity
            rel = os.path.join(pid, artery, section)
            bdir = os.path.join(out_dir, rel)
            os.makedirs(bdir, exist_ok=True)
            views = generate_branch_views(severity, cfg.views_per_branch, cfg, rng,
                                          branch_id=section, patient_id=pid)
            for raw, _ in views:
                write_pgm(os.path.join(bdir, f"view_{raw.view_index:02d}.pgm"), raw.pixels)
            cls = int(class_of(severity))
            sidecar = {
                "patient": pid, "artery": artery, "section": section,
                "severity": severity, "class": cls,
                "stenosis_column": views[0][1].stenosis_column,
                "views": [{"view": raw.view_index, "visible": gt.visible,
                           "text_pixels": int(gt.text_mask.sum())} for raw, gt in views],
            }
            _write_json(os.path.join(bdir, "truth.json"), sidecar)
            branches.append({"artery": artery, "section": section, "severity": severity,
                             "class": cls, "dir": rel, "views": cfg.views_per_branch})
        report = render_report(truth, rng, pid)
        with open(os.path.join(out_dir, pid, "report.txt"), "w", encoding="utf-8") as f:
            f.write(report)
        patients.append({"patient_id": pid, "report": os.path.join(pid, "report.txt"),
                         "branches": branches})
        log.info("generated %s (%d branches)", pid, len(branches))
    manifest = {"config": cfg.to_dict(), "patients": patients}
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)


# -- reports -----------------------------------------------------------------------

_POINT = ["{B}: {p}% stenosis.", "{B} shows {p}% narrowing.",
          "There is {p}% stenosis of the {B}.", "{B} with {g} {p}% stenosis."]
_ZERO = ["{B}: normal.", "{B}: no stenosis.", "The {B} is unremarkable."]
_FULL = ["{B} totally occluded.", "Total occlusion of the {B}.", "{B}: 100% stenosis."]
_RANGE = ["{B}: {lo}-{hi}% stenosis.", "{g} {lo}-{hi}% stenosis of {B}.",
          "{B} shows {lo} to {hi}% narrowing."]
_NOISE = ["Heart rate {n} bpm.", "Calcium score: {n}.", "Image quality good.",
          "Mixed plaque noted in places.", "Scan performed at {n} kV."]


def _fmt(x):
    return str(int(x)) if float(x).is_integer() else f"{x:g}"


def _grade_word(p):
    # adjective only; "total occlusion" would read as a value of its own
    return grade_of(min(p, 99)).name.lower()


def render_report(truth, rng, patient_id="unknown"):
    """Report prose for ``{section: percent | (lo, hi)}`` that ``parse_report`` reads back."""
    lines = [f"Patient ID: {patient_id}."]
    items = list(truth.items())
    for idx in rng.permutation(len(items)):
        section, value = items[idx]
        syns = SYNONYMS[section]
        b = syns[int(rng.integers(len(syns)))]
        if isinstance(value, (tuple, list)) and value[0] != value[1]:
            lo, hi = value
            t = _RANGE[int(rng.integers(len(_RANGE)))]
            s = t.format(B=b, lo=_fmt(lo), hi=_fmt(hi), g=_grade_word(hi))
        else:
            p = value[0] if isinstance(value, (tuple, list)) else value
            if p == 0:
                t = _ZERO[int(rng.integers(len(_ZERO)))]
            elif p == 100:
                t = _FULL[int(rng.integers(len(_FULL)))]
            else:
                t = _POINT[int(rng.integers(len(_POINT)))]
            s = t.format(B=b, p=_fmt(p), g=_grade_word(p))
        lines.append(s[0].upper() + s[1:])
        if rng.random() < 0.3:
            lines.append(_NOISE[int(rng.integers(len(_NOISE)))].format(n=int(rng.integers(40, 400))))
    return "\n".join(lines) + "\n"


def random_truth(rng, max_branches=6):
    """Random report truth over the lexicon: points, bands, or free intervals."""
    sections = list(SECTIONS)
    chosen = rng.choice(sections, size=int(rng.integers(1, max_branches + 1)), replace=False)
    truth = {}
    for sec in chosen:
        kind = rng.integers(4)
        if kind == 0:
            truth[str(sec)] = int(rng.choice([0, 100]))
        elif kind == 1:
            truth[str(sec)] = int(rng.integers(1, 100))
        elif kind == 2:
            truth[str(sec)] = GRADE_BANDS[list(GRADE_BANDS)[int(rng.integers(1, 5))]]
        else:
            lo = int(rng.integers(0, 99))
            truth[str(sec)] = (lo, int(rng.integers(lo + 1, 101)))
    return truth
