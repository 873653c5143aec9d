"""Stenosis labels from free-text coronary CT reports.

A tolerant sentence scanner: branch mentions are found through a synonym
lexicon, then paired with the nearest percentage, percentage interval,
CAD-RADS grade word, or normal/occlusion keyword in the same sentence.
Sentences it cannot use produce warnings rather than failures.
"""
import logging
import re
from dataclasses import dataclass, field
from enum import IntEnum

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """A percentage in the report is impossible (e.g. above 100)."""

    def __init__(self, message, span):
        super().__init__(f"{message} at chars {span[0]}-{span[1]}")
        self.span = span


class DomainError(ValueError):
    """Percentage outside ``[0, 100]``."""


class StenosisClass(IntEnum):
    NO_STENOSIS = 0
    NON_SIGNIFICANT = 1
    SIGNIFICANT = 2


class CadRadsGrade(IntEnum):
    NORMAL = 0
    MINIMAL = 1
    MILD = 2
    MODERATE = 3
    SEVERE = 4
    TOTAL_OCCLUSION = 5


# integer-percent bands as written in CAD-RADS reports
GRADE_BANDS = {
    CadRadsGrade.NORMAL: (0, 0),
    CadRadsGrade.MINIMAL: (1, 24),
    CadRadsGrade.MILD: (25, 49),
    CadRadsGrade.MODERATE: (50, 69),
    CadRadsGrade.SEVERE: (70, 99),
    CadRadsGrade.TOTAL_OCCLUSION: (100, 100),
}

ARTERIES = ("LAD", "LCX", "RCA")

# section token -> parent artery.  OM branches arise from the circumflex;
# the token is kept verbatim so a caller can re-parent them if needed.
SECTIONS = {
    "LAD": "LAD", "D-1": "LAD", "D-2": "LAD", "D-3": "LAD",
    "LCX": "LCX", "PLV-LCX": "LCX", "PDA-LCX": "LCX",
    "OM": "LCX", "OM-1": "LCX", "OM-2": "LCX", "OM-3": "LCX",
    "RCA": "RCA", "PLV-RCA": "RCA", "PDA-RCA": "RCA",
}

SYNONYMS = {
    "LAD": ["LAD", "left anterior descending artery", "left anterior descending"],
    "D-1": ["D-1", "D1", "first diagonal", "diagonal 1"],
    "D-2": ["D-2", "D2", "second diagonal", "diagonal 2"],
    "D-3": ["D-3", "D3", "third diagonal", "diagonal 3"],
    "LCX": ["LCX", "LCx", "left circumflex artery", "left circumflex", "circumflex"],
    "PLV-LCX": ["PLV-LCX", "LCx-PLV", "LCX-PLV"],
    "PDA-LCX": ["PDA-LCX", "LCx-PDA", "LCX-PDA"],
    "OM": ["OM", "obtuse marginal"],
    "OM-1": ["OM-1", "OM1", "first obtuse marginal"],
    "OM-2": ["OM-2", "OM2", "second obtuse marginal"],
    "OM-3": ["OM-3", "OM3", "third obtuse marginal"],
    "RCA": ["RCA", "right coronary artery", "right coronary"],
    "PLV-RCA": ["PLV-RCA", "RCA-PLV"],
    "PDA-RCA": ["PDA-RCA", "RCA-PDA"],
}

GRADE_WORDS = {
    "minimal": CadRadsGrade.MINIMAL,
    "mild": CadRadsGrade.MILD,
    "moderate": CadRadsGrade.MODERATE,
    "severe": CadRadsGrade.SEVERE,
}
NORMAL_PHRASES = ["no stenosis", "no significant plaque", "normal", "unremarkable"]
OCCLUSION_PHRASES = ["total occlusion", "totally occluded", "occluded", "occlusion"]


def _alternation(phrases):
    ordered = sorted(set(phrases), key=len, reverse=True)
    return "|".join(re.escape(p).replace(r"\ ", r"\s+") for p in ordered)


_SYN_LOOKUP = {s.lower(): tok for tok, syns in SYNONYMS.items() for s in syns}
_BRANCH_RE = re.compile(
    r"(?<![\w-])(" + _alternation(_SYN_LOOKUP) + r")(?![\w-])", re.IGNORECASE)
_NUM = r"(\d+(?:\.\d+)?)"
_PCT = r"\s*(?:%|percent\b)"
_INTERVAL_RE = re.compile(_NUM + r"(?:" + _PCT + r")?\s*(?:-|–|to)\s*" + _NUM + _PCT, re.IGNORECASE)
_SINGLE_RE = re.compile(_NUM + _PCT, re.IGNORECASE)
_NORMAL_RE = re.compile(r"\b(?:" + _alternation(NORMAL_PHRASES) + r")\b", re.IGNORECASE)
_OCCLUDED_RE = re.compile(r"\b(?:" + _alternation(OCCLUSION_PHRASES) + r")\b", re.IGNORECASE)
_GRADE_RE = re.compile(r"\b(" + "|".join(GRADE_WORDS) + r")\b", re.IGNORECASE)
_SENTENCE_RE = re.compile(r"[^.;\n]+(?:\.(?=\d)[^.;\n]*)*")
_PATIENT_RE = re.compile(r"patient(?:\s+id)?\s*[:#]\s*([\w-]+)", re.IGNORECASE)


@dataclass(frozen=True)
class BranchId:
    artery: str
    section: str

    @classmethod
    def of(cls, section):
        return cls(SECTIONS[section], section)


@dataclass
class StenosisFinding:
    branch: BranchId
    lo: float
    hi: float
    span: tuple

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi <= 100:
            raise DomainError(f"finding interval [{self.lo}, {self.hi}] not within [0, 100]")

    @property
    def percent(self):
        return self.lo if self.lo == self.hi else (self.lo, self.hi)


@dataclass
class PatientLabelSet:
    patient_id: str
    findings: list = field(default_factory=list)
    classes: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_json(self):
        return {
            "patient_id": self.patient_id,
            "findings": [{"branch": f.branch.section, "artery": f.branch.artery,
                          "lo": f.lo, "hi": f.hi, "span": list(f.span)}
                         for f in self.findings],
            "classes": {b.section: int(c) for b, c in self.classes.items()},
            "warnings": list(self.warnings),
        }

    def intervals(self):
        """``{section: (lo, hi)}``; later findings for a branch win."""
        return {f.branch.section: (f.lo, f.hi) for f in self.findings}


def grade_of(percent):
    if not 0 <= percent <= 100:
        raise DomainError(f"percent {percent} outside [0, 100]")
    if percent == 0:
        return CadRadsGrade.NORMAL
    if percent < 25:
        return CadRadsGrade.MINIMAL
    if percent < 50:
        return CadRadsGrade.MILD
    if percent < 70:
        return CadRadsGrade.MODERATE
    if percent < 100:
        return CadRadsGrade.SEVERE
    return CadRadsGrade.TOTAL_OCCLUSION


def class_of(value, strategy="upper", fifty_is_significant=False):
    """Three-class label of a percent or a ``(lo, hi)`` interval.

    Intervals are judged by their upper bound unless ``strategy="midpoint"``.
    An exact 50% is non-significant unless ``fifty_is_significant``.
    """
    if isinstance(value, (tuple, list)):
        lo, hi = value
        if not 0 <= lo <= hi <= 100:
            raise DomainError(f"interval [{lo}, {hi}] not within [0, 100]")
        if strategy == "upper":
            p = hi
        elif strategy == "midpoint":
            p = (lo + hi) / 2
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
    else:
        p = value
    if not 0 <= p <= 100:
        raise DomainError(f"percent {p} outside [0, 100]")
    if p == 0:
        return StenosisClass.NO_STENOSIS
    if p < 50 or (p == 50 and not fifty_is_significant):
        return StenosisClass.NON_SIGNIFICANT
    return StenosisClass.SIGNIFICANT


def _values_in(sentence, offset):
    """All ``(start, end, lo, hi)`` value expressions in a sentence."""
    found, taken = [], []

    def free(s, e):
        return all(e <= a or s >= b for a, b in taken)

    for m in _INTERVAL_RE.finditer(sentence):
        lo, hi = float(m.group(1)), float(m.group(2))
        span = (offset + m.start(), offset + m.end())
        if hi > 100 or lo > hi:
            raise ParseError(f"malformed percentage interval {m.group(0)!r}", span)
        found.append((m.start(), m.end(), lo, hi))
        taken.append((m.start(), m.end()))
    for m in _SINGLE_RE.finditer(sentence):
        if not free(m.start(), m.end()):
            continue
        p = float(m.group(1))
        if p > 100:
            raise ParseError(f"percentage {m.group(0)!r} exceeds 100", (offset + m.start(), offset + m.end()))
        found.append((m.start(), m.end(), p, p))
        taken.append((m.start(), m.end()))
    has_number = bool(found)
    for regex, lo, hi in ((_OCCLUDED_RE, 100, 100), (_NORMAL_RE, 0, 0)):
        for m in regex.finditer(sentence):
            if free(m.start(), m.end()):
                found.append((m.start(), m.end(), lo, hi))
                taken.append((m.start(), m.end()))
    if not has_number:
        # a bare grade word stands for its band; with a number present it is just an adjective
        for m in _GRADE_RE.finditer(sentence):
            if free(m.start(), m.end()):
                lo, hi = GRADE_BANDS[GRADE_WORDS[m.group(1).lower()]]
                found.append((m.start(), m.end(), lo, hi))
    return sorted(found)


def parse_report(text, patient_id=None, strategy="upper", fifty_is_significant=False):
    """Extract per-branch findings and three-class labels from report text."""
    if patient_id is None:
        m = _PATIENT_RE.search(text)
        patient_id = m.group(1) if m else "unknown"
    labels = PatientLabelSet(patient_id)
    for sm in _SENTENCE_RE.finditer(text):
        sentence, base = sm.group(0), sm.start()
        mentions = [(m.start(), m.end(), _SYN_LOOKUP[re.sub(r"\s+", " ", m.group(1).lower())])
                    for m in _BRANCH_RE.finditer(sentence)]
        if not mentions:
            continue
        values = _values_in(sentence, base)
        for i, (ms, me, section) in enumerate(mentions):
            chosen = None
            if len(mentions) == 1:
                if values:
                    chosen = min(values, key=lambda v: (v[0] < me, abs(v[0] - me)))
            else:
                nxt = mentions[i + 1][0] if i + 1 < len(mentions) else len(sentence)
                prev = mentions[i - 1][1] if i else 0
                after = [v for v in values if me <= v[0] < nxt]
                before = [v for v in values if prev <= v[0] and v[1] <= ms]
                if after:
                    chosen = after[0]
                elif before:
                    chosen = before[-1]
            if chosen is None:
                msg = f"no stenosis value for {section} in {sentence.strip()!r}"
                labels.warnings.append(msg)
                log.info(msg)
                continue
            _, _, lo, hi = chosen
            labels.findings.append(StenosisFinding(
                BranchId.of(section), lo, hi, (base + ms, base + sm.end() - sm.start())))
    if not labels.findings:
        labels.warnings.append("no recognisable branch finding in report")
    for f in labels.findings:
        c = class_of((f.lo, f.hi), strategy, fifty_is_significant)
        prev = labels.classes.get(f.branch)
        labels.classes[f.branch] = c if prev is None else max(prev, c)
    return labels
