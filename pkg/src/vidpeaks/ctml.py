"""CTML feature rubric, feature files, inter-rater agreement and associations."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, fields

import numpy as np
from scipy import stats

from .errors import ContractViolation, DataError, EmptyJoin, IncompleteRecord

# modality tags: "frame" = center frame F_t, "frames" = 21-frame window,
# "transcript" = transcript window T_[t-10, t+10]
RUBRIC = {
    "formula": ("Formula", ("frame",),
                "Math notation beyond single symbols is visible.", "binary"),
    "instructor": ("Instructor", ("frame",),
                   "Instructor's head is visible in the video.", "binary"),
    "screen": ("Screen", ("frame",),
               "The user interface of a computer screen is embedded inside the image (e.g., a code editor).",
               "binary"),
    "structured_viz": ("Structured Information Visualization", ("frame",),
                       "A diagram, graph, schematic drawing, or table is on the slide (no formulas, no GUI).",
                       "binary"),
    "text_object": ("Text Object", ("frame",),
                    "A printed or handwritten sentence, derivation, or bullet point is visible (no labels, "
                    "titles, footers, text in screenshots or code editors, references).", "binary"),
    "visual_complexity": ("Visual Complexity", ("frame",),
                          "The amount, complexity, and diversity of textual and graphical content objects "
                          "visible. Ignore instructors and typical slide elements like logos or titles as "
                          "elements.", "ordinal"),
    "annotating": ("Annotating", ("frames",),
                   "In the frame progression, something new is being written by hand on the slide or typed "
                   "letter by letter inside an editor (no pens moving without writing).", "binary"),
    "animation_video": ("Animation / Video", ("frames",),
                        "Embedded videos or built-in animations (e.g., objects, figures, or video footage). "
                        "Frames showing only lecturer movement, keyboards, hands, pointers, showing or typing "
                        "or writing new text, or slide transitions do not meet this requirement.", "binary"),
    "photo": ("Photo", ("frames",),
              "The second frame shows or includes a static real-world photograph, e.g., nature, people, "
              "objects, scenery (no instructor, hands, keyboard, or pointer, scans of handwritings).", "binary"),
    "showing": ("Showing", ("frames",),
                "The lecturer's hand or pen appears on the slide (no writing or speaking hand gestures).",
                "binary"),
    "visual_breakpoint": ("Visual Breakpoint", ("frames",),
                          "Clear slide transitions or cuts in videos and animations. No additions to the "
                          "current slide, focus on disappearing content.", "binary"),
    "signaling": ("Signaling", ("transcript",),
                  "(Subtle) hints of the importance of information (\"main\", \"important\", \"interesting\", "
                  "\"key\", \"noteworthy\", etc.).", "binary"),
    "interactivity": ("Interactivity", ("transcript",),
                      "Questions or prompts to the audience and other suggestions to active learning (such as "
                      "reflections, lookups, or exercises).", "binary"),
    "semantic_breakpoint": ("Semantic Breakpoint", ("transcript", "frame"),
                            "The video could be clearly cut at one point where the speaker starts a new point, "
                            "an example, a summary, an enumeration, a side note.", "binary"),
    "redundancy": ("Redundancy", ("transcript", "frames"),
                   "Correspondence between the spoken and visible slide content.", "ordinal"),
}
FEATURES = tuple(RUBRIC)
ORDINAL = frozenset(f for f, spec in RUBRIC.items() if spec[3] == "ordinal")
BINARY = tuple(f for f in FEATURES if f not in ORDINAL)
LEVELS = (1, 2, 3, 4, 5)


class Coder(enum.Enum):
    HumanA = "HumanA"
    HumanB = "HumanB"
    Adjudicated = "Adjudicated"
    Machine = "Machine"


@dataclass(frozen=True)
class CTMLRecord:
    video_id: str
    t: int
    formula: int = None
    instructor: int = None
    screen: int = None
    structured_viz: int = None
    text_object: int = None
    visual_complexity: int = None
    annotating: int = None
    animation_video: int = None
    photo: int = None
    showing: int = None
    visual_breakpoint: int = None
    signaling: int = None
    interactivity: int = None
    semantic_breakpoint: int = None
    redundancy: int = None
    coder: Coder = Coder.Adjudicated

    def __post_init__(self):
        for f in FEATURES:
            v = getattr(self, f)
            if v is None:
                continue
            ok = LEVELS if f in ORDINAL else (0, 1)
            if isinstance(v, bool) or v not in ok:
                raise DataError(f"{self.video_id}@{self.t}: {f}={v!r} outside {ok}")

    @property
    def key(self):
        return (self.video_id, self.t)

    def values(self) -> dict:
        return {f: getattr(self, f) for f in FEATURES}

    def to_dict(self) -> dict:
        out = {"video_id": self.video_id, "t": self.t}
        out.update(self.values())
        out["coder"] = self.coder.value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CTMLRecord":
        kw = {f.name: d.get(f.name) for f in fields(cls) if f.name != "coder"}
        kw["t"] = int(kw["t"])
        return cls(coder=Coder(d.get("coder", "Adjudicated")), **kw)


def read_ctml(path) -> list:
    out = []
    with open(path, "rb") as fh:
        for raw in fh:
            if raw.strip():
                out.append(CTMLRecord.from_dict(json.loads(raw)))
    seen = set()
    for r in out:
        k = (r.video_id, r.t, r.coder)
        if k in seen:
            raise DataError(f"duplicate CTML record {k}")
        seen.add(k)
    return out


def write_ctml(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


# --------------------------------------------------------------------------
# agreement


def _check_pair(a, b):
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ContractViolation(f"rating vectors differ in length ({len(a)} vs {len(b)})")
    if len(a) < 2:
        raise ContractViolation("need at least two rated items")
    return a, b


def confusion_matrix(a, b, categories) -> np.ndarray:
    """Integer counts; rows are rater A, columns rater B."""
    pos = {c: i for i, c in enumerate(categories)}
    m = np.zeros((len(categories), len(categories)), dtype=np.int64)
    for x, y in zip(a, b):
        if x not in pos or y not in pos:
            raise ContractViolation(f"rating outside categories: {x!r}, {y!r}")
        m[pos[x], pos[y]] += 1
    return m


def _kappa_from_counts(counts, weights) -> float | None:
    """1 - n*sum(w*O) / sum(w*r*c) in integer arithmetic; None when 0/0.

    Integer weights keep the numerator and denominator exact, so the only
    rounding is the final division.
    """
    n = int(counts.sum())
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    expected = int((weights * np.outer(rows, cols)).sum())
    observed = int((weights * counts).sum())
    if expected == 0:
        return None
    return (expected - n * observed) / expected


def cohen_kappa(ratings_a, ratings_b, categories=None) -> float:
    """Unweighted Cohen's kappa.

    When chance agreement is 1 (both raters constant) the ratio is 0/0;
    we return 1.0 if the vectors are identical and 0.0 otherwise.
    """
    a, b = _check_pair(ratings_a, ratings_b)
    cats = sorted(set(a) | set(b)) if categories is None else list(categories)
    counts = confusion_matrix(a, b, cats)
    k = _kappa_from_counts(counts, 1 - np.eye(len(cats), dtype=np.int64))
    if k is None:
        return 1.0 if a == b else 0.0
    return float(k)


def weighted_kappa(ratings_a, ratings_b, levels=LEVELS) -> float:
    """Quadratically weighted kappa, weights (i-j)^2 / (L-1)^2.

    The (L-1)^2 scale cancels, so integer squared distances are used.
    """
    a, b = _check_pair(ratings_a, ratings_b)
    levels = list(levels)
    i = np.arange(len(levels))
    k = _kappa_from_counts(confusion_matrix(a, b, levels), (i[:, None] - i[None, :]) ** 2)
    if k is None:
        return 1.0 if a == b else 0.0
    return float(k)


@dataclass
class AgreementReport:
    feature: str
    kappa: float
    weighted: bool
    n_items: int


def agreement(records_a, records_b) -> list:
    """Per-feature kappa over the (video_id, t) keys both sides rated."""
    by_a = {r.key: r for r in records_a}
    by_b = {r.key: r for r in records_b}
    keys = sorted(set(by_a) & set(by_b))
    if not keys:
        raise EmptyJoin("no (video_id, t) keys in common")
    reports = []
    for f in FEATURES:
        pairs = [(getattr(by_a[k], f), getattr(by_b[k], f)) for k in keys]
        pairs = [(x, y) for x, y in pairs if x is not None and y is not None]
        if len(pairs) < 2:
            continue
        xa, xb = zip(*pairs)
        if f in ORDINAL:
            reports.append(AgreementReport(f, weighted_kappa(xa, xb), True, len(pairs)))
        else:
            reports.append(AgreementReport(f, cohen_kappa(xa, xb, (0, 1)), False, len(pairs)))
    return reports


# --------------------------------------------------------------------------
# feature vectors


def features_to_vector(record: CTMLRecord) -> np.ndarray:
    """15 values in rubric order; ordinals scaled to [0, 1] as (v - 1) / 4."""
    out = np.empty(len(FEATURES))
    for i, f in enumerate(FEATURES):
        v = getattr(record, f)
        if v is None:
            raise IncompleteRecord(f"{record.video_id}@{record.t}: missing {f}")
        out[i] = (v - 1) / 4.0 if f in ORDINAL else float(v)
    return out


def vector_to_record(vec, video_id, t, coder=Coder.Machine) -> CTMLRecord:
    vec = np.asarray(vec, dtype=float)
    kw = {}
    for i, f in enumerate(FEATURES):
        kw[f] = int(round(vec[i] * 4 + 1)) if f in ORDINAL else int(round(vec[i]))
    return CTMLRecord(video_id, int(t), coder=coder, **kw)


# --------------------------------------------------------------------------
# associations between features and signal ranks


@dataclass
class LevelMean:
    feature: str
    signal: str
    level: int
    n: int
    mean_rank: float | None


@dataclass
class FeatureTest:
    feature: str
    signal: str
    diff: float | None           # mean(level 1) - mean(level 0)
    t_stat: float | None
    p_value: float | None
    significant: bool


def association_summary(records, rank_lookup: dict, signals, alpha=0.01):
    """Mean signal rank per feature level, plus Welch tests for binary features.

    ``rank_lookup`` maps (video_id, t) -> {signal: rank value}. Records whose
    moment is missing from the lookup are ignored.
    """
    joined = [r for r in records if r.key in rank_lookup]
    means, tests = [], []
    for s in signals:
        for f in FEATURES:
            levels = LEVELS if f in ORDINAL else (0, 1)
            groups = {lv: [] for lv in levels}
            for r in joined:
                v = getattr(r, f)
                if v is not None:
                    groups[v].append(rank_lookup[r.key][s])
            for lv in levels:
                vals = groups[lv]
                means.append(LevelMean(f, s, lv, len(vals), float(np.mean(vals)) if vals else None))
            if f not in ORDINAL:
                g0, g1 = groups[0], groups[1]
                if len(g0) >= 2 and len(g1) >= 2:
                    res = stats.ttest_ind(g1, g0, equal_var=False)
                    t_stat, p = float(res.statistic), float(res.pvalue)
                    if not np.isfinite(p):
                        t_stat, p = None, None
                    tests.append(FeatureTest(f, s, float(np.mean(g1) - np.mean(g0)), t_stat, p,
                                             p is not None and p < alpha))
                else:
                    tests.append(FeatureTest(f, s, None, None, None, False))
    return means, tests
