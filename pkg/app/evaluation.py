"""
evaluation.py

Scores detector predictions:
  - F1 / precision / recall with vul as the positive class
  - pairwise accuracy (pAcc) and the pairwise failure taxonomy
  - repository-scan metrics VDR, MFR, DPI
  - CWE-label accuracy (CLA) and tool-invocation rate (TIR)
Reports render as JSON, as a fixed-width method x {F1, pAcc} table, and the
tool-invocation histogram as CSV.
"""

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import NamedTuple, Optional

import pandas as pd

logger = logging.getLogger(__name__)

LABELS = ("vul", "ben")


# ----------------------
# Errors
# ----------------------
class EvaluationError(Exception):
    """Base class for scoring failures."""


class EmptyInput(EvaluationError):
    pass


class ZeroDenominator(EvaluationError):
    pass


class MissingVersion(EvaluationError):
    def __init__(self, sample_id, present):
        missing = sorted(set(LABELS) - set(present))
        super().__init__(f"sample {sample_id} has no {'/'.join(missing)} record")
        self.sample_id = sample_id
        self.missing = tuple(missing)


# ----------------------
# Classification metrics
# ----------------------
class Rate(NamedTuple):
    value: float
    degenerate: bool = False


def _ratio(num, den):
    if den == 0:
        return Rate(0.0, True)
    return Rate(num / den)


def _check_counts(*counts):
    if any(c < 0 for c in counts):
        raise ValueError(f"counts must be non-negative: {counts}")


def f1(tp, fp, fn):
    """2TP / (2TP + FP + FN); 0.0 flagged degenerate when nothing was counted."""
    _check_counts(tp, fp, fn)
    return _ratio(2 * tp, 2 * tp + fp + fn)


def precision(tp, fp):
    _check_counts(tp, fp)
    return _ratio(tp, tp + fp)


def recall(tp, fn):
    _check_counts(tp, fn)
    return _ratio(tp, tp + fn)


# ----------------------
# Pairwise taxonomy
# ----------------------
class PairOutcome(str, Enum):
    CORRECT = "correct"
    PAIRWISE_VULNERABLE = "pairwise_vulnerable"
    PAIRWISE_BENIGN = "pairwise_benign"
    PAIRWISE_REVERSED = "pairwise_reversed"


_PAIR_TABLE = {
    ("vul", "ben"): PairOutcome.CORRECT,
    ("vul", "vul"): PairOutcome.PAIRWISE_VULNERABLE,
    ("ben", "ben"): PairOutcome.PAIRWISE_BENIGN,
    ("ben", "vul"): PairOutcome.PAIRWISE_REVERSED,
}


def classify_pair(pred_on_vul, pred_on_ben):
    try:
        return _PAIR_TABLE[(pred_on_vul, pred_on_ben)]
    except KeyError:
        raise ValueError(f"labels must be vul/ben, got ({pred_on_vul!r}, {pred_on_ben!r})") from None


def pacc(outcomes):
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyInput("pAcc needs at least one pair")
    return sum(1 for o in outcomes if o == PairOutcome.CORRECT) / len(outcomes)


# ----------------------
# Repository-scan metrics
# ----------------------
@dataclass(frozen=True)
class ScanResult:
    detected_known: int
    total_known: int
    marked: int
    total_functions: int

    def __post_init__(self):
        _check_counts(self.detected_known, self.total_known, self.marked, self.total_functions)
        if self.detected_known > self.total_known:
            raise ValueError("detected_known exceeds total_known")
        if self.marked > self.total_functions:
            raise ValueError("marked exceeds total_functions")


class DetectionMetrics(NamedTuple):
    vdr: float
    mfr: float
    dpi: float

    @property
    def dpi_alt(self):
        """Variant with (1 - MFR) in place of MFR, so fewer marked functions score higher."""
        return _harmonic_plus_one(self.vdr, 1.0 - self.mfr)


def _harmonic_plus_one(a, b):
    return 2 / (1 / (a + 1) + 1 / (b + 1))


def compute_detection_metrics(scan):
    """(vdr, mfr, dpi) with DPI = 2 / (1/(VDR+1) + 1/(MFR+1))."""
    if scan.total_known < 1:
        raise ZeroDenominator("VDR needs at least one known vulnerability")
    if scan.total_functions < 1:
        raise ZeroDenominator("MFR needs at least one analyzed function")
    vdr = scan.detected_known / scan.total_known
    mfr = scan.marked / scan.total_functions
    return DetectionMetrics(vdr, mfr, _harmonic_plus_one(vdr, mfr))


# ----------------------
# Records
# ----------------------
@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    version: str
    truth: str
    predicted: str
    truth_cwe: Optional[str] = None
    predicted_cwe: Optional[str] = None
    tool_invocations: int = 0
    fallback_flag: bool = False

    def __post_init__(self):
        if self.version not in LABELS or self.truth not in LABELS or self.predicted not in LABELS:
            raise ValueError(f"bad labels in record {self.sample_id}")
        if self.version != self.truth:
            raise ValueError(f"record {self.sample_id}: version {self.version} must equal truth {self.truth}")
        if self.tool_invocations < 0:
            raise ValueError("tool_invocations must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(
            sample_id=data["sample_id"],
            version=data["version"],
            truth=data["truth"],
            predicted=data["predicted"],
            truth_cwe=data.get("truth_cwe"),
            predicted_cwe=data.get("predicted_cwe"),
            tool_invocations=int(data.get("tool_invocations", 0)),
            fallback_flag=bool(data.get("fallback_flag", False)),
        )


def confusion(records):
    """(tp, fp, fn, tn) with vul as the positive class."""
    counts = Counter((r.truth, r.predicted) for r in records)
    return counts[("vul", "vul")], counts[("ben", "vul")], counts[("vul", "ben")], counts[("ben", "ben")]


def _cwe_ancestors(cwe, parents):
    seen = []
    while cwe is not None and cwe not in seen:
        seen.append(cwe)
        cwe = parents.get(cwe)
    return seen


def cwe_matches(predicted, truth, cwe_parents=None):
    """Exact match, or ancestor/descendant match when a child->parent map is given."""
    if predicted is None or truth is None:
        return False
    if predicted == truth:
        return True
    if not cwe_parents:
        return False
    return truth in _cwe_ancestors(predicted, cwe_parents) or predicted in _cwe_ancestors(truth, cwe_parents)


def cla(records, cwe_parents=None):
    detected = [r for r in records if r.truth == "vul" and r.predicted == "vul"]
    correct = sum(1 for r in detected if cwe_matches(r.predicted_cwe, r.truth_cwe, cwe_parents))
    return _ratio(correct, len(detected))


def tir(records):
    records = list(records)
    if not records:
        raise EmptyInput("TIR needs at least one record")
    return sum(r.tool_invocations for r in records) / len(records)


def tool_histogram(records):
    counts = Counter(r.tool_invocations for r in records)
    return {n: counts[n] for n in sorted(counts)}


def mean_tool_invocations_by_version(records):
    means = {}
    for version in LABELS:
        side = [r.tool_invocations for r in records if r.version == version]
        if side:
            means[version] = sum(side) / len(side)
    return means


def join_pairs(records):
    """Group records by sample; returns ({sample_id: (vul, ben)}, [unpaired sample ids])."""
    by_sample = {}
    for record in records:
        side = by_sample.setdefault(record.sample_id, {})
        if record.version in side:
            raise EvaluationError(f"duplicate {record.version} record for sample {record.sample_id}")
        side[record.version] = record

    pairs = {}
    unpaired = []
    for sample_id in sorted(by_sample):
        try:
            pairs[sample_id] = pair_of(sample_id, by_sample[sample_id])
        except MissingVersion as e:
            logger.warning("Unpaired: %s", e)
            unpaired.append(sample_id)
    return pairs, unpaired


def pair_of(sample_id, side):
    """(vul, ben) records of one sample from a {version: record} map."""
    if set(side) != set(LABELS):
        raise MissingVersion(sample_id, side)
    return side["vul"], side["ben"]


# ----------------------
# Reports
# ----------------------
@dataclass
class MetricsReport:
    label: str
    records: int
    pairs: int
    unpaired: list
    f1: float
    precision: float
    recall: float
    pacc: float
    outcome_counts: dict
    vdr: float
    mfr: float
    dpi: float
    dpi_alt: float
    cla: float
    tir: float
    tool_histogram: dict
    mean_tool_invocations: dict
    fallbacks: int
    degenerate: list = field(default_factory=list)

    def to_dict(self):
        data = asdict(self)
        data["tool_histogram"] = {str(n): c for n, c in self.tool_histogram.items()}
        return data

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def histogram_frame(self):
        return pd.DataFrame(
            {"tool_invocations": list(self.tool_histogram), "frequency": list(self.tool_histogram.values())}
        )

    def write_histogram_csv(self, path):
        self.histogram_frame().to_csv(path, index=False)


def summarize(records, label="", cwe_parents=None):
    """Full MetricsReport over `records`; only complete vul/ben pairs are scored."""
    records = list(records)
    if not records:
        raise EmptyInput("no prediction records to evaluate")
    pairs, unpaired = join_pairs(records)
    scored = [r for pair in pairs.values() for r in pair]
    degenerate = []

    def keep(name, rate):
        if rate.degenerate:
            degenerate.append(name)
        return rate.value

    tp, fp, fn, _ = confusion(scored)
    outcomes = [classify_pair(vul.predicted, ben.predicted) for vul, ben in pairs.values()]
    counts = Counter(outcomes)
    if outcomes:
        pair_accuracy = pacc(outcomes)
    else:
        degenerate.append("pacc")
        pair_accuracy = 0.0

    known = [r for r in scored if r.version == "vul"]
    scan = ScanResult(
        detected_known=sum(1 for r in known if r.predicted == "vul"),
        total_known=len(known),
        marked=sum(1 for r in scored if r.predicted == "vul"),
        total_functions=len(scored),
    )
    try:
        detection = compute_detection_metrics(scan)
        vdr, mfr, dpi, dpi_alt = detection.vdr, detection.mfr, detection.dpi, detection.dpi_alt
    except ZeroDenominator:
        degenerate.extend(["vdr", "mfr", "dpi"])
        vdr, mfr, dpi, dpi_alt = 0.0, 0.0, 1.0, _harmonic_plus_one(0.0, 1.0)

    return MetricsReport(
        label=label,
        records=len(records),
        pairs=len(pairs),
        unpaired=unpaired,
        f1=keep("f1", f1(tp, fp, fn)),
        precision=keep("precision", precision(tp, fp)),
        recall=keep("recall", recall(tp, fn)),
        pacc=pair_accuracy,
        outcome_counts={o.value: counts.get(o, 0) for o in PairOutcome},
        vdr=vdr,
        mfr=mfr,
        dpi=dpi,
        dpi_alt=dpi_alt,
        cla=keep("cla", cla(scored, cwe_parents)),
        tir=tir(scored) if scored else 0.0,
        tool_histogram=tool_histogram(scored),
        mean_tool_invocations=mean_tool_invocations_by_version(scored),
        fallbacks=sum(1 for r in scored if r.fallback_flag),
        degenerate=degenerate,
    )


def reports_table(reports):
    """Fixed-width method x {F1, pAcc} table, values in percent."""
    frame = pd.DataFrame(
        {
            "Method": [r.label or "run" for r in reports],
            "F1": [round(r.f1 * 100, 2) for r in reports],
            "pAcc": [round(r.pacc * 100, 2) for r in reports],
        }
    )
    return frame.to_string(index=False, float_format=lambda v: f"{v:.2f}")


def render_text(report):
    """Table plus the taxonomy, scan and agent metrics of one report."""
    lines = [reports_table([report]), ""]
    lines.append(f"records {report.records}, pairs {report.pairs}, unpaired {len(report.unpaired)}")
    lines.append(
        "outcomes: " + ", ".join(f"{name} {count}" for name, count in report.outcome_counts.items())
    )
    lines.append(f"precision {report.precision:.4f}, recall {report.recall:.4f}")
    lines.append(
        f"VDR {report.vdr:.4f}, MFR {report.mfr:.4f}, DPI {report.dpi:.4f} (dpi_alt, uses 1-MFR: {report.dpi_alt:.4f})"
    )
    lines.append(f"CLA {report.cla:.4f}, TIR {report.tir:.4f}, fallbacks {report.fallbacks}")
    means = ", ".join(f"{v} {m:.2f}" for v, m in report.mean_tool_invocations.items())
    lines.append(f"mean tool invocations by version: {means or 'n/a'}")
    if report.degenerate:
        lines.append(f"degenerate: {', '.join(report.degenerate)}")
    return "\n".join(lines) + "\n"
