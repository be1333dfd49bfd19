"""Streaming detection, DET curves, fixed-FRR operating points and latency.

Latency is ``trigger_time - endpoint_time`` in milliseconds; negative values
mean the keyword was detected before it ended. A detection triggers at the
first row whose keyword posterior reaches the threshold.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InfeasibleError, UtteranceTooShortError
from .model import FRAME_SHIFT_MS, posterior_track
from .validation import check_fraction

DEFAULT_DEBOUNCE_MS = 1000


@dataclass(frozen=True)
class Detection:
    utterance_id: str
    trigger_time_ms: int
    peak_time_ms: int
    peak_score: float


def scan_track(p1, times_ms, threshold, debounce_ms=DEFAULT_DEBOUNCE_MS, utterance_id=""):
    """Threshold a keyword-posterior sequence into detections.

    A detection opens at the first row with ``p1 >= threshold`` and follows
    the running peak until the score drops below threshold or more than
    ``debounce_ms`` has passed since its trigger. A new detection may open
    once ``debounce_ms`` has elapsed since the previous trigger.
    """
    check_fraction(threshold, "threshold", high_open=False)
    out = []
    open_ = None  # [trigger, peak_time, peak]
    last_trigger = None
    for t, p in zip(times_ms, p1):
        t = int(t)
        if open_ is not None:
            if p >= threshold and t - open_[0] <= debounce_ms:
                if p > open_[2]:
                    open_[1], open_[2] = t, float(p)
                continue
            out.append(Detection(utterance_id, open_[0], open_[1], open_[2]))
            open_ = None
        if p >= threshold and (last_trigger is None or t - last_trigger >= debounce_ms):
            open_ = [t, t, float(p)]
            last_trigger = t
    if open_ is not None:
        out.append(Detection(utterance_id, open_[0], open_[1], open_[2]))
    return out


def stream_detect(params, features, threshold, stride_frames=10, debounce_ms=DEFAULT_DEBOUNCE_MS, utterance_id=""):
    """Run the detector over a whole utterance and return its detections."""
    track = posterior_track(params, features, stride_frames)
    return scan_track(track.p1, track.frame_times_ms, threshold, debounce_ms, utterance_id)


# ----------------------------------------------------------------------------
# DET
# ----------------------------------------------------------------------------


@dataclass
class DetCurve:
    thresholds: np.ndarray
    false_accepts: np.ndarray
    false_rejects: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def points(self):
        return [
            {"threshold": float(t), "false_accepts": int(fa), "false_rejects": int(fr)}
            for t, fa, fr in zip(self.thresholds, self.false_accepts, self.false_rejects)
        ]

    @property
    def fa_rate(self):
        return self.false_accepts / self.n_neg

    @property
    def fr_rate(self):
        return self.false_rejects / self.n_pos


def compute_det(pos_scores, neg_scores):
    """DET points at every distinct score: ``FA = #neg >= t``, ``FR = #pos < t``."""
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ContractError("compute_det needs at least one positive and one negative score")
    thresholds = np.unique(np.concatenate([pos, neg]))
    fa = neg.size - np.searchsorted(neg, thresholds, side="left")
    fr = np.searchsorted(pos, thresholds, side="left")
    return DetCurve(thresholds, fa.astype(np.int64), fr.astype(np.int64), int(pos.size), int(neg.size))


@dataclass(frozen=True)
class OperatingPoint:
    target_frr: float
    threshold: float
    fa_count: int
    fr_count: int
    achieved_frr: float
    n_pos: int
    n_neg: int

    @property
    def fa_rate(self):
        return self.fa_count / self.n_neg


def operating_point(curve, target_frr):
    """Largest threshold whose false-reject rate does not exceed ``target_frr``."""
    check_fraction(target_frr, "target_frr")
    frr = np.asarray(curve.false_rejects) / curve.n_pos
    ok = np.flatnonzero(frr <= target_frr)
    if ok.size == 0:
        raise InfeasibleError(target_frr, float(frr.min()))
    k = ok[np.argmax(np.asarray(curve.thresholds)[ok])]
    return OperatingPoint(
        float(target_frr),
        float(curve.thresholds[k]),
        int(curve.false_accepts[k]),
        int(curve.false_rejects[k]),
        float(frr[k]),
        curve.n_pos,
        curve.n_neg,
    )


# ----------------------------------------------------------------------------
# latency
# ----------------------------------------------------------------------------


@dataclass
class LatencyStats:
    utterance_ids: list
    latencies_ms: np.ndarray
    peak_latencies_ms: np.ndarray
    detections: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.latencies_ms)

    @property
    def mean(self):
        return float(np.mean(self.latencies_ms)) if self.n else float("nan")

    @property
    def median(self):
        return float(np.median(self.latencies_ms)) if self.n else float("nan")

    @property
    def p95(self):
        return float(np.percentile(self.latencies_ms, 95)) if self.n else float("nan")

    @property
    def mean_peak(self):
        return float(np.mean(self.peak_latencies_ms)) if self.n else float("nan")


def is_true_detection(det, example, window_ms=750):
    """Trigger falls while some part of the keyword is inside the model window."""
    start_ms = example.keyword_start * FRAME_SHIFT_MS
    end_ms = example.endpoint_frame * FRAME_SHIFT_MS
    return start_ms <= det.trigger_time_ms <= end_ms + window_ms


def latency_stats(detections, examples):
    """Latency of the first true detection of each positive utterance.

    Raises :class:`ContractError` if a detection refers to an utterance with
    no keyword endpoint.
    """
    by_id = {ex.id: ex for ex in examples}
    first = {}
    for det in detections:
        ex = by_id.get(det.utterance_id)
        if ex is None or ex.endpoint_frame is None:
            raise ContractError(f"detection on {det.utterance_id!r}, which has no keyword endpoint")
        if det.utterance_id not in first and is_true_detection(det, ex):
            first[det.utterance_id] = det
    ids = sorted(first)
    lat = np.array([first[i].trigger_time_ms - by_id[i].endpoint_frame * FRAME_SHIFT_MS for i in ids], dtype=np.float64)
    peak = np.array([first[i].peak_time_ms - by_id[i].endpoint_frame * FRAME_SHIFT_MS for i in ids], dtype=np.float64)
    return LatencyStats(ids, lat, peak, [first[i] for i in ids])


def latency_reduction(baseline, other):
    """Mean latency reduction of ``other`` relative to ``baseline`` (positive = earlier)."""
    return baseline.mean - other.mean


# ----------------------------------------------------------------------------
# full evaluation
# ----------------------------------------------------------------------------


@dataclass
class EvalReport:
    curve: DetCurve
    operating: OperatingPoint
    latency: LatencyStats
    peak_scores: dict
    peak_times_ms: dict = field(default_factory=dict)
    skipped: int = 0

    def mean_peak_offset_ms(self, examples):
        """Mean of ``peak time - endpoint time`` over positives with a track."""
        offsets = [
            self.peak_times_ms[e.id] - e.endpoint_frame * FRAME_SHIFT_MS
            for e in examples
            if e.label == 1 and e.id in self.peak_times_ms
        ]
        return float(np.mean(offsets)) if offsets else float("nan")


def evaluate(params, examples, target_frr=0.05, stride_frames=10, debounce_ms=DEFAULT_DEBOUNCE_MS):
    """Score every utterance, pick the fixed-FRR threshold and measure latency there."""
    tracks, skipped = {}, 0
    for ex in sorted(examples, key=lambda e: e.id):
        try:
            tracks[ex.id] = (ex, posterior_track(params, ex.features, stride_frames))
        except UtteranceTooShortError:
            skipped += 1
    peaks = {i: float(tr.p1.max()) for i, (_, tr) in tracks.items()}
    peak_times = {i: int(tr.frame_times_ms[np.argmax(tr.p1)]) for i, (_, tr) in tracks.items()}
    pos = [peaks[i] for i, (ex, _) in tracks.items() if ex.label == 1]
    neg = [peaks[i] for i, (ex, _) in tracks.items() if ex.label == 0]
    curve = compute_det(pos, neg)
    op = operating_point(curve, target_frr)
    dets = []
    for i, (ex, tr) in tracks.items():
        if ex.label == 1:
            dets.extend(scan_track(tr.p1, tr.frame_times_ms, op.threshold, debounce_ms, i))
    lat = latency_stats(dets, [ex for ex, _ in tracks.values()])
    return EvalReport(curve, op, lat, peaks, peak_times, skipped)


def _g(x):
    return f"{x:.9g}"


def write_report(report, out_dir):
    """Write det_curve.csv, latency.csv and operating_points.csv."""
    os.makedirs(out_dir, exist_ok=True)
    c = report.curve
    with open(os.path.join(out_dir, "det_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "false_accepts", "false_rejects", "fa_rate", "fr_rate", "n_pos", "n_neg"))
        for t, fa, fr in zip(c.thresholds, c.false_accepts, c.false_rejects):
            w.writerow((repr(float(t)), int(fa), int(fr), _g(fa / c.n_neg), _g(fr / c.n_pos), c.n_pos, c.n_neg))
    lat = report.latency
    with open(os.path.join(out_dir, "latency.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("utterance_id", "trigger_time_ms", "peak_time_ms", "peak_score", "latency_ms", "peak_latency_ms"))
        for d, l, pl in zip(lat.detections, lat.latencies_ms, lat.peak_latencies_ms):
            w.writerow((d.utterance_id, d.trigger_time_ms, d.peak_time_ms, repr(d.peak_score), int(l), int(pl)))
    with open(os.path.join(out_dir, "operating_points.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OPERATING_COLUMNS)
        w.writerow(operating_row(report))


OPERATING_COLUMNS = (
    "target_frr",
    "threshold",
    "fa_count",
    "fa_rate",
    "fr_count",
    "achieved_frr",
    "n_detections",
    "mean_latency_ms",
    "median_latency_ms",
    "p95_latency_ms",
    "mean_peak_latency_ms",
)


def operating_row(report):
    op, lat = report.operating, report.latency
    return (
        _g(op.target_frr),
        repr(op.threshold),
        op.fa_count,
        _g(op.fa_rate),
        op.fr_count,
        _g(op.achieved_frr),
        lat.n,
        _g(lat.mean),
        _g(lat.median),
        _g(lat.p95),
        _g(lat.mean_peak),
    )
