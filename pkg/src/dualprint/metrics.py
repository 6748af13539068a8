"""Biometric error rates, verification protocols, and score exports.

Threshold conventions (documented and oracle-tested):
  - PAD: a sample is called spoof when its score >= threshold.
  - Verification: a pair is accepted when its score >= threshold; the
    FAR-targeted threshold is the smallest observed imposter score meeting
    the target, or just above the largest imposter score when no observed
    threshold does (that operating point has FAR = 0).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LIVE, SPOOF, DatasetManifest
from .errors import ConfigError, DataError
from .matching import MatchParams, analyze_image, match_templates
from .nets import DualHeadModel


@dataclass
class ScoreSet:
    """Two score populations; `roles` names them for exports."""

    genuine_scores: list[float]
    imposter_scores: list[float]
    roles: tuple[str, str] = ("genuine", "imposter")


@dataclass
class EvalReport:
    """Metric bundle; PAD fields or matching fields may be absent (None)."""

    threshold: float = 0.5
    apcer: float | None = None
    bpcer: float | None = None
    acer: float | None = None
    frr_at_far: dict[str, float] = field(default_factory=dict)
    e_fake_at_e_live: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "threshold": self.threshold,
            "apcer": self.apcer,
            "bpcer": self.bpcer,
            "acer": self.acer,
            "frr_at_far": self.frr_at_far,
            "e_fake_at_e_live": self.e_fake_at_e_live,
            "counts": self.counts,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _check_scores(name: str, scores) -> np.ndarray:
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.size == 0:
        raise DataError(f"{name} scores are empty; rate is undefined")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} scores contain non-finite values")
    return arr


def pad_errors(live_scores, spoof_scores,
               threshold: float = 0.5) -> tuple[float, float, float]:
    """APCER, BPCER, ACER percentages at a fixed spoofness threshold."""
    live = _check_scores("live", live_scores)
    spoof = _check_scores("spoof", spoof_scores)
    apcer = 100.0 * float(np.count_nonzero(spoof < threshold)) / spoof.size
    bpcer = 100.0 * float(np.count_nonzero(live >= threshold)) / live.size
    return apcer, bpcer, (apcer + bpcer) / 2.0


def frr_at_far(genuine_scores, imposter_scores, far_target: float) -> float:
    """FRR percent at the loosest observed threshold meeting the FAR target.

    Thresholds are drawn from the imposter scores themselves (no
    interpolation); far_target = 0 selects the operating point just above
    the largest imposter score, where no false accepts occur.
    """
    genuine = _check_scores("genuine", genuine_scores)
    imposter = _check_scores("imposter", imposter_scores)
    if far_target < 0.0:
        raise ConfigError("far_target must be >= 0")
    threshold = None
    for t in np.unique(imposter):  # ascending
        far = 100.0 * float(np.count_nonzero(imposter >= t)) / imposter.size
        if far <= far_target:
            threshold = float(t)
            break
    if threshold is None:
        threshold = float(np.nextafter(imposter.max(), np.inf))
    return 100.0 * float(np.count_nonzero(genuine < threshold)) / genuine.size


def e_fake_at_e_live(live_scores, spoof_scores, e_live: float = 0.1) -> float:
    """Percent of spoofs misclassified when at most e_live% of lives are.

    Same sweep as frr_at_far with roles mapped: live samples play the
    imposter role (false positives), spoofs the genuine role.
    """
    return frr_at_far(spoof_scores, live_scores, e_live)


def enumerate_fvc_pairs(n_fingers: int, n_impressions: int):
    """Verification protocol pairs over a fingers x impressions grid.

    Genuine: every unordered impression pair within each finger.  Imposter:
    first impression of each finger against first impression of every other
    finger.
    """
    if n_fingers < 1 or n_impressions < 1:
        raise ConfigError("n_fingers and n_impressions must be >= 1")
    genuine = [((f, i), (f, j))
               for f in range(1, n_fingers + 1)
               for i in range(1, n_impressions + 1)
               for j in range(i + 1, n_impressions + 1)]
    imposter = [((f1, 1), (f2, 1))
                for f1 in range(1, n_fingers + 1)
                for f2 in range(f1 + 1, n_fingers + 1)]
    return genuine, imposter


# ---------------------------------------------------------------------------
# Model-level evaluation on a manifest.


def _test_images(manifest: DatasetManifest, split: str):
    records = manifest.by_split(split)
    if not records:
        raise DataError(f"manifest has no records in split {split!r}")
    return records


def evaluate_pad(model: DualHeadModel, manifest: DatasetManifest,
                 split: str = "test", threshold: float = 0.5,
                 cap: int | None = None) -> tuple[EvalReport, ScoreSet]:
    """Image-level spoofness scoring and PAD error rates on one split."""
    live, spoof = [], []
    for record in _test_images(manifest, split):
        if record.liveness not in (LIVE, SPOOF):
            continue
        image = manifest.load_image(record)
        minutiae = manifest.load_minutiae(record)
        _, score = analyze_image(model, image, minutiae, cap)
        (live if record.liveness == LIVE else spoof).append(score)
    apcer, bpcer, acer = pad_errors(live, spoof, threshold)
    report = EvalReport(threshold=threshold, apcer=apcer, bpcer=bpcer, acer=acer,
                        counts={"live": len(live), "spoof": len(spoof)})
    return report, ScoreSet(live, spoof, roles=("live", "spoof"))


def evaluate_matching(model: DualHeadModel, manifest: DatasetManifest,
                      far_targets: tuple[float, ...] = (1.0, 0.1, 0.0),
                      split: str = "test", cap: int | None = None,
                      params: MatchParams = MatchParams()
                      ) -> tuple[EvalReport, ScoreSet]:
    """Template every live image once, score all protocol pairs.

    Genuine pairs are all impression pairs within a finger; imposter pairs
    compare the first impression of every finger pair.
    """
    templates = {}
    for record in _test_images(manifest, split):
        if record.liveness != LIVE:
            continue
        image = manifest.load_image(record)
        minutiae = manifest.load_minutiae(record)
        templates[(record.finger_id, record.impression_id)] = \
            analyze_image(model, image, minutiae, cap)[0]
    fingers: dict[int, list[int]] = {}
    for finger_id, impression_id in sorted(templates):
        fingers.setdefault(finger_id, []).append(impression_id)
    if len(fingers) < 2 or any(len(v) < 2 for v in fingers.values()):
        raise DataError(
            "matching protocol needs >= 2 fingers with >= 2 live impressions each")

    genuine, imposter = [], []
    for finger_id, impressions in sorted(fingers.items()):
        for a in range(len(impressions)):
            for b in range(a + 1, len(impressions)):
                genuine.append(match_templates(
                    templates[(finger_id, impressions[a])],
                    templates[(finger_id, impressions[b])], params).score)
    ids = sorted(fingers)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            imposter.append(match_templates(
                templates[(ids[a], fingers[ids[a]][0])],
                templates[(ids[b], fingers[ids[b]][0])], params).score)

    report = EvalReport(
        frr_at_far={repr(t): frr_at_far(genuine, imposter, t) for t in far_targets},
        counts={"genuine_pairs": len(genuine), "imposter_pairs": len(imposter),
                "templates": len(templates)})
    return report, ScoreSet(genuine, imposter)


# ---------------------------------------------------------------------------
# CSV exports for external plotting.


def export_histogram(score_set: ScoreSet, bins: int, path) -> None:
    """Shared-edge histogram of both populations: bin_lo, bin_hi, counts."""
    a = _check_scores(score_set.roles[0], score_set.genuine_scores)
    b = _check_scores(score_set.roles[1], score_set.imposter_scores)
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts_a, _ = np.histogram(a, bins=edges)
    counts_b, _ = np.histogram(b, bins=edges)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", score_set.roles[0], score_set.roles[1]])
        for k in range(bins):
            writer.writerow([repr(float(edges[k])), repr(float(edges[k + 1])),
                             int(counts_a[k]), int(counts_b[k])])


def export_embeddings(model: DualHeadModel, manifest: DatasetManifest, path,
                      split: str | None = None, cap: int | None = None) -> int:
    """One CSV row per patch: identity, liveness, descriptor values.

    Returns the number of data rows written.
    """
    records = manifest.records if split is None else manifest.by_split(split)
    if not records:
        raise DataError("no records to export")
    dim = None
    n_rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for record in records:
            image = manifest.load_image(record)
            minutiae = manifest.load_minutiae(record)
            template, _ = analyze_image(model, image, minutiae, cap)
            if dim is None:
                dim = template.descriptors.shape[1]
                writer.writerow(["finger_id", "impression_id", "liveness"]
                                + [f"d{i}" for i in range(dim)])
            for row in template.descriptors:
                writer.writerow([record.finger_id, record.impression_id,
                                 record.liveness] + [repr(float(v)) for v in row])
                n_rows += 1
    return n_rows
