"""Image-level decisions: descriptor matching and spoofness aggregation.

Fingerprint comparison uses minutiae templates (position, direction,
descriptor per minutia).  Candidate correspondences are mutual nearest
neighbors in cosine similarity; a rigid-consistency consensus then discards
geometrically implausible pairs, and the final score is the mean kept
similarity damped for short templates.  Scores are symmetrized by averaging
both comparison directions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .data import TAU, Minutia
from .errors import ConfigError, DataError, ModelFormatError
from .nets import DualHeadModel
from .patches import PATCH_SIZE, extract_patch_stack, select_by_quality

TEMPLATE_MAGIC = b"DPTMPL01"
TEMPLATE_FORMAT_VERSION = 1


@dataclass
class Template:
    """Per-image matching template: aligned minutiae and raw descriptors."""

    minutiae: list[Minutia]
    descriptors: np.ndarray  # (n, descriptor_dim) float32
    finger_id: int = -1
    impression_id: int = -1

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] == 0:
            raise DataError("template needs at least one descriptor")
        if len(self.minutiae) != self.descriptors.shape[0]:
            raise DataError("template minutiae and descriptors must align")

    def __len__(self) -> int:
        return self.descriptors.shape[0]


@dataclass(frozen=True)
class MatchParams:
    tau_sim: float = 0.6
    r_tol: float = 12.0
    ang_tol_deg: float = 20.0
    kappa: int = 8
    max_hypotheses: int = 16
    seed: int = 0


@dataclass
class MatchResult:
    score: float
    correspondences: list[tuple[int, int, float]]


def descriptor_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; descriptors are normalized here, not at extraction."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError("descriptors must have equal dimension")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity undefined for a zero descriptor")
    return float(a @ b / (na * nb))


def _normalized(desc: np.ndarray) -> np.ndarray:
    d = np.asarray(desc, dtype=np.float64)
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DataError("cosine similarity undefined for a zero descriptor")
    return d / norms


def _angle_diff(x: float) -> float:
    d = abs(x) % TAU
    return min(d, TAU - d)


def _mutual_candidates(sims: np.ndarray, tau: float) -> list[tuple[int, int, float]]:
    best_b = sims.argmax(axis=1)
    best_a = sims.argmax(axis=0)
    out = []
    for i, j in enumerate(best_b):
        if best_a[j] == i and sims[i, j] >= tau:
            out.append((int(i), int(j), float(sims[i, j])))
    return out


def _direction_score(a: Template, b: Template,
                     params: MatchParams) -> tuple[float, list[tuple[int, int, float]]]:
    sims = _normalized(a.descriptors) @ _normalized(b.descriptors).T
    candidates = _mutual_candidates(sims, params.tau_sim)
    if not candidates:
        return 0.0, []

    pa = np.array([[m.x, m.y] for m in a.minutiae])
    pb = np.array([[m.x, m.y] for m in b.minutiae])
    ta = np.array([m.theta for m in a.minutiae])
    tb = np.array([m.theta for m in b.minutiae])

    if len(candidates) <= params.max_hypotheses:
        hypothesis_ids = range(len(candidates))
    else:
        rng = np.random.default_rng(
            np.random.SeedSequence((int(params.seed), len(candidates), 0xC05E)))
        hypothesis_ids = sorted(
            rng.choice(len(candidates), size=params.max_hypotheses, replace=False))

    ang_tol = math.radians(params.ang_tol_deg)
    best: tuple[int, float, list] = (-1, -1.0, [])
    for h in hypothesis_ids:
        i0, j0, _ = candidates[h]
        phi = tb[j0] - ta[i0]
        c, s = math.cos(phi), math.sin(phi)
        rot = np.array([[c, -s], [s, c]])
        t = pb[j0] - rot @ pa[i0]
        kept = []
        for i, j, sim in candidates:
            residual = rot @ pa[i] + t - pb[j]
            if math.hypot(residual[0], residual[1]) >= params.r_tol:
                continue
            if _angle_diff(ta[i] + phi - tb[j]) >= ang_tol:
                continue
            kept.append((i, j, sim))
        key = (len(kept), sum(k[2] for k in kept))
        if key > (best[0], best[1]):
            best = (len(kept), key[1], kept)

    kept = best[2]
    if not kept:
        return 0.0, []
    mean_sim = sum(k[2] for k in kept) / len(kept)
    score = mean_sim * min(1.0, len(kept) / params.kappa)
    return float(score), kept


def match_templates(a: Template, b: Template,
                    params: MatchParams = MatchParams()) -> MatchResult:
    """Symmetric template comparison; score in [0, 1], deterministic per seed."""
    score_ab, kept = _direction_score(a, b, params)
    score_ba, _ = _direction_score(b, a, params)
    score = (score_ab + score_ba) / 2.0
    return MatchResult(score=float(score), correspondences=kept)


def image_spoof_score(patch_probs) -> float:
    """Arithmetic mean of per-patch spoof probabilities."""
    probs = list(patch_probs)
    if not probs:
        raise DataError("cannot aggregate an empty list of patch scores")
    return float(sum(probs) / len(probs))


def classify_liveness(score: float, threshold: float = 0.5) -> str:
    """Spoof iff score >= threshold (ties classify as spoof)."""
    if not 0.0 <= score <= 1.0:
        raise ConfigError(f"spoofness score must be in [0, 1], got {score}")
    return "spoof" if score >= threshold else "live"


# ---------------------------------------------------------------------------
# Model-driven extraction.


def analyze_image(model: DualHeadModel, image, minutiae: list[Minutia],
                  cap: int | None = None,
                  batch_size: int = 64) -> tuple[Template, float]:
    """One shared-base pass per patch batch: template plus image spoof score."""
    kept = select_by_quality(minutiae, cap)
    stack = extract_patch_stack(image, kept, PATCH_SIZE, model.spec.input_size)
    x = torch.from_numpy(stack).unsqueeze(1)
    model.eval()
    descriptors, probs = [], []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits, desc = model(x[start:start + batch_size])
            descriptors.append(desc.numpy())
            probs.extend(model.spoof_probabilities(logits).tolist())
    finger_id = getattr(image, "finger_id", -1)
    impression_id = getattr(image, "impression_id", -1)
    template = Template(kept, np.concatenate(descriptors),
                        finger_id=finger_id, impression_id=impression_id)
    return template, image_spoof_score(probs)


def extract_template(model: DualHeadModel, image, minutiae: list[Minutia],
                     cap: int | None = None) -> Template:
    template, _ = analyze_image(model, image, minutiae, cap)
    return template


# ---------------------------------------------------------------------------
# Template file: magic, uint32 header length, JSON header, float32 block.


def write_template(template: Template, path) -> None:
    header = json.dumps({
        "format_version": TEMPLATE_FORMAT_VERSION,
        "finger_id": template.finger_id,
        "impression_id": template.impression_id,
        "count": len(template),
        "descriptor_dim": int(template.descriptors.shape[1]),
        "minutiae": [[m.x, m.y, m.theta, m.quality] for m in template.minutiae],
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TEMPLATE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(template.descriptors, dtype="<f4").tobytes())


def read_template(path) -> Template:
    with open(path, "rb") as fh:
        if fh.read(len(TEMPLATE_MAGIC)) != TEMPLATE_MAGIC:
            raise ModelFormatError(f"{path}: not a template file (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"{path}: corrupt header: {exc}") from None
        if header.get("format_version") != TEMPLATE_FORMAT_VERSION:
            raise ModelFormatError(
                f"{path}: unsupported template format {header.get('format_version')}")
        count = int(header["count"])
        dim = int(header["descriptor_dim"])
        raw = fh.read(count * dim * 4)
        if len(raw) != count * dim * 4:
            raise ModelFormatError(f"{path}: truncated descriptor block")
        descriptors = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
    minutiae = [Minutia(x, y, theta, q) for x, y, theta, q in header["minutiae"]]
    return Template(minutiae, descriptors,
                    finger_id=int(header["finger_id"]),
                    impression_id=int(header["impression_id"]))
