"""Dataset types, on-disk formats, and the synthetic fingerprint generator.

The generator produces identity-labeled live/spoof impressions with exactly
known minutiae so that matching and spoof-detection behaviour can be tested
without licensed sensor data.  Everything here is a pure function of its
seeds: calling with identical parameters yields byte-identical artifacts.

Coordinate convention: x indexes columns, y indexes rows (y grows downward),
and angles are measured in radians from the +x axis toward +y, normalized
into [0, 2*pi).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, ManifestError, MinutiaeParseError

TAU = 2.0 * math.pi

LIVE = "live"
SPOOF = "spoof"
UNKNOWN = "unknown"
LIVENESS_VALUES = (LIVE, SPOOF, UNKNOWN)
SPLIT_VALUES = ("train", "val", "test")

# Impression variation limits (rigid-only; see SynthParams).
ROTATION_LIMIT_RAD = math.radians(10.0)
TRANSLATION_LIMIT_PX = 8.0


@dataclass(frozen=True)
class Minutia:
    """A ridge keypoint: sub-pixel position plus ridge direction in radians."""

    x: float
    y: float
    theta: float
    quality: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta) % TAU)
        if not 0.0 <= self.quality <= 1.0:
            raise ConfigError(f"minutia quality must be in [0, 1], got {self.quality}")


@dataclass
class FingerprintImage:
    """8-bit grayscale raster with identity, impression, and liveness labels."""

    pixels: np.ndarray
    finger_id: int
    impression_id: int
    liveness: str = UNKNOWN
    sensor_tag: str = "synthetic"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DataError("image pixels must be a non-empty 2-D uint8 array")
        if self.liveness not in LIVENESS_VALUES:
            raise DataError(f"invalid liveness {self.liveness!r}")
        if self.impression_id < 1:
            raise DataError("impression_id must be >= 1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def contains(self, m: Minutia) -> bool:
        return 0.0 <= m.x < self.width and 0.0 <= m.y < self.height


@dataclass(frozen=True)
class RigidTransform:
    """Rotation about a fixed center followed by a translation."""

    rotation: float
    tx: float
    ty: float
    cx: float
    cy: float

    def apply(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        dx = xy[..., 0] - self.cx
        dy = xy[..., 1] - self.cy
        out = np.empty_like(xy)
        out[..., 0] = c * dx - s * dy + self.cx + self.tx
        out[..., 1] = s * dx + c * dy + self.cy + self.ty
        return out

    def apply_angle(self, theta: float) -> float:
        return (theta + self.rotation) % TAU

    def inverse(self) -> "RigidTransform":
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        itx = -(c * self.tx + s * self.ty)
        ity = -(-s * self.tx + c * self.ty)
        return RigidTransform(-self.rotation, itx, ity, self.cx, self.cy)


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic generator.

    identity_seed fixes the ridge-flow field and the minutiae template;
    impression_seed adds a rigid transform plus per-impression nuisance
    (texture, brightness/contrast jitter, sensor noise) on top.  The spoof
    transform (blur + contrast remap + extra noise) is applied after the
    impression variation and never moves minutiae.
    """

    identity_seed: int
    impression_seed: int = 1
    spoof: bool = False
    ridge_frequency: float = 0.1
    image_size: int = 224
    n_minutiae: int = 8
    # Strong enough to separate the classes, gentle enough that a patch
    # descriptor stays nearly identical across the live/spoof pair (spoofing
    # alters surface statistics, not ridge geometry).
    spoof_blur_sigma: float = 0.8
    spoof_noise_std: float = 8.0
    sensor_noise_std: float = 4.0
    texture_amp: float = 0.35
    brightness_jitter: float = 0.06
    contrast_jitter: float = 0.10

    def validate(self):
        if self.ridge_frequency <= 0.0:
            raise ConfigError("ridge_frequency must be positive")
        if self.n_minutiae < 1:
            raise ConfigError("n_minutiae must be >= 1")
        if self.image_size < 128:
            raise ConfigError("image_size must be >= 128")


class _PhaseField:
    """Smooth scalar phase whose level sets are the ridges.

    phi is a unit-slope linear ramp plus a few low-order sinusoidal
    perturbations; the ridge orientation is the direction perpendicular to
    grad(phi), available analytically at any sub-pixel position.
    """

    def __init__(self, identity_seed: int, image_size: int, n_waves: int = 3):
        rng = np.random.default_rng(np.random.SeedSequence((int(identity_seed), 0xF1E1D)))
        alpha = rng.uniform(0.0, math.pi)
        self.base = np.array([math.cos(alpha), math.sin(alpha)])
        self.amp = rng.uniform(0.06, 0.14, size=n_waves)
        self.freq = rng.integers(1, 4, size=n_waves).astype(np.float64)
        beta = rng.uniform(0.0, math.pi, size=n_waves)
        self.wavedir = np.stack([np.cos(beta), np.sin(beta)], axis=1)
        self.phase = rng.uniform(0.0, TAU, size=n_waves)
        self.scale = float(image_size)

    def _wave_args(self, x, y):
        # shape (..., n_waves)
        proj = (np.multiply.outer(x, self.wavedir[:, 0])
                + np.multiply.outer(y, self.wavedir[:, 1]))
        return TAU * self.freq * proj / self.scale + self.phase

    def phi(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        args = self._wave_args(x, y)
        coef = self.amp * self.scale / (TAU * self.freq)
        return self.base[0] * x + self.base[1] * y + np.sum(coef * np.sin(args), axis=-1)

    def grad(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        args = self._wave_args(x, y)
        mod = self.amp * np.cos(args)
        gx = self.base[0] + np.sum(mod * self.wavedir[:, 0], axis=-1)
        gy = self.base[1] + np.sum(mod * self.wavedir[:, 1], axis=-1)
        return gx, gy

    def orientation(self, x, y):
        """Ridge direction (perpendicular to the phase gradient), in [0, 2*pi)."""
        gx, gy = self.grad(x, y)
        return np.arctan2(gx, -gy) % TAU


def _template_minutiae(identity_seed: int, params: SynthParams) -> np.ndarray:
    """Seeded minutiae positions in the identity's template frame, (n, 2)."""
    rng = np.random.default_rng(np.random.SeedSequence((int(identity_seed), 0xA11C)))
    size = params.image_size
    margin = 0.22 * size
    min_dist = 0.08 * size
    points: list[np.ndarray] = []
    attempts = 0
    while len(points) < params.n_minutiae:
        p = rng.uniform(margin, size - margin, size=2)
        attempts += 1
        if attempts > 200 * params.n_minutiae:
            # Crowded request: relax spacing rather than loop forever.
            min_dist *= 0.5
            attempts = 0
        if all(np.hypot(*(p - q)) >= min_dist for q in points):
            points.append(p)
    return np.stack(points)


def impression_transform(identity_seed: int, impression_seed: int,
                         image_size: int) -> RigidTransform:
    """The rigid transform the generator applies for one impression.

    Exposed so tests can verify minutiae correspondences across impressions
    against the generator's own ground truth.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence((int(identity_seed), int(impression_seed), 0x51D)))
    rot = rng.uniform(-ROTATION_LIMIT_RAD, ROTATION_LIMIT_RAD)
    tx, ty = rng.uniform(-TRANSLATION_LIMIT_PX, TRANSLATION_LIMIT_PX, size=2)
    c = (image_size - 1) / 2.0
    return RigidTransform(rot, tx, ty, c, c)


def synth_generate(params: SynthParams) -> tuple[FingerprintImage, list[Minutia]]:
    """Render one synthetic impression and its ground-truth minutiae.

    Deterministic for fixed params.  The live and spoof variants of the same
    (identity_seed, impression_seed) share every impression-stage random draw,
    so they differ only by the spoof transform and carry identical minutiae.
    """
    params.validate()
    size = params.image_size
    field_ = _PhaseField(params.identity_seed, size)
    transform = impression_transform(params.identity_seed, params.impression_seed, size)

    # Ridge pattern, evaluated analytically in the impression frame.
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    src = transform.inverse().apply(np.stack([xs, ys], axis=-1))
    phi = field_.phi(src[..., 0], src[..., 1])
    img = 0.5 * (1.0 + np.cos(TAU * params.ridge_frequency * phi))

    # Per-impression nuisance, shared between the live and spoof variants.
    rng = np.random.default_rng(
        np.random.SeedSequence((int(params.identity_seed), int(params.impression_seed), 0x1132)))
    if params.texture_amp > 0.0:
        tex = gaussian_filter(rng.standard_normal((size, size)), 2.0, mode="nearest")
        tex /= max(float(tex.std()), 1e-9)
        img = 0.5 + (img - 0.5) * (1.0 + params.texture_amp * tex)
    contrast = 1.0 + rng.uniform(-params.contrast_jitter, params.contrast_jitter)
    brightness = rng.uniform(-params.brightness_jitter, params.brightness_jitter)
    img = 0.5 + contrast * (img - 0.5) + brightness
    if params.sensor_noise_std > 0.0:
        img = img + rng.normal(0.0, params.sensor_noise_std / 255.0, size=(size, size))

    if params.spoof:
        spoof_rng = np.random.default_rng(np.random.SeedSequence(
            (int(params.identity_seed), int(params.impression_seed), 0x5F00F)))
        img = gaussian_filter(np.clip(img, 0.0, 1.0), params.spoof_blur_sigma, mode="nearest")
        img = np.clip(img, 0.0, 1.0) ** 1.3
        if params.spoof_noise_std > 0.0:
            img = img + spoof_rng.normal(0.0, params.spoof_noise_std / 255.0, size=(size, size))

    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)

    template = _template_minutiae(params.identity_seed, params)
    theta0 = field_.orientation(template[:, 0], template[:, 1])
    qual_rng = np.random.default_rng(
        np.random.SeedSequence((int(params.identity_seed), 0x0A1)))
    quality = qual_rng.uniform(0.5, 1.0, size=len(template))
    moved = transform.apply(template)
    minutiae = [
        Minutia(float(p[0]), float(p[1]), transform.apply_angle(float(t)), float(q))
        for p, t, q in zip(moved, theta0, quality)
    ]

    image = FingerprintImage(
        pixels=pixels,
        finger_id=int(params.identity_seed),
        impression_id=int(params.impression_seed),
        liveness=SPOOF if params.spoof else LIVE,
    )
    for m in minutiae:
        if not image.contains(m):
            raise DataError(
                f"generator produced out-of-bounds minutia at ({m.x:.1f}, {m.y:.1f})")
    return image, minutiae


def shift_minutiae(minutiae: list[Minutia], dx: float, dy: float) -> list[Minutia]:
    """Translate minutiae, e.g. into an ROI crop frame."""
    return [replace(m, x=m.x + dx, y=m.y + dy) for m in minutiae]


# ---------------------------------------------------------------------------
# Minutiae sidecar: one "x y theta [quality]" line per minutia.


def write_minutiae(path: str | Path, minutiae: list[Minutia]) -> None:
    lines = []
    for m in minutiae:
        lines.append(f"{m.x:.6f} {m.y:.6f} {m.theta:.6f} {m.quality:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_minutiae(path: str | Path) -> list[Minutia]:
    path = Path(path)
    minutiae = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise MinutiaeParseError(path, line_no,
                                     f"expected 3 or 4 fields, got {len(parts)}")
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise MinutiaeParseError(path, line_no, str(exc)) from None
        quality = values[3] if len(values) == 4 else 1.0
        minutiae.append(Minutia(values[0], values[1], values[2], quality))
    return minutiae


# ---------------------------------------------------------------------------
# Image files: 8-bit grayscale PNG or PGM.


def write_image_pixels(path: str | Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def read_image_pixels(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# Dataset manifest.


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    minutiae: str
    finger_id: int
    impression_id: int
    liveness: str
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    base_dir: Path = field(default_factory=Path)

    def by_split(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def image_path(self, record: ManifestRecord) -> Path:
        return self.base_dir / record.image

    def minutiae_path(self, record: ManifestRecord) -> Path:
        return self.base_dir / record.minutiae

    def load_image(self, record: ManifestRecord) -> FingerprintImage:
        return FingerprintImage(
            pixels=read_image_pixels(self.image_path(record)),
            finger_id=record.finger_id,
            impression_id=record.impression_id,
            liveness=record.liveness,
        )

    def load_minutiae(self, record: ManifestRecord) -> list[Minutia]:
        return read_minutiae(self.minutiae_path(record))


def _validate_records(records: list[ManifestRecord], base_dir: Path,
                      check_files: bool = True) -> None:
    seen: set[tuple] = set()
    for idx, r in enumerate(records):
        where = f"record {idx} (finger {r.finger_id}, impression {r.impression_id})"
        if r.liveness not in LIVENESS_VALUES:
            raise ManifestError(f"{where}: invalid liveness {r.liveness!r}")
        if r.split not in SPLIT_VALUES:
            raise ManifestError(f"{where}: invalid split {r.split!r}")
        if r.split in ("train", "val") and r.liveness == UNKNOWN:
            raise ManifestError(f"{where}: training images must be live or spoof")
        key = (r.split, r.finger_id, r.impression_id, r.liveness)
        if key in seen:
            raise ManifestError(
                f"{where}: duplicate (finger_id, impression_id, liveness) in split "
                f"{r.split!r}")
        seen.add(key)
        if check_files:
            for label, rel in (("image", r.image), ("minutiae", r.minutiae)):
                p = base_dir / rel
                if not p.is_file():
                    raise ManifestError(f"{where}: {label} file not found: {p}")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, list):
        raise ManifestError(f"{path}: manifest must be a JSON array of records")
    records = []
    for idx, obj in enumerate(raw):
        try:
            records.append(ManifestRecord(
                image=str(obj["image"]),
                minutiae=str(obj["minutiae"]),
                finger_id=int(obj["finger_id"]),
                impression_id=int(obj["impression_id"]),
                liveness=str(obj["liveness"]),
                split=str(obj["split"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: record {idx} malformed: {exc!r}") from None
    manifest = DatasetManifest(records=records, base_dir=path.parent)
    _validate_records(records, manifest.base_dir)
    return manifest


def write_manifest(records: list[ManifestRecord], path: str | Path) -> None:
    path = Path(path)
    _validate_records(records, path.parent, check_files=False)
    payload = [
        {
            "image": r.image,
            "minutiae": r.minutiae,
            "finger_id": r.finger_id,
            "impression_id": r.impression_id,
            "liveness": r.liveness,
            "split": r.split,
        }
        for r in records
    ]
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def assign_val_split(records: list[ManifestRecord], val_fraction: float = 0.2,
                     seed: int = 0) -> list[ManifestRecord]:
    """Move a stratified val_fraction of 'train' records to the 'val' split.

    Stratified by liveness with largest-remainder apportionment, so the total
    val count equals round(val_fraction * n_train) and each class is within
    one record of its proportional share.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    pool = [i for i, r in enumerate(records) if r.split == "train"]
    n_val = int(round(val_fraction * len(pool)))
    classes: dict[str, list[int]] = {}
    for i in pool:
        classes.setdefault(records[i].liveness, []).append(i)

    shares = {c: val_fraction * len(idxs) for c, idxs in classes.items()}
    counts = {c: int(math.floor(s)) for c, s in shares.items()}
    remainder = n_val - sum(counts.values())
    for c in sorted(classes, key=lambda c: (-(shares[c] - counts[c]), c))[:remainder]:
        counts[c] += 1

    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5EED)))
    out = list(records)
    for c, idxs in sorted(classes.items()):
        chosen = rng.permutation(len(idxs))[:counts[c]]
        for j in chosen:
            i = idxs[int(j)]
            out[i] = replace(records[i], split="val")
    return out


def generate_dataset(out_dir: str | Path, n_fingers: int, n_impressions: int,
                     spoof_ratio: float = 1.0, seed: int = 0,
                     test_finger_fraction: float = 0.3, val_fraction: float = 0.2,
                     params: SynthParams | None = None) -> DatasetManifest:
    """Write a full synthetic dataset (images, sidecars, manifest) to disk.

    Fingers are split identity-disjointly: the last ceil(test_finger_fraction
    * n_fingers) fingers form the test split, the rest are the train pool from
    which a stratified val fraction is drawn.  Impressions 1..k of each finger
    get a spoof counterpart, where k = round(spoof_ratio * n_impressions).
    """
    if n_fingers < 1 or n_impressions < 1:
        raise ConfigError("n_fingers and n_impressions must be >= 1")
    if not 0.0 <= spoof_ratio <= 1.0:
        raise ConfigError("spoof_ratio must be in [0, 1]")
    base = params or SynthParams(identity_seed=0)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_test = int(math.ceil(test_finger_fraction * n_fingers)) if n_fingers > 1 else 0
    n_spoof_impressions = int(round(spoof_ratio * n_impressions))

    records: list[ManifestRecord] = []
    for finger in range(1, n_fingers + 1):
        identity_seed = int(np.random.SeedSequence((int(seed), finger)).generate_state(1)[0])
        split = "test" if finger > n_fingers - n_test else "train"
        for impression in range(1, n_impressions + 1):
            variants = [False] + ([True] if impression <= n_spoof_impressions else [])
            for spoof in variants:
                p = replace(base, identity_seed=identity_seed,
                            impression_seed=impression, spoof=spoof)
                image, minutiae = synth_generate(p)
                tag = SPOOF if spoof else LIVE
                stem = f"f{finger:03d}_i{impression:02d}_{tag}"
                write_image_pixels(out_dir / f"{stem}.png", image.pixels)
                write_minutiae(out_dir / f"{stem}.min", minutiae)
                records.append(ManifestRecord(
                    image=f"{stem}.png", minutiae=f"{stem}.min",
                    finger_id=finger, impression_id=impression,
                    liveness=tag, split=split))

    records = assign_val_split(records, val_fraction=val_fraction, seed=seed)
    write_manifest(records, out_dir / "manifest.json")
    return load_manifest(out_dir / "manifest.json")
