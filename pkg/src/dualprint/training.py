"""Joint two-head training: weighted loss, gradient suppression, distillation.

The total objective is ``w_m * L_m + w_sd * L_sd`` where L_sd is mean
cross-entropy over spoof/live patch labels and L_m is per-dimension MSE
against teacher descriptors.  Each head sees only its own weighted gradient;
the shared base sees ``s_sd * w_sd * dL_sd + s_m * w_m * dL_m``, where the
s flags are -1 for a suppressed branch (identity-forward gradient scaling at
the split point, see nets.scale_grad).
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import LIVE, SPOOF, DatasetManifest, Minutia
from .errors import ConfigError, DataError, NumericalError, TeacherLookupError
from .nets import DualHeadModel
from .patches import PATCH_SIZE, extract_patch_stack, select_by_quality

LIVENESS_CLASS = {LIVE: 0, SPOOF: 1}

TEACHER_MAGIC = b"DPTEACH1"
TEACHER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    w_sd: float = 1.0
    w_m: float = 10.0

    def __post_init__(self):
        if self.w_sd < 0 or self.w_m < 0 or self.w_sd + self.w_m <= 0:
            raise ConfigError("loss weights must be nonnegative and not both zero")


@dataclass(frozen=True)
class SuppressionFlags:
    s_sd: int = 1
    s_m: int = 1

    def __post_init__(self):
        if self.s_sd not in (-1, 1) or self.s_m not in (-1, 1):
            raise ConfigError("suppression flags must be +1 or -1")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    lr_factor: float = 0.1
    lr_floor: float = 1e-8
    plateau_patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    max_epochs: int = 40
    val_fraction: float = 0.20
    minutiae_cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr_floor > self.initial_lr:
            raise ConfigError("lr_floor must not exceed initial_lr")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")


# ---------------------------------------------------------------------------
# Losses.


def liveness_targets(labels) -> torch.Tensor:
    """Class indices (live=0, spoof=1) from liveness strings or passthrough."""
    if isinstance(labels, torch.Tensor):
        return labels.long()
    try:
        return torch.tensor([LIVENESS_CLASS[l] for l in labels], dtype=torch.long)
    except KeyError as exc:
        raise DataError(f"invalid training liveness label {exc.args[0]!r}") from None


def spoof_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy (natural log) over the batch."""
    return F.cross_entropy(logits, liveness_targets(labels))


def match_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-dimension mean squared error between descriptors and targets."""
    if pred.shape != target.shape:
        raise ConfigError(
            f"descriptor shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def total_loss(l_sd, l_m, w: LossWeights):
    return w.w_m * l_m + w.w_sd * l_sd


def backward_step(model: DualHeadModel, patches: torch.Tensor, labels,
                  targets: torch.Tensor, w: LossWeights,
                  s: SuppressionFlags = SuppressionFlags()) -> dict[str, float]:
    """One zero-grad + forward + backward pass; caller steps the optimizer.

    Populates parameter gradients so that heads receive their own weighted
    gradients while the base receives the suppression-signed sum.
    """
    model.zero_grad(set_to_none=True)
    logits, desc = model(patches, s_sd=float(s.s_sd), s_m=float(s.s_m))
    l_sd = spoof_loss(logits, labels)
    l_m = match_loss(desc, targets)
    loss = total_loss(l_sd, l_m, w)
    loss.backward()
    return {"l_sd": l_sd.item(), "l_m": l_m.item(), "l_total": loss.item()}


class PlateauScheduler:
    """Reduce-on-plateau on a minimized metric.

    The learning rate shrinks by `factor` once the metric has failed to
    improve on its best value for `patience` consecutive epochs, never below
    `floor` and never upward.  `exhausted` flips once a reduction is
    requested while already at the floor.
    """

    def __init__(self, optimizer, patience: int = 10, factor: float = 0.1,
                 floor: float = 1e-8):
        if not 0.0 < factor < 1.0:
            raise ConfigError("scheduler factor must be in (0, 1)")
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.floor = floor
        self.best = math.inf
        self.bad_epochs = 0
        self.exhausted = False

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            if self.lr <= self.floor:
                self.exhausted = True
            else:
                new_lr = max(self.lr * self.factor, self.floor)
                for group in self.optimizer.param_groups:
                    group["lr"] = new_lr
        return self.lr


# ---------------------------------------------------------------------------
# Teachers.


class PseudoTeacher:
    """Deterministic descriptor oracle standing in for an external extractor.

    Each minutia patch is orientation-normalized, downsampled to a 16x16
    summary, mean-centered, passed through a fixed seeded random linear
    projection, and L2-normalized.  Centering removes the brightness
    component so targets depend on ridge structure, not exposure.
    """

    def __init__(self, descriptor_dim: int = 64, patch_size: int = PATCH_SIZE,
                 summary_size: int = 16, seed: int = 97):
        self.descriptor_dim = descriptor_dim
        self.patch_size = patch_size
        self.summary_size = summary_size
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x7EAC)))
        n_in = summary_size * summary_size
        self.projection = rng.standard_normal((descriptor_dim, n_in)) / math.sqrt(n_in)

    def descriptors(self, image, minutiae: list[Minutia],
                    key: str | None = None) -> np.ndarray:
        del key
        stack = extract_patch_stack(image, minutiae, self.patch_size,
                                    self.summary_size)
        flat = stack.reshape(len(minutiae), -1).astype(np.float64)
        flat -= flat.mean(axis=1, keepdims=True)
        vec = flat @ self.projection.T
        norms = np.linalg.norm(vec, axis=1, keepdims=True)
        out = np.where(norms > 1e-12, vec / np.maximum(norms, 1e-12), 0.0)
        out[norms[:, 0] <= 1e-12, 0] = 1.0  # featureless patch: fixed unit vector
        return out.astype(np.float32)


class FileTeacher:
    """Precomputed descriptors read from a teacher file, keyed by image path."""

    def __init__(self, table: dict[str, np.ndarray], descriptor_dim: int):
        self.table = table
        self.descriptor_dim = descriptor_dim

    def descriptors(self, image, minutiae: list[Minutia],
                    key: str | None = None) -> np.ndarray:
        if key is None:
            raise TeacherLookupError("file teacher needs the image key")
        try:
            block = self.table[key]
        except KeyError:
            raise TeacherLookupError(f"no teacher descriptors for {key!r}") from None
        if len(block) != len(minutiae):
            raise TeacherLookupError(
                f"{key!r}: teacher has {len(block)} descriptors, image has "
                f"{len(minutiae)} minutiae")
        return block


def write_teacher_file(path, table: dict[str, np.ndarray]) -> None:
    """Container: magic, uint32 header length, JSON header, float32 blocks."""
    entries = []
    blobs = io.BytesIO()
    dim = None
    for key in table:
        block = np.asarray(table[key], dtype=np.float32)
        if block.ndim != 2:
            raise ConfigError(f"teacher block for {key!r} must be 2-D")
        if dim is None:
            dim = block.shape[1]
        elif block.shape[1] != dim:
            raise ConfigError("teacher blocks disagree on descriptor_dim")
        entries.append({"image": key, "count": int(block.shape[0])})
        blobs.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    header = json.dumps({
        "format_version": TEACHER_FORMAT_VERSION,
        "descriptor_dim": int(dim or 0),
        "entries": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TEACHER_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blobs.getvalue())


def read_teacher_file(path) -> FileTeacher:
    with open(path, "rb") as fh:
        if fh.read(len(TEACHER_MAGIC)) != TEACHER_MAGIC:
            raise TeacherLookupError(f"{path}: not a teacher file (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TeacherLookupError(f"{path}: corrupt header: {exc}") from None
        if header.get("format_version") != TEACHER_FORMAT_VERSION:
            raise TeacherLookupError(
                f"{path}: unsupported teacher format {header.get('format_version')}")
        dim = int(header["descriptor_dim"])
        table = {}
        for entry in header["entries"]:
            count = int(entry["count"])
            raw = fh.read(count * dim * 4)
            if len(raw) != count * dim * 4:
                raise TeacherLookupError(f"{path}: truncated block {entry['image']!r}")
            table[entry["image"]] = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
    return FileTeacher(table, dim)


# ---------------------------------------------------------------------------
# Patch dataset assembly and the joint loop.


@dataclass
class PatchDataset:
    patches: torch.Tensor  # (N, 1, S, S)
    labels: torch.Tensor   # (N,) long
    targets: torch.Tensor  # (N, descriptor_dim)

    def __len__(self) -> int:
        return self.patches.shape[0]


def build_patch_dataset(manifest: DatasetManifest, split: str, teacher,
                        input_size: int,
                        cap: int | None = None) -> PatchDataset:
    """Extract every patch of a split once, with labels and teacher targets."""
    records = manifest.by_split(split)
    if not records:
        raise DataError(f"manifest has no records in split {split!r}")
    patches, labels, targets = [], [], []
    for record in records:
        image = manifest.load_image(record)
        minutiae = select_by_quality(manifest.load_minutiae(record), cap)
        if not minutiae:
            raise DataError(
                f"{record.image}: training images need at least one minutia")
        stack = extract_patch_stack(image, minutiae, PATCH_SIZE, input_size)
        patches.append(stack)
        labels.extend([LIVENESS_CLASS[record.liveness]] * len(minutiae))
        targets.append(teacher.descriptors(image, minutiae, key=record.image))
    return PatchDataset(
        patches=torch.from_numpy(np.concatenate(patches)).unsqueeze(1),
        labels=torch.tensor(labels, dtype=torch.long),
        targets=torch.from_numpy(np.concatenate(targets)).float(),
    )


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_lsd: float
    train_lm: float
    train_total: float
    val_lsd: float
    val_lm: float
    val_total: float


HISTORY_COLUMNS = ("epoch", "lr", "train_lsd", "train_lm", "train_total",
                   "val_lsd", "val_lm", "val_total")


def write_history(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_lsd),
                             repr(row.train_lm), repr(row.train_total),
                             repr(row.val_lsd), repr(row.val_lm),
                             repr(row.val_total)])


def _eval_losses(model: DualHeadModel, data: PatchDataset, w: LossWeights,
                 batch_size: int) -> tuple[float, float, float]:
    model.eval()
    sums = np.zeros(2)
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            logits, desc = model(data.patches[sl])
            n = logits.shape[0]
            sums[0] += float(spoof_loss(logits, data.labels[sl])) * n
            sums[1] += float(match_loss(desc, data.targets[sl])) * n
    l_sd, l_m = (sums / len(data)).tolist()
    return l_sd, l_m, float(total_loss(l_sd, l_m, w))


def train_joint(manifest: DatasetManifest, teacher, model: DualHeadModel,
                w: LossWeights = LossWeights(),
                s: SuppressionFlags = SuppressionFlags(),
                cfg: TrainConfig = TrainConfig(),
                history_path=None) -> tuple[DualHeadModel, list[EpochStats]]:
    """Optimize the joint objective; returns the best-validation checkpoint.

    The plateau scheduler and the checkpoint selection track the validation
    value of the quantity the base network actually descends,
    ``s_sd*w_sd*L_sd + s_m*w_m*L_m``; with nothing suppressed that is exactly
    the logged val_total.  History rows always log the unsigned weighted
    total.

    Fully deterministic given cfg.seed: batch order comes from a seeded
    permutation per epoch and all torch ops run on CPU.
    """
    train_data = build_patch_dataset(manifest, "train", teacher,
                                     model.spec.input_size, cfg.minutiae_cap)
    val_data = build_patch_dataset(manifest, "val", teacher,
                                   model.spec.input_size, cfg.minutiae_cap)

    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr,
                                 betas=(cfg.beta1, cfg.beta2))
    scheduler = PlateauScheduler(optimizer, patience=cfg.plateau_patience,
                                 factor=cfg.lr_factor, floor=cfg.lr_floor)
    history: list[EpochStats] = []
    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())

    n = len(train_data)
    for epoch in range(1, cfg.max_epochs + 1):
        lr_now = scheduler.lr
        order = np.random.default_rng(
            np.random.SeedSequence((int(cfg.seed), epoch, 0xBA7C))).permutation(n)
        model.train()
        sums = np.zeros(2)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            losses = backward_step(model, train_data.patches[idx],
                                   train_data.labels[idx],
                                   train_data.targets[idx], w, s)
            if not all(math.isfinite(v) for v in losses.values()):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}: "
                    f"{losses}")
            optimizer.step()
            sums += np.array([losses["l_sd"], losses["l_m"]]) * len(idx)
        train_lsd, train_lm = sums / n
        train_total = float(total_loss(train_lsd, train_lm, w))

        val_lsd, val_lm, val_total = _eval_losses(model, val_data, w, cfg.batch_size)
        if not math.isfinite(val_total):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochStats(epoch, lr_now, float(train_lsd), float(train_lm),
                                  train_total, val_lsd, val_lm, val_total))
        val_objective = s.s_sd * w.w_sd * val_lsd + s.s_m * w.w_m * val_lm
        if val_objective < best_val:
            best_val = val_objective
            best_state = copy.deepcopy(model.state_dict())
        scheduler.step(val_objective)
        if scheduler.exhausted:
            break

    model.load_state_dict(best_state)
    model.eval()
    if history_path is not None:
        write_history(history, history_path)
    return model, history


# ---------------------------------------------------------------------------
# Feature-probe experiment: shallow spoof head on frozen trunk features.


@dataclass(frozen=True)
class ProbeConfig:
    channels: int | None = None  # None: inferred from the features
    holdout_fraction: float = 0.25
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


def build_probe_head(channels: int) -> nn.Sequential:
    """Grouped-conv spoof probe; exact widths for the 288-channel probe point,
    proportional widths elsewhere."""
    w1, w2 = (512, 1024) if channels == 288 else (2 * channels, 4 * channels)

    def dw(c, stride):
        return [nn.Conv2d(c, c, 3, stride, 1, groups=c, bias=False),
                nn.BatchNorm2d(c), nn.ReLU(inplace=True)]

    def pw(c_in, c_out):
        return [nn.Conv2d(c_in, c_out, 1, bias=False),
                nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]

    return nn.Sequential(
        *dw(channels, 1), *pw(channels, w1), *dw(w1, 2), *pw(w1, w2), *dw(w2, 2),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(w2, 2))


def train_probe(features: torch.Tensor, labels: torch.Tensor,
                cfg: ProbeConfig = ProbeConfig()) -> tuple[nn.Module, float]:
    """Train the probe on frozen features; returns (probe, held-out ACE %)."""
    if features.dim() != 4:
        raise ConfigError("probe features must be (N, C, H, W)")
    channels = features.shape[1]
    if cfg.channels is not None and cfg.channels != channels:
        raise ConfigError(
            f"probe configured for {cfg.channels} channels, features have {channels}")
    labels = liveness_targets(labels)
    if len(labels) != features.shape[0]:
        raise ConfigError("features and labels must align")

    torch.manual_seed(cfg.seed)
    probe = build_probe_head(channels)
    n = features.shape[0]
    order = np.random.default_rng(
        np.random.SeedSequence((int(cfg.seed), 0x9806))).permutation(n)
    n_hold = max(1, int(round(cfg.holdout_fraction * n)))
    hold_idx = torch.from_numpy(order[:n_hold].copy())
    fit_idx = torch.from_numpy(order[n_hold:].copy())
    if len(fit_idx) == 0:
        raise ConfigError("holdout_fraction leaves no training features")

    optimizer = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
    probe.train()
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng(
            np.random.SeedSequence((int(cfg.seed), epoch, 0x9807))).permutation(
                len(fit_idx))
        for start in range(0, len(fit_idx), cfg.batch_size):
            idx = fit_idx[torch.from_numpy(perm[start:start + cfg.batch_size].copy())]
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(probe(features[idx]), labels[idx])
            loss.backward()
            optimizer.step()

    probe.eval()
    with torch.no_grad():
        probs = torch.softmax(probe(features[hold_idx]), dim=1)[:, 1].numpy()
    truth = labels[hold_idx].numpy()
    live_scores = probs[truth == 0]
    spoof_scores = probs[truth == 1]
    from .metrics import pad_errors

    _, _, ace = pad_errors(live_scores.tolist(), spoof_scores.tolist())
    return probe, ace
