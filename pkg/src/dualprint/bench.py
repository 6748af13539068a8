"""Pipeline efficiency comparison: series vs parallel vs joint inference.

The two-network baseline instantiates the dual-head model's base+head stacks
as standalone networks with identical weights, so parameter, byte, and FLOP
comparisons measure only the architectural difference (one shared base pass
versus two).  Minutiae matching time is excluded throughout; the workload is
descriptor/spoofness extraction for a fixed number of minutiae per image.
"""

from __future__ import annotations

import json
import os
import platform
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import _patch_numpy
from .errors import ConfigError
from .nets import (BackboneSpec, DualHeadConfig, DualHeadModel, SingleHeadNet,
                   build_model, count_params, get_backbone, save_model,
                   write_state_container)

PIPELINE_MODES = ("series", "parallel", "joint")


@dataclass(frozen=True)
class Workload:
    n_images: int = 4
    minutiae_per_image: int = 49
    repetitions: int = 5
    warmup: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_images, self.minutiae_per_image, self.repetitions) < 1:
            raise ConfigError("workload counts must be >= 1")


def build_reference_pipelines(spec: BackboneSpec | str, config: DualHeadConfig,
                              seed: int = 0) -> dict:
    """The joint model plus weight-sharing single-head baselines."""
    joint = build_model(spec, config, seed)
    return {
        "joint": joint,
        "pad": SingleHeadNet(joint, "spoof"),
        "descriptor": SingleHeadNet(joint, "match"),
    }


def _workload_batches(spec: BackboneSpec, workload: Workload) -> list[torch.Tensor]:
    gen = torch.Generator().manual_seed(workload.seed)
    size = spec.input_size
    return [torch.rand(workload.minutiae_per_image, 1, size, size, generator=gen)
            for _ in range(workload.n_images)]


def _time_pass(models: list[torch.nn.Module], batches: list[torch.Tensor],
               repetitions: int, warmup: int) -> list[list[float]]:
    """Per-model per-repetition wall time for one pass over all images."""
    for model in models:
        model.eval()
    times = [[] for _ in models]
    with torch.no_grad():
        for rep in range(warmup + repetitions):
            for k, model in enumerate(models):
                t0 = time.perf_counter()
                for batch in batches:
                    model(batch)
                elapsed = time.perf_counter() - t0
                if rep >= warmup:
                    times[k].append(elapsed)
    return times


def measure_latency(mode: str, models: dict, workload: Workload = Workload(),
                    threads: int | None = 1) -> dict:
    """Wall-clock latency per image for one pipeline mode.

    series = PAD pass + descriptor pass; parallel = max of the two (models
    resident simultaneously); joint = the single dual-head pass.
    """
    if mode not in PIPELINE_MODES:
        raise ConfigError(f"unknown pipeline mode {mode!r}")
    if threads is not None:
        torch.set_num_threads(threads)
    spec = models["joint"].spec
    batches = _workload_batches(spec, workload)
    n = workload.n_images

    if mode == "joint":
        (joint_times,) = _time_pass([models["joint"]], batches,
                                    workload.repetitions, workload.warmup)
        per_image = [t / n for t in joint_times]
        components = {}
    else:
        pad_times, desc_times = _time_pass(
            [models["pad"], models["descriptor"]], batches,
            workload.repetitions, workload.warmup)
        combine = (lambda a, b: a + b) if mode == "series" else max
        per_image = [combine(a, b) / n for a, b in zip(pad_times, desc_times)]
        components = {
            "pad_ms_per_image": [1000 * t / n for t in pad_times],
            "descriptor_ms_per_image": [1000 * t / n for t in desc_times],
        }

    ms = [1000 * t for t in per_image]
    return {
        "mode": mode,
        "latency_ms_per_image_mean": statistics.fmean(ms),
        "latency_ms_per_image_std": statistics.pstdev(ms) if len(ms) > 1 else 0.0,
        "samples_ms": ms,
        **components,
    }


def _cpu_model() -> str:
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def run_benchmark(spec: BackboneSpec | str, config: DualHeadConfig,
                  workload: Workload = Workload(), seed: int = 0,
                  threads: int | None = 1, scratch_dir=None) -> dict:
    """All three modes on one host, with parameter and byte accounting."""
    if isinstance(spec, str):
        spec = get_backbone(spec)
    models = build_reference_pipelines(spec, config, seed)
    joint = models["joint"]

    counts = count_params(joint)
    series_params = 2 * counts["base"] + counts["sd_head"] + counts["match_head"]

    with tempfile.TemporaryDirectory(dir=scratch_dir) as tmp:
        tmp = Path(tmp)
        joint_bytes = save_model(joint, tmp / "joint.dpn")
        series_bytes = 0
        for name in ("pad", "descriptor"):
            series_bytes += write_state_container(
                tmp / f"{name}.dpn", {"kind": "single_head", "role": name,
                                      "variant": spec.variant},
                models[name].state_dict())

    results = {mode: measure_latency(mode, models, workload, threads)
               for mode in PIPELINE_MODES}
    series_ms = results["series"]["latency_ms_per_image_mean"]
    joint_ms = results["joint"]["latency_ms_per_image_mean"]

    report = {
        "machine": {
            "cpu_model": _cpu_model(),
            "cores": torch.get_num_threads() if threads else None,
            "available_cores": os.cpu_count(),
        },
        "workload": {**asdict(workload),
                     "batch_size": workload.minutiae_per_image},
        "spec": {"variant": spec.variant, "split_point": config.split_point,
                 "input_size": spec.input_size},
        "modes": {
            "joint": {**results["joint"], "params_total": counts["total"],
                      "serialized_bytes": joint_bytes},
            "series": {**results["series"], "params_total": series_params,
                       "serialized_bytes": series_bytes},
            "parallel": {**results["parallel"], "params_total": series_params,
                         "serialized_bytes": series_bytes,
                         "resident_params": series_params},
        },
        "relative": {
            "speedup_pct": 100.0 * (series_ms - joint_ms) / series_ms,
            "param_reduction_pct":
                100.0 * (series_params - counts["total"]) / series_params,
            "bytes_reduction_pct":
                100.0 * (series_bytes - joint_bytes) / series_bytes,
        },
        "mobile_quantized": None,  # out-of-scope section kept in the schema
    }
    return report


def emit_bench_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# Patch kernel micro-benchmark: compiled extension vs NumPy fallback.


def bench_kernels(image_size: int = 224, n_patches: int = 49,
                  patch_size: int = 96, out_size: int = 224,
                  repetitions: int = 3, seed: int = 0) -> dict:
    """Compare the two patch-sampling backends on identical inputs."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBE7C)))
    image = rng.random((image_size, image_size))
    margin = patch_size / 2
    centers = rng.uniform(margin, image_size - margin, size=(n_patches, 2))
    thetas = rng.uniform(0.0, 2 * np.pi, size=n_patches)

    backends = {"numpy": _patch_numpy.sample_patches}
    try:
        from . import _patchkern
        backends["cython"] = _patchkern.sample_patches
    except ImportError:
        pass

    results = {}
    outputs = {}
    for name, fn in backends.items():
        fn(image, centers[:2], thetas[:2], patch_size, out_size)  # warm-up
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            out = fn(image, centers, thetas, patch_size, out_size)
            times.append(time.perf_counter() - t0)
        outputs[name] = out
        results[name] = {
            "ms_mean": 1000 * statistics.fmean(times),
            "ms_best": 1000 * min(times),
        }
    report = {
        "workload": {"image_size": image_size, "n_patches": n_patches,
                     "patch_size": patch_size, "out_size": out_size,
                     "repetitions": repetitions},
        "backends": results,
    }
    if "cython" in results:
        report["cython_speedup_x"] = (results["numpy"]["ms_best"]
                                      / results["cython"]["ms_best"])
        report["max_abs_diff"] = float(
            np.abs(outputs["numpy"] - outputs["cython"]).max())
    return report
