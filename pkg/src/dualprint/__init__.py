"""Joint fingerprint presentation-attack detection and minutiae matching."""

__version__ = "0.1.0"

from .data import (DatasetManifest, FingerprintImage, ManifestRecord, Minutia,
                   RigidTransform, SynthParams, generate_dataset,
                   load_manifest, read_minutiae, synth_generate,
                   write_minutiae)
from .errors import (BlankImageError, ConfigError, DataError, DualPrintError,
                     ManifestError, MinutiaeParseError, ModelFormatError,
                     NumericalError, TeacherLookupError)
from .matching import (MatchParams, MatchResult, Template, analyze_image,
                       classify_liveness, extract_template, image_spoof_score,
                       match_templates, read_template, write_template)
from .metrics import (EvalReport, ScoreSet, e_fake_at_e_live,
                      enumerate_fvc_pairs, evaluate_matching, evaluate_pad,
                      frr_at_far, pad_errors)
from .nets import (BackboneSpec, DualHeadConfig, DualHeadModel, SingleHeadNet,
                   build_model, count_params, extract_intermediate,
                   get_backbone, load_model, save_model)
from .patches import (Patch, RoiBox, active_backend, extract_all_patches,
                      extract_patch, extract_patch_stack, extract_roi,
                      select_by_quality)
from .training import (FileTeacher, LossWeights, PlateauScheduler,
                       PseudoTeacher, SuppressionFlags, TrainConfig,
                       match_loss, spoof_loss, total_loss, train_joint,
                       train_probe)

__all__ = [
    "__version__",
    "BlankImageError", "ConfigError", "DataError", "DualPrintError",
    "ManifestError", "MinutiaeParseError", "ModelFormatError",
    "NumericalError", "TeacherLookupError",
    "DatasetManifest", "FingerprintImage", "ManifestRecord", "Minutia",
    "RigidTransform", "SynthParams", "generate_dataset", "load_manifest",
    "read_minutiae", "synth_generate", "write_minutiae",
    "Patch", "RoiBox", "active_backend", "extract_all_patches",
    "extract_patch", "extract_patch_stack", "extract_roi",
    "select_by_quality",
    "BackboneSpec", "DualHeadConfig", "DualHeadModel", "SingleHeadNet",
    "build_model", "count_params", "extract_intermediate", "get_backbone",
    "load_model", "save_model",
    "FileTeacher", "LossWeights", "PlateauScheduler", "PseudoTeacher",
    "SuppressionFlags", "TrainConfig", "match_loss", "spoof_loss",
    "total_loss", "train_joint", "train_probe",
    "MatchParams", "MatchResult", "Template", "analyze_image",
    "classify_liveness", "extract_template", "image_spoof_score",
    "match_templates", "read_template", "write_template",
    "EvalReport", "ScoreSet", "e_fake_at_e_live", "enumerate_fvc_pairs",
    "evaluate_matching", "evaluate_pad", "frr_at_far", "pad_errors",
]
