"""Gradient checks, oracles and the ablation harness."""
from .gradcheck import (
    DEFAULT_TOL,
    SCOPES,
    GradCheckReport,
    LeafError,
    finite_diff_gradcheck,
    gradcheck_suite,
    tiny_model_config,
)
from .ablation import ABLATION_VARIANTS, AblationReport, AblationRow, AblationVariant, run_ablation
from .equivalence import (
    EquivalenceReport,
    FusionProbeReport,
    fusion_gradient_probe,
    swin_equivalence_check,
)
from .oracles import (
    attention_oracle,
    closed_form_param_count,
    conv_locality_probe,
    expected_stage_shapes,
    shifted_cross_region_max,
)

__all__ = [
    "ABLATION_VARIANTS", "DEFAULT_TOL", "SCOPES", "AblationReport", "AblationRow",
    "AblationVariant", "EquivalenceReport", "FusionProbeReport", "GradCheckReport", "LeafError",
    "attention_oracle", "closed_form_param_count", "conv_locality_probe",
    "expected_stage_shapes", "finite_diff_gradcheck", "fusion_gradient_probe",
    "gradcheck_suite", "run_ablation", "shifted_cross_region_max", "swin_equivalence_check",
    "tiny_model_config",
]
