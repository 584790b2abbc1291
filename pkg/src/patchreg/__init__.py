"""Learned patch-similarity metrics for multimodal 3D rigid registration.

The package learns a deep similarity metric from roughly aligned volume
pairs (symmetrization and dithering make the metric unbiased and unimodal
despite misaligned training data) and registers volumes by maximizing the
metric, or a normalized-mutual-information baseline, with Powell's
derivative-free optimizer in a multi-resolution, multi-shot pipeline.
"""

from patchreg.volume import (
    Volume,
    downsample,
    gaussian_smooth,
    gradient_magnitude,
    normalize_intensity,
    read_volume,
    trilinear_sample,
    write_volume,
)
from patchreg.transform import (
    ErrorRecord,
    MisalignSpec,
    RigidParams,
    apply_point,
    compose,
    draw_misalignment,
    invert,
    resample_moving,
    rigid_matrix,
    transform_error,
)
from patchreg.sampling import (
    CUBE_SYMMETRIES,
    CubeSymmetry,
    DitherSpec,
    PatchDataset,
    PatchPair,
    SamplerConfig,
    build_dataset,
    extract_patch,
    make_pair,
    read_dataset,
    symmetrize_pair,
    write_dataset,
)
from patchreg.network import (
    Architecture,
    ConvSpec,
    ModelParams,
    default_architecture,
    init_model,
    load_model,
    model_forward,
    model_gradients,
    presoftmax_score,
    save_model,
)
from patchreg.trainer import AdamState, TrainConfig, adam_step, train, validate_accuracy
from patchreg.metric import (
    MetricContext,
    deep_metric,
    evaluate_metric,
    make_deep_context,
    nmi,
    nmi_context,
    response_sweep,
)
from patchreg.registration import (
    PowellConfig,
    PowellResult,
    StageSpec,
    parse_stages,
    powell_minimize,
    register_pair,
    run_pipeline,
)
from patchreg.synthdata import (
    MisalignedPair,
    PhantomSpec,
    derive_modality,
    generate_phantom,
    make_misaligned_set,
)
from patchreg.cli import ErrorTable, evaluate_errors, wilcoxon_signed_rank

__version__ = "0.1.0"
