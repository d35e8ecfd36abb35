"""Gaussian mixtures fit directly to geometric primitives, plus rigid registration."""

from .em import (
    BoundValues,
    FitConfig,
    FitReport,
    Responsibilities,
    e_step,
    evaluate_bounds,
    fit,
    init_kmeanspp,
    init_random,
    m_step,
)
from .errors import FormatError, MeshGmmError, NumericError, ValidationError
from .geometry import (
    PointCloud,
    Primitive,
    TriangleMesh,
    bbox_diagonal,
    load_mesh,
    load_points,
    mesh_to_primitives,
    points_to_primitives,
    rect_primitive,
    sample_surface,
    save_mesh,
    save_points,
    triangle_moments,
)
from .harness import (
    CameraIntrinsics,
    TrialResult,
    TrialSpec,
    random_rigid,
    run_fidelity_sweep,
    run_frame_pair_d2d,
    run_registration_benchmark,
)
from .mixture import (
    GaussianMixture,
    avg_loglik,
    expected_component_loglik,
    gauss_logpdf,
    load_model,
    mixture_logpdf,
    save_model,
)
from .registration import (
    IcpConfig,
    MinimizeConfig,
    MinimizeResult,
    RegistrationResult,
    RigidTransform,
    apply,
    d2d_l2,
    minimize,
    numerical_gradient,
    p2d_objective,
    register_d2d,
    register_icp,
    register_p2d,
    rotation_error,
    translation_error,
)

__version__ = "0.1.0"
