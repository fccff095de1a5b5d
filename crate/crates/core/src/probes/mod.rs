//! Measurements on trained models: norm-site saturation, effective rank,
//! weight norms and output sensitivity.

pub mod geometry;
pub mod saturation;

pub use geometry::{
    activation_effective_rank, effective_rank, lipschitz_probe, matrix_effective_rank, model_lipschitz,
    model_weight_geometry, singular_values, weight_geometry, ActivationRank, LipschitzEstimate, MatrixRank,
    WeightGeometry,
};
pub use saturation::{
    classify_saturation, collect_site_inputs, count_saturation, hardtanh_clip, saturation, SampleSpec,
    SaturationKind, SaturationReport, SaturationVerdict, SiteActivations, SiteSaturation, SATURATION_CUT,
    TAIL_THRESHOLD,
};
