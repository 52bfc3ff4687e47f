//! Accuracy, calibration, corruption of inputs, and executable checks of the
//! model's gradients and of its uncertainty fixed point.

mod contraction;
mod gradcheck;
mod metrics;
mod perturb;
mod theorem3;

pub use contraction::{
    contraction_probe, lipschitz_ratio, max_abs_diff, probe_model, ContractionReport, ProbeMap, ProbeMode, ProbeTrial,
    CONVERGED_STEP,
};
pub use gradcheck::{
    check_hyper, finite_difference, model_check, op_checks, rel_error, six_node_bundle, ModelCheck, OpCheck,
    ParamCheck, FD_STEP, REL_FLOOR,
};
pub use metrics::{accuracy, ece, EceBin, EceReport, ECE_BINS};
pub use perturb::{feature_pgd, perturb, PerturbKind, PerturbSpec};
pub use theorem3::{
    run_point, summarize, theorem3_experiment, Theorem3Config, Theorem3Row, Variant, VariantSummary, CSV_HEADER,
};
