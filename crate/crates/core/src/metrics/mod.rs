//! Detection and overlap metrics, lesion matching and cross-model ranking.

mod edt;
mod lesions;
mod overlap;
mod rank;
pub mod report;

pub use edt::squared_edt;
pub use lesions::{fp_per_case, match_lesions, ppv, sensitivity, LesionCounts, MatchRule};
pub use overlap::{dsc, evaluate_case, hausdorff, volumetric_similarity, MetricsReport, Units};
pub use rank::{rank_models, MetricColumn, Orientation, RankTable};
