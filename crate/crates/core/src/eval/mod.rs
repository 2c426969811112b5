//! Scoring: detection metrics, the counterfactual test, data-efficiency
//! sweeps and cross-backbone summaries.

pub mod counterfactual;
pub mod metrics;
pub mod summary;
pub mod sweep;

pub use counterfactual::{
    corrupt_case, counterfactual_test, CounterfactualConfig, CounterfactualResult,
};
pub use metrics::{accuracy, auroc, mc_accuracy, MetricsReport};
pub use summary::{summarize_results, MethodResults, SummaryRow, VariantScore};
pub use sweep::{data_efficiency_sweep, SweepCell, SweepResult, SWEEP_FRACTIONS};
