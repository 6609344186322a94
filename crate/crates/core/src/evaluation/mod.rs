//! Metrics, the cross-domain protocol, the perturbation sweep and the
//! mixture ratio ablation.

pub mod ablation;
pub mod metrics;
pub mod perturb;
pub mod protocol;
pub mod robustness;

pub use ablation::{ablate_ratio, AblationReport, RatioPoint, RATIOS};
pub use metrics::{accuracy, auc, compute_metrics, eer, roc_points, Level, Metrics, ScoreSet};
pub use perturb::{perturb, PerturbKind, PerturbationSpec, MAX_SEVERITY};
pub use protocol::{
    cross_domain_eval, evaluate_domains, evaluate_scores, read_scores, score_dataset, score_images, DomainEvalReport,
    DomainReport, EvalProtocol, MacroMetrics,
};
pub use robustness::{robustness_eval, RobustnessReport};
