//! Scratch probe: localize large finite-difference score gaps (not part
//! of the library).

use grouped_glm::EstimatorKind::*;
use grouped_glm::sim::{DgpKind, ExperimentConfig, GridCell, NormalParam, run_experiment};

const SEED: u64 = 20260823;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let g: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let m: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(500);
    let mut cfg = ExperimentConfig::new(
        DgpKind::Dgp1Confounded,
        vec![GridCell { g, n }],
        vec![PooledGlm, RiMlm, GroupFe, BcRi, BcRegFe],
        m,
    );
    cfg.seed = SEED;
    cfg.normal_param = NormalParam::Sd;
    cfg.check_score = true;
    let out = run_experiment(&cfg).unwrap();
    for r in &out.metrics {
        println!(
            "({g},{n}) {}: max gap {:?} n_ok {} failed {}",
            r.estimator.name(),
            r.max_score_gap,
            r.n_ok,
            r.n_failed
        );
    }
    let mut rows: Vec<_> =
        out.replicates.iter().filter(|r| r.score_gap.is_some()).collect();
    rows.sort_by(|a, b| b.score_gap.unwrap().total_cmp(&a.score_gap.unwrap()));
    for r in rows.iter().take(8) {
        println!(
            "  rep {} {}: gap {:.3e} est {:?} conv {:?} boundary {}",
            r.replicate,
            r.estimator.name(),
            r.score_gap.unwrap(),
            r.estimate,
            r.converged,
            r.boundary
        );
    }
}
