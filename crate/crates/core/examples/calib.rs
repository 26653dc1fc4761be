//! Scratch calibration probe (not part of the library).

use grouped_glm::EstimatorKind::{self, *};
use grouped_glm::sim::{
    DgpKind, ExperimentConfig, GridCell, InferenceKind, MethodSpec, MetricsRow, NormalParam,
    aggregate_replicates, run_experiment,
};
use std::time::Instant;

const SEED: u64 = 20260823;
const ESTS: [EstimatorKind; 5] = [PooledGlm, RiMlm, GroupFe, BcRi, BcRegFe];

// Reference bias (rows: (G,n_g); cols: GLM RI FE bcRI bcRegFE).
const BIAS_REF: [((usize, usize), [f64; 5]); 8] = [
    ((15, 5), [0.643, 0.817, 0.520, 0.154, 0.082]),
    ((50, 5), [0.523, 0.684, 0.344, 0.044, -0.032]),
    ((15, 15), [0.534, 0.509, 0.098, 0.016, -0.022]),
    ((50, 15), [0.502, 0.499, 0.084, 0.006, -0.036]),
    ((15, 25), [0.535, 0.410, 0.060, 0.013, -0.015]),
    ((50, 25), [0.506, 0.396, 0.048, 0.004, -0.026]),
    ((15, 50), [0.520, 0.250, 0.022, -0.001, -0.018]),
    ((50, 50), [0.502, 0.248, 0.022, 0.000, -0.018]),
];
const RMSE_REF_50_5: [f64; 5] = [0.573, 0.739, 0.663, 0.422, 0.386];

fn cell_row<'a>(rows: &'a [MetricsRow], g: usize, n: usize, e: EstimatorKind) -> &'a MetricsRow {
    rows.iter()
        .find(|r| r.g == g && r.n_g == n && r.estimator == e)
        .unwrap()
}

fn grid() {
    let t = Instant::now();
    let cells: Vec<GridCell> = BIAS_REF.iter().map(|&((g, n), _)| GridCell { g, n }).collect();
    let mut cfg = ExperimentConfig::new(DgpKind::Dgp1Confounded, cells, ESTS.to_vec(), 500);
    cfg.seed = SEED;
    cfg.normal_param = NormalParam::Sd;
    cfg.check_score = true;
    let out = run_experiment(&cfg).unwrap();
    println!("grid done in {:.0}s", t.elapsed().as_secs_f64());
    for &((g, n), refs) in &BIAS_REF {
        print!("({g},{n}) bias:");
        for (k, &e) in ESTS.iter().enumerate() {
            let r = cell_row(&out.metrics, g, n, e);
            let b = r.bias.unwrap();
            let tol = (3.0 * r.mc_se_bias.unwrap()).max(0.04);
            let ok = (b - refs[k]).abs() <= tol;
            print!(" {b:+.3}/{:+.3}{}", refs[k], if ok { "" } else { "<<FAIL" });
        }
        let ri = cell_row(&out.metrics, g, n, RiMlm).bias.unwrap();
        let bc = cell_row(&out.metrics, g, n, BcRi).bias.unwrap();
        println!("  qualA {}", if bc.abs() < ri.abs() { "ok" } else { "FAIL" });
    }
    print!("rmse(50,5):");
    for (k, &e) in ESTS.iter().enumerate() {
        let r = cell_row(&out.metrics, 50, 5, e).rmse.unwrap();
        let ok = (r - RMSE_REF_50_5[k]).abs() <= 0.06;
        print!(" {r:.3}/{:.3}{}", RMSE_REF_50_5[k], if ok { "" } else { "<<FAIL" });
    }
    println!();
    let worst = out
        .metrics
        .iter()
        .filter_map(|r| r.max_score_gap)
        .fold(0.0f64, f64::max);
    println!("worst score gap: {worst:.2e}");
    let failed: usize = out.metrics.iter().map(|r| r.n_failed).sum();
    println!("total failed fits: {failed}");
}

fn dgp2() {
    let t = Instant::now();
    let mut a = ExperimentConfig::new(DgpKind::Dgp2PoissonAr1, vec![GridCell { g: 50, n: 25 }], vec![], 500);
    a.methods = Some(vec![
        MethodSpec { estimator: RiMlm, inference: InferenceKind::Default },
        MethodSpec { estimator: RiMlm, inference: InferenceKind::Bootstrap },
        MethodSpec { estimator: GroupFe, inference: InferenceKind::Crse },
        MethodSpec { estimator: RegFe, inference: InferenceKind::Crse },
    ]);
    a.b = 200;
    a.seed = SEED;
    a.normal_param = NormalParam::Sd;
    a.check_score = true;
    let out = run_experiment(&a).unwrap();
    println!("dgp2 A done in {:.0}s", t.elapsed().as_secs_f64());
    let sub: Vec<_> = out.replicates.iter().filter(|r| r.replicate < 300).cloned().collect();
    let sub_rows = aggregate_replicates(&sub).unwrap();
    for (label, rows) in [("M=500", &out.metrics), ("M=300", &sub_rows)] {
        print!("{label}:");
        for r in rows.iter() {
            print!(
                " {}x{}={:.3}(n_ci {})",
                r.estimator.name(),
                r.inference.name(),
                r.coverage.unwrap_or(f64::NAN),
                r.n_ci
            );
        }
        println!();
    }
    let worst = out.metrics.iter().filter_map(|r| r.max_score_gap).fold(0.0f64, f64::max);
    println!("worst score gap A: {worst:.2e}");

    let t = Instant::now();
    let mut b = ExperimentConfig::new(
        DgpKind::Dgp2PoissonAr1,
        vec![GridCell { g: 15, n: 25 }],
        vec![RiMlm],
        300,
    );
    b.inference = vec![InferenceKind::Default];
    b.seed = SEED;
    b.normal_param = NormalParam::Sd;
    b.check_score = true;
    let out_b = run_experiment(&b).unwrap();
    println!(
        "dgp2 B done in {:.0}s cover {:.3} gap {:.2e}",
        t.elapsed().as_secs_f64(),
        out_b.metrics[0].coverage.unwrap(),
        out_b.metrics[0].max_score_gap.unwrap_or(f64::NAN)
    );
}

fn crit8() {
    let t = Instant::now();
    let cells = vec![GridCell { g: 50, n: 5 }, GridCell { g: 50, n: 15 }, GridCell { g: 50, n: 25 }];
    let mut cfg =
        ExperimentConfig::new(DgpKind::Dgp1Confounded, cells, vec![GroupFe, BcRi], 300);
    cfg.seed = SEED;
    cfg.normal_param = NormalParam::Sd;
    cfg.test_error = true;
    let out = run_experiment(&cfg).unwrap();
    println!("crit8 done in {:.0}s", t.elapsed().as_secs_f64());
    for &n in &[5usize, 15, 25] {
        let fe: Vec<_> = out
            .replicates
            .iter()
            .filter(|r| r.n_g == n && r.estimator == GroupFe)
            .map(|r| r.test_error)
            .collect();
        let bc: Vec<_> = out
            .replicates
            .iter()
            .filter(|r| r.n_g == n && r.estimator == BcRi)
            .map(|r| r.test_error)
            .collect();
        let d: Vec<f64> = fe
            .iter()
            .zip(&bc)
            .filter_map(|(a, b)| Some(a.clone()? - b.clone()?))
            .collect();
        let nn = d.len() as f64;
        let mean = d.iter().sum::<f64>() / nn;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nn - 1.0);
        let sep = mean / (var / nn).sqrt();
        println!("n_g={n}: paired diff fe-bc = {mean:.5} separation {sep:.2} (pairs {})", d.len());
    }
}

fn main() {
    match std::env::args().nth(1).as_deref() {
        Some("grid") => grid(),
        Some("dgp2") => dgp2(),
        Some("crit8") => crit8(),
        _ => {
            grid();
            dgp2();
            crit8();
        }
    }
}
