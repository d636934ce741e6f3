//! Ranking and classification metrics on hand-made candidate scores.

use hyperode_rca::metrics::{auc, confusion_metrics, evaluate, mrr, Confusion, IncidentScores};

fn incident(scores: Vec<f64>, truth: usize, fault: &str) -> IncidentScores {
    IncidentScores {
        probs: scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect(),
        keys: (0..scores.len()).map(|i| (i, 0)).collect(),
        scores,
        truth,
        fault_type: fault.into(),
    }
}

fn main() -> hyperode_rca::Result<()> {
    println!("MRR of ranks 1, 2, 4: {:.4}", mrr(&[1, 2, 4])?);
    println!("AUC: {:.4}", auc(&[0.9, 0.4, 0.35, 0.1], &[true, false, true, false])?);
    let c = Confusion { tp: 2, fp: 1, fn_: 1, tn: 6 };
    println!("{:?}", confusion_metrics(&c));

    let report = evaluate(&[
        incident(vec![2.0, -1.0, -2.0], 0, "cpu-stress"),
        incident(vec![0.3, 1.2, -2.0], 0, "memory-leak"),
        incident(vec![-1.0, -1.5, 0.8], 2, "cpu-stress"),
    ])?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
