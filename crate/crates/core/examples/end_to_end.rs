//! Trains a compact model on a synthetic dataset, evaluates it on the held
//! out incidents and explains one of them.
//!
//! ```text
//! cargo run --release --example end_to_end
//! ```

use hyperode_rca::config::RunConfig;
use hyperode_rca::datapipe::{synth_generate, Split, SynthConfig};
use hyperode_rca::explain::{explain, to_dot};
use hyperode_rca::model::ModelConfig;
use hyperode_rca::train::{evaluate_incidents, train};

fn main() -> hyperode_rca::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let ds = synth_generate(&SynthConfig::new(11, 6, 40))?;
    let cfg = RunConfig {
        epochs: 8,
        lr: 3e-3,
        model: ModelConfig {
            d_model: 16,
            d_final: 16,
            d_z: 8,
            candidate_dim: 16,
            bilinear_rank: 16,
            hash_dim: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let trained = train(&cfg, &ds)?;
    let first = &trained.history[0];
    let last = trained.history.last().expect("at least one epoch");
    println!(
        "cls loss {:.4} -> {:.4}, incidence entropy {:.4} -> {:.4}",
        first.components.cls, last.components.cls, first.incidence_entropy, last.incidence_entropy
    );

    let held_out = ds.select(&[Split::Val, Split::Test]);
    let report = evaluate_incidents(&trained.model, &trained.store, &held_out)?;
    println!("held-out: {}", serde_json::to_string(&report)?);

    let f = trained.model.featurize(held_out[0])?;
    let ex = explain(&trained.model, &trained.store, &ds.manifest, &f)?;
    for c in ex.ranking.iter().take(3) {
        println!("  {:>10} {:<14} p = {:.3}{}", c.service, c.fault, c.probability, if c.is_truth { "  <- truth" } else { "" });
    }
    print!("{}", to_dot(&ex, &ds.manifest.services));
    Ok(())
}
