//! Loss terms and schedules: bottleneck KL, smoothed BCE, the invariance
//! penalty, and the temperature and learning-rate schedules.

use hyperode_rca::hypergat::anneal_tau;
use hyperode_rca::objective::{causal_penalty, classification_loss, kl_divergence, lr_schedule, time_environments};
use hyperode_rca::tensor::{Tape, Tensor};

fn main() -> hyperode_rca::Result<()> {
    println!("KL(N(0,1) || N(0,1)) = {}", kl_divergence(&[0.0], &[1.0]));
    println!("KL(N(1,0.5) || N(0,1)) = {:.4}", kl_divergence(&[1.0], &[0.5]));

    let tape = Tape::new();
    let logits = tape.constant(Tensor::vector(vec![2.0, -1.0, -3.0, 0.5]));
    let labels = [1.0, 0.0, 0.0, 0.0];
    for eps in [0.0, 0.1] {
        println!("BCE with smoothing {eps}: {:.5}", classification_loss(&tape, logits, &labels, eps)?.item());
    }

    let starts = [0.0, 3600.0, 7200.0, 10800.0];
    println!("environments by start time: {:?}", time_environments(&starts));
    println!("penalty, equal environments: {}", causal_penalty(&[0.7, 0.7], &[0.0, 0.0], 0.01)?);
    println!("penalty, unequal environments: {:.4}", causal_penalty(&[0.5, 0.9], &[1.0, 2.0], 0.01)?);

    let total = 100;
    for step in [0, 5, 10, 50, 100] {
        println!("step {step:>3}: lr x {:.3}, tau {:.3}", lr_schedule(step, total), anneal_tau(step, total));
    }
    Ok(())
}
