//! Self attention, cross attention, context routing and pooling over five
//! modality token sets.

use hyperode_rca::fusion::{FusionParams, MODALITIES};
use hyperode_rca::tensor::{ParamStore, SeededRng, Tape, Tensor};

fn main() -> hyperode_rca::Result<()> {
    let mut rng = SeededRng::new(4);
    let mut store = ParamStore::new();
    let (dim, heads) = (8, 2);
    let fusion = FusionParams::new(&mut store, "fusion", dim, heads, 16, 2, &mut rng);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let counts = [6, 4, 5, 3, 2];
    let tokens: Vec<_> = counts
        .iter()
        .map(|&n| Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.normal()).collect()).map(|t| tape.constant(t)))
        .collect::<hyperode_rca::Result<_>>()?;
    let extra = tape.constant(Tensor::vector(vec![0.4, -0.1]));
    let out = fusion.forward(&tape, &bound, &tokens, &[0.2, -0.5, 1.0, 0.0], extra)?;

    let beta = out.routing.value();
    println!("routing weights (row = source modality):");
    for (i, m) in MODALITIES.iter().enumerate() {
        println!("  {m:>6} {:.3?}", &beta.data()[i * MODALITIES.len()..(i + 1) * MODALITIES.len()]);
    }
    for (m, p) in MODALITIES.iter().zip(&out.pooling) {
        println!("pooling over {m} tokens: {:.3?}", p.value().data());
    }
    println!("fused representation: {:?}", out.z_final.shape());
    Ok(())
}
