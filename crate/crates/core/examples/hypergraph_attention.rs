//! Candidate hyperedges from one incident, their soft incidence under two
//! temperatures, and the regularizers defined on it.

use hyperode_rca::datapipe::{synth_generate, SynthConfig};
use hyperode_rca::hypergat::{
    generate_candidates, mean_binary_entropy, pairwise_attention, sparsity_loss, temporal_causal_loss, HyperGat,
    ServiceGraph,
};
use hyperode_rca::tensor::{ParamStore, SeededRng, Tape, Tensor};

fn main() -> hyperode_rca::Result<()> {
    let ds = synth_generate(&SynthConfig::new(3, 6, 1))?;
    let inc = &ds.incidents[0];
    let n = ds.manifest.services.len();
    let graph = ServiceGraph::from_incident(inc, n);
    let cands = generate_candidates(&graph, 4, 16);
    println!("{} candidate hyperedges", cands.len());
    for c in cands.iter().take(5) {
        println!("  {:?} from {:?}", c.members, c.source);
    }

    let mut rng = SeededRng::new(0);
    let mut store = ParamStore::new();
    let dim = 8;
    let hg = HyperGat::new(&mut store, "hyper", dim, 2, &mut rng);
    let h0 = Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.normal()).collect())?;
    let onsets: Vec<f64> = (0..n).map(|v| v as f64 / n as f64).collect();

    for tau in [1.0, 0.1] {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = hg.forward(&tape, &bound, tape.constant(h0.clone()), &cands, tau, None)?;
        let inc = out.incidence.value();
        let k = cands.len();
        let member_values: Vec<f64> = cands
            .iter()
            .enumerate()
            .flat_map(|(e, c)| c.members.iter().map(move |&v| (v, e)))
            .map(|(v, e)| inc.data()[v * k + e])
            .collect();
        let pw = pairwise_attention(out.incidence, *out.attention.last().expect("two layers"))?;
        let temp = temporal_causal_loss(&tape, out.incidence, pw, &onsets)?;
        println!(
            "tau {tau}: membership entropy {:.4}, temporal loss {:.4}, sparsity {:.4}",
            mean_binary_entropy(&member_values),
            temp.item(),
            sparsity_loss(&tape, out.incidence).item()
        );
    }
    Ok(())
}
