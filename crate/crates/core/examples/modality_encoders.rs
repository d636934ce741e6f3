//! The per-modality encoders: hashed log embeddings with prototype
//! assignment, the span graph attention network and the causal metric
//! convolution.

use hyperode_rca::datapipe::{synth_generate, SynthConfig};
use hyperode_rca::encoders::{
    cosine, grid_len, log_embed, metric_grid, normalize_metrics, span_neighbourhood, span_scalars, Dcc,
    TemplatePrototypes, TraceGat, SPAN_SCALAR_FEATURES,
};
use hyperode_rca::tensor::{ParamStore, SeededRng, Tape};

fn main() -> hyperode_rca::Result<()> {
    let ds = synth_generate(&SynthConfig::new(5, 5, 1))?;
    let inc = &ds.incidents[0];
    let mut rng = SeededRng::new(2);
    let mut store = ParamStore::new();

    // logs
    let vecs: Vec<Vec<f64>> = inc.logs.iter().map(|l| log_embed(&l.tokens, 32, 0)).collect();
    let protos = TemplatePrototypes::new(&mut store, "protos", 4, 32, &mut rng);
    protos.init_farthest(&mut store, &vecs);
    let a = protos.assign(&store, &vecs[0])?;
    println!("log 0 {:?}", inc.logs[0].tokens);
    println!("  template probabilities {:.3?}, loss {:.4}", a.probs, a.loss);
    println!("  cosine to log 1: {:.3}", cosine(&vecs[0], &vecs[1]));

    // traces
    let gat = TraceGat::new(&mut store, "trace", SPAN_SCALAR_FEATURES, 6, 2, &mut rng);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let spans = tape.constant(span_scalars(&inc.spans));
    let out = gat.forward(&tape, &bound, spans, &span_neighbourhood(&inc.spans))?;
    println!("{} spans -> span states {:?}", inc.spans.len(), out.shape());

    // metrics
    let n_services = ds.manifest.services.len();
    let channels = ds.manifest.metric_names.len();
    let grid = metric_grid(&normalize_metrics(inc), &inc.window, n_services, channels, 30.0)?;
    let t_len = grid_len(&inc.window, 30.0)?;
    let dcc = Dcc::new(&mut store, "metric", channels, 6, 4, &mut rng);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let y = dcc.forward(&tape, &bound, tape.constant(grid.clone()), t_len)?;
    let peak = grid.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("metric grid {:?} (peak |asinh z| {peak:.2}) -> {:?}", grid.shape(), y.shape());
    Ok(())
}
