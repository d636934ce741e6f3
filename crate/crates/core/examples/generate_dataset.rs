//! Generates a small synthetic incident dataset, writes it as NDJSON and
//! prints what one incident contains.
//!
//! ```text
//! cargo run --example generate_dataset -- /tmp/incidents.ndjson
//! ```

use hyperode_rca::datapipe::{synth_generate, SynthConfig};

fn main() -> hyperode_rca::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("incidents.ndjson").display().to_string());
    let ds = synth_generate(&SynthConfig::new(7, 8, 20))?;
    ds.save(out.as_ref())?;

    let m = &ds.manifest;
    println!("services: {:?}", m.services);
    println!("call edges: {:?}", m.call_edges);
    println!("fault types: {:?}", m.fault_types);

    let inc = &ds.incidents[0];
    let truth = inc.truth_candidate();
    println!(
        "incident {}: {} logs, {} spans, {} metric series, {} events, {} candidates",
        inc.id,
        inc.logs.len(),
        inc.spans.len(),
        inc.metrics.len(),
        inc.events.len(),
        inc.candidates.len()
    );
    println!("root cause: {} / {}", m.services[truth.service], m.fault_types[truth.fault]);
    println!("wrote {} incidents to {out}", ds.incidents.len());
    Ok(())
}
