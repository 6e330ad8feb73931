//! Loads a run configuration, applies overrides and runs the staged
//! pipeline the `xmrec` binary drives, then reads the manifest.
//!
//! cargo run --release --example run_config -- [config.toml]

use std::path::PathBuf;

use crossmodal_rec::pipeline::{run_pipeline, Manifest, RunConfig};

fn main() -> crossmodal_rec::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml"));
    let run_dir = std::env::temp_dir().join("xmrec-run-config");
    let cfg = RunConfig::load(&path)?.with_overrides(&[
        format!("paths.run_dir=\"{}\"", run_dir.display()),
        "eval.dump_rankings=true".into(),
    ])?;
    println!("config hash {}", cfg.hash());

    // Every violation is reported at once.
    if let Err(e) = cfg.with_overrides(&["grm.lr=-1".into(), "labels.k=0".into()])?.validate() {
        println!("rejected: {e}");
    }

    run_pipeline(&cfg)?;
    let manifest = Manifest::load_or_default(&run_dir.join("manifest.json"))?;
    for (stage, rec) in &manifest.stages {
        println!("{stage:<12} seed {:<5} outputs {:?}", rec.seed.map_or("-".into(), |s| s.to_string()), rec.outputs.keys().collect::<Vec<_>>());
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.json")).expect("eval wrote metrics");
    println!("{metrics}");
    Ok(())
}
