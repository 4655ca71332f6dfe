//! Full pipeline at reduced scale: corpus, seven models, every analysis and
//! the directional trend checks, written below OUT_DIR.
//!
//! cargo run --release --example reproduce -- [OUT_DIR] [CONFIG.toml]

use std::path::PathBuf;

use spkcam::config::RunConfig;
use spkcam::experiment::Experiment;

const REDUCED: &str = "
[model]
stage_channels = [8, 16, 32, 64]
[train]
epochs = 15
";

fn main() -> spkcam::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "reproduce-example".into()));
    let config = match args.next() {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml(REDUCED)?,
    };
    let report = Experiment::new(config)?.reproduce(Some(&out))?;
    for row in report.rows.iter().filter(|r| !r.metric.contains('@')) {
        println!("{:<10} {:<12} {:<10} {:<6} {:8.4}", row.table, row.condition, row.model, row.metric, row.value);
    }
    print!("{}", report.checks_text());
    println!("results in {}", out.display());
    Ok(())
}
