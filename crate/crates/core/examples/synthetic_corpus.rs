//! Writes a small synthetic fundus corpus with a manifest.
//!
//! cargo run --release --example synthetic_corpus -- data/synth 48 12

use vesselseg::synth::{write_corpus, SynthConfig};

fn main() -> vesselseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "synth".into());
    let train = args.next().map_or(48, |v| v.parse().expect("train count"));
    let test = args.next().map_or(12, |v| v.parse().expect("test count"));
    let manifest = write_corpus(&dir, train, test, &SynthConfig::default(), 1)?;
    println!(
        "{} images, manifest at {dir}/manifest.csv",
        manifest.entries.len()
    );
    Ok(())
}
