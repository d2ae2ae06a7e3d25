//! Trains a reduced network on a small synthetic corpus, saves and reloads the
//! checkpoint, and prints the per-image metrics table of the test split.
//!
//! cargo run --release --example train_and_evaluate -- [epochs]

use vesselseg::dataio::{read_checkpoint, write_checkpoint, Split};
use vesselseg::evaluate::{evaluate_manifest, Model};
use vesselseg::synth::{write_corpus, SynthConfig};
use vesselseg::training::{train, TrainConfig, TrainOptions};

fn main() -> vesselseg::Result<()> {
    let epochs = std::env::args().nth(1).unwrap_or_else(|| "5".into());
    let dir = std::env::temp_dir().join("vesselseg-example");
    let manifest = write_corpus(&dir, 12, 4, &SynthConfig::default(), 9)?;

    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("epochs", epochs.as_str()),
        ("channels", "8,16,32,64"),
        ("bottleneck_channels", "128"),
        ("patch_stride", "32"),
        ("inference_stride", "32"),
    ] {
        cfg.set(k, v)?;
    }
    let mut progress = |r: &vesselseg::training::EpochRecord| {
        println!(
            "epoch {:>3}  loss {:.4}  ({:.1}s)",
            r.epoch, r.total, r.seconds
        );
    };
    let outcome = train(
        &manifest,
        &cfg,
        TrainOptions {
            progress: Some(&mut progress),
            ..TrainOptions::default()
        },
    )?;

    let path = dir.join("model.vseg");
    write_checkpoint(&outcome.checkpoint, &path)?;
    let model = Model::from_checkpoint(&read_checkpoint(&path)?, &cfg.network())?;
    let report = evaluate_manifest(
        &model,
        &manifest,
        Split::Test,
        &cfg.clahe,
        cfg.patch_size,
        cfg.inference_stride,
    )?;
    print!("{}", report.to_table());
    println!("{:.2}s per image", report.seconds_per_image);
    Ok(())
}
