//! Turns a binary vessel mask into the five-class edge-aware label map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselseg::labelgen::{
    build_class_map, split_thick_thin, weights_from_frequencies, DEFAULT_BAND_RADIUS,
};
use vesselseg::synth::{generate, SynthConfig};

fn main() -> vesselseg::Result<()> {
    let sample = generate(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(4))?;
    let (thick, thin) = split_thick_thin(&sample.vessels);
    println!(
        "vessel pixels {}: thick {}, thin {}",
        sample.vessels.count(),
        thick.count(),
        thin.count()
    );

    let map = build_class_map(&sample.vessels, DEFAULT_BAND_RADIUS)?;
    let names = ["background", "near thick", "near thin", "thick", "thin"];
    for (name, n) in names.iter().zip(map.histogram(names.len())) {
        println!("{name:>12}: {n}");
    }
    let weights = weights_from_frequencies(&[map], &[1.0; 5])?;
    println!("inverse-frequency weights: {}", weights.to_line());
    Ok(())
}
