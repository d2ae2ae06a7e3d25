//! CLAHE enhancement, 96x96 patch extraction and one random augmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselseg::labelgen::{build_class_map, DEFAULT_BAND_RADIUS};
use vesselseg::preprocess::{
    augment, extract_patches, to_gray_clahe, AugmentConfig, ClaheConfig, PATCH_SIZE,
};
use vesselseg::synth::{generate, SynthConfig};

fn main() -> vesselseg::Result<()> {
    let cfg = SynthConfig {
        size: 192,
        ..SynthConfig::default()
    };
    let sample = generate(&cfg, &mut ChaCha8Rng::seed_from_u64(2))?;
    let gray = to_gray_clahe(&sample.image, &ClaheConfig::default())?;
    let mean = gray.data().iter().sum::<f32>() / gray.data().len() as f32;
    println!(
        "enhanced {}x{}, mean intensity {mean:.3}",
        gray.width(),
        gray.height()
    );

    let labels = build_class_map(&sample.vessels, DEFAULT_BAND_RADIUS)?;
    let patches = extract_patches(&gray, &labels, PATCH_SIZE, 48, 0)?;
    println!(
        "{} patches of {PATCH_SIZE}x{PATCH_SIZE} at stride 48",
        patches.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let aug = augment(&patches[0], &AugmentConfig::default(), &mut rng);
    let changed = aug
        .input
        .data()
        .iter()
        .zip(patches[0].input.data())
        .filter(|(a, b)| a != b)
        .count();
    println!(
        "augmentation changed {changed} of {} input pixels",
        aug.input.data().len()
    );
    Ok(())
}
