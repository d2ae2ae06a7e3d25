use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::loss::loss_and_gradients;
use super::optimizer::{sgd_step, OptimizerState};
use crate::dataio::{
    load_image, load_mask, write_checkpoint, Checkpoint, DatasetManifest, ManifestEntry, Split,
    DEFAULT_MASK_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::labelgen::ClassMap;
use crate::network::{NetConfig, ParamStore, Tensor, UNet};
use crate::preprocess::{augment, extract_patches, to_gray_clahe, GrayImage, PatchSample};

const VELOCITY_PREFIX: &str = "velocity/";
const ARCHITECTURE_KEY: &str = "meta/architecture";

/// Losses of one completed epoch, averaged over its batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub fused: f64,
    /// Side losses, deepest decoder stage first.
    pub sides: Vec<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_losses(&self, other: &EpochRecord) -> bool {
        (self.epoch, self.lr, self.total, self.fused, &self.sides)
            == (
                other.epoch,
                other.lr,
                other.total,
                other.fused,
                &other.sides,
            )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let sides = self.records.first().map_or(4, |r| r.sides.len());
        let mut out = String::from("epoch,lr,total,fused");
        for i in 1..=sides {
            write!(out, ",side{i}").unwrap();
        }
        out.push_str(",seconds\n");
        for r in &self.records {
            write!(out, "{},{},{},{}", r.epoch, r.lr, r.total, r.fused).unwrap();
            for s in &r.sides {
                write!(out, ",{s}").unwrap();
            }
            writeln!(out, ",{}", r.seconds).unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let values = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if values.len() < 5 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected at least 5 columns, got {}", values.len()),
                });
            }
            records.push(EpochRecord {
                epoch: values[0] as usize,
                lr: values[1],
                total: values[2],
                fused: values[3],
                sides: values[4..values.len() - 1].to_vec(),
                seconds: values[values.len() - 1],
            });
        }
        Ok(Self { records })
    }

    /// Equality ignoring wall-clock time.
    pub fn same_losses(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.same_losses(b))
    }
}

/// Where a run writes and what it resumes from.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoints, `train_log.csv` and `config.txt` go here when set.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Called after every epoch.
    pub progress: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

pub struct TrainOutcome {
    pub net: UNet,
    pub params: ParamStore<f32>,
    pub state: OptimizerState,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

/// SplitMix64 finalizer, used to derive independent seeds from `(seed, ids...)`.
pub fn derive_seed(seed: u64, ids: &[u64]) -> u64 {
    let mut z = seed;
    for &id in ids {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(id);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Parameters, velocities and architecture packed into a checkpoint.
pub fn to_checkpoint(
    net: &UNet,
    params: &ParamStore<f32>,
    state: &OptimizerState,
    epoch: usize,
    digest: Vec<u8>,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(epoch as u32, digest);
    for (id, e) in params.entries().iter().enumerate() {
        ckpt.tensors.insert(e.name.clone(), e.value.clone());
        if e.kind.is_trainable() {
            ckpt.tensors.insert(
                format!("{VELOCITY_PREFIX}{}", e.name),
                state.velocities[id].clone(),
            );
        }
    }
    let cfg = net.config();
    let mut arch = vec![cfg.input_channels, cfg.classes, cfg.bottleneck_channels];
    arch.extend(&cfg.channels);
    let arch: Vec<f32> = arch.into_iter().map(|v| v as f32).collect();
    ckpt.tensors.insert(
        ARCHITECTURE_KEY.into(),
        Tensor::from_vec(&[arch.len()], arch).expect("1-D"),
    );
    ckpt
}

/// Network layout recorded in a checkpoint; dropout and batch-norm constants come from `base`.
pub fn checkpoint_network(ckpt: &Checkpoint, base: &NetConfig) -> Result<NetConfig> {
    let arch = ckpt
        .tensors
        .get(ARCHITECTURE_KEY)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {ARCHITECTURE_KEY}")))?;
    let v: Vec<usize> = arch.data().iter().map(|&x| x as usize).collect();
    if v.len() < 4 {
        return Err(Error::Format(format!("{ARCHITECTURE_KEY} too short")));
    }
    let cfg = NetConfig {
        input_channels: v[0],
        classes: v[1],
        bottleneck_channels: v[2],
        channels: v[3..].to_vec(),
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Rebuilds the network and parameter store of a checkpoint.
pub fn load_model(ckpt: &Checkpoint, base: &NetConfig) -> Result<(UNet, ParamStore<f32>)> {
    let net = UNet::new(&checkpoint_network(ckpt, base)?)?;
    let mut params = net.init_params(0)?;
    let values: HashMap<String, Tensor<f32>> = ckpt
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    params.load_values(&values)?;
    Ok((net, params))
}

fn restore_state(ckpt: &Checkpoint, params: &ParamStore<f32>) -> Result<OptimizerState> {
    let mut state = OptimizerState::new(params);
    for (id, e) in params.entries().iter().enumerate() {
        if !e.kind.is_trainable() {
            continue;
        }
        let key = format!("{VELOCITY_PREFIX}{}", e.name);
        let v = ckpt
            .tensors
            .get(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
        v.check_same_shape(&e.value)?;
        state.velocities[id] = v.clone();
    }
    Ok(state)
}

/// CLAHE input and class labels for one manifest entry.
pub fn load_example(entry: &ManifestEntry, cfg: &TrainConfig) -> Result<(GrayImage, ClassMap)> {
    let image = load_image(&entry.image)?;
    let vessels = load_mask(&entry.ground_truth, DEFAULT_MASK_THRESHOLD)?;
    if (image.width(), image.height()) != (vessels.width(), vessels.height()) {
        return Err(Error::Shape(format!(
            "{} is {}x{} but {} is {}x{}",
            entry.image.display(),
            image.width(),
            image.height(),
            entry.ground_truth.display(),
            vessels.width(),
            vessels.height()
        )));
    }
    Ok((
        to_gray_clahe(&image, &cfg.clahe)?,
        cfg.labels.labels(&vessels)?,
    ))
}

/// Patches of every training image, in manifest order.
pub fn training_patches(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Vec<PatchSample>> {
    let mut patches = Vec::new();
    for (index, entry) in manifest.split(Split::Train) {
        let (input, labels) = load_example(entry, cfg)?;
        patches.extend(extract_patches(
            &input,
            &labels,
            cfg.patch_size,
            cfg.patch_stride,
            index,
        )?);
    }
    if patches.is_empty() {
        return Err(Error::Argument("manifest has no train entries".into()));
    }
    Ok(patches)
}

/// Trains on the train split of `manifest`.
pub fn train(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_patches(&training_patches(manifest, cfg)?, cfg, opts)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Checkpoint path for a completed epoch.
pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("epoch_{epoch:04}.vseg"))
}

/// The epoch loop over fixed patches.
///
/// Every random draw derives from `cfg.seed` and the epoch, batch or sample
/// index, so a resumed run replays exactly what an uninterrupted one would.
pub fn train_patches(
    patches: &[PatchSample],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Argument("no training patches".into()));
    }
    let net = UNet::new(&cfg.network())?;
    let digest = cfg.digest();
    let (mut params, mut state, start) = match opts.resume.take() {
        Some(ckpt) => {
            if ckpt.config_digest != digest {
                return Err(Error::Config(
                    "checkpoint was written with different training settings".into(),
                ));
            }
            let (ckpt_net, params) = load_model(&ckpt, &cfg.network())?;
            if ckpt_net.config() != net.config() {
                return Err(Error::Config(
                    "checkpoint architecture differs from the config".into(),
                ));
            }
            let state = restore_state(&ckpt, &params)?;
            (params, state, ckpt.epoch as usize)
        }
        None => {
            let params = net.init_params(derive_seed(cfg.seed, &[0]))?;
            let state = OptimizerState::new(&params);
            (params, state, 0)
        }
    };
    if start > cfg.epochs {
        return Err(Error::Argument(format!(
            "checkpoint is at epoch {start}, beyond the configured {}",
            cfg.epochs
        )));
    }

    let mut log = TrainLog::default();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.txt"), &cfg.to_text())?;
        let log_path = dir.join("train_log.csv");
        if start > 0 && log_path.is_file() {
            let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            log = TrainLog::parse_csv(&text)?;
            log.records.retain(|r| r.epoch <= start);
        }
    }

    let weights = cfg.weights();
    let (p, classes) = (cfg.patch_size, cfg.labels.classes());
    for epoch in start..cfg.epochs {
        let clock = Instant::now();
        let lr = cfg.lr_at_epoch(epoch)?;
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[SHUFFLE_STREAM, epoch as u64],
        )));
        let mut sums = (0.0, 0.0, vec![0.0; cfg.net.stages()]);
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut input = Vec::with_capacity(chunk.len() * p * p);
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = match &cfg.augment {
                    Some(a) => {
                        let seed = derive_seed(
                            cfg.seed ^ a.seed,
                            &[AUGMENT_STREAM, epoch as u64, i as u64],
                        );
                        augment(&patches[i], a, &mut ChaCha8Rng::seed_from_u64(seed))
                    }
                    None => patches[i].clone(),
                };
                if sample.input.width() != p || sample.input.height() != p {
                    return Err(Error::Shape(format!(
                        "patch {i} is {}x{}, expected {p}x{p}",
                        sample.input.width(),
                        sample.input.height()
                    )));
                }
                if let Some(&c) = sample
                    .labels
                    .data()
                    .iter()
                    .find(|&&c| c as usize >= classes)
                {
                    return Err(Error::Argument(format!(
                        "patch {i} has label {c} outside {classes} classes"
                    )));
                }
                input.extend_from_slice(sample.input.data());
                targets.push(sample.labels);
            }
            let input = Tensor::from_vec(&[chunk.len(), 1, p, p], input)?;
            let dropout_seed = derive_seed(cfg.seed, &[DROPOUT_STREAM, epoch as u64, b as u64]);
            let eval = loss_and_gradients(
                &net,
                &params,
                &input,
                &targets,
                &weights,
                cfg.l2,
                dropout_seed,
            )?;
            let total = eval.loss.total;
            if !total.is_finite() || !eval.grads.all_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    value: total,
                });
            }
            sgd_step(&mut params, &eval.grads, &mut state, lr, cfg.momentum)?;
            params.apply_running_stats(eval.cache.running_stats(), cfg.net.bn_momentum);
            sums.0 += total;
            sums.1 += eval.loss.fused;
            for (s, v) in sums.2.iter_mut().zip(&eval.loss.sides) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            total: sums.0 / n,
            fused: sums.1 / n,
            sides: sums.2.iter().map(|s| s / n).collect(),
            seconds: clock.elapsed().as_secs_f64(),
        };
        if let Some(cb) = opts.progress.as_mut() {
            cb(&record);
        }
        log.records.push(record);
        if let Some(dir) = &opts.out_dir {
            let done = epoch + 1;
            if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
                let ckpt = to_checkpoint(&net, &params, &state, done, digest.clone());
                write_checkpoint(&ckpt, checkpoint_path(dir, done))?;
            }
            write_file(&dir.join("train_log.csv"), &log.to_csv())?;
        }
    }

    let checkpoint = to_checkpoint(&net, &params, &state, cfg.epochs, digest);
    if let Some(dir) = &opts.out_dir {
        write_checkpoint(&checkpoint, dir.join("model.vseg"))?;
    }
    Ok(TrainOutcome {
        net,
        params,
        state,
        log,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        for (k, v) in [
            ("channels", "2,4"),
            ("bottleneck_channels", "4"),
            ("patch_size", "16"),
            ("patch_stride", "16"),
            ("inference_stride", "8"),
            ("batch_size", "2"),
            ("epochs", "3"),
            ("dropout", "0.1"),
            ("seed", "5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    fn patches(n: usize) -> Vec<PatchSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..n)
            .map(|i| PatchSample {
                input: GrayImage::new(16, 16, (0..256).map(|_| rng.gen()).collect()).unwrap(),
                labels: ClassMap::new(16, 16, (0..256).map(|_| rng.gen_range(0..5)).collect())
                    .unwrap(),
                origin: (0, 0),
                source: i,
            })
            .collect()
    }

    #[test]
    fn log_csv_round_trips() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 1,
                lr: 0.01,
                total: 3.5,
                fused: 0.5,
                sides: vec![0.75; 4],
                seconds: 1.25,
            }],
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,lr,total,fused,side1,side2,side3,side4,seconds\n"));
        assert_eq!(TrainLog::parse_csv(&csv).unwrap(), log);
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, &[1, 0]), derive_seed(1, &[0, 1]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }

    #[test]
    fn no_patches_is_an_argument_error() {
        let err = train_patches(&[], &tiny_config(), TrainOptions::default());
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn empty_train_split_is_an_argument_error() {
        let err = train(
            &DatasetManifest::default(),
            &tiny_config(),
            TrainOptions::default(),
        );
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let data = patches(3);
        let a = train_patches(&data, &tiny_config(), TrainOptions::default()).unwrap();
        let b = train_patches(&data, &tiny_config(), TrainOptions::default()).unwrap();
        assert!(a.log.same_losses(&b.log));
        assert_eq!(a.log.records.len(), 3);
        assert_eq!(a.params.entries(), b.params.entries());
    }

    #[test]
    fn checkpoint_restores_parameters_and_velocities() {
        let data = patches(2);
        let out = train_patches(&data, &tiny_config(), TrainOptions::default()).unwrap();
        let ckpt = Checkpoint::from_bytes(&out.checkpoint.to_bytes().unwrap()).unwrap();
        let (net, params) = load_model(&ckpt, &tiny_config().network()).unwrap();
        assert_eq!(net.config(), out.net.config());
        assert_eq!(params.entries(), out.params.entries());
        assert_eq!(restore_state(&ckpt, &params).unwrap(), out.state);
    }

    #[test]
    fn resuming_reproduces_the_uninterrupted_run() {
        let data = patches(3);
        let full = train_patches(&data, &tiny_config(), TrainOptions::default()).unwrap();
        let mut first = tiny_config();
        first.epochs = 1;
        let head = train_patches(&data, &first, TrainOptions::default()).unwrap();
        let tail = train_patches(
            &data,
            &tiny_config(),
            TrainOptions {
                resume: Some(head.checkpoint),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert!(head.log.records[0].same_losses(&full.log.records[0]));
        assert_eq!(tail.log.records.len(), 2);
        for (a, b) in tail.log.records.iter().zip(&full.log.records[1..]) {
            assert!(a.same_losses(b), "{a:?} vs {b:?}");
        }
        assert_eq!(tail.params.entries(), full.params.entries());
    }

    #[test]
    fn resuming_with_other_settings_is_rejected() {
        let data = patches(2);
        let head = train_patches(&data, &tiny_config(), TrainOptions::default()).unwrap();
        let mut other = tiny_config();
        other.learning_rate = 0.5;
        let err = train_patches(
            &data,
            &other,
            TrainOptions {
                resume: Some(head.checkpoint),
                ..TrainOptions::default()
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn huge_learning_rate_aborts_with_the_batch() {
        let mut cfg = tiny_config();
        cfg.learning_rate = 1e30;
        cfg.epochs = 5;
        match train_patches(&patches(4), &cfg, TrainOptions::default()) {
            Err(Error::NonFinite { epoch, batch, .. }) => assert!(epoch >= 1 && batch < 2),
            Ok(_) => panic!("training should diverge"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn output_directory_receives_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.checkpoint_every = 2;
        let mut seen = Vec::new();
        let mut progress = |r: &EpochRecord| seen.push(r.epoch);
        train_patches(
            &patches(2),
            &cfg,
            TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                resume: None,
                progress: Some(&mut progress),
            },
        )
        .unwrap();
        assert_eq!(seen, [1, 2, 3]);
        assert!(checkpoint_path(dir.path(), 2).is_file());
        assert!(checkpoint_path(dir.path(), 3).is_file());
        assert!(dir.path().join("model.vseg").is_file());
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(TrainLog::parse_csv(&log).unwrap().records.len(), 3);
        assert_eq!(
            TrainConfig::load(dir.path().join("config.txt")).unwrap(),
            cfg
        );
    }
}
