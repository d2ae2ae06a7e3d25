#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vesselseg::labelgen::{ClassMap, ClassWeights};
use vesselseg::network::{Mode, NetConfig, ParamKind, ParamStore, Tensor, UNet};
use vesselseg::training::loss::{loss_and_gradients, total_loss};

pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Central differences of the full deeply supervised loss on the micro-net, in f64.
///
/// A sample whose `w +/- h` perturbation flips any ReLU is a kink crossing:
/// the function is not differentiable inside the bracket, so it is skipped and
/// another parameter is drawn until `samples` smooth ones have been compared.
pub fn micro_net_gradcheck(samples: usize, h: f64, seed: u64) -> GradCheck {
    let net = UNet::new(&NetConfig::micro()).unwrap();
    let mut params: ParamStore<f64> = net.init_params(seed).unwrap().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Nonzero biases and affine BN parameters so their gradients are exercised.
    for id in 0..params.len() {
        if matches!(
            params.kind(id),
            ParamKind::BnScale | ParamKind::BnShift | ParamKind::Bias
        ) {
            for v in params.value_mut(id).data_mut() {
                *v += 0.3 * gauss(&mut rng);
            }
        }
    }
    let input = Tensor::from_vec(
        &[2, 1, 16, 16],
        (0..512).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap();
    let targets: Vec<ClassMap> = (0..2)
        .map(|_| ClassMap::new(16, 16, (0..256).map(|_| rng.gen_range(0..5u8)).collect()).unwrap())
        .collect();
    let weights = ClassWeights(vec![1.0, 2.0, 4.0, 2.0, 4.0]);
    let l2 = 5e-4;
    let base = loss_and_gradients(&net, &params, &input, &targets, &weights, l2, 0).unwrap();
    let base_pattern = base.cache.activation_pattern();
    let eval = |p: &ParamStore<f64>| {
        let (out, cache) = net
            .forward(&input, p, Mode::Train { dropout_seed: 0 })
            .unwrap();
        let loss = total_loss(&out, &targets, &weights, p, l2).unwrap().total;
        (loss, cache.activation_pattern())
    };
    let trainable: Vec<(usize, usize)> = (0..params.len())
        .filter(|&id| params.kind(id).is_trainable())
        .flat_map(|id| (0..params.value(id).len()).map(move |i| (id, i)))
        .collect();

    let mut report = GradCheck {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    while report.checked < samples {
        let (id, i) = trainable[rng.gen_range(0..trainable.len())];
        let orig = params.value(id).data()[i];
        params.value_mut(id).data_mut()[i] = orig + h;
        let (plus, plus_pattern) = eval(&params);
        params.value_mut(id).data_mut()[i] = orig - h;
        let (minus, minus_pattern) = eval(&params);
        params.value_mut(id).data_mut()[i] = orig;
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            report.skipped_kinks += 1;
            assert!(
                report.skipped_kinks < 20 * samples,
                "almost every sample crosses a kink"
            );
            continue;
        }
        let fd = (plus - minus) / (2.0 * h);
        let an = base.grads.get(id).data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = format!(
                "{}[{i}] analytic {an:.6e} numeric {fd:.6e}",
                params.entries()[id].name
            );
        }
        report.checked += 1;
    }
    report
}
