//! Compares backpropagated gradients of the full loss with central differences
//! on a two-stage network in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselseg::labelgen::{ClassMap, ClassWeights};
use vesselseg::network::{Mode, NetConfig, ParamStore, Tensor, UNet};
use vesselseg::training::{loss_and_gradients, total_loss};

fn main() -> vesselseg::Result<()> {
    let net = UNet::new(&NetConfig::micro())?;
    let mut params: ParamStore<f64> = net.init_params(3)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_vec(
        &[1, 1, 16, 16],
        (0..256).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let targets = [ClassMap::new(
        16,
        16,
        (0..256).map(|_| rng.gen_range(0..5)).collect(),
    )?];
    let weights = ClassWeights::new(vec![1.0, 2.0, 4.0, 2.0, 4.0])?;
    let l2 = 5e-4;

    let loss = |p: &ParamStore<f64>| -> vesselseg::Result<f64> {
        let (out, _) = net.forward(&x, p, Mode::Train { dropout_seed: 0 })?;
        Ok(total_loss(&out, &targets, &weights, p, l2)?.total)
    };
    let grads = loss_and_gradients(&net, &params, &x, &targets, &weights, l2, 0)?.grads;

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let id = rng.gen_range(0..params.len());
        if !params.kind(id).is_trainable() {
            continue;
        }
        let k = rng.gen_range(0..params.value(id).len());
        let w = params.value(id).data()[k];
        params.value_mut(id).data_mut()[k] = w + h;
        let up = loss(&params)?;
        params.value_mut(id).data_mut()[k] = w - h;
        let down = loss(&params)?;
        params.value_mut(id).data_mut()[k] = w;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).data()[k];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        println!(
            "{:<28} numeric {numeric:+.6e}  analytic {analytic:+.6e}  rel {rel:.1e}",
            params.entries()[id].name
        );
        worst = worst.max(rel);
    }
    println!("largest relative error {worst:.2e}");
    Ok(())
}
