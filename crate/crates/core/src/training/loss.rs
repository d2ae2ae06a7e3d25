use crate::error::{Error, Result};
use crate::labelgen::{ClassMap, ClassWeights};
use crate::network::{Gradients, Mode, ParamStore, Scalar, SideOutputSet, Tensor, UNet};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-7;

fn check_targets<T: Scalar>(
    pred: &Tensor<T>,
    targets: &[ClassMap],
    weights: &ClassWeights,
) -> Result<()> {
    let (n, k, h, w) = pred.dims4()?;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "prediction batch {n} but {} target maps",
            targets.len()
        )));
    }
    if weights.len() != k {
        return Err(Error::Shape(format!(
            "{k} predicted classes but {} class weights",
            weights.len()
        )));
    }
    for t in targets {
        if (t.height(), t.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "target {}x{} does not match prediction {h}x{w}",
                t.height(),
                t.width()
            )));
        }
        if t.data().iter().any(|&c| c as usize >= k) {
            return Err(Error::Argument(format!("target label outside {k} classes")));
        }
    }
    Ok(())
}

/// Mean over pixels of `-weight[c] * ln(max(p[c], floor))`, `c` the target class.
pub fn weighted_cross_entropy<T: Scalar>(
    pred: &Tensor<T>,
    targets: &[ClassMap],
    weights: &ClassWeights,
) -> Result<f64> {
    check_targets(pred, targets, weights)?;
    let (n, _, h, w) = pred.dims4()?;
    let plane = h * w;
    let mut total = 0.0;
    for (s, t) in targets.iter().enumerate() {
        let ps = pred.sample(s);
        for (px, &c) in t.data().iter().enumerate() {
            let p = ps[c as usize * plane + px].as_f64().max(PROB_FLOOR);
            total -= weights.get(c as usize) * p.ln();
        }
    }
    Ok(total / (n * plane) as f64)
}

/// Gradient of [`weighted_cross_entropy`] with respect to the pre-softmax
/// logits that produced `pred`. Clamped pixels contribute nothing.
pub fn weighted_cross_entropy_logit_grad<T: Scalar>(
    pred: &Tensor<T>,
    targets: &[ClassMap],
    weights: &ClassWeights,
) -> Result<Tensor<T>> {
    check_targets(pred, targets, weights)?;
    let (n, k, h, w) = pred.dims4()?;
    let plane = h * w;
    let scale = 1.0 / (n * plane) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    for (s, t) in targets.iter().enumerate() {
        let ps = pred.sample(s);
        let gs = grad.sample_mut(s);
        for (px, &c) in t.data().iter().enumerate() {
            let c = c as usize;
            if ps[c * plane + px].as_f64() < PROB_FLOOR {
                continue;
            }
            let f = weights.get(c) * scale;
            for j in 0..k {
                let p = ps[j * plane + px].as_f64();
                let indicator = if j == c { 1.0 } else { 0.0 };
                gs[j * plane + px] = T::from_f64(f * (p - indicator));
            }
        }
    }
    Ok(grad)
}

/// Components of the deeply supervised objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub fused: f64,
    pub sides: Vec<f64>,
    pub l2: f64,
}

/// `CE(fused) + sum_i CE(side_i) + (lambda/2) * ||w||^2` over conv and deconv kernels.
pub fn total_loss<T: Scalar>(
    outputs: &SideOutputSet<T>,
    targets: &[ClassMap],
    weights: &ClassWeights,
    params: &ParamStore<T>,
    l2: f64,
) -> Result<LossBreakdown> {
    let fused = weighted_cross_entropy(&outputs.fused, targets, weights)?;
    let sides = outputs
        .sides
        .iter()
        .map(|s| weighted_cross_entropy(s, targets, weights))
        .collect::<Result<Vec<_>>>()?;
    let l2_term = 0.5 * l2 * params.l2_sum();
    Ok(LossBreakdown {
        total: fused + sides.iter().sum::<f64>() + l2_term,
        fused,
        sides,
        l2: l2_term,
    })
}

/// Result of one forward/backward evaluation of the objective.
pub struct LossEvaluation<T = f32> {
    pub loss: LossBreakdown,
    pub grads: Gradients<T>,
    pub outputs: SideOutputSet<T>,
    pub cache: crate::network::ForwardCache<T>,
}

/// Forward pass, total loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradients<T: Scalar>(
    net: &UNet,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    targets: &[ClassMap],
    weights: &ClassWeights,
    l2: f64,
    dropout_seed: u64,
) -> Result<LossEvaluation<T>> {
    let (outputs, cache) = net.forward(input, params, Mode::Train { dropout_seed })?;
    let loss = total_loss(&outputs, targets, weights, params, l2)?;
    let d_sides = outputs
        .sides
        .iter()
        .map(|s| weighted_cross_entropy_logit_grad(s, targets, weights))
        .collect::<Result<Vec<_>>>()?;
    let d_fused = weighted_cross_entropy_logit_grad(&outputs.fused, targets, weights)?;
    let mut grads = net.backward(params, &cache, &d_sides, &d_fused)?;
    if l2 != 0.0 {
        let lambda = T::from_f64(l2);
        for (id, entry) in params.entries().iter().enumerate() {
            if entry.kind.is_decayed() {
                for (g, &w) in grads
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .zip(entry.value.data())
                {
                    *g = *g + lambda * w;
                }
            }
        }
    }
    Ok(LossEvaluation {
        loss,
        grads,
        outputs,
        cache,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ParamKind;

    fn uniform(n: usize, k: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::filled(&[n, k, h, w], 1.0 / k as f64)
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let target = ClassMap::new(2, 1, vec![3, 0]).unwrap();
        let mut pred = Tensor::<f64>::zeros(&[1, 5, 1, 2]);
        pred.data_mut()[3 * 2] = 1.0;
        pred.data_mut()[1] = 1.0;
        let w = ClassWeights(vec![1.0, 2.0, 4.0, 2.0, 4.0]);
        assert_eq!(weighted_cross_entropy(&pred, &[target], &w).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_costs_ln5_per_weight() {
        let target = ClassMap::new(3, 3, vec![0; 9]).unwrap();
        let w = ClassWeights(vec![1.0; 5]);
        let loss = weighted_cross_entropy(&uniform(1, 5, 3, 3), &[target], &w).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        let single = ClassMap::new(1, 1, vec![4]).unwrap();
        let w = ClassWeights(vec![1.0, 2.0, 4.0, 2.0, 4.0]);
        let loss = weighted_cross_entropy(&uniform(1, 5, 1, 1), &[single], &w).unwrap();
        assert!((loss - 4.0 * 5f64.ln()).abs() < 1e-12);
        assert!((loss - 6.43775).abs() < 1e-5);
    }

    #[test]
    fn zero_probability_is_floored() {
        let target = ClassMap::new(1, 1, vec![1]).unwrap();
        let mut pred = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        pred.data_mut()[0] = 1.0;
        let loss = weighted_cross_entropy(
            &pred,
            std::slice::from_ref(&target),
            &ClassWeights(vec![1.0, 1.0]),
        )
        .unwrap();
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-12);
        let g = weighted_cross_entropy_logit_grad(&pred, &[target], &ClassWeights(vec![1.0, 1.0]))
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_target_is_shape_error() {
        let target = ClassMap::new(2, 2, vec![0; 4]).unwrap();
        let err =
            weighted_cross_entropy(&uniform(1, 5, 3, 3), &[target], &ClassWeights(vec![1.0; 5]));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn totals_add_fused_sides_and_penalty() {
        let target = ClassMap::new(1, 1, vec![0]).unwrap();
        let mut fused = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        fused.data_mut()[0] = (-0.5f64).exp();
        fused.data_mut()[1] = 1.0 - (-0.5f64).exp();
        let mut side = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        side.data_mut()[0] = (-0.3f64).exp();
        side.data_mut()[1] = 1.0 - (-0.3f64).exp();
        let outputs = SideOutputSet {
            sides: vec![side; 4],
            fused,
        };
        let w = ClassWeights(vec![1.0, 1.0]);
        let loss = total_loss(
            &outputs,
            std::slice::from_ref(&target),
            &w,
            &ParamStore::new(),
            0.0,
        )
        .unwrap();
        assert!((loss.total - 1.7).abs() < 1e-12);

        let mut params = ParamStore::<f64>::new();
        params
            .register(
                "k",
                ParamKind::ConvWeight,
                Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(),
            )
            .unwrap();
        params
            .register(
                "bn",
                ParamKind::BnScale,
                Tensor::from_vec(&[1], vec![10.0]).unwrap(),
            )
            .unwrap();
        let mut perfect = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        perfect.data_mut()[0] = 1.0;
        let outputs = SideOutputSet {
            sides: vec![perfect.clone(); 4],
            fused: perfect,
        };
        let loss = total_loss(&outputs, &[target], &w, &params, 0.1).unwrap();
        assert!((loss.total - 1.25).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        use crate::network::ops::softmax_channels;
        let logits =
            Tensor::<f64>::from_vec(&[1, 3, 1, 2], vec![0.2, -1.0, 0.7, 0.1, -0.3, 0.9]).unwrap();
        let target = ClassMap::new(2, 1, vec![2, 0]).unwrap();
        let w = ClassWeights(vec![1.0, 2.0, 3.0]);
        let f = |z: &Tensor<f64>| {
            weighted_cross_entropy(
                &softmax_channels(z).unwrap(),
                std::slice::from_ref(&target),
                &w,
            )
            .unwrap()
        };
        let g = weighted_cross_entropy_logit_grad(
            &softmax_channels(&logits).unwrap(),
            std::slice::from_ref(&target),
            &w,
        )
        .unwrap();
        for i in 0..6 {
            let (mut plus, mut minus) = (logits.clone(), logits.clone());
            plus.data_mut()[i] += 1e-6;
            minus.data_mut()[i] -= 1e-6;
            let fd = (f(&plus) - f(&minus)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
