//! Adaptive moment estimation with bias correction.

use ndarray::{ArrayD, ArrayViewMutD, Zip};

use super::{ModelError, TrainConfig};

/// First/second moment accumulators plus the step counter, aligned with a
/// network's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new_like(params: &[ndarray::ArrayViewD<'_, f64>]) -> Self {
        let zeros: Vec<ArrayD<f64>> = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One optimizer step: update biased moments, bias-correct them, and move
/// each parameter by `-lr · m̂ / (√v̂ + ε)`.
pub fn adam_step(
    mut params: Vec<ArrayViewMutD<'_, f64>>,
    grads: &[ArrayD<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), ModelError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(ModelError::ShapeError(format!(
            "parameter/gradient/moment count mismatch: {} vs {} vs {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(ModelError::ShapeError(format!(
                "gradient {i} shape {:?} != parameter shape {:?}",
                g.shape(),
                params[i].shape()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::DivergenceDetected {
                epoch: None,
                detail: format!("non-finite gradient in tensor {i}"),
            });
        }
    }

    let t = state.step + 1;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let lr = cfg.learning_rate;
    let eps = cfg.epsilon;

    for (i, g) in grads.iter().enumerate() {
        Zip::from(&mut params[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .and(g)
            .for_each(|p, m, v, &gv| {
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig::new(1, lr, 0)
    }

    fn views(params: &mut [ArrayD<f64>]) -> Vec<ArrayViewMutD<'_, f64>> {
        params.iter_mut().map(|p| p.view_mut()).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![arr1(&[1.0, -2.0]).into_dyn()];
        let grads = vec![arr1(&[0.0, 0.0]).into_dyn()];
        let mut st = AdamState::new_like(&params.iter().map(|p| p.view()).collect::<Vec<_>>());
        // Seed the moments so decay is observable.
        st.m[0][[0]] = 1.0;
        st.v[0][[0]] = 1.0;
        adam_step(views(&mut params), &grads, &mut st, &cfg(0.1)).unwrap();
        // m decayed toward zero but v̂ stays positive, so the update from the
        // stale moment is what moves p[0]; p[1] has zero moments → unchanged.
        assert_eq!(params[0][[1]], -2.0);
        assert!((st.m[0][[0]] - 0.9).abs() < 1e-12);
        assert!((st.v[0][[0]] - 0.999).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_unit_gradient_moves_by_lr() {
        // Hand evaluation at t=1: m̂ = g, v̂ = g², delta = -lr·g/(|g|+ε).
        let mut params = vec![arr1(&[0.0]).into_dyn()];
        let grads = vec![arr1(&[1.0]).into_dyn()];
        let mut st = AdamState::new_like(&params.iter().map(|p| p.view()).collect::<Vec<_>>());
        adam_step(views(&mut params), &grads, &mut st, &cfg(0.001)).unwrap();
        let expect = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((params[0][[0]] - expect).abs() < 1e-12);
        assert!((params[0][[0]] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn antisymmetric_gradients_give_opposite_deltas() {
        let mut params = vec![arr1(&[0.5, 0.5]).into_dyn()];
        let grads = vec![arr1(&[0.35, -0.35]).into_dyn()];
        let mut st = AdamState::new_like(&params.iter().map(|p| p.view()).collect::<Vec<_>>());
        adam_step(views(&mut params), &grads, &mut st, &cfg(0.01)).unwrap();
        let d0 = params[0][[0]] - 0.5;
        let d1 = params[0][[1]] - 0.5;
        assert!((d0 + d1).abs() < 1e-15, "deltas {d0} and {d1}");
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut params = vec![arr1(&[0.0]).into_dyn()];
        let grads = vec![arr1(&[f64::NAN]).into_dyn()];
        let mut st = AdamState::new_like(&params.iter().map(|p| p.view()).collect::<Vec<_>>());
        assert!(matches!(
            adam_step(views(&mut params), &grads, &mut st, &cfg(0.01)),
            Err(ModelError::DivergenceDetected { .. })
        ));
    }
}
