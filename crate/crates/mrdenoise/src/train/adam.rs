//! Adam with bias-corrected first and second moments.

use super::{TrainConfig, TrainError};
use crate::model::ModelParams;

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        AdamState {
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.values.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.values.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update over every parameter tensor.
/// `grads` must align with `params.tensors`.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.tensors.len() {
        return Err(TrainError::GradCount {
            expected: params.tensors.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.beta1 as f32;
    let b2 = cfg.beta2 as f32;
    // complements computed in f64: 1 - 0.999 in f32 loses five digits
    let c1 = (1.0 - cfg.beta1) as f32;
    let c2 = (1.0 - cfg.beta2) as f32;
    let lr = cfg.learning_rate as f32;
    let eps = cfg.adam_eps as f32;
    let bc1 = (1.0 - (cfg.beta1).powi(t)) as f32;
    let bc2 = (1.0 - (cfg.beta2).powi(t)) as f32;
    const CHUNK: usize = 4096;
    for (i, tensor) in params.tensors.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != tensor.values.len() {
            return Err(TrainError::MissingGrad(tensor.name.clone()));
        }
        crate::exec::for_each_zip3_mut(
            &mut tensor.values,
            &mut state.m[i],
            &mut state.v[i],
            CHUNK,
            |chunk, pv, mv, vv| {
                let gc = &g[chunk * CHUNK..chunk * CHUNK + pv.len()];
                for k in 0..pv.len() {
                    mv[k] = b1 * mv[k] + c1 * gc[k];
                    vv[k] = b2 * vv[k] + c2 * gc[k] * gc[k];
                    let m_hat = mv[k] / bc1;
                    let v_hat = vv[k] / bc2;
                    pv[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            },
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, Variant};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                p: 4,
                c: 2,
                l: 1,
                mlp_hidden: 8,
                j: 1,
                channels: vec![2],
                variant: Variant::MlpCnn,
                seed: 3,
                ..ModelConfig::desk_scale(3)
            },
            ..TrainConfig::desk_scale(3)
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_untouched() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg.model).unwrap();
        let before = params.tensors.clone();
        let grads: Vec<Vec<f32>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.values.len()])
            .collect();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert_eq!(state.step, 1);
        for (a, b) in params.tensors.iter().zip(&before) {
            assert_eq!(a.values, b.values, "{} changed", a.name);
        }
    }

    #[test]
    fn first_step_matches_hand_rolled_recurrence() {
        // single scalar parameter, constant gradient g = 2, lr = 0.1:
        // m = 0.1 g, m_hat = g; v = 0.001 g^2, v_hat = g^2
        // delta = -lr * g / (|g| + eps) ~= -lr
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.1;
        let mut params = init_params(&cfg.model).unwrap();
        let target = params.tensors[0].values[0];
        let mut grads: Vec<Vec<f32>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.values.len()])
            .collect();
        grads[0][0] = 2.0;
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();

        let g = 2.0f64;
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let delta = -0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        let frozen = -0.099_999_999_5f64;
        assert!((delta - frozen).abs() < 1e-9);
        let got = params.tensors[0].values[0] as f64 - target as f64;
        assert!((got - delta).abs() < 5e-7, "step {got} vs {delta}");
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let cfg = tiny_config();
        let run = || {
            let mut params = init_params(&cfg.model).unwrap();
            let grads: Vec<Vec<f32>> = params
                .tensors
                .iter()
                .map(|t| t.values.iter().map(|v| v * 0.5).collect())
                .collect();
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            params
        };
        let a = run();
        let b = run();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn gradient_count_mismatch_is_an_error() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg.model).unwrap();
        let mut state = AdamState::new(&params);
        assert!(matches!(
            adam_step(&mut params, &[], &mut state, &cfg),
            Err(TrainError::GradCount { .. })
        ));
    }
}
