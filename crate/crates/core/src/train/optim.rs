use alloc::vec::Vec;

use super::TrainConfig;
use crate::model::EncoderParams;
use crate::tensor::Matrix;

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(Matrix::sum_squares).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Moments and parameters are rounded to f32 after every update so a float32
/// checkpoint captures the optimizer exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Applied updates, used for bias correction.
    pub updates: u64,
}

impl AdamW {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            updates: 0,
        }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn step(
        &mut self,
        params: &mut EncoderParams,
        grads: &[Matrix],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.updates += 1;
        let t = self.updates as f64;
        let bc1 = 1.0 - libm::pow(cfg.adam_beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.adam_beta2, t);
        for i in 0..params.len() {
            let decay = if params.decays(i) {
                cfg.weight_decay
            } else {
                0.0
            };
            let p = params.values_mut()[i].as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((p, m), v), &g) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(grads[i].as_slice())
            {
                *m = round_f32(cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g);
                *v = round_f32(cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g);
                let adam = (*m / bc1) / (libm::sqrt(*v / bc2) + cfg.adam_eps);
                *p = round_f32(*p - lr * (adam + decay * *p));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use alloc::vec;

    #[test]
    fn clipping_scales_to_the_limit() {
        let mut grads = vec![
            Matrix::from_vec(1, 2, vec![3.0, 0.0]),
            Matrix::from_vec(1, 1, vec![4.0]),
        ];
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        assert!((grads[0].get(0, 0) - 0.6).abs() < 1e-15);
        assert!((grads[1].get(0, 0) - 0.8).abs() < 1e-15);
        let mut small = vec![Matrix::from_vec(1, 1, vec![0.5])];
        assert_eq!(clip_grad_norm(&mut small, 1.0), 0.5);
        assert_eq!(small[0].get(0, 0), 0.5);
    }

    #[test]
    fn zero_gradient_step_only_decays_weights() {
        let cfg = EncoderConfig {
            vocab: 8,
            d_model: 8,
            d_ff: 16,
            ..Default::default()
        };
        let mut params = EncoderParams::init(&cfg, 1);
        // Give biases and norm offsets non-zero values so decay would show.
        for i in 0..params.len() {
            if !params.decays(i) {
                params.values_mut()[i].as_mut_slice().fill(0.75);
            }
        }
        let before = params.clone();
        let mut opt = AdamW::new(&params);
        let grads: Vec<Matrix> = params
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        let tcfg = TrainConfig::default();
        let lr = 0.004;
        opt.step(&mut params, &grads, lr, &tcfg);
        for i in 0..params.len() {
            for (a, b) in params.values()[i]
                .as_slice()
                .iter()
                .zip(before.values()[i].as_slice())
            {
                if params.decays(i) {
                    let expected = (b * (1.0 - lr * tcfg.weight_decay)) as f32 as f64;
                    assert_eq!(*a, expected);
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn first_update_moves_by_learning_rate() {
        // With bias correction the first step is lr·sign(g) (up to eps).
        let cfg = EncoderConfig {
            vocab: 4,
            d_model: 4,
            d_ff: 4,
            n_blocks: 0,
            ..Default::default()
        };
        let mut params = EncoderParams::init(&cfg, 2);
        let before = params.clone();
        let mut grads: Vec<Matrix> = params
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        let hb = params.index_of("head.b").unwrap();
        grads[hb].as_mut_slice()[0] = 0.3;
        let mut opt = AdamW::new(&params);
        opt.step(&mut params, &grads, 0.01, &TrainConfig::default());
        let moved = before.values()[hb].get(0, 0) - params.values()[hb].get(0, 0);
        assert!((moved - 0.01).abs() < 1e-8, "{moved}");
    }
}
