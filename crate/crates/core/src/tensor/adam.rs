use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers for a fixed list of parameters.
///
/// Elements listed as frozen are never read or written by [`adam_step`],
/// so they keep whatever value they were initialized with.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    trainable: Vec<Vec<bool>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let none: Vec<Vec<usize>> = vec![Vec::new(); params.len()];
        Self::with_frozen_rows(params, &none, config)
    }

    /// `frozen_rows[i]` lists trailing-axis rows of `params[i]` to exclude.
    pub fn with_frozen_rows(params: &[Tensor], frozen_rows: &[Vec<usize>], config: AdamConfig) -> Self {
        let trainable = params
            .iter()
            .zip(frozen_rows)
            .map(|(p, frozen)| {
                let mut t = vec![true; p.numel()];
                let c = p.cols();
                for &r in frozen {
                    t[r * c..(r + 1) * c].fill(false);
                }
                t
            })
            .collect();
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            trainable,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update, followed by lr-scaled L2 decay
/// (`p -= lr * l2 * p`) and L1 shrinkage (`p -= lr * l1 * sign(p)`).
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    l2: f64,
    l1: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Optimizer(format!(
            "{} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.numel() != state.m[i].len() {
            return Err(Error::Optimizer(format!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Optimizer(format!("non-finite gradient for parameter {i}")));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v, mask) = (&mut state.m[i], &mut state.v[i], &state.trainable[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            if !mask[j] {
                continue;
            }
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
            *w -= lr * l2 * *w;
            if l1 != 0.0 && *w != 0.0 {
                *w -= lr * l1 * w.signum();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::zeros([2])];
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, 1e-3, 0.0, 0.0).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step(), 5);
    }

    #[test]
    fn first_step_matches_hand_rolled_update() {
        let mut p = vec![Tensor::scalar(0.5)];
        let g = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s, 0.1, 0.0, 0.0).unwrap();
        // m = 0.1, v = 0.001; corrected to 1 and 1.
        let expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((0.5 - p[0].data()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn l2_shrinks_toward_zero() {
        let mut p = vec![Tensor::vector(vec![2.0, -3.0])];
        let g = vec![Tensor::zeros([2])];
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut prev = p[0].data().to_vec();
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s, 0.1, 0.5, 0.0).unwrap();
            for (a, b) in p[0].data().iter().zip(&prev) {
                assert!(a.abs() < b.abs() && a.signum() == b.signum());
            }
            prev = p[0].data().to_vec();
        }
    }

    #[test]
    fn frozen_rows_stay_put() {
        let mut p = vec![Tensor::new([3, 2], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap()];
        let g = vec![Tensor::filled([3, 2], 1.0)];
        let mut s = AdamState::with_frozen_rows(&p, &[vec![1]], AdamConfig::default());
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut s, 0.1, 0.1, 0.1).unwrap();
        }
        assert_eq!(p[0].row(1), &[0.0, 0.0]);
        assert!(p[0].row(0)[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(f64::NAN)];
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &g, &mut s, 0.1, 0.0, 0.0), Err(Error::Optimizer(_))));
        assert_eq!(s.step(), 0);
    }
}
