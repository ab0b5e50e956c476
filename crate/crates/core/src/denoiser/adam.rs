use crate::error::{Error, Result};

use super::layers::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam. Moments are kept in double precision whatever the
/// parameter type.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<S>(params: &[Vec<S>], lr: f64) -> Self {
        Self::with_sizes(&params.iter().map(Vec::len).collect::<Vec<_>>(), lr)
    }

    pub fn with_sizes(sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn check_shapes<S>(&self, tensors: &[Vec<S>], what: &str) -> Result<()> {
        let ok = tensors.len() == self.m.len()
            && tensors.iter().zip(&self.m).all(|(t, m)| t.len() == m.len());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{what} shapes do not match the optimizer state")))
        }
    }

    pub fn apply<S: Scalar>(&mut self, params: &mut [Vec<S>], grads: &[Vec<S>]) -> Result<()> {
        self.check_shapes(params, "parameter")?;
        self.check_shapes(grads, "gradient")?;
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let delta = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPSILON);
                p[i] = S::from_f64(p[i].to_f64() - delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook scalar Adam on f(w) = w^2.
    fn oracle(w0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = vec![w];
        for k in 1..=steps {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k as i32));
            let vh = v / (1.0 - 0.999f64.powi(k as i32));
            w -= lr * mh / (vh.sqrt() + 1e-8);
            out.push(w);
        }
        out
    }

    fn run(w0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let mut p = vec![vec![w0]];
        let mut st = AdamState::new(&p, lr);
        let mut out = vec![w0];
        for _ in 0..steps {
            let g = vec![vec![2.0 * p[0][0]]];
            st.apply(&mut p, &g).unwrap();
            out.push(p[0][0]);
        }
        out
    }

    #[test]
    fn matches_scalar_oracle() {
        for lr in [0.1, 0.01, 1e-3] {
            let a = run(1.0, lr, 50);
            let b = oracle(1.0, lr, 50);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_magnitude_decreases() {
        // lr 0.01: every step moves by about lr, so w stays positive for 50
        // steps and |w| falls monotonically.
        let w = run(1.0, 0.01, 50);
        for pair in w.windows(2) {
            assert!(pair[1].abs() < pair[0].abs());
        }
        // lr 0.1: |w| falls strictly until the iterate first crosses zero,
        // after which momentum makes it oscillate around the minimum.
        let w = run(1.0, 0.1, 50);
        let cross = w.iter().position(|&x| x <= 0.0).unwrap();
        assert!(cross > 5);
        for pair in w[..cross].windows(2) {
            assert!(pair[1].abs() < pair[0].abs());
        }
        assert!(w[50].abs() < 0.1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![vec![0.25f32, -3.0], vec![1.5]];
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.1);
        for _ in 0..3 {
            st.apply(&mut p, &[vec![0.0, 0.0], vec![0.0]]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![vec![0.0f64; 2]];
        let mut st = AdamState::new(&p, 0.1);
        assert!(st.apply(&mut p, &[vec![0.0; 3]]).is_err());
        assert!(st.apply(&mut p, &[]).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
