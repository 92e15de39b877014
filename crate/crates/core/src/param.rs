//! Trainable parameters with stable identities.
//!
//! A `Param` wraps a tensor and a process-unique id. The tape deduplicates
//! registrations by id, so a parameter used twice in one forward pass (the
//! shared channel-attention MLP, window-shared position tables) accumulates
//! gradients from all of its uses.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::scalar::{r, Real};
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Param<R> {
    id: u64,
    pub value: Tensor<R>,
    /// Weight decay applies only to connection weights, not to norm affines
    /// or biases.
    pub decay: bool,
}

impl<R: Real> Param<R> {
    pub fn new(value: Tensor<R>) -> Self {
        Param { id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed), value: value.with_grad(), decay: true }
    }

    pub fn no_decay(value: Tensor<R>) -> Self {
        let mut p = Param::new(value);
        p.decay = false;
        p
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Uniform init in +-sqrt(1/fan_in).
pub fn uniform_fan_in<R: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<R> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| r(rng.gen_range(-bound..bound)))
}

/// Zero-mean truncated normal (resample outside two standard deviations).
pub fn trunc_normal<R: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    Tensor::from_fn(shape, |_| loop {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return r(z * std);
        }
    })
}

pub type Named<'a, R> = Vec<(String, &'a Param<R>)>;
pub type NamedMut<'a, R> = Vec<(String, &'a mut Param<R>)>;

/// Prefix every name in a child module's parameter list.
pub fn scoped<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ids_are_unique() {
        let a = Param::new(Tensor::<f32>::zeros(&[2]));
        let b = Param::new(Tensor::<f32>::zeros(&[2]));
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn init_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = uniform_fan_in(&[64, 16], 16, &mut rng);
        let bound = (1.0f64 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        let n: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut rng);
        assert!(n.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }
}
