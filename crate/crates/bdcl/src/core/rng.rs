//! Deterministic random streams.
//!
//! Every stochastic component in the crate draws from a [`SeededRng`], a thin
//! wrapper over ChaCha8: identical seeds yield identical streams across runs
//! and platforms. The stream is single-owner — one stream per logical task,
//! never shared between tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream for a named sub-task. The tag is hashed
    /// with FNV-1a so that distinct tags give unrelated streams under the
    /// same base seed.
    pub fn derive(seed: u64, tag: &str) -> Self {
        SeededRng::new(seed ^ fnv1a64(tag.as_bytes()))
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Standard normal via Box-Muller on two uniform draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn usize_below(&mut self, upper: usize) -> usize {
        debug_assert!(upper > 0);
        self.inner.gen_range(0..upper)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, data: &mut [T]) {
        data.shuffle(&mut self.inner);
    }

    /// Uniform draw from the probability simplex (normalized unit-rate
    /// exponentials, i.e. a flat Dirichlet).
    pub fn simplex(&mut self, k: usize) -> Vec<f64> {
        let mut draws: Vec<f64> = (0..k)
            .map(|_| {
                let u = loop {
                    let u = self.uniform();
                    if u > 0.0 {
                        break u;
                    }
                };
                -u.ln()
            })
            .collect();
        let total: f64 = draws.iter().sum();
        for d in &mut draws {
            *d /= total;
        }
        draws
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
