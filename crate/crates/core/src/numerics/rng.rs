//! Splittable seeding: every consumer derives its own stream from a root seed
//! and a label, so adding a consumer never perturbs another one's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Array;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            key: splitmix64(seed),
        }
    }

    pub fn child(&self, label: &str) -> SeedStream {
        SeedStream {
            key: splitmix64(self.key ^ fnv1a(label)),
        }
    }

    pub fn index(&self, i: u64) -> SeedStream {
        SeedStream {
            key: splitmix64(self.key.wrapping_add(splitmix64(i))),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self, label: &str) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.child(label).key)
    }
}

pub fn normal_array(rng: &mut StreamRng, shape: &[usize], std: f64) -> Array {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Array::from_vec(shape.to_vec(), data).expect("length matches shape")
}

pub fn uniform_array(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::from_vec(shape.to_vec(), data).expect("length matches shape")
}
