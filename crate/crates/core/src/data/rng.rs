//! Counter-based Gaussian sampler.
//!
//! Every entry is a pure function of `(seed, stream, index)`:
//!
//! ```text
//! key      = mix(seed ^ mix(fnv1a(stream)))
//! bits(k)  = mix(key + (k + 1) * 0x9E3779B97F4A7C15)      (wrapping)
//! unif(k)  = (bits(k) >> 11) * 2^-53                      in [0, 1)
//! ```
//!
//! `mix` is the SplitMix64 finalizer. Entry `i` of a row-major fill comes
//! from the Box-Muller pair `p = i / 2`, which consumes counters `2p` and
//! `2p + 1`:
//!
//! ```text
//! r = sqrt(-2 ln(1 - unif(2p))),  t = 2 pi unif(2p + 1)
//! z = r cos t   (i even)
//! z = r sin t   (i odd)
//! ```
//!
//! The transcendental functions come from `libm`, so the output is the same
//! on every platform.

use nalgebra::DMatrix;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A named, seekable stream of pseudo-random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64, label: &str) -> Self {
        Stream {
            key: mix(seed ^ mix(fnv1a(label))),
        }
    }

    pub fn bits(&self, counter: u64) -> u64 {
        mix(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.bits(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal for entry `index`.
    pub fn normal(&self, index: u64) -> f64 {
        let pair = index / 2;
        let u1 = 1.0 - self.uniform(2 * pair); // (0, 1]
        let u2 = self.uniform(2 * pair + 1);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let t = 2.0 * std::f64::consts::PI * u2;
        if index % 2 == 0 {
            r * libm::cos(t)
        } else {
            r * libm::sin(t)
        }
    }
}

/// `rows x cols` matrix of i.i.d. `Normal(0, std^2)` entries, filled in
/// row-major order from stream `(seed, stream)`.
pub fn gaussian_matrix(seed: u64, stream: &str, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let s = Stream::new(seed, stream);
    DMatrix::from_fn(rows, cols, |i, j| std * s.normal((i * cols + j) as u64))
}
