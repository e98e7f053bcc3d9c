use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Stable 64-bit digest of a seed and a label. Independent of the Rust
/// version, unlike `DefaultHasher`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Array1<f64> {
    Array1::from_iter((0..len).map(|_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    }))
}

pub fn normal_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn uniform_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    bound: f64,
) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

pub fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, bound: f64) -> Array1<f64> {
    Array1::from_iter((0..len).map(|_| rng.random_range(-bound..=bound)))
}
