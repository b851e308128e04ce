//! Seed plumbing shared by initialization, augmentation, and synthesis.
//!
//! Every random decision in the crate flows from a user-visible 64-bit seed
//! through [`stream_seed`], which mixes the seed with coarse coordinates
//! (such as epoch number and stream role) so that separate consumers get
//! decorrelated, individually reproducible streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finalizer of the splitmix64 generator; a cheap, well-dispersed 64-bit
/// mixing function.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from `(seed, role, index)`. Streams with
/// any differing coordinate are uncorrelated; identical coordinates always
/// produce the identical stream.
pub(crate) fn stream_seed(seed: u64, role: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(role.wrapping_mul(0x9E37_79B9) ^ splitmix64(index)))
}

/// A seeded generator for the given stream coordinates.
pub(crate) fn stream_rng(seed: u64, role: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, role, index))
}

/// Stream role for shuffling example order each epoch.
pub(crate) const ROLE_SHUFFLE: u64 = 1;
/// Stream role for augmentation decisions each epoch.
pub(crate) const ROLE_AUGMENT: u64 = 2;
/// Stream role for synthetic data generation.
pub(crate) const ROLE_SYNTH: u64 = 3;

/// Standard Gaussian draws via the Box-Muller transform: two uniforms per
/// pair of normals, the spare normal cached between calls.
pub(crate) struct GaussianSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSource {
    pub(crate) fn new(seed: u64) -> Self {
        GaussianSource { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    pub(crate) fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // gen() yields [0, 1); flip to (0, 1] so the log stays finite.
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}
