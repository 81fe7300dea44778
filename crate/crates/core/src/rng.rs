//! Keyed, schedule-independent random streams for designs and noise.
//!
//! Every draw in the toolkit comes from a [`StreamKey`]. A key is expanded into
//! a ChaCha8 key, so the output for a key is fixed no matter which worker
//! evaluates it or in which order replicates run.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role labels used as `stream_id`s.
pub mod streams {
    pub const DESIGN: u32 = 1;
    pub const NOISE: u32 = 2;
    pub const FIXED_NOISE: u32 = 3;
    pub const SIGNS: u32 = 4;
    pub const PROBE: u32 = 5;
    pub const MULTISTART: u32 = 6;
    pub const PSI_DESIGN: u32 = 7;
    pub const NORM_NOISE: u32 = 8;

    /// Tags a role with a grid-point index so grid points never share draws.
    pub fn at_grid(role: u32, grid_index: usize) -> u32 {
        role | ((grid_index as u32 + 1) << 8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub stream_id: u32,
    pub replicate_index: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64, stream_id: u32, replicate_index: u64) -> Self {
        Self { seed, stream_id, replicate_index }
    }

    pub fn with_stream(self, stream_id: u32) -> Self {
        Self { stream_id, ..self }
    }

    pub fn with_replicate(self, replicate_index: u64) -> Self {
        Self { replicate_index, ..self }
    }

    /// Key for the `index`-th sub-replicate of this replicate (e.g. an inner
    /// noise draw inside an outer design draw).
    pub fn child(self, index: u64) -> Self {
        let mixed = splitmix64(self.replicate_index ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Self { replicate_index: mixed, ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.replicate_index.to_le_bytes());
        bytes[16..20].copy_from_slice(&self.stream_id.to_le_bytes());
        ChaCha8Rng::from_seed(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Gaussian,
    Rademacher,
    /// Uniform on [−Γ√3, Γ√3], then divided by Γ so entries have unit variance.
    UniformBounded {
        gamma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    Raw,
    /// Divide every entry by √d.
    BySqrtD,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub n: usize,
    pub d: usize,
    pub distribution: Distribution,
    pub scaling: Scaling,
}

impl DesignSpec {
    pub fn new(n: usize, d: usize, distribution: Distribution, scaling: Scaling) -> Self {
        Self { n, d, distribution, scaling }
    }

    pub fn gaussian(n: usize, d: usize) -> Self {
        Self::new(n, d, Distribution::Gaussian, Scaling::Raw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config(format!("design needs n >= 1 and d >= 1, got n={}, d={}", self.n, self.d)));
        }
        if let Distribution::UniformBounded { gamma } = self.distribution {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!("uniform_bounded requires gamma > 0, got {gamma}")));
            }
        }
        Ok(())
    }
}

/// An n×d covariate matrix. Injected designs carry no `DesignSpec` or key.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub spec: Option<DesignSpec>,
    pub key: Option<StreamKey>,
}

impl Design {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        Self { matrix, spec: None, key: None }
    }

    /// Builds a design from row-major data.
    pub fn from_rows(n: usize, d: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, found: data.len() });
        }
        Ok(Self::from_matrix(DMatrix::from_row_slice(n, d, data)))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_matrix(DMatrix::identity(n, n))
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { matrix: &self.matrix * factor, spec: self.spec, key: self.key }
    }
}

fn draw_entry<R: Rng>(rng: &mut R, distribution: Distribution) -> f64 {
    match distribution {
        Distribution::Gaussian => rng.sample(StandardNormal),
        Distribution::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
        Distribution::UniformBounded { gamma } => {
            let half_width = gamma * 3f64.sqrt();
            rng.random_range(-half_width..=half_width) / gamma
        }
    }
}

/// Draws a design. Entries are generated row by row.
pub fn sample_design(spec: DesignSpec, key: StreamKey) -> Result<Design> {
    spec.validate()?;
    let mut rng = key.rng();
    let scale = match spec.scaling {
        Scaling::Raw => 1.0,
        Scaling::BySqrtD => 1.0 / (spec.d as f64).sqrt(),
    };
    let mut data = Vec::with_capacity(spec.n * spec.d);
    for _ in 0..spec.n * spec.d {
        data.push(draw_entry(&mut rng, spec.distribution) * scale);
    }
    Ok(Design { matrix: DMatrix::from_row_slice(spec.n, spec.d, &data), spec: Some(spec), key: Some(key) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    Gaussian { variance: f64 },
    Rademacher,
}

impl NoiseKind {
    pub fn standard() -> Self {
        NoiseKind::Gaussian { variance: 1.0 }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            NoiseKind::Gaussian { variance } => variance,
            NoiseKind::Rademacher => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseKind::Gaussian { variance } if !(variance > 0.0 && variance.is_finite()) => {
                Err(Error::Config(format!("noise variance must be > 0, got {variance}")))
            }
            _ => Ok(()),
        }
    }
}

pub fn sample_noise(kind: NoiseKind, length: usize, key: StreamKey) -> Result<DVector<f64>> {
    kind.validate()?;
    if length == 0 {
        return Err(Error::Config("noise length must be >= 1".into()));
    }
    let mut rng = key.rng();
    Ok(match kind {
        NoiseKind::Gaussian { variance } => {
            let sd = variance.sqrt();
            DVector::from_fn(length, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
        }
        NoiseKind::Rademacher => DVector::from_fn(length, |_, _| draw_entry(&mut rng, Distribution::Rademacher)),
    })
}

/// Standard Gaussian vector.
pub fn standard_normal(length: usize, key: StreamKey) -> DVector<f64> {
    let mut rng = key.rng();
    DVector::from_fn(length, |_, _| rng.sample(StandardNormal))
}

/// Uniform random signs.
pub fn rademacher(length: usize, key: StreamKey) -> DVector<f64> {
    let mut rng = key.rng();
    DVector::from_fn(length, |_, _| draw_entry(&mut rng, Distribution::Rademacher))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> StreamKey {
        StreamKey::new(17, streams::DESIGN, 0)
    }

    #[test]
    fn design_is_deterministic() {
        let spec = DesignSpec::gaussian(2, 2);
        let a = sample_design(spec, key()).unwrap();
        let b = sample_design(spec, key()).unwrap();
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn distinct_keys_give_distinct_draws() {
        let spec = DesignSpec::gaussian(3, 3);
        let a = sample_design(spec, key()).unwrap();
        let b = sample_design(spec, key().with_replicate(1)).unwrap();
        let c = sample_design(spec, key().with_stream(streams::NOISE)).unwrap();
        assert_ne!(a.matrix, b.matrix);
        assert_ne!(a.matrix, c.matrix);
    }

    #[test]
    fn rademacher_support() {
        let spec = DesignSpec::new(4, 4, Distribution::Rademacher, Scaling::Raw);
        let x = sample_design(spec, key()).unwrap();
        assert!(x.matrix.iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn uniform_bounded_support_and_scaling() {
        let spec = DesignSpec::new(10, 50, Distribution::UniformBounded { gamma: 2.5 }, Scaling::BySqrtD);
        let x = sample_design(spec, key()).unwrap();
        let bound = 3f64.sqrt() / 50f64.sqrt();
        assert!(x.matrix.iter().all(|v| v.abs() <= bound + 1e-15));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(sample_design(DesignSpec::gaussian(0, 3), key()).is_err());
        let bad = DesignSpec::new(2, 2, Distribution::UniformBounded { gamma: 0.0 }, Scaling::Raw);
        assert!(matches!(sample_design(bad, key()), Err(Error::Config(_))));
        assert!(sample_noise(NoiseKind::Gaussian { variance: -1.0 }, 3, key()).is_err());
        assert!(sample_noise(NoiseKind::Rademacher, 0, key()).is_err());
    }

    #[test]
    fn noise_is_deterministic() {
        let k = key().with_stream(streams::NOISE);
        let a = sample_noise(NoiseKind::standard(), 3, k).unwrap();
        let b = sample_noise(NoiseKind::standard(), 3, k).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn child_keys_are_distinct() {
        let k = key();
        let kids: std::collections::HashSet<_> = (0..1000).map(|i| k.child(i)).collect();
        assert_eq!(kids.len(), 1000);
        assert_ne!(k.child(0), k.with_replicate(1).child(0));
    }
}
