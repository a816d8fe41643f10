//! Rayleigh block-fading channel realizations.
//!
//! Each block carries two instantaneous SNRs: `h` for the legitimate link and
//! `g` for the warden. Under Rayleigh fading both are exponential, and both are
//! snapped onto a finite grid whose levels are the conditional means of the
//! exponential over equal-probability bins. The grid therefore preserves the
//! mean SNR exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Converts a dB quantity to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Average channel quality and block structure of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Average legitimate SNR in dB.
    pub snr_h_db: f64,
    /// Average warden SNR in dB.
    pub snr_g_db: f64,
    /// Number of coherence blocks `L`.
    pub num_blocks: usize,
    pub quant_levels: usize,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            snr_h_db: 5.0,
            snr_g_db: 5.0,
            num_blocks: 10,
            quant_levels: 1024,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return config("num_blocks must be at least 1");
        }
        if self.quant_levels < 2 {
            return config("quant_levels must be at least 2");
        }
        if !self.snr_h_db.is_finite() || !self.snr_g_db.is_finite() {
            return config("average SNRs must be finite");
        }
        Ok(())
    }

    pub fn mean_h(&self) -> f64 {
        db_to_linear(self.snr_h_db)
    }

    pub fn mean_g(&self) -> f64 {
        db_to_linear(self.snr_g_db)
    }
}

/// Per-block instantaneous SNRs of the legitimate (`h`) and warden (`g`) links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSnrs {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

impl BlockSnrs {
    /// Builds a realization from explicit vectors.
    pub fn new(h: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        if h.len() != g.len() {
            return config(format!(
                "h and g lengths differ ({} vs {})",
                h.len(),
                g.len()
            ));
        }
        if h.is_empty() {
            return config("at least one block is required");
        }
        if h.iter().chain(&g).any(|&x| !(x > 0.0 && x.is_finite())) {
            return config("block SNRs must be positive and finite");
        }
        Ok(Self { h, g })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Quantization levels for one channel, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrGrid {
    levels: Vec<f64>,
    mean: f64,
}

impl SnrGrid {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Mean of the exponential this grid quantizes.
    pub fn distribution_mean(&self) -> f64 {
        self.mean
    }

    /// Mean of the levels under their (equal) bin probabilities.
    pub fn mean(&self) -> f64 {
        self.levels.iter().sum::<f64>() / self.levels.len() as f64
    }

    /// Index of the bin that contains `x`.
    pub fn bin_of(&self, x: f64) -> usize {
        let k = self.levels.len();
        // CDF of the exponential; -expm1(-t) = 1 - e^{-t}
        let u = -(-x / self.mean).exp_m1();
        ((u * k as f64) as usize).min(k - 1)
    }

    /// Snaps `x` to the representative level of its bin.
    pub fn snap(&self, x: f64) -> f64 {
        self.levels[self.bin_of(x)]
    }
}

/// Quantile-midpoint grid of the exponential distribution with the given mean.
///
/// Level `k` is `E[X | X in bin k]` where the bins split the exponential into
/// `levels` pieces of probability `1/levels` each.
pub fn build_grid(mean_snr_linear: f64, levels: usize) -> Result<SnrGrid> {
    if !(mean_snr_linear > 0.0 && mean_snr_linear.is_finite()) {
        return config("mean SNR must be positive and finite");
    }
    if levels < 2 {
        return config("at least two quantization levels are required");
    }
    let k = levels as f64;
    // Bin edges a_i = -ln(1 - i/K), with survival u_i = e^{-a_i} = 1 - i/K.
    // For X ~ Exp(1): K * int_a^b x e^{-x} dx = 1 + K (a u_a - b u_b).
    let edge = |i: usize| -> (f64, f64) {
        if i == levels {
            (f64::INFINITY, 0.0)
        } else {
            let u = 1.0 - i as f64 / k;
            (-u.ln(), u)
        }
    };
    let mut out = Vec::with_capacity(levels);
    let mut lo = edge(0);
    for i in 0..levels {
        let hi = edge(i + 1);
        let lo_term = lo.0 * lo.1;
        let hi_term = if hi.1 == 0.0 { 0.0 } else { hi.0 * hi.1 };
        out.push(mean_snr_linear * (1.0 + k * (lo_term - hi_term)));
        lo = hi;
    }
    Ok(SnrGrid {
        levels: out,
        mean: mean_snr_linear,
    })
}

/// Sampler for one channel configuration; holds both quantization grids.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    cfg: ChannelConfig,
    grid_h: SnrGrid,
    grid_g: SnrGrid,
}

impl ChannelModel {
    pub fn new(cfg: ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        let grid_h = build_grid(cfg.mean_h(), cfg.quant_levels)?;
        let grid_g = build_grid(cfg.mean_g(), cfg.quant_levels)?;
        Ok(Self {
            cfg,
            grid_h,
            grid_g,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn grid_h(&self) -> &SnrGrid {
        &self.grid_h
    }

    pub fn grid_g(&self) -> &SnrGrid {
        &self.grid_g
    }

    /// Draws one realization of `num_blocks` blocks.
    ///
    /// `h` and `g` come from two independent ChaCha streams seeded from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BlockSnrs {
        let mut rng_h = ChaCha8Rng::seed_from_u64(rng.random());
        let mut rng_g = ChaCha8Rng::seed_from_u64(rng.random());
        let n = self.cfg.num_blocks;
        let draw = |grid: &SnrGrid, r: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let x: f64 = Exp1.sample(r);
                    grid.snap(x * grid.distribution_mean())
                })
                .collect()
        };
        let h = draw(&self.grid_h, &mut rng_h);
        let g = draw(&self.grid_g, &mut rng_g);
        BlockSnrs { h, g }
    }
}

/// Convenience wrapper that builds the grids and draws one realization.
pub fn sample_blocks<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> Result<BlockSnrs> {
    Ok(ChannelModel::new(cfg.clone())?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Conditional mean of the unit exponential on `[a, b)` by composite
    /// Simpson quadrature, times the bin count (bin probability is 1/K).
    fn quadrature_bin_mean(a: f64, b: f64, k: usize) -> f64 {
        let b = b.min(a + 60.0);
        let n = 2000;
        let step = (b - a) / n as f64;
        let f = |x: f64| x * (-x).exp();
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * step);
        }
        acc * step / 3.0 * k as f64
    }

    #[test]
    fn two_levels_bracket_median() {
        let grid = build_grid(1.0, 2).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(grid.levels()[0] < ln2 && ln2 < grid.levels()[1]);
        // closed form: 1 - ln 2 and 1 + ln 2
        assert!((grid.levels()[0] - (1.0 - ln2)).abs() < 1e-12);
        assert!((grid.levels()[1] - (1.0 + ln2)).abs() < 1e-12);
    }

    #[test]
    fn grid_scales_with_mean() {
        let unit = build_grid(1.0, 64).unwrap();
        let scaled = build_grid(3.5, 64).unwrap();
        for (a, b) in unit.levels().iter().zip(scaled.levels()) {
            assert!((3.5 * a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn grid_matches_quadrature_and_preserves_mean() {
        let k = 1024;
        let grid = build_grid(1.0, k).unwrap();
        for &i in &[0usize, 1, 100, 511, 900, 1022, 1023] {
            let a = -(1.0 - i as f64 / k as f64).ln();
            let b = if i + 1 == k {
                f64::INFINITY
            } else {
                -(1.0 - (i + 1) as f64 / k as f64).ln()
            };
            let q = quadrature_bin_mean(a, b, k);
            assert!(
                (q - grid.levels()[i]).abs() < 1e-6 * q.max(1e-3),
                "bin {i}: quadrature {q} vs grid {}",
                grid.levels()[i]
            );
        }
        assert!((grid.mean() - 1.0).abs() < 1e-3);
        assert!(grid.levels().windows(2).all(|w| w[0] < w[1]));
        assert!(grid.levels()[0] > 0.0);
    }

    #[test]
    fn invalid_grid_arguments() {
        assert!(build_grid(0.0, 8).is_err());
        assert!(build_grid(1.0, 1).is_err());
        assert!(build_grid(f64::NAN, 8).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_on_grid() {
        let cfg = ChannelConfig {
            seed: 7,
            ..ChannelConfig::default()
        };
        let model = ChannelModel::new(cfg.clone()).unwrap();
        let a = model.sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let b = model.sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for x in &a.h {
            assert!(model.grid_h().levels().contains(x));
        }
        for x in &a.g {
            assert!(model.grid_g().levels().contains(x));
        }
    }

    #[test]
    fn sample_statistics() {
        let cfg = ChannelConfig {
            num_blocks: 100_000,
            ..ChannelConfig::default()
        };
        let model = ChannelModel::new(cfg.clone()).unwrap();
        let s = model.sample(&mut ChaCha8Rng::seed_from_u64(11));
        let n = s.len() as f64;
        let mh = s.h.iter().sum::<f64>() / n;
        let mg = s.g.iter().sum::<f64>() / n;
        assert!((mh / cfg.mean_h() - 1.0).abs() < 0.02, "mean h {mh}");
        let cov =
            s.h.iter()
                .zip(&s.g)
                .map(|(h, g)| (h - mh) * (g - mg))
                .sum::<f64>()
                / n;
        let sd = |v: &[f64], m: f64| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        let rho = cov / (sd(&s.h, mh) * sd(&s.g, mg));
        assert!(rho.abs() < 0.02, "correlation {rho}");
    }

    #[test]
    fn grids_monotone_in_mean() {
        let lo = build_grid(1.0, 32).unwrap();
        let hi = build_grid(1.7, 32).unwrap();
        assert!(lo.levels().iter().zip(hi.levels()).all(|(a, b)| a < b));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ChannelConfig::default();
        cfg.num_blocks = 0;
        assert!(cfg.validate().is_err());
        cfg.num_blocks = 3;
        cfg.quant_levels = 1;
        assert!(cfg.validate().is_err());
        cfg.quant_levels = 4;
        cfg.snr_g_db = f64::INFINITY;
        assert!(cfg.validate().is_err());
    }
}
