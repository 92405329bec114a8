//! Synthetic multi-domain benchmark with a known ground truth.
//!
//! Every domain shares one generating recipe: base logits are drawn from an
//! isotropic normal, the label is sampled from their softmax (so the base
//! logits are perfectly calibrated by construction), and the presented
//! logits are the base logits multiplied by a per-domain scale factor drawn
//! uniformly at random. The scale factor is exactly the temperature that
//! undoes the distortion, and the softmax maximum of the base logits is
//! recorded as each sample's oracle confidence.
//!
//! Embeddings either expose the base logits and a noisy copy of the scale
//! directly, or pass (base logits, scale repeated q times) through a fixed
//! orthogonal mixing matrix before adding noise — same information, no
//! single coordinate carrying the scale.
//!
//! All randomness comes from one ChaCha8 stream seeded from the config, so
//! a config value determines the dataset bit for bit.

use crate::dataset::{DomainDataset, MultiDomainDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, EceReport, MultiDomainReport};
use crate::prob;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How embeddings encode the generating factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// (base logits, scale + noise); dimension = classes + 1.
    Direct,
    /// Orthogonal mix of (base logits, scale repeated `extra_dims` times),
    /// plus noise on every coordinate; dimension = classes + extra_dims.
    Mixed { extra_dims: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// In-distribution domain count.
    pub num_domains: usize,
    /// Additional held-out domains generated with fresh scale factors.
    pub ood_domains: usize,
    pub samples_per_domain: usize,
    pub num_classes: usize,
    pub embedding: EmbeddingKind,
    /// Scale factors are drawn uniformly from this interval.
    pub scale_range: (f64, f64),
    /// Standard deviation of the base logits.
    pub logit_std: f64,
    /// Standard deviation of the embedding noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_domains: 10,
            ood_domains: 0,
            samples_per_domain: 1000,
            num_classes: 10,
            embedding: EmbeddingKind::Direct,
            scale_range: (0.5, 3.0),
            logit_std: 2.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let msg = if self.num_domains == 0 {
            Some("num_domains must be at least 1".to_string())
        } else if self.samples_per_domain == 0 {
            Some("samples_per_domain must be at least 1".to_string())
        } else if self.num_classes < 2 {
            Some("num_classes must be at least 2".to_string())
        } else if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            Some(format!("scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi"))
        } else if !(self.logit_std.is_finite() && self.logit_std > 0.0) {
            Some(format!("logit_std {} must be positive", self.logit_std))
        } else if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            Some(format!("noise_std {} must be non-negative", self.noise_std))
        } else if matches!(self.embedding, EmbeddingKind::Mixed { extra_dims: 0 }) {
            Some("mixed embeddings need at least one extra dimension".to_string())
        } else {
            None
        };
        msg.map_or(Ok(()), |m| Err(Error::InvalidConfig(m)))
    }

    pub fn embedding_dim(&self) -> usize {
        match self.embedding {
            EmbeddingKind::Direct => self.num_classes + 1,
            EmbeddingKind::Mixed { extra_dims } => self.num_classes + extra_dims,
        }
    }
}

/// Orthogonal matrix from the QR factorization of a Gaussian draw.
fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let g = DMatrix::from_fn(dim, dim, |_, _| normal.sample(rng));
    g.qr().q()
}

/// Generate a benchmark. Returns the dataset (in-distribution domains
/// `d0..`, then held-out domains `ood0..`) and the true scale factor per
/// domain id.
pub fn generate(config: &SynthConfig) -> Result<(MultiDomainDataset, BTreeMap<String, f64>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let j = config.num_classes;
    let dim = config.embedding_dim();
    let mixing = match config.embedding {
        EmbeddingKind::Direct => None,
        EmbeddingKind::Mixed { .. } => Some(random_orthogonal(dim, &mut rng)),
    };
    let logit_dist = Normal::new(0.0, config.logit_std).expect("validated std");
    let noise_dist = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
        .expect("validated std");
    let draw_noise = |rng: &mut ChaCha8Rng, dist: &Normal<f64>| {
        if config.noise_std == 0.0 {
            0.0
        } else {
            dist.sample(rng)
        }
    };
    let (lo, hi) = config.scale_range;

    let mut domains = Vec::with_capacity(config.num_domains + config.ood_domains);
    let mut scales = BTreeMap::new();
    let splits = std::iter::repeat(Split::Ind)
        .take(config.num_domains)
        .chain(std::iter::repeat(Split::Ood).take(config.ood_domains));
    let mut ood_seen = 0usize;
    for (k, split) in splits.enumerate() {
        let id = match split {
            Split::Ind => format!("d{k}"),
            Split::Ood => {
                let id = format!("ood{ood_seen}");
                ood_seen += 1;
                id
            }
        };
        let scale = if lo == hi { lo } else { rng.random_range(lo..hi) };
        scales.insert(id.clone(), scale);

        let n = config.samples_per_domain;
        let mut labels = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n * j);
        let mut embeddings = Vec::with_capacity(n * dim);
        let mut oracle = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..j).map(|_| logit_dist.sample(&mut rng)).collect();
            let probs = prob::softmax_t(&z, 1.0)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut label = j - 1;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    label = c;
                    break;
                }
            }
            labels.push(label);
            logits.extend(z.iter().map(|v| scale * v));
            oracle.push(prob::confidence(&z, 1.0)?);
            match (&config.embedding, &mixing) {
                (EmbeddingKind::Direct, _) => {
                    embeddings.extend_from_slice(&z);
                    embeddings.push(scale + draw_noise(&mut rng, &noise_dist));
                }
                (EmbeddingKind::Mixed { extra_dims }, Some(q)) => {
                    let mut v = z.clone();
                    v.extend(std::iter::repeat(scale).take(*extra_dims));
                    for r in 0..dim {
                        let mut acc = 0.0;
                        for (c, vc) in v.iter().enumerate() {
                            acc += q[(r, c)] * vc;
                        }
                        embeddings.push(acc + draw_noise(&mut rng, &noise_dist));
                    }
                }
                (EmbeddingKind::Mixed { .. }, None) => unreachable!("mixing built above"),
            }
        }
        domains.push(DomainDataset::new(
            id,
            split,
            j,
            dim,
            labels,
            logits,
            embeddings,
            Some(oracle),
        )?);
    }
    Ok((MultiDomainDataset::new(domains)?, scales))
}

/// Calibration errors of the oracle confidences — the softmax maxima of the
/// undistorted base logits — against argmax correctness. This is the floor
/// any confidence estimator built on the presented logits is chasing.
pub fn oracle_report(data: &MultiDomainDataset, bins: usize) -> Result<MultiDomainReport> {
    if bins == 0 {
        return Err(Error::InvalidBinCount);
    }
    let mut per_domain: Vec<(String, EceReport)> = Vec::with_capacity(data.num_domains());
    let total = data.total_samples();
    let mut pooled_conf = Vec::with_capacity(total);
    let mut pooled_correct = Vec::with_capacity(total);
    for d in data.domains() {
        let confs = d
            .oracle_conf()
            .ok_or_else(|| Error::MissingOracle(d.id().to_string()))?;
        let mut correct = Vec::with_capacity(d.len());
        for i in 0..d.len() {
            correct.push(prob::predict(d.logits_row(i))? == d.label(i));
        }
        pooled_conf.extend_from_slice(confs);
        pooled_correct.extend_from_slice(&correct);
        per_domain.push((d.id().to_string(), metrics::ece(confs, &correct, bins)?));
    }
    Ok(MultiDomainReport {
        num_bins: bins,
        mdece: metrics::mdece(&per_domain)?,
        pooled: metrics::ece(&pooled_conf, &pooled_correct, bins)?,
        per_domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(embedding: EmbeddingKind) -> SynthConfig {
        SynthConfig {
            num_domains: 3,
            ood_domains: 2,
            samples_per_domain: 50,
            num_classes: 4,
            embedding,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_reproduces_dataset_exactly() {
        let cfg = small(EmbeddingKind::Direct);
        let (a, sa) = generate(&cfg).unwrap();
        let (b, sb) = generate(&cfg).unwrap();
        assert_eq!(sa, sb);
        for (da, db) in a.domains().iter().zip(b.domains()) {
            assert_eq!(da.id(), db.id());
            for i in 0..da.len() {
                assert_eq!(da.logits_row(i), db.logits_row(i));
                assert_eq!(da.embedding_row(i), db.embedding_row(i));
                assert_eq!(da.label(i), db.label(i));
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small(EmbeddingKind::Direct);
        let other = SynthConfig { seed: 8, ..cfg.clone() };
        let (a, _) = generate(&cfg).unwrap();
        let (b, _) = generate(&other).unwrap();
        assert_ne!(a.domains()[0].logits_row(0), b.domains()[0].logits_row(0));
    }

    #[test]
    fn domain_layout_and_scales() {
        let cfg = small(EmbeddingKind::Direct);
        let (data, scales) = generate(&cfg).unwrap();
        let ids: Vec<&str> = data.domains().iter().map(|d| d.id()).collect();
        assert_eq!(ids, ["d0", "d1", "d2", "ood0", "ood1"]);
        assert_eq!(
            data.domains().iter().map(|d| d.split()).collect::<Vec<_>>(),
            [Split::Ind, Split::Ind, Split::Ind, Split::Ood, Split::Ood]
        );
        assert_eq!(scales.len(), 5);
        for c in scales.values() {
            assert!((0.5..=3.0).contains(c), "scale {c} outside range");
        }
    }

    #[test]
    fn direct_embeddings_expose_base_logits_and_scale() {
        let cfg = small(EmbeddingKind::Direct);
        let (data, scales) = generate(&cfg).unwrap();
        for d in data.domains() {
            let c = scales[d.id()];
            for i in 0..d.len() {
                let emb = d.embedding_row(i);
                assert_eq!(emb.len(), cfg.num_classes + 1);
                // presented logits are exactly scale * base logits
                for (zj, lj) in emb[..cfg.num_classes].iter().zip(d.logits_row(i)) {
                    assert_abs_diff_eq!(c * zj, *lj, epsilon = 1e-12);
                }
                // the appended coordinate is the scale plus small noise
                assert_abs_diff_eq!(emb[cfg.num_classes], c, epsilon = 0.05 * 6.0);
            }
        }
    }

    #[test]
    fn mixing_preserves_norms_when_noiseless() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small(EmbeddingKind::Mixed { extra_dims: 3 })
        };
        let (data, scales) = generate(&cfg).unwrap();
        for d in data.domains() {
            let c = scales[d.id()];
            for i in 0..d.len().min(10) {
                let emb = d.embedding_row(i);
                assert_eq!(emb.len(), cfg.num_classes + 3);
                let z_sq: f64 = d.logits_row(i).iter().map(|l| (l / c) * (l / c)).sum();
                let want = (z_sq + 3.0 * c * c).sqrt();
                let got = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert_abs_diff_eq!(got, want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn no_embedding_coordinate_carries_the_scale_alone() {
        // with mixing, every coordinate should correlate only weakly with
        // the scale compared to the direct encoding's dedicated coordinate
        let cfg = SynthConfig {
            num_domains: 6,
            ood_domains: 0,
            samples_per_domain: 200,
            ..small(EmbeddingKind::Mixed { extra_dims: 2 })
        };
        let (data, scales) = generate(&cfg).unwrap();
        let dim = cfg.num_classes + 2;
        // per-coordinate between-domain spread of the mean, relative to the
        // scale spread: the mixed encoding spreads it over all coordinates
        let mut max_align = 0.0f64;
        for coord in 0..dim {
            let mut means = Vec::new();
            for d in data.domains() {
                let m: f64 = (0..d.len()).map(|i| d.embedding_row(i)[coord]).sum::<f64>()
                    / d.len() as f64;
                means.push((m, scales[d.id()]));
            }
            let corr = correlation(&means);
            max_align = max_align.max(corr.abs());
        }
        // all coordinates move with the scale a bit, none is a clean copy
        assert!(max_align < 0.9999, "a coordinate is a pure scale copy");
    }

    fn correlation(pairs: &[(f64, f64)]) -> f64 {
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let vx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let vy: f64 = pairs.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
        cov / (vx.sqrt() * vy.sqrt()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn labels_follow_base_softmax() {
        let cfg = SynthConfig {
            num_domains: 1,
            ood_domains: 0,
            samples_per_domain: 4000,
            num_classes: 5,
            seed: 11,
            ..SynthConfig::default()
        };
        let (data, _) = generate(&cfg).unwrap();
        let d = &data.domains()[0];
        let mut hits = 0usize;
        let mut conf_sum = 0.0;
        for i in 0..d.len() {
            if prob::predict(d.logits_row(i)).unwrap() == d.label(i) {
                hits += 1;
            }
            conf_sum += d.oracle_conf().unwrap()[i];
        }
        let acc = hits as f64 / d.len() as f64;
        let mean_conf = conf_sum / d.len() as f64;
        assert!(acc > 0.4, "argmax accuracy {acc} at chance level");
        // oracle confidences are calibrated by construction
        assert_abs_diff_eq!(acc, mean_conf, epsilon = 0.03);
    }

    #[test]
    fn oracle_report_is_near_zero_for_the_generator() {
        let cfg = SynthConfig {
            num_domains: 3,
            samples_per_domain: 3000,
            seed: 5,
            ..SynthConfig::default()
        };
        let (data, _) = generate(&cfg).unwrap();
        let report = oracle_report(&data, 10).unwrap();
        assert!(report.mdece < 0.05, "oracle mdece = {}", report.mdece);
        assert_eq!(report.per_domain.len(), 3);
    }

    #[test]
    fn oracle_report_requires_oracle_confidences() {
        let d = DomainDataset::new(
            "a",
            Split::Ind,
            2,
            1,
            vec![0, 1],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.1, 0.2],
            None,
        )
        .unwrap();
        let data = MultiDomainDataset::new(vec![d]).unwrap();
        assert!(matches!(
            oracle_report(&data, 10),
            Err(Error::MissingOracle(_))
        ));
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { num_domains: 0, ..SynthConfig::default() },
            SynthConfig { samples_per_domain: 0, ..SynthConfig::default() },
            SynthConfig { num_classes: 1, ..SynthConfig::default() },
            SynthConfig { scale_range: (0.0, 1.0), ..SynthConfig::default() },
            SynthConfig { scale_range: (2.0, 1.0), ..SynthConfig::default() },
            SynthConfig { logit_std: 0.0, ..SynthConfig::default() },
            SynthConfig { noise_std: -0.1, ..SynthConfig::default() },
            SynthConfig {
                embedding: EmbeddingKind::Mixed { extra_dims: 0 },
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn config_serde_roundtrip() {
        let cfg = small(EmbeddingKind::Mixed { extra_dims: 2 });
        let json = serde_json::to_string(&cfg).unwrap();
        let back: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn per_domain_scaling_recovers_every_scale_factor() {
        let cfg = SynthConfig {
            num_domains: 20,
            samples_per_domain: 2000,
            noise_std: 0.0,
            seed: 83,
            ..SynthConfig::default()
        };
        let (data, scales) = generate(&cfg).unwrap();
        for d in data.domains() {
            let c = scales[d.id()];
            let t = crate::ts::fit_ts(d, 0.05, 50.0).unwrap().temperature;
            assert!((t - c).abs() <= 0.1 * c, "domain {}: T = {t}, scale = {c}", d.id());
        }
    }

    /// Held-out per-sample temperature predictions from an OLS fit track the
    /// generating scale factor in both embedding layouts.
    #[test]
    fn linear_fit_predicts_heldout_temperatures_in_both_layouts() {
        use crate::mdts::{fit_mdts, FitOptions};
        use crate::regress::RegressorSpec;
        for embedding in [EmbeddingKind::Direct, EmbeddingKind::Mixed { extra_dims: 3 }] {
            let cfg = SynthConfig {
                num_domains: 6,
                samples_per_domain: 2000,
                embedding,
                seed: 89,
                ..SynthConfig::default()
            };
            let (data, scales) = generate(&cfg).unwrap();
            let halves = data.split_half(0).unwrap();
            let m =
                fit_mdts(&halves.calibration, &RegressorSpec::ols(), FitOptions::default())
                    .unwrap();
            for d in halves.evaluation.domains() {
                let c = scales[d.id()];
                let mean_dev = (0..d.len())
                    .map(|i| (m.predict_temperature(d.embedding_row(i)).unwrap() - c).abs())
                    .sum::<f64>()
                    / d.len() as f64;
                assert!(
                    mean_dev <= 0.1,
                    "{embedding:?} domain {}: mean |pred - c| = {mean_dev}",
                    d.id()
                );
            }
        }
    }
}
