use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureMode};
use crate::compute::Tensor2D;
use crate::error::{Error, Result};
use crate::model::InteractionMatrix;

/// Parameters of the topic-mixture generator.
///
/// Items draw a topic mixture `θ_i ~ Dir(c)`, users a preference
/// `π_u ~ Dir(c)`. Mode `m` features are `θ_i P_m + σ ε` with a fixed Gaussian
/// `P_m`. Each user samples `interactions_per_user` distinct items with
/// probability proportional to `exp(s · π_u·θ_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub mode_dims: Vec<usize>,
    pub noise_sigma: f64,
    pub interactions_per_user: usize,
    pub seed: u64,
    /// Dirichlet concentration `c`; small values give peaked mixtures.
    pub topic_concentration: f64,
    /// Affinity sharpness `s`.
    pub affinity_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_items: 400,
            n_topics: 8,
            mode_dims: vec![32, 24],
            noise_sigma: 0.1,
            interactions_per_user: 20,
            seed: 0,
            topic_concentration: 0.2,
            affinity_scale: 20.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_topics == 0 {
            return bad("users, items and topics must be positive".into());
        }
        if self.mode_dims.is_empty() {
            return bad("at least one feature mode is required".into());
        }
        let min_dim = *self.mode_dims.iter().min().unwrap();
        if self.n_topics > min_dim {
            return bad(format!(
                "{} topics exceed the smallest mode dimension {min_dim}",
                self.n_topics
            ));
        }
        if self.interactions_per_user == 0 || self.interactions_per_user > self.n_items {
            return bad(format!(
                "interactions_per_user must be in 1..={}, got {}",
                self.n_items, self.interactions_per_user
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if !(self.topic_concentration > 0.0 && self.topic_concentration.is_finite()) {
            return bad("topic_concentration must be positive".into());
        }
        if !self.affinity_scale.is_finite() {
            return bad("affinity_scale must be finite".into());
        }
        Ok(())
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, gamma: &Gamma<f64>, k: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        // Tiny concentrations can underflow every component.
        if s > 0.0 && s.is_finite() {
            v.iter_mut().for_each(|x| *x /= s);
            return v;
        }
    }
}

/// Latent topic mixtures are returned alongside the dataset for tests that
/// need ground truth.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    generate_with_topics(cfg).map(|(d, _)| d)
}

pub(crate) fn generate_with_topics(cfg: &SynthConfig) -> Result<(Dataset, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = Gamma::new(cfg.topic_concentration, 1.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let k = cfg.n_topics;

    let theta: Vec<Vec<f64>> = (0..cfg.n_items).map(|_| dirichlet(&mut rng, &gamma, k)).collect();

    let mut modes = Vec::with_capacity(cfg.mode_dims.len());
    for (m, &dim) in cfg.mode_dims.iter().enumerate() {
        let proj: Vec<f64> = (0..k * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut data = Vec::with_capacity(cfg.n_items * dim);
        for t in &theta {
            for c in 0..dim {
                let clean: f64 = (0..k).map(|j| t[j] * proj[j * dim + c]).sum();
                let noise = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push((clean + noise) as f32);
            }
        }
        modes.push(FeatureMode {
            name: format!("mode{m}"),
            features: Tensor2D::from_vec(cfg.n_items, dim, data)?,
        });
    }

    let gumbel = Gumbel::new(0.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut pairs = Vec::with_capacity(cfg.n_users * cfg.interactions_per_user);
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(cfg.n_items);
    for u in 0..cfg.n_users {
        let pi = dirichlet(&mut rng, &gamma, k);
        keys.clear();
        for (i, t) in theta.iter().enumerate() {
            let affinity: f64 = pi.iter().zip(t).map(|(a, b)| a * b).sum();
            let g: f64 = gumbel.sample(&mut rng);
            keys.push((cfg.affinity_scale * affinity + g, i));
        }
        // Gumbel top-k samples k items without replacement from the softmax.
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        pairs.extend(keys[..cfg.interactions_per_user].iter().map(|&(_, i)| (u, i)));
    }
    let (interactions, _) = InteractionMatrix::from_pairs(cfg.n_users, cfg.n_items, pairs)?;
    let user_ids = (0..cfg.n_users).map(|u| format!("u{u}")).collect();
    let item_ids = (0..cfg.n_items).map(|i| format!("i{i}")).collect();
    let ds = Dataset::new("synthetic", interactions, modes, user_ids, item_ids)?;
    Ok((ds, theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        d / (na * nb)
    }

    fn argmax(v: &[f64]) -> usize {
        (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
    }

    #[test]
    fn same_topic_items_are_more_similar() {
        let cfg = SynthConfig {
            noise_sigma: 0.1,
            ..SynthConfig::default()
        };
        let (ds, theta) = generate_with_topics(&cfg).unwrap();
        let dom: Vec<usize> = theta.iter().map(|t| argmax(t)).collect();
        for mode in &ds.modes {
            let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
            for a in 0..ds.n_items() {
                for b in a + 1..ds.n_items() {
                    let c = cosine(mode.features.row(a), mode.features.row(b));
                    if dom[a] == dom[b] {
                        same += c;
                        ns += 1;
                    } else {
                        diff += c;
                        nd += 1;
                    }
                }
            }
            assert!(same / ns as f64 > diff / nd as f64);
        }
    }

    #[test]
    fn noiseless_identical_mixtures_give_identical_features() {
        // One topic forces every mixture to [1.0].
        let cfg = SynthConfig {
            n_users: 3,
            n_items: 5,
            n_topics: 1,
            mode_dims: vec![4, 2],
            noise_sigma: 0.0,
            interactions_per_user: 2,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for m in &ds.modes {
            for i in 1..5 {
                assert_eq!(m.features.row(0), m.features.row(i));
            }
        }
    }

    #[test]
    fn seeded_and_validated() {
        let cfg = SynthConfig {
            n_users: 20,
            n_items: 30,
            interactions_per_user: 5,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.modes, b.modes);
        assert_eq!(a.interactions.nnz(), 20 * 5);

        let too_many_topics = SynthConfig {
            n_topics: 40,
            ..cfg.clone()
        };
        assert!(generate_synthetic(&too_many_topics).is_err());
    }
}
