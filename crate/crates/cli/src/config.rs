use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use semco::data::SplitParams;
use semco::training::TrainConfig;

fn default_k() -> Vec<usize> {
    vec![20]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Contents of a run config file. Relative paths resolve against the
/// directory containing the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest.
    pub dataset: PathBuf,
    #[serde(default)]
    pub split: SplitParams,
    /// Existing split directory; when absent the split is made from `split`.
    #[serde(default)]
    pub split_dir: Option<PathBuf>,
    pub train: TrainConfig,
    #[serde(default = "default_k")]
    pub eval_k: Vec<usize>,
    pub out: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub search: Option<SearchSpace>,
}

/// Hyperparameter search space. Empty grid axes keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub random: RandomSpace,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub weight_decay: Vec<f64>,
}

/// Inclusive uniform ranges for random search; absent ranges keep the base
/// value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSpace {
    #[serde(default)]
    pub tau: Option<[f64; 2]>,
    #[serde(default)]
    pub omega: Option<[f64; 2]>,
    #[serde(default)]
    pub positives_per_user: Option<[usize; 2]>,
    #[serde(default)]
    pub lambda: Option<[f64; 2]>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Reads, resolves paths, and validates.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = resolve(base, &cfg.dataset);
        cfg.out = resolve(base, &cfg.out);
        cfg.split_dir = cfg.split_dir.map(|p| resolve(base, &p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            bail!("eval_k must be a nonempty list of positive integers");
        }
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if let Some(s) = &self.search {
            for r in [s.random.tau, s.random.omega, s.random.lambda].into_iter().flatten() {
                if !(r[0] <= r[1]) {
                    bail!("search range {r:?} is empty");
                }
            }
            if let Some([lo, hi]) = s.random.positives_per_user {
                if lo < 2 || lo > hi {
                    bail!("positives_per_user range [{lo}, {hi}] is invalid");
                }
            }
        }
        Ok(())
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
