use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_id_list, read_interactions_file, write_id_list, write_interactions_file};
use super::Dataset;
use crate::error::{Error, Result};
use crate::model::InteractionMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitParams {
    pub cold_frac: f64,
    pub warm_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            cold_frac: 0.2,
            warm_ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

/// Item-level cold split plus an interaction-level warm split.
///
/// Every `InteractionMatrix` here has the full `|U| × |I|` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ColdSplit {
    pub warm_items: Vec<usize>,
    pub cold_val_items: Vec<usize>,
    pub cold_test_items: Vec<usize>,
    pub warm_train: InteractionMatrix,
    pub warm_val: InteractionMatrix,
    pub warm_test: InteractionMatrix,
    pub cold_val: InteractionMatrix,
    pub cold_test: InteractionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub dataset: PathBuf,
    pub params: SplitParams,
    pub n_users: usize,
    pub n_items: usize,
    pub n_warm_items: usize,
    pub n_cold_val_items: usize,
    pub n_cold_test_items: usize,
    pub n_warm_train: usize,
    pub n_warm_val: usize,
    pub n_warm_test: usize,
    pub n_cold_val: usize,
    pub n_cold_test: usize,
    /// Users with no warm-train interaction; excluded from evaluation.
    pub n_users_without_train: usize,
}

/// Samples `cold_frac` of the items (without replacement) as cold, halves
/// them into validation and test pools, and splits the remaining
/// interactions uniformly at random by `warm_ratios`.
pub fn make_cold_split(dataset: &Dataset, params: &SplitParams) -> Result<ColdSplit> {
    let r = &dataset.interactions;
    let n_items = r.n_items();
    if !(0.0..1.0).contains(&params.cold_frac) {
        return Err(Error::InvalidArgument(format!(
            "cold_frac must be in [0, 1), got {}",
            params.cold_frac
        )));
    }
    let ratio_sum: f64 = params.warm_ratios.iter().sum();
    if params.warm_ratios.iter().any(|&x| x < 0.0) || (ratio_sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "warm ratios must be non-negative and sum to 1, got {:?}",
            params.warm_ratios
        )));
    }
    let n_cold = (params.cold_frac * n_items as f64).round() as usize;
    let n_cold_val = n_cold / 2;
    let n_cold_test = n_cold - n_cold_val;
    if n_cold_val == 0 || n_cold_test == 0 || n_cold >= n_items {
        return Err(Error::DegenerateSplit(format!(
            "{n_items} items with cold_frac {} leave {n_cold_val} validation / {n_cold_test} test cold items",
            params.cold_frac
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut items: Vec<usize> = (0..n_items).collect();
    items.shuffle(&mut rng);
    let mut cold_val_items = items[..n_cold_val].to_vec();
    let mut cold_test_items = items[n_cold_val..n_cold].to_vec();
    let mut warm_items = items[n_cold..].to_vec();
    cold_val_items.sort_unstable();
    cold_test_items.sort_unstable();
    warm_items.sort_unstable();

    #[derive(Clone, Copy, PartialEq)]
    enum Pool {
        Warm,
        ColdVal,
        ColdTest,
    }
    let mut pool = vec![Pool::Warm; n_items];
    cold_val_items.iter().for_each(|&i| pool[i] = Pool::ColdVal);
    cold_test_items.iter().for_each(|&i| pool[i] = Pool::ColdTest);

    let mut warm_pairs = Vec::new();
    let mut cold_val = Vec::new();
    let mut cold_test = Vec::new();
    for (u, i) in r.pairs() {
        match pool[i] {
            Pool::Warm => warm_pairs.push((u, i)),
            Pool::ColdVal => cold_val.push((u, i)),
            Pool::ColdTest => cold_test.push((u, i)),
        }
    }
    if warm_pairs.is_empty() {
        return Err(Error::DegenerateSplit("no warm interactions".into()));
    }
    warm_pairs.shuffle(&mut rng);
    let n = warm_pairs.len() as f64;
    let n_train = (params.warm_ratios[0] * n).round() as usize;
    let n_val = ((params.warm_ratios[1] * n).round() as usize).min(warm_pairs.len() - n_train);
    let n_users = r.n_users();
    let build = |pairs: &[(usize, usize)]| -> Result<InteractionMatrix> {
        Ok(InteractionMatrix::from_pairs(n_users, n_items, pairs.iter().copied())?.0)
    };
    let split = ColdSplit {
        warm_train: build(&warm_pairs[..n_train])?,
        warm_val: build(&warm_pairs[n_train..n_train + n_val])?,
        warm_test: build(&warm_pairs[n_train + n_val..])?,
        cold_val: build(&cold_val)?,
        cold_test: build(&cold_test)?,
        warm_items,
        cold_val_items,
        cold_test_items,
    };
    split.check_invariants()?;
    Ok(split)
}

impl ColdSplit {
    /// Disjointness and coverage checks.
    pub fn check_invariants(&self) -> Result<()> {
        let n_items = self.warm_train.n_items();
        let mut owner = vec![0u8; n_items];
        for (set, tag) in [
            (&self.warm_items, 1u8),
            (&self.cold_val_items, 2),
            (&self.cold_test_items, 3),
        ] {
            for &i in set {
                if i >= n_items || owner[i] != 0 {
                    return Err(Error::DegenerateSplit(format!(
                        "item {i} assigned to more than one pool"
                    )));
                }
                owner[i] = tag;
            }
        }
        if owner.contains(&0) {
            return Err(Error::DegenerateSplit("some items belong to no pool".into()));
        }
        for (m, tag, name) in [
            (&self.warm_train, 1, "warm_train"),
            (&self.warm_val, 1, "warm_val"),
            (&self.warm_test, 1, "warm_test"),
            (&self.cold_val, 2, "cold_val"),
            (&self.cold_test, 3, "cold_test"),
        ] {
            if let Some((u, i)) = m.pairs().find(|&(_, i)| owner[i] != tag) {
                return Err(Error::DegenerateSplit(format!(
                    "{name} contains ({u}, {i}) from the wrong item pool"
                )));
            }
        }
        let warm = [&self.warm_train, &self.warm_val, &self.warm_test];
        for a in 0..3 {
            for b in a + 1..3 {
                if let Some(p) = warm[a].pairs().find(|&(u, i)| warm[b].contains(u, i)) {
                    return Err(Error::DegenerateSplit(format!(
                        "warm sets overlap at {p:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn summary(&self, dataset: PathBuf, params: &SplitParams) -> SplitSummary {
        SplitSummary {
            dataset,
            params: params.clone(),
            n_users: self.warm_train.n_users(),
            n_items: self.warm_train.n_items(),
            n_warm_items: self.warm_items.len(),
            n_cold_val_items: self.cold_val_items.len(),
            n_cold_test_items: self.cold_test_items.len(),
            n_warm_train: self.warm_train.nnz(),
            n_warm_val: self.warm_val.nnz(),
            n_warm_test: self.warm_test.nnz(),
            n_cold_val: self.cold_val.nnz(),
            n_cold_test: self.cold_test.nnz(),
            n_users_without_train: (0..self.warm_train.n_users())
                .filter(|&u| self.warm_train.items_of(u).is_empty())
                .count(),
        }
    }

    /// Writes `split.json` plus item lists and interaction partitions using
    /// the dataset's external ids.
    pub fn save(&self, dir: &Path, dataset: &Dataset, summary: &SplitSummary) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ids = |items: &[usize]| items.iter().map(|&i| dataset.item_ids[i].clone()).collect::<Vec<_>>();
        write_id_list(&dir.join("warm_items.txt"), ids(&self.warm_items))?;
        write_id_list(&dir.join("cold_val_items.txt"), ids(&self.cold_val_items))?;
        write_id_list(&dir.join("cold_test_items.txt"), ids(&self.cold_test_items))?;
        for (name, m) in self.partitions() {
            write_interactions_file(
                &dir.join(format!("{name}.tsv")),
                m.pairs(),
                &dataset.user_ids,
                &dataset.item_ids,
            )?;
        }
        let path = dir.join("split.json");
        fs::write(&path, serde_json::to_string_pretty(summary)? + "\n").map_err(|e| Error::io(&path, e))
    }

    fn partitions(&self) -> [(&'static str, &InteractionMatrix); 5] {
        [
            ("warm_train", &self.warm_train),
            ("warm_val", &self.warm_val),
            ("warm_test", &self.warm_test),
            ("cold_val", &self.cold_val),
            ("cold_test", &self.cold_test),
        ]
    }

    pub fn read_summary(dir: &Path) -> Result<SplitSummary> {
        let path = dir.join("split.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            msg: e.to_string(),
        })
    }

    /// Reads a split written by [`ColdSplit::save`] against its dataset.
    pub fn load(dir: &Path, dataset: &Dataset) -> Result<Self> {
        let item_index: HashMap<&str, usize> = dataset
            .item_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let user_index: HashMap<&str, usize> = dataset
            .user_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let items = |name: &str| -> Result<Vec<usize>> {
            let path = dir.join(name);
            read_id_list(&path)?
                .iter()
                .enumerate()
                .map(|(n, id)| {
                    item_index.get(id.as_str()).copied().ok_or_else(|| Error::Parse {
                        path: path.clone(),
                        line: n + 1,
                        msg: format!("unknown item id `{id}`"),
                    })
                })
                .collect()
        };
        let matrix = |name: &str| -> Result<InteractionMatrix> {
            let path = dir.join(format!("{name}.tsv"));
            let mut pairs = Vec::new();
            for (u, i, line) in read_interactions_file(&path)? {
                let unknown = |kind: &str, id: &str| Error::Parse {
                    path: path.clone(),
                    line,
                    msg: format!("unknown {kind} id `{id}`"),
                };
                let uu = *user_index.get(u.as_str()).ok_or_else(|| unknown("user", &u))?;
                let ii = *item_index.get(i.as_str()).ok_or_else(|| unknown("item", &i))?;
                pairs.push((uu, ii));
            }
            Ok(InteractionMatrix::from_pairs(dataset.n_users(), dataset.n_items(), pairs)?.0)
        };
        let mut split = ColdSplit {
            warm_items: items("warm_items.txt")?,
            cold_val_items: items("cold_val_items.txt")?,
            cold_test_items: items("cold_test_items.txt")?,
            warm_train: matrix("warm_train")?,
            warm_val: matrix("warm_val")?,
            warm_test: matrix("warm_test")?,
            cold_val: matrix("cold_val")?,
            cold_test: matrix("cold_test")?,
        };
        split.warm_items.sort_unstable();
        split.cold_val_items.sort_unstable();
        split.cold_test_items.sort_unstable();
        split.check_invariants()?;
        Ok(split)
    }
}
