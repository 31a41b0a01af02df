use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::canonical::to_canonical_json;
use crate::error::{Error, Result};
use crate::rng;

/// Groups sent to validation and test; every other group trains.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Shuffle samples and cut at train/val/test fractions.
    ByFraction { fractions: [f64; 3], seed: u64 },
    /// Shuffle whole groups and fill train/val/test up to the fractions,
    /// never splitting a group.
    ByGroupFraction { fractions: [f64; 3], seed: u64 },
    /// Explicit group lists.
    ByGroup(GroupAssignment),
    /// Externally supplied manifest: `name,split` CSV or a manifest JSON.
    ByManifest(PathBuf),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub policy: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest(format!("manifest JSON: {e}")))
    }

    /// Lists are disjoint and name known samples; with `check_groups`, no
    /// group appears in two lists.
    pub fn validate(&self, dataset: &Dataset, check_groups: bool) -> Result<()> {
        let mut seen = HashSet::new();
        for (split, names) in self.lists() {
            for n in names {
                if dataset.index_of(n).is_none() {
                    return Err(Error::Manifest(format!("{split} lists unknown sample {n}")));
                }
                if !seen.insert(n.as_str()) {
                    return Err(Error::Manifest(format!("sample {n} appears in more than one split")));
                }
            }
        }
        if check_groups {
            let group_sets: Vec<(&str, BTreeSet<&str>)> = self
                .lists()
                .map(|(split, names)| {
                    let groups = names
                        .iter()
                        .map(|n| dataset.samples[dataset.index_of(n).expect("checked")].group_id.as_str())
                        .collect();
                    (split, groups)
                })
                .collect();
            for i in 0..group_sets.len() {
                for j in i + 1..group_sets.len() {
                    if let Some(g) = group_sets[i].1.intersection(&group_sets[j].1).next() {
                        return Err(Error::Manifest(format!(
                            "group {g} appears in both {} and {}",
                            group_sets[i].0, group_sets[j].0
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn lists(&self) -> impl Iterator<Item = (&'static str, &Vec<String>)> {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)].into_iter()
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {f:?} must be in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

fn cut_counts(n: usize, f: &[f64; 3]) -> (usize, usize) {
    let train = ((f[0] * n as f64).round() as usize).min(n);
    let val = ((f[1] * n as f64).round() as usize).min(n - train);
    (train, val)
}

fn read_manifest_file(path: &Path, dataset: &Dataset) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let mut m = if is_json {
        SplitManifest::from_json(&text)?
    } else {
        let mut m = SplitManifest::default();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
            if rec.len() < 2 {
                return Err(Error::Manifest(format!("{}: row {} needs name,split", path.display(), i + 1)));
            }
            if i == 0 && rec[0].eq_ignore_ascii_case("name") {
                continue;
            }
            let name = rec[0].strip_suffix(".pgm").unwrap_or(&rec[0]).to_string();
            match rec[1].to_ascii_lowercase().as_str() {
                "train" | "training" => m.train.push(name),
                "val" | "valid" | "validation" => m.val.push(name),
                "test" => m.test.push(name),
                other => {
                    return Err(Error::Manifest(format!(
                        "{}: row {} has unknown split {other:?}",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        m
    };
    m.policy = format!("by_manifest:{}", path.display());
    m.validate(dataset, false)?;
    Ok(m)
}

/// Splits `dataset` into train/val/test according to `policy`.
/// Deterministic for a fixed seed.
pub fn split(dataset: &Dataset, policy: &SplitPolicy) -> Result<SplitManifest> {
    let manifest = match policy {
        SplitPolicy::ByFraction { fractions, seed } => {
            check_fractions(fractions)?;
            let mut names = dataset.names();
            names.shuffle(&mut rng::stream(*seed, rng::SPLIT_STREAM));
            let (nt, nv) = cut_counts(names.len(), fractions);
            let test = names.split_off(nt + nv);
            let val = names.split_off(nt);
            let m = SplitManifest {
                policy: format!("by_fraction:{fractions:?}:seed={seed}"),
                train: names,
                val,
                test,
            };
            m.validate(dataset, false)?;
            m
        }
        SplitPolicy::ByGroupFraction { fractions, seed } => {
            check_fractions(fractions)?;
            let groups = super::groups(dataset);
            let mut keys: Vec<&String> = groups.keys().collect();
            keys.shuffle(&mut rng::stream(*seed, rng::SPLIT_STREAM));
            let total = dataset.len() as f64;
            let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
            for k in keys {
                let members = &groups[k];
                // Fill train, then val; test takes the remainder.
                if (train.len() as f64) < fractions[0] * total {
                    train.extend(members.iter().cloned());
                } else if (val.len() as f64) < fractions[1] * total {
                    val.extend(members.iter().cloned());
                } else {
                    test.extend(members.iter().cloned());
                }
            }
            for v in [&mut train, &mut val, &mut test] {
                v.sort();
            }
            let m = SplitManifest {
                policy: format!("by_group_fraction:{fractions:?}:seed={seed}"),
                train,
                val,
                test,
            };
            m.validate(dataset, true)?;
            m
        }
        SplitPolicy::ByGroup(assign) => {
            let val: BTreeSet<&str> = assign.val.iter().map(String::as_str).collect();
            let test: BTreeSet<&str> = assign.test.iter().map(String::as_str).collect();
            if let Some(g) = val.intersection(&test).next() {
                return Err(Error::Manifest(format!("group {g} assigned to both val and test")));
            }
            let known: BTreeMap<&str, ()> = dataset.samples.iter().map(|s| (s.group_id.as_str(), ())).collect();
            if let Some(g) = val.iter().chain(&test).find(|g| !known.contains_key(*g)) {
                return Err(Error::Manifest(format!("unknown group {g}")));
            }
            let mut m = SplitManifest {
                policy: "by_group".into(),
                ..Default::default()
            };
            for s in &dataset.samples {
                let g = s.group_id.as_str();
                let dst = if test.contains(g) {
                    &mut m.test
                } else if val.contains(g) {
                    &mut m.val
                } else {
                    &mut m.train
                };
                dst.push(s.name.clone());
            }
            m.validate(dataset, true)?;
            m
        }
        SplitPolicy::ByManifest(path) => read_manifest_file(path, dataset)?,
    };
    Ok(manifest)
}
