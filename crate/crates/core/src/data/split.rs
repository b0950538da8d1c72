use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Disjoint seen (training) and unseen (test) class sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroShotSplit {
    pub seen: BTreeSet<u32>,
    pub unseen: BTreeSet<u32>,
    pub seed: u64,
}

/// Picks `n_unseen` classes uniformly at random as the unseen set.
pub fn make_split(classes: &[u32], n_unseen: usize, seed: u64) -> Result<ZeroShotSplit> {
    let mut all: Vec<u32> = classes.to_vec();
    all.sort_unstable();
    all.dedup();
    if n_unseen == 0 || n_unseen >= all.len() {
        return Err(Error::Config(format!(
            "n_unseen must be in 1..{}, got {n_unseen}",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: BTreeSet<usize> = sample(&mut rng, all.len(), n_unseen).into_iter().collect();
    let (unseen, seen): (Vec<_>, Vec<_>) = all
        .iter()
        .enumerate()
        .partition(|(i, _)| picked.contains(i));
    Ok(ZeroShotSplit {
        seen: seen.into_iter().map(|(_, &c)| c).collect(),
        unseen: unseen.into_iter().map(|(_, &c)| c).collect(),
        seed,
    })
}

impl ZeroShotSplit {
    pub fn validate(&self) -> Result<()> {
        let overlap: Vec<u32> = self.seen.intersection(&self.unseen).copied().collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(Error::Leakage(overlap))
        }
    }

    /// `seed = ..`, `seen = ..`, `unseen = ..` lines with space-separated ids.
    pub fn to_text(&self) -> String {
        let join = |s: &BTreeSet<u32>| {
            s.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
        };
        format!(
            "seed = {}\nseen = {}\nunseen = {}\n",
            self.seed,
            join(&self.seen),
            join(&self.unseen)
        )
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut seen = None;
        let mut unseen = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Dataset(format!("split line {line:?}: expected key = value")))?;
            let ids = || -> Result<BTreeSet<u32>> {
                value
                    .split_whitespace()
                    .map(|v| {
                        v.parse()
                            .map_err(|_| Error::Dataset(format!("split: bad class id {v:?}")))
                    })
                    .collect()
            };
            match key.trim() {
                "seed" => {
                    seed = Some(value.trim().parse().map_err(|_| {
                        Error::Dataset(format!("split: bad seed {:?}", value.trim()))
                    })?)
                }
                "seen" => seen = Some(ids()?),
                "unseen" => unseen = Some(ids()?),
                other => return Err(Error::Dataset(format!("split: unknown key {other:?}"))),
            }
        }
        let split = ZeroShotSplit {
            seen: seen.ok_or_else(|| Error::Dataset("split: missing seen".into()))?,
            unseen: unseen.ok_or_else(|| Error::Dataset("split: missing unseen".into()))?,
            seed: seed.unwrap_or(0),
        };
        split.validate()?;
        Ok(split)
    }
}
