use super::GraphError;
use crate::prelude::*;
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.15,
            test: 0.10,
        }
    }
}

/// Train, validation and test parts.
pub type Splits<T> = (Vec<T>, Vec<T>, Vec<T>);

/// Deterministic train/val/test split that keeps every group (simulation
/// run) inside one part. Groups are shuffled, then assigned in order by the
/// count of items placed before them, so each boundary is off by at most
/// one group.
pub fn split_by_group<T>(
    items: Vec<T>,
    group_of: impl Fn(&T) -> u64,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Splits<T>, GraphError> {
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|x| *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GraphError::BadFractions(f));
    }
    if items.is_empty() {
        return Err(GraphError::EmptyDataset);
    }
    let total = items.len() as f64;
    let mut groups: BTreeMap<u64, Vec<T>> = BTreeMap::new();
    for it in items {
        groups.entry(group_of(&it)).or_default().push(it);
    }
    let mut order: Vec<u64> = groups.keys().copied().collect();
    SimRng::seed(seed).shuffle(&mut order);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut placed = 0usize;
    for g in order {
        let members = groups.remove(&g).unwrap_or_default();
        let before = placed as f64;
        placed += members.len();
        let target = if before < fractions.train * total - 1e-9 {
            &mut train
        } else if before < (fractions.train + fractions.val) * total - 1e-9 {
            &mut val
        } else {
            &mut test
        };
        target.extend(members);
    }
    Ok((train, val, test))
}
