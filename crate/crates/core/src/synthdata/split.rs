//! Stratified train/validation/test partition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Ratios (percent) and stenosis-percentage stratum edges. Strata are
/// `[t₀, t₁), [t₁, t₂), …, [t_{m−1}, t_m]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub ratios: [u32; 3],
    pub thresholds: Vec<f64>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratios: [70, 15, 15], thresholds: vec![0.0, 30.0, 55.0, 70.0, 85.0, 100.0], seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().sum::<u32>() != 100 {
            return Err(StenosisError::invalid("split ratios must sum to 100"));
        }
        if self.thresholds.len() < 2 || self.thresholds.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(StenosisError::invalid("stratum thresholds must be strictly increasing"));
        }
        Ok(())
    }
}

/// Index of the stratum holding `pct`.
pub fn stratum_of(spec: &SplitSpec, pct: f64) -> Result<usize> {
    let t = &spec.thresholds;
    let last = t.len() - 2;
    if !(pct >= t[0] && pct <= t[last + 1]) {
        return Err(StenosisError::invalid(format!("stenosis {pct}% outside strata [{}, {}]", t[0], t[last + 1])));
    }
    Ok((0..=last).find(|&i| pct < t[i + 1]).unwrap_or(last))
}

/// Indices into the input for each split, in shuffled order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn split_of(&self, index: usize) -> Option<Split> {
        if self.train.contains(&index) {
            Some(Split::Train)
        } else if self.val.contains(&index) {
            Some(Split::Val)
        } else if self.test.contains(&index) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Largest-remainder apportionment of `n` items by `ratios`; remainder ties
/// go to the earlier split.
pub fn apportion(n: usize, ratios: &[u32; 3]) -> [usize; 3] {
    let total: u32 = ratios.iter().sum();
    let exact: Vec<(usize, u64)> = ratios
        .iter()
        .map(|&r| {
            let num = n as u64 * r as u64;
            ((num / total as u64) as usize, num % total as u64)
        })
        .collect();
    let mut sizes = [exact[0].0, exact[1].0, exact[2].0];
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Shuffles each stratum with the split seed and cuts it by
/// [`apportion`]. `pcts` holds one stenosis percentage per sample.
pub fn stratified_split(pcts: &[f64], spec: &SplitSpec) -> Result<SplitAssignment> {
    spec.validate()?;
    if pcts.is_empty() {
        return Err(StenosisError::invalid("cannot split an empty dataset"));
    }
    let mut strata = vec![Vec::new(); spec.thresholds.len() - 1];
    for (i, &p) in pcts.iter().enumerate() {
        strata[stratum_of(spec, p)?].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitAssignment::default();
    for mut members in strata {
        members.shuffle(&mut rng);
        let [a, b, _] = apportion(members.len(), &spec.ratios);
        out.train.extend_from_slice(&members[..a]);
        out.val.extend_from_slice(&members[a..a + b]);
        out.test.extend_from_slice(&members[a + b..]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strata_boundaries() {
        let s = SplitSpec::default();
        assert_eq!(stratum_of(&s, 0.0).unwrap(), 0);
        assert_eq!(stratum_of(&s, 29.999).unwrap(), 0);
        assert_eq!(stratum_of(&s, 30.0).unwrap(), 1);
        assert_eq!(stratum_of(&s, 70.0).unwrap(), 3);
        assert_eq!(stratum_of(&s, 85.0).unwrap(), 4);
        assert_eq!(stratum_of(&s, 100.0).unwrap(), 4);
        assert!(stratum_of(&s, 100.5).is_err());
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(100, &[70, 15, 15]), [70, 15, 15]);
        assert_eq!(apportion(10, &[70, 15, 15]), [7, 2, 1]);
        assert_eq!(apportion(1, &[70, 15, 15]), [1, 0, 0]);
        assert_eq!(apportion(0, &[70, 15, 15]), [0, 0, 0]);
    }

    #[test]
    fn single_stratum_hundred() {
        let pcts = vec![50.0; 100];
        let a = stratified_split(&pcts, &SplitSpec::default()).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (70, 15, 15));
        assert!(stratified_split(&[], &SplitSpec::default()).is_err());
    }
}
