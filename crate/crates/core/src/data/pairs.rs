//! Pairs of images that agree on one semantic factor.
//!
//! Factor 0 is the anomaly bit (pairs match exactly, both healthy or both
//! anomalous); factor 1 is the slice index (pairs fall in the same of `Q`
//! equal-width bins). The residual factor is never shared.

use super::Label;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_BINS: usize = 10;
pub const ANOMALY: usize = 0;
pub const SLICE: usize = 1;
const FACTORS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    /// Shared factor of each pair.
    pub factors: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct PairSampler {
    bins: usize,
    /// `members[f][s]`: images in stratum `s` of factor `f`.
    members: Vec<Vec<Vec<usize>>>,
    /// `stratum_of[f][i]`.
    stratum_of: Vec<Vec<usize>>,
    mix: Vec<f64>,
    per_pair: bool,
}

impl PairSampler {
    /// `factor_mix` gives the relative probability of sharing the anomaly bit
    /// and the slice bin. With `per_pair` the factor is drawn for every pair,
    /// otherwise once per batch.
    pub fn new(labels: &[Label], bins: usize, factor_mix: &[f64], per_pair: bool) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::invalid("pair sampling needs at least two images"));
        }
        if bins == 0 {
            return Err(Error::invalid("slice bins must be positive"));
        }
        if factor_mix.len() != FACTORS || factor_mix.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid(format!(
                "factor_mix {factor_mix:?} must hold {FACTORS} non-negative weights"
            )));
        }
        let total: f64 = factor_mix.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("factor_mix sums to zero"));
        }
        let mix: Vec<f64> = factor_mix.iter().map(|w| w / total).collect();
        let counts = [2, bins];
        let mut members = Vec::with_capacity(FACTORS);
        let mut stratum_of = Vec::with_capacity(FACTORS);
        for f in 0..FACTORS {
            let mut m = vec![Vec::new(); counts[f]];
            let of: Vec<usize> = labels.iter().map(|l| stratum(f, l, bins)).collect();
            for (i, &s) in of.iter().enumerate() {
                m[s].push(i);
            }
            if mix[f] > 0.0 {
                if let Some(s) = m.iter().position(|v| v.len() == 1) {
                    return Err(Error::invalid(format!(
                        "factor {} value {s} has a single image; cannot form pairs",
                        ["anomaly", "slice_index"][f]
                    )));
                }
            }
            members.push(m);
            stratum_of.push(of);
        }
        Ok(PairSampler {
            bins,
            members,
            stratum_of,
            mix,
            per_pair,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    fn draw_factor(&self, rng: &mut Rng) -> usize {
        if rng.next_f64() < self.mix[ANOMALY] {
            ANOMALY
        } else {
            SLICE
        }
    }

    fn draw_pair(&self, rng: &mut Rng, f: usize) -> (usize, usize) {
        let n = self.stratum_of[f].len();
        loop {
            let a = rng.below(n);
            let group = &self.members[f][self.stratum_of[f][a]];
            if group.len() < 2 {
                continue;
            }
            let b = loop {
                let b = group[rng.below(group.len())];
                if b != a {
                    break b;
                }
            };
            return (a, b);
        }
    }

    pub fn sample(&self, rng: &mut Rng, batch_size: usize) -> Result<PairBatch> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut batch = PairBatch {
            a: Vec::with_capacity(batch_size),
            b: Vec::with_capacity(batch_size),
            factors: Vec::with_capacity(batch_size),
        };
        let batch_factor = self.draw_factor(rng);
        for _ in 0..batch_size {
            let f = if self.per_pair {
                self.draw_factor(rng)
            } else {
                batch_factor
            };
            let (a, b) = self.draw_pair(rng, f);
            batch.a.push(a);
            batch.b.push(b);
            batch.factors.push(f);
        }
        Ok(batch)
    }
}

/// Stratum of `label` under factor `f`.
pub fn stratum(f: usize, label: &Label, bins: usize) -> usize {
    match f {
        ANOMALY => label.anomaly as usize,
        _ => ((label.slice_index * bins as f64) as usize).min(bins - 1),
    }
}

/// Whether two labels agree on factor `f` under the pairing rule.
pub fn shares(f: usize, a: &Label, b: &Label, bins: usize) -> bool {
    stratum(f, a, bins) == stratum(f, b, bins)
}
