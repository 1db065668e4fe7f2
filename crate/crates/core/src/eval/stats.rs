//! Mean absolute deviation and the paired t-test over human ratings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mad(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return Err(Error::InvalidInput(format!(
            "mad needs equal non-empty lists, got {} and {}",
            actual.len(),
            predicted.len()
        )));
    }
    Ok(actual.iter().zip(predicted).map(|(a, p)| (a - p).abs()).sum::<f64>() / actual.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
    pub mean_diff: f64,
}

/// Paired t-test on `d = a - b` with the sample standard deviation and `n - 1`
/// degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "paired t-test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 || !var.is_finite() {
        return Err(Error::Degenerate("identical paired differences".into()));
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, df, mean_diff: mean })
}

/// One story's 1 to 10 ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanScoreRecord {
    pub story_id: String,
    pub grammar: u8,
    pub creativity: u8,
    pub consistency: u8,
    pub plot: u8,
}

impl HumanScoreRecord {
    pub const CRITERIA: [&'static str; 4] = ["grammar", "creativity", "consistency", "plot"];

    fn scores(&self) -> [u8; 4] {
        [self.grammar, self.creativity, self.consistency, self.plot]
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores().iter().any(|s| !(1..=10).contains(s)) {
            return Err(Error::InvalidInput(format!(
                "story {}: scores must lie in 1..=10",
                self.story_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionComparison {
    pub mean_a: f64,
    pub mean_b: f64,
    /// `None` when every paired difference is identical.
    pub test: Option<TTest>,
}

/// Per criterion means of two systems' ratings, paired by story id, with a
/// paired t-test of `a` against `b`.
pub fn compare_human_scores(a: &[HumanScoreRecord], b: &[HumanScoreRecord]) -> Result<BTreeMap<String, CriterionComparison>> {
    let b_by_id: BTreeMap<&str, &HumanScoreRecord> = b.iter().map(|r| (r.story_id.as_str(), r)).collect();
    if b_by_id.len() != b.len() {
        return Err(Error::InvalidInput("duplicate story id in the second score file".into()));
    }
    let mut pairs = Vec::new();
    for r in a {
        r.validate()?;
        let other = b_by_id
            .get(r.story_id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("story {} has no counterpart", r.story_id)))?;
        other.validate()?;
        pairs.push((r.scores(), other.scores()));
    }
    if pairs.len() != b.len() {
        return Err(Error::InvalidInput("score files cover different stories".into()));
    }
    let mut out = BTreeMap::new();
    for (k, name) in HumanScoreRecord::CRITERIA.iter().enumerate() {
        let xa: Vec<f64> = pairs.iter().map(|p| p.0[k] as f64).collect();
        let xb: Vec<f64> = pairs.iter().map(|p| p.1[k] as f64).collect();
        let test = match paired_t_test(&xa, &xb) {
            Ok(t) => Some(t),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        let n = xa.len() as f64;
        out.insert(
            name.to_string(),
            CriterionComparison {
                mean_a: xa.iter().sum::<f64>() / n,
                mean_b: xb.iter().sum::<f64>() / n,
                test,
            },
        );
    }
    Ok(out)
}
