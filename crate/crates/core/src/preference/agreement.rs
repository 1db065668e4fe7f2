//! Nominal Krippendorff's alpha over Best-Worst-Scaling judgments.
//!
//! Every (set, story index) is an item; each annotator who judged the set
//! labels each of its stories best, worst or neither.

use std::collections::{BTreeMap, BTreeSet};

use super::{BwsAnnotation, SET_SIZE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BwsLabel {
    Best,
    Worst,
    Neither,
}

impl BwsLabel {
    fn of(a: &BwsAnnotation, story: usize) -> Self {
        if story == a.best {
            BwsLabel::Best
        } else if story == a.worst {
            BwsLabel::Worst
        } else {
            BwsLabel::Neither
        }
    }
}

/// Nominal alpha from the values each unit received. Units with fewer than two
/// values are not pairable and are ignored.
///
/// `alpha = 1 - (n - 1) * sum_{c != k} o_ck / sum_{c != k} n_c n_k` with the
/// coincidence matrix `o_ck = sum_u (#pairs (c, k) in u) / (m_u - 1)`.
pub fn nominal_alpha<T: Ord + Clone>(units: &[Vec<T>]) -> Result<f64> {
    let mut coincidence: BTreeMap<(T, T), f64> = BTreeMap::new();
    for values in units.iter().filter(|v| v.len() >= 2) {
        let m = values.len() as f64;
        for (i, a) in values.iter().enumerate() {
            for (j, b) in values.iter().enumerate() {
                if i != j {
                    *coincidence.entry((a.clone(), b.clone())).or_insert(0.0) += 1.0 / (m - 1.0);
                }
            }
        }
    }
    let mut marginals: BTreeMap<T, f64> = BTreeMap::new();
    for ((c, _), o) in &coincidence {
        *marginals.entry(c.clone()).or_insert(0.0) += o;
    }
    let n: f64 = marginals.values().sum();
    if n == 0.0 {
        return Err(Error::AgreementUndefined("no item was labeled by two or more annotators".into()));
    }
    let observed: f64 = coincidence.iter().filter(|((c, k), _)| c != k).map(|(_, o)| o).sum();
    let mut expected = 0.0;
    for (c, nc) in &marginals {
        for (k, nk) in &marginals {
            if c != k {
                expected += nc * nk;
            }
        }
    }
    if expected == 0.0 {
        return Err(Error::AgreementUndefined("every pairable value is identical".into()));
    }
    if observed == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Alpha over the non-consensus records. Undefined with fewer than two
/// annotators or when no set has two judgments.
pub fn krippendorff_alpha(annotations: &[BwsAnnotation]) -> Result<f64> {
    let by_set = group(annotations)?;
    let roster: BTreeSet<&str> = by_set.values().flat_map(|m| m.keys().copied()).collect();
    if roster.len() < 2 {
        return Err(Error::AgreementUndefined(format!(
            "{} annotator(s); at least two are needed",
            roster.len()
        )));
    }
    let mut units = Vec::new();
    for judged in by_set.values() {
        for story in 0..SET_SIZE {
            units.push(judged.values().map(|a| BwsLabel::of(a, story)).collect::<Vec<_>>());
        }
    }
    nominal_alpha(&units)
}

/// Sets whose annotators disagree on (best, worst), ascending.
pub fn disagreements(annotations: &[BwsAnnotation]) -> Result<Vec<u64>> {
    let by_set = group(annotations)?;
    Ok(by_set
        .into_iter()
        .filter(|(_, judged)| {
            let picks: BTreeSet<(usize, usize)> = judged.values().map(|a| (a.best, a.worst)).collect();
            picks.len() > 1
        })
        .map(|(id, _)| id)
        .collect())
}

type BySet<'a> = BTreeMap<u64, BTreeMap<&'a str, &'a BwsAnnotation>>;

fn group(annotations: &[BwsAnnotation]) -> Result<BySet<'_>> {
    let mut by_set: BySet<'_> = BTreeMap::new();
    for a in annotations.iter().filter(|a| !a.consensus) {
        a.validate()?;
        if by_set.entry(a.set_id).or_default().insert(&a.annotator_id, a).is_some() {
            return Err(Error::InvalidInput(format!(
                "annotator {} judged set {} twice",
                a.annotator_id, a.set_id
            )));
        }
    }
    Ok(by_set)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::ann;
    use super::*;
    use proptest::prelude::*;

    /// Pairwise-disagreement form: D_o is the share of disagreeing ordered pairs
    /// within units (each unit weighted 1/(m-1)), D_e the share over all pooled
    /// pairable values.
    fn oracle(units: &[Vec<u8>]) -> f64 {
        let pairable: Vec<&Vec<u8>> = units.iter().filter(|u| u.len() >= 2).collect();
        let pooled: Vec<u8> = pairable.iter().flat_map(|u| u.iter().copied()).collect();
        let n = pooled.len() as f64;
        let mut d_o = 0.0;
        for u in &pairable {
            let m = u.len() as f64;
            let mut dis = 0.0;
            for i in 0..u.len() {
                for j in 0..u.len() {
                    if i != j && u[i] != u[j] {
                        dis += 1.0;
                    }
                }
            }
            d_o += dis / (m - 1.0);
        }
        d_o /= n;
        let mut dis = 0.0;
        for i in 0..pooled.len() {
            for j in 0..pooled.len() {
                if i != j && pooled[i] != pooled[j] {
                    dis += 1.0;
                }
            }
        }
        let d_e = dis / (n * (n - 1.0));
        1.0 - d_o / d_e
    }

    fn label_units(anns: &[BwsAnnotation]) -> Vec<Vec<u8>> {
        let mut sets: BTreeMap<u64, Vec<&BwsAnnotation>> = BTreeMap::new();
        for a in anns {
            sets.entry(a.set_id).or_default().push(a);
        }
        let mut units = Vec::new();
        for judged in sets.values() {
            for s in 0..4 {
                units.push(
                    judged
                        .iter()
                        .map(|a| if s == a.best { 0 } else if s == a.worst { 1 } else { 2 })
                        .collect(),
                );
            }
        }
        units
    }

    #[test]
    fn identical_annotators_agree_perfectly() {
        let anns = vec![ann(0, "a", 0, 3), ann(0, "b", 0, 3), ann(1, "a", 2, 1), ann(1, "b", 2, 1)];
        assert_eq!(krippendorff_alpha(&anns).unwrap(), 1.0);
        assert!(disagreements(&anns).unwrap().is_empty());
    }

    #[test]
    fn two_annotator_two_set_fixture() {
        let anns = vec![ann(0, "a", 0, 3), ann(0, "b", 1, 3), ann(1, "a", 2, 1), ann(1, "b", 2, 0)];
        let got = krippendorff_alpha(&anns).unwrap();
        let want = oracle(&label_units(&anns));
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert_eq!(disagreements(&anns).unwrap(), vec![0, 1]);
    }

    #[test]
    fn textbook_value() {
        // 3 units, values {1,1},{1,2},{2,2}: n=6, o_11=2, o_12=o_21=1, o_22=2
        // alpha = 1 - 5 * 2 / (3*3*2) = 4/9
        let units = vec![vec![1, 1], vec![1, 2], vec![2, 2]];
        assert!((nominal_alpha(&units).unwrap() - 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_cases() {
        let one = vec![ann(0, "a", 0, 3), ann(1, "a", 1, 2)];
        assert!(matches!(krippendorff_alpha(&one), Err(Error::AgreementUndefined(_))));
        let disjoint = vec![ann(0, "a", 0, 3), ann(1, "b", 1, 2)];
        assert!(matches!(krippendorff_alpha(&disjoint), Err(Error::AgreementUndefined(_))));
        assert!(krippendorff_alpha(&[]).is_err());
    }

    fn arb_annotations() -> impl Strategy<Value = Vec<BwsAnnotation>> {
        proptest::collection::vec(proptest::collection::vec((0usize..4, 1usize..4, any::<bool>()), 3), 1..6).prop_map(
            |sets| {
                let mut out = Vec::new();
                for (sid, coders) in sets.iter().enumerate() {
                    for (ci, &(b, o, present)) in coders.iter().enumerate() {
                        if present || ci < 2 {
                            out.push(ann(sid as u64, &format!("c{ci}"), b, (b + o) % 4));
                        }
                    }
                }
                out
            },
        )
    }

    proptest! {
        #[test]
        fn matches_the_pairwise_oracle(anns in arb_annotations()) {
            let want = oracle(&label_units(&anns));
            let got = krippendorff_alpha(&anns).unwrap();
            prop_assert!((got - want).abs() < 1e-9);
            prop_assert!(got <= 1.0);
        }

        #[test]
        fn invariant_to_relabeling_and_set_order(anns in arb_annotations(), shift in 1u64..100) {
            let base = krippendorff_alpha(&anns).unwrap();
            let mut renamed: Vec<_> = anns.iter().map(|a| {
                let mut a = a.clone();
                a.annotator_id = format!("z-{}", a.annotator_id);
                a.set_id = 1000 - a.set_id * shift;
                a
            }).collect();
            renamed.reverse();
            prop_assert!((krippendorff_alpha(&renamed).unwrap() - base).abs() < 1e-12);
        }
    }
}
