//! Domain sets and the combinations each stage introduces.
//!
//! With nested domain sets `D_1 ⊂ D_2 ⊂ … ⊂ D_T`, `S_t` is every non-empty
//! subset of `D_t`, and stage `t` owns the combinations that are new to it:
//! `C_1 = S_1`, `C_t = S_t \ (S_1 ∪ … ∪ S_{t−1})`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DomainId = u32;

/// A set of co-occurring domains, ordered by id.
pub type Combination = BTreeSet<DomainId>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLabel {
    pub id: DomainId,
    pub name: String,
}

/// The four gourmet-video domains in the order they are introduced.
pub fn default_domains() -> Vec<DomainLabel> {
    ["presentation", "eating", "ingredients", "cooking"]
        .iter()
        .enumerate()
        .map(|(i, n)| DomainLabel {
            id: i as DomainId + 1,
            name: (*n).to_string(),
        })
        .collect()
}

/// Every non-empty subset of `set`, ordered by size then lexicographically.
pub fn nonempty_subsets(set: &Combination) -> Vec<Combination> {
    let items: Vec<DomainId> = set.iter().copied().collect();
    let n = items.len();
    assert!(n < 32, "too many domains for subset enumeration");
    let mut out: Vec<Combination> = (1u32..(1 << n))
        .map(|mask| {
            items
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &d)| d)
                .collect()
        })
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

/// The combinations new to each stage. Domain sets must be strictly nested.
pub fn domain_combinations(domain_sets: &[Combination]) -> Result<Vec<Vec<Combination>>> {
    for (t, w) in domain_sets.windows(2).enumerate() {
        if !(w[0].is_subset(&w[1]) && w[0].len() < w[1].len()) {
            return Err(Error::Config(format!(
                "domain set of stage {} is not a strict superset of stage {}",
                t + 2,
                t + 1
            )));
        }
    }
    if domain_sets.first().is_some_and(BTreeSet::is_empty) {
        return Err(Error::Config("stage 1 has no domains".into()));
    }
    // With nesting, S_1 ∪ … ∪ S_{t−1} = S_{t−1}: a subset of D_t is new
    // exactly when it is not contained in D_{t−1}.
    Ok(domain_sets
        .iter()
        .enumerate()
        .map(|(t, d)| {
            let subsets = nonempty_subsets(d);
            match t {
                0 => subsets,
                _ => subsets
                    .into_iter()
                    .filter(|s| !s.is_subset(&domain_sets[t - 1]))
                    .collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[DomainId]) -> Combination {
        ids.iter().copied().collect()
    }

    #[test]
    fn worked_three_stage_example() {
        let c = domain_combinations(&[set(&[1]), set(&[1, 2]), set(&[1, 2, 3])]).unwrap();
        assert_eq!(c[0], vec![set(&[1])]);
        assert_eq!(c[1], vec![set(&[2]), set(&[1, 2])]);
        assert_eq!(
            c[2],
            vec![set(&[3]), set(&[1, 3]), set(&[2, 3]), set(&[1, 2, 3])]
        );
    }

    #[test]
    fn single_stage_gets_all_subsets() {
        let c = domain_combinations(&[set(&[4, 7, 9])]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 7);
    }

    #[test]
    fn chain_sizes_double() {
        let sets: Vec<Combination> = (1..=4).map(|t| (1..=t).collect()).collect();
        let sizes: Vec<usize> = domain_combinations(&sets).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![1, 2, 4, 8]);
    }

    #[test]
    fn non_nested_sets_are_rejected() {
        assert!(domain_combinations(&[set(&[1]), set(&[2])]).is_err());
        assert!(domain_combinations(&[set(&[1]), set(&[1])]).is_err());
        assert!(domain_combinations(&[set(&[])]).is_err());
    }

    proptest! {
        #[test]
        fn combinations_partition_the_power_set(sizes in prop::collection::vec(1usize..3, 1..5)) {
            let mut sets = Vec::new();
            let mut next = 1;
            let mut cur = Combination::new();
            for s in sizes {
                for _ in 0..s {
                    cur.insert(next);
                    next += 1;
                }
                sets.push(cur.clone());
            }
            let c = domain_combinations(&sets).unwrap();
            let mut seen = BTreeSet::new();
            for (t, ct) in c.iter().enumerate() {
                for comb in ct {
                    prop_assert!(seen.insert(comb.clone()), "combination repeated across stages");
                }
                let expect: BTreeSet<Combination> = nonempty_subsets(&sets[t]).into_iter().collect();
                prop_assert_eq!(&seen, &expect);
            }
        }
    }
}
