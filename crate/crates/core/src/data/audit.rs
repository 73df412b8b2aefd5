use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::DatasetManifest;

/// Leakage between a training and an evaluation manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisjointnessReport {
    /// Image ids present in both manifests, sorted.
    pub image_overlaps: Vec<String>,
    /// Names registered as base in either manifest and as novel in either, sorted.
    pub category_overlaps: Vec<String>,
    pub pass: bool,
}

pub fn check_disjointness(train: &DatasetManifest, eval: &DatasetManifest) -> DisjointnessReport {
    let train_ids: BTreeSet<&str> = train.image_ids().into_iter().collect();
    let eval_ids: BTreeSet<&str> = eval.image_ids().into_iter().collect();
    let image_overlaps: Vec<String> = train_ids.intersection(&eval_ids).map(|s| s.to_string()).collect();

    let base: BTreeSet<&String> = train.registry.base.iter().chain(&eval.registry.base).collect();
    let novel: BTreeSet<&String> = train.registry.novel.iter().chain(&eval.registry.novel).collect();
    let category_overlaps: Vec<String> = base.intersection(&novel).map(|s| s.to_string()).collect();

    DisjointnessReport {
        pass: image_overlaps.is_empty() && category_overlaps.is_empty(),
        image_overlaps,
        category_overlaps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn manifest(prefix: &str, n: usize, seed: u64) -> DatasetManifest {
        let cfg = SynthConfig { id_prefix: prefix.into(), ..SynthConfig::default() };
        generate_synthetic(n, &cfg, seed).manifest
    }

    #[test]
    fn identical_manifests_fail_with_everything_listed() {
        let m = manifest("a", 5, 1);
        let r = check_disjointness(&m, &m);
        assert!(!r.pass);
        assert_eq!(r.image_overlaps.len(), 5);
    }

    #[test]
    fn disjoint_manifests_pass() {
        let r = check_disjointness(&manifest("train", 6, 1), &manifest("eval", 6, 2));
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn one_injected_id_is_reported() {
        let train = manifest("train", 6, 1);
        let mut eval = manifest("eval", 6, 2);
        if let super::super::Records::Vg(r) = &mut eval.records {
            r[3].image_id = "train-0004".into();
        }
        let r = check_disjointness(&train, &eval);
        assert_eq!(r.image_overlaps, vec!["train-0004".to_string()]);
        assert!(r.category_overlaps.is_empty());
    }

    proptest! {
        #[test]
        fn equals_brute_force_intersection(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut train = manifest("x", 1, 0);
            let mut eval = train.clone();
            let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
                (0..rng.random_range(0..15)).map(|_| format!("id{}", rng.random_range(0..30))).collect()
            };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            let template = train.grounding().unwrap()[0].clone();
            let build = |ids: &[String]| ids.iter().map(|id| { let mut s = template.clone(); s.image_id = id.clone(); s }).collect();
            train.records = super::super::Records::Vg(build(&a));
            eval.records = super::super::Records::Vg(build(&b));
            let mut want: Vec<String> = a.iter().filter(|x| b.contains(x)).cloned().collect();
            want.sort();
            want.dedup();
            let r = check_disjointness(&train, &eval);
            prop_assert_eq!(r.image_overlaps, want);
        }
    }
}
