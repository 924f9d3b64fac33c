use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tonescope_core::records::{summarize, Diagnosis, Fst, ImageRecord, Tone};
use tonescope_core::sampler::{
    split, undersample_diagnosis, undersample_tone, SplitDataset, Strategy,
};

fn records(
    benign_light: usize,
    benign_dark: usize,
    malignant_light: usize,
    malignant_dark: usize,
) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    let cells = [
        (Diagnosis::Benign, Fst::I, benign_light),
        (Diagnosis::Benign, Fst::III, benign_dark),
        (Diagnosis::Malignant, Fst::II, malignant_light),
        (Diagnosis::Malignant, Fst::IV, malignant_dark),
    ];
    for (d, fst, n) in cells {
        for _ in 0..n {
            let id = format!("isic_{:05}", out.len());
            out.push(ImageRecord::new(id.clone(), d, fst, format!("{id}.png")));
        }
    }
    out
}

fn ids(rs: &[ImageRecord]) -> Vec<&str> {
    let mut v: Vec<&str> = rs.iter().map(|r| r.id.as_str()).collect();
    v.sort_unstable();
    v
}

#[test]
fn each_benign_id_is_kept_two_fifths_of_the_time() {
    let input = records(5, 0, 2, 0);
    let mut kept: BTreeMap<String, u32> = BTreeMap::new();
    let seeds = 10_000;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = undersample_diagnosis(&input, &mut rng).unwrap();
        for r in out.iter().filter(|r| r.diagnosis == Diagnosis::Benign) {
            *kept.entry(r.id.clone()).or_default() += 1;
        }
    }
    assert_eq!(kept.len(), 5);
    for (id, n) in kept {
        let freq = f64::from(n) / seeds as f64;
        assert!((freq - 0.4).abs() <= 0.02, "{id}: {freq}");
    }
}

#[test]
fn stage_one_matches_archive_counts() {
    let input = records(2250, 457, 769, 147);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = undersample_diagnosis(&input, &mut rng).unwrap();
    let s = summarize(&out).unwrap();
    assert_eq!((s.benign(), s.malignant()), (916, 916));
}

#[test]
fn balanced_pipeline_on_archive_counts_is_roughly_500() {
    // The archive subset's light tone dominates, so stage two keeps every
    // dark record: 604 dark minus the benign dark ones dropped in stage one.
    let input = records(2250, 457, 769, 147);
    let mut sizes = Vec::new();
    for seed in 0..20 {
        let ds = SplitDataset::prepare(&input, Strategy::Balanced, seed, 1.0 / 3.0, false).unwrap();
        sizes.push(ds.len());
    }
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    assert!((450.0..=650.0).contains(&mean), "{mean}");
}

#[test]
fn split_sizes_follow_one_third() {
    let input = records(4, 3, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (train, val) = split(&input, 1.0 / 3.0, &mut rng, false).unwrap();
    assert_eq!((train.len(), val.len()), (6, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn stages_equalize_without_duplicates(
        bl in 0usize..60, bd in 0usize..60, ml in 0usize..60, md in 1usize..60,
        untoned in 0usize..5, seed in any::<u64>(),
    ) {
        let mut input = records(bl, bd, ml, md);
        for i in 0..untoned {
            input.push(ImageRecord::new(format!("u{i}"), Diagnosis::Benign, Fst::V, ""));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let one = undersample_diagnosis(&input, &mut rng).unwrap();
        let malignant = one.iter().filter(|r| r.diagnosis.is_positive()).count();
        prop_assert_eq!(malignant * 2, one.len());
        prop_assert_eq!(ids(&one).len(), ids(&one).into_iter().collect::<HashSet<_>>().len());

        let dark_in: HashSet<&str> = one.iter().filter(|r| r.tone() == Some(Tone::Dark)).map(|r| r.id.as_str()).collect();
        let light_in = one.iter().filter(|r| r.tone() == Some(Tone::Light)).count();
        if dark_in.is_empty() {
            prop_assert!(undersample_tone(&one, &mut rng).is_err());
            return Ok(());
        }
        let two = undersample_tone(&one, &mut rng).unwrap();
        let s = summarize(&two).unwrap();
        if light_in > 0 {
            prop_assert_eq!(s.light(), s.dark());
        }
        if light_in >= dark_in.len() {
            let dark_out: HashSet<&str> = two.iter().filter(|r| r.tone() == Some(Tone::Dark)).map(|r| r.id.as_str()).collect();
            prop_assert_eq!(dark_out, dark_in);
        }
        let all: HashSet<&str> = input.iter().map(|r| r.id.as_str()).collect();
        prop_assert!(two.iter().all(|r| all.contains(r.id.as_str())));
    }

    #[test]
    fn split_is_a_partition(n in 3usize..80, seed in any::<u64>(), stratify in any::<bool>()) {
        let input = records(n / 2, n / 4, n / 8, n - n / 2 - n / 4 - n / 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Ok((train, val)) = split(&input, 1.0 / 3.0, &mut rng, stratify) else {
            return Ok(());
        };
        prop_assert_eq!(val.len(), (input.len() as f64 / 3.0).round() as usize);
        let mut both: Vec<&str> = ids(&train);
        both.extend(ids(&val));
        both.sort_unstable();
        prop_assert_eq!(both, ids(&input));

        let mut again = ChaCha8Rng::seed_from_u64(seed);
        let (_, val2) = split(&input, 1.0 / 3.0, &mut again, stratify).unwrap();
        prop_assert_eq!(ids(&val), ids(&val2));
    }
}
