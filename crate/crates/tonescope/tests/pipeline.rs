use std::path::Path;

use proptest::prelude::*;
use tonescope::commands::{cmd_ingest, summary_of, SUMMARY_FILE};
use tonescope::fixture::{
    generate_fixture, render_record, CellCounts, DiagnosisSignal, FixtureSpec, ToneSignal,
};
use tonescope::images::load_images;
use tonescope::metadata::{load_metadata, read_metadata, write_metadata, METADATA_FILE};
use tonescope_core::records::{summarize, Diagnosis, Fst, ImageRecord, Tone};

fn arb_record() -> impl Strategy<Value = ImageRecord> {
    (
        "[a-z0-9_]{1,12}",
        any::<bool>(),
        prop::sample::select(Fst::ALL.to_vec()),
        "[a-z/]{1,10}\\.(png|jpg)",
    )
        .prop_map(|(id, m, fst, path)| {
            let d = if m {
                Diagnosis::Malignant
            } else {
                Diagnosis::Benign
            };
            ImageRecord::new(id, d, fst, path)
        })
}

fn unique(records: Vec<ImageRecord>) -> Vec<ImageRecord> {
    let mut seen = std::collections::HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert(r.id.clone()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metadata_write_then_load_is_identity(records in prop::collection::vec(arb_record(), 0..30).prop_map(unique)) {
        let mut buf = Vec::new();
        write_metadata(&mut buf, &records).unwrap();
        prop_assert_eq!(read_metadata(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn summary_ignores_record_order(records in prop::collection::vec(arb_record(), 0..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let s = summary_of(&records);
        prop_assert_eq!(&s, &summary_of(&shuffled));
        prop_assert_eq!(s.benign_light + s.benign_dark + s.malignant_light + s.malignant_dark, s.toned);
        prop_assert_eq!(s.toned + s.untoned, s.records);
    }
}

#[test]
fn archive_composition_summary() {
    // Cell counts of the published tone subset.
    let mut rs = Vec::new();
    for (d, fst, n) in [
        (Diagnosis::Benign, Fst::I, 2250),
        (Diagnosis::Benign, Fst::III, 457),
        (Diagnosis::Malignant, Fst::II, 769),
        (Diagnosis::Malignant, Fst::IV, 147),
    ] {
        for _ in 0..n {
            rs.push(ImageRecord::new(format!("i{}", rs.len()), d, fst, "x"));
        }
    }
    let s = summarize(&rs).unwrap();
    assert_eq!(
        (s.total(), s.benign(), s.malignant(), s.light(), s.dark()),
        (3623, 2707, 916, 3019, 604)
    );
    assert!((s.benign_ratio() - 0.747).abs() < 5e-4);
    assert!((s.light_ratio() - 0.833).abs() < 5e-4);
}

#[test]
fn empty_fixture_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        counts: CellCounts::default(),
        ..FixtureSpec::unbiased(0)
    };
    assert!(generate_fixture(dir.path(), &spec).unwrap().is_empty());
    let text = std::fs::read_to_string(dir.path().join(METADATA_FILE)).unwrap();
    assert_eq!(text, "isic_id,diagnosis,fitzpatrick_skin_type,image_path\n");
}

#[test]
fn ingest_uniform_fixture_has_four_equal_cells() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        counts: CellCounts::uniform(10),
        side: 16,
        ..FixtureSpec::unbiased(4)
    };
    generate_fixture(dir.path(), &spec).unwrap();
    let s = cmd_ingest(dir.path(), None).unwrap();
    assert_eq!(
        [
            s.benign_light,
            s.benign_dark,
            s.malignant_light,
            s.malignant_dark
        ],
        [10; 4]
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap())
            .unwrap();
    assert_eq!(json["summary"]["toned"], 40);

    let loaded = load_metadata(&dir.path().join(METADATA_FILE)).unwrap();
    let images = load_images(dir.path(), &loaded, 16).unwrap();
    assert_eq!(images.len(), 40);
    assert!(images.iter().all(|i| i.pixels.len() == 3 * 16 * 16));
    assert_eq!(images[0].id, loaded[0].id);
}

#[test]
fn fixtures_are_reproducible_on_disk() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = FixtureSpec {
        counts: CellCounts::uniform(2),
        side: 16,
        ..FixtureSpec::biased(11)
    };
    generate_fixture(a.path(), &spec).unwrap();
    generate_fixture(b.path(), &spec).unwrap();
    let read = |p: &Path, f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read(a.path(), METADATA_FILE), read(b.path(), METADATA_FILE));
    assert_eq!(
        read(a.path(), "images/fx_00003.png"),
        read(b.path(), "images/fx_00003.png")
    );
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> (f64, f64) {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = f64::from(k);
        p += 2.0 * (-1.0f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}

fn mean_intensities(spec: &FixtureSpec, tone: Tone) -> Vec<f64> {
    let records = tonescope::fixture::fixture_records(spec);
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.tone() == Some(tone))
        .map(|(i, r)| {
            let img = render_record(spec, r, i);
            img.as_raw().iter().map(|&v| f64::from(v)).sum::<f64>() / img.as_raw().len() as f64
        })
        .collect()
}

#[test]
fn ks_statistic_matches_reference_values() {
    // scipy.stats.ks_2samp gives D = 0.5; the small-sample corrected
    // Kolmogorov series evaluated in Python gives p = 0.36700.
    let (d, p) = ks_two_sample(
        vec![1.0, 2.0, 3.0, 4.0, 5.0],
        vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
    );
    assert!((d - 0.5).abs() < 1e-12);
    assert!((p - 0.367_001_385).abs() < 1e-8, "{p}");
}

#[test]
fn without_tone_signal_tones_look_alike() {
    let spec = FixtureSpec {
        side: 32,
        ..FixtureSpec::unbiased(21)
    };
    assert_eq!(spec.tone_signal, ToneSignal::None);
    let (d, p) = ks_two_sample(
        mean_intensities(&spec, Tone::Light),
        mean_intensities(&spec, Tone::Dark),
    );
    assert!(p > 0.01, "D = {d}, p = {p}");

    let shifted = FixtureSpec {
        side: 32,
        diagnosis_signal: DiagnosisSignal::Blob,
        ..FixtureSpec::biased(21)
    };
    let (_, p) = ks_two_sample(
        mean_intensities(&shifted, Tone::Light),
        mean_intensities(&shifted, Tone::Dark),
    );
    assert!(p < 1e-6, "{p}");
}
