use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tonescope_core::fairness::{
    accuracy, confusion, control_disparate_impact, disparate_impact, selection_rate,
    separation_gaps, sufficiency_gaps, ConfusionMatrix, DisparateImpact, Group, GroupedConfusion,
};
use tonescope_core::records::Diagnosis;

type Entry = (bool, bool, bool); // (pred malignant, truth malignant, dark)

fn diag(b: bool) -> Diagnosis {
    if b {
        Diagnosis::Malignant
    } else {
        Diagnosis::Benign
    }
}

#[derive(Debug, PartialEq)]
struct Metrics {
    accuracy: f64,
    rate_dark: Option<f64>,
    rate_light: Option<f64>,
    di: Option<Option<f64>>,
    tpr_gap: Option<f64>,
    fpr_gap: Option<f64>,
    ppv_gap: Option<f64>,
    for_gap: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Counts straight off the log.
fn oracle(log: &[Entry]) -> Metrics {
    let count = |f: &dyn Fn(&Entry) -> bool| log.iter().filter(|e| f(e)).count();
    let correct = count(&|e| e.0 == e.1);
    let group = |dark: bool| {
        let n = count(&|e| e.2 == dark);
        let sel = count(&|e| e.2 == dark && e.0);
        let pos = count(&|e| e.2 == dark && e.1);
        let tp = count(&|e| e.2 == dark && e.0 && e.1);
        let fp = count(&|e| e.2 == dark && e.0 && !e.1);
        let fneg = count(&|e| e.2 == dark && !e.0 && e.1);
        (
            ratio(sel, n),
            ratio(tp, pos),
            ratio(fp, n - pos),
            ratio(tp, sel),
            ratio(fneg, n - sel),
        )
    };
    let (rd, tpr_d, fpr_d, ppv_d, for_d) = group(true);
    let (rl, tpr_l, fpr_l, ppv_l, for_l) = group(false);
    let gap = |a: Option<f64>, b: Option<f64>| Some((a? - b?).abs());
    let both_rates = |a: Option<f64>, b: Option<f64>, c: Option<f64>, d: Option<f64>| {
        if a.is_some() && b.is_some() && c.is_some() && d.is_some() {
            Some(())
        } else {
            None
        }
    };
    let sep_ok = both_rates(tpr_d, fpr_d, tpr_l, fpr_l);
    let suf_ok = both_rates(ppv_d, for_d, ppv_l, for_l);
    Metrics {
        accuracy: correct as f64 / log.len() as f64,
        rate_dark: rd,
        rate_light: rl,
        di: match (rd, rl) {
            (Some(d), Some(l)) => Some((l > 0.0).then(|| d / l)),
            _ => None,
        },
        tpr_gap: sep_ok.and(gap(tpr_d, tpr_l)),
        fpr_gap: sep_ok.and(gap(fpr_d, fpr_l)),
        ppv_gap: suf_ok.and(gap(ppv_d, ppv_l)),
        for_gap: suf_ok.and(gap(for_d, for_l)),
    }
}

fn library(log: &[Entry]) -> Metrics {
    let preds: Vec<Diagnosis> = log.iter().map(|e| diag(e.0)).collect();
    let truth: Vec<Diagnosis> = log.iter().map(|e| diag(e.1)).collect();
    let groups: Vec<Option<Group>> = log
        .iter()
        .map(|e| Some(if e.2 { Group::Dark } else { Group::Light }))
        .collect();
    let grouped = GroupedConfusion::from_predictions(&preds, &truth, &groups).unwrap();
    let rate = |g| grouped.get(g).and_then(|cm| selection_rate(cm).ok());
    let sep = separation_gaps(&grouped, Group::Dark, Group::Light).ok();
    let suf = sufficiency_gaps(&grouped, Group::Dark, Group::Light).ok();
    Metrics {
        accuracy: accuracy(&confusion(&preds, &truth).unwrap()).unwrap(),
        rate_dark: rate(Group::Dark),
        rate_light: rate(Group::Light),
        di: disparate_impact(&grouped, Group::Dark, Group::Light)
            .ok()
            .map(|d| d.value()),
        tpr_gap: sep.map(|s| s.tpr),
        fpr_gap: sep.map(|s| s.fpr),
        ppv_gap: suf.map(|s| s.ppv),
        for_gap: suf.map(|s| s.for_),
    }
}

fn entry(kind: usize) -> Entry {
    (kind & 1 != 0, kind & 2 != 0, kind & 4 != 0)
}

/// Every multiset of the 8 entry kinds with `remaining` more entries.
fn enumerate(
    kind: usize,
    remaining: usize,
    counts: &mut [usize; 8],
    visit: &mut dyn FnMut(&[usize; 8]),
) {
    if kind == 7 {
        counts[7] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[kind] = c;
        enumerate(kind + 1, remaining - c, counts, visit);
    }
}

#[test]
fn exhaustive_logs_match_the_count_oracle() {
    // Every metric is order-invariant (see the property below), so each
    // multiset of log entries stands for all of its orderings.
    let mut checked = 0usize;
    for len in 1..=12 {
        let mut counts = [0usize; 8];
        enumerate(0, len, &mut counts, &mut |counts| {
            let log: Vec<Entry> = counts
                .iter()
                .enumerate()
                .flat_map(|(kind, &c)| std::iter::repeat_n(entry(kind), c))
                .collect();
            assert_eq!(library(&log), oracle(&log), "{counts:?}");
            checked += 1;
        });
    }
    // C(20, 8) - 1 non-empty multisets of size <= 12 over 8 kinds.
    assert_eq!(checked, 125_969);
}

fn arb_log() -> impl Strategy<Value = Vec<Entry>> {
    prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..40)
}

fn cm_strategy() -> impl Strategy<Value = ConfusionMatrix> {
    (0u64..50, 0u64..50, 0u64..50, 0u64..50)
        .prop_map(|(tp, fp, fn_, tn)| ConfusionMatrix::new(tp, fp, fn_, tn))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_ignore_log_order(log in arb_log(), seed in any::<u64>()) {
        let mut shuffled = log.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(library(&log), library(&shuffled));
    }

    #[test]
    fn selection_rate_reconstructs_counts(cm in cm_strategy()) {
        if let Ok(r) = selection_rate(&cm) {
            prop_assert_eq!((r * cm.total() as f64).round() as u64, cm.tp + cm.fp);
        }
    }

    #[test]
    fn di_is_antisymmetric_and_scale_invariant(a in cm_strategy(), b in cm_strategy(), k in 1u64..20) {
        let g = GroupedConfusion::default().with(Group::Dark, a).with(Group::Light, b);
        let scaled = GroupedConfusion::default().with(Group::Dark, a.scaled(k)).with(Group::Light, b.scaled(k));
        let fwd = disparate_impact(&g, Group::Dark, Group::Light);
        let back = disparate_impact(&g, Group::Light, Group::Dark);
        if let (Ok(DisparateImpact::Defined(x)), Ok(DisparateImpact::Defined(y))) = (&fwd, &back) {
            prop_assert!((x * y - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(fwd, disparate_impact(&scaled, Group::Dark, Group::Light));
        prop_assert_eq!(
            separation_gaps(&g, Group::Dark, Group::Light),
            separation_gaps(&scaled, Group::Dark, Group::Light)
        );
        prop_assert_eq!(
            sufficiency_gaps(&g, Group::Dark, Group::Light),
            sufficiency_gaps(&scaled, Group::Dark, Group::Light)
        );
        let pooled = g.pooled();
        if pooled.total() > 0 {
            prop_assert_eq!(accuracy(&pooled), accuracy(&scaled.pooled()));
        }
        prop_assert_eq!(pooled, a + b);
        // Swapping groups leaves absolute gaps unchanged.
        prop_assert_eq!(
            separation_gaps(&g, Group::Dark, Group::Light).ok(),
            separation_gaps(&g, Group::Light, Group::Dark).ok()
        );
    }
}

#[test]
fn control_di_band_on_unbiased_predictions() {
    // n = 1000 predictions at selection rate 0.3, 500 seeds.
    let mut inside = 0;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut preds = vec![Diagnosis::Benign; 700];
        preds.extend(vec![Diagnosis::Malignant; 300]);
        preds.shuffle(&mut rng);
        let di = control_disparate_impact(&preds, &mut rng).unwrap();
        if di.value().is_some_and(|v| (0.8..=1.25).contains(&v)) {
            inside += 1;
        }
    }
    assert!(inside as f64 / 500.0 >= 0.95, "{inside}/500");
}
