use modex::data::{add_label_ambiguity, gen_blobs, gen_ood};
use modex::eval::{aupr, auroc, misclassification_task, ood_task, shift_task};
use modex::trainer::{train, Architecture, TrainConfig};
use modex::Rng;
use proptest::prelude::*;

/// Every positive-negative pair, ties worth one half.
fn auroc_pairs(s: &[f64], l: &[bool]) -> f64 {
    let mut wins = 0.0;
    let (mut p, mut n) = (0usize, 0usize);
    for i in 0..s.len() {
        if l[i] {
            p += 1;
        } else {
            n += 1;
        }
    }
    for i in (0..s.len()).filter(|i| l[*i]) {
        for j in (0..s.len()).filter(|j| !l[*j]) {
            if s[i] > s[j] {
                wins += 1.0;
            } else if s[i] == s[j] {
                wins += 0.5;
            }
        }
    }
    wins / (p * n) as f64
}

/// Sweep every distinct score as a threshold from the top, recomputing the
/// confusion counts from scratch each time.
fn aupr_sweep(s: &[f64], l: &[bool]) -> f64 {
    let mut thresholds = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = l.iter().filter(|x| **x).count();
    let mut prev_tp = 0usize;
    let mut area = 0.0;
    for t in thresholds {
        let tp = (0..s.len()).filter(|i| s[*i] >= t && l[*i]).count();
        let fp = (0..s.len()).filter(|i| s[*i] >= t && !l[*i]).count();
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    area / positives as f64
}

fn random_instance(rng: &mut Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = 2 + rng.below(11);
        // a coarse grid makes ties common
        let s: Vec<f64> = (0..n).map(|_| rng.below(5) as f64 / 4.0).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        if l.iter().any(|x| *x) && l.iter().any(|x| !*x) {
            return (s, l);
        }
    }
}

#[test]
fn metrics_equal_brute_force_oracles() {
    let mut rng = Rng::new(9);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut rng);
        assert_eq!(auroc(&s, &l).unwrap(), auroc_pairs(&s, &l), "{s:?} {l:?}");
        assert_eq!(aupr(&s, &l).unwrap(), aupr_sweep(&s, &l), "{s:?} {l:?}");
    }
}

#[test]
fn four_point_example_matches_sweep() {
    let s = [0.9, 0.8, 0.7, 0.6];
    let l = [true, false, true, false];
    assert_eq!(auroc(&s, &l).unwrap(), 0.75);
    assert_eq!(aupr(&s, &l).unwrap(), aupr_sweep(&s, &l));
}

#[test]
fn random_scores_give_chance_auroc() {
    let mut rng = Rng::new(4);
    let s: Vec<f64> = (0..2000).map(|_| rng.uniform()).collect();
    let l: Vec<bool> = (0..2000).map(|i| i % 2 == 0).collect();
    assert!((auroc(&s, &l).unwrap() - 0.5).abs() < 0.05);
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40)
        .prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, l)| l.iter().any(|x| *x) && l.iter().any(|x| !*x))
}

proptest! {
    #[test]
    fn monotone_transforms_do_not_change_metrics((s, l) in scores_and_labels()) {
        let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        prop_assert_eq!(aupr(&s, &l).unwrap(), aupr(&t, &l).unwrap());
    }

    #[test]
    fn sign_flip_mirrors_auroc((s, l) in scores_and_labels()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&neg, &l).unwrap() - (1.0 - auroc(&s, &l).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval((s, l) in scores_and_labels()) {
        let (a, p) = (auroc(&s, &l).unwrap(), aupr(&s, &l).unwrap());
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&p));
    }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        max_epochs: 60,
        arch: Architecture::tiny(16),
        ..TrainConfig::default()
    }
}

#[test]
fn ambiguous_blobs_misclassification_beats_base_rate() {
    let ds = gen_blobs(3, 200, 2, 1.0, 3).unwrap();
    let ds = add_label_ambiguity(&ds, 0.4, &[(0, 1)], 3).unwrap();
    let (tr, va) = ds.split(0.9, 3);
    let test = add_label_ambiguity(&gen_blobs(3, 200, 2, 1.0, 33).unwrap(), 0.4, &[(0, 1)], 33).unwrap();
    let (m, _) = train(&small_cfg(), &tr, &va).unwrap();
    let r = misclassification_task(&m, &test).unwrap();
    let base = r.n_pos as f64 / (r.n_pos + r.n_neg) as f64;
    assert!(r.aupr > base, "aupr {} base {base}", r.aupr);
}

#[test]
fn vanishing_ood_offset_is_undetectable_and_shift_has_one_result_per_severity() {
    let ds = gen_blobs(3, 200, 2, 1.0, 5).unwrap();
    let (tr, va) = ds.split(0.9, 5);
    let test = gen_blobs(3, 400, 2, 1.0, 55).unwrap();
    let (m, _) = train(&small_cfg(), &tr, &va).unwrap();
    let near = gen_ood(&test, 1e-9, 5).unwrap();
    let r = ood_task(&m, &test, &near).unwrap();
    assert!((r.auroc - 0.5).abs() < 0.05, "{}", r.auroc);
    let shifts = shift_task(&m, &test, &[1, 2, 5], 5).unwrap();
    assert_eq!(shifts.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![1, 2, 5]);
}
