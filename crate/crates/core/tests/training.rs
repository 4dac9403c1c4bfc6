use modex::data::{gen_blobs, LabeledDataset};
use modex::nnet::Ablation;
use modex::trainer::{accuracy, predict_batch, train, Architecture, TrainConfig};
use modex::Matrix;

fn two_blobs() -> (LabeledDataset, LabeledDataset) {
    gen_blobs(2, 100, 2, 1.0, 7).unwrap().split(0.9, 1)
}

fn cfg(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        max_epochs: 50,
        arch: Architecture::tiny(16),
        ablation,
        ..TrainConfig::default()
    }
}

/// Nearest-class-mean classifier, an oracle that the blobs are separable at all.
fn nearest_mean_accuracy(ds: &LabeledDataset) -> f64 {
    let means: Vec<Vec<f64>> = ds.class_means().into_iter().map(Option::unwrap).collect();
    let hits = (0..ds.len())
        .filter(|i| {
            let x = ds.x(*i);
            let d = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (d(&means[1]) < d(&means[0])) == (ds.labels[*i] == 1)
        })
        .count();
    hits as f64 / ds.len() as f64
}

#[test]
fn separable_blobs_are_learned() {
    let (tr, va) = two_blobs();
    assert!(nearest_mean_accuracy(&tr) >= 0.99);
    let (m, h) = train(&cfg(Ablation::default()), &tr, &va).unwrap();
    assert!(accuracy(&m, &tr).unwrap() >= 0.99);
    assert!(h.epochs.len() <= 50);
    assert_eq!(h.stopped_early, h.epochs.len() < 50);
}

#[test]
fn edl_style_baseline_also_learns() {
    let (tr, va) = two_blobs();
    let (m, _) = train(&cfg(Ablation::edl_baseline()), &tr, &va).unwrap();
    assert!(accuracy(&m, &tr).unwrap() >= 0.95);
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = two_blobs();
    let (a, ha) = train(&cfg(Ablation::default()), &tr, &va).unwrap();
    let (b, hb) = train(&cfg(Ablation::default()), &tr, &va).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.to_csv(), hb.to_csv());
}

#[test]
fn early_stopping_shortens_history() {
    let (tr, va) = two_blobs();
    let c = TrainConfig {
        max_epochs: 300,
        early_stop_patience: 2,
        lr: 0.05,
        ..cfg(Ablation::default())
    };
    let (_, h) = train(&c, &tr, &va).unwrap();
    assert!(h.stopped_early);
    assert!(h.epochs.len() < 300);
    // stops once two epochs pass without improving on the best
    assert_eq!(h.epochs.len(), h.best_epoch + 3);
}

#[test]
fn trained_model_keeps_spectral_bound() {
    let (tr, va) = two_blobs();
    let (m, _) = train(&cfg(Ablation::default()), &tr, &va).unwrap();
    let mut rng = modex::Rng::new(0);
    for w in m.normalized_matrices() {
        let s = modex::numerics::spectral_sigma(w, 200, &mut rng).unwrap().sigma;
        assert!(s <= 1.0 + 1e-2, "{s}");
    }
}

#[test]
fn predict_batch_is_stateless() {
    let (tr, va) = two_blobs();
    let (m, _) = train(&cfg(Ablation::default()), &tr, &va).unwrap();
    let rows = va.rows();
    let all = predict_batch(&m, &rows).unwrap();
    assert_eq!(all.len(), rows.len());
    let one_by_one: Vec<_> = rows.iter().flat_map(|r| predict_batch(&m, &[*r]).unwrap()).collect();
    assert_eq!(all, one_by_one);
    assert!(predict_batch(&m, &[&[1.0, 2.0, 3.0][..]]).is_err());
}

#[test]
fn inputs_far_between_the_blobs_carry_more_epistemic_uncertainty() {
    let (tr, va) = two_blobs();
    let (m, _) = train(&cfg(Ablation::default()), &tr, &va).unwrap();
    // blobs sit at (4, 0) and (-4, 0); these points are far from both
    let far = Matrix::from_rows(&(0..20).map(|i| vec![0.0, 20.0 + i as f64]).collect::<Vec<_>>()).unwrap();
    let far_rows: Vec<&[f64]> = (0..far.rows()).map(|i| far.row(i)).collect();
    let mean_eu = |rows: &[&[f64]]| {
        let r = predict_batch(&m, rows).unwrap();
        r.iter().map(|x| x.eu).sum::<f64>() / r.len() as f64
    };
    let (id, ood) = (mean_eu(&va.rows()), mean_eu(&far_rows));
    assert!(ood > id, "far {ood} vs in-distribution {id}");
}
