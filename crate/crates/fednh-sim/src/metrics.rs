//! Evaluation metrics: per-client weighted accuracy under both weight
//! choices, global accuracy, fairness, per-class recall, and prototype
//! similarity.
//!
//! Accuracies are assembled from integer per-class (correct, total)
//! counts, so the uniform-weighted accuracy is bitwise the plain
//! accuracy ratio and presence weights bitwise match a filtered count.

use ndarray::{Array2, ArrayView2, Axis};

use crate::datagen::LabeledDataset;
use crate::hypersphere::PrototypeMatrix;
use crate::model::{forward_body, forward_body_raw, gather, BodyParams, Predictor};
use crate::{Result, SimError};

/// Per-class weights alpha(c) for one client's accuracy.
#[derive(Debug, Clone)]
pub struct EvalWeights {
    weights: Vec<f64>,
}

impl EvalWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(SimError::InvalidArgument(
                "evaluation weights must be finite and >= 0".into(),
            ));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(SimError::InvalidArgument(
                "at least one evaluation weight must be positive".into(),
            ));
        }
        Ok(EvalWeights { weights })
    }

    /// Indicator weights: 1 for classes the client holds, 0 otherwise.
    pub fn presence(train_hist: &[usize]) -> Result<Self> {
        Self::new(
            train_hist
                .iter()
                .map(|&n| if n > 0 { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// Empirical-distribution weights: the raw training counts (the
    /// accuracy ratio is invariant to their normalization).
    pub fn empirical(train_hist: &[usize]) -> Result<Self> {
        Self::new(train_hist.iter().map(|&n| n as f64).collect())
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::new(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Integer per-class (correct, total) prediction counts.
pub fn per_class_counts(
    pred: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if pred.len() != labels.len() {
        return Err(SimError::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(labels.iter()) {
        if y >= classes {
            return Err(SimError::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    Ok((correct, total))
}

/// sum_c w_c correct_c / sum_c w_c total_c; None when the denominator is
/// zero (none of the client's classes appear in the test set), which
/// excludes the client from aggregate means.
pub fn weighted_accuracy_from_counts(
    correct: &[usize],
    total: &[usize],
    weights: &EvalWeights,
) -> Option<f64> {
    let w = weights.as_slice();
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..w.len().min(correct.len()) {
        num += w[c] * correct[c] as f64;
        den += w[c] * total[c] as f64;
    }
    if den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

/// Weighted accuracy of a model over a test set: argmax prediction
/// (ties to the lowest class id) scored under `weights`.
pub fn weighted_accuracy(
    model: &Predictor,
    testset: &LabeledDataset,
    weights: &EvalWeights,
) -> Result<Option<f64>> {
    let (x, y) = gather(testset, None);
    let pred = model.predict(x.view());
    let (correct, total) = per_class_counts(&pred, &y, testset.class_count)?;
    Ok(weighted_accuracy_from_counts(&correct, &total, weights))
}

/// Both personalized-model accuracies for one client from a single
/// prediction pass: PM(V) with presence weights, PM(L) with empirical
/// train-distribution weights. None marks an excluded (unscorable) side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientMetrics {
    pub pm_v: Option<f64>,
    pub pm_l: Option<f64>,
}

pub fn client_metrics(
    model: &Predictor,
    testset: &LabeledDataset,
    train_hist: &[usize],
) -> Result<ClientMetrics> {
    if train_hist.iter().all(|&n| n == 0) {
        // A client with no training data has no evaluable weighting.
        return Ok(ClientMetrics {
            pm_v: None,
            pm_l: None,
        });
    }
    let (x, y) = gather(testset, None);
    let pred = model.predict(x.view());
    let (correct, total) = per_class_counts(&pred, &y, testset.class_count)?;
    Ok(ClientMetrics {
        pm_v: weighted_accuracy_from_counts(&correct, &total, &EvalWeights::presence(train_hist)?),
        pm_l: weighted_accuracy_from_counts(&correct, &total, &EvalWeights::empirical(train_hist)?),
    })
}

/// Plain accuracy of the global model; bitwise equal to the
/// uniform-weighted accuracy by construction.
pub fn global_accuracy(model: &Predictor, testset: &LabeledDataset) -> Result<f64> {
    weighted_accuracy(model, testset, &EvalWeights::uniform(testset.class_count)?)?
        .ok_or_else(|| SimError::InvalidArgument("empty test set".into()))
}

/// recall[c] = correct_c / total_c; requires every class in the test set.
pub fn per_class_recall(model: &Predictor, testset: &LabeledDataset) -> Result<Vec<f64>> {
    let (x, y) = gather(testset, None);
    let pred = model.predict(x.view());
    let (correct, total) = per_class_counts(&pred, &y, testset.class_count)?;
    if let Some(c) = total.iter().position(|&n| n == 0) {
        return Err(SimError::InvalidArgument(format!(
            "class {c} absent from the test set; recall undefined"
        )));
    }
    Ok(correct
        .iter()
        .zip(total.iter())
        .map(|(&c, &t)| c as f64 / t as f64)
        .collect())
}

/// Gram matrix of prototype rows, built symmetric by construction.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub m: Array2<f64>,
}

pub fn prototype_similarity(w: &PrototypeMatrix) -> SimilarityMatrix {
    let a = w.as_array();
    let c = a.nrows();
    let mut m = Array2::<f64>::zeros((c, c));
    for i in 0..c {
        for j in i..c {
            let v = a.row(i).dot(&a.row(j));
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    SimilarityMatrix { m }
}

impl SimilarityMatrix {
    pub fn max_offdiag(&self) -> f64 {
        let c = self.m.nrows();
        let mut best = f64::NEG_INFINITY;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    best = best.max(self.m[[i, j]]);
                }
            }
        }
        best
    }
}

/// Standard deviation with the population (1/N) normalizer; the clients
/// are the whole population, not a sample.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Round-level aggregate of the personalized metrics.
#[derive(Debug, Clone)]
pub struct RoundAggregate {
    pub pm_v: f64,
    pub pm_l: f64,
    /// Population std of per-client PM(L) over included clients.
    pub fairness: f64,
    /// Clients excluded for having no evaluable weight.
    pub excluded: usize,
}

pub fn aggregate_clients(per_client: &[ClientMetrics]) -> RoundAggregate {
    let vs: Vec<f64> = per_client.iter().filter_map(|m| m.pm_v).collect();
    let ls: Vec<f64> = per_client.iter().filter_map(|m| m.pm_l).collect();
    let excluded = per_client.iter().filter(|m| m.pm_l.is_none()).count();
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    RoundAggregate {
        pm_v: mean(&vs),
        pm_l: mean(&ls),
        fairness: population_std(&ls),
        excluded,
    }
}

/// Per-class mean latent representations of a dataset under a body:
/// row c is the average representation of the class-c samples
/// (L2-normalized outputs when `normalized`, raw outputs otherwise).
pub fn mean_class_representations(
    theta: &BodyParams,
    ds: &LabeledDataset,
    normalized: bool,
) -> Result<Array2<f64>> {
    let (x, y) = gather(ds, None);
    let reps: Array2<f64> = if normalized {
        forward_body(theta, x.view())
    } else {
        forward_body_raw(theta, x.view())
    };
    let d = reps.ncols();
    let mut sums = Array2::<f64>::zeros((ds.class_count, d));
    let mut counts = vec![0usize; ds.class_count];
    for (row, &label) in reps.axis_iter(Axis(0)).zip(y.iter()) {
        let mut target = sums.row_mut(label);
        target += &row;
        counts[label] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let mut row = sums.row_mut(c);
            row.mapv_inplace(|v| v / n as f64);
        }
    }
    Ok(sums)
}

/// Cosine between two vectors; None if either is (near) zero.
pub fn cosine(a: ArrayView2<f64>, row_a: usize, b: ArrayView2<f64>, row_b: usize) -> Option<f64> {
    let u = a.row(row_a);
    let v = b.row(row_b);
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return None;
    }
    Some(u.dot(&v) / (nu * nv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_spiral, SpiralMode};
    use crate::hypersphere::simplex_etf;
    use crate::seeding::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn presence_mode_restricts_to_owned_classes() {
        // Client owns classes {0,1}; model perfect on 0, wrong on 1;
        // class 2 invisible to the weighting.
        let correct = [10, 0, 7];
        let total = [10, 10, 10];
        let w = EvalWeights::presence(&[5, 3, 0]).unwrap();
        let acc = weighted_accuracy_from_counts(&correct, &total, &w).unwrap();
        assert_abs_diff_eq!(acc, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn empirical_mode_weights_by_train_histogram() {
        let correct = [10, 0];
        let total = [10, 10];
        let w = EvalWeights::empirical(&[90, 10]).unwrap();
        let acc = weighted_accuracy_from_counts(&correct, &total, &w).unwrap();
        assert_abs_diff_eq!(acc, 0.9, epsilon = 1e-15);
    }

    #[test]
    fn uniform_weights_equal_plain_accuracy_bitwise() {
        let pred = vec![0, 1, 2, 0, 1, 1, 2, 0];
        let labels = vec![0, 1, 1, 0, 2, 1, 2, 1];
        let (correct, total) = per_class_counts(&pred, &labels, 3).unwrap();
        let w = EvalWeights::uniform(3).unwrap();
        let acc = weighted_accuracy_from_counts(&correct, &total, &w).unwrap();
        let plain =
            pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / pred.len() as f64;
        assert_eq!(acc.to_bits(), plain.to_bits());
    }

    #[test]
    fn rescaling_weights_does_not_move_accuracy() {
        let correct = [5, 2, 9];
        let total = [10, 4, 12];
        let w1 = EvalWeights::new(vec![1.0, 2.0, 0.5]).unwrap();
        let w2 = EvalWeights::new(vec![3.7, 7.4, 1.85]).unwrap();
        let a1 = weighted_accuracy_from_counts(&correct, &total, &w1).unwrap();
        let a2 = weighted_accuracy_from_counts(&correct, &total, &w2).unwrap();
        assert_abs_diff_eq!(a1, a2, epsilon = 1e-14);
    }

    #[test]
    fn zero_denominator_excludes_client() {
        // Client's only class is absent from the test set.
        let correct = [0, 0];
        let total = [0, 10];
        let w = EvalWeights::presence(&[4, 0]).unwrap();
        assert_eq!(weighted_accuracy_from_counts(&correct, &total, &w), None);
    }

    #[test]
    fn weights_validation() {
        assert!(EvalWeights::new(vec![0.0, 0.0]).is_err());
        assert!(EvalWeights::new(vec![-1.0, 2.0]).is_err());
        assert!(EvalWeights::new(vec![0.0, 2.0]).is_ok());
    }

    #[test]
    fn random_guess_accuracy_near_one_sixth() {
        // Monte-Carlo oracle: uniform predictions on a balanced test set.
        let labels: Vec<usize> = (0..3000).map(|i| i % 6).collect();
        let mut rng = rng_from_seed(42);
        for _ in 0..5 {
            let pred: Vec<usize> = (0..3000).map(|_| rng.random_range(0..6)).collect();
            let (correct, total) = per_class_counts(&pred, &labels, 6).unwrap();
            let w = EvalWeights::uniform(6).unwrap();
            let acc = weighted_accuracy_from_counts(&correct, &total, &w).unwrap();
            assert!((acc - 1.0 / 6.0).abs() < 0.03, "accuracy {acc}");
        }
    }

    #[test]
    fn recall_constant_predictor_and_random_guess() {
        let labels: Vec<usize> = (0..600).map(|i| i % 6).collect();
        let constant = vec![0usize; 600];
        let (correct, total) = per_class_counts(&constant, &labels, 6).unwrap();
        let recalls: Vec<f64> = correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| c as f64 / t as f64)
            .collect();
        assert_eq!(recalls[0], 1.0);
        assert!(recalls[1..].iter().all(|&r| r == 0.0));
        assert_abs_diff_eq!(
            recalls.iter().sum::<f64>() / 6.0,
            1.0 / 6.0,
            epsilon = 1e-12
        );

        let mut rng = rng_from_seed(7);
        let labels: Vec<usize> = (0..3000).map(|i| i % 6).collect();
        let pred: Vec<usize> = (0..3000).map(|_| rng.random_range(0..6)).collect();
        let (correct, total) = per_class_counts(&pred, &labels, 6).unwrap();
        for (&c, &t) in correct.iter().zip(&total) {
            let r = c as f64 / t as f64;
            assert!((r - 1.0 / 6.0).abs() < 0.05, "recall {r}");
        }
    }

    #[test]
    fn similarity_matrix_structure() {
        let etf = simplex_etf(3, 2, 0).unwrap();
        let sim = prototype_similarity(&etf);
        for i in 0..3 {
            assert_abs_diff_eq!(sim.m[[i, i]], 1.0, epsilon = 1e-9);
            for j in 0..3 {
                assert_eq!(sim.m[[i, j]].to_bits(), sim.m[[j, i]].to_bits());
                if i != j {
                    assert_abs_diff_eq!(sim.m[[i, j]], -0.5, epsilon = 1e-9);
                }
            }
        }
        assert_abs_diff_eq!(sim.max_offdiag(), -0.5, epsilon = 1e-9);

        let ident = PrototypeMatrix::new(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let sim = prototype_similarity(&ident);
        assert_abs_diff_eq!(sim.m[[0, 1]], 0.0, epsilon = 1e-15);

        let dup = PrototypeMatrix::new(ndarray::arr2(&[[1.0, 0.0], [1.0, 0.0]])).unwrap();
        let sim = prototype_similarity(&dup);
        assert_abs_diff_eq!(sim.m[[0, 1]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn population_std_matches_hand_value() {
        assert_abs_diff_eq!(population_std(&[0.8, 0.6]), 0.1, epsilon = 1e-15);
        assert_eq!(population_std(&[]), 0.0);
        assert_eq!(population_std(&[0.5]), 0.0);
    }

    #[test]
    fn aggregate_skips_excluded_clients() {
        let per_client = vec![
            ClientMetrics {
                pm_v: Some(0.8),
                pm_l: Some(0.8),
            },
            ClientMetrics {
                pm_v: None,
                pm_l: None,
            },
            ClientMetrics {
                pm_v: Some(0.6),
                pm_l: Some(0.6),
            },
        ];
        let agg = aggregate_clients(&per_client);
        assert_abs_diff_eq!(agg.pm_l, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(agg.fairness, 0.1, epsilon = 1e-15);
        assert_eq!(agg.excluded, 1);
    }

    #[test]
    fn mean_representations_are_unit_capped() {
        let ds = gen_spiral(&[40; 6], 1.0, 3, SpiralMode::StrictSixArm).unwrap();
        let theta =
            crate::model::BodyParams::init(&[2, 16, 16, 16, 2], &mut rng_from_seed(8)).unwrap();
        let reps = mean_class_representations(&theta, &ds, true).unwrap();
        for c in 0..6 {
            let n = reps.row(c).dot(&reps.row(c)).sqrt();
            assert!(n <= 1.0 + 1e-9, "class {c} mean norm {n}");
            assert!(n > 0.0);
        }
        let raw = mean_class_representations(&theta, &ds, false).unwrap();
        assert_eq!(raw.dim(), (6, 2));
    }
}
