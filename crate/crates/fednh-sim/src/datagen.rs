//! Synthetic spiral datasets and non-i.i.d. Dirichlet partitioning.
//!
//! Class k of the spiral sweeps radius 1..10 along an arc of k*pi/3
//! radians starting at angle k*pi/3, with Gaussian angular noise. The
//! partitioner draws per-class client proportions from a symmetric
//! Dirichlet(beta) and cuts each (shuffled) class contiguously.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::{Result, SimError};

/// Points with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if points.is_empty() || points.len() != labels.len() {
            return Err(SimError::InvalidArgument(format!(
                "dataset needs matching nonempty points/labels, got {}/{}",
                points.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(SimError::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            points,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Per-client index lists into a dataset.
#[derive(Debug, Clone)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.assignments.len()
    }

    /// Clients holding no samples at all; excluded from round sampling.
    pub fn empty_clients(&self) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, idx)| idx.is_empty())
            .map(|(k, _)| k)
            .collect()
    }
}

/// Angular layout of the spiral arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpiralMode {
    /// The six-arm layout with arm k starting at k*pi/3. Rejects C != 6.
    StrictSixArm,
    /// Same construction with the start angle generalized to 2*pi*k/C.
    GeneralC,
}

/// Spiral generator. Class k, sample i (1-based, n_k samples):
/// r_i = 1 + (i-1) * 9/(n_k-1), omega = a_k + (i-1) * a_k/(n_k-1) + b_i
/// with b_i ~ N(0, noise_std^2), point (r sin omega, r cos omega);
/// a_k = k*pi/3 strict, 2*pi*k/C general. n_k = 1 degenerates to r = 1,
/// omega = a_k + b_1.
pub fn gen_spiral(
    counts: &[usize],
    noise_std: f64,
    seed: u64,
    mode: SpiralMode,
) -> Result<LabeledDataset> {
    let class_count = counts.len();
    if class_count < 2 {
        return Err(SimError::InvalidArgument(format!(
            "spiral needs at least 2 classes, got {class_count}"
        )));
    }
    if mode == SpiralMode::StrictSixArm && class_count != 6 {
        return Err(SimError::InvalidArgument(format!(
            "six-arm spiral requires exactly 6 classes, got {class_count}"
        )));
    }
    if counts.contains(&0) {
        return Err(SimError::InvalidArgument(
            "every spiral class needs at least 1 sample".into(),
        ));
    }
    if !(noise_std >= 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "noise_std must be >= 0, got {noise_std}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let total: usize = counts.iter().sum();
    let mut points = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (k, &n) in counts.iter().enumerate() {
        let start = match mode {
            SpiralMode::StrictSixArm => k as f64 * std::f64::consts::PI / 3.0,
            SpiralMode::GeneralC => 2.0 * std::f64::consts::PI * k as f64 / class_count as f64,
        };
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        for i in 0..n {
            let r = 1.0 + i as f64 * 9.0 / denom;
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
            let omega = start + i as f64 * start / denom + noise;
            points.push(vec![r * omega.sin(), r * omega.cos()]);
            labels.push(k);
        }
    }
    LabeledDataset::new(points, labels, class_count)
}

/// Per-class counts over the whole dataset or a subset of indices.
pub fn class_histogram(ds: &LabeledDataset, subset: Option<&[usize]>) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; ds.class_count];
    match subset {
        None => {
            for &l in &ds.labels {
                counts[l] += 1;
            }
        }
        Some(idx) => {
            for &i in idx {
                let l = *ds.labels.get(i).ok_or_else(|| {
                    SimError::InvalidArgument(format!(
                        "subset index {i} out of range for dataset of {}",
                        ds.len()
                    ))
                })?;
                counts[l] += 1;
            }
        }
    }
    Ok(counts)
}

/// Splits a dataset across K clients: for each class, proportions drawn
/// from Dirichlet(beta * 1_K) (normalized Gamma(beta, 1) draws), indices
/// shuffled within the class, then cut contiguously with integer counts
/// fixed by largest-remainder rounding (remainder ties go to the lower
/// client id). Every index is assigned exactly once.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    clients: usize,
    beta: f64,
    seed: u64,
) -> Result<Partition> {
    if clients == 0 {
        return Err(SimError::InvalidArgument("need at least 1 client".into()));
    }
    if !(beta > 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "Dirichlet beta must be > 0, got {beta}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| SimError::InvalidArgument(format!("Dirichlet beta {beta}: {e}")))?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for mut idx in by_class {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let proportions = dirichlet_draw(&gamma, clients, &mut rng);
        let counts = largest_remainder_counts(&proportions, idx.len());
        let mut cursor = 0usize;
        for (k, &n) in counts.iter().enumerate() {
            assignments[k].extend_from_slice(&idx[cursor..cursor + n]);
            cursor += n;
        }
    }
    Ok(Partition { assignments })
}

/// Dirichlet(beta * 1_K) sample as normalized Gamma(beta, 1) draws;
/// an all-underflow draw (possible for tiny beta) degenerates to the
/// first client rather than dividing by zero.
fn dirichlet_draw(gamma: &Gamma<f64>, clients: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        draws.fill(0.0);
        draws[0] = 1.0;
        return draws;
    }
    for d in &mut draws {
        *d /= sum;
    }
    draws
}

/// Integer counts summing to `total` that best match `proportions`:
/// floor everything, then hand the leftover units to the largest
/// fractional remainders (ties broken toward the lower index).
fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for (k, &p) in proportions.iter().enumerate() {
        let exact = p * total as f64;
        let floor = exact.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((exact - floor as f64, k));
    }
    // Descending remainder, ascending index on ties.
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut leftover = total - assigned.min(total);
    for &(_, k) in remainders.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[k] += 1;
        leftover -= 1;
    }
    counts
}
