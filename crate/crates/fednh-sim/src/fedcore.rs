//! The federated round loop: client sampling, local training, prototype
//! extraction, server body averaging and EMA prototype updates, plus the
//! free-head and purely-local baselines.
//!
//! One engine drives all four methods. Client updates run in parallel;
//! every reduction is performed in ascending client id, so outputs are
//! bitwise-independent of the thread schedule.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};
use crate::datagen::{class_histogram, dirichlet_partition, gen_spiral, LabeledDataset, Partition, SpiralMode};
use crate::hypersphere::{
    min_pairwise_distance, normalize_rows, solve_uniform_prototypes, PrototypeMatrix,
    DEFAULT_SOLVER_MAX_ITERS, DEFAULT_SOLVER_TOL,
};
use crate::metrics::{
    aggregate_clients, per_class_counts, weighted_accuracy_from_counts, ClientMetrics, EvalWeights,
};
use crate::model::{
    cosine_loss_and_grads, free_loss_and_grads, gather, BodyParams, FreeHead, HeadState, Predictor,
    SgdOptimizer,
};
use crate::seeding::SeedStreams;
use crate::{Result, SimError};

/// What one client sends back after a round of local work.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: usize,
    pub theta: BodyParams,
    /// Trained cosine scale; present iff the scale is trainable.
    pub scale: Option<f64>,
    /// Trained free head; present iff the method trains one.
    pub free_head: Option<Array2<f64>>,
    /// Per-class mean representations, zero rows for absent classes;
    /// present iff the method aggregates prototypes.
    pub mu: Option<Array2<f64>>,
    pub present: Vec<bool>,
    pub sample_count: usize,
    pub mean_loss: f64,
}

/// Either head kind, owned; predictors borrow from it.
#[derive(Debug, Clone)]
pub enum OwnedHead {
    Cosine(HeadState),
    Free(FreeHead),
}

impl OwnedHead {
    pub fn predictor<'a>(&'a self, theta: &'a BodyParams) -> Predictor<'a> {
        match self {
            OwnedHead::Cosine(h) => Predictor::Cosine { theta, head: h },
            OwnedHead::Free(h) => Predictor::Free { theta, head: h },
        }
    }

    pub fn cosine(&self) -> Option<&HeadState> {
        match self {
            OwnedHead::Cosine(h) => Some(h),
            OwnedHead::Free(_) => None,
        }
    }

    pub fn free(&self) -> Option<&FreeHead> {
        match self {
            OwnedHead::Free(h) => Some(h),
            OwnedHead::Cosine(_) => None,
        }
    }
}

/// A client's personalized model: its latest locally-trained body and
/// the head that body was trained against. `last_trained` is None for
/// clients never sampled (they carry the initial global model).
#[derive(Debug, Clone)]
pub struct PersonalState {
    pub theta: BodyParams,
    pub head: OwnedHead,
    pub last_trained: Option<usize>,
    pub metrics: ClientMetrics,
}

/// One row of the experiment log. Wall-clock time is kept out of this
/// record (and of log.csv) so reruns are byte-identical; timings live in
/// `RunOutput::round_seconds`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_train_loss: f64,
    pub gm: f64,
    pub pm_v: f64,
    pub pm_l: f64,
    pub fairness: f64,
    pub min_proto_dist: f64,
    pub excluded_clients: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    pub log: Vec<RoundRecord>,
    /// Sampled client ids per round, ascending within each round.
    pub schedule: Vec<Vec<usize>>,
    pub server_theta: BodyParams,
    pub server_head: OwnedHead,
    /// The initial uniform head, for cosine-head methods.
    pub w0: Option<PrototypeMatrix>,
    pub clients: Vec<PersonalState>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: Partition,
    pub train_hists: Vec<Vec<usize>>,
    pub round_seconds: Vec<f64>,
}

/// |S^t| = ceil(gamma * K), drawn uniformly without replacement from the
/// non-empty clients and returned in ascending id order. The tiny nudge
/// before ceil keeps decimal rates like 0.1 * 100 at their exact value.
pub fn sample_clients(
    total_clients: usize,
    gamma: f64,
    eligible: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(SimError::InvalidArgument(format!(
            "participation rate must lie in (0, 1], got {gamma}"
        )));
    }
    if eligible.is_empty() {
        return Err(SimError::InvalidArgument(
            "no clients with data to sample from".into(),
        ));
    }
    let want = ((gamma * total_clients as f64) - 1e-9).ceil().max(1.0) as usize;
    if want >= eligible.len() {
        if want > eligible.len() {
            eprintln!(
                "warning: requested {want} clients but only {} hold data; using all of them",
                eligible.len()
            );
        }
        return Ok(eligible.to_vec());
    }
    let picked = rand::seq::index::sample(rng, eligible.len(), want);
    let mut ids: Vec<usize> = picked.iter().map(|i| eligible[i]).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Eq.-style local prototypes: for each class present in (x, y), the
/// plain arithmetic mean of the normalized representations (never
/// renormalized); absent classes get the zero vector and a false mask.
pub fn local_prototypes(
    theta: &BodyParams,
    x: ArrayView2<f64>,
    y: &[usize],
    classes: usize,
) -> (Array2<f64>, Vec<bool>) {
    let reps = crate::model::forward_body(theta, x);
    let d = reps.ncols();
    let mut mu = Array2::<f64>::zeros((classes, d));
    let mut counts = vec![0usize; classes];
    for (row, &label) in reps.axis_iter(Axis(0)).zip(y.iter()) {
        let mut target = mu.row_mut(label);
        target += &row;
        counts[label] += 1;
    }
    let mut present = vec![false; classes];
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            present[c] = true;
            let mut row = mu.row_mut(c);
            row.mapv_inplace(|v| v / n as f64);
        }
    }
    (mu, present)
}

/// Local optimization settings for one round.
#[derive(Debug, Clone, Copy)]
pub struct LocalOpt {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// The head a client trains against this round.
pub enum ClientTask<'a> {
    /// Cosine head with W frozen; prototypes are reported when asked.
    Cosine {
        head: &'a HeadState,
        report_prototypes: bool,
    },
    /// Free head, trained along with the body.
    Free { head: &'a FreeHead },
}

/// Runs `epochs` passes of shuffled mini-batch SGD from the received
/// parameters, then extracts local prototypes from the trained body.
/// With zero epochs (or a zero learning rate) the parameters pass
/// through bitwise and only the loss is measured.
pub fn client_update(
    client_id: usize,
    theta_in: &BodyParams,
    task: ClientTask,
    train: &LabeledDataset,
    idx: &[usize],
    opt: &LocalOpt,
    rng: &mut ChaCha12Rng,
) -> Result<ClientReport> {
    if idx.is_empty() {
        return Err(SimError::InvalidArgument(format!(
            "client {client_id} has no local data"
        )));
    }
    let classes = train.class_count;
    let (x_all, y_all) = gather(train, Some(idx));
    let mut theta = theta_in.clone();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    enum LiveHead {
        Cosine { head: HeadState, report: bool },
        Free(FreeHead),
    }
    let mut live = match &task {
        ClientTask::Cosine {
            head,
            report_prototypes,
        } => LiveHead::Cosine {
            head: (*head).clone(),
            report: *report_prototypes,
        },
        ClientTask::Free { head } => LiveHead::Free((*head).clone()),
    };

    let stepping = opt.epochs > 0 && opt.lr > 0.0;
    if stepping {
        let mut sgd = SgdOptimizer::new(&theta, opt.lr, opt.momentum, opt.weight_decay)?;
        let mut order: Vec<usize> = (0..idx.len()).collect();
        for _ in 0..opt.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(opt.batch_size) {
                let mut xb = Array2::<f64>::zeros((chunk.len(), x_all.ncols()));
                let mut yb = Vec::with_capacity(chunk.len());
                for (row, &p) in chunk.iter().enumerate() {
                    xb.row_mut(row).assign(&x_all.row(p));
                    yb.push(y_all[p]);
                }
                match &mut live {
                    LiveHead::Cosine { head, .. } => {
                        let (loss, grads, grad_s) =
                            cosine_loss_and_grads(&theta, head, xb.view(), &yb)?;
                        sgd.step(&mut theta, &grads, Some(head), grad_s, None)?;
                        loss_sum += loss;
                    }
                    LiveHead::Free(head) => {
                        let (loss, grads, grad_v) =
                            free_loss_and_grads(&theta, head, xb.view(), &yb)?;
                        sgd.step(&mut theta, &grads, None, None, Some((head, &grad_v)))?;
                        loss_sum += loss;
                    }
                }
                loss_count += 1;
            }
        }
    } else {
        // Degenerate budget: measure the loss of the received model once.
        let loss = match &mut live {
            LiveHead::Cosine { head, .. } => {
                cosine_loss_and_grads(&theta, head, x_all.view(), &y_all)?.0
            }
            LiveHead::Free(head) => {
                free_loss_and_grads(&theta, &*head, x_all.view(), &y_all)?.0
            }
        };
        loss_sum += loss;
        loss_count += 1;
    }

    theta.assert_finite()?;
    let mean_loss = loss_sum / loss_count as f64;

    let (scale, free_head, mu, present) = match live {
        LiveHead::Cosine { head, report } => {
            let scale = if head.s_trainable { Some(head.s) } else { None };
            if report {
                let (mu, present) = local_prototypes(&theta, x_all.view(), &y_all, classes);
                (scale, None, Some(mu), present)
            } else {
                (scale, None, None, vec![false; classes])
            }
        }
        LiveHead::Free(head) => (None, Some(head.v), None, vec![false; classes]),
    };

    Ok(ClientReport {
        client_id,
        theta,
        scale,
        free_head,
        mu,
        present,
        sample_count: idx.len(),
        mean_loss,
    })
}

/// Coordinate-wise mean of the reported bodies (and of the trainable
/// scale and free head where reported), summed in ascending client id so
/// the result is independent of report order.
pub fn server_aggregate_body(
    reports: &[ClientReport],
) -> Result<(BodyParams, Option<f64>, Option<Array2<f64>>)> {
    if reports.is_empty() {
        return Err(SimError::InvalidArgument("no reports to aggregate".into()));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| reports[i].client_id);
    let n = reports.len() as f64;

    let first = &reports[order[0]];
    let mut theta = first.theta.zeros_like();
    for &i in &order {
        let r = &reports[i];
        if r.theta.widths() != first.theta.widths() {
            return Err(SimError::ShapeMismatch(format!(
                "client {} reported architecture {:?}, expected {:?}",
                r.client_id,
                r.theta.widths(),
                first.theta.widths()
            )));
        }
        for (acc, layer) in theta.layers.iter_mut().zip(&r.theta.layers) {
            acc.weight += &layer.weight;
            acc.bias += &layer.bias;
        }
    }
    for layer in &mut theta.layers {
        layer.weight.mapv_inplace(|v| v / n);
        layer.bias.mapv_inplace(|v| v / n);
    }

    let scale = if first.scale.is_some() {
        let mut sum = 0.0;
        for &i in &order {
            sum += reports[i].scale.ok_or_else(|| {
                SimError::ShapeMismatch("mixed scale reporting across clients".into())
            })?;
        }
        Some(sum / n)
    } else {
        None
    };

    let free = if let Some(head) = &first.free_head {
        let mut acc = Array2::<f64>::zeros(head.raw_dim());
        for &i in &order {
            acc += reports[i].free_head.as_ref().ok_or_else(|| {
                SimError::ShapeMismatch("mixed head reporting across clients".into())
            })?;
        }
        acc.mapv_inplace(|v| v / n);
        Some(acc)
    } else {
        None
    };

    Ok((theta, scale, free))
}

/// EMA prototype update followed by row renormalization:
/// W_c <- rho * W_c + (1 - rho) * sum_k alpha_k mu_{k,c}, alpha_k = 1/|S|.
/// The sum runs over every report, absent classes contributing their
/// zero vectors; with `present_only`, alpha is instead 1/(owners of c).
/// rho = 1 short-circuits to the unchanged matrix, bitwise. A class
/// aggregate that leaves a row degenerate keeps the previous prototype.
pub fn server_update_prototypes(
    w: &PrototypeMatrix,
    reports: &[ClientReport],
    rho: f64,
    present_only: bool,
) -> Result<PrototypeMatrix> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(SimError::InvalidArgument(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    if rho == 1.0 {
        return Ok(w.clone());
    }
    if reports.is_empty() {
        return Err(SimError::InvalidArgument("no reports for EMA".into()));
    }
    let (c, d) = (w.class_count(), w.dim());
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| reports[i].client_id);

    let mut agg = Array2::<f64>::zeros((c, d));
    let mut owners = vec![0usize; c];
    for &i in &order {
        let r = &reports[i];
        let mu = r.mu.as_ref().ok_or_else(|| {
            SimError::InvalidArgument(format!(
                "client {} reported no prototypes for the EMA",
                r.client_id
            ))
        })?;
        if mu.dim() != (c, d) {
            return Err(SimError::ShapeMismatch(format!(
                "client {} prototypes are {:?}, expected {:?}",
                r.client_id,
                mu.dim(),
                (c, d)
            )));
        }
        agg += mu;
        for (class, &p) in r.present.iter().enumerate() {
            if p {
                owners[class] += 1;
            }
        }
    }
    if present_only {
        for (class, mut row) in agg.axis_iter_mut(Axis(0)).enumerate() {
            if owners[class] > 0 {
                let n = owners[class] as f64;
                row.mapv_inplace(|v| v / n);
            }
            // No owners: the aggregate stays zero and the EMA shrinks the
            // row toward rho * W_c; renormalization restores the direction.
        }
    } else {
        let n = reports.len() as f64;
        agg.mapv_inplace(|v| v / n);
    }

    let mut pre = w.as_array().clone();
    pre.zip_mut_with(&agg, |wv, &av| *wv = rho * *wv + (1.0 - rho) * av);
    let (normalized, degenerate) = normalize_rows(pre)?;
    if degenerate.is_empty() {
        return Ok(normalized);
    }
    eprintln!(
        "warning: prototype rows {degenerate:?} degenerated in the EMA; keeping their previous values"
    );
    let mut fixed = normalized.into_array();
    for &row in &degenerate {
        fixed.row_mut(row).assign(&w.as_array().row(row));
    }
    PrototypeMatrix::new(fixed)
}

/// Full run for the configured method.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.threads {
        0 => run_inner(cfg),
        n => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SimError::Config(format!("thread pool: {e}")))?
            .install(|| run_inner(cfg)),
    }
}

/// Algorithm entry point for the prototype-EMA method.
pub fn run_fednh(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.method = Method::Fednh;
    run(&cfg)
}

/// Baseline entry point; `method` must not be the EMA method.
pub fn run_baseline(cfg: &ExperimentConfig, method: Method) -> Result<RunOutput> {
    if method == Method::Fednh {
        return Err(SimError::InvalidArgument(
            "baseline runner cannot run the primary method".into(),
        ));
    }
    let mut cfg = cfg.clone();
    cfg.method = method;
    run(&cfg)
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let streams = SeedStreams::new(cfg.seed);
    let mode = if cfg.general_c {
        SpiralMode::GeneralC
    } else {
        SpiralMode::StrictSixArm
    };
    let classes = cfg.class_count();
    let train = gen_spiral(&cfg.counts, cfg.noise_std, streams.train_data_seed(), mode)?;
    let test = gen_spiral(
        &vec![cfg.test_per_class; classes],
        cfg.noise_std,
        streams.test_data_seed(),
        mode,
    )?;
    let mut partition = dirichlet_partition(&train, cfg.clients, cfg.beta, streams.partition_seed())?;
    for idx in &mut partition.assignments {
        idx.sort_unstable();
    }
    let train_hists: Vec<Vec<usize>> = partition
        .assignments
        .iter()
        .map(|idx| class_histogram(&train, Some(idx)))
        .collect::<Result<_>>()?;
    let eligible: Vec<usize> = (0..cfg.clients)
        .filter(|&k| !partition.assignments[k].is_empty())
        .collect();
    if eligible.len() < cfg.clients {
        eprintln!(
            "warning: {} of {} clients received no data and are excluded from sampling",
            cfg.clients - eligible.len(),
            cfg.clients
        );
    }

    let theta0 = BodyParams::init(&cfg.widths(), &mut streams.body_init_rng())?;
    let (head0, w0) = match cfg.method {
        Method::Fednh | Method::FedavgUh => {
            let solved = solve_uniform_prototypes(
                classes,
                cfg.latent_dim,
                streams.head_init_seed(),
                DEFAULT_SOLVER_TOL,
                DEFAULT_SOLVER_MAX_ITERS,
            )?;
            if !solved.converged() {
                eprintln!("warning: uniform-prototype solver hit its iteration cap; using best found");
            }
            let w = solved.into_matrix();
            (
                OwnedHead::Cosine(HeadState::new(w.clone(), cfg.scale_init, cfg.scale_trainable)?),
                Some(w),
            )
        }
        Method::Fedavg | Method::Local => (
            OwnedHead::Free(FreeHead::init(
                classes,
                cfg.latent_dim,
                &mut streams.head_init_rng(),
            )?),
            None,
        ),
    };

    let (test_x, test_y) = gather(&test, None);

    let mut server_theta = theta0.clone();
    let mut server_head = head0.clone();
    let mut slots: Vec<PersonalState> = (0..cfg.clients)
        .map(|_| PersonalState {
            theta: theta0.clone(),
            head: head0.clone(),
            last_trained: None,
            metrics: ClientMetrics {
                pm_v: None,
                pm_l: None,
            },
        })
        .collect();
    let mut stale: Vec<bool> = vec![true; cfg.clients];

    let mut log = Vec::with_capacity(cfg.rounds);
    let mut schedule = Vec::with_capacity(cfg.rounds);
    let mut round_seconds = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let started = std::time::Instant::now();
        let record = run_round(
            cfg,
            &streams,
            round,
            &train,
            &partition,
            &train_hists,
            &eligible,
            &test_x,
            &test_y,
            classes,
            &mut server_theta,
            &mut server_head,
            &mut slots,
            &mut stale,
            &mut schedule,
        )
        .map_err(|e| e.in_round(round))?;
        log.push(record);
        round_seconds.push(started.elapsed().as_secs_f64());
    }

    Ok(RunOutput {
        log,
        schedule,
        server_theta,
        server_head,
        w0,
        clients: slots,
        train,
        test,
        partition,
        train_hists,
        round_seconds,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    cfg: &ExperimentConfig,
    streams: &SeedStreams,
    round: usize,
    train: &LabeledDataset,
    partition: &Partition,
    train_hists: &[Vec<usize>],
    eligible: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    classes: usize,
    server_theta: &mut BodyParams,
    server_head: &mut OwnedHead,
    slots: &mut [PersonalState],
    stale: &mut [bool],
    schedule: &mut Vec<Vec<usize>>,
) -> Result<RoundRecord> {
    let mut sampling_rng = streams.sampling_rng(round);
    let sampled = sample_clients(cfg.clients, cfg.gamma, eligible, &mut sampling_rng)?;
    schedule.push(sampled.clone());

    let lr_t = cfg.lr * cfg.lr_decay.powi(round as i32);
    let opt = LocalOpt {
        lr: lr_t,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
    };

    // Broadcast and train. Each client reads the just-broadcast global
    // state (its own previous state for the local baseline) and a
    // private RNG stream keyed by (client, round).
    let reports: Vec<ClientReport> = sampled
        .par_iter()
        .map(|&k| {
            let mut rng = streams.client_train_rng(k, round);
            let (theta_in, task): (&BodyParams, ClientTask) = match cfg.method {
                Method::Fednh => (
                    server_theta,
                    ClientTask::Cosine {
                        head: server_head.cosine().expect("cosine head"),
                        report_prototypes: true,
                    },
                ),
                Method::FedavgUh => (
                    server_theta,
                    ClientTask::Cosine {
                        head: server_head.cosine().expect("cosine head"),
                        report_prototypes: false,
                    },
                ),
                Method::Fedavg => (
                    server_theta,
                    ClientTask::Free {
                        head: server_head.free().expect("free head"),
                    },
                ),
                Method::Local => (
                    &slots[k].theta,
                    ClientTask::Free {
                        head: slots[k].head.free().expect("free head"),
                    },
                ),
            };
            client_update(
                k,
                theta_in,
                task,
                train,
                &partition.assignments[k],
                &opt,
                &mut rng,
            )
        })
        .collect::<Result<_>>()?;

    validate_reports(&reports, classes)?;

    // The head each sampled client trained against this round: the slot
    // keeps it as the personalized head.
    let broadcast_head = server_head.clone();
    for r in &reports {
        let slot = &mut slots[r.client_id];
        slot.theta = r.theta.clone();
        slot.head = match (&broadcast_head, &r.free_head) {
            (OwnedHead::Cosine(h), _) => OwnedHead::Cosine(HeadState::new(
                h.w.clone(),
                r.scale.unwrap_or(h.s),
                h.s_trainable,
            )?),
            (OwnedHead::Free(_), Some(v)) => OwnedHead::Free(FreeHead { v: v.clone() }),
            (OwnedHead::Free(_), None) => {
                return Err(SimError::ShapeMismatch(format!(
                    "client {} trained a free head but reported none",
                    r.client_id
                )));
            }
        };
        slot.last_trained = Some(round);
        stale[r.client_id] = true;
    }

    // Server update.
    if cfg.method != Method::Local {
        let (theta_new, scale_new, free_new) = server_aggregate_body(&reports)?;
        *server_theta = theta_new;
        match server_head {
            OwnedHead::Cosine(h) => {
                if let Some(s) = scale_new {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(SimError::NonFinite(format!(
                            "aggregated scale left the positive range: {s}"
                        )));
                    }
                    h.s = s;
                }
                if cfg.method == Method::Fednh {
                    h.w = server_update_prototypes(&h.w, &reports, cfg.rho, cfg.ema_present_only)?;
                    assert_unit_rows(&h.w)?;
                }
            }
            OwnedHead::Free(h) => {
                h.v = free_new.ok_or_else(|| {
                    SimError::ShapeMismatch("free-head method produced no aggregated head".into())
                })?;
            }
        }
    }

    // Evaluation: global model, then per-client personalized metrics
    // (recomputed only for clients whose model changed).
    let gm = if cfg.method == Method::Local {
        f64::NAN
    } else {
        let pred = server_head.predictor(server_theta).predict(test_x.view());
        let (correct, total) = per_class_counts(&pred, test_y, classes)?;
        weighted_accuracy_from_counts(&correct, &total, &EvalWeights::uniform(classes)?)
            .ok_or_else(|| SimError::InvalidArgument("empty test set".into()))?
    };

    let refresh: Vec<usize> = (0..slots.len()).filter(|&k| stale[k]).collect();
    let fresh: Vec<(usize, ClientMetrics)> = refresh
        .par_iter()
        .map(|&k| {
            let slot = &slots[k];
            let hist = &train_hists[k];
            if hist.iter().all(|&n| n == 0) {
                return Ok((
                    k,
                    ClientMetrics {
                        pm_v: None,
                        pm_l: None,
                    },
                ));
            }
            let pred = slot.head.predictor(&slot.theta).predict(test_x.view());
            let (correct, total) = per_class_counts(&pred, test_y, classes)?;
            Ok((
                k,
                ClientMetrics {
                    pm_v: weighted_accuracy_from_counts(
                        &correct,
                        &total,
                        &EvalWeights::presence(hist)?,
                    ),
                    pm_l: weighted_accuracy_from_counts(
                        &correct,
                        &total,
                        &EvalWeights::empirical(hist)?,
                    ),
                },
            ))
        })
        .collect::<Result<_>>()?;
    for (k, m) in fresh {
        slots[k].metrics = m;
        stale[k] = false;
    }
    let per_client: Vec<ClientMetrics> = slots.iter().map(|s| s.metrics).collect();
    let agg = aggregate_clients(&per_client);

    let min_proto_dist = match (cfg.method, &*server_head) {
        (Method::Local, _) => f64::NAN,
        (_, OwnedHead::Cosine(h)) => min_pairwise_distance(&h.w),
        (_, OwnedHead::Free(h)) => {
            min_pairwise_distance(&PrototypeMatrix::new(h.v.clone())?)
        }
    };

    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| reports[i].client_id);
    let mean_train_loss =
        order.iter().map(|&i| reports[i].mean_loss).sum::<f64>() / reports.len() as f64;

    Ok(RoundRecord {
        round,
        mean_train_loss,
        gm,
        pm_v: agg.pm_v,
        pm_l: agg.pm_l,
        fairness: agg.fairness,
        min_proto_dist,
        excluded_clients: agg.excluded,
    })
}

/// Zero-mask coupling and finiteness checks on every report.
fn validate_reports(reports: &[ClientReport], classes: usize) -> Result<()> {
    for r in reports {
        r.theta.assert_finite()?;
        if r.present.len() != classes {
            return Err(SimError::ShapeMismatch(format!(
                "client {} presence mask has {} classes, expected {classes}",
                r.client_id,
                r.present.len()
            )));
        }
        if let Some(mu) = &r.mu {
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(SimError::NonFinite(format!(
                    "client {} prototypes",
                    r.client_id
                )));
            }
            for (c, &p) in r.present.iter().enumerate() {
                let all_zero = mu.row(c).iter().all(|&v| v == 0.0);
                if !p && !all_zero {
                    return Err(SimError::InvalidArgument(format!(
                        "client {} reported a nonzero prototype for absent class {c}",
                        r.client_id
                    )));
                }
                if p && all_zero {
                    // Possible only if representations cancel exactly;
                    // harmless for the EMA but worth surfacing.
                    eprintln!(
                        "warning: client {} has an exactly-zero prototype for present class {c}",
                        r.client_id
                    );
                }
            }
        }
    }
    Ok(())
}

fn assert_unit_rows(w: &PrototypeMatrix) -> Result<()> {
    for (i, row) in w.as_array().axis_iter(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(SimError::NonFinite(format!(
                "prototype row {i} has norm {n} after the server update"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            counts: vec![40; 6],
            test_per_class: 30,
            clients: 4,
            gamma: 0.5,
            rounds: 3,
            epochs: 2,
            batch_size: 16,
            lr: 0.1,
            hidden_width: 16,
            ..ExperimentConfig::default()
        }
    }

    fn bits_of_body(b: &BodyParams) -> Vec<u64> {
        b.layers
            .iter()
            .flat_map(|l| {
                l.weight
                    .iter()
                    .chain(l.bias.iter())
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn sampling_sizes() {
        let mut rng = rng_from_seed(0);
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(sample_clients(10, 0.25, &all, &mut rng).unwrap().len(), 3);
        let all100: Vec<usize> = (0..100).collect();
        assert_eq!(
            sample_clients(100, 0.1, &all100, &mut rng).unwrap().len(),
            10
        );
        assert_eq!(
            sample_clients(10, 1.0, &all, &mut rng).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
        // More requested than hold data: use all of them.
        let few: Vec<usize> = vec![2, 5];
        assert_eq!(sample_clients(10, 0.9, &few, &mut rng).unwrap(), few);
    }

    #[test]
    fn sampled_ids_ascend_and_are_deterministic() {
        let all: Vec<usize> = (0..50).collect();
        let a = sample_clients(50, 0.2, &all, &mut rng_from_seed(3)).unwrap();
        let b = sample_clients(50, 0.2, &all, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn prototypes_mean_without_renormalization() {
        // Identity body: representations are the normalized inputs.
        let mut theta = BodyParams::init(&[2, 2], &mut rng_from_seed(0)).unwrap();
        theta.layers[0].weight = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        theta.layers[0].bias = ndarray::arr1(&[0.0, 0.0]);
        let x = arr2(&[[5.0, 0.0], [0.0, 3.0]]);
        let y = vec![0usize, 0];
        let (mu, present) = local_prototypes(&theta, x.view(), &y, 3);
        assert!(present[0] && !present[1] && !present[2]);
        assert_abs_diff_eq!(mu[[0, 0]], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(mu[[0, 1]], 0.5, epsilon = 1e-9);
        let norm = mu.row(0).dot(&mu.row(0)).sqrt();
        assert_abs_diff_eq!(norm, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-9);
        assert_eq!(mu.row(1).iter().filter(|&&v| v != 0.0).count(), 0);
    }

    #[test]
    fn single_sample_prototype_is_unit() {
        let theta = BodyParams::init(&[2, 8, 8, 8, 2], &mut rng_from_seed(2)).unwrap();
        let x = arr2(&[[1.0, -4.0]]);
        let (mu, present) = local_prototypes(&theta, x.view(), &[3], 6);
        assert!(present[3]);
        let n = mu.row(3).dot(&mu.row(3)).sqrt();
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn epochs_zero_and_lr_zero_pass_theta_through() {
        let train =
            gen_spiral(&[20; 6], 1.0, 0, SpiralMode::StrictSixArm).unwrap();
        let idx: Vec<usize> = (0..30).collect();
        let theta = BodyParams::init(&[2, 8, 8, 8, 2], &mut rng_from_seed(4)).unwrap();
        let w = solve_uniform_prototypes(6, 2, 0, 1e-4, 20_000)
            .unwrap()
            .into_matrix();
        let head = HeadState::new(w, 30.0, false).unwrap();
        for opt in [
            LocalOpt {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 1e-5,
                epochs: 0,
                batch_size: 8,
            },
            LocalOpt {
                lr: 0.0,
                momentum: 0.9,
                weight_decay: 1e-5,
                epochs: 3,
                batch_size: 8,
            },
        ] {
            let report = client_update(
                0,
                &theta,
                ClientTask::Cosine {
                    head: &head,
                    report_prototypes: true,
                },
                &train,
                &idx,
                &opt,
                &mut rng_from_seed(9),
            )
            .unwrap();
            assert_eq!(bits_of_body(&report.theta), bits_of_body(&theta));
            assert!(report.mean_loss.is_finite());
        }
    }

    #[test]
    fn training_reduces_local_loss() {
        let train = gen_spiral(&[60; 6], 1.0, 1, SpiralMode::StrictSixArm).unwrap();
        let idx: Vec<usize> = (0..train.len()).collect();
        let theta = BodyParams::init(&[2, 16, 16, 16, 2], &mut rng_from_seed(5)).unwrap();
        let w = solve_uniform_prototypes(6, 2, 1, 1e-4, 20_000)
            .unwrap()
            .into_matrix();
        let head = HeadState::new(w, 30.0, true).unwrap();
        let opt = LocalOpt {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 5,
            batch_size: 32,
        };
        let before = client_update(
            0,
            &theta,
            ClientTask::Cosine {
                head: &head,
                report_prototypes: false,
            },
            &train,
            &idx,
            &LocalOpt { epochs: 0, ..opt },
            &mut rng_from_seed(1),
        )
        .unwrap()
        .mean_loss;
        let report = client_update(
            0,
            &theta,
            ClientTask::Cosine {
                head: &head,
                report_prototypes: false,
            },
            &train,
            &idx,
            &opt,
            &mut rng_from_seed(1),
        )
        .unwrap();
        // Loss averaged over the last epoch's steps sits well below the
        // starting full-batch loss once training works at all.
        assert!(
            report.mean_loss < before,
            "mean step loss {} vs initial {before}",
            report.mean_loss
        );
    }

    #[test]
    fn aggregate_body_examples() {
        let theta = BodyParams::init(&[2, 2], &mut rng_from_seed(0)).unwrap();
        let mk = |id: usize, v: f64| {
            let mut t = theta.clone();
            t.layers[0].weight.fill(v);
            ClientReport {
                client_id: id,
                theta: t,
                scale: Some(v),
                free_head: None,
                mu: None,
                present: vec![false; 2],
                sample_count: 1,
                mean_loss: 0.0,
            }
        };
        let reports = vec![mk(0, 1.0), mk(1, 2.0), mk(2, 6.0)];
        let (agg, scale, _) = server_aggregate_body(&reports).unwrap();
        assert_abs_diff_eq!(agg.layers[0].weight[[0, 0]], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scale.unwrap(), 3.0, epsilon = 1e-15);

        // Identical reports aggregate to themselves; opposite params cancel.
        let (same, _, _) = server_aggregate_body(&[mk(0, 5.0), mk(1, 5.0)]).unwrap();
        assert_eq!(same.layers[0].weight[[0, 0]], 5.0);
        let (zero, _, _) = server_aggregate_body(&[mk(0, 4.0), mk(1, -4.0)]).unwrap();
        assert_eq!(zero.layers[0].weight[[0, 0]], 0.0);
    }

    #[test]
    fn aggregation_is_order_independent_bitwise() {
        let mk = |id: usize, seed: u64| {
            let t = BodyParams::init(&[2, 8, 8, 8, 2], &mut rng_from_seed(seed)).unwrap();
            let mut mu = Array2::zeros((6, 2));
            mu[[id % 6, 0]] = 0.3 + id as f64;
            let mut present = vec![false; 6];
            present[id % 6] = true;
            ClientReport {
                client_id: id,
                theta: t,
                scale: None,
                free_head: None,
                mu: Some(mu),
                present,
                sample_count: 5,
                mean_loss: 0.0,
            }
        };
        let fwd = vec![mk(0, 10), mk(1, 11), mk(2, 12)];
        let rev = vec![mk(2, 12), mk(0, 10), mk(1, 11)];
        let (a, _, _) = server_aggregate_body(&fwd).unwrap();
        let (b, _, _) = server_aggregate_body(&rev).unwrap();
        assert_eq!(bits_of_body(&a), bits_of_body(&b));

        let w = solve_uniform_prototypes(6, 2, 3, 1e-4, 20_000)
            .unwrap()
            .into_matrix();
        let pa = server_update_prototypes(&w, &fwd, 0.9, false).unwrap();
        let pb = server_update_prototypes(&w, &rev, 0.9, false).unwrap();
        for (x, y) in pa.as_array().iter().zip(pb.as_array().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn ema_algebra_examples() {
        let w = PrototypeMatrix::new(arr2(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let report = |mu0: [f64; 2]| ClientReport {
            client_id: 0,
            theta: BodyParams::init(&[2, 2], &mut rng_from_seed(0)).unwrap(),
            scale: None,
            free_head: None,
            mu: Some(arr2(&[[mu0[0], mu0[1]], [0.0, 0.0]])),
            present: vec![true, false],
            sample_count: 1,
            mean_loss: 0.0,
        };
        // rho -> 0 limit replaces the row with the aggregate (rho must be
        // positive; 1e-300 is numerically exact replacement).
        let out = server_update_prototypes(&w, &[report([0.0, 1.0])], 1e-300, false).unwrap();
        assert_abs_diff_eq!(out.as_array()[[0, 1]], 1.0, epsilon = 1e-12);
        // rho = 0.5 with aggregate (0,1): pre-norm (0.5, 0.5).
        let out = server_update_prototypes(&w, &[report([0.0, 1.0])], 0.5, false).unwrap();
        assert_abs_diff_eq!(
            out.as_array()[[0, 0]],
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        // Absent class keeps its direction exactly.
        assert_eq!(out.as_array()[[1, 1]], 1.0);
        // rho = 1 is bitwise identity.
        let out = server_update_prototypes(&w, &[report([0.3, 0.4])], 1.0, false).unwrap();
        for (x, y) in out.as_array().iter().zip(w.as_array().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rho_one_keeps_w0_bitwise_through_a_run() {
        let mut cfg = tiny_cfg();
        cfg.method = Method::Fednh;
        cfg.rho = 1.0;
        let out = run(&cfg).unwrap();
        let w0 = out.w0.as_ref().unwrap();
        let final_w = out.server_head.cosine().unwrap();
        for (x, y) in w0.as_array().iter().zip(final_w.w.as_array().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fedavg_uh_equals_fednh_rho_one() {
        let mut a = tiny_cfg();
        a.method = Method::FedavgUh;
        let mut b = tiny_cfg();
        b.method = Method::Fednh;
        b.rho = 1.0;
        let ra = run(&a).unwrap();
        let rb = run(&b).unwrap();
        assert_eq!(ra.log.len(), rb.log.len());
        for (x, y) in ra.log.iter().zip(rb.log.iter()) {
            assert_eq!(x.mean_train_loss.to_bits(), y.mean_train_loss.to_bits());
            assert_eq!(x.gm.to_bits(), y.gm.to_bits());
            assert_eq!(x.pm_v.to_bits(), y.pm_v.to_bits());
            assert_eq!(x.pm_l.to_bits(), y.pm_l.to_bits());
            assert_eq!(x.fairness.to_bits(), y.fairness.to_bits());
            assert_eq!(x.min_proto_dist.to_bits(), y.min_proto_dist.to_bits());
        }
    }

    #[test]
    fn zero_rounds_is_initialization() {
        let mut cfg = tiny_cfg();
        cfg.rounds = 0;
        let out = run(&cfg).unwrap();
        assert!(out.log.is_empty());
        let theta0 = BodyParams::init(
            &cfg.widths(),
            &mut SeedStreams::new(cfg.seed).body_init_rng(),
        )
        .unwrap();
        assert_eq!(bits_of_body(&out.server_theta), bits_of_body(&theta0));
    }

    #[test]
    fn single_client_round_is_mean_of_one() {
        let mut cfg = tiny_cfg();
        cfg.clients = 1;
        cfg.gamma = 1.0;
        cfg.rounds = 1;
        cfg.method = Method::Fednh;
        let out = run(&cfg).unwrap();
        assert_eq!(
            bits_of_body(&out.server_theta),
            bits_of_body(&out.clients[0].theta)
        );
    }

    #[test]
    fn run_is_bitwise_reproducible() {
        let cfg = tiny_cfg();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.schedule, b.schedule);
        for (x, y) in a.log.iter().zip(b.log.iter()) {
            assert_eq!(x.gm.to_bits(), y.gm.to_bits());
            assert_eq!(x.pm_l.to_bits(), y.pm_l.to_bits());
        }
        assert_eq!(bits_of_body(&a.server_theta), bits_of_body(&b.server_theta));
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let mut cfg = tiny_cfg();
        cfg.threads = 1;
        let a = run(&cfg).unwrap();
        cfg.threads = 4;
        let b = run(&cfg).unwrap();
        assert_eq!(bits_of_body(&a.server_theta), bits_of_body(&b.server_theta));
        for (x, y) in a.log.iter().zip(b.log.iter()) {
            assert_eq!(x.pm_l.to_bits(), y.pm_l.to_bits());
            assert_eq!(x.gm.to_bits(), y.gm.to_bits());
        }
    }

    #[test]
    fn local_method_keeps_models_apart() {
        let mut cfg = tiny_cfg();
        cfg.method = Method::Local;
        cfg.rounds = 4;
        cfg.gamma = 1.0;
        let out = run(&cfg).unwrap();
        assert!(out.log[0].gm.is_nan());
        // All clients trained at gamma = 1; their bodies must differ.
        let b0 = bits_of_body(&out.clients[0].theta);
        let b1 = bits_of_body(&out.clients[1].theta);
        assert_ne!(b0, b1);
        assert_eq!(out.clients[0].last_trained, Some(3));
    }

    #[test]
    fn prototype_rows_stay_unit_each_round() {
        let mut cfg = tiny_cfg();
        cfg.method = Method::Fednh;
        cfg.rho = 0.5;
        let out = run(&cfg).unwrap();
        let w = out.server_head.cosine().unwrap();
        for row in w.w.as_array().axis_iter(Axis(0)) {
            let n = row.dot(&row).sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
        }
        // And the EMA actually moved them off the initial head.
        let w0 = out.w0.as_ref().unwrap();
        let moved = w
            .w
            .as_array()
            .iter()
            .zip(w0.as_array().iter())
            .any(|(a, b)| a != b);
        assert!(moved);
    }

    #[test]
    fn schedule_is_prefix_stable_in_rounds() {
        let mut cfg = tiny_cfg();
        cfg.rounds = 2;
        let short = run(&cfg).unwrap();
        cfg.rounds = 4;
        let long = run(&cfg).unwrap();
        assert_eq!(short.schedule[..2], long.schedule[..2]);
    }
}
