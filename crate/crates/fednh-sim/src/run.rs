//! Experiment orchestration: drives one full run (or a rho sweep) and
//! writes its artifacts.
//!
//! Everything under the output directory except `timing.txt` is
//! deterministic: rerunning the same resolved config produces
//! byte-identical files. Floats in `log.csv` use the shortest
//! round-trippable decimal form; parameter dumps use 17 significant
//! digits, which also round-trip exactly.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::config::{ExperimentConfig, Method};
use crate::fedcore::{run, OwnedHead, RunOutput};
use crate::metrics::{cosine, prototype_similarity};
use crate::model::{forward_body, forward_body_raw, gather};
use crate::svg;
use crate::{Result, SimError};

/// Runs the configured experiment and writes its artifacts into
/// `cfg.out_dir`. The in-memory output is returned for further analysis.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let out = run(cfg)?;
    write_artifacts(cfg, &out)?;
    Ok(out)
}

/// One row of the rho-sweep summary: final-round metrics per rho, plus
/// the PM(V) gain relative to the smallest rho in the sweep.
#[derive(Debug, Clone)]
pub struct RhoSweepRow {
    pub rho: f64,
    pub final_pm_v: f64,
    pub final_pm_l: f64,
    pub final_gm: f64,
    pub rel_gain_pm_v: f64,
}

/// Runs the same-seeded experiment once per rho (ascending), each into
/// `out_dir/rho_<value>/`, and writes `out_dir/rho_sweep.csv`.
pub fn rho_sweep(cfg: &ExperimentConfig, rhos: &[f64]) -> Result<Vec<RhoSweepRow>> {
    if cfg.method != Method::Fednh {
        return Err(SimError::InvalidArgument(format!(
            "rho sweep applies to the fednh method, not {}",
            cfg.method.as_str()
        )));
    }
    if rhos.is_empty() {
        return Err(SimError::InvalidArgument("rho sweep needs at least one value".into()));
    }
    if cfg.rounds == 0 {
        return Err(SimError::InvalidArgument(
            "rho sweep needs at least one round to report final metrics".into(),
        ));
    }
    for &r in rhos {
        if !(r > 0.0 && r <= 1.0) {
            return Err(SimError::InvalidArgument(format!(
                "rho values must lie in (0, 1], got {r}"
            )));
        }
    }
    let mut order = rhos.to_vec();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let base_dir = Path::new(&cfg.out_dir).to_path_buf();
    let mut rows = Vec::with_capacity(order.len());
    for &rho in &order {
        let mut sub = cfg.clone();
        sub.rho = rho;
        sub.out_dir = base_dir.join(format!("rho_{rho}")).to_string_lossy().into_owned();
        let out = run_experiment(&sub)?;
        let last = out.log.last().expect("rounds >= 1");
        rows.push(RhoSweepRow {
            rho,
            final_pm_v: last.pm_v,
            final_pm_l: last.pm_l,
            final_gm: last.gm,
            rel_gain_pm_v: f64::NAN,
        });
    }
    let base_pm_v = rows[0].final_pm_v;
    for row in &mut rows {
        row.rel_gain_pm_v = (row.final_pm_v - base_pm_v) / base_pm_v;
    }

    let mut csv = String::from("rho,final_pm_v,final_pm_l,final_gm,rel_gain_pm_v\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_float(row.rho),
            csv_float(row.final_pm_v),
            csv_float(row.final_pm_l),
            csv_float(row.final_gm),
            csv_float(row.rel_gain_pm_v),
        ));
    }
    fs::create_dir_all(&base_dir)?;
    fs::write(base_dir.join("rho_sweep.csv"), csv)?;
    Ok(rows)
}

fn write_artifacts(cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    let dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(dir)?;

    fs::write(dir.join("config.resolved"), cfg.to_resolved_text())?;

    let mut log = String::from(
        "round,mean_train_loss,gm,pm_v,pm_l,fairness,min_proto_dist,excluded_clients\n",
    );
    for r in &out.log {
        log.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.round,
            csv_float(r.mean_train_loss),
            csv_float(r.gm),
            csv_float(r.pm_v),
            csv_float(r.pm_l),
            csv_float(r.fairness),
            csv_float(r.min_proto_dist),
            r.excluded_clients,
        ));
    }
    fs::write(dir.join("log.csv"), log)?;

    // Wall-clock per round; the one artifact that varies across reruns.
    let mut timing = String::from("round,seconds\n");
    for (t, s) in out.round_seconds.iter().enumerate() {
        timing.push_str(&format!("{t},{s:.6}\n"));
    }
    fs::write(dir.join("timing.txt"), timing)?;

    let head_rows = head_rows(&out.server_head);
    let mut protos = String::from("class");
    for j in 0..head_rows.ncols() {
        protos.push_str(&format!(",coord{j}"));
    }
    protos.push('\n');
    for (c, row) in head_rows.outer_iter().enumerate() {
        protos.push_str(&c.to_string());
        for v in row.iter() {
            protos.push_str(&format!(",{v:.16e}"));
        }
        protos.push('\n');
    }
    fs::write(dir.join("prototypes_final.csv"), protos)?;

    let sim = head_similarity(&out.server_head);
    let mut sim_csv = String::from("class");
    for j in 0..sim.ncols() {
        sim_csv.push_str(&format!(",class{j}"));
    }
    sim_csv.push('\n');
    for (c, row) in sim.outer_iter().enumerate() {
        sim_csv.push_str(&c.to_string());
        for v in row.iter() {
            sim_csv.push_str(&format!(",{v:.16e}"));
        }
        sim_csv.push('\n');
    }
    fs::write(dir.join("similarity.csv"), sim_csv)?;

    fs::write(dir.join("checkpoint.csv"), checkpoint_text(cfg, out))?;

    if cfg.latent_dim == 2 && cfg.rounds > 0 {
        let final_round = cfg.rounds - 1;
        let (x, _) = gather(&out.test, None);
        let reps = if cfg.method.uses_cosine_head() {
            forward_body(&out.server_theta, x.view())
        } else {
            forward_body_raw(&out.server_theta, x.view())
        };
        let title = format!(
            "{} latent representations, round {final_round}",
            cfg.method.as_str()
        );
        let scatter = svg::repr_scatter(&reps, &out.test.labels, Some(&head_rows), &title);
        fs::write(
            dir.join(format!("repr_scatter_round{final_round}.svg")),
            scatter,
        )?;

        let heat = svg::similarity_heatmap(
            &sim,
            &format!("{} prototype similarity", cfg.method.as_str()),
        );
        fs::write(dir.join("similarity_heatmap.svg"), heat)?;
    }

    Ok(())
}

/// The server head's class rows: unit prototypes for cosine heads, the
/// free linear rows otherwise (the initial rows for the local baseline,
/// which aggregates nothing).
fn head_rows(head: &OwnedHead) -> Array2<f64> {
    match head {
        OwnedHead::Cosine(h) => h.w.as_array().clone(),
        OwnedHead::Free(h) => h.v.clone(),
    }
}

/// Row similarity: the raw Gram matrix for unit prototype rows (inner
/// product = cosine there), cosine similarity for free rows.
fn head_similarity(head: &OwnedHead) -> Array2<f64> {
    match head {
        OwnedHead::Cosine(h) => prototype_similarity(&h.w).m,
        OwnedHead::Free(h) => {
            let c = h.v.nrows();
            let mut m = Array2::<f64>::zeros((c, c));
            for i in 0..c {
                for j in 0..c {
                    m[[i, j]] = cosine(h.v.view(), i, h.v.view(), j).unwrap_or(f64::NAN);
                }
            }
            m
        }
    }
}

/// Full parameter dump: `#`-prefixed header lines recording architecture,
/// method, seed and completed rounds, then one `tensor,row,col,value` line
/// per parameter at 17 significant digits.
fn checkpoint_text(cfg: &ExperimentConfig, out: &RunOutput) -> String {
    let widths: Vec<String> = cfg.widths().iter().map(|w| w.to_string()).collect();
    let mut s = String::new();
    s.push_str(&format!("# architecture,{}\n", widths.join(",")));
    s.push_str(&format!("# method,{}\n", cfg.method.as_str()));
    s.push_str(&format!("# seed,{}\n", cfg.seed));
    s.push_str(&format!("# rounds,{}\n", cfg.rounds));
    s.push_str("tensor,row,col,value\n");
    for (l, layer) in out.server_theta.layers.iter().enumerate() {
        for ((i, j), v) in layer.weight.indexed_iter() {
            s.push_str(&format!("layer{l}.weight,{i},{j},{v:.16e}\n"));
        }
        for (i, v) in layer.bias.iter().enumerate() {
            s.push_str(&format!("layer{l}.bias,{i},0,{v:.16e}\n"));
        }
    }
    match &out.server_head {
        OwnedHead::Cosine(h) => {
            for ((i, j), v) in h.w.as_array().indexed_iter() {
                s.push_str(&format!("head.weight,{i},{j},{v:.16e}\n"));
            }
            s.push_str(&format!("head.scale,0,0,{:.16e}\n", h.s));
        }
        OwnedHead::Free(h) => {
            for ((i, j), v) in h.v.indexed_iter() {
                s.push_str(&format!("head.weight,{i},{j},{v:.16e}\n"));
            }
        }
    }
    s
}

/// NaN prints as `nan` (parseable by `str::parse::<f64>`); finite floats
/// use the shortest decimal that round-trips.
fn csv_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            counts: vec![40; 6],
            test_per_class: 30,
            clients: 4,
            gamma: 0.5,
            rounds: 2,
            epochs: 2,
            batch_size: 16,
            lr: 0.1,
            hidden_width: 16,
            out_dir: dir.to_string_lossy().into_owned(),
            ..ExperimentConfig::default()
        }
    }

    fn read(dir: &Path, name: &str) -> String {
        fs::read_to_string(dir.join(name)).unwrap()
    }

    #[test]
    fn artifacts_written_and_reruns_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let dir_a = tmp.path().join("a");
        let dir_b = tmp.path().join("b");
        let cfg_a = tiny_cfg(&dir_a);
        let mut cfg_b = tiny_cfg(&dir_b);
        run_experiment(&cfg_a).unwrap();
        run_experiment(&cfg_b).unwrap();
        for name in [
            "log.csv",
            "prototypes_final.csv",
            "similarity.csv",
            "checkpoint.csv",
        ] {
            assert_eq!(read(&dir_a, name), read(&dir_b, name), "{name} differs");
        }
        // config.resolved differs only in the out_dir line.
        cfg_b.out_dir = cfg_a.out_dir.clone();
        assert_eq!(read(&dir_a, "config.resolved"), cfg_b.to_resolved_text());
        let log = read(&dir_a, "log.csv");
        assert!(log.starts_with(
            "round,mean_train_loss,gm,pm_v,pm_l,fairness,min_proto_dist,excluded_clients\n"
        ));
        assert_eq!(log.lines().count(), 1 + 2);
        assert!(dir_a.join("timing.txt").exists());
        assert!(dir_a.join("repr_scatter_round1.svg").exists());
        assert!(dir_a.join("similarity_heatmap.svg").exists());
    }

    #[test]
    fn resolved_config_reproduces_the_run() {
        let tmp = tempfile::tempdir().unwrap();
        let dir_a = tmp.path().join("direct");
        let cfg = tiny_cfg(&dir_a);
        run_experiment(&cfg).unwrap();

        let mut reloaded = ExperimentConfig::default();
        reloaded
            .apply_text(&read(&dir_a, "config.resolved"), "config.resolved")
            .unwrap();
        let dir_b = tmp.path().join("reloaded");
        reloaded.out_dir = dir_b.to_string_lossy().into_owned();
        run_experiment(&reloaded).unwrap();
        assert_eq!(read(&dir_a, "log.csv"), read(&dir_b, "log.csv"));
        assert_eq!(read(&dir_a, "checkpoint.csv"), read(&dir_b, "checkpoint.csv"));
    }

    #[test]
    fn no_svgs_for_higher_latent_dim() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("d3");
        let mut cfg = tiny_cfg(&dir);
        cfg.method = Method::Fedavg;
        cfg.latent_dim = 3;
        run_experiment(&cfg).unwrap();
        assert!(dir.join("log.csv").exists());
        assert!(!dir.join("similarity_heatmap.svg").exists());
        assert!(!dir.join("repr_scatter_round1.svg").exists());
    }

    #[test]
    fn single_value_sweep_matches_direct_run() {
        let tmp = tempfile::tempdir().unwrap();
        let sweep_dir = tmp.path().join("sweep");
        let mut cfg = tiny_cfg(&sweep_dir);
        cfg.rho = 0.5;
        let rows = rho_sweep(&cfg, &[0.5]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].rel_gain_pm_v, 0.0);

        let direct_dir = tmp.path().join("direct");
        let mut direct = tiny_cfg(&direct_dir);
        direct.rho = 0.5;
        run_experiment(&direct).unwrap();
        assert_eq!(
            read(&sweep_dir.join("rho_0.5"), "log.csv"),
            read(&direct_dir, "log.csv"),
        );
        let summary = read(&sweep_dir, "rho_sweep.csv");
        assert!(summary.starts_with("rho,final_pm_v,final_pm_l,final_gm,rel_gain_pm_v\n"));
        assert_eq!(summary.lines().count(), 2);
    }

    #[test]
    fn sweep_rejects_bad_inputs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(tmp.path());
        assert!(rho_sweep(&cfg, &[]).is_err());
        assert!(rho_sweep(&cfg, &[0.0]).is_err());
        assert!(rho_sweep(&cfg, &[1.2]).is_err());
        cfg.method = Method::Fedavg;
        assert!(rho_sweep(&cfg, &[0.5]).is_err());
    }
}
