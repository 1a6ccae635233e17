//! One function per subcommand; each writes CSV and JSON into the output directory.

use std::fs;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use perceptron::activation::{estimate_constants, ActivationSpec, GridConfig};
use perceptron::amp::{amp_run, max_dev, rng_for, sample_gaussian_matrix, se_check, AmpTrace, CheckRow, SAMPLER_ID};
use perceptron::moments::{
    a2_derivative0, a2_functional, admissible_zeta, conditional_first_moment_estimate, default_eps_bar,
    default_l_cap, enumerate_logz, free_energy_experiment, n_circ_fraction, n_circ_radius, psi2,
    varpi_stationarity_target, EnumOptions, ExperimentOptions, ExperimentRow, PsiFunctional, TAU_TRUNC,
};
use perceptron::rs::{fp_bounds_hold, rs_alpha_sweep, solve_fixed_point, RsSolution};
use perceptron::sevol::{se_run, SeTrace};
use serde_json::{json, Value};

use crate::config::{check_cap, positive_alpha, RunConfig};
use crate::CliError;

/// Writes the files of one command.
struct Output {
    dir: PathBuf,
    command: &'static str,
    seed: u64,
    config: Value,
    started: Instant,
    written: Vec<PathBuf>,
}

impl Output {
    fn new(cfg: &RunConfig, command: &'static str) -> Result<Self, CliError> {
        let dir = cfg.out_dir();
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        let out = Self {
            dir,
            command,
            seed: cfg.get("seed")?,
            config: cfg.to_json(),
            started: Instant::now(),
            written: Vec::new(),
        };
        Ok(out)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &str, rows: impl IntoIterator<Item = String>) -> Result<(), CliError> {
        let mut text = format!("{header}\n");
        for row in rows {
            text.push_str(&row);
            text.push('\n');
        }
        self.write(name, &text)
    }

    /// Non-reproducible fields live in `header`; everything else is deterministic.
    fn json(&mut self, result: Value) -> Result<(), CliError> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let doc = json!({
            "header": {
                "command": self.command,
                "version": env!("CARGO_PKG_VERSION"),
                "timestamp_unix": timestamp,
                "wall_time_seconds": self.started.elapsed().as_secs_f64(),
            },
            "seed": self.seed,
            "sampler": SAMPLER_ID,
            "config": self.config,
            "result": result,
        });
        let text = serde_json::to_string_pretty(&doc).expect("serializable") + "\n";
        self.write(&format!("{}.json", self.command), &text)
    }

    fn finish(self) -> Vec<PathBuf> {
        self.written
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn matrix(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
}

fn vector(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn solve(cfg: &RunConfig, spec: &ActivationSpec) -> Result<RsSolution, CliError> {
    let opts = cfg.solver()?;
    if opts.q_max_overridden() {
        eprintln!("WARNING: q_max = {} overrides the uniqueness interval [0, 1/25]; the root found may not be unique", opts.q_max);
    }
    Ok(solve_fixed_point(spec, cfg.alpha()?, &opts)?)
}

fn rs_json(sol: &RsSolution, spec: &ActivationSpec) -> Value {
    let mut v = to_json(sol);
    v["activation"] = json!(spec.descriptor());
    v["fp_bounds_hold"] = json!(fp_bounds_hold(spec, sol));
    v
}

/// `rs`: fixed point, free energies and Onsager coefficients.
pub fn cmd_rs(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.activation()?;
    let sol = solve(cfg, &spec)?;
    let mut out = Output::new(cfg, "rs")?;
    out.csv("rs.csv", RsSolution::CSV_HEADER, [sol.csv_row()])?;
    out.json(rs_json(&sol, &spec))?;
    Ok(out.finish())
}

/// `se`: state-evolution trajectory.
pub fn cmd_se(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.activation()?;
    let sol = solve(cfg, &spec)?;
    let tr = se_run(&spec, &sol, cfg.get("se_steps")?, cfg.get("se_eps")?)?;
    let mut out = Output::new(cfg, "se")?;
    out.csv("se.csv", SeTrace::CSV_HEADER, tr.csv_rows())?;
    out.json(json!({
        "steps": tr.t,
        "clamped": tr.clamped,
        "final_one_minus_gamma": 1.0 - tr.gamma_sum(tr.t),
        "final_one_minus_lambda": 1.0 - tr.lambda_sum(tr.t),
        "decay_ratios": tr.decay_ratios(),
        "at_value": sol.at_value,
    }))?;
    Ok(out.finish())
}

fn amp_trace(cfg: &RunConfig, spec: &ActivationSpec) -> Result<AmpTrace, CliError> {
    let sol = solve(cfg, spec)?;
    let n: usize = cfg.get("n")?;
    let t: usize = cfg.get("t")?;
    if n == 0 || t == 0 {
        return Err(CliError::Usage("n and t must be positive".into()));
    }
    Ok(amp_run(spec, &sol, n, t, cfg.get("seed")?)?)
}

/// `amp`: AMP run compared with state evolution.
pub fn cmd_amp(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.activation()?;
    let tr = amp_trace(cfg, &spec)?;
    let rows = se_check(&tr);
    let mut out = Output::new(cfg, "amp")?;
    out.csv("amp.csv", CheckRow::CSV_HEADER, rows.iter().map(CheckRow::csv_row))?;
    let prefixes = ["m_norm_", "m_overlap_", "n_norm_", "n_overlap_", "lambda_n_", "gamma_n_", "m_dot_y_", "x_cov_"];
    let max: serde_json::Map<String, Value> =
        prefixes.iter().map(|p| (p.trim_end_matches('_').to_string(), json!(max_dev(&rows, p)))).collect();
    out.json(json!({
        "n": tr.n_spins,
        "m": tr.m_constraints,
        "t": tr.t,
        "max_abs_dev": max,
        "lambda_n": matrix(&tr.lambda_n),
        "gamma_n": matrix(&tr.gamma_n),
        "lambda_th": matrix(&tr.lambda_th),
        "gamma_th": matrix(&tr.gamma_th),
    }))?;
    Ok(out.finish())
}

/// `(C_1, eps_bar, L_cap)` from the config, measuring `C_1` and `K_2` when needed.
fn moment_constants(cfg: &RunConfig, spec: &ActivationSpec, alpha: f64) -> Result<(f64, f64, f64), CliError> {
    let (c1, k2) = (cfg.auto::<f64>("c1")?, cfg.auto::<f64>("k2")?);
    let (c1, k2) = match (c1, k2) {
        (Some(c1), Some(k2)) => (c1, k2),
        _ => {
            let rep = estimate_constants(spec, &GridConfig::default(), cfg.constants_mode()?);
            (c1.unwrap_or(rep.c1()), k2.unwrap_or(rep.k2_empirical))
        }
    };
    let eps_bar = cfg.auto("eps_bar")?.unwrap_or(default_eps_bar(c1, k2, alpha));
    let l_cap = cfg.auto("l_cap")?.unwrap_or(default_l_cap(c1));
    Ok((c1, eps_bar, l_cap))
}

fn need_two_steps(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.get::<usize>("t")? < 2 {
        return Err(CliError::Usage("psi and pair need t >= 2".into()));
    }
    Ok(())
}

/// `psi`: the functional at the star point and the first-moment estimate.
pub fn cmd_psi(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.activation()?;
    need_two_steps(cfg)?;
    let tr = amp_trace(cfg, &spec)?;
    let (c1, eps_bar, _) = moment_constants(cfg, &spec, tr.sol.alpha)?;
    let f = PsiFunctional::new(&spec, &tr, eps_bar)?;
    let value = f.value(&f.pi_star, &f.varpi_star)?;
    let (gp, gv) = f.gradient(&f.pi_star, &f.varpi_star)?;
    let samples: usize = cfg.get("samples")?;
    let seed: u64 = cfg.get("seed")?;
    let est = conditional_first_moment_estimate(&spec, &tr, eps_bar, samples, seed)?;
    let radius = n_circ_radius(c1, tr.sol.alpha);
    let fraction = n_circ_fraction(&tr, radius, samples.min(10_000), seed);
    let mut out = Output::new(cfg, "psi")?;
    out.csv(
        "psi.csv",
        "estimate,spin_term,psi_term,rs,samples,infinite,eps_bar",
        [format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{},{},{:.16e}",
            est.estimate, est.spin_term, est.psi_term, tr.sol.rs_value, est.samples, est.infinite, eps_bar
        )],
    )?;
    out.json(json!({
        "estimate": to_json(&est),
        "rs": tr.sol.rs_value,
        "c1": c1,
        "psi_at_star": value,
        "pi_star": vector(&f.pi_star),
        "varpi_star": vector(&f.varpi_star),
        "grad_pi_at_star": vector(&gp),
        "grad_varpi_at_star": vector(&gv),
        "varpi_stationarity_target": varpi_stationarity_target(&tr, eps_bar),
        "n_circ_radius": radius,
        "n_circ_fraction": fraction,
    }))?;
    Ok(out.finish())
}

/// `pair`: the pair functionals on a grid of overlaps for one admissible `zeta`.
pub fn cmd_pair(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.activation()?;
    need_two_steps(cfg)?;
    let tr = amp_trace(cfg, &spec)?;
    let (_, eps_bar, l_cap) = moment_constants(cfg, &spec, tr.sol.alpha)?;
    let lambdas: Vec<f64> = cfg.list("lambdas")?;
    if lambdas.iter().any(|l| !(l.abs() < 1.0)) {
        return Err(CliError::Usage("lambdas must lie in (-1, 1)".into()));
    }
    let mut rng = rng_for(cfg.get("seed")?, 1);
    let zeta = admissible_zeta(&tr, l_cap, &mut rng);
    let mut rows = Vec::new();
    for &l in &lambdas {
        let a2 = a2_functional(&spec, &tr, l, &zeta, l_cap)?;
        let p2 = psi2(&spec, &tr, eps_bar, l, &zeta, l_cap)?;
        rows.push(format!("{l:.16e},{a2:.16e},{p2:.16e}"));
    }
    let mut out = Output::new(cfg, "pair")?;
    out.csv("pair.csv", "lambda,a2,psi2", rows)?;
    out.json(json!({
        "l_cap": l_cap,
        "eps_bar": eps_bar,
        "zeta_norm_sq_per_m": zeta.norm_squared() / tr.m_constraints as f64,
        "a2_derivative_at_zero": a2_derivative0(&tr, &zeta, l_cap)?,
    }))?;
    Ok(out.finish())
}

/// `enumerate`: exact `log Z` of one instance, and optionally the finite-size experiment.
pub fn cmd_enumerate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.activation()?;
    let alpha = cfg.alpha()?;
    let (n, m, cap) = cfg.enumeration_size(alpha)?;
    let seed: u64 = cfg.get("seed")?;
    let opts = EnumOptions { cap, block_bits: cfg.get("block_bits")?, seed: Some(seed) };
    let g = sample_gaussian_matrix(m, n, seed);
    let res = enumerate_logz(&spec, &g, TAU_TRUNC, &opts)?;
    let mut out = Output::new(cfg, "enumerate")?;
    let experiment_n: Vec<usize> = cfg.list("experiment_n")?;
    let mut result = to_json(&res);
    if let Value::Object(map) = &mut result {
        map.remove("wall_time");
    }
    if !experiment_n.is_empty() {
        for &k in &experiment_n {
            check_cap(k, cap)?;
        }
        let eo = ExperimentOptions { floor_per_spin: cfg.get("floor_per_spin")?, solver: cfg.solver()?, enumeration: opts };
        let rows = free_energy_experiment(&spec, alpha, &experiment_n, cfg.get("experiment_samples")?, seed, &eo)?;
        out.csv("experiment.csv", ExperimentRow::CSV_HEADER, rows.iter().map(ExperimentRow::csv_row))?;
    }
    out.json(result)?;
    Ok(out.finish())
}

/// `constants`: empirical or proof-mode constants and the derived thresholds.
pub fn cmd_constants(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.activation()?;
    let alpha = cfg.alpha()?;
    let rep = estimate_constants(&spec, &GridConfig::default(), cfg.constants_mode()?);
    let mut result = to_json(&rep);
    result["label"] = json!(rep.label());
    result["eps_bar_default"] = json!(default_eps_bar(rep.c1(), rep.k2_empirical, alpha));
    result["l_cap_default"] = json!(default_l_cap(rep.c1()));
    result["n_circ_radius"] = json!(n_circ_radius(rep.c1(), alpha));
    let mut out = Output::new(cfg, "constants")?;
    out.json(result)?;
    Ok(out.finish())
}

/// `sweep`: one `rs` row per alpha; failures are listed and turn the exit code numerical.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.activation()?;
    let alphas: Vec<f64> = cfg.list("alphas")?;
    if alphas.is_empty() {
        return Err(CliError::Usage("alphas is empty".into()));
    }
    for &a in &alphas {
        positive_alpha(a)?;
    }
    let opts = cfg.solver()?;
    if opts.q_max_overridden() {
        eprintln!("WARNING: q_max = {} overrides the uniqueness interval [0, 1/25]; the root found may not be unique", opts.q_max);
    }
    let results = rs_alpha_sweep(&spec, &alphas, &opts);
    let mut out = Output::new(cfg, "sweep")?;
    let rows: Vec<String> = results.iter().filter_map(|r| r.as_ref().ok()).map(RsSolution::csv_row).collect();
    out.csv("sweep.csv", RsSolution::CSV_HEADER, rows)?;
    let failures: Vec<Value> = alphas
        .iter()
        .zip(&results)
        .filter_map(|(a, r)| r.as_ref().err().map(|e| json!({"alpha": a, "error": e.to_string()})))
        .collect();
    out.json(json!({ "solutions": results.iter().filter_map(|r| r.as_ref().ok()).map(to_json).collect::<Vec<_>>(), "failures": failures }))?;
    if let Some(e) = results.into_iter().find_map(Result::err) {
        return Err(CliError::Numerical(e));
    }
    Ok(out.finish())
}
