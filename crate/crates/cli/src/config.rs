//! Flat `key=value` run configuration with documented defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use perceptron::activation::{ActivationSpec, ConstantsMode, TabulatedGrid};
use perceptron::gauss::Integrator;
use perceptron::rs::SolverOptions;

use crate::CliError;

/// Every recognized key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("activation", "halfspace", "halfspace | band | gauss_bump | clipped_exp | tabulated | one"),
    ("kappa", "0", "halfspace threshold"),
    ("band_lo", "-1", "band lower edge"),
    ("band_hi", "1", "band upper edge"),
    ("bump_mean", "0", "gauss_bump center"),
    ("bump_sigma", "1", "gauss_bump width"),
    ("exp_lambda", "1", "clipped_exp rate"),
    ("table", "", "two-column file for the tabulated activation"),
    ("eta", "0", "Gaussian smoothing width"),
    ("alpha", "0.01", "constraint density M/N"),
    ("quad_order", "201", "Gauss-Hermite order"),
    ("q_max", "0.04", "right end of the q search interval"),
    ("scan_points", "200", "root-scan intervals"),
    ("n", "4000", "number of spins for AMP"),
    ("t", "6", "AMP steps"),
    ("seed", "0", "master seed"),
    ("se_steps", "50", "maximum state-evolution steps"),
    ("se_eps", "1e-6", "state-evolution convergence tolerance"),
    ("constants_mode", "empirical", "empirical | proof"),
    ("k2", "auto", "K_2 used for eps_bar; auto measures it"),
    ("c1", "auto", "C_1 used for eps_bar and L_cap; auto measures it"),
    ("eps_bar", "auto", "perturbation size; auto uses the default formula"),
    ("l_cap", "auto", "cap on |zeta|^2 / M; auto uses 5 C_1^2"),
    ("samples", "100000", "Q-measure samples"),
    ("lambdas", "-0.5,-0.25,0,0.25,0.5", "pair-overlap grid"),
    ("enum_n", "20", "spins for enumeration"),
    ("enum_m", "auto", "constraints for enumeration; auto is round(alpha N)"),
    ("enum_cap", "26", "largest admissible enumeration N"),
    ("block_bits", "6", "leading spins fixed per enumeration block"),
    ("experiment_n", "", "N values for the free-energy experiment; empty skips it"),
    ("experiment_samples", "200", "disorder samples per N in the experiment"),
    ("floor_per_spin", "12", "truncation depth per spin in the experiment"),
    ("alphas", "0.001,0.005,0.01,0.05", "alpha grid for sweep"),
    ("threads", "0", "worker threads; 0 uses every core"),
    ("out_dir", "out", "output directory"),
];

/// Resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the file at `path`, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = split_pair(line).map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
                insert(&mut values, k, v)?;
            }
        }
        for pair in overrides {
            let (k, v) = split_pair(pair).map_err(CliError::Usage)?;
            insert(&mut values, k, v)?;
        }
        Ok(Self { values })
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        insert(&mut self.values, key, value)
    }

    /// `key=value` lines, sorted by key.
    pub fn effective(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// All values as a JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect(),
        )
    }

    /// Raw value of a key.
    pub fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    /// Parsed value of a key.
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::Usage(format!("cannot parse {key}={raw}")))
    }

    /// `None` for `auto`, the parsed value otherwise.
    pub fn auto<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        if self.raw(key) == "auto" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Comma-separated list; empty for an empty value.
    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Usage(format!("cannot parse {key} entry {s:?}"))))
            .collect()
    }

    /// `alpha`, checked to be positive.
    pub fn alpha(&self) -> Result<f64, CliError> {
        positive_alpha(self.get("alpha")?)
    }

    /// Activation built from the activation keys.
    pub fn activation(&self) -> Result<ActivationSpec, CliError> {
        let kind = self.raw("activation");
        let spec = match kind {
            "halfspace" => ActivationSpec::halfspace(self.get("kappa")?),
            "band" => ActivationSpec::band(self.get("band_lo")?, self.get("band_hi")?),
            "gauss_bump" => ActivationSpec::gauss_bump(self.get("bump_mean")?, self.get("bump_sigma")?),
            "clipped_exp" => ActivationSpec::clipped_exp(self.get("exp_lambda")?),
            "one" => Ok(ActivationSpec::constant_one()),
            "tabulated" => {
                let path = self.raw("table");
                if path.is_empty() {
                    return Err(CliError::Usage("activation=tabulated needs table=<file>".into()));
                }
                let path = PathBuf::from(path);
                if !path.exists() {
                    return Err(CliError::Usage(format!("table file {} does not exist", path.display())));
                }
                TabulatedGrid::from_file(&path).and_then(ActivationSpec::tabulated)
            }
            other => return Err(CliError::Usage(format!("unknown activation kind {other:?}"))),
        };
        let integrator = Integrator::with_order(self.get("quad_order")?).map_err(usage)?;
        let eta = self.get("eta")?;
        let spec = spec.and_then(|s| s.with_eta(eta)).map_err(usage)?;
        Ok(spec.with_integrator(integrator))
    }

    /// Solver settings.
    pub fn solver(&self) -> Result<SolverOptions, CliError> {
        Ok(SolverOptions { q_max: self.get("q_max")?, scan_points: self.get("scan_points")? })
    }

    /// Constants mode.
    pub fn constants_mode(&self) -> Result<ConstantsMode, CliError> {
        match self.raw("constants_mode") {
            "empirical" => Ok(ConstantsMode::Empirical),
            "proof" => Ok(ConstantsMode::Proof),
            other => Err(CliError::Usage(format!("constants_mode must be empirical or proof, got {other:?}"))),
        }
    }

    /// Enumeration size `(N, M, cap)`, with `N` checked against the cap.
    pub fn enumeration_size(&self, alpha: f64) -> Result<(usize, usize, usize), CliError> {
        let n: usize = self.get("enum_n")?;
        let cap: usize = self.get("enum_cap")?;
        check_cap(n, cap)?;
        if n == 0 {
            return Err(CliError::Usage("enum_n must be at least 1".into()));
        }
        let m = self.auto("enum_m")?.unwrap_or((alpha * n as f64).round() as usize);
        Ok((n, m, cap))
    }

    /// Output directory.
    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir"))
    }
}

/// Rejects `N` above `cap`.
pub fn check_cap(n: usize, cap: usize) -> Result<(), CliError> {
    if n > cap {
        return Err(CliError::Usage(format!("N = {n} exceeds the enumeration cap {cap}")));
    }
    Ok(())
}

/// Rejects non-positive `alpha`.
pub fn positive_alpha(alpha: f64) -> Result<f64, CliError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(CliError::Usage(format!("alpha must be positive, got {alpha}")));
    }
    Ok(alpha)
}

fn usage(e: perceptron::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn split_pair(s: &str) -> Result<(&str, &str), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim(), v.trim()))
}

fn insert(values: &mut BTreeMap<String, String>, key: &str, value: &str) -> Result<(), CliError> {
    match values.get_mut(key) {
        Some(slot) => {
            *slot = value.to_string();
            Ok(())
        }
        None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.effective().lines().count(), KEYS.len());
        assert_eq!(cfg.alpha().unwrap(), 0.01);
        assert_eq!(cfg.auto::<f64>("eps_bar").unwrap(), None);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nalpha = 0.05\nseed=3 # trailing\n\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["seed=9".into()]).unwrap();
        assert_eq!(cfg.alpha().unwrap(), 0.05);
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 9);
    }

    #[test]
    fn usage_errors() {
        assert!(matches!(RunConfig::load(None, &["bogus=1".into()]), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::load(None, &["alpha".into()]), Err(CliError::Usage(_))));
        let cfg = RunConfig::load(None, &["alpha=-1".into(), "activation=spline".into()]).unwrap();
        assert!(matches!(cfg.alpha(), Err(CliError::Usage(_))));
        assert!(matches!(cfg.activation(), Err(CliError::Usage(_))));
        let cfg = RunConfig::load(None, &["enum_n=30".into()]).unwrap();
        assert!(matches!(cfg.enumeration_size(0.1), Err(CliError::Usage(_))));
    }

    #[test]
    fn lists_and_sizes() {
        let cfg = RunConfig::load(None, &["enum_n=10".into(), "alpha=0.25".into()]).unwrap();
        assert_eq!(cfg.list::<f64>("alphas").unwrap(), vec![0.001, 0.005, 0.01, 0.05]);
        assert!(cfg.list::<usize>("experiment_n").unwrap().is_empty());
        assert_eq!(cfg.enumeration_size(0.25).unwrap(), (10, 3, 26));
    }
}
