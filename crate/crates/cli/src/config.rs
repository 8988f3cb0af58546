//! key=value run-configuration files.
//!
//! Lines are `key = value` (one per line, `#` comments). Keys are checked
//! against the known schema and paths are resolved at parse time, so typos
//! fail before any compute starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Every key the tool understands.
const SCHEMA: &[&str] = &[
    "data.source",
    "data.dir",
    "data.train_n",
    "data.test_n",
    "data.subset_seed",
    "data.targets",
    "data.synthetic_d",
    "data.synthetic_classes",
    "data.synthetic_noise",
    "data.synthetic_scale",
    "data.synthetic_seed",
    "model.widths",
    "model.activation",
    "model.parameterization",
    "model.sigma_w",
    "model.sigma_b",
    "model.use_bias",
    "model.seed",
    "train.eta",
    "train.lambda",
    "train.momentum",
    "train.batch_size",
    "train.loss",
    "train.epochs",
    "train.eval_every",
    "train.patience",
    "train.lr_boundaries",
    "train.lr_factor",
    "sweep.etas",
    "sweep.lambdas",
    "sweep.sigma_ws",
    "sweep.budget",
    "sweep.kappa",
    "sweep.max_epochs",
    "sweep.eval_points",
    "autol2.enabled",
    "autol2.lambda0",
    "autol2.decay_factor",
    "autol2.measure_every",
    "autol2.refractory_constant",
    "autol2.epochs",
    "flow.k",
    "flow.lambda",
    "flow.t_max",
    "flow.loss",
    "flow.kernel",
    "flow.points_per_decade",
    "predict.lambda_probe",
    "predict.patience",
    "predict.budget",
    "predict.t1",
    "deeplinear.depth",
    "deeplinear.width",
    "deeplinear.lambda",
    "deeplinear.beta",
    "deeplinear.eta",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got `{raw}`", lineno + 1);
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !SCHEMA.contains(&key.as_str()) {
                bail!("line {}: unknown key `{key}`", lineno + 1);
            }
            if values.insert(key.clone(), value).is_some() {
                bail!("line {}: duplicate key `{key}`", lineno + 1);
            }
        }
        let config = RunConfig { values };
        config.check_paths(base_dir)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    fn check_paths(&self, base_dir: &Path) -> Result<()> {
        if let Some(dir) = self.values.get("data.dir") {
            let p = resolve(base_dir, dir);
            if !p.is_dir() {
                bail!("data.dir `{}` is not a directory", p.display());
            }
        }
        if let Some(spec) = self.values.get("flow.kernel") {
            if let Some(path) = spec.strip_prefix("file:") {
                let p = resolve(base_dir, path);
                if !p.is_file() {
                    bail!("flow.kernel file `{}` does not exist", p.display());
                }
            } else if spec != "empirical" {
                bail!("flow.kernel must be `file:PATH` or `empirical`, got `{spec}`");
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        assert!(SCHEMA.contains(&key), "unknown config key `{key}`");
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => match raw.parse::<T>() {
                Ok(v) => Ok(Some(v)),
                Err(e) => bail!("config key `{key}`: cannot parse `{raw}`: {e}"),
            },
        }
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn list_f64(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .with_context(|| format!("config key `{key}`: bad number `{t}`"))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    pub fn list_usize(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .with_context(|| format!("config key `{key}`: bad integer `{t}`"))
                })
                .collect::<Result<Vec<usize>>>()
                .map(Some),
        }
    }

    /// Serialized form written into run directories; reloading it
    /// reproduces the run.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        base.join(pb)
    }
}
