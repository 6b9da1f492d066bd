use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use stackbundle::engine::Persistence;
use stackbundle::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    DeconvSparse,
    DeconvLowrank,
    Scdl,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::DeconvSparse => "deconv-sparse",
            Solver::DeconvLowrank => "deconv-lowrank",
            Solver::Scdl => "scdl",
        }
    }

    fn required_inputs(self) -> &'static [&'static str] {
        match self {
            Solver::DeconvSparse | Solver::DeconvLowrank => &["y", "psf"],
            Solver::Scdl => &["s_h", "s_l"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub listen: String,
    pub expect: usize,
    /// Where to write the bound address, useful with port 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr_file: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_run_id() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub solver: Solver,
    /// Role name to dstack path; relative paths resolve against the config file.
    pub inputs: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions_factor: Option<usize>,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "one")]
    pub cores_per_worker: usize,
    #[serde(default)]
    pub persistence: Persistence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_cap_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "J")]
    pub scales: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reweight_rounds: Option<usize>,
    /// Known per-image noise levels; estimated from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<Vec<f64>>,

    #[serde(default, skip_serializing_if = "Option::is_none", alias = "A")]
    pub atoms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,

    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "yes")]
    pub telemetry: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterSpec>,
}

/// Parse `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Load a JSON config, apply overrides, resolve relative paths, validate.
    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        for (k, v) in overrides {
            // Setting one partition key clears the other.
            match k.as_str() {
                "partitions" => {
                    obj.remove("partitions_factor");
                }
                "partitions_factor" => {
                    obj.remove("partitions");
                }
                _ => {}
            }
            obj.insert(k.clone(), v.clone());
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in cfg.inputs.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.partitions, self.partitions_factor) {
            (Some(0), _) | (_, Some(0)) => return Err(Error::Config("partitions must be positive".into())),
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(
                    "set exactly one of `partitions` and `partitions_factor`".into(),
                ))
            }
            _ => {}
        }
        if self.workers == 0 || self.cores_per_worker == 0 {
            return Err(Error::Config("workers and cores_per_worker must be positive".into()));
        }
        if let Some(c) = &self.cluster {
            if c.expect == 0 {
                return Err(Error::Config("cluster.expect must be positive".into()));
            }
        }
        if self.run_id.is_empty()
            || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return Err(Error::Config(format!("run_id `{}` must be a plain name", self.run_id)));
        }
        for role in self.solver.required_inputs() {
            let p = self
                .inputs
                .get(*role)
                .ok_or_else(|| Error::Config(format!("{} needs input `{role}`", self.solver.name())))?;
            if !p.is_file() {
                return Err(Error::Config(format!("input `{role}` ({}) does not exist", p.display())));
            }
        }
        if let Some(extra) = self
            .inputs
            .keys()
            .find(|k| !self.solver.required_inputs().contains(&k.as_str()))
        {
            return Err(Error::Config(format!("unknown input `{extra}` for {}", self.solver.name())));
        }
        if matches!(self.eps, Some(e) if !(e > 0.0)) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn input(&self, role: &str) -> Result<PathBuf> {
        self.inputs
            .get(role)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing input `{role}`")))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    /// Digest of the solver, its numerical parameters and the input bytes.
    /// Executor settings (partitions, workers, persistence) are excluded so
    /// runs of one problem on different setups compare.
    pub fn problem_hash(&self) -> Result<String> {
        let params = serde_json::json!({
            "solver": self.solver,
            "i_max": self.i_max,
            "eps": self.eps,
            "lambda": self.lambda,
            "scales": self.scales,
            "kappa": self.kappa,
            "reweight_rounds": self.reweight_rounds,
            "noise_sigma": self.noise_sigma,
            "atoms": self.atoms,
            "c": [self.c1, self.c2, self.c3],
            "lambda_hl": [self.lambda_h, self.lambda_l],
            "delta": self.delta,
            "seed": self.seed,
        });
        let mut h = Sha256::new();
        h.update(params.to_string().as_bytes());
        for (role, path) in &self.inputs {
            h.update(role.as_bytes());
            h.update(std::fs::read(path)?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn setup() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "y.dstack", "x");
        write(dir.path(), "psf.dstack", "x");
        let cfg = write(
            dir.path(),
            "run.json",
            r#"{"solver": "deconv-sparse", "inputs": {"y": "y.dstack", "psf": "psf.dstack"},
                "partitions": 4, "out_dir": "out"}"#,
        );
        (dir, cfg)
    }

    #[test]
    fn loads_and_resolves_relative_paths() {
        let (dir, cfg) = setup();
        let c = RunConfig::load(&cfg, &[]).unwrap();
        assert_eq!(c.input("y").unwrap(), dir.path().join("y.dstack"));
        assert_eq!(c.run_dir(), dir.path().join("out").join("run"));
        assert_eq!(c.workers, 1);
        assert_eq!(c.persistence, Persistence::MemoryOnly);
    }

    #[test]
    fn overrides_replace_partition_mode() {
        let (_dir, cfg) = setup();
        let o = [parse_override("partitions_factor=3").unwrap(), parse_override("run_id=abc").unwrap()];
        let c = RunConfig::load(&cfg, &o).unwrap();
        assert_eq!((c.partitions, c.partitions_factor), (None, Some(3)));
        assert_eq!(c.run_id, "abc");
    }

    #[test]
    fn rejects_bad_configs() {
        let (dir, cfg) = setup();
        for o in [
            "partitions=0",
            "run_id=../x",
            "solver=scdl",
            "workers=0",
            "bogus=1",
            "persistence=sometimes",
        ] {
            let err = RunConfig::load(&cfg, &[parse_override(o).unwrap()]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{o}: {err}");
        }
        let both = write(
            dir.path(),
            "both.json",
            r#"{"solver": "scdl", "inputs": {}, "partitions": 4, "partitions_factor": 2, "out_dir": "o"}"#,
        );
        assert!(RunConfig::load(&both, &[]).is_err());
        assert!(RunConfig::load(&dir.path().join("missing.json"), &[]).is_err());
    }

    #[test]
    fn hash_ignores_executor_settings() {
        let (_dir, cfg) = setup();
        let a = RunConfig::load(&cfg, &[]).unwrap();
        let b = RunConfig::load(&cfg, &[parse_override("workers=4").unwrap()]).unwrap();
        let c = RunConfig::load(&cfg, &[parse_override("lambda=0.5").unwrap()]).unwrap();
        assert_eq!(a.problem_hash().unwrap(), b.problem_hash().unwrap());
        assert_ne!(a.problem_hash().unwrap(), c.problem_hash().unwrap());
    }
}
