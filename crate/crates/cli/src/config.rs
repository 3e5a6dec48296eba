//! Pipeline settings: defaults, then a `key = value` config file, then
//! command-line flags (flags win).

use std::path::{Path, PathBuf};

use matu_core::embedding::{DEFAULT_BATCH_SIZE, DEFAULT_D_TARGET};
use matu_core::scorer::{LossMode, ScoreOptions};
use matu_core::{FitConfig, StepFilter};

use crate::CliError;

pub const DEFAULT_MODEL: &str = "Qwen/Qwen3-Embedding-0.6B";

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub log: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub embed_url: Option<String>,
    pub embed_model: String,
    pub batch_size: usize,
    pub d_target: usize,
    pub fit: FitConfig,
    /// Mandatory for score and interpret; unset until a flag or key gives it.
    pub seed: Option<u64>,
    pub score: ScoreOptions,
    pub jobs: usize,
    pub step_filter: StepFilter,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            log: None,
            cache: None,
            labels: None,
            out_dir: None,
            embed_url: None,
            embed_model: DEFAULT_MODEL.into(),
            batch_size: DEFAULT_BATCH_SIZE,
            d_target: DEFAULT_D_TARGET,
            fit: FitConfig::default(),
            seed: None,
            score: ScoreOptions::default(),
            jobs: 0,
            step_filter: StepFilter::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "config key {key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::default();
        cfg.apply_text(&text, base)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim(), base)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), CliError> {
        let path = || Some(base.join(value));
        match key {
            "paths.log" => self.log = path(),
            "paths.cache" => self.cache = path(),
            "paths.labels" => self.labels = path(),
            "paths.out_dir" => self.out_dir = path(),
            "embed.url" => self.embed_url = Some(value.to_string()),
            "embed.model" => self.embed_model = value.to_string(),
            "embed.batch_size" => self.batch_size = parse_num(key, value)?,
            "embed.d_target" => self.d_target = parse_num(key, value)?,
            "fit.max_iters" => self.fit.max_iters = parse_num(key, value)?,
            "fit.tol" => self.fit.rel_tol = parse_num(key, value)?,
            "fit.restarts" => self.fit.restarts = parse_num(key, value)?,
            "fit.seed" => self.seed = Some(parse_num(key, value)?),
            "score.rmax" => self.score.r_max = parse_num(key, value)?,
            "score.loss" => {
                self.score.loss_mode = LossMode::parse(value)
                    .ok_or_else(|| CliError::Usage(format!("config key {key}: expected rel or abs, got {value:?}")))?
            }
            "score.warm_start" => self.score.warm_start = parse_bool(key, value)?,
            "score.jobs" => self.jobs = parse_num(key, value)?,
            "steps.filter" => {
                self.step_filter = StepFilter::parse(value).map_err(|e| CliError::Usage(e.to_string()))?
            }
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The fit settings with the mandatory seed applied.
    pub fn seeded_fit(&self) -> Result<FitConfig, CliError> {
        let seed = self
            .seed
            .ok_or_else(|| CliError::Usage("a seed is required (--seed or fit.seed)".into()))?;
        Ok(FitConfig {
            seed,
            ..self.fit.clone()
        })
    }
}

/// Returns the path or a usage error naming the missing setting.
pub fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    let p = p
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} path (--{what} or paths.{what})")))?;
    if !p.exists() {
        return Err(CliError::Core(matu_core::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} file {} does not exist", p.display()),
        ))));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_applied_and_paths_resolved() {
        let mut c = PipelineConfig::default();
        c.apply_text(
            "# demo\npaths.log = a.jsonl\nembed.d_target=32\nscore.loss = abs\nsteps.filter = message\nfit.seed = 4\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(c.log.as_deref(), Some(Path::new("/data/a.jsonl")));
        assert_eq!(c.d_target, 32);
        assert_eq!(c.score.loss_mode, LossMode::Absolute);
        assert_eq!(c.seed, Some(4));
        assert!(!c.step_filter.keeps(matu_core::trajectory::StepKind::FinalAnswer));
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        let mut c = PipelineConfig::default();
        assert!(matches!(
            c.apply_text("nope = 1", Path::new("")),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            c.apply_text("fit.restarts = x", Path::new("")),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            c.apply_text("just text", Path::new("")),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn seed_is_mandatory() {
        let c = PipelineConfig::default();
        assert!(c.seeded_fit().is_err());
    }
}
