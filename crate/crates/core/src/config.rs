//! Flat `key=value` run configuration.
//!
//! Lines are `key=value`; blank lines and lines starting with `#` are
//! skipped. Unknown keys are an error so typos surface early.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{self, DatasetSplit, LabelTable, SynthConfig};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    /// TSV with every labelled sentence; split three ways with the run seed.
    pub data: Option<PathBuf>,
    /// One predicate name per line; the 28 default predicates when absent.
    pub labels: Option<PathBuf>,
    pub out: PathBuf,
    /// Generate the corpus instead of reading `data`.
    pub synth: bool,
    /// `synth.seed` follows the run seed unless set explicitly.
    pub synth_config: SynthConfig,
    pub synth_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            data: None,
            labels: None,
            out: PathBuf::from(DEFAULT_OUT_DIR),
            synth: false,
            synth_config: SynthConfig::default(),
            synth_seed: None,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "synth" => self.synth = parse_value(key, value)?,
            "classes" => self.synth_config.num_classes = parse_value(key, value)?,
            "per_class" => self.synth_config.per_class = parse_value(key, value)?,
            "vocab_per_class" => self.synth_config.vocab_per_class = parse_value(key, value)?,
            "overlap" => self.synth_config.overlap = parse_value(key, value)?,
            "synth_seed" => self.synth_seed = Some(parse_value(key, value)?),
            _ => {
                if !self.pipeline.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(message) => Error::Config(format!("line {}: {message}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(d) = &self.data {
            writeln!(out, "data={}", d.display()).unwrap();
        }
        if let Some(l) = &self.labels {
            writeln!(out, "labels={}", l.display()).unwrap();
        }
        writeln!(out, "out={}", self.out.display()).unwrap();
        writeln!(out, "synth={}", self.synth).unwrap();
        let s = &self.synth_config;
        writeln!(out, "classes={}", s.num_classes).unwrap();
        writeln!(out, "per_class={}", s.per_class).unwrap();
        writeln!(out, "vocab_per_class={}", s.vocab_per_class).unwrap();
        writeln!(out, "overlap={}", s.overlap).unwrap();
        if let Some(seed) = self.synth_seed {
            writeln!(out, "synth_seed={seed}").unwrap();
        }
        for (k, v) in self.pipeline.to_kv() {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if !self.synth && self.data.is_none() {
            return Err(Error::Config("no data path given (set data=... or use synth)".into()));
        }
        let data = self.data.iter().filter(|_| !self.synth);
        if let Some(missing) = data.chain(&self.labels).find(|p| !p.is_file()) {
            return Err(Error::Config(format!("{} does not exist", missing.display())));
        }
        Ok(())
    }

    pub fn effective_synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.synth_seed.unwrap_or(self.pipeline.seed),
            ..self.synth_config
        }
    }

    /// Label table and the three data splits described by this config.
    pub fn load_data(&self) -> Result<(LabelTable, DatasetSplit)> {
        self.validate()?;
        let table = match &self.labels {
            Some(p) => LabelTable::load(p)?,
            None if self.synth => LabelTable::first_n(self.synth_config.num_classes)?,
            None => LabelTable::default(),
        };
        let samples = if self.synth {
            let s = self.effective_synth();
            if s.num_classes > table.len() {
                return Err(Error::LabelTable(format!(
                    "{} synthetic classes but only {} labels",
                    s.num_classes,
                    table.len()
                )));
            }
            data::synth_generate(&s)?
        } else {
            data::load_tsv(self.data.as_deref().expect("validated"), &table)?
        };
        Ok((table, data::split_equal(&samples, self.pipeline.seed)?))
    }
}
