//! The sectioned TOML run configuration and its override rules.

use std::path::{Path, PathBuf};

use fibresr::data::{Domain, SplitMode, DEFAULT_FOV_COVERAGE};
use fibresr::forward_model::NoiseParams;
use fibresr::models::{DiscriminatorConfig, GeneratorConfig};
use fibresr::phantom::{CorpusConfig, PhantomKind};
use fibresr::trainer::TrainConfig;
use fibresr::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub kind: PhantomKind,
    pub frames_per_video: usize,
    pub videos_per_patient: usize,
    pub settings: Vec<String>,
    /// Write 8-bit PNGs instead of 16-bit.
    pub eight_bit: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        SynthSection {
            frames: c.frames,
            width: c.width,
            height: c.height,
            kind: c.kind,
            frames_per_video: c.frames_per_video,
            videos_per_patient: c.videos_per_patient,
            settings: c.settings,
            eight_bit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSection {
    /// Fibres per pixel.
    pub density: f64,
    /// Positional jitter as a fraction of the lattice pitch.
    pub jitter: f64,
}

impl Default for LayoutSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        LayoutSection {
            density: c.density,
            jitter: c.jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub patch_size: usize,
    pub fov_coverage: f64,
    pub split: SplitMode,
    pub fractions: [f64; 3],
    pub target_domain: Domain,
    /// Directory of natural grayscale PNGs for the `nat` target domain.
    pub natural_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            patch_size: 32,
            fov_coverage: DEFAULT_FOV_COVERAGE,
            split: SplitMode::Cs1,
            fractions: [0.7, 0.15, 0.15],
            target_domain: Domain::Orig,
            natural_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub plots: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { plots: true }
    }
}

/// Fully resolved configuration. `training.seed` always equals `seed` and
/// `discriminator.patch_size` always equals `data.patch_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub layout: LayoutSection,
    pub noise: NoiseParams,
    pub data: DataSection,
    pub training: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            synth: SynthSection::default(),
            layout: LayoutSection::default(),
            noise: NoiseParams::default(),
            data: DataSection::default(),
            training: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            metrics: MetricsSection::default(),
        };
        c.tie();
        c
    }
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

/// Parses `VALUE` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key in a TOML table, creating intermediate tables.
pub fn set_key(root: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("{key}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn get_key<'a>(root: &'a toml::Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut v = root.get(parts.next()?)?;
    for p in parts {
        v = v.as_table()?.get(p)?;
    }
    Some(v)
}

impl RunConfig {
    fn tie(&mut self) {
        self.training.seed = self.seed;
        self.discriminator.patch_size = self.data.patch_size;
    }

    /// Builds the configuration from an optional file, `KEY=VALUE`
    /// overrides (`--set`) and typed overrides from flags, in that order of
    /// increasing precedence.
    pub fn resolve(
        file: Option<&Path>,
        set: &[String],
        flags: &[(&str, Value)],
    ) -> Result<RunConfig> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got {s:?}")))?;
            set_key(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        for (k, v) in flags {
            set_key(&mut table, k, v.clone())?;
        }
        for (tied, owner) in [
            ("training.seed", "seed"),
            ("discriminator.patch_size", "data.patch_size"),
        ] {
            if let Some(v) = get_key(&table, tied) {
                if get_key(&table, owner) != Some(v) {
                    return Err(config_err(format!(
                        "{tied} follows {owner}; set {owner} instead"
                    )));
                }
            }
        }
        let mut config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().trim_end()))?;
        config.tie();
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.data.patch_size < 8 {
            return Err(config_err("data.patch_size must be at least 8"));
        }
        if !(0.0..=1.0).contains(&self.data.fov_coverage) {
            return Err(config_err("data.fov_coverage must be in [0, 1]"));
        }
        let f = self.data.fractions;
        if f.iter().any(|&x| x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err(format!(
                "data.fractions {f:?} must be non-negative and sum to 1"
            )));
        }
        if self.synth.frames == 0 {
            return Err(config_err("synth.frames must be positive"));
        }
        Ok(())
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            frames: self.synth.frames,
            width: self.synth.width,
            height: self.synth.height,
            kind: self.synth.kind,
            density: self.layout.density,
            jitter: self.layout.jitter,
            noise: self.noise,
            frames_per_video: self.synth.frames_per_video,
            videos_per_patient: self.synth.videos_per_patient,
            settings: self.synth.settings.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }
}
