//! Experiment configuration: INI sections `[data]`, `[diffusion]`,
//! `[prototypes]`, `[metrics]` and `[output]` with `key = value` lines and `#`
//! or `;` comments. Every key is optional; unknown sections and keys are
//! rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::diffusion::{scaled_beta_range, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::phantom::PhantomStyle;
use crate::prototypes::{ExtractorConfig, HeadConfig, HeadKind};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub style: PhantomStyle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    /// Number of timesteps `T`.
    pub steps: usize,
    /// `None` means the 1000-step defaults rescaled to `T`.
    pub beta_range: Option<(f64, f64)>,
    pub net: DenoiserConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sample_count: usize,
    pub trajectory_stride: usize,
}

impl DiffusionConfig {
    pub fn beta_bounds(&self) -> (f64, f64) {
        self.beta_range.unwrap_or_else(|| scaled_beta_range(self.steps))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let (start, end) = self.beta_bounds();
        NoiseSchedule::linear(self.steps, start, end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeConfig {
    pub heads: Vec<HeadKind>,
    pub head: HeadConfig,
    pub extractor: ExtractorConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub metric: MetricConfig,
    /// Intensity above which a generated pixel counts as inside the region for Dice.
    pub dice_threshold: f64,
    pub perceptual_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also rasterise the comparison charts to PGM.
    pub render: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub prototypes: PrototypeConfig,
    pub metrics: EvalConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig { n: 200, size: 32, seed: 7, style: PhantomStyle::default() },
            diffusion: DiffusionConfig {
                steps: 1000,
                beta_range: None,
                net: DenoiserConfig::default(),
                epochs: 50,
                learning_rate: 1e-3,
                batch_size: 8,
                sample_count: 8,
                trajectory_stride: 10,
            },
            prototypes: PrototypeConfig {
                heads: HeadKind::ALL.to_vec(),
                head: HeadConfig::default(),
                extractor: ExtractorConfig::default(),
            },
            metrics: EvalConfig {
                metric: MetricConfig::default(),
                dice_threshold: 0.2,
                perceptual_seed: crate::metrics::PERCEPTUAL_SEED,
            },
            output: OutputConfig { dir: PathBuf::from("runs/default"), render: true },
        }
    }
}

const SECTIONS: [&str; 5] = ["data", "diffusion", "prototypes", "metrics", "output"];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse<T: FromStr>(section: &str, key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| config_err(format!("[{section}] {key} = `{raw}`: {e}")))
}

fn parse_bool(section: &str, key: &str, raw: &str) -> Result<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(config_err(format!("[{section}] {key} = `{raw}`: expected true or false"))),
    }
}

fn parse_list<T: FromStr>(section: &str, key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(section, key, s)).collect()
}

/// Drops a trailing ` # comment` or ` ; comment` from a value.
fn strip_comment(raw: &str) -> &str {
    let cut = [" #", "\t#", " ;", "\t;"].iter().filter_map(|m| raw.find(m)).min().unwrap_or(raw.len());
    raw[..cut].trim()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| config_err(e.to_string()))?;
        let mut c = Self::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(config_err(format!("key `{key}` appears before any [section]")));
                }
                continue;
            };
            if !SECTIONS.contains(&section) {
                return Err(config_err(format!("unknown section [{section}]")));
            }
            for (key, raw) in props.iter() {
                if props.get_all(key).count() > 1 {
                    return Err(config_err(format!("[{section}] {key} is set more than once")));
                }
                c.set(section, key, strip_comment(raw))?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        match (section, key) {
            ("data", "n") => self.data.n = parse(s, key, v)?,
            ("data", "size") => self.data.size = parse(s, key, v)?,
            ("data", "seed") => self.data.seed = parse(s, key, v)?,
            ("data", "background") => self.data.style.background = parse(s, key, v)?,
            ("data", "texture_amplitude") => self.data.style.texture_amplitude = parse(s, key, v)?,
            ("data", "noise_floor") => self.data.style.noise_floor = parse(s, key, v)?,

            ("diffusion", "steps") => self.diffusion.steps = parse(s, key, v)?,
            ("diffusion", "beta_start") => {
                let end = self.diffusion.beta_bounds().1;
                self.diffusion.beta_range = Some((parse(s, key, v)?, end));
            }
            ("diffusion", "beta_end") => {
                let start = self.diffusion.beta_bounds().0;
                self.diffusion.beta_range = Some((start, parse(s, key, v)?));
            }
            ("diffusion", "base_width") => self.diffusion.net.base_width = parse(s, key, v)?,
            ("diffusion", "time_dim") => self.diffusion.net.time_dim = parse(s, key, v)?,
            ("diffusion", "epochs") => self.diffusion.epochs = parse(s, key, v)?,
            ("diffusion", "learning_rate") => self.diffusion.learning_rate = parse(s, key, v)?,
            ("diffusion", "batch_size") => self.diffusion.batch_size = parse(s, key, v)?,
            ("diffusion", "sample_count") => self.diffusion.sample_count = parse(s, key, v)?,
            ("diffusion", "trajectory_stride") => self.diffusion.trajectory_stride = parse(s, key, v)?,

            ("prototypes", "heads") => self.prototypes.heads = parse_list(s, key, v)?,
            ("prototypes", "m") => self.prototypes.head.prototypes = parse(s, key, v)?,
            ("prototypes", "lambda_div") => self.prototypes.head.lambda_div = parse(s, key, v)?,
            ("prototypes", "epochs") => self.prototypes.head.steps = parse(s, key, v)?,
            ("prototypes", "learning_rate") => self.prototypes.head.learning_rate = parse(s, key, v)?,
            ("prototypes", "feature_depth") => self.prototypes.extractor.depth = parse(s, key, v)?,
            ("prototypes", "extractor_width") => self.prototypes.extractor.width = parse(s, key, v)?,
            ("prototypes", "extractor_epochs") => self.prototypes.extractor.epochs = parse(s, key, v)?,
            ("prototypes", "extractor_batch_size") => self.prototypes.extractor.batch_size = parse(s, key, v)?,
            ("prototypes", "extractor_learning_rate") => self.prototypes.extractor.learning_rate = parse(s, key, v)?,

            ("metrics", "peak") => self.metrics.metric.peak = parse(s, key, v)?,
            ("metrics", "k1") => self.metrics.metric.k1 = parse(s, key, v)?,
            ("metrics", "k2") => self.metrics.metric.k2 = parse(s, key, v)?,
            ("metrics", "ssim_window") => self.metrics.metric.ssim_window = parse(s, key, v)?,
            ("metrics", "psnr_cap") => self.metrics.metric.psnr_cap = parse(s, key, v)?,
            ("metrics", "lpips_weights") => {
                let w: Vec<f64> = parse_list(s, key, v)?;
                self.metrics.metric.lpips_weights = w
                    .try_into()
                    .map_err(|w: Vec<f64>| config_err(format!("[metrics] lpips_weights needs 3 values, got {}", w.len())))?;
            }
            ("metrics", "dice_threshold") => self.metrics.dice_threshold = parse(s, key, v)?,
            ("metrics", "perceptual_seed") => self.metrics.perceptual_seed = parse(s, key, v)?,

            ("output", "dir") => self.output.dir = PathBuf::from(v),
            ("output", "render") => self.output.render = parse_bool(s, key, v)?,

            ("data" | "diffusion" | "prototypes" | "metrics" | "output", _) => {
                return Err(config_err(format!("unknown key `{key}` in [{section}]")));
            }
            _ => return Err(config_err(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n < 2 {
            return Err(config_err("[data] n must be >= 2"));
        }
        if d.size < 16 || !d.size.is_multiple_of(4) {
            return Err(config_err("[data] size must be a multiple of 4 and >= 16"));
        }
        let f = &self.diffusion;
        if f.steps == 0 || f.epochs == 0 || f.batch_size == 0 || f.trajectory_stride == 0 {
            return Err(config_err("[diffusion] steps, epochs, batch_size and trajectory_stride must be >= 1"));
        }
        if f.sample_count < 2 {
            return Err(config_err("[diffusion] sample_count must be >= 2"));
        }
        if f.net.base_width == 0 || f.net.time_dim < 2 || !f.net.time_dim.is_multiple_of(2) {
            return Err(config_err("[diffusion] base_width must be >= 1 and time_dim even"));
        }
        if !(f.learning_rate > 0.0) {
            return Err(config_err("[diffusion] learning_rate must be > 0"));
        }
        f.schedule().map_err(|e| config_err(format!("[diffusion] {e}")))?;
        let p = &self.prototypes;
        if p.heads.is_empty() {
            return Err(config_err("[prototypes] heads must list at least one head"));
        }
        if p.head.prototypes == 0 || !(p.head.learning_rate > 0.0) || p.head.lambda_div < 0.0 {
            return Err(config_err("[prototypes] needs m >= 1, learning_rate > 0 and lambda_div >= 0"));
        }
        if p.extractor.depth == 0 || p.extractor.width == 0 || p.extractor.batch_size == 0 {
            return Err(config_err("[prototypes] feature_depth, extractor_width and extractor_batch_size must be >= 1"));
        }
        let m = &self.metrics;
        m.metric.validate().map_err(|e| config_err(format!("[metrics] {e}")))?;
        if m.metric.ssim_window > d.size {
            return Err(config_err("[metrics] ssim_window exceeds the image size"));
        }
        if !(0.0..1.0).contains(&m.dice_threshold) {
            return Err(config_err("[metrics] dice_threshold must lie in [0, 1)"));
        }
        Ok(())
    }
}
