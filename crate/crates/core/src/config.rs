//! Run configuration file.
//!
//! ```text
//! # lifespan-config v1
//! run_name = ffhq_male
//! output_dir = runs
//! network.resolution = 256
//! schema.anchors = 0-2,3-6,7-9,15-19,30-39,50-69
//! train.lr_decay = 50:0.5,100:0.5
//! ```
//!
//! One `key = value` per line; `#` starts a comment line. Keys are
//! `section.name` except for the top-level `run_name` and `output_dir`.
//! Unknown and repeated keys are errors that name the key and line.
//! Precedence, lowest first: built-in defaults, the file, the
//! `LIFESPAN_OUTPUT_DIR` environment variable (output_dir only), then
//! command-line flags. [`RunConfig::to_text`] writes every key and parses
//! back to an identical configuration.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::agecode::AgeClassSchema;
use crate::dataprep::{CropOptions, PruneThresholds};
use crate::error::{Error, Result};
use crate::networks::NetworkConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_HEADER: &str = "# lifespan-config v1";
pub const OUTPUT_DIR_ENV: &str = "LIFESPAN_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub prune: PruneThresholds,
    pub crop: CropOptions,
    pub data_manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "run".into(),
            output_dir: PathBuf::from("runs"),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            prune: PruneThresholds::default(),
            crop: CropOptions::default(),
            data_manifest: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn parse_decay(v: &str) -> std::result::Result<BTreeMap<usize, f64>, String> {
    if v.trim().is_empty() || v == "none" {
        return Ok(BTreeMap::new());
    }
    v.split(',')
        .map(|item| {
            let (e, f) = item
                .split_once(':')
                .ok_or_else(|| format!("`{item}` is not epoch:factor"))?;
            Ok((parse_num(e.trim())?, parse_num(f.trim())?))
        })
        .collect()
}

fn format_decay(m: &BTreeMap<usize, f64>) -> String {
    if m.is_empty() {
        return "none".into();
    }
    m.iter().map(|(e, f)| format!("{e}:{f}")).collect::<Vec<_>>().join(",")
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "run_name",
    "output_dir",
    "network.resolution",
    "network.base_channels",
    "network.latent_dim",
    "schema.anchors",
    "schema.elements_per_class",
    "train.batch_size",
    "train.epochs",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.lr_decay",
    "train.mapping_lr_factor",
    "train.ema_decay",
    "train.seed",
    "train.gender",
    "train.code_sigma",
    "train.both_reals",
    "train.max_steps",
    "train.log_every",
    "train.sample_every",
    "train.checkpoint_every",
    "loss.lambda_rec",
    "loss.lambda_cyc",
    "loss.lambda_id",
    "loss.lambda_age",
    "loss.r1_gamma",
    "prune.min_gender_confidence",
    "prune.min_age_confidence",
    "prune.max_abs_yaw",
    "prune.max_abs_pitch",
    "prune.dark_glasses",
    "prune.max_single_eye_occlusion",
    "prune.max_both_eyes_occlusion",
    "crop.blend_fraction",
    "data.manifest",
];

impl RunConfig {
    /// Set one key. Schema keys are staged in `schema` and combined by the
    /// caller, since anchors and block width are validated together.
    fn set(&mut self, key: &str, v: &str, schema: &mut (String, usize)) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "run_name" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err("run_name must be a non-empty file name".into());
                }
                self.run_name = v.into()
            }
            "output_dir" => self.output_dir = v.into(),
            "network.resolution" => self.network.resolution = parse_num(v)?,
            "network.base_channels" => self.network.base_channels = parse_num(v)?,
            "network.latent_dim" => self.network.latent_dim = parse_num(v)?,
            "schema.anchors" => schema.0 = v.into(),
            "schema.elements_per_class" => schema.1 = parse_num(v)?,
            "train.batch_size" => t.batch_size = parse_num(v)?,
            "train.epochs" => t.epochs = parse_num(v)?,
            "train.lr" => t.lr = parse_num(v)?,
            "train.beta1" => t.beta1 = parse_num(v)?,
            "train.beta2" => t.beta2 = parse_num(v)?,
            "train.adam_eps" => t.adam_eps = parse_num(v)?,
            "train.lr_decay" => t.lr_decay = parse_decay(v)?,
            "train.mapping_lr_factor" => t.mapping_lr_factor = parse_num(v)?,
            "train.ema_decay" => t.ema_decay = parse_num(v)?,
            "train.seed" => t.seed = parse_num(v)?,
            "train.gender" => t.gender = v.parse().map_err(|e: Error| e.to_string())?,
            "train.code_sigma" => t.code_sigma = parse_num(v)?,
            "train.both_reals" => t.both_reals = parse_bool(v)?,
            "train.max_steps" => t.max_steps = if v == "none" { None } else { Some(parse_num(v)?) },
            "train.log_every" => t.log_every = parse_num(v)?,
            "train.sample_every" => t.sample_every = parse_num(v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(v)?,
            "loss.lambda_rec" => t.weights.lambda_rec = parse_num(v)?,
            "loss.lambda_cyc" => t.weights.lambda_cyc = parse_num(v)?,
            "loss.lambda_id" => t.weights.lambda_id = parse_num(v)?,
            "loss.lambda_age" => t.weights.lambda_age = parse_num(v)?,
            "loss.r1_gamma" => t.weights.r1_gamma = parse_num(v)?,
            "prune.min_gender_confidence" => self.prune.min_gender_confidence = parse_num(v)?,
            "prune.min_age_confidence" => self.prune.min_age_confidence = parse_num(v)?,
            "prune.max_abs_yaw" => self.prune.max_abs_yaw = parse_num(v)?,
            "prune.max_abs_pitch" => self.prune.max_abs_pitch = parse_num(v)?,
            "prune.dark_glasses" => self.prune.prune_dark_glasses = parse_bool(v)?,
            "prune.max_single_eye_occlusion" => self.prune.max_single_eye_occlusion = parse_num(v)?,
            "prune.max_both_eyes_occlusion" => self.prune.max_both_eyes_occlusion = parse_num(v)?,
            "crop.blend_fraction" => self.crop.blend_fraction = parse_num(v)?,
            "data.manifest" => self.data_manifest = if v == "none" { None } else { Some(v.into()) },
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let s = &self.network.schema;
        match key {
            "run_name" => self.run_name.clone(),
            "output_dir" => self.output_dir.display().to_string(),
            "network.resolution" => self.network.resolution.to_string(),
            "network.base_channels" => self.network.base_channels.to_string(),
            "network.latent_dim" => self.network.latent_dim.to_string(),
            "schema.anchors" => s.ranges_string(),
            "schema.elements_per_class" => s.k().to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.lr_decay" => format_decay(&t.lr_decay),
            "train.mapping_lr_factor" => t.mapping_lr_factor.to_string(),
            "train.ema_decay" => t.ema_decay.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.gender" => t.gender.to_string(),
            "train.code_sigma" => t.code_sigma.to_string(),
            "train.both_reals" => t.both_reals.to_string(),
            "train.max_steps" => t.max_steps.map_or("none".into(), |m| m.to_string()),
            "train.log_every" => t.log_every.to_string(),
            "train.sample_every" => t.sample_every.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "loss.lambda_rec" => t.weights.lambda_rec.to_string(),
            "loss.lambda_cyc" => t.weights.lambda_cyc.to_string(),
            "loss.lambda_id" => t.weights.lambda_id.to_string(),
            "loss.lambda_age" => t.weights.lambda_age.to_string(),
            "loss.r1_gamma" => t.weights.r1_gamma.to_string(),
            "prune.min_gender_confidence" => self.prune.min_gender_confidence.to_string(),
            "prune.min_age_confidence" => self.prune.min_age_confidence.to_string(),
            "prune.max_abs_yaw" => self.prune.max_abs_yaw.to_string(),
            "prune.max_abs_pitch" => self.prune.max_abs_pitch.to_string(),
            "prune.dark_glasses" => self.prune.prune_dark_glasses.to_string(),
            "prune.max_single_eye_occlusion" => self.prune.max_single_eye_occlusion.to_string(),
            "prune.max_both_eyes_occlusion" => self.prune.max_both_eyes_occlusion.to_string(),
            "crop.blend_fraction" => self.crop.blend_fraction.to_string(),
            "data.manifest" => self
                .data_manifest
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
            _ => unreachable!("every key in KEYS has a getter"),
        }
    }

    /// Apply `(line, key, value)` assignments on top of `self`.
    pub fn apply<'a>(&mut self, items: impl IntoIterator<Item = (usize, &'a str, &'a str)>) -> Result<()> {
        let mut schema = (self.network.schema.ranges_string(), self.network.schema.k());
        let mut schema_line = (0, "schema.anchors");
        let mut seen = HashSet::new();
        for (line, key, value) in items {
            let err = |msg: String| Error::Config {
                key: key.to_string(),
                line,
                msg,
            };
            if !seen.insert(key) {
                return Err(err("key given twice".into()));
            }
            self.set(key, value, &mut schema).map_err(err)?;
            if key.starts_with("schema.") {
                schema_line = (line, key);
            }
        }
        self.network.schema = AgeClassSchema::parse_ranges(&schema.0, schema.1).map_err(|e| Error::Config {
            key: schema_line.1.to_string(),
            line: schema_line.0,
            msg: e.to_string(),
        })?;
        Ok(())
    }

    /// Parse a config file body over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut lines = text.lines().enumerate().peekable();
        if let Some((_, first)) = lines.peek() {
            if first.trim_start().starts_with("# lifespan-config") && first.trim() != CONFIG_HEADER {
                return Err(Error::Config {
                    key: "header".into(),
                    line: 1,
                    msg: format!("unsupported header, expected `{CONFIG_HEADER}`"),
                });
            }
        }
        let mut items = Vec::new();
        for (i, raw) in lines {
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Config {
                key: l.to_string(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            items.push((i + 1, k.trim(), v.trim()));
        }
        self.apply(items)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigGeneral(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Override `output_dir` from the environment when set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = dir.into();
        }
    }

    /// Apply `key=value` overrides given on the command line (line 0).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let items = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (0, k.trim(), v.trim()))
                    .ok_or_else(|| Error::Config {
                        key: o.clone(),
                        line: 0,
                        msg: "override must be key=value".into(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply(items)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut s = format!("{CONFIG_HEADER}\n");
        for k in KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k)));
        }
        s
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
