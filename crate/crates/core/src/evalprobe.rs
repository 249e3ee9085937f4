//! Analysis probes over a trained model: latent linearity, lifespan
//! sweeps, age round-trip accuracy, identity consistency, and the
//! age-code ablation configurations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agecode::{interpolate_latent, AgeClassSchema, LatentAgeVector, DEFAULT_SIGMA};
use crate::error::{shape_err, Error, Result};
use crate::imageio;
use crate::inference::{age_embedding, Generator};
use crate::losses::l1_mean;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub samples: Vec<BTreeMap<String, f64>>,
    /// Mean of every per-sample metric.
    pub aggregates: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl ProbeReport {
    pub fn from_samples(probe: &str, samples: Vec<BTreeMap<String, f64>>) -> Self {
        let mut aggregates = BTreeMap::new();
        if let Some(first) = samples.first() {
            for key in first.keys() {
                let mean = samples.iter().map(|s| s[key]).sum::<f64>() / samples.len() as f64;
                aggregates.insert(format!("mean_{key}"), mean);
            }
        }
        ProbeReport {
            probe: probe.to_string(),
            samples,
            aggregates,
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn anchor(schema: &AgeClassSchema, label: &str) -> Result<usize> {
    schema
        .class_index(label)
        .ok_or_else(|| Error::ConfigGeneral(format!("probe needs anchor class {label}")))
}

/// Noise-free latent of anchor `i`.
pub fn anchor_latent(gen: &Generator<'_>, i: usize) -> Result<LatentAgeVector> {
    gen.class_latent(i)
}

/// Compare the decoder under the learned 3–6 latent with the same decoder
/// under the average of the 0–2 and 7–9 latents. Per sample, reports the
/// midpoint distance, the mean distance between outputs of adjacent trained
/// anchors (0–2/3–6 and 3–6/7–9), and their ratio. The bound the ratio is
/// judged against is a desk-scale proxy, not a published threshold.
pub fn latent_linearity_probe(gen: &Generator<'_>, x: &Tensor<f32>, out_dir: Option<&Path>) -> Result<ProbeReport> {
    let schema = &gen.nets.config.schema;
    let (lo, mid, hi) = (anchor(schema, "0-2")?, anchor(schema, "3-6")?, anchor(schema, "7-9")?);
    let w_lo = anchor_latent(gen, lo)?;
    let w_mid = anchor_latent(gen, mid)?;
    let w_hi = anchor_latent(gen, hi)?;
    let w_avg = interpolate_latent(&w_lo, &w_hi, 0.5)?;
    let id = gen.identity(x)?;
    let out_lo = gen.decode(&id, &w_lo)?;
    let out_mid = gen.decode(&id, &w_mid)?;
    let out_hi = gen.decode(&id, &w_hi)?;
    let out_avg = gen.decode(&id, &w_avg)?;
    let mut samples = Vec::new();
    for b in 0..x.shape()[0] {
        let m = out_mid.batch_item(b);
        let d_mid = l1_mean(&m, &out_avg.batch_item(b))?;
        let d_adj = 0.5 * (l1_mean(&out_lo.batch_item(b), &m)? + l1_mean(&m, &out_hi.batch_item(b))?);
        samples.push(BTreeMap::from([
            ("midpoint_distance".to_string(), d_mid),
            ("adjacent_anchor_distance".to_string(), d_adj),
            ("ratio".to_string(), if d_adj > 0.0 { d_mid / d_adj } else { 0.0 }),
        ]));
    }
    let mut report = ProbeReport::from_samples("latent_linearity", samples);
    report
        .notes
        .push("ratio < 2 is used as a desk-scale proxy for a quasi-linear age latent space".into());
    if let Some(dir) = out_dir {
        let mut tiles = Vec::new();
        for b in 0..x.shape()[0] {
            for t in [x, &out_lo, &out_mid, &out_avg, &out_hi] {
                tiles.push(t.batch_item(b));
            }
        }
        let path = dir.join("latent_linearity.png");
        imageio::save_png(&path, &imageio::grid(&tiles, 5)?)?;
        report.artifacts.push(path);
    }
    Ok(report)
}

/// Frames across every anchor gap in age order: each anchor output followed
/// by `frames_per_gap` interpolated outputs toward the next anchor, ending
/// on the last anchor. `n + (n−1)·frames_per_gap` frames for a `1×3×R×R`
/// input.
pub fn lifespan_sweep(gen: &Generator<'_>, x: &Tensor<f32>, frames_per_gap: usize) -> Result<Vec<Tensor<f32>>> {
    if x.shape().first() != Some(&1) {
        return Err(shape_err!("lifespan sweep takes a single image, got {:?}", x.shape()));
    }
    let n = gen.nets.config.schema.n();
    let latents = (0..n).map(|i| anchor_latent(gen, i)).collect::<Result<Vec<_>>>()?;
    let id = gen.identity(x)?;
    let mut frames = Vec::with_capacity(n + (n - 1) * frames_per_gap);
    for i in 0..n {
        frames.push(gen.decode(&id, &latents[i])?);
        if i + 1 == n {
            break;
        }
        for j in 1..=frames_per_gap {
            let alpha = j as f64 / (frames_per_gap + 1) as f64;
            let w = interpolate_latent(&latents[i], &latents[i + 1], alpha)?;
            frames.push(gen.decode(&id, &w)?);
        }
    }
    Ok(frames)
}

/// Write frames as `frame_0000.png`, `frame_0001.png`, … under `dir`.
pub fn write_frames(frames: &[Tensor<f32>], dir: &Path) -> Result<Vec<PathBuf>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("frame_{i:04}.png"));
            imageio::save_png(&p, f)?;
            Ok(p)
        })
        .collect()
}

/// Predicted class of one age embedding: argmax over classes of the mean of
/// that class's block (first index wins ties).
pub fn predicted_class(embedding: &[f32], schema: &AgeClassSchema) -> Result<usize> {
    if embedding.len() != schema.code_len() {
        return Err(shape_err!(
            "embedding of length {}, expected {}",
            embedding.len(),
            schema.code_len()
        ));
    }
    let k = schema.k();
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..schema.n() {
        let m = embedding[i * k..(i + 1) * k].iter().map(|&v| v as f64).sum::<f64>() / k as f64;
        if m > best.1 {
            best = (i, m);
        }
    }
    Ok(best.0)
}

/// Fraction of rows of an `N×(k·n)` embedding whose predicted class equals
/// the target.
pub fn age_roundtrip_metric(embeddings: &Tensor<f32>, targets: &[usize], schema: &AgeClassSchema) -> Result<f64> {
    let n = embeddings.shape()[0];
    if embeddings.shape().len() != 2 || targets.len() != n {
        return Err(shape_err!(
            "{} targets for embeddings {:?}",
            targets.len(),
            embeddings.shape()
        ));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let len = schema.code_len();
    let mut hits = 0;
    for (b, &t) in targets.iter().enumerate() {
        if predicted_class(&embeddings.data()[b * len..(b + 1) * len], schema)? == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Generate `x[b]` at class `targets[b]` (noise-free code) and score the age
/// encoder's reading of the result.
pub fn generated_age_accuracy(
    gen: &Generator<'_>,
    age_encoder: &crate::params::ParamStore<f32>,
    x: &Tensor<f32>,
    targets: &[usize],
) -> Result<f64> {
    let schema = &gen.nets.config.schema;
    let outs = generate_at(gen, x, targets)?;
    let emb = age_embedding(gen.nets, age_encoder, &outs)?;
    age_roundtrip_metric(&emb, targets, schema)
}

fn generate_at(gen: &Generator<'_>, x: &Tensor<f32>, targets: &[usize]) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    if targets.len() != n {
        return Err(shape_err!("{} targets for {n} images", targets.len()));
    }
    let schema = &gen.nets.config.schema;
    let id = gen.identity(x)?;
    let latents = (0..schema.n())
        .map(|i| anchor_latent(gen, i))
        .collect::<Result<Vec<_>>>()?;
    let outs = (0..n)
        .map(|b| gen.decode(&id.batch_item(b), &latents[targets[b]]))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

/// Mean L1 distance between `E_id(x)` and `E_id(G(x, z_t))`.
pub fn identity_consistency(gen: &Generator<'_>, x: &Tensor<f32>, targets: &[usize]) -> Result<ProbeReport> {
    let outs = generate_at(gen, x, targets)?;
    let a = gen.identity(x)?;
    let b = gen.identity(&outs)?;
    let samples = (0..x.shape()[0])
        .map(|i| {
            Ok(BTreeMap::from([(
                "identity_distance".to_string(),
                l1_mean(&a.batch_item(i), &b.batch_item(i))?,
            )]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport::from_samples("identity_consistency", samples))
}

/// Age-code configuration: anchors, block width and jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeConfig {
    pub schema: AgeClassSchema,
    pub sigma: f64,
}

impl Default for CodeConfig {
    fn default() -> Self {
        CodeConfig {
            schema: AgeClassSchema::default(),
            sigma: DEFAULT_SIGMA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    TwoAnchors,
    ThreeAnchors,
    NoNoise,
    SingleElementNoNoise,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::TwoAnchors,
        Ablation::ThreeAnchors,
        Ablation::NoNoise,
        Ablation::SingleElementNoNoise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::None => "base",
            Ablation::TwoAnchors => "two_anchors",
            Ablation::ThreeAnchors => "three_anchors",
            Ablation::NoNoise => "no_noise",
            Ablation::SingleElementNoNoise => "single_element_no_noise",
        }
    }

    pub fn apply(&self, base: &CodeConfig) -> Result<CodeConfig> {
        let k = base.schema.k();
        Ok(match self {
            Ablation::None => base.clone(),
            Ablation::TwoAnchors => CodeConfig {
                schema: AgeClassSchema::parse_ranges("0-2,50-69", k)?,
                sigma: base.sigma,
            },
            Ablation::ThreeAnchors => CodeConfig {
                schema: AgeClassSchema::parse_ranges("0-2,15-19,50-69", k)?,
                sigma: base.sigma,
            },
            Ablation::NoNoise => CodeConfig {
                schema: base.schema.clone(),
                sigma: 0.0,
            },
            Ablation::SingleElementNoNoise => CodeConfig {
                schema: base.schema.with_elements_per_class(1)?,
                sigma: 0.0,
            },
        })
    }
}

/// The four ablation variants of `base`, by name.
pub fn ablation_configs(base: &CodeConfig) -> Result<Vec<(&'static str, CodeConfig)>> {
    Ablation::ALL.iter().map(|a| Ok((a.name(), a.apply(base)?))).collect()
}
