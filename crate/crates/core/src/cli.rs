//! Command-line surface. Every command writes a config echo next to its
//! outputs; failures surface as [`Error`]s whose
//! [`exit_code`](Error::exit_code) the binary returns.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataprep::{
    build_manifest, compute_alignment_box, crop_and_resize, format_manifest, load_labels, load_mask, mask_background,
    parse_manifest, synthetic_disks, ManifestEntry, Palette, SPLIT_BOUNDARY,
};
use crate::error::{Error, Result};
use crate::evalprobe::{
    generated_age_accuracy, identity_consistency, latent_linearity_probe, lifespan_sweep, write_frames, ProbeReport,
};
use crate::imageio;
use crate::inference::Generator;
use crate::networks::Networks;
use crate::tensor::Tensor;
use crate::trainer::{run_training, Gender, RunLayout, Trainer, TrainingSet};

pub const ECHO_FILE: &str = "config_echo.txt";

#[derive(Parser, Debug)]
#[command(
    name = "lifespan",
    version,
    about = "Age transformation GAN: data preparation, training and inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_name: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    Linearity,
    Roundtrip,
    Identity,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Prune labelled records, crop and mask images, and write manifests.
    PrepareData {
        #[arg(long)]
        labels: PathBuf,
        /// Base directory for relative image paths (default: the label file's directory).
        #[arg(long)]
        images_dir: Option<PathBuf>,
        /// Base directory for relative mask paths (default: the label file's directory).
        #[arg(long)]
        masks_dir: Option<PathBuf>,
        /// Palette file; background and cloth labels are removed.
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Only prune and count; write manifests without processed images.
        #[arg(long)]
        counts_only: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the synthetic disks dataset with a training manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 60)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "male")]
        gender: Gender,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model from a manifest.
    Train {
        #[arg(long)]
        gender: Gender,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a checkpoint of the same network configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render one image at a target class or age.
    Transform {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Anchor class label, e.g. `50-69`.
        #[arg(long, conflicts_with = "age", required_unless_present = "age")]
        target: Option<String>,
        /// Target age in years; blends the two neighbouring anchors.
        #[arg(long)]
        age: Option<f64>,
        #[arg(long)]
        gender: Gender,
        #[arg(long)]
        out: PathBuf,
        /// Use live weights instead of the EMA generator.
        #[arg(long)]
        live: bool,
    },
    /// Render an interpolated sequence across all anchors.
    Lifespan {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 24)]
        frames_per_gap: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        live: bool,
    },
    /// Run an analysis probe and write a JSON report.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        probe: ProbeKind,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        live: bool,
    },
}

/// Defaults, then the file, then the environment, then flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    cfg.apply_overrides(&args.set)?;
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = &args.run_name {
        cfg.apply_overrides(&[format!("run_name={n}")])?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn echo_from_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let cfg = RunConfig {
        network: ckpt.network.clone(),
        train: ckpt.train.clone(),
        ..RunConfig::default()
    };
    cfg.write_echo(&dir.join(ECHO_FILE))
}

fn dir_of(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Load the images of one gender's manifest entries grouped by anchor.
pub fn load_training_set(entries: &[ManifestEntry], gender: Gender, cfg: &RunConfig) -> Result<TrainingSet> {
    let schema = &cfg.network.schema;
    let mut classes = vec![Vec::new(); schema.n()];
    for e in entries.iter().filter(|e| e.gender == gender) {
        let Some(c) = schema.class_index(&e.class_label) else {
            continue;
        };
        let path = e
            .image
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("entry {} has no image path", e.image_id)))?;
        let img = imageio::load_png(path)?;
        if img.shape()[2..] != [cfg.network.resolution; 2] {
            return Err(Error::Data(format!(
                "{} is {}×{}, the model expects {}²",
                path.display(),
                img.shape()[3],
                img.shape()[2],
                cfg.network.resolution
            )));
        }
        classes[c].push(img);
    }
    for (c, imgs) in classes.iter().enumerate() {
        if imgs.is_empty() {
            return Err(Error::Data(format!(
                "no {gender} training images for class {}",
                schema.classes()[c].label
            )));
        }
    }
    TrainingSet::new(classes)
}

pub fn cmd_prepare_data(
    labels: &Path,
    images_dir: Option<&Path>,
    masks_dir: Option<&Path>,
    palette: Option<&Path>,
    out_dir: &Path,
    counts_only: bool,
    cfg: &RunConfig,
) -> Result<()> {
    require_file(labels, "label file")?;
    cfg.write_echo(&out_dir.join(ECHO_FILE))?;
    let palette = match palette {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Palette::with_removed(Palette::parse(&text)?, &["background", "cloth"])?
        }
        None => Palette::default(),
    };
    let label_dir = dir_of(labels);
    let mut records = load_labels(labels)?;
    for r in &mut records {
        // re-root relative paths when a base directory was given
        if let (Some(base), Some(p)) = (images_dir, r.image.as_mut()) {
            if let Ok(rel) = p.strip_prefix(&label_dir) {
                *p = base.join(rel);
            }
        }
        if let (Some(base), Some(p)) = (masks_dir, r.semantic_mask.as_mut()) {
            if let Ok(rel) = p.strip_prefix(&label_dir) {
                *p = base.join(rel);
            }
        }
    }
    let mut m = build_manifest(&records, &cfg.network.schema, &cfg.prune, SPLIT_BOUNDARY)?;
    let by_id: HashMap<u64, _> = records.iter().map(|r| (r.image_id, r)).collect();
    let res = cfg.network.resolution;
    for entry in m.train.iter_mut().chain(m.test.iter_mut()) {
        if counts_only {
            entry.image = None;
            continue;
        }
        let r = by_id[&entry.image_id];
        let (Some(lm), Some(src)) = (&r.landmarks, &r.image) else {
            return Err(Error::Data(format!(
                "record {} lacks landmarks or an image path",
                r.image_id
            )));
        };
        let mut img = imageio::load_png(src)?;
        if let Some(mp) = &r.semantic_mask {
            let (labels, dims) = load_mask(mp)?;
            img = mask_background(&img, &labels, dims, &palette)?;
        }
        let bx = compute_alignment_box(lm)?;
        let out = crop_and_resize(&img, &bx, res, &cfg.crop)?;
        let rel = PathBuf::from("images").join(format!("{:05}.png", r.image_id));
        imageio::save_png(&out_dir.join(&rel), &out)?;
        entry.image = Some(rel);
    }
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("train_manifest.txt", format_manifest(&m.train))?;
    write("test_manifest.txt", format_manifest(&m.test))?;
    write("counts.tsv", m.count_table(&cfg.network.schema))?;
    let summary = serde_json::json!({
        "records": records.len(),
        "kept": m.kept,
        "pruned": m.pruned,
        "reasons": m.reason_counts,
        "train": m.train.len(),
        "test": m.test.len(),
    });
    write(
        "prune_report.json",
        serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    Ok(())
}

pub fn cmd_synth(
    out_dir: &Path,
    per_class: usize,
    resolution: usize,
    seed: u64,
    gender: Gender,
    cfg: &RunConfig,
) -> Result<()> {
    cfg.write_echo(&out_dir.join(ECHO_FILE))?;
    let schema = &cfg.network.schema;
    let data = synthetic_disks(schema.n(), per_class, resolution, seed);
    let mut entries = Vec::new();
    for (c, imgs) in data.iter().enumerate() {
        for (i, img) in imgs.iter().enumerate() {
            let rel = PathBuf::from("images").join(format!("c{c}_{i:04}.png"));
            imageio::save_png(&out_dir.join(&rel), img)?;
            entries.push(ManifestEntry {
                image_id: entries.len() as u64,
                gender,
                class_label: schema.classes()[c].label.clone(),
                image: Some(rel),
            });
        }
    }
    let p = out_dir.join("train_manifest.txt");
    std::fs::write(&p, format_manifest(&entries)).map_err(|e| Error::io(&p, e))
}

pub fn cmd_train(
    gender: Gender,
    manifest: Option<&Path>,
    resume: Option<&Path>,
    cfg: &RunConfig,
) -> Result<Vec<crate::trainer::StepReport>> {
    let mut cfg = cfg.clone();
    cfg.train.gender = gender;
    if let Some(m) = manifest {
        cfg.data_manifest = Some(m.to_path_buf());
    }
    let manifest = cfg
        .data_manifest
        .clone()
        .ok_or_else(|| Error::ConfigGeneral("no training manifest (data.manifest or --manifest)".into()))?;
    require_file(&manifest, "manifest")?;
    if let Some(r) = resume {
        require_file(r, "checkpoint")?;
    }
    let layout = RunLayout::new(cfg.run_dir());
    cfg.write_echo(&layout.root.join(ECHO_FILE))?;

    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let entries = parse_manifest(&text, &dir_of(&manifest))?;
    let data = load_training_set(&entries, gender, &cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.network != cfg.network {
                return Err(Error::Checkpoint(
                    "checkpoint network config differs from the run config".into(),
                ));
            }
            if ckpt.train.gender != gender {
                return Err(Error::ConfigGeneral(format!(
                    "checkpoint was trained on {} images, --gender is {gender}",
                    ckpt.train.gender
                )));
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.config = cfg.train.clone();
            t
        }
        None => {
            let spe = data.steps_per_epoch(cfg.train.batch_size);
            Trainer::new(cfg.network.clone(), cfg.train.clone(), spe)?
        }
    };
    let samples = (0..data.n().min(6))
        .map(|c| data.class(c)[0].clone())
        .collect::<Vec<_>>();
    let samples = Tensor::stack(&samples)?;
    run_training(&mut trainer, &data, &layout, Some(&samples), |_| {})
}

fn load_model(checkpoint: &Path) -> Result<(Checkpoint, Networks)> {
    require_file(checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let nets = Networks::new(ckpt.network.clone())?;
    Ok((ckpt, nets))
}

fn load_input(path: &Path, nets: &Networks) -> Result<Tensor<f32>> {
    require_file(path, "image")?;
    let img = imageio::load_png(path)?;
    let r = nets.config.resolution;
    if img.shape()[2..] != [r, r] {
        return Err(Error::Data(format!(
            "{} is {}×{}, the model expects {r}×{r}",
            path.display(),
            img.shape()[3],
            img.shape()[2]
        )));
    }
    Ok(img)
}

pub fn cmd_transform(
    checkpoint: &Path,
    image: &Path,
    target: Option<&str>,
    age: Option<f64>,
    gender: Gender,
    out: &Path,
    live: bool,
) -> Result<()> {
    require_file(image, "image")?;
    let (ckpt, nets) = load_model(checkpoint)?;
    if ckpt.train.gender != gender {
        return Err(Error::ConfigGeneral(format!(
            "checkpoint is a {} model, --gender is {gender}",
            ckpt.train.gender
        )));
    }
    echo_from_checkpoint(&ckpt, &dir_of(out))?;
    let schema = &nets.config.schema;
    let params = if live { &ckpt.params.generator } else { &ckpt.ema };
    let gen = Generator::new(&nets, params);
    let x = load_input(image, &nets)?;
    let w = match (target, age) {
        (Some(label), None) => {
            let i = schema
                .class_index(label)
                .ok_or_else(|| Error::Schema(format!("unknown target class `{label}`")))?;
            gen.class_latent(i)?
        }
        (None, Some(years)) => gen.age_latent(years)?,
        _ => return Err(Error::Argument("give exactly one of --target and --age".into())),
    };
    let y = gen.decode(&gen.identity(&x)?, &w)?;
    imageio::save_png(out, &y)
}

pub fn cmd_lifespan(
    checkpoint: &Path,
    image: &Path,
    frames_per_gap: usize,
    out_dir: &Path,
    live: bool,
) -> Result<Vec<PathBuf>> {
    require_file(image, "image")?;
    let (ckpt, nets) = load_model(checkpoint)?;
    echo_from_checkpoint(&ckpt, out_dir)?;
    let params = if live { &ckpt.params.generator } else { &ckpt.ema };
    let gen = Generator::new(&nets, params);
    let x = load_input(image, &nets)?;
    let frames = lifespan_sweep(&gen, &x, frames_per_gap)?;
    write_frames(&frames, out_dir)
}

pub fn cmd_probe(
    checkpoint: &Path,
    probe: ProbeKind,
    images: &[PathBuf],
    out_dir: &Path,
    live: bool,
) -> Result<ProbeReport> {
    for i in images {
        require_file(i, "image")?;
    }
    let (ckpt, nets) = load_model(checkpoint)?;
    echo_from_checkpoint(&ckpt, out_dir)?;
    let params = if live { &ckpt.params.generator } else { &ckpt.ema };
    let gen = Generator::new(&nets, params);
    let xs = images
        .iter()
        .map(|p| load_input(p, &nets))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::stack(&xs)?;
    let n = nets.config.schema.n();
    // every image at every anchor
    let all = || -> Result<(Tensor<f32>, Vec<usize>)> {
        let reps: Vec<_> = (0..n).flat_map(|_| xs.iter().cloned()).collect();
        let targets = (0..n).flat_map(|t| std::iter::repeat_n(t, xs.len())).collect();
        Ok((Tensor::stack(&reps)?, targets))
    };
    let mut report = match probe {
        ProbeKind::Linearity => latent_linearity_probe(&gen, &x, Some(out_dir))?,
        ProbeKind::Roundtrip => {
            let (xr, targets) = all()?;
            let acc = generated_age_accuracy(&gen, &ckpt.params.age_encoder, &xr, &targets)?;
            let mut r = ProbeReport::from_samples("age_roundtrip", Vec::new());
            r.aggregates.insert("accuracy".into(), acc);
            r.aggregates.insert("pairs".into(), targets.len() as f64);
            r
        }
        ProbeKind::Identity => {
            let (xr, targets) = all()?;
            identity_consistency(&gen, &xr, &targets)?
        }
    };
    report
        .notes
        .push(format!("weights: {}", if live { "live" } else { "ema" }));
    report.write(&out_dir.join("report.json"))?;
    Ok(report)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData {
            labels,
            images_dir,
            masks_dir,
            palette,
            out_dir,
            counts_only,
            cfg,
        } => {
            let cfg = resolve_config(&cfg)?;
            cmd_prepare_data(
                &labels,
                images_dir.as_deref(),
                masks_dir.as_deref(),
                palette.as_deref(),
                &out_dir,
                counts_only,
                &cfg,
            )
        }
        Command::Synth {
            out_dir,
            per_class,
            resolution,
            seed,
            gender,
            cfg,
        } => cmd_synth(&out_dir, per_class, resolution, seed, gender, &resolve_config(&cfg)?),
        Command::Train {
            gender,
            manifest,
            resume,
            cfg,
        } => {
            let cfg = resolve_config(&cfg)?;
            let reports = cmd_train(gender, manifest.as_deref(), resume.as_deref(), &cfg)?;
            if let Some(last) = reports.last() {
                println!("{}", last.to_json_line());
            }
            Ok(())
        }
        Command::Transform {
            checkpoint,
            image,
            target,
            age,
            gender,
            out,
            live,
        } => cmd_transform(&checkpoint, &image, target.as_deref(), age, gender, &out, live),
        Command::Lifespan {
            checkpoint,
            image,
            frames_per_gap,
            out_dir,
            live,
        } => cmd_lifespan(&checkpoint, &image, frames_per_gap, &out_dir, live).map(|_| ()),
        Command::Probe {
            checkpoint,
            probe,
            images,
            out_dir,
            live,
        } => {
            let r = cmd_probe(&checkpoint, probe, &images, &out_dir, live)?;
            println!("{}", serde_json::to_string(&r.aggregates).expect("json"));
            Ok(())
        }
    }
}

/// One-line JSON error record for stderr.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({
        "error": e.kind(),
        "exit_code": e.exit_code(),
        "message": e.to_string(),
    })
    .to_string()
}
