//! Training loop: class-pair sampling, alternating discriminator and
//! generator updates, the learning-rate schedule, generator EMA and run
//! artifacts (loss log, sample grids, checkpoints).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agecode::{one_hot_block, sample_age_code, AgeCode, DEFAULT_SIGMA};
use crate::checkpoint::{self, Checkpoint, RngState};
use crate::error::{shape_err, Error, Result};
use crate::graph::Graph;
use crate::imageio;
use crate::inference::Generator;
use crate::losses::{
    discriminator_objective, generator_objective, DiscriminatorComponents, GeneratorBatch, GeneratorComponents,
    LossWeights,
};
use crate::networks::{BoundModel, ModelParams, NetworkConfig, Networks};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Male => "male",
            Gender::Female => "female",
        })
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "male" => Ok(Gender::Male),
            "female" => Ok(Gender::Female),
            other => Err(Error::ConfigGeneral(format!(
                "gender must be male or female, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epoch → multiplicative factor, applied cumulatively once reached.
    pub lr_decay: BTreeMap<usize, f64>,
    pub mapping_lr_factor: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub gender: Gender,
    /// Standard deviation of the jitter added to training age codes.
    pub code_sigma: f64,
    /// Score `x_t` as a second real image (slot `t`) in the discriminator step.
    pub both_reals: bool,
    pub weights: LossWeights,
    /// Stop after this many steps regardless of `epochs`.
    pub max_steps: Option<u64>,
    pub log_every: u64,
    pub sample_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            epochs: 400,
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay: BTreeMap::from([(50, 0.5), (100, 0.5)]),
            mapping_lr_factor: 0.01,
            ema_decay: 0.999,
            seed: 0,
            gender: Gender::Male,
            code_sigma: DEFAULT_SIGMA,
            both_reals: true,
            weights: LossWeights::default(),
            max_steps: None,
            log_every: 1,
            sample_every: 1000,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigGeneral(m));
        if self.batch_size < 1 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.mapping_lr_factor > 0.0) {
            return bad("mapping_lr_factor must be positive".into());
        }
        if !(self.code_sigma >= 0.0) || !self.code_sigma.is_finite() {
            return bad("code_sigma must be finite and ≥ 0".into());
        }
        if self.lr_decay.values().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return bad("lr_decay factors must be positive".into());
        }
        self.weights.validate()
    }
}

/// `(lr_main, lr_mapping)` for a zero-based epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> (f64, f64) {
    let factor: f64 = config
        .lr_decay
        .iter()
        .filter(|(m, _)| epoch >= **m)
        .map(|(_, f)| f)
        .product();
    let main = config.lr * factor;
    (main, main * config.mapping_lr_factor)
}

/// Source class uniform over all classes, target uniform over the rest.
pub fn sample_class_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::ConfigGeneral(format!("need at least two classes, got {n}")));
    }
    let s = rng.random_range(0..n);
    let t = rng.random_range(0..n - 1);
    Ok((s, if t >= s { t + 1 } else { t }))
}

/// `ema ← decay·ema + (1−decay)·live`.
pub fn update_ema<T: Scalar>(ema: &mut ParamStore<T>, live: &ParamStore<T>, decay: f64) -> Result<()> {
    if !ema.same_layout(live) {
        return Err(shape_err!("EMA and live parameters differ in layout"));
    }
    for ((_, e), (_, l)) in ema.iter_mut().zip(live.iter()) {
        for (a, &b) in e.data_mut().iter_mut().zip(l.data()) {
            *a = T::c(decay * a.f64() + (1.0 - decay) * b.f64());
        }
    }
    Ok(())
}

/// Adam with bias correction and no weight decay. Moments are keyed by
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new<'a>(
        layout: impl IntoIterator<Item = (&'a String, &'a Tensor<f32>)>,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let mut m = ParamStore::new();
        for (name, p) in layout {
            m.insert(name.clone(), Tensor::zeros(p.shape().to_vec()));
        }
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// Apply one step to every named parameter; `lr_for` picks the rate of
    /// each parameter.
    pub fn step(
        &mut self,
        params: &mut [&mut ParamStore<f32>],
        grads: &BTreeMap<String, Tensor<f32>>,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for store in params.iter_mut() {
            for (name, p) in store.iter_mut() {
                let grad = grads.get(name).ok_or_else(|| shape_err!("no gradient for `{name}`"))?;
                let m = self.m.get_mut(name)?;
                let v = self.v.get_mut(name)?;
                if grad.shape() != p.shape() || m.shape() != p.shape() {
                    return Err(shape_err!("optimizer shape drift at `{name}`"));
                }
                let lr = lr_for(name);
                for (((w, &gr), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    let gr = gr as f64;
                    let m1 = self.beta1 * *mi as f64 + (1.0 - self.beta1) * gr;
                    let v1 = self.beta2 * *vi as f64 + (1.0 - self.beta2) * gr * gr;
                    *mi = m1 as f32;
                    *vi = v1 as f32;
                    let upd = lr * (m1 / c1) / ((v1 / c2).sqrt() + self.eps);
                    *w = (*w as f64 - upd) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Images grouped by class, each `1×3×R×R` in `[−1, 1]`.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    classes: Vec<Vec<Tensor<f32>>>,
}

impl TrainingSet {
    pub fn new(classes: Vec<Vec<Tensor<f32>>>) -> Result<Self> {
        let shape = classes
            .iter()
            .flatten()
            .next()
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| Error::Data("training set is empty".into()))?;
        for (i, c) in classes.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Data(format!("class {i} has no training images")));
            }
            if let Some(t) = c.iter().find(|t| t.shape() != shape.as_slice()) {
                return Err(Error::Data(format!(
                    "image shape {:?} differs from {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
            return Err(Error::Data(format!("images must be 1×3×R×R, got {shape:?}")));
        }
        Ok(TrainingSet { classes })
    }

    pub fn n(&self) -> usize {
        self.classes.len()
    }

    pub fn resolution(&self) -> usize {
        self.classes[0][0].shape()[2]
    }

    pub fn class(&self, i: usize) -> &[Tensor<f32>] {
        &self.classes[i]
    }

    /// One epoch visits `n ×` the smallest class size images.
    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        let min = self.classes.iter().map(Vec::len).min().unwrap_or(0);
        ((min * self.n()) / batch_size.max(1)).max(1) as u64
    }
}

/// One iteration's sampled inputs.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub s: Vec<usize>,
    pub t: Vec<usize>,
    pub x_s: Tensor<f32>,
    pub x_t: Tensor<f32>,
    pub z_s: Vec<AgeCode>,
    pub z_t: Vec<AgeCode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub lr_mapping: f64,
    pub generator: GeneratorComponents,
    pub generator_total: f64,
    pub discriminator: DiscriminatorComponents,
    pub discriminator_total: f64,
}

impl StepReport {
    pub fn all_finite(&self) -> bool {
        let g = &self.generator;
        let d = &self.discriminator;
        [
            g.adv,
            g.rec,
            g.cyc,
            g.id,
            g.age,
            self.generator_total,
            d.real,
            d.fake,
            d.r1,
            self.discriminator_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub ema: ParamStore<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

pub struct Trainer {
    pub nets: Networks,
    pub config: TrainConfig,
    pub state: TrainState,
    pub steps_per_epoch: u64,
}

impl Trainer {
    /// Fresh parameters drawn from the config seed; the same generator then
    /// drives batch sampling.
    pub fn new(net_config: NetworkConfig, config: TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(net_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params: ModelParams<f32> = nets.init(&mut rng);
        let opt_g = Adam::new(
            params.generator.iter().chain(params.age_encoder.iter()),
            config.beta1,
            config.beta2,
            config.adam_eps,
        );
        let opt_d = Adam::new(params.discriminator.iter(), config.beta1, config.beta2, config.adam_eps);
        Ok(Trainer {
            state: TrainState {
                ema: params.generator.clone(),
                params,
                opt_g,
                opt_d,
                step: 0,
                rng,
            },
            nets,
            config,
            steps_per_epoch: steps_per_epoch.max(1),
        })
    }

    pub fn epoch(&self) -> usize {
        (self.state.step / self.steps_per_epoch) as usize
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.config.epochs as u64 * self.steps_per_epoch;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn sample_batch(&mut self, data: &TrainingSet) -> Result<StepBatch> {
        let schema = &self.nets.config.schema;
        if data.n() != schema.n() {
            return Err(Error::Data(format!(
                "training set has {} classes, schema has {}",
                data.n(),
                schema.n()
            )));
        }
        if data.resolution() != self.nets.config.resolution {
            return Err(Error::Data(format!(
                "training images are {}², model expects {}²",
                data.resolution(),
                self.nets.config.resolution
            )));
        }
        let rng = &mut self.state.rng;
        let b = self.config.batch_size;
        let (mut s, mut t, mut xs, mut xt, mut zs, mut zt) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..b {
            let (si, ti) = sample_class_pair(schema.n(), rng)?;
            let cs = data.class(si);
            let ct = data.class(ti);
            xs.push(cs[rng.random_range(0..cs.len())].clone());
            xt.push(ct[rng.random_range(0..ct.len())].clone());
            zs.push(sample_age_code(si, schema, self.config.code_sigma, rng)?);
            zt.push(sample_age_code(ti, schema, self.config.code_sigma, rng)?);
            s.push(si);
            t.push(ti);
        }
        Ok(StepBatch {
            s,
            t,
            x_s: Tensor::stack(&xs)?,
            x_t: Tensor::stack(&xt)?,
            z_s: zs,
            z_t: zt,
        })
    }

    /// Sample a batch and run one full iteration.
    pub fn train_step(&mut self, data: &TrainingSet) -> Result<StepReport> {
        let batch = self.sample_batch(data)?;
        self.train_step_on(&batch)
    }

    /// Discriminator update, generator update, EMA update. Nothing is
    /// applied once a non-finite loss shows up.
    pub fn train_step_on(&mut self, batch: &StepBatch) -> Result<StepReport> {
        let epoch = self.epoch();
        let (lr, lr_mapping) = lr_at(epoch, &self.config);
        let w = self.config.weights;
        let nets = &self.nets;
        let params = &mut self.state.params;
        let mut report = StepReport {
            step: self.state.step + 1,
            epoch,
            lr,
            lr_mapping,
            generator: GeneratorComponents::default(),
            generator_total: f64::NAN,
            discriminator: DiscriminatorComponents::default(),
            discriminator_total: f64::NAN,
        };

        // y_gen from the current generator, used as the detached fake.
        let y_gen = {
            let mut g = Graph::new();
            let p = params.generator.bind(&mut g, false);
            let x = g.constant(batch.x_s.clone());
            let z = nets.code_batch(&mut g, &batch.z_t)?;
            let y = nets.generate(&mut g, &p, x, z)?;
            g.value(y).clone()
        };

        let d_grads = {
            let mut g = Graph::new();
            let bound = BoundModel {
                discriminator: params.discriminator.bind(&mut g, true),
                ..Default::default()
            };
            let (real, real_classes) = if self.config.both_reals {
                let both = Tensor::stack(&[batch.x_s.clone(), batch.x_t.clone()])?;
                (both, [batch.s.as_slice(), batch.t.as_slice()].concat())
            } else {
                (batch.x_s.clone(), batch.s.clone())
            };
            let real = g.param(real);
            let fake = g.constant(y_gen);
            let obj = discriminator_objective(&mut g, nets, &bound, real, &real_classes, fake, &batch.t, &w)?;
            report.discriminator = obj.components(&g);
            report.discriminator_total = g.value(obj.total).item() as f64;
            if !report.discriminator_total.is_finite() {
                return Err(abort(&report));
            }
            let names: Vec<String> = params.discriminator.names().cloned().collect();
            let vars = bound.discriminator.vars_for(&names)?;
            let grads = g.grad(obj.total, &vars, false)?;
            names
                .into_iter()
                .zip(grads)
                .map(|(n, v)| (n, g.value(v).clone()))
                .collect::<BTreeMap<_, _>>()
        };
        self.state
            .opt_d
            .step(&mut [&mut params.discriminator], &d_grads, |_| lr)?;

        let g_grads = {
            let mut g = Graph::new();
            let bound = BoundModel {
                generator: params.generator.bind(&mut g, true),
                age_encoder: params.age_encoder.bind(&mut g, true),
                discriminator: params.discriminator.bind(&mut g, false),
            };
            let x = g.constant(batch.x_s.clone());
            let gb = GeneratorBatch {
                x,
                s: &batch.s,
                t: &batch.t,
                z_s: &batch.z_s,
                z_t: &batch.z_t,
            };
            let obj = generator_objective(&mut g, nets, &bound, &gb, &w)?;
            report.generator = obj.components(&g);
            report.generator_total = g.value(obj.total).item() as f64;
            if !report.all_finite() {
                return Err(abort(&report));
            }
            let names: Vec<String> = params
                .generator
                .names()
                .chain(params.age_encoder.names())
                .cloned()
                .collect();
            let mut vars = bound.generator.vars_for(params.generator.names())?;
            vars.extend(bound.age_encoder.vars_for(params.age_encoder.names())?);
            let grads = g.grad(obj.total, &vars, false)?;
            names
                .into_iter()
                .zip(grads)
                .map(|(n, v)| (n, g.value(v).clone()))
                .collect::<BTreeMap<_, _>>()
        };
        self.state.opt_g.step(
            &mut [&mut params.generator, &mut params.age_encoder],
            &g_grads,
            |name| if name.starts_with("mapping.") { lr_mapping } else { lr },
        )?;

        update_ema(&mut self.state.ema, &params.generator, self.config.ema_decay)?;
        if !params.all_finite() {
            return Err(abort(&report));
        }
        self.state.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.nets.config.clone(),
            train: self.config.clone(),
            step: self.state.step,
            steps_per_epoch: self.steps_per_epoch,
            rng: RngState::capture(&self.state.rng),
            params: self.state.params.clone(),
            ema: self.state.ema.clone(),
            opt_g: self.state.opt_g.clone(),
            opt_d: self.state.opt_d.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        let nets = Networks::new(ckpt.network)?;
        Ok(Trainer {
            nets,
            config: ckpt.train,
            steps_per_epoch: ckpt.steps_per_epoch,
            state: TrainState {
                params: ckpt.params,
                ema: ckpt.ema,
                opt_g: ckpt.opt_g,
                opt_d: ckpt.opt_d,
                step: ckpt.step,
                rng: ckpt.rng.restore(),
            },
        })
    }

    /// Replace the training state by a checkpoint of the same model
    /// configuration. On error nothing changes.
    pub fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        if ckpt.network != self.nets.config {
            return Err(Error::Checkpoint(format!(
                "checkpoint network config {:?} does not match {:?}",
                ckpt.network, self.nets.config
            )));
        }
        *self = Trainer::from_checkpoint(ckpt)?;
        Ok(())
    }

    /// Inputs in the first column, then one column per anchor class,
    /// rendered with the EMA weights and noise-free codes.
    pub fn sample_grid(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let gen = Generator::new(&self.nets, &self.state.ema);
        let schema = &self.nets.config.schema;
        let outs = (0..schema.n())
            .map(|i| gen.generate(inputs, &one_hot_block(i, schema)?))
            .collect::<Result<Vec<_>>>()?;
        let mut tiles = Vec::new();
        for b in 0..inputs.shape()[0] {
            tiles.push(inputs.batch_item(b));
            tiles.extend(outs.iter().map(|o| o.batch_item(b)));
        }
        imageio::grid(&tiles, schema.n() + 1)
    }
}

fn abort(report: &StepReport) -> Error {
    Error::Numeric(format!("non-finite loss, aborting: {}", report.to_json_line()))
}

/// Paths inside a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.lsck")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:08}.lsck"))
    }

    pub fn sample(&self, step: u64) -> PathBuf {
        self.root.join("samples").join(format!("step_{step:08}.png"))
    }
}

/// Train until `total_steps`, writing the loss log, sample grids and
/// checkpoints under `layout`. A run that starts at step 0 truncates the
/// log; a resumed run appends to it. The final checkpoint is always written.
pub fn run_training(
    trainer: &mut Trainer,
    data: &TrainingSet,
    layout: &RunLayout,
    sample_inputs: Option<&Tensor<f32>>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let log_path = layout.log();
    let file = if trainer.state.step == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut reports = Vec::new();
    let total = trainer.total_steps();
    let cfg = trainer.config.clone();
    while trainer.state.step < total {
        let report = trainer.train_step(data);
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                if let Error::Numeric(msg) = &e {
                    writeln!(log, "{{\"abort\":{}}}", serde_json::Value::String(msg.clone()))
                        .map_err(|e| Error::io(&log_path, e))?;
                }
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                return Err(e);
            }
        };
        let step = report.step;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == total) {
            writeln!(log, "{}", report.to_json_line()).map_err(|e| Error::io(&log_path, e))?;
        }
        if let Some(inputs) = sample_inputs.filter(|_| cfg.sample_every > 0 && step % cfg.sample_every == 0) {
            imageio::save_png(&layout.sample(step), &trainer.sample_grid(inputs)?)?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            checkpoint::save_checkpoint(&layout.step_checkpoint(step), &trainer.checkpoint())?;
        }
        on_step(&report);
        reports.push(report);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save_checkpoint(&layout.checkpoint(), &trainer.checkpoint())?;
    Ok(reports)
}
