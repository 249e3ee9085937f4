//! The five networks: identity encoder, mapping network, decoder, age
//! encoder and class-conditional discriminator, plus the generator
//! composition `G(x, z) = F(E_id(x), M(z))`.
//!
//! All feature maps are `N×C×H×W`. Canonical parameter names are
//! `<network>.<layer>.<weight|bias>`, e.g. `decoder.styled2.affine.weight`;
//! checkpoints store parameters under exactly these names.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agecode::{AgeClassSchema, AgeCode, DEFAULT_LATENT_DIM};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nnprim::{
    minibatch_stddev, pixel_norm, resample, EqConv, EqLinear, ModConv, ResBlock, Resample, LEAKY_SLOPE, NORM_EPS,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const MAPPING_LAYERS: usize = 8;
pub const RESIDUAL_BLOCKS: usize = 4;
pub const STYLED_BLOCKS: usize = 4;
pub const AGE_ENCODER_DOWNSAMPLES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub schema: AgeClassSchema,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            resolution: 256,
            base_channels: 64,
            latent_dim: DEFAULT_LATENT_DIM,
            schema: AgeClassSchema::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 16 || !r.is_power_of_two() {
            return Err(Error::ConfigGeneral(format!(
                "resolution must be a power of two ≥ 16, got {r}"
            )));
        }
        if self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::ConfigGeneral("channel and latent sizes must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Channels of the identity features (4× base).
    pub fn identity_channels(&self) -> usize {
        4 * self.base_channels
    }

    /// Spatial size of the identity features (resolution / 4).
    pub fn identity_resolution(&self) -> usize {
        self.resolution / 4
    }

    pub fn discriminator_stages(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }
}

/// Named per-layer output shapes collected during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeTrace(pub Vec<(String, Vec<usize>)>);

fn rec<T: Scalar>(trace: &mut Option<&mut ShapeTrace>, g: &Graph<T>, name: &str, v: Var) {
    if let Some(t) = trace.as_deref_mut() {
        t.0.push((name.to_string(), g.shape(v).to_vec()));
    }
}

fn expect_image<T: Scalar>(g: &Graph<T>, x: Var, resolution: usize, who: &str) -> Result<()> {
    match g.shape(x) {
        [_, 3, h, w] if *h == resolution && *w == resolution => Ok(()),
        s => Err(shape_err!(
            "{who}: expected N×3×{resolution}×{resolution} image, got {s:?}"
        )),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEncoder {
    pub resolution: usize,
    pub conv0: EqConv,
    pub down1: EqConv,
    pub down2: EqConv,
    pub blocks: Vec<ResBlock>,
}

impl IdentityEncoder {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let b = cfg.base_channels;
        IdentityEncoder {
            resolution: cfg.resolution,
            conv0: EqConv::new("id_encoder.conv0", 3, b, 7, 1),
            down1: EqConv::new("id_encoder.down1", b, 2 * b, 3, 2),
            down2: EqConv::new("id_encoder.down2", 2 * b, 4 * b, 3, 2),
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|i| ResBlock::new(&format!("id_encoder.res{i}"), 4 * b))
                .collect(),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in [&self.conv0, &self.down1, &self.down2] {
            c.init(store, rng);
        }
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        expect_image(g, x, self.resolution, "identity encoder")?;
        let mut h = x;
        for c in [&self.conv0, &self.down1, &self.down2] {
            h = c.forward(g, p, h)?;
            h = g.relu(h);
            h = pixel_norm(g, h, NORM_EPS)?;
            rec(&mut trace, g, &c.name, h);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, p, h)?;
            rec(&mut trace, g, &format!("id_encoder.res{i}"), h);
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingNetwork {
    pub code_len: usize,
    pub layers: Vec<EqLinear>,
}

impl MappingNetwork {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let code_len = cfg.schema.code_len();
        let layers = (0..MAPPING_LAYERS)
            .map(|i| {
                let fin = if i == 0 { code_len } else { cfg.latent_dim };
                EqLinear::new(format!("mapping.fc{i}"), fin, cfg.latent_dim)
            })
            .collect();
        MappingNetwork { code_len, layers }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    /// `z: N×(k·n) → N×latent_dim`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        match g.shape(z) {
            [_, l] if *l == self.code_len => {}
            s => {
                return Err(shape_err!(
                    "mapping network: expected N×{} age code, got {:?}",
                    self.code_len,
                    s
                ))
            }
        }
        let mut h = pixel_norm(g, z, NORM_EPS)?;
        rec(&mut trace, g, "mapping.input", h);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i != last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            h = pixel_norm(g, h, NORM_EPS)?;
            rec(&mut trace, g, &l.name, h);
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub feature_channels: usize,
    pub feature_resolution: usize,
    pub latent_dim: usize,
    pub styled: Vec<ModConv>,
    pub up: Vec<ModConv>,
    pub to_rgb: EqConv,
}

impl Decoder {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let b = cfg.base_channels;
        let l = cfg.latent_dim;
        Decoder {
            feature_channels: 4 * b,
            feature_resolution: cfg.identity_resolution(),
            latent_dim: l,
            styled: (0..STYLED_BLOCKS)
                .map(|i| ModConv::new(format!("decoder.styled{i}"), 4 * b, 4 * b, 3, l))
                .collect(),
            up: vec![
                ModConv::new("decoder.up0", 4 * b, 2 * b, 3, l),
                ModConv::new("decoder.up1", 2 * b, b, 3, l),
            ],
            to_rgb: EqConv::new("decoder.to_rgb", b, 3, 1, 1).with_gain(1.0),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for m in self.styled.iter().chain(&self.up) {
            m.init(store, rng);
        }
        self.to_rgb.init(store, rng);
    }

    /// `(w_id: N×4b×r/4×r/4, w_age: N×L) → N×3×r×r` in `[−1, 1]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        w_id: Var,
        w_age: Var,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        let (c, r) = (self.feature_channels, self.feature_resolution);
        match g.shape(w_id) {
            [_, cc, h, w] if *cc == c && *h == r && *w == r => {}
            s => {
                return Err(shape_err!(
                    "decoder: expected N×{c}×{r}×{r} identity features, got {s:?}"
                ))
            }
        }
        match (g.shape(w_age), g.shape(w_id)[0]) {
            ([n, l], nb) if *l == self.latent_dim && *n == nb => {}
            (s, _) => return Err(shape_err!("decoder: age latent {s:?} does not match")),
        }
        let mut h = w_id;
        for m in &self.styled {
            h = m.forward(g, p, h, w_age)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            h = pixel_norm(g, h, NORM_EPS)?;
            rec(&mut trace, g, &m.name, h);
        }
        for (i, m) in self.up.iter().enumerate() {
            h = m.forward(g, p, h, w_age)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            h = pixel_norm(g, h, NORM_EPS)?;
            rec(&mut trace, g, &m.name, h);
            h = resample(g, h, Resample::Up)?;
            rec(&mut trace, g, &format!("decoder.upsample{i}"), h);
        }
        h = self.to_rgb.forward(g, p, h)?;
        h = g.tanh(h);
        rec(&mut trace, g, &self.to_rgb.name, h);
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgeEncoder {
    pub resolution: usize,
    pub conv0: EqConv,
    pub downs: Vec<EqConv>,
    pub proj: EqConv,
}

impl AgeEncoder {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let b = cfg.base_channels;
        let downs = (0..AGE_ENCODER_DOWNSAMPLES)
            .map(|i| EqConv::new(format!("age_encoder.down{i}"), b << i, b << (i + 1), 3, 2))
            .collect();
        AgeEncoder {
            resolution: cfg.resolution,
            conv0: EqConv::new("age_encoder.conv0", 3, b, 7, 1),
            downs,
            proj: EqConv::new(
                "age_encoder.proj",
                b << AGE_ENCODER_DOWNSAMPLES,
                cfg.schema.code_len(),
                1,
                1,
            ),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv0.init(store, rng);
        for d in &self.downs {
            d.init(store, rng);
        }
        self.proj.init(store, rng);
    }

    /// `x: N×3×r×r → N×(k·n)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        expect_image(g, x, self.resolution, "age encoder")?;
        let mut h = x;
        for c in std::iter::once(&self.conv0).chain(&self.downs) {
            h = c.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            rec(&mut trace, g, &c.name, h);
        }
        h = self.proj.forward(g, p, h)?;
        rec(&mut trace, g, &self.proj.name, h);
        let [n, c, hh, ww] = <[usize; 4]>::try_from(g.shape(h)).expect("rank-4 feature map");
        let s = g.sum_to(h, &[n, c, 1, 1])?;
        let pooled = g.scale(s, 1.0 / (hh * ww) as f64);
        rec(&mut trace, g, "age_encoder.pool", pooled);
        g.reshape(pooled, &[n, c])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub resolution: usize,
    pub from_rgb: EqConv,
    pub stages: Vec<(EqConv, EqConv)>,
    pub final_conv: EqConv,
    pub out: EqConv,
}

impl Discriminator {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let b = cfg.base_channels;
        let cap = 8 * b;
        let mut c = b;
        let stages = (0..cfg.discriminator_stages())
            .map(|i| {
                let next = (2 * c).min(cap);
                let pair = (
                    EqConv::new(format!("discriminator.stage{i}.conv0"), c, c, 3, 1),
                    EqConv::new(format!("discriminator.stage{i}.conv1"), c, next, 3, 1),
                );
                c = next;
                pair
            })
            .collect();
        Discriminator {
            resolution: cfg.resolution,
            from_rgb: EqConv::new("discriminator.from_rgb", 3, b, 1, 1),
            stages,
            final_conv: EqConv::new("discriminator.final_conv", c + 1, c, 3, 1),
            out: EqConv::new("discriminator.out", c, cfg.schema.n(), 4, 1).with_pad(0),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.from_rgb.init(store, rng);
        for (a, b) in &self.stages {
            a.init(store, rng);
            b.init(store, rng);
        }
        self.final_conv.init(store, rng);
        self.out.init(store, rng);
    }

    /// `x: N×3×r×r → N×n` raw class scores.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        expect_image(g, x, self.resolution, "discriminator")?;
        let mut h = self.from_rgb.forward(g, p, x)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        rec(&mut trace, g, &self.from_rgb.name, h);
        for (i, (a, b)) in self.stages.iter().enumerate() {
            for c in [a, b] {
                h = c.forward(g, p, h)?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
                rec(&mut trace, g, &c.name, h);
            }
            h = resample(g, h, Resample::Down)?;
            rec(&mut trace, g, &format!("discriminator.stage{i}.down"), h);
        }
        h = minibatch_stddev(g, h)?;
        rec(&mut trace, g, "discriminator.mbstd", h);
        h = self.final_conv.forward(g, p, h)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        rec(&mut trace, g, &self.final_conv.name, h);
        h = self.out.forward(g, p, h)?;
        rec(&mut trace, g, &self.out.name, h);
        let n = g.shape(h)[0];
        let classes = g.shape(h)[1];
        g.reshape(h, &[n, classes])
    }
}

/// All five networks for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub config: NetworkConfig,
    pub id_encoder: IdentityEncoder,
    pub mapping: MappingNetwork,
    pub decoder: Decoder,
    pub age_encoder: AgeEncoder,
    pub discriminator: Discriminator,
}

/// Parameters of every network. `generator` holds the identity encoder,
/// mapping network and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub generator: ParamStore<T>,
    pub age_encoder: ParamStore<T>,
    pub discriminator: ParamStore<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn all_finite(&self) -> bool {
        self.generator.all_finite() && self.age_encoder.all_finite() && self.discriminator.all_finite()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            generator: self.generator.cast(),
            age_encoder: self.age_encoder.cast(),
            discriminator: self.discriminator.cast(),
        }
    }
}

/// Tape bindings for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundModel {
    pub generator: Bound,
    pub age_encoder: Bound,
    pub discriminator: Bound,
}

impl Networks {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        Ok(Networks {
            id_encoder: IdentityEncoder::new(&config),
            mapping: MappingNetwork::new(&config),
            decoder: Decoder::new(&config),
            age_encoder: AgeEncoder::new(&config),
            discriminator: Discriminator::new(&config),
            config,
        })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams<T> {
        let mut generator = ParamStore::new();
        self.id_encoder.init(&mut generator, rng);
        self.mapping.init(&mut generator, rng);
        self.decoder.init(&mut generator, rng);
        let mut age_encoder = ParamStore::new();
        self.age_encoder.init(&mut age_encoder, rng);
        let mut discriminator = ParamStore::new();
        self.discriminator.init(&mut discriminator, rng);
        ModelParams {
            generator,
            age_encoder,
            discriminator,
        }
    }

    pub fn identity_encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.id_encoder.forward(g, p, x, None)
    }

    pub fn map_age<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        self.mapping.forward(g, p, z, None)
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, w_id: Var, w_age: Var) -> Result<Var> {
        self.decoder.forward(g, p, w_id, w_age, None)
    }

    pub fn age_encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.age_encoder.forward(g, p, x, None)
    }

    pub fn discriminate<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.discriminator.forward(g, p, x, None)
    }

    /// `G(x, z) = F(E_id(x), M(z))`.
    pub fn generate<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, z: Var) -> Result<Var> {
        let w_id = self.identity_encode(g, p, x)?;
        let w_age = self.map_age(g, p, z)?;
        self.decode(g, p, w_id, w_age)
    }

    /// Stack age codes into an `N×(k·n)` constant.
    pub fn code_batch<T: Scalar>(&self, g: &mut Graph<T>, codes: &[AgeCode]) -> Result<Var> {
        let len = self.config.schema.code_len();
        let mut data = Vec::with_capacity(codes.len() * len);
        for c in codes {
            if c.values.len() != len {
                return Err(shape_err!("age code of length {}, expected {}", c.values.len(), len));
            }
            data.extend(c.values.iter().map(|&v| T::c(v)));
        }
        Ok(g.constant(Tensor::new(vec![codes.len(), len], data)?))
    }
}
