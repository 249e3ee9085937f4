//! Forward-only helpers over a fixed generator parameter set (usually the
//! EMA shadow).

use crate::agecode::{interpolate_latent, one_hot_block, target_age_to_anchor_blend, AgeCode, LatentAgeVector};
use crate::error::{shape_err, Result};
use crate::graph::Graph;
use crate::networks::Networks;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub struct Generator<'a> {
    pub nets: &'a Networks,
    pub params: &'a ParamStore<f32>,
}

impl<'a> Generator<'a> {
    pub fn new(nets: &'a Networks, params: &'a ParamStore<f32>) -> Self {
        Generator { nets, params }
    }

    /// `E_id(x)` for an `N×3×R×R` batch.
    pub fn identity(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.nets.identity_encode(&mut g, &p, xv)?;
        Ok(g.value(h).clone())
    }

    /// `M(z)`.
    pub fn latent(&self, code: &AgeCode) -> Result<LatentAgeVector> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = self.nets.code_batch(&mut g, std::slice::from_ref(code))?;
        let w = self.nets.map_age(&mut g, &p, z)?;
        Ok(LatentAgeVector {
            values: g.value(w).data().iter().map(|&v| v as f64).collect(),
        })
    }

    /// `F(w_id, w_age)` with the same age latent for every batch element.
    pub fn decode(&self, w_id: &Tensor<f32>, w_age: &LatentAgeVector) -> Result<Tensor<f32>> {
        let n = w_id.shape()[0];
        let dim = self.nets.config.latent_dim;
        if w_age.values.len() != dim {
            return Err(shape_err!(
                "age latent of length {}, expected {dim}",
                w_age.values.len()
            ));
        }
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            data.extend(w_age.values.iter().map(|&v| v as f32));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let id = g.constant(w_id.clone());
        let w = g.constant(Tensor::new(vec![n, dim], data)?);
        let y = self.nets.decode(&mut g, &p, id, w)?;
        Ok(g.value(y).clone())
    }

    /// Noise-free latent of anchor class `i`.
    pub fn class_latent(&self, i: usize) -> Result<LatentAgeVector> {
        self.latent(&one_hot_block(i, &self.nets.config.schema)?)
    }

    /// Latent for an age in years: a blend of the two neighbouring anchors'
    /// latents, or one anchor's latent when the age falls inside it.
    pub fn age_latent(&self, age_years: f64) -> Result<LatentAgeVector> {
        let b = target_age_to_anchor_blend(age_years, &self.nets.config.schema)?;
        let lo = self.class_latent(b.lower)?;
        if b.lower == b.upper {
            return Ok(lo);
        }
        interpolate_latent(&lo, &self.class_latent(b.upper)?, b.alpha)
    }

    /// `G(x, z)` with one code for the whole batch.
    pub fn generate(&self, x: &Tensor<f32>, code: &AgeCode) -> Result<Tensor<f32>> {
        let w_id = self.identity(x)?;
        let w_age = self.latent(code)?;
        self.decode(&w_id, &w_age)
    }
}

/// `E_age(x)` as an `N×(k·n)` tensor.
pub fn age_embedding(nets: &Networks, params: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let a = nets.age_encode(&mut g, &p, xv)?;
    Ok(g.value(a).clone())
}
