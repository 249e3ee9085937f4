//! Training objectives.
//!
//! The adversarial terms use the non-saturating softplus form with an R1
//! penalty on real images; the discriminator is class-conditional, so a
//! real image of class `s` only scores through output `s` and a generated
//! image of class `t` only through output `t`. Reconstruction-style terms are
//! L1 distances reduced by the mean.

use serde::{Deserialize, Serialize};

use crate::agecode::AgeCode;
use crate::error::{shape_err, Error, Result};
use crate::graph::{softplus, Graph, Var};
use crate::networks::{BoundModel, Networks};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub lambda_age: f64,
    pub r1_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 10.0,
            lambda_cyc: 10.0,
            lambda_id: 1.0,
            lambda_age: 1.0,
            r1_gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_id", self.lambda_id),
            ("lambda_age", self.lambda_age),
            ("r1_gamma", self.r1_gamma),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::ConfigGeneral(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} is not finite: {v}")))
    }
}

/// Discriminator loss for one real/fake pair of class-slot scores:
/// `softplus(−D_s(x)) + softplus(D_t(y_gen)) + γ/2·‖∇_x D_s(x)‖²`.
pub fn adv_loss_d(score_real_s: f64, score_fake_t: f64, grad_norm_sq_real: f64, weights: &LossWeights) -> Result<f64> {
    finite("real score", score_real_s)?;
    finite("fake score", score_fake_t)?;
    finite("gradient norm", grad_norm_sq_real)?;
    if grad_norm_sq_real < 0.0 {
        return Err(Error::Argument("squared gradient norm must be ≥ 0".into()));
    }
    Ok(softplus(-score_real_s) + softplus(score_fake_t) + 0.5 * weights.r1_gamma * grad_norm_sq_real)
}

/// Non-saturating generator loss `softplus(−D_t(y_gen))`.
pub fn adv_loss_g(score_fake_t: f64) -> Result<f64> {
    Ok(softplus(-finite("fake score", score_fake_t)?))
}

/// Mean absolute elementwise difference.
pub fn l1_mean<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("l1: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .sum();
    Ok(s / a.numel().max(1) as f64)
}

/// Scalar loss components of one generator evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorComponents {
    pub adv: f64,
    pub rec: f64,
    pub cyc: f64,
    pub id: f64,
    pub age: f64,
}

/// `adv + λ_rec·rec + λ_cyc·cyc + λ_id·id + λ_age·age`.
pub fn total_generator_loss(c: &GeneratorComponents, w: &LossWeights) -> f64 {
    c.adv + w.lambda_rec * c.rec + w.lambda_cyc * c.cyc + w.lambda_id * c.id + w.lambda_age * c.age
}

/// Mean L1 distance on the tape.
pub fn l1_mean_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err!("l1: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    let d = g.sub(a, b)?;
    let ad = g.abs(d);
    g.mean_all(ad)
}

/// Self-reconstruction loss `‖x − y_rec‖₁`.
pub fn loss_rec<T: Scalar>(g: &mut Graph<T>, x: Var, y_rec: Var) -> Result<Var> {
    l1_mean_var(g, x, y_rec)
}

/// Cycle loss `‖x − y_cyc‖₁`.
pub fn loss_cyc<T: Scalar>(g: &mut Graph<T>, x: Var, y_cyc: Var) -> Result<Var> {
    l1_mean_var(g, x, y_cyc)
}

/// Identity-feature loss `‖E_id(x) − E_id(y_gen)‖₁` on precomputed features.
pub fn loss_id<T: Scalar>(g: &mut Graph<T>, id_x: Var, id_gen: Var) -> Result<Var> {
    l1_mean_var(g, id_x, id_gen)
}

/// Age-vector loss `‖E_age(x) − z_s‖₁ + ‖E_age(y_gen) − z_t‖₁`.
pub fn loss_age<T: Scalar>(g: &mut Graph<T>, age_x: Var, z_s: Var, age_gen: Var, z_t: Var) -> Result<Var> {
    let a = l1_mean_var(g, age_x, z_s)?;
    let b = l1_mean_var(g, age_gen, z_t)?;
    g.add(a, b)
}

/// Pick column `classes[b]` of row `b` from `N×n` scores; returns `N×1`.
pub fn select_scores<T: Scalar>(g: &mut Graph<T>, scores: Var, classes: &[usize]) -> Result<Var> {
    let [n, k] = <[usize; 2]>::try_from(g.shape(scores))
        .map_err(|_| shape_err!("scores must be N×n, got {:?}", g.shape(scores)))?;
    if classes.len() != n {
        return Err(shape_err!("{} class labels for {} scores", classes.len(), n));
    }
    let mut mask = Tensor::zeros(vec![n, k]);
    for (b, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::Schema(format!("class {c} out of range for {k} outputs")));
        }
        mask.data_mut()[b * k + c] = T::one();
    }
    let m = g.mul_mask(scores, mask)?;
    g.sum_to(m, &[n, 1])
}

/// R1 penalty `γ/2 · mean_b ‖∇_x Σ scores‖²`. `x` must be a gradient leaf
/// and `score_sum` a scalar computed from it; the result stays on the tape
/// so it can be differentiated with respect to the discriminator.
pub fn r1_penalty<T: Scalar>(g: &mut Graph<T>, x: Var, score_sum: Var, gamma: f64) -> Result<Var> {
    let n = g.shape(x)[0] as f64;
    let gx = g.grad(score_sum, &[x], true)?[0];
    let sq = g.square(gx);
    let s = g.sum_all(sq)?;
    Ok(g.scale(s, 0.5 * gamma / n))
}

/// The three generator passes of one iteration plus every loss term.
#[derive(Clone, Copy, Debug)]
pub struct TriplePass {
    pub y_gen: Var,
    pub y_rec: Var,
    pub y_cyc: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorObjective {
    pub pass: TriplePass,
    pub adv: Var,
    pub rec: Var,
    pub cyc: Var,
    pub id: Var,
    pub age: Var,
    pub total: Var,
}

impl GeneratorObjective {
    pub fn components<T: Scalar>(&self, g: &Graph<T>) -> GeneratorComponents {
        let v = |x: Var| g.value(x).item().f64();
        GeneratorComponents {
            adv: v(self.adv),
            rec: v(self.rec),
            cyc: v(self.cyc),
            id: v(self.id),
            age: v(self.age),
        }
    }
}

/// Inputs of one generator evaluation. `s[b] ≠ t[b]` in training.
pub struct GeneratorBatch<'a> {
    pub x: Var,
    pub s: &'a [usize],
    pub t: &'a [usize],
    pub z_s: &'a [AgeCode],
    pub z_t: &'a [AgeCode],
}

/// Run `y_gen = G(x, z_t)`, `y_rec = G(x, z_s)`, `y_cyc = G(y_gen, z_s)` and
/// assemble the weighted generator objective.
pub fn generator_objective<T: Scalar>(
    g: &mut Graph<T>,
    nets: &Networks,
    p: &BoundModel,
    batch: &GeneratorBatch<'_>,
    w: &LossWeights,
) -> Result<GeneratorObjective> {
    let n = g.shape(batch.x)[0];
    if [batch.s.len(), batch.t.len(), batch.z_s.len(), batch.z_t.len()] != [n; 4] {
        return Err(shape_err!("generator batch: labels and codes must all have length {n}"));
    }
    let z_s = nets.code_batch(g, batch.z_s)?;
    let z_t = nets.code_batch(g, batch.z_t)?;

    let id_x = nets.identity_encode(g, &p.generator, batch.x)?;
    let w_s = nets.map_age(g, &p.generator, z_s)?;
    let w_t = nets.map_age(g, &p.generator, z_t)?;
    let y_gen = nets.decode(g, &p.generator, id_x, w_t)?;
    let y_rec = nets.decode(g, &p.generator, id_x, w_s)?;
    let id_gen = nets.identity_encode(g, &p.generator, y_gen)?;
    let y_cyc = nets.decode(g, &p.generator, id_gen, w_s)?;

    let scores = nets.discriminate(g, &p.discriminator, y_gen)?;
    let sel = select_scores(g, scores, batch.t)?;
    let neg = g.neg(sel);
    let sp = g.softplus(neg);
    let adv = g.mean_all(sp)?;

    let rec = loss_rec(g, batch.x, y_rec)?;
    let cyc = loss_cyc(g, batch.x, y_cyc)?;
    let id = loss_id(g, id_x, id_gen)?;
    let age_x = nets.age_encode(g, &p.age_encoder, batch.x)?;
    let age_gen = nets.age_encode(g, &p.age_encoder, y_gen)?;
    let age = loss_age(g, age_x, z_s, age_gen, z_t)?;

    let mut total = adv;
    for (term, lambda) in [
        (rec, w.lambda_rec),
        (cyc, w.lambda_cyc),
        (id, w.lambda_id),
        (age, w.lambda_age),
    ] {
        let weighted = g.scale(term, lambda);
        total = g.add(total, weighted)?;
    }
    Ok(GeneratorObjective {
        pass: TriplePass { y_gen, y_rec, y_cyc },
        adv,
        rec,
        cyc,
        id,
        age,
        total,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorObjective {
    pub real: Var,
    pub fake: Var,
    pub r1: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorComponents {
    pub real: f64,
    pub fake: f64,
    pub r1: f64,
}

impl DiscriminatorObjective {
    pub fn components<T: Scalar>(&self, g: &Graph<T>) -> DiscriminatorComponents {
        let v = |x: Var| g.value(x).item().f64();
        DiscriminatorComponents {
            real: v(self.real),
            fake: v(self.fake),
            r1: v(self.r1),
        }
    }
}

/// `mean softplus(−D_c(real)) + mean softplus(D_t(fake)) + R1(real)`.
///
/// `real` must be a gradient leaf (for R1); `fake` should be detached from
/// the generator.
pub fn discriminator_objective<T: Scalar>(
    g: &mut Graph<T>,
    nets: &Networks,
    p: &BoundModel,
    real: Var,
    real_classes: &[usize],
    fake: Var,
    fake_classes: &[usize],
    w: &LossWeights,
) -> Result<DiscriminatorObjective> {
    if !g.requires_grad(real) {
        return Err(Error::Argument("real images must be a gradient leaf for R1".into()));
    }
    let rs = nets.discriminate(g, &p.discriminator, real)?;
    let rsel = select_scores(g, rs, real_classes)?;
    let rneg = g.neg(rsel);
    let rsp = g.softplus(rneg);
    let real_term = g.mean_all(rsp)?;

    let rsum = g.sum_all(rsel)?;
    let r1 = r1_penalty(g, real, rsum, w.r1_gamma)?;

    let fs = nets.discriminate(g, &p.discriminator, fake)?;
    let fsel = select_scores(g, fs, fake_classes)?;
    let fsp = g.softplus(fsel);
    let fake_term = g.mean_all(fsp)?;

    let t = g.add(real_term, fake_term)?;
    let total = g.add(t, r1)?;
    Ok(DiscriminatorObjective {
        real: real_term,
        fake: fake_term,
        r1,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn adversarial_examples() {
        let w = LossWeights {
            r1_gamma: 0.0,
            ..Default::default()
        };
        assert!((adv_loss_d(0.0, 0.0, 0.0, &w).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        assert!(adv_loss_d(1e6, -1e6, 0.0, &w).unwrap() < 1e-12);
        assert!((adv_loss_g(0.0).unwrap() - LN_2).abs() < 1e-12);
        assert!(adv_loss_g(1e6).unwrap() < 1e-12);
        // linear asymptote with slope 1
        let (a, b) = (adv_loss_g(-100.0).unwrap(), adv_loss_g(-101.0).unwrap());
        assert!((b - a - 1.0).abs() < 1e-12);
        assert!(matches!(adv_loss_g(f64::NAN), Err(Error::Numeric(_))));
        assert!(matches!(
            adv_loss_d(f64::INFINITY, 0.0, 0.0, &w),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::<f64>::full(vec![2, 3], 0.5);
        let b = Tensor::<f64>::full(vec![2, 3], 0.25);
        assert_eq!(l1_mean(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_mean(&a, &b).unwrap(), 0.25);
        let (ca, cb) = (a.map(|v| -3.0 * v), b.map(|v| -3.0 * v));
        assert!((l1_mean(&ca, &cb).unwrap() - 0.75).abs() < 1e-15);
        assert!(l1_mean(&a, &Tensor::zeros(vec![3, 2])).is_err());

        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b));
        let l = l1_mean_var(&mut g, va, vb).unwrap();
        assert_eq!(g.value(l).item(), 0.25);
        for f in [loss_rec::<f64>, loss_cyc::<f64>, loss_id::<f64>] {
            let z = f(&mut g, va, va).unwrap();
            assert_eq!(g.value(z).item(), 0.0);
        }
        let z = loss_age(&mut g, va, va, vb, vb).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        let z = loss_age(&mut g, va, vb, va, vb).unwrap();
        assert_eq!(g.value(z).item(), 0.5);
    }

    #[test]
    fn total_loss_weighting() {
        let ones = GeneratorComponents {
            adv: 1.0,
            rec: 1.0,
            cyc: 1.0,
            id: 1.0,
            age: 1.0,
        };
        assert_eq!(total_generator_loss(&ones, &LossWeights::default()), 23.0);
        let zero = LossWeights {
            lambda_rec: 0.0,
            lambda_cyc: 0.0,
            lambda_id: 0.0,
            lambda_age: 0.0,
            r1_gamma: 10.0,
        };
        assert_eq!(total_generator_loss(&ones, &zero), 1.0);
        let perfect = GeneratorComponents {
            adv: 0.7,
            ..Default::default()
        };
        assert_eq!(total_generator_loss(&perfect, &LossWeights::default()), 0.7);
        // linear in each λ
        let c = GeneratorComponents {
            adv: 0.3,
            rec: 0.2,
            cyc: 0.5,
            id: 0.1,
            age: 0.4,
        };
        let base = LossWeights::default();
        let f = |l: f64| total_generator_loss(&c, &LossWeights { lambda_cyc: l, ..base });
        assert!((f(2.0) - 2.0 * f(1.0) + f(0.0)).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            lambda_id: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn r1_on_linear_discriminator() {
        for &(a, gamma) in &[(0.5f64, 10.0f64), (-2.25, 1.0), (3.0, 0.5)] {
            let mut g = Graph::<f64>::new();
            let x = g.param(Tensor::from_f64(vec![1, 1], &[0.8]).unwrap());
            let y = g.scale(x, a);
            let s = g.sum_all(y).unwrap();
            let r1 = r1_penalty(&mut g, x, s, gamma).unwrap();
            assert_eq!(g.value(r1).item(), 0.5 * gamma * a * a);
        }
    }

    #[test]
    fn score_selection() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let sel = select_scores(&mut g, s, &[2, 0]).unwrap();
        assert_eq!(g.value(sel).data(), &[3.0, 4.0]);
        assert!(select_scores(&mut g, s, &[3, 0]).is_err());
        assert!(select_scores(&mut g, s, &[0]).is_err());
    }
}
