//! The age input space: anchor classes, per-class indicator blocks with
//! Gaussian jitter, and blending between neighbouring anchors.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Noise level of training-time age codes.
pub const DEFAULT_SIGMA: f64 = 0.2;
/// Width of each class block in the age code.
pub const DEFAULT_ELEMENTS_PER_CLASS: usize = 50;
/// Length of the mapped age latent in the reference configuration.
pub const DEFAULT_LATENT_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeClass {
    pub label: String,
    pub low_year: u32,
    pub high_year: u32,
}

impl AgeClass {
    pub fn new(low_year: u32, high_year: u32) -> Self {
        AgeClass {
            label: format!("{low_year}-{high_year}"),
            low_year,
            high_year,
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low_year as f64 + self.high_year as f64)
    }

    pub fn contains(&self, age_years: f64) -> bool {
        age_years >= self.low_year as f64 && age_years <= self.high_year as f64
    }
}

/// Ordered, disjoint anchor classes plus the block width `k` of the code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeClassSchema {
    classes: Vec<AgeClass>,
    elements_per_class: usize,
}

impl Default for AgeClassSchema {
    /// Six anchors: 0–2, 3–6, 7–9, 15–19, 30–39, 50–69, with `k = 50`.
    fn default() -> Self {
        let classes = [(0, 2), (3, 6), (7, 9), (15, 19), (30, 39), (50, 69)]
            .into_iter()
            .map(|(lo, hi)| AgeClass::new(lo, hi))
            .collect();
        AgeClassSchema {
            classes,
            elements_per_class: DEFAULT_ELEMENTS_PER_CLASS,
        }
    }
}

impl AgeClassSchema {
    pub fn new(classes: Vec<AgeClass>, elements_per_class: usize) -> Result<Self> {
        if elements_per_class == 0 {
            return Err(Error::Schema("elements per class must be ≥ 1".into()));
        }
        if classes.len() < 2 {
            return Err(Error::Schema(format!(
                "need at least 2 anchor classes, got {}",
                classes.len()
            )));
        }
        for c in &classes {
            if c.low_year > c.high_year {
                return Err(Error::Schema(format!("class {} has low > high", c.label)));
            }
        }
        for pair in classes.windows(2) {
            if pair[0].high_year >= pair[1].low_year {
                return Err(Error::Schema(format!(
                    "classes {} and {} overlap or are out of order",
                    pair[0].label, pair[1].label
                )));
            }
        }
        Ok(AgeClassSchema {
            classes,
            elements_per_class,
        })
    }

    /// Parse a comma-separated list of `low-high` ranges, e.g. `0-2,50-69`.
    pub fn parse_ranges(spec: &str, elements_per_class: usize) -> Result<Self> {
        let classes = spec
            .split(',')
            .map(|s| {
                let s = s.trim();
                let (lo, hi) = s
                    .split_once('-')
                    .ok_or_else(|| Error::Schema(format!("bad class range `{s}`")))?;
                let lo = lo
                    .trim()
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad class range `{s}`")))?;
                let hi = hi
                    .trim()
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad class range `{s}`")))?;
                Ok(AgeClass::new(lo, hi))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes, elements_per_class)
    }

    /// Inverse of [`parse_ranges`](Self::parse_ranges).
    pub fn ranges_string(&self) -> String {
        self.classes
            .iter()
            .map(|c| format!("{}-{}", c.low_year, c.high_year))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn classes(&self) -> &[AgeClass] {
        &self.classes
    }

    pub fn n(&self) -> usize {
        self.classes.len()
    }

    pub fn k(&self) -> usize {
        self.elements_per_class
    }

    /// Length of an age code, `k·n`.
    pub fn code_len(&self) -> usize {
        self.k() * self.n()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    pub fn with_elements_per_class(&self, k: usize) -> Result<Self> {
        Self::new(self.classes.clone(), k)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::Schema(format!(
                "class index {i} out of range for {} classes",
                self.n()
            )));
        }
        Ok(())
    }
}

/// A point in the age input space.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeCode {
    pub values: Vec<f64>,
    pub source_class: Option<usize>,
}

/// Output of the mapping network.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAgeVector {
    pub values: Vec<f64>,
}

/// Indicator block for class `i`: ones on `k·i .. k·(i+1)`, zeros elsewhere.
pub fn one_hot_block(i: usize, schema: &AgeClassSchema) -> Result<AgeCode> {
    schema.check_index(i)?;
    let k = schema.k();
    let mut values = vec![0.0; schema.code_len()];
    values[k * i..k * (i + 1)].fill(1.0);
    Ok(AgeCode {
        values,
        source_class: Some(i),
    })
}

/// Indicator block for class `i` plus i.i.d. `N(0, sigma²)` jitter.
pub fn sample_age_code<R: Rng + ?Sized>(i: usize, schema: &AgeClassSchema, sigma: f64, rng: &mut R) -> Result<AgeCode> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!("sigma must be finite and ≥ 0, got {sigma}")));
    }
    let mut code = one_hot_block(i, schema)?;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
        for v in &mut code.values {
            *v += normal.sample(rng);
        }
    }
    Ok(code)
}

/// `(1−alpha)·a + alpha·b`.
pub fn interpolate_latent(a: &LatentAgeVector, b: &LatentAgeVector, alpha: f64) -> Result<LatentAgeVector> {
    if a.values.len() != b.values.len() {
        return Err(shape_err!(
            "latent lengths differ: {} vs {}",
            a.values.len(),
            b.values.len()
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    // Exact endpoints regardless of rounding in the affine form.
    let values = if alpha == 0.0 {
        a.values.clone()
    } else if alpha == 1.0 {
        b.values.clone()
    } else {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| (1.0 - alpha) * x + alpha * y)
            .collect()
    };
    Ok(LatentAgeVector { values })
}

/// A target age expressed as a blend of two neighbouring anchors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorBlend {
    pub lower: usize,
    pub upper: usize,
    pub alpha: f64,
}

/// Map a target age in years onto the anchors: an anchor hit gives that
/// class alone; otherwise `alpha` is the linear position of the age between
/// the midpoints of the enclosing anchors.
pub fn target_age_to_anchor_blend(age_years: f64, schema: &AgeClassSchema) -> Result<AnchorBlend> {
    let classes = schema.classes();
    let first = &classes[0];
    let last = &classes[classes.len() - 1];
    if !age_years.is_finite() || age_years < 0.0 {
        return Err(Error::Argument(format!("age {age_years} must be ≥ 0")));
    }
    if age_years > last.high_year as f64 {
        return Err(Error::Argument(format!(
            "age {age_years} is above the last anchor ({}); extrapolation is not supported",
            last.label
        )));
    }
    if age_years < first.low_year as f64 {
        return Err(Error::Argument(format!(
            "age {age_years} is below the first anchor ({})",
            first.label
        )));
    }
    if let Some(i) = classes.iter().position(|c| c.contains(age_years)) {
        return Ok(AnchorBlend {
            lower: i,
            upper: i,
            alpha: 0.0,
        });
    }
    let upper = classes
        .iter()
        .position(|c| c.low_year as f64 > age_years)
        .expect("age lies below the last anchor's high year");
    let lower = upper - 1;
    let (m0, m1) = (classes[lower].midpoint(), classes[upper].midpoint());
    let alpha = ((age_years - m0) / (m1 - m0)).clamp(0.0, 1.0);
    Ok(AnchorBlend { lower, upper, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schema() {
        let s = AgeClassSchema::default();
        assert_eq!(s.n(), 6);
        assert_eq!(s.k(), 50);
        assert_eq!(s.code_len(), 300);
        assert_eq!(s.ranges_string(), "0-2,3-6,7-9,15-19,30-39,50-69");
        let mids: Vec<f64> = s.classes().iter().map(AgeClass::midpoint).collect();
        assert_eq!(mids, vec![1.0, 4.5, 8.0, 17.0, 34.5, 59.5]);
    }

    #[test]
    fn schema_validation() {
        assert!(AgeClassSchema::parse_ranges("0-2", 50).is_err());
        assert!(AgeClassSchema::parse_ranges("0-2,2-5", 50).is_err());
        assert!(AgeClassSchema::parse_ranges("5-9,0-2", 50).is_err());
        assert!(AgeClassSchema::parse_ranges("0-2,3-5", 0).is_err());
        assert!(AgeClassSchema::parse_ranges("0-2,x", 1).is_err());
        let s = AgeClassSchema::parse_ranges("0-2, 50-69", 50).unwrap();
        assert_eq!(s.class_index("50-69"), Some(1));
    }

    #[test]
    fn one_hot_examples() {
        let s = AgeClassSchema::default();
        let z = one_hot_block(0, &s).unwrap();
        assert_eq!(z.values.len(), 300);
        assert!(z.values[..50].iter().all(|&v| v == 1.0));
        assert!(z.values[50..].iter().all(|&v| v == 0.0));
        let z = one_hot_block(5, &s).unwrap();
        assert!(z.values[250..].iter().all(|&v| v == 1.0));
        assert!(z.values[..250].iter().all(|&v| v == 0.0));
        let tiny = AgeClassSchema::parse_ranges("0-2,3-6", 1).unwrap();
        assert_eq!(one_hot_block(1, &tiny).unwrap().values, vec![0.0, 1.0]);
        assert!(matches!(one_hot_block(6, &s), Err(Error::Schema(_))));
    }

    #[test]
    fn zero_sigma_collapses_to_indicator() {
        let s = AgeClassSchema::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..6 {
            assert_eq!(
                sample_age_code(i, &s, 0.0, &mut rng).unwrap().values,
                one_hot_block(i, &s).unwrap().values
            );
        }
        assert!(matches!(
            sample_age_code(0, &s, -0.1, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn equal_seeds_give_identical_codes() {
        let s = AgeClassSchema::default();
        let a = sample_age_code(3, &s, DEFAULT_SIGMA, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_age_code(3, &s, DEFAULT_SIGMA, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interpolation_examples() {
        let a = LatentAgeVector { values: vec![0.0; 4] };
        let b = LatentAgeVector { values: vec![1.0; 4] };
        assert_eq!(interpolate_latent(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_latent(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate_latent(&a, &b, 0.5).unwrap().values, vec![0.5; 4]);
        assert!(matches!(interpolate_latent(&a, &b, 1.5), Err(Error::Argument(_))));
        let short = LatentAgeVector { values: vec![0.0; 3] };
        assert!(matches!(interpolate_latent(&a, &short, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn blend_examples() {
        let s = AgeClassSchema::default();
        let b = target_age_to_anchor_blend(1.0, &s).unwrap();
        assert_eq!((b.lower, b.upper, b.alpha), (0, 0, 0.0));
        let b = target_age_to_anchor_blend(4.5, &s).unwrap();
        assert_eq!((b.lower, b.upper, b.alpha), (1, 1, 0.0));
        let b = target_age_to_anchor_blend(12.5, &s).unwrap();
        assert_eq!((b.lower, b.upper), (2, 3));
        assert!((b.alpha - 0.5).abs() < 1e-12);
        assert!(target_age_to_anchor_blend(69.0, &s).is_ok());
        assert!(matches!(target_age_to_anchor_blend(70.5, &s), Err(Error::Argument(_))));
        assert!(target_age_to_anchor_blend(-1.0, &s).is_err());
    }

    proptest! {
        #[test]
        fn indicator_has_k_ones(i in 0usize..6, k in 1usize..64) {
            let s = AgeClassSchema::default().with_elements_per_class(k).unwrap();
            let z = one_hot_block(i, &s).unwrap();
            prop_assert_eq!(z.values.iter().filter(|&&v| v != 0.0).count(), k);
            prop_assert!(z.values.iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn interpolation_is_affine(
            a in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
            alpha in 0.0f64..=1.0,
        ) {
            let (wa, wb) = (LatentAgeVector { values: a.clone() }, LatentAgeVector { values: b.clone() });
            let ab = interpolate_latent(&wa, &wb, alpha).unwrap();
            let ba = interpolate_latent(&wb, &wa, alpha).unwrap();
            for j in 0..8 {
                prop_assert!((ab.values[j] + ba.values[j] - (a[j] + b[j])).abs() < 1e-12);
            }
        }

        #[test]
        fn blend_is_monotone(x in 0.0f64..69.0, y in 0.0f64..69.0) {
            let s = AgeClassSchema::default();
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            let a = target_age_to_anchor_blend(lo, &s).unwrap();
            let b = target_age_to_anchor_blend(hi, &s).unwrap();
            prop_assert!((a.lower, a.alpha) <= (b.lower, b.alpha));
        }
    }
}
