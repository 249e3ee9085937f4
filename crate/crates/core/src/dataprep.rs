//! Dataset curation: label records, pruning, landmark-oriented crops,
//! semantic-mask background removal and train/test manifests.
//!
//! # Label file
//!
//! ```text
//! # lifespan-labels v1
//! id=17 cluster=30-39 age_conf=0.98 gender=male gender_conf=0.99 yaw=-3.1 pitch=2 glasses=none occ_left=3 occ_right=5 e_l=101,120 e_r=155,119 m_l=110,180 m_r=148,181 image=img/00017.png mask=seg/00017.png
//! ```
//!
//! One record per line, whitespace-separated `key=value` pairs in any
//! order. Blank lines and lines starting with `#` after the header are
//! ignored. Landmarks and paths may be omitted for records that are only
//! counted, never cropped. Paths must not contain whitespace; relative paths
//! resolve against the label file's directory.
//!
//! # Manifest
//!
//! ```text
//! # lifespan-manifest v1
//! id=17 gender=male class=30-39 image=images/00017.png
//! ```
//!
//! # Palette
//!
//! Semantic masks are single-channel 8-bit images whose values index the
//! 19-entry palette below (`id name` per line in a palette file).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agecode::AgeClassSchema;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::trainer::Gender;

pub const LABELS_HEADER: &str = "# lifespan-labels v1";
pub const MANIFEST_HEADER: &str = "# lifespan-manifest v1";
pub const PALETTE_HEADER: &str = "# lifespan-palette v1";

/// The ten labelled age clusters.
pub const AGE_CLUSTERS: [&str; 10] = [
    "0-2", "3-6", "7-9", "10-14", "15-19", "20-29", "30-39", "40-49", "50-69", "70+",
];

/// First image id of the test split.
pub const SPLIT_BOUNDARY: u64 = 69_000;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glasses {
    None,
    Normal,
    Dark,
}

impl FromStr for Glasses {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "noglasses" => Ok(Glasses::None),
            "normal" | "readingglasses" => Ok(Glasses::Normal),
            "dark" | "sunglasses" => Ok(Glasses::Dark),
            _ => Err(Error::Data(format!("unknown glasses value `{s}`"))),
        }
    }
}

impl fmt::Display for Glasses {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Glasses::None => "none",
            Glasses::Normal => "normal",
            Glasses::Dark => "dark",
        })
    }
}

/// Eye corners and mouth corners in pixel coordinates (pixel centres at
/// `i + 0.5`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub eye_left: Point,
    pub eye_right: Point,
    pub mouth_left: Point,
    pub mouth_right: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: u64,
    pub age_cluster: String,
    pub age_confidence: f64,
    pub gender: Gender,
    pub gender_confidence: f64,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub glasses: Glasses,
    pub eye_occlusion_left: f64,
    pub eye_occlusion_right: f64,
    pub landmarks: Option<Landmarks>,
    pub image: Option<PathBuf>,
    pub semantic_mask: Option<PathBuf>,
}

impl DatasetRecord {
    /// A record with every attribute at its most permissive value.
    pub fn nominal(image_id: u64, age_cluster: &str, gender: Gender) -> Self {
        DatasetRecord {
            image_id,
            age_cluster: age_cluster.to_string(),
            age_confidence: 1.0,
            gender,
            gender_confidence: 1.0,
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            glasses: Glasses::None,
            eye_occlusion_left: 0.0,
            eye_occlusion_right: 0.0,
            landmarks: None,
            image: None,
            semantic_mask: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.image_id;
        if !AGE_CLUSTERS.contains(&self.age_cluster.as_str()) {
            return Err(Error::Data(format!(
                "record {id}: unknown age cluster `{}`",
                self.age_cluster
            )));
        }
        for (name, v) in [
            ("age_conf", self.age_confidence),
            ("gender_conf", self.gender_confidence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("record {id}: {name} {v} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("occ_left", self.eye_occlusion_left),
            ("occ_right", self.eye_occlusion_right),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Data(format!("record {id}: {name} {v} outside [0, 100]")));
            }
        }
        if !self.yaw_deg.is_finite() || !self.pitch_deg.is_finite() {
            return Err(Error::Data(format!("record {id}: non-finite head pose")));
        }
        Ok(())
    }
}

fn parse_point(s: &str) -> Option<Point> {
    let (x, y) = s.split_once(',')?;
    Some([x.trim().parse().ok()?, y.trim().parse().ok()?])
}

fn parse_record_line(line: &str, lineno: usize, base: &Path) -> Result<DatasetRecord> {
    let mut kv = BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("labels line {lineno}: token `{tok}` is not key=value")))?;
        if kv.insert(k, v).is_some() {
            return Err(Error::Data(format!("labels line {lineno}: duplicate key `{k}`")));
        }
    }
    let known = [
        "id",
        "cluster",
        "age_conf",
        "gender",
        "gender_conf",
        "yaw",
        "pitch",
        "glasses",
        "occ_left",
        "occ_right",
        "e_l",
        "e_r",
        "m_l",
        "m_r",
        "image",
        "mask",
    ];
    if let Some(k) = kv.keys().find(|k| !known.contains(k)) {
        return Err(Error::Data(format!("labels line {lineno}: unknown key `{k}`")));
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Data(format!("labels line {lineno}: missing `{k}`")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Data(format!("labels line {lineno}: `{k}` is not a number")))
    };
    let pt = |k: &str| -> Result<Option<Point>> {
        kv.get(k)
            .map(|v| parse_point(v).ok_or_else(|| Error::Data(format!("labels line {lineno}: `{k}` must be x,y"))))
            .transpose()
    };
    let lm = [pt("e_l")?, pt("e_r")?, pt("m_l")?, pt("m_r")?];
    let landmarks = match lm {
        [Some(a), Some(b), Some(c), Some(d)] => Some(Landmarks {
            eye_left: a,
            eye_right: b,
            mouth_left: c,
            mouth_right: d,
        }),
        [None, None, None, None] => None,
        _ => {
            return Err(Error::Data(format!(
                "labels line {lineno}: landmarks must be given all together"
            )))
        }
    };
    let path = |k: &str| kv.get(k).map(|p| base.join(p));
    let rec = DatasetRecord {
        image_id: get("id")?
            .parse()
            .map_err(|_| Error::Data(format!("labels line {lineno}: bad id")))?,
        age_cluster: get("cluster")?.to_string(),
        age_confidence: num("age_conf")?,
        gender: get("gender")?
            .parse()
            .map_err(|_| Error::Data(format!("labels line {lineno}: bad gender")))?,
        gender_confidence: num("gender_conf")?,
        yaw_deg: num("yaw")?,
        pitch_deg: num("pitch")?,
        glasses: get("glasses")?.parse()?,
        eye_occlusion_left: num("occ_left")?,
        eye_occlusion_right: num("occ_right")?,
        landmarks,
        image: path("image"),
        semantic_mask: path("mask"),
    };
    rec.validate()?;
    Ok(rec)
}

/// Parse a label file. `base` resolves relative paths.
pub fn parse_labels(text: &str, base: &Path) -> Result<Vec<DatasetRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LABELS_HEADER => {}
        _ => return Err(Error::Data(format!("label file must start with `{LABELS_HEADER}`"))),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| parse_record_line(l, i + 1, base))
        .collect()
}

pub fn load_labels(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path.parent().unwrap_or(Path::new("")))
}

/// Serialize records in the label format (paths written as given).
pub fn format_labels(records: &[DatasetRecord]) -> String {
    let mut out = format!("{LABELS_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "id={} cluster={} age_conf={} gender={} gender_conf={} yaw={} pitch={} glasses={} occ_left={} occ_right={}",
            r.image_id,
            r.age_cluster,
            r.age_confidence,
            r.gender,
            r.gender_confidence,
            r.yaw_deg,
            r.pitch_deg,
            r.glasses,
            r.eye_occlusion_left,
            r.eye_occlusion_right
        ));
        if let Some(l) = &r.landmarks {
            for (k, p) in [
                ("e_l", l.eye_left),
                ("e_r", l.eye_right),
                ("m_l", l.mouth_left),
                ("m_r", l.mouth_right),
            ] {
                out.push_str(&format!(" {k}={},{}", p[0], p[1]));
            }
        }
        if let Some(p) = &r.image {
            out.push_str(&format!(" image={}", p.display()));
        }
        if let Some(p) = &r.semantic_mask {
            out.push_str(&format!(" mask={}", p.display()));
        }
        out.push('\n');
    }
    out
}

/// Import the public FFHQ-Aging attribute table (CSV with a header row).
/// Columns are located by name; landmarks and paths are left empty.
pub fn parse_ffhq_aging_csv(text: &str) -> Result<Vec<DatasetRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("label table header: {e}")))?
        .clone();
    let col = |names: &[&str]| {
        names
            .iter()
            .find_map(|n| headers.iter().position(|h| h.eq_ignore_ascii_case(n)))
            .ok_or_else(|| Error::Data(format!("label table lacks a `{}` column", names[0])))
    };
    let c_id = col(&["image_number", "image_id", "id"])?;
    let c_age = col(&["age_group", "age_cluster"])?;
    let c_age_conf = col(&["age_group_confidence", "age_confidence"])?;
    let c_gender = col(&["gender"])?;
    let c_gender_conf = col(&["gender_confidence"])?;
    let c_yaw = col(&["head_yaw", "yaw"])?;
    let c_pitch = col(&["head_pitch", "pitch"])?;
    let c_glasses = col(&["glasses"])?;
    let c_left = col(&["left_eye_occluded", "eye_occlusion_left", "left_eye_occlusion"])?;
    let c_right = col(&["right_eye_occluded", "eye_occlusion_right", "right_eye_occlusion"])?;

    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("label table row {}: {e}", row + 2)))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            field(c)
                .parse()
                .map_err(|_| Error::Data(format!("label table row {}: `{}` is not a number", row + 2, field(c))))
        };
        let cluster = match field(c_age) {
            "70-120" => "70+".to_string(),
            other => other.to_string(),
        };
        let r = DatasetRecord {
            image_id: num(c_id)? as u64,
            age_cluster: cluster,
            age_confidence: num(c_age_conf)?,
            gender: field(c_gender)
                .to_ascii_lowercase()
                .parse()
                .map_err(|_| Error::Data(format!("label table row {}: bad gender", row + 2)))?,
            gender_confidence: num(c_gender_conf)?,
            yaw_deg: num(c_yaw)?,
            pitch_deg: num(c_pitch)?,
            glasses: field(c_glasses).parse()?,
            eye_occlusion_left: num(c_left)?,
            eye_occlusion_right: num(c_right)?,
            landmarks: None,
            image: None,
            semantic_mask: None,
        };
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

// ---------------------------------------------------------------- pruning

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneThresholds {
    pub min_gender_confidence: f64,
    pub min_age_confidence: f64,
    pub max_abs_yaw: f64,
    pub max_abs_pitch: f64,
    pub prune_dark_glasses: bool,
    /// Pruned when either eye exceeds this occlusion score.
    pub max_single_eye_occlusion: f64,
    /// Pruned when both eyes exceed this occlusion score.
    pub max_both_eyes_occlusion: f64,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        PruneThresholds {
            min_gender_confidence: 0.66,
            min_age_confidence: 0.6,
            max_abs_yaw: 40.0,
            max_abs_pitch: 30.0,
            prune_dark_glasses: true,
            max_single_eye_occlusion: 90.0,
            max_both_eyes_occlusion: 50.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    GenderConfidence,
    AgeConfidence,
    Yaw,
    Pitch,
    DarkGlasses,
    EyeOcclusion,
    BothEyesOcclusion,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneDecision {
    pub keep: bool,
    pub reasons: Vec<PruneReason>,
}

/// Every rule that fires for `r`; the record is kept iff none does.
pub fn prune_record(r: &DatasetRecord, th: &PruneThresholds) -> PruneDecision {
    use PruneReason::*;
    let (l, rr) = (r.eye_occlusion_left, r.eye_occlusion_right);
    let rules = [
        (r.gender_confidence < th.min_gender_confidence, GenderConfidence),
        (r.age_confidence < th.min_age_confidence, AgeConfidence),
        (r.yaw_deg.abs() > th.max_abs_yaw, Yaw),
        (r.pitch_deg.abs() > th.max_abs_pitch, Pitch),
        (th.prune_dark_glasses && r.glasses == Glasses::Dark, DarkGlasses),
        (l.max(rr) > th.max_single_eye_occlusion, EyeOcclusion),
        (l.min(rr) > th.max_both_eyes_occlusion, BothEyesOcclusion),
    ];
    let reasons: Vec<_> = rules.iter().filter(|(hit, _)| *hit).map(|(_, why)| *why).collect();
    PruneDecision {
        keep: reasons.is_empty(),
        reasons,
    }
}

// -------------------------------------------------------------- alignment

/// Oriented square crop region; corners ordered `c−x−y, c−x+y, c+x+y, c+x−y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBox {
    pub corners: [Point; 4],
}

impl AlignmentBox {
    pub fn center(&self) -> Point {
        let c = &self.corners;
        [(c[0][0] + c[2][0]) / 2.0, (c[0][1] + c[2][1]) / 2.0]
    }

    pub fn side(&self) -> f64 {
        dist(self.corners[0], self.corners[3])
    }

    /// Axis-aligned box covering `[x0, x0+w] × [y0, y0+h]` with square
    /// orientation; `w` and `h` may differ for resampling checks.
    pub fn axis_aligned(x0: f64, y0: f64, w: f64, h: f64) -> Self {
        AlignmentBox {
            corners: [[x0, y0], [x0, y0 + h], [x0 + w, y0 + h], [x0 + w, y0]],
        }
    }
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn mul(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// `(a, b) → (−b, a)`.
pub fn rotate90(p: Point) -> Point {
    [-p[1], p[0]]
}

/// Square crop box from eye and mouth corners.
pub fn compute_alignment_box(lm: &Landmarks) -> Result<AlignmentBox> {
    let eye_mid = mul(add(lm.eye_left, lm.eye_right), 0.5);
    let mouth_mid = mul(add(lm.mouth_left, lm.mouth_right), 0.5);
    let xp = sub(lm.eye_right, lm.eye_left);
    if norm(xp) == 0.0 {
        return Err(Error::DegenerateLandmarks("eye landmarks coincide".into()));
    }
    let yp = sub(mouth_mid, eye_mid);
    let c = sub(eye_mid, mul(yp, 0.1));
    let s = (4.0 * norm(xp)).max(4.4 * norm(yp));
    let dir = sub(xp, rotate90(yp));
    let len = norm(dir);
    if len == 0.0 || !len.is_finite() {
        return Err(Error::DegenerateLandmarks("eye and mouth axes cancel".into()));
    }
    let x = mul(dir, s / 2.0 / len);
    let y = rotate90(x);
    Ok(AlignmentBox {
        corners: [
            sub(sub(c, x), y),
            add(sub(c, x), y),
            add(add(c, x), y),
            sub(add(c, x), y),
        ],
    })
}

// ---------------------------------------------------------------- cropping

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropOptions {
    /// Width of the ramp that fades mirrored content into the nearest edge
    /// pixel, as a fraction of the box side.
    pub blend_fraction: f64,
}

impl Default for CropOptions {
    fn default() -> Self {
        CropOptions { blend_fraction: 0.1 }
    }
}

/// Mirror an index into `0..n` by repeated reflection about the edges
/// (edge pixels not repeated).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn bilinear_mirror(plane: &[f32], w: usize, h: usize, px: f64, py: f64) -> f64 {
    let fx = px - 0.5;
    let fy = py - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (ax, ay) = (fx - x0, fy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |x: i64, y: i64| plane[reflect(y, h) * w + reflect(x, w)] as f64;
    let top = (1.0 - ax) * at(x0, y0) + ax * at(x0 + 1, y0);
    let bottom = (1.0 - ax) * at(x0, y0 + 1) + ax * at(x0 + 1, y0 + 1);
    (1.0 - ay) * top + ay * bottom
}

/// Resample the oriented square `bx` of a `1×3×H×W` image to `res × res`.
/// Source points outside the image read a mirror image of it, faded
/// linearly toward the nearest edge pixel with distance from the border.
pub fn crop_and_resize(
    image: &Tensor<f32>,
    bx: &AlignmentBox,
    out_resolution: usize,
    opts: &CropOptions,
) -> Result<Tensor<f32>> {
    let [n, ch, h, w] = image.dims4();
    if image.shape().len() != 4 || n != 1 || h == 0 || w == 0 {
        return Err(shape_err!("expected a 1×C×H×W image, got {:?}", image.shape()));
    }
    if out_resolution == 0 {
        return Err(Error::Argument("output resolution must be ≥ 1".into()));
    }
    let (wf, hf) = (w as f64, h as f64);
    let xs = bx.corners.map(|p| p[0]);
    let ys = bx.corners.map(|p| p[1]);
    let lo = |v: [f64; 4]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |v: [f64; 4]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !xs.iter().chain(&ys).all(|v| v.is_finite())
        || hi(xs) <= -wf
        || lo(xs) >= 2.0 * wf
        || hi(ys) <= -hf
        || lo(ys) >= 2.0 * hf
    {
        return Err(Error::Geometry(
            "crop box lies entirely outside the padded image".into(),
        ));
    }
    let origin = bx.corners[0];
    let ux = sub(bx.corners[3], origin);
    let uy = sub(bx.corners[1], origin);
    let ramp = (opts.blend_fraction * bx.side()).max(1e-9);
    let r = out_resolution as f64;
    let mut out = vec![0.0f32; ch * out_resolution * out_resolution];
    let src = image.data();
    for v in 0..out_resolution {
        for u in 0..out_resolution {
            let (a, b) = ((u as f64 + 0.5) / r, (v as f64 + 0.5) / r);
            let p = add(origin, add(mul(ux, a), mul(uy, b)));
            let outside = (-p[0]).max(p[0] - wf).max(-p[1]).max(p[1] - hf).max(0.0);
            let t = (outside / ramp).min(1.0);
            let edge = [p[0].clamp(0.5, wf - 0.5), p[1].clamp(0.5, hf - 0.5)];
            for c in 0..ch {
                let plane = &src[c * h * w..(c + 1) * h * w];
                let mut val = bilinear_mirror(plane, w, h, p[0], p[1]);
                if t > 0.0 {
                    let e = bilinear_mirror(plane, w, h, edge[0], edge[1]);
                    val = (1.0 - t) * val + t * e;
                }
                out[(c * out_resolution + v) * out_resolution + u] = val as f32;
            }
        }
    }
    Tensor::new(vec![1, ch, out_resolution, out_resolution], out)
}

// ---------------------------------------------------------------- masking

/// Semantic label palette: id → name, plus the ids removed from images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    pub names: Vec<String>,
    pub removed: BTreeSet<u8>,
}

pub const DEFAULT_PALETTE: [&str; 19] = [
    "background",
    "skin",
    "nose",
    "eyeglasses",
    "left_eye",
    "right_eye",
    "left_brow",
    "right_brow",
    "left_ear",
    "right_ear",
    "mouth",
    "upper_lip",
    "lower_lip",
    "hair",
    "hat",
    "earring",
    "necklace",
    "neck",
    "cloth",
];

impl Default for Palette {
    fn default() -> Self {
        let names: Vec<String> = DEFAULT_PALETTE.iter().map(|s| s.to_string()).collect();
        Palette::with_removed(names, &["background", "cloth"]).expect("default palette is consistent")
    }
}

impl Palette {
    pub fn with_removed(names: Vec<String>, removed: &[&str]) -> Result<Self> {
        let removed = removed
            .iter()
            .map(|r| {
                names
                    .iter()
                    .position(|n| n == r)
                    .map(|i| i as u8)
                    .ok_or_else(|| Error::Data(format!("palette has no label `{r}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Palette { names, removed })
    }

    /// `id name` lines after the palette header; ids must run 0, 1, 2, …
    pub fn parse(text: &str) -> Result<Vec<String>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(PALETTE_HEADER) {
            return Err(Error::Data(format!("palette must start with `{PALETTE_HEADER}`")));
        }
        let mut names = Vec::new();
        for l in lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (id, name) = l
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Data(format!("bad palette line `{l}`")))?;
            if id.parse::<usize>().ok() != Some(names.len()) {
                return Err(Error::Data(format!("palette ids must be consecutive from 0 (`{l}`)")));
            }
            names.push(name.trim().to_string());
        }
        if names.is_empty() || names.len() > 256 {
            return Err(Error::Data("palette must have 1 to 256 entries".into()));
        }
        Ok(names)
    }

    pub fn format(&self) -> String {
        let mut s = format!("{PALETTE_HEADER}\n");
        for (i, n) in self.names.iter().enumerate() {
            s.push_str(&format!("{i} {n}\n"));
        }
        s
    }
}

/// Fill value of removed pixels (black in `[−1, 1]`).
pub const MASK_FILL: f32 = -1.0;

/// Set every pixel whose label is removed by `palette` to black.
pub fn mask_background(
    image: &Tensor<f32>,
    labels: &[u8],
    label_dims: (usize, usize),
    palette: &Palette,
) -> Result<Tensor<f32>> {
    let [_, ch, h, w] = image.dims4();
    if label_dims != (w, h) || labels.len() != w * h {
        return Err(shape_err!(
            "mask is {}×{}, image is {w}×{h}",
            label_dims.0,
            label_dims.1
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= palette.names.len()) {
        return Err(Error::Data(format!("mask label {bad} is not in the palette")));
    }
    let mut out = image.clone();
    let d = out.data_mut();
    for (i, l) in labels.iter().enumerate() {
        if palette.removed.contains(l) {
            for c in 0..ch {
                d[c * h * w + i] = MASK_FILL;
            }
        }
    }
    Ok(out)
}

pub fn load_mask(path: &Path) -> Result<(Vec<u8>, (usize, usize))> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), (w as usize, h as usize)))
}

// --------------------------------------------------------------- manifests

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: u64,
    pub gender: Gender,
    pub class_label: String,
    pub image: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifests {
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    /// Kept training images per (gender, anchor label).
    pub train_counts: BTreeMap<(Gender, String), usize>,
    pub test_counts: BTreeMap<(Gender, String), usize>,
    pub kept: usize,
    pub pruned: usize,
    pub reason_counts: BTreeMap<PruneReason, usize>,
}

impl Manifests {
    /// Training counts for one gender in schema order.
    pub fn train_counts_for(&self, gender: Gender, schema: &AgeClassSchema) -> Vec<usize> {
        schema
            .classes()
            .iter()
            .map(|c| *self.train_counts.get(&(gender, c.label.clone())).unwrap_or(&0))
            .collect()
    }

    pub fn count_table(&self, schema: &AgeClassSchema) -> String {
        let mut s = String::from("gender");
        for c in schema.classes() {
            s.push_str(&format!("\t{}", c.label));
        }
        s.push('\n');
        for g in [Gender::Male, Gender::Female] {
            s.push_str(&g.to_string());
            for n in self.train_counts_for(g, schema) {
                s.push_str(&format!("\t{n}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Split kept anchor-class records at `split_boundary`. Every gender that
/// occurs in the input must keep at least one training image per anchor.
pub fn build_manifest(
    records: &[DatasetRecord],
    schema: &AgeClassSchema,
    thresholds: &PruneThresholds,
    split_boundary: u64,
) -> Result<Manifests> {
    let mut m = Manifests::default();
    let mut genders = BTreeSet::new();
    for r in records {
        genders.insert(r.gender);
        let d = prune_record(r, thresholds);
        if !d.keep {
            m.pruned += 1;
            for why in d.reasons {
                *m.reason_counts.entry(why).or_default() += 1;
            }
            continue;
        }
        m.kept += 1;
        if schema.class_index(&r.age_cluster).is_none() {
            continue;
        }
        let entry = ManifestEntry {
            image_id: r.image_id,
            gender: r.gender,
            class_label: r.age_cluster.clone(),
            image: r.image.clone(),
        };
        let key = (r.gender, r.age_cluster.clone());
        if r.image_id < split_boundary {
            *m.train_counts.entry(key).or_default() += 1;
            m.train.push(entry);
        } else {
            *m.test_counts.entry(key).or_default() += 1;
            m.test.push(entry);
        }
    }
    let order = |e: &ManifestEntry| (e.gender as u8, schema.class_index(&e.class_label), e.image_id);
    m.train.sort_by_key(order);
    m.test.sort_by_key(order);
    for g in [Gender::Male, Gender::Female] {
        if !genders.contains(&g) {
            continue;
        }
        for c in schema.classes() {
            if !m.train_counts.contains_key(&(g, c.label.clone())) {
                return Err(Error::Manifest(format!(
                    "class {} has no {g} training images after pruning",
                    c.label
                )));
            }
        }
    }
    Ok(m)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        s.push_str(&format!(
            "id={} gender={} class={}",
            e.image_id, e.gender, e.class_label
        ));
        if let Some(p) = &e.image {
            s.push_str(&format!(" image={}", p.display()));
        }
        s.push('\n');
    }
    s
}

/// Parse a manifest; relative image paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::Manifest(format!("manifest must start with `{MANIFEST_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#')) {
        let mut kv = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("line {}: `{tok}` is not key=value", i + 1)))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Manifest(format!("line {}: missing `{k}`", i + 1)))
        };
        out.push(ManifestEntry {
            image_id: get("id")?
                .parse()
                .map_err(|_| Error::Manifest(format!("line {}: bad id", i + 1)))?,
            gender: get("gender")?
                .parse()
                .map_err(|_| Error::Manifest(format!("line {}: bad gender", i + 1)))?,
            class_label: get("class")?.to_string(),
            image: kv.get("image").map(|p| base.join(p)),
        });
    }
    Ok(out)
}

// --------------------------------------------------------- synthetic data

/// Procedural stand-in for an age-labelled face set: a textured disk on a
/// dark canvas whose radius and stripe frequency grow with the class index.
/// Position, stripe angle, phase and colour vary per image.
pub fn synthetic_disks(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Vec<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = resolution as f64;
    (0..classes)
        .map(|c| {
            let frac = if classes > 1 {
                c as f64 / (classes - 1) as f64
            } else {
                0.0
            };
            let radius = r * (0.16 + 0.22 * frac);
            let freq = 1.0 + 5.0 * frac;
            (0..per_class)
                .map(|_| {
                    let cx = r / 2.0 + rng.random_range(-0.08..0.08) * r;
                    let cy = r / 2.0 + rng.random_range(-0.08..0.08) * r;
                    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let color = [
                        rng.random_range(0.3..1.0),
                        rng.random_range(0.3..1.0),
                        rng.random_range(0.3..1.0),
                    ];
                    let (ca, sa) = (angle.cos(), angle.sin());
                    let plane = resolution * resolution;
                    Tensor::from_fn(vec![1, 3, resolution, resolution], |i| {
                        let ch = i / plane;
                        let (y, x) = ((i % plane) / resolution, i % resolution);
                        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if px.hypot(py) > radius {
                            return -0.8;
                        }
                        let t = (px * ca + py * sa) / r * std::f64::consts::TAU * freq + phase;
                        let stripe = 0.5 + 0.5 * t.sin();
                        (color[ch] * (0.35 + 0.65 * stripe) * 2.0 - 1.0) as f32
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(el: Point, er: Point, ml: Point, mr: Point) -> Landmarks {
        Landmarks {
            eye_left: el,
            eye_right: er,
            mouth_left: ml,
            mouth_right: mr,
        }
    }

    #[test]
    fn alignment_example() {
        let b = compute_alignment_box(&lm([0., 0.], [10., 0.], [2., 10.], [8., 10.])).unwrap();
        let want = [[-17., -23.], [-17., 21.], [27., 21.], [27., -23.]];
        for (c, w) in b.corners.iter().zip(want) {
            assert!(dist(*c, w) < 1e-9, "{c:?} vs {w:?}");
        }
        assert!((b.side() - 44.0).abs() < 1e-12);
        assert_eq!(b.center(), [5.0, -1.0]);
        assert!(matches!(
            compute_alignment_box(&lm([1., 1.], [1., 1.], [0., 5.], [2., 5.])),
            Err(Error::DegenerateLandmarks(_))
        ));
    }

    #[test]
    fn alignment_is_covariant() {
        let base = lm([3., 4.], [17., 6.], [6., 20.], [15., 21.]);
        let b = compute_alignment_box(&base).unwrap();
        let th: f64 = 0.7;
        let rot = |p: Point| [th.cos() * p[0] - th.sin() * p[1], th.sin() * p[0] + th.cos() * p[1]];
        let rb = compute_alignment_box(&lm(
            rot(base.eye_left),
            rot(base.eye_right),
            rot(base.mouth_left),
            rot(base.mouth_right),
        ))
        .unwrap();
        for (a, b) in rb.corners.iter().zip(b.corners) {
            assert!(dist(*a, rot(b)) < 1e-9);
        }
        let sb = compute_alignment_box(&lm(
            mul(base.eye_left, 2.0),
            mul(base.eye_right, 2.0),
            mul(base.mouth_left, 2.0),
            mul(base.mouth_right, 2.0),
        ))
        .unwrap();
        assert!((sb.side() - 2.0 * b.side()).abs() < 1e-9);
        for (a, b) in sb.corners.iter().zip(b.corners) {
            assert!(dist(*a, mul(b, 2.0)) < 1e-9);
        }
    }

    fn nominal() -> DatasetRecord {
        DatasetRecord::nominal(1, "30-39", Gender::Male)
    }

    #[test]
    fn pruning_examples() {
        let th = PruneThresholds::default();
        assert_eq!(
            prune_record(&nominal(), &th),
            PruneDecision {
                keep: true,
                reasons: vec![]
            }
        );
        let r = DatasetRecord {
            gender_confidence: 0.5,
            ..nominal()
        };
        assert_eq!(prune_record(&r, &th).reasons, vec![PruneReason::GenderConfidence]);
        let r = DatasetRecord {
            yaw_deg: 45.0,
            ..nominal()
        };
        assert_eq!(prune_record(&r, &th).reasons, vec![PruneReason::Yaw]);
        let r = DatasetRecord {
            yaw_deg: -45.0,
            pitch_deg: 31.0,
            glasses: Glasses::Dark,
            ..nominal()
        };
        assert_eq!(
            prune_record(&r, &th).reasons,
            vec![PruneReason::Yaw, PruneReason::Pitch, PruneReason::DarkGlasses]
        );
        let r = DatasetRecord {
            eye_occlusion_left: 60.0,
            eye_occlusion_right: 55.0,
            ..nominal()
        };
        assert_eq!(prune_record(&r, &th).reasons, vec![PruneReason::BothEyesOcclusion]);
        let r = DatasetRecord {
            eye_occlusion_left: 95.0,
            ..nominal()
        };
        assert_eq!(prune_record(&r, &th).reasons, vec![PruneReason::EyeOcclusion]);
        // thresholds are strict
        let r = DatasetRecord {
            gender_confidence: 0.66,
            age_confidence: 0.6,
            yaw_deg: 40.0,
            pitch_deg: -30.0,
            ..nominal()
        };
        assert!(prune_record(&r, &th).keep);
    }

    #[test]
    fn label_round_trip() {
        let mut r = nominal();
        r.landmarks = Some(lm([1.5, 2.], [3., 4.], [5., 6.], [7., 8.25]));
        r.image = Some("img/a.png".into());
        let mut r2 = DatasetRecord::nominal(69000, "70+", Gender::Female);
        r2.glasses = Glasses::Normal;
        r2.yaw_deg = -12.5;
        let text = format_labels(&[r.clone(), r2.clone()]);
        let back = parse_labels(&text, Path::new("")).unwrap();
        assert_eq!(back, vec![r, r2]);
        assert!(parse_labels("id=1", Path::new("")).is_err());
        let bad = format!("{LABELS_HEADER}\nid=1 cluster=30-39 bogus=1");
        assert!(parse_labels(&bad, Path::new(""))
            .unwrap_err()
            .to_string()
            .contains("bogus"));
        let bad = format!(
            "{LABELS_HEADER}\n{}",
            format_labels(&[nominal()])
                .lines()
                .nth(1)
                .unwrap()
                .replace("age_conf=1", "age_conf=1.5")
        );
        assert!(parse_labels(&bad, Path::new("")).is_err());
    }

    #[test]
    fn ffhq_aging_table_import() {
        let csv = "image_number,age_group,age_group_confidence,gender,gender_confidence,head_pitch,head_roll,head_yaw,glasses,left_eye_occluded,right_eye_occluded\n\
                   0,0-2,0.99,male,0.9,1.0,0.0,-3.0,None,2.0,3.0\n\
                   1,70-120,0.8,female,0.7,0,0,50,Dark,0,0\n";
        let recs = parse_ffhq_aging_csv(csv).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].age_cluster, "70+");
        assert_eq!(recs[1].glasses, Glasses::Dark);
        assert_eq!(recs[0].yaw_deg, -3.0);
        assert!(parse_ffhq_aging_csv("a,b\n1,2\n").is_err());
    }

    fn image_from(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor<f32> {
        Tensor::from_fn(vec![1, 3, h, w], |i| {
            let (c, rem) = (i / (w * h), i % (w * h));
            f(c, rem % w, rem / w)
        })
    }

    #[test]
    fn identity_crop_reproduces_input() {
        let img = image_from(8, 8, |c, x, y| ((x * 3 + y * 5 + c) % 11) as f32 / 11.0);
        let out = crop_and_resize(
            &img,
            &AlignmentBox::axis_aligned(0., 0., 8., 8.),
            8,
            &CropOptions::default(),
        )
        .unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = image_from(10, 7, |_, _, _| 0.3);
        let b = compute_alignment_box(&lm([2., 2.], [6., 3.], [3., 6.], [6., 6.])).unwrap();
        let out = crop_and_resize(&img, &b, 12, &CropOptions::default()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn inner_crop_matches_plain_crop_and_resize() {
        let img = image_from(16, 16, |c, x, y| {
            (x as f32 * 0.1 - y as f32 * 0.07 + c as f32 * 0.2).sin()
        });
        let (x0, y0, side, res) = (3.0, 5.0, 8.0, 4usize);
        let out = crop_and_resize(
            &img,
            &AlignmentBox::axis_aligned(x0, y0, side, side),
            res,
            &CropOptions::default(),
        )
        .unwrap();
        // crop then resize: a 2× downscale samples between pixel pairs
        for c in 0..3 {
            for v in 0..res {
                for u in 0..res {
                    let (sx, sy) = (x0 as usize + 2 * u, y0 as usize + 2 * v);
                    let p = |x: usize, y: usize| img.at4([0, c, y, x]);
                    let want = 0.25 * (p(sx, sy) + p(sx + 1, sy) + p(sx, sy + 1) + p(sx + 1, sy + 1));
                    assert!((out.at4([0, c, v, u]) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn far_box_is_rejected_and_padding_blends_to_edge() {
        let img = image_from(4, 4, |_, x, _| x as f32);
        let far = AlignmentBox::axis_aligned(100., 100., 4., 4.);
        assert!(matches!(
            crop_and_resize(&img, &far, 2, &CropOptions::default()),
            Err(Error::Geometry(_))
        ));
        // left of the image, well past the ramp: equals the edge column
        let b = AlignmentBox::axis_aligned(-3.0, 0.0, 1.0, 4.0);
        let out = crop_and_resize(&img, &b, 1, &CropOptions { blend_fraction: 0.1 }).unwrap();
        assert!((out.data()[0] - 0.0).abs() < 1e-6);
        reflect_cases();
    }

    fn reflect_cases() {
        assert_eq!(
            (-3..8).map(|i| reflect(i, 3)).collect::<Vec<_>>(),
            vec![1, 2, 1, 0, 1, 2, 1, 0, 1, 2, 1]
        );
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn masking() {
        let p = Palette::default();
        assert_eq!(p.names.len(), 19);
        assert_eq!(p.removed, BTreeSet::from([0, 18]));
        let img = image_from(4, 2, |c, x, y| (c + x + y) as f32 * 0.1);
        let all_bg = vec![0u8; 8];
        let out = mask_background(&img, &all_bg, (4, 2), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == MASK_FILL));
        let skin = vec![1u8; 8];
        assert_eq!(mask_background(&img, &skin, (4, 2), &p).unwrap(), img);
        let half: Vec<u8> = (0..8).map(|i| if i % 4 < 2 { 18 } else { 13 }).collect();
        let out = mask_background(&img, &half, (4, 2), &p).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..4 {
                    let want = if x < 2 { MASK_FILL } else { img.at4([0, c, y, x]) };
                    assert_eq!(out.at4([0, c, y, x]), want);
                }
            }
        }
        assert_eq!(mask_background(&out, &half, (4, 2), &p).unwrap(), out);
        assert!(matches!(
            mask_background(&img, &[19u8; 8], (4, 2), &p),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            mask_background(&img, &[0u8; 6], (3, 2), &p),
            Err(Error::Shape(_))
        ));
        assert_eq!(Palette::parse(&p.format()).unwrap(), p.names);
    }

    #[test]
    fn manifest_split_and_filters() {
        let schema = AgeClassSchema::parse_ranges("0-2,30-39", 1).unwrap();
        let th = PruneThresholds::default();
        let recs = vec![
            DatasetRecord::nominal(5, "0-2", Gender::Male),
            DatasetRecord::nominal(6, "30-39", Gender::Male),
            DatasetRecord::nominal(7, "20-29", Gender::Male),
            DatasetRecord::nominal(69000, "0-2", Gender::Male),
            DatasetRecord {
                yaw_deg: 90.0,
                ..DatasetRecord::nominal(8, "0-2", Gender::Male)
            },
        ];
        let m = build_manifest(&recs, &schema, &th, SPLIT_BOUNDARY).unwrap();
        assert_eq!(m.train.iter().map(|e| e.image_id).collect::<Vec<_>>(), vec![5, 6]);
        assert_eq!(m.test.iter().map(|e| e.image_id).collect::<Vec<_>>(), vec![69000]);
        assert_eq!(m.kept + m.pruned, recs.len());
        assert_eq!(m.train_counts_for(Gender::Male, &schema), vec![1, 1]);
        assert_eq!(m.reason_counts[&PruneReason::Yaw], 1);
        let err = build_manifest(&recs[..1], &schema, &th, SPLIT_BOUNDARY).unwrap_err();
        assert!(err.to_string().contains("30-39"));

        let text = format_manifest(&m.train);
        assert_eq!(parse_manifest(&text, Path::new("")).unwrap(), m.train);
    }

    #[test]
    fn synthetic_classes_grow() {
        let data = synthetic_disks(6, 3, 32, 1);
        assert_eq!(data.len(), 6);
        let area = |t: &Tensor<f32>| t.data()[..32 * 32].iter().filter(|&&v| v != -0.8).count();
        let mean_area: Vec<f64> = data
            .iter()
            .map(|c| c.iter().map(area).sum::<usize>() as f64 / c.len() as f64)
            .collect();
        assert!(mean_area.windows(2).all(|w| w[1] > w[0]), "{mean_area:?}");
        assert!(data
            .iter()
            .flatten()
            .all(|t| t.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(synthetic_disks(6, 3, 32, 1)[2][1], data[2][1]);
    }
}
