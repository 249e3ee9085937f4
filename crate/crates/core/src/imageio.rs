//! RGB images as `1×3×H×W` tensors in `[−1, 1]`, and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit value → `[−1, 1]`.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// `[−1, 1]` → 8-bit value, clamped and rounded.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Interleaved RGB8 bytes → `1×3×H×W`.
pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    if rgb.len() != width * height * 3 {
        return Err(shape_err!("{} bytes for a {width}×{height} RGB image", rgb.len()));
    }
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = normalize_u8(px[c]);
        }
    }
    Tensor::new(vec![1, 3, height, width], data)
}

/// `1×3×H×W` → (width, height, interleaved RGB8).
pub fn to_rgb8<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let [n, c, h, w] = img.dims4();
    if img.shape().len() != 4 || n != 1 || c != 3 {
        return Err(shape_err!("expected a 1×3×H×W image, got {:?}", img.shape()));
    }
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(denormalize(d[c * plane + i].f64()));
        }
    }
    Ok((w, h, out))
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    from_rgb8(w as usize, h as usize, img.as_raw())
}

pub fn save_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (w, h, bytes) = to_rgb8(img)?;
    save_rgb8(path, w, h, bytes)
}

pub fn save_rgb8(path: &Path, w: usize, h: usize, bytes: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| shape_err!("buffer does not fit {w}×{h}"))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Tile equally sized images row-major into a `rows×cols` grid.
pub fn grid<T: Scalar>(images: &[Tensor<T>], cols: usize) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| shape_err!("empty grid"))?;
    let [_, c, h, w] = first.dims4();
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::full(vec![1, c, gh, gw], T::c(-1.0));
    for (idx, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(shape_err!("grid: {:?} vs {:?}", img.shape(), first.shape()));
        }
        let (r0, c0) = (idx / cols * h, idx % cols * w);
        let src = img.data();
        let dst = out.data_mut();
        for ch in 0..c {
            for y in 0..h {
                let s = (ch * h + y) * w;
                let d = (ch * gh + r0 + y) * gw + c0;
                dst[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(out)
}
