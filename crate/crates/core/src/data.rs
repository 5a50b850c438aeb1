//! Procedural labeled images: colored shapes on textured backgrounds.
//!
//! A class is a (shape, color) pair. Position, scale, rotation, color jitter,
//! background tint and texture vary continuously per image.

use rand::Rng as _;

use crate::error::{invalid, shape_err, Result};
use crate::rng;
use crate::tensor::Tensor;

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

const SHAPES: [Shape; 6] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring, Shape::Diamond];

impl Shape {
    /// Membership test in shape-local coordinates scaled by the radius.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs().max(v.abs()) <= 0.8,
            Shape::Triangle => v >= -0.5 && 3f32.sqrt() * u.abs() <= 1.0 - v,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// Number of distinct shapes used for a given class count.
fn shapes_for(classes: usize) -> usize {
    if classes <= 32 {
        classes.min(4)
    } else {
        6
    }
}

/// (shape, color index) of a class.
pub fn class_attributes(class: usize, classes: usize) -> (Shape, usize) {
    let ns = shapes_for(classes);
    (SHAPES[class % ns], class / ns)
}

/// Labeled images `[n, size, size, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_outer(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image_size: self.image_size,
        })
    }

    /// First `count` images.
    pub fn head(&self, count: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Generates `n` images over `classes` balanced classes. When `n` is not a
/// multiple of `classes`, the remainder is dropped with a warning.
pub fn gen_dataset(n: usize, classes: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return invalid(format!("need at least 2 classes, got {classes}"));
    }
    if classes > shapes_for(classes) * PALETTE.len() {
        return invalid(format!("at most {} classes supported", 6 * PALETTE.len()));
    }
    if image_size < 4 {
        return invalid(format!("image size {image_size} too small"));
    }
    let kept = n - n % classes;
    if kept != n {
        log::warn!("dataset size {n} not divisible by {classes} classes; truncating to {kept}");
    }
    let px = image_size * image_size * 3;
    let mut data = Vec::with_capacity(kept * px);
    let mut labels = Vec::with_capacity(kept);
    for i in 0..kept {
        let label = i % classes;
        let mut r = rng::stream(seed, "dataset-image", i as u64);
        data.extend(render(label, classes, image_size, &mut r));
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[kept, image_size, image_size, 3], data)?,
        labels,
        classes,
        image_size,
    })
}

fn render(label: usize, classes: usize, size: usize, r: &mut rng::Rng) -> Vec<f32> {
    let (shape, color_idx) = class_attributes(label, classes);
    let s = size as f32;
    let cx = s * r.random_range(0.3..0.7f32);
    let cy = s * r.random_range(0.3..0.7f32);
    let radius = s * r.random_range(0.2..0.34f32);
    let theta = r.random_range(0.0..std::f32::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();
    let mut fg = PALETTE[color_idx];
    for c in &mut fg {
        *c = (*c + r.random_range(-0.08..0.08f32)).clamp(0.0, 1.0);
    }
    let bg_level = r.random_range(0.1..0.45f32);
    let bg: [f32; 3] = std::array::from_fn(|_| bg_level + r.random_range(-0.08..0.08f32));
    let tex_amp = r.random_range(0.02..0.1f32);
    let tex_freq = r.random_range(0.3..1.2f32);
    let tex_dir = r.random_range(0.0..std::f32::consts::PI);
    let tex_phase = r.random_range(0.0..std::f32::consts::TAU);
    let (tdy, tdx) = tex_dir.sin_cos();

    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            // 2x2 supersampled coverage
            let mut cov = 0.0f32;
            for sy in 0..2 {
                for sx in 0..2 {
                    let px = x as f32 + 0.25 + 0.5 * sx as f32 - cx;
                    let py = y as f32 + 0.25 + 0.5 * sy as f32 - cy;
                    let u = (cos_t * px + sin_t * py) / radius;
                    let v = (-sin_t * px + cos_t * py) / radius;
                    if shape.contains(u, v) {
                        cov += 0.25;
                    }
                }
            }
            let tex = tex_amp * (tex_freq * (tdx * x as f32 + tdy * y as f32) + tex_phase).sin();
            for c in 0..3 {
                let noise = r.random_range(-0.03..0.03f32);
                let b = bg[c] + tex;
                out.push((b * (1.0 - cov) + fg[c] * cov + noise).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Splits `[n, H, W, 3]` images into `[n, N, p*p*3]` patch tokens, grid
/// row-major, pixels within a patch row-major.
pub fn patchify(images: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    let d = images.dims();
    if d.len() != 4 || d[3] != 3 || d[1] % patch != 0 || d[2] % patch != 0 {
        return shape_err("patchify", format!("images {d:?} with patch {patch}"));
    }
    let (n, h, w) = (d[0], d[1], d[2]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * 3;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for i in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let row = ((i * h + gy * patch + py) * w + gx * patch) * 3;
                    out.extend_from_slice(&src[row..row + patch * 3]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, gh * gw, pd], out)
}

/// Inverse of [`patchify`] for square images.
pub fn unpatchify(patches: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    let d = patches.dims();
    if d.len() != 3 || d[2] != patch * patch * 3 {
        return shape_err("unpatchify", format!("patches {d:?} with patch {patch}"));
    }
    let (n, tokens) = (d[0], d[1]);
    let grid = (tokens as f64).sqrt().round() as usize;
    if grid * grid != tokens {
        return shape_err("unpatchify", format!("{tokens} tokens is not a square grid"));
    }
    let size = grid * patch;
    let mut out = vec![0.0f32; n * size * size * 3];
    let src = patches.data();
    for i in 0..n {
        for gy in 0..grid {
            for gx in 0..grid {
                let t = (i * tokens + gy * grid + gx) * d[2];
                for py in 0..patch {
                    let row = ((i * size + gy * patch + py) * size + gx * patch) * 3;
                    out[row..row + patch * 3].copy_from_slice(&src[t + py * patch * 3..t + (py + 1) * patch * 3]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, size, size, 3], out)
}
