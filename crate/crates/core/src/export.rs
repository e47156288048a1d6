//! Axial mid-slice images in binary PGM (P5) and PPM (P6) form.
//!
//! Per case, `export_case` writes the pre and post slices, the lesion
//! probability map, and an overlay of the post slice with the prediction in
//! red and the ground-truth contour in green.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernels;
use crate::phantom::{Sample, LESION};
use crate::tensor::Tensor;

/// A single-channel 2D image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Slice<T> {
    fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }
}

/// Axial slice `depth / 2` of a `[D, H, W]` volume stored in `data`.
pub fn mid_slice<T: Copy>(data: &[T], dims: [usize; 3]) -> Result<Slice<T>> {
    let [d, h, w] = dims;
    if data.len() != d * h * w || d == 0 {
        return Err(Error::InvalidShape {
            shape: dims.to_vec(),
            reason: format!("volume has {} elements", data.len()),
        });
    }
    let start = (d / 2) * h * w;
    Ok(Slice {
        height: h,
        width: w,
        data: data[start..start + h * w].to_vec(),
    })
}

/// Linearly maps `[lo, hi]` to `0..=255`, clamping outside the window.
pub fn to_gray(s: &Slice<f32>, lo: f32, hi: f32) -> Slice<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    Slice {
        height: s.height,
        width: s.width,
        data: s
            .data
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    }
}

/// Min-max window of a slice.
fn window(s: &Slice<f32>) -> (f32, f32) {
    s.data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

pub fn encode_pgm(s: &Slice<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend_from_slice(&s.data);
    out
}

pub fn encode_ppm(height: usize, width: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    out
}

/// Voxels of `mask` with at least one in-plane 4-neighbour outside it.
pub fn contour(mask: &Slice<bool>) -> Slice<bool> {
    let (h, w) = (mask.height, mask.width);
    let mut data = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask.at(y, x) {
                continue;
            }
            let outside = |dy: isize, dx: isize| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy < 0
                    || xx < 0
                    || yy >= h as isize
                    || xx >= w as isize
                    || !mask.at(yy as usize, xx as usize)
            };
            data[y * w + x] = outside(-1, 0) || outside(1, 0) || outside(0, -1) || outside(0, 1);
        }
    }
    Slice {
        height: h,
        width: w,
        data,
    }
}

/// Gray `base` with `pred` painted red and the `gt` contour painted green.
pub fn overlay(base: &Slice<u8>, pred: &Slice<bool>, gt: &Slice<bool>) -> Vec<[u8; 3]> {
    let edge = contour(gt);
    base.data
        .iter()
        .zip(&pred.data)
        .zip(&edge.data)
        .map(|((&g, &p), &e)| {
            let mut px = [g, g, g];
            if p {
                px = [255, g / 2, g / 2];
            }
            if e {
                px[1] = 255;
                if !p {
                    px[0] = g / 2;
                }
                px[2] = g / 2;
            }
            px
        })
        .collect()
}

/// Writes `{name}_pre.pgm`, `{name}_post.pgm`, `{name}_prob.pgm` and
/// `{name}_overlay.ppm` into `dir` and returns their paths.
///
/// `logits` are the `[1, K, D, H, W]` network outputs for `sample`.
pub fn export_case(
    dir: &Path,
    name: &str,
    sample: &Sample,
    logits: &Tensor<f32>,
) -> Result<Vec<PathBuf>> {
    let dims = sample.labels.dims;
    let vol = dims.iter().product::<usize>();
    let shape = logits.shape();
    if shape.len() != 5 || shape[0] != 1 || shape[2..] != dims {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("logits do not match a single {dims:?} volume"),
        });
    }
    let classes = crate::network::argmax_classes(logits)?;
    let probs = kernels::channel_softmax(logits)?;
    let lesion_prob = &probs.data()[LESION as usize * vol..(LESION as usize + 1) * vol];

    let post = mid_slice(sample.post.data(), dims)?;
    let pre = mid_slice(sample.pre.data(), dims)?;
    // Pre and post share one window so that enhancement stays visible.
    let (lo_a, hi_a) = window(&post);
    let (lo_b, hi_b) = window(&pre);
    let (lo, hi) = (lo_a.min(lo_b), hi_a.max(hi_b));
    let post_gray = to_gray(&post, lo, hi);
    let pred: Vec<bool> = classes.iter().map(|&c| c == LESION).collect();

    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |suffix: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(format!("{name}_{suffix}"));
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put("pre.pgm", encode_pgm(&to_gray(&pre, lo, hi)))?;
    put("post.pgm", encode_pgm(&post_gray))?;
    put(
        "prob.pgm",
        encode_pgm(&to_gray(&mid_slice(lesion_prob, dims)?, 0.0, 1.0)),
    )?;
    let rgb = overlay(
        &post_gray,
        &mid_slice(&pred, dims)?,
        &mid_slice(&sample.labels.mask(LESION), dims)?,
    );
    put(
        "overlay.ppm",
        encode_ppm(post_gray.height, post_gray.width, &rgb),
    )?;
    Ok(written)
}
