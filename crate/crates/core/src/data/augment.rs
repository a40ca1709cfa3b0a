//! Two-view augmentation: random resized crop, horizontal flip and colour
//! jitter, drawn independently per view.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use crate::config::AugmentMode;
use crate::model::ImageBatch;

/// Two augmented views of the same batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: ImageBatch,
    pub view2: ImageBatch,
}

const CROP_SCALE: (f64, f64) = (0.65, 1.0);
const JITTER: f64 = 0.2;

/// Bilinear resample of the square crop `[x0, x0+side) x [y0, y0+side)` back
/// to the full resolution.
fn crop_resize(img: &Array3<f64>, x0: f64, y0: f64, side: f64) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        let sy = (y0 + (y as f64 + 0.5) * side / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (yl, fy) = (sy.floor() as usize, sy - sy.floor());
        let yh = (yl + 1).min(h - 1);
        for x in 0..w {
            let sx = (x0 + (x as f64 + 0.5) * side / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (xl, fx) = (sx.floor() as usize, sx - sx.floor());
            let xh = (xl + 1).min(w - 1);
            for ch in 0..c {
                let top = img[[ch, yl, xl]] * (1.0 - fx) + img[[ch, yl, xh]] * fx;
                let bot = img[[ch, yh, xl]] * (1.0 - fx) + img[[ch, yh, xh]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn augment_one<R: Rng + ?Sized>(img: &Array3<f64>, rng: &mut R) -> Array3<f64> {
    let (_, h, _) = img.dim();
    let side = rng.random_range(CROP_SCALE.0..=CROP_SCALE.1) * h as f64;
    let x0 = rng.random_range(0.0..=(h as f64 - side));
    let y0 = rng.random_range(0.0..=(h as f64 - side));
    let mut out = crop_resize(img, x0, y0, side);
    if rng.random_bool(0.5) {
        out.invert_axis(Axis(2));
        out = out.as_standard_layout().into_owned();
    }

    let brightness = rng.random_range(1.0 - JITTER..=1.0 + JITTER);
    let contrast = rng.random_range(1.0 - JITTER..=1.0 + JITTER);
    let saturation = rng.random_range(1.0 - JITTER..=1.0 + JITTER);
    out.mapv_inplace(|v| v * brightness);
    let mean = out.mean().unwrap_or(0.0);
    out.mapv_inplace(|v| (v - mean) * contrast + mean);
    let gray = out.mean_axis(Axis(0)).unwrap();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch.zip_mut_with(&gray, |v, &g| *v = (*v - g) * saturation + g);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Independent views of every image in `images`. In identity mode both views
/// equal the input.
pub fn augment_two_views<R: Rng + ?Sized>(images: &ImageBatch, mode: AugmentMode, rng: &mut R) -> ViewPair {
    match mode {
        AugmentMode::Identity => ViewPair {
            view1: images.clone(),
            view2: images.clone(),
        },
        AugmentMode::Standard => {
            let mut v1 = Array4::zeros(images.pixels.raw_dim());
            let mut v2 = Array4::zeros(images.pixels.raw_dim());
            for (i, img) in images.pixels.axis_iter(Axis(0)).enumerate() {
                let img = img.to_owned();
                v1.index_axis_mut(Axis(0), i).assign(&augment_one(&img, rng));
                v2.index_axis_mut(Axis(0), i).assign(&augment_one(&img, rng));
            }
            ViewPair {
                view1: ImageBatch { pixels: v1 },
                view2: ImageBatch { pixels: v2 },
            }
        }
    }
}
