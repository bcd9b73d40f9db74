use rand::Rng;

use crate::error::{Error, Result};
use crate::model::VideoShape;

/// Where a pasted rectangle came from and how much of the frame it covers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutMixRecord {
    pub partner_index: usize,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    /// `h * w / (H * W)`
    pub lambda: f64,
}

impl CutMixRecord {
    pub fn new(partner_index: usize, (y0, x0, h, w): (usize, usize, usize, usize), shape: VideoShape) -> Result<Self> {
        if y0 + h > shape.height || x0 + w > shape.width {
            return Err(Error::InvalidInput(format!(
                "crop ({y0}, {x0}, {h}, {w}) exceeds {}x{} frame",
                shape.height, shape.width
            )));
        }
        Ok(Self {
            partner_index,
            y0,
            x0,
            h,
            w,
            lambda: (h * w) as f64 / (shape.height * shape.width) as f64,
        })
    }
}

/// Random crop: size uniform over `0..=H` by `0..=W`, position uniform over
/// the placements that fit.
pub fn sample_crop(shape: VideoShape, partner_index: usize, rng: &mut impl Rng) -> CutMixRecord {
    let h = rng.random_range(0..=shape.height);
    let w = rng.random_range(0..=shape.width);
    let y0 = rng.random_range(0..=shape.height - h);
    let x0 = rng.random_range(0..=shape.width - w);
    CutMixRecord::new(partner_index, (y0, x0, h, w), shape).expect("crop fits by construction")
}

/// Copies the crop rectangle of `source` into `target` in every frame.
pub fn paste(target: &mut [f64], source: &[f64], crop: &CutMixRecord, shape: VideoShape) -> Result<()> {
    if target.len() != shape.len() || source.len() != shape.len() {
        return Err(Error::Shape(format!(
            "videos of {} and {} values for shape {shape:?}",
            target.len(),
            source.len()
        )));
    }
    let (w, c) = (shape.width, shape.channels);
    let frame = shape.frame_len();
    for t in 0..shape.frames {
        for y in crop.y0..crop.y0 + crop.h {
            let start = t * frame + (y * w + crop.x0) * c;
            let end = start + crop.w * c;
            target[start..end].copy_from_slice(&source[start..end]);
        }
    }
    Ok(())
}

/// Pastes a random rectangle of `video_j` into `video_i`.
pub fn cutmix(
    video_i: &[f64],
    video_j: &[f64],
    partner_index: usize,
    shape: VideoShape,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, CutMixRecord)> {
    let crop = sample_crop(shape, partner_index, rng);
    let mut mixed = video_i.to_vec();
    paste(&mut mixed, video_j, &crop, shape)?;
    Ok((mixed, crop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> VideoShape {
        VideoShape {
            frames: 3,
            height: 16,
            width: 16,
            channels: 2,
        }
    }

    #[test]
    fn quarter_area() {
        let r = CutMixRecord::new(0, (4, 4, 8, 8), shape()).unwrap();
        assert_eq!(r.lambda, 0.25);
        assert!(CutMixRecord::new(0, (10, 0, 8, 8), shape()).is_err());
    }

    #[test]
    fn empty_crop_keeps_target() {
        let s = shape();
        let a: Vec<f64> = (0..s.len()).map(|i| i as f64).collect();
        let b = vec![-1.0; s.len()];
        let mut m = a.clone();
        paste(&mut m, &b, &CutMixRecord::new(1, (3, 5, 0, 7), s).unwrap(), s).unwrap();
        assert_eq!(m, a);
    }

    #[test]
    fn pasted_region_matches_source() {
        let s = shape();
        let a: Vec<f64> = (0..s.len()).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..s.len()).map(|i| -(i as f64) - 1.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (m, r) = cutmix(&a, &b, 1, s, &mut rng).unwrap();
            let mut inside = 0;
            for t in 0..s.frames {
                for y in 0..s.height {
                    for x in 0..s.width {
                        for ch in 0..s.channels {
                            let i = ((t * s.height + y) * s.width + x) * s.channels + ch;
                            let within = (r.y0..r.y0 + r.h).contains(&y) && (r.x0..r.x0 + r.w).contains(&x);
                            assert_eq!(m[i], if within { b[i] } else { a[i] });
                            inside += within as usize;
                        }
                    }
                }
            }
            let expect = r.lambda * s.len() as f64;
            assert!((inside as f64 - expect).abs() < 1e-9);
        }
    }
}
