//! Gaussian keypoint heatmaps: encoding ground truth and decoding predicted
//! maps back to subpixel keypoints with confidences.

use nalgebra::Vector2;
use thiserror::Error;

/// Default Gaussian std in pixels at the 64 px reference image size; scaled
/// proportionally for other sizes.
pub const DEFAULT_SIGMA_PX_AT_64: f64 = 1.5;

/// Default confidence threshold used to gate keypoints before PnP.
pub const DEFAULT_CONFIDENCE_TAU: f64 = 0.2;

/// Heatmap Gaussian std for a given square image size.
pub fn sigma_for_size(size_px: u32) -> f64 {
    DEFAULT_SIGMA_PX_AT_64 * size_px as f64 / 64.0
}

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("data length {len} does not match {channels} x {height} x {width}")]
    ShapeMismatch { len: usize, channels: usize, height: usize, width: usize },
}

/// K stacked H x W heatmap channels, one per keypoint, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    channels: usize,
    height: usize,
    width: usize,
    sigma_px: f64,
    data: Vec<f64>,
}

impl HeatmapStack {
    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        sigma_px: f64,
        data: Vec<f64>,
    ) -> Result<Self, HeatmapError> {
        if data.len() != channels * height * width {
            return Err(HeatmapError::ShapeMismatch {
                len: data.len(),
                channels,
                height,
                width,
            });
        }
        Ok(Self { channels, height, width, sigma_px, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma_px(&self) -> f64 {
        self.sigma_px
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[k * plane..(k + 1) * plane]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// One decoded keypoint: subpixel position, peak confidence, and whether the
/// confidence cleared the decode threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedKeypoint {
    pub uv: Vector2<f64>,
    pub confidence: f64,
    pub valid: bool,
}

/// Encode keypoints as peak-one Gaussians evaluated at pixel sample points
/// (integer coordinates). Keypoints outside `[0, W) x [0, H)` produce an
/// all-zero channel.
pub fn encode(
    keypoints_px: &[Vector2<f64>],
    height: usize,
    width: usize,
    sigma_px: f64,
) -> Result<HeatmapStack, HeatmapError> {
    if !(sigma_px > 0.0) {
        return Err(HeatmapError::NonPositiveSigma(sigma_px));
    }
    let mut data = vec![0.0; keypoints_px.len() * height * width];
    let inv_two_sigma2 = 1.0 / (2.0 * sigma_px * sigma_px);
    for (k, kp) in keypoints_px.iter().enumerate() {
        let in_frame =
            kp.x >= 0.0 && kp.x < width as f64 && kp.y >= 0.0 && kp.y < height as f64;
        if !in_frame {
            continue;
        }
        let plane = &mut data[k * height * width..(k + 1) * height * width];
        for row in 0..height {
            let dv = row as f64 - kp.y;
            for col in 0..width {
                let du = col as f64 - kp.x;
                plane[row * width + col] = (-(du * du + dv * dv) * inv_two_sigma2).exp();
            }
        }
    }
    HeatmapStack::from_data(keypoints_px.len(), height, width, sigma_px, data)
}

/// Decode every channel to a subpixel keypoint.
///
/// Peak pixel by argmax (ties resolved to the smallest row, then column),
/// refined by a per-axis quadratic fit over the 3 x 3 neighborhood with the
/// offset clamped to `[-0.5, 0.5]`. Confidence is the raw peak value; `valid`
/// requires `confidence >= tau` and a strictly positive peak.
pub fn decode(stack: &HeatmapStack, tau: f64) -> Vec<DecodedKeypoint> {
    (0..stack.channels())
        .map(|k| decode_channel(stack.channel(k), stack.height(), stack.width(), tau))
        .collect()
}

fn decode_channel(plane: &[f64], height: usize, width: usize, tau: f64) -> DecodedKeypoint {
    let mut best = 0usize;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    let peak = plane[best];
    let row = best / width;
    let col = best % width;

    let value = |r: isize, c: isize| plane[r as usize * width + c as usize];
    let fit = |m1: f64, center: f64, p1: f64| -> f64 {
        let denom = m1 - 2.0 * center + p1;
        if denom >= -1e-300 {
            // Flat or non-concave neighborhood; no subpixel information.
            return 0.0;
        }
        (0.5 * (m1 - p1) / denom).clamp(-0.5, 0.5)
    };

    let dx = if col >= 1 && col + 1 < width {
        fit(
            value(row as isize, col as isize - 1),
            peak,
            value(row as isize, col as isize + 1),
        )
    } else {
        0.0
    };
    let dy = if row >= 1 && row + 1 < height {
        fit(
            value(row as isize - 1, col as isize),
            peak,
            value(row as isize + 1, col as isize),
        )
    } else {
        0.0
    };

    DecodedKeypoint {
        uv: Vector2::new(col as f64 + dx, row as f64 + dy),
        confidence: peak,
        valid: peak >= tau && peak > 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn peak_is_one_at_pixel_center() {
        let stack = encode(&[Vector2::new(10.0, 20.0)], 64, 64, 1.5).unwrap();
        assert_eq!(stack.channel(0)[20 * 64 + 10], 1.0);
    }

    #[test]
    fn out_of_frame_keypoint_gives_zero_channel() {
        let stack = encode(&[Vector2::new(-5.0, -5.0)], 64, 64, 1.5).unwrap();
        assert!(stack.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_sum_matches_gaussian_integral() {
        // For an interior peak the discrete sum approximates 2*pi*sigma^2.
        let sigma = 1.5;
        let stack = encode(&[Vector2::new(31.3, 30.7)], 64, 64, sigma).unwrap();
        let sum: f64 = stack.channel(0).iter().sum();
        let expected = 2.0 * PI * sigma * sigma;
        assert!(
            (sum - expected).abs() / expected < 0.02,
            "sum {sum} vs integral {expected}"
        );
    }

    #[test]
    fn round_trip_exact_at_grid_point() {
        let kp = Vector2::new(17.0, 41.0);
        let stack = encode(&[kp], 64, 64, 1.5).unwrap();
        let out = decode(&stack, 0.2);
        assert_eq!(out[0].uv, kp);
        assert_eq!(out[0].confidence, 1.0);
        assert!(out[0].valid);
    }

    #[test]
    fn round_trip_subpixel_within_tenth_pixel() {
        let sigma = 1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let margin = 2.0 * sigma;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let kp = Vector2::new(
                rng.gen_range(margin..64.0 - margin),
                rng.gen_range(margin..64.0 - margin),
            );
            let stack = encode(&[kp], 64, 64, sigma).unwrap();
            let out = decode(&stack, 0.2);
            assert!(out[0].valid);
            let err = (out[0].uv - kp).amax();
            worst = worst.max(err);
        }
        assert!(worst <= 0.1, "worst subpixel round-trip error {worst} px");
    }

    #[test]
    fn all_zero_channel_is_invalid() {
        let stack = HeatmapStack::from_data(1, 8, 8, 1.5, vec![0.0; 64]).unwrap();
        let out = decode(&stack, 0.2);
        assert!(!out[0].valid);
        assert_eq!(out[0].confidence, 0.0);
    }

    #[test]
    fn argmax_tie_prefers_smallest_row_then_column() {
        let mut data = vec![0.0; 64];
        data[2 * 8 + 5] = 0.7;
        data[6 * 8 + 1] = 0.7;
        let stack = HeatmapStack::from_data(1, 8, 8, 1.0, data).unwrap();
        let out = decode(&stack, 0.2);
        assert_eq!(out[0].uv.y.round() as usize, 2);
    }

    proptest! {
        #[test]
        fn decode_is_scale_invariant(seed in 0u64..300, scale in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kp = Vector2::new(rng.gen_range(4.0..28.0), rng.gen_range(4.0..28.0));
            let stack = encode(&[kp], 32, 32, 1.5).unwrap();
            let scaled = HeatmapStack::from_data(
                1, 32, 32, 1.5,
                stack.data().iter().map(|v| v * scale).collect(),
            ).unwrap();
            let a = decode(&stack, 0.0)[0];
            let b = decode(&scaled, 0.0)[0];
            prop_assert!((a.uv - b.uv).norm() < 1e-12);
            prop_assert!((b.confidence - scale * a.confidence).abs() < 1e-12);
        }

        #[test]
        fn encode_translation_equivariant(du in -5i64..5, dv in -5i64..5, seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kp = Vector2::new(rng.gen_range(8.0..24.0), rng.gen_range(8.0..24.0));
            let shifted = Vector2::new(kp.x + du as f64, kp.y + dv as f64);
            let a = encode(&[kp], 32, 32, 1.5).unwrap();
            let b = encode(&[shifted], 32, 32, 1.5).unwrap();
            for row in 0..32i64 {
                for col in 0..32i64 {
                    let (sr, sc) = (row + dv, col + du);
                    if (0..32).contains(&sr) && (0..32).contains(&sc) {
                        let va = a.channel(0)[(row * 32 + col) as usize];
                        let vb = b.channel(0)[(sr * 32 + sc) as usize];
                        prop_assert_eq!(va.to_bits(), vb.to_bits());
                    }
                }
            }
        }
    }
}
