//! Synthetic 5-landmark faces.
//!
//! A canonical layout (left eye, right eye, nose tip, left and right mouth
//! corners) is scaled, rotated, translated and jittered; the image shows a
//! blob per landmark with a type-specific size, the boundary strokes and
//! Gaussian noise. Each sample is regenerable from `(seed, index)` alone.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boundary::{boundary_channel, rasterize_boundary, BoundarySchema};
use crate::heatmap::{render_heatmap, Frame, FramePolicy, GaussianSpec, HeatmapStack, LandmarkSet};

pub const NUM_LANDMARKS: usize = 5;
/// Landmarks stay at least this many pixels away from every frame edge.
pub const EDGE_MARGIN: f64 = 4.0;
/// Input pixels per heatmap pixel.
pub const HEATMAP_STRIDE: usize = 2;

/// Canonical layout on a 64×64 frame.
const TEMPLATE: [[f64; 2]; NUM_LANDMARKS] = [
    [22.0, 26.0],
    [42.0, 26.0],
    [32.0, 36.0],
    [24.0, 46.0],
    [40.0, 46.0],
];
/// Blob (σ, amplitude) per landmark type.
const BLOBS: [(f64, f64); NUM_LANDMARKS] = [(2.0, 0.9), (2.0, 0.9), (1.4, 0.7), (1.1, 0.8), (1.1, 0.8)];
const STROKE_SIGMA: f64 = 0.8;
const STROKE_AMPLITUDE: f64 = 0.35;
const NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `1 × H × W` grayscale image.
    pub input: Array3<f64>,
    /// Landmarks in input-pixel coordinates.
    pub gt_landmarks: LandmarkSet,
    /// Heatmaps at `H/2 × W/2` with a trailing boundary channel.
    pub gt_heatmaps: HeatmapStack,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_landmarks(rng: &mut ChaCha8Rng, frame: Frame) -> LandmarkSet {
    let sx = frame.width as f64 / 64.0;
    let sy = frame.height as f64 / 64.0;
    let scale = rng.gen_range(0.85..1.15);
    let angle = rng.gen_range(-15.0f64..15.0).to_radians();
    let tx = rng.gen_range(-5.0..5.0) * sx;
    let ty = rng.gen_range(-5.0..5.0) * sy;
    let jitter = Normal::new(0.0, 1.0).expect("positive std");
    let (sin, cos) = angle.sin_cos();
    let (cx, cy) = (32.0, 36.0);
    let hi_x = frame.width as f64 - 1.0 - EDGE_MARGIN;
    let hi_y = frame.height as f64 - 1.0 - EDGE_MARGIN;
    let points = TEMPLATE
        .iter()
        .map(|&[x, y]| {
            let (dx, dy) = (x - cx, y - cy);
            let rx = scale * (cos * dx - sin * dy) + cx;
            let ry = scale * (sin * dx + cos * dy) + cy;
            let jx: f64 = jitter.sample(rng);
            let jy: f64 = jitter.sample(rng);
            [
                ((rx + jx.clamp(-2.0, 2.0)) * sx + tx).clamp(EDGE_MARGIN, hi_x),
                ((ry + jy.clamp(-2.0, 2.0)) * sy + ty).clamp(EDGE_MARGIN, hi_y),
            ]
        })
        .collect();
    LandmarkSet::new(points)
}

fn render_image(rng: &mut ChaCha8Rng, landmarks: &LandmarkSet, frame: Frame) -> Array2<f64> {
    let background = rng.gen_range(0.0..0.2);
    let gx = rng.gen_range(-0.1..0.1);
    let gy = rng.gen_range(-0.1..0.1);
    let (w, h) = (frame.width as f64, frame.height as f64);
    let mut img = Array2::from_shape_fn((frame.height, frame.width), |(r, c)| {
        background + gx * (c as f64 / w - 0.5) + gy * (r as f64 / h - 0.5)
    });
    for (k, &[lx, ly]) in landmarks.points().iter().enumerate() {
        let (sigma, amp) = BLOBS[k];
        let amp = amp * rng.gen_range(0.85..1.15);
        let reach = (3.0 * sigma).ceil() as i64;
        let two_var = 2.0 * sigma * sigma;
        let (cx, cy) = (lx.round() as i64, ly.round() as i64);
        for r in (cy - reach).max(0)..=(cy + reach).min(frame.height as i64 - 1) {
            for c in (cx - reach).max(0)..=(cx + reach).min(frame.width as i64 - 1) {
                let d2 = (c as f64 - lx).powi(2) + (r as f64 - ly).powi(2);
                img[[r as usize, c as usize]] += amp * (-d2 / two_var).exp();
            }
        }
    }
    let raster = rasterize_boundary(landmarks, &BoundarySchema::five_point(), frame)
        .expect("landmarks are inside the frame");
    let strokes = crate::boundary::boundary_heatmap(&raster, STROKE_SIGMA).expect("positive sigma");
    img.scaled_add(STROKE_AMPLITUDE, &strokes);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    img.mapv_inplace(|v| v + noise.sample(rng));
    img
}

/// Builds sample `index` of the dataset identified by `seed`.
pub fn generate_sample(seed: u64, index: u64, frame: Frame) -> SyntheticSample {
    assert!(
        frame.height % 4 == 0 && frame.width % 4 == 0 && frame.height >= 16 && frame.width >= 16,
        "frame sides must be multiples of 4 and at least 16"
    );
    let mut rng = sample_rng(seed, index);
    let landmarks = sample_landmarks(&mut rng, frame);
    let image = render_image(&mut rng, &landmarks, frame);

    let hm_frame = Frame::new(frame.height / HEATMAP_STRIDE, frame.width / HEATMAP_STRIDE);
    let hm_landmarks = landmarks.scaled(1.0 / HEATMAP_STRIDE as f64);
    let kernel = GaussianSpec {
        subpixel: true,
        ..GaussianSpec::default()
    };
    let heatmaps = render_heatmap(&hm_landmarks, hm_frame, kernel, FramePolicy::Reject)
        .expect("landmarks are inside the frame");
    let boundary = boundary_channel(&hm_landmarks, &BoundarySchema::five_point(), hm_frame, 1.0)
        .expect("landmarks are inside the frame");
    let gt_heatmaps = heatmaps
        .with_boundary(boundary.view())
        .expect("frames agree");
    SyntheticSample {
        input: image.insert_axis(Axis(0)),
        gt_landmarks: landmarks,
        gt_heatmaps,
    }
}

/// Samples `start..start + count` of the dataset identified by `seed`.
pub fn generate_range(seed: u64, start: u64, count: usize, frame: Frame) -> Vec<SyntheticSample> {
    (start..start + count as u64)
        .map(|i| generate_sample(seed, i, frame))
        .collect()
}

pub fn generate_dataset(seed: u64, count: usize, frame: Frame) -> Vec<SyntheticSample> {
    generate_range(seed, 0, count, frame)
}
