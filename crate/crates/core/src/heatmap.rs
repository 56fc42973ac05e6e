//! Heatmap encoding and decoding.
//!
//! Ground truth is rendered as one truncated Gaussian per landmark channel.
//! Predictions are decoded with the argmax plus a quarter-pixel shift toward
//! the larger axis neighbour.

use ndarray::{Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::loss_map::gray_dilate_3x3;

/// Grid dimensions shared by heatmaps, masks and coordinate channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
}

impl Frame {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    /// Pixel-centre coordinates of the frame centre.
    pub fn center(&self) -> [f64; 2] {
        [
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Visibility {
    Visible,
    /// Annotated but hidden behind something.
    Occluded,
    Unlabeled,
}

impl Visibility {
    pub fn is_labeled(self) -> bool {
        !matches!(self, Visibility::Unlabeled)
    }

    pub fn code(self) -> u8 {
        match self {
            Visibility::Visible => 1,
            Visibility::Occluded => 2,
            Visibility::Unlabeled => 0,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Visibility::Visible),
            2 => Some(Visibility::Occluded),
            0 => Some(Visibility::Unlabeled),
            _ => None,
        }
    }
}

/// Ordered 2D keypoints. The point count is fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    visibility: Option<Vec<Visibility>>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self {
            points,
            visibility: None,
        }
    }

    pub fn with_visibility(points: Vec<[f64; 2]>, visibility: Vec<Visibility>) -> Result<Self> {
        if points.len() != visibility.len() {
            return Err(Error::Shape {
                expected: vec![points.len()],
                actual: vec![visibility.len()],
            });
        }
        Ok(Self {
            points,
            visibility: Some(visibility),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    pub fn visibility(&self) -> Option<&[Visibility]> {
        self.visibility.as_deref()
    }

    /// Visibility of point `i`; points without explicit flags count as visible.
    pub fn visibility_of(&self, i: usize) -> Visibility {
        self.visibility
            .as_ref()
            .map_or(Visibility::Visible, |v| v[i])
    }

    /// Checks that every visible point lies inside `frame`.
    pub fn validate_in(&self, frame: Frame) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if self.visibility_of(i) == Visibility::Visible && !frame.contains(p[0], p[1]) {
                return Err(Error::OutOfFrame {
                    index: i,
                    x: p[0],
                    y: p[1],
                    width: frame.width,
                    height: frame.height,
                });
            }
        }
        Ok(())
    }

    /// Returns a copy with every coordinate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] * factor, p[1] * factor])
                .collect(),
            visibility: self.visibility.clone(),
        }
    }
}

/// C×H×W intensities, one channel per landmark plus an optional trailing
/// boundary channel.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    data: Array3<f64>,
    has_boundary_channel: bool,
}

impl HeatmapStack {
    pub fn zeros(channels: usize, frame: Frame) -> Self {
        Self {
            data: Array3::zeros((channels, frame.height, frame.width)),
            has_boundary_channel: false,
        }
    }

    /// Wraps a ground-truth style array. Every intensity must lie in [0, 1].
    pub fn new(data: Array3<f64>, has_boundary_channel: bool) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!(
                "heatmap intensity {v} outside [0, 1]"
            )));
        }
        Self::from_raw(data, has_boundary_channel)
    }

    /// Wraps raw network output. Values may fall outside [0, 1] but must be
    /// finite.
    pub fn from_raw(data: Array3<f64>, has_boundary_channel: bool) -> Result<Self> {
        if has_boundary_channel && data.shape()[0] == 0 {
            return Err(Error::Domain(
                "boundary channel flagged on an empty stack".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite heatmap intensity".into()));
        }
        Ok(Self {
            data,
            has_boundary_channel,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn landmark_channels(&self) -> usize {
        self.channels() - usize::from(self.has_boundary_channel)
    }

    pub fn frame(&self) -> Frame {
        Frame::new(self.data.shape()[1], self.data.shape()[2])
    }

    pub fn has_boundary_channel(&self) -> bool {
        self.has_boundary_channel
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), c)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Appends `boundary` as the trailing boundary channel.
    pub fn with_boundary(mut self, boundary: ArrayView2<'_, f64>) -> Result<Self> {
        if self.has_boundary_channel {
            return Err(Error::Domain("stack already has a boundary channel".into()));
        }
        crate::error::check_shape(
            &[self.frame().height, self.frame().width],
            boundary.shape(),
        )?;
        self.data
            .push(Axis(0), boundary)
            .expect("frame checked above");
        self.has_boundary_channel = true;
        Ok(self)
    }
}

/// Gaussian kernel used for rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub sigma: f64,
    /// Side length of the square support; must be odd.
    pub size: usize,
    /// Evaluate the Gaussian at the true (sub-pixel) landmark position instead
    /// of at the rounded pixel. The support window is always centred on the
    /// rounded pixel.
    pub subpixel: bool,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            size: 7,
            subpixel: false,
        }
    }
}

impl GaussianSpec {
    fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "kernel size {} must be odd",
                self.size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParam(format!(
                "kernel sigma {} must be positive",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// What to do with landmarks that fall outside the frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FramePolicy {
    #[default]
    Reject,
    Clamp,
}

/// Round to nearest, ties toward the larger index.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Renders one Gaussian channel per landmark. Unlabeled landmarks produce an
/// all-zero channel.
pub fn render_heatmap(
    landmarks: &LandmarkSet,
    frame: Frame,
    kernel: GaussianSpec,
    policy: FramePolicy,
) -> Result<HeatmapStack> {
    kernel.validate()?;
    let mut stack = Array3::zeros((landmarks.len(), frame.height, frame.width));
    let half = (kernel.size / 2) as i64;
    let two_var = 2.0 * kernel.sigma * kernel.sigma;

    for (c, &[x, y]) in landmarks.points().iter().enumerate() {
        if !landmarks.visibility_of(c).is_labeled() {
            continue;
        }
        let (mut x, mut y) = (x, y);
        let (mut cx, mut cy) = (round_half_up(x), round_half_up(y));
        let inside = cx >= 0 && cy >= 0 && cx < frame.width as i64 && cy < frame.height as i64;
        if !inside || !x.is_finite() || !y.is_finite() {
            match policy {
                FramePolicy::Reject => {
                    return Err(Error::OutOfFrame {
                        index: c,
                        x,
                        y,
                        width: frame.width,
                        height: frame.height,
                    })
                }
                FramePolicy::Clamp => {
                    x = x.clamp(0.0, frame.width as f64 - 1.0);
                    y = y.clamp(0.0, frame.height as f64 - 1.0);
                    cx = round_half_up(x);
                    cy = round_half_up(y);
                }
            }
        }
        let (mx, my) = if kernel.subpixel {
            (x, y)
        } else {
            (cx as f64, cy as f64)
        };
        for py in (cy - half).max(0)..=(cy + half).min(frame.height as i64 - 1) {
            for px in (cx - half).max(0)..=(cx + half).min(frame.width as i64 - 1) {
                let dx = px as f64 - mx;
                let dy = py as f64 - my;
                stack[[c, py as usize, px as usize]] = (-(dx * dx + dy * dy) / two_var).exp();
            }
        }
    }
    HeatmapStack::new(stack, false)
}

/// Decoded landmarks plus a per-channel flag for channels without a usable
/// peak (constant channels, e.g. all zero), which decode to the frame centre.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub landmarks: LandmarkSet,
    pub degenerate: Vec<bool>,
}

/// Argmax of a single channel, first occurrence in row-major order.
pub fn argmax(channel: ArrayView2<'_, f64>) -> (usize, usize) {
    let w = channel.shape()[1];
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in channel.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    (best.0 / w, best.0 % w)
}

fn quarter_shift(lower: Option<f64>, upper: Option<f64>) -> f64 {
    match (lower, upper) {
        (Some(l), Some(u)) if u > l => 0.25,
        (Some(l), Some(u)) if l > u => -0.25,
        _ => 0.0,
    }
}

/// Decodes a single channel to `(x, y)` and a degeneracy flag.
pub fn decode_channel(channel: ArrayView2<'_, f64>) -> ([f64; 2], bool) {
    let (h, w) = (channel.shape()[0], channel.shape()[1]);
    let first = channel.iter().next().copied().unwrap_or(0.0);
    if channel.iter().all(|&v| v == first) {
        let f = Frame::new(h, w);
        return (f.center(), true);
    }
    let (r, c) = argmax(channel);
    let at = |rr: usize, cc: usize| channel[[rr, cc]];
    let left = (c > 0).then(|| at(r, c - 1));
    let right = (c + 1 < w).then(|| at(r, c + 1));
    let up = (r > 0).then(|| at(r - 1, c));
    let down = (r + 1 < h).then(|| at(r + 1, c));
    (
        [
            c as f64 + quarter_shift(left, right),
            r as f64 + quarter_shift(up, down),
        ],
        false,
    )
}

/// Decodes every landmark channel of `pred` (the boundary channel, if any,
/// is skipped).
pub fn decode_landmarks(pred: &HeatmapStack) -> Result<Decoded> {
    let n = pred.landmark_channels();
    if n == 0 {
        return Err(Error::Domain("no landmark channels to decode".into()));
    }
    let mut points = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for c in 0..n {
        let (p, d) = decode_channel(pred.channel(c));
        if d {
            log::warn!("channel {c} has no peak; decoding to frame centre");
        }
        points.push(p);
        degenerate.push(d);
    }
    Ok(Decoded {
        landmarks: LandmarkSet::new(points),
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PixelClass {
    Foreground,
    DifficultBackground,
    Background,
}

/// Per-pixel classes of a ground-truth stack: foreground where the intensity
/// is positive, difficult background where it is zero but the 3×3 dilation is
/// positive, background elsewhere.
pub fn classify_pixels(gt: &HeatmapStack) -> Array3<PixelClass> {
    let dilated = gray_dilate_3x3(gt);
    let mut out = Array3::from_elem(gt.data().raw_dim(), PixelClass::Background);
    ndarray::Zip::from(&mut out)
        .and(gt.data())
        .and(dilated.data())
        .for_each(|o, &v, &d| {
            *o = if v > 0.0 {
                PixelClass::Foreground
            } else if d > 0.0 {
                PixelClass::DifficultBackground
            } else {
                PixelClass::Background
            };
        });
    out
}
