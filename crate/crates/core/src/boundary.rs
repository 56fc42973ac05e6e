//! Boundary channel generation.
//!
//! Landmarks are joined into polylines according to a [`BoundarySchema`],
//! rasterized, turned into a Gaussian of the Euclidean distance to the line
//! and finally merged into a single channel by per-pixel maximum.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{check_shape, Error, Result};
use crate::heatmap::{round_half_up, Frame, LandmarkSet, Visibility};

/// Gaussian-of-distance values beyond this many σ are set to zero.
pub const CUTOFF_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub indices: Vec<usize>,
    pub closed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundarySchema {
    segments: Vec<Segment>,
}

impl BoundarySchema {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if s.indices.len() < 2 {
                return Err(Error::InvalidParam(format!(
                    "boundary segment {i} needs at least 2 points"
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Checks every index against a landmark schema of `n` points.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        for (i, s) in self.segments.iter().enumerate() {
            if let Some(&bad) = s.indices.iter().find(|&&k| k >= n) {
                return Err(Error::InvalidParam(format!(
                    "boundary segment {i} references landmark {bad}, schema has {n}"
                )));
            }
        }
        Ok(())
    }

    /// Built-in schema for the 5-point layout (left eye, right eye, nose,
    /// left mouth corner, right mouth corner): the eye line, the mouth line
    /// and a closed nose–mouth triangle.
    pub fn five_point() -> Self {
        Self {
            segments: vec![
                Segment {
                    indices: vec![0, 1],
                    closed: false,
                },
                Segment {
                    indices: vec![3, 4],
                    closed: false,
                },
                Segment {
                    indices: vec![2, 3, 4],
                    closed: true,
                },
            ],
        }
    }
}

/// One line per segment: `closed` or `open`, then landmark indices.
impl FromStr for BoundarySchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut segments = Vec::new();
        for (n, raw) in s.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let closed = match parts.next() {
                Some("closed") => true,
                Some("open") => false,
                Some(other) => {
                    return Err(Error::Parse {
                        line: n + 1,
                        msg: format!("expected 'open' or 'closed', got '{other}'"),
                    })
                }
                None => unreachable!("line is not empty"),
            };
            let indices = parts
                .map(|p| {
                    p.parse::<usize>().map_err(|e| Error::Parse {
                        line: n + 1,
                        msg: format!("bad landmark index '{p}': {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if indices.len() < 2 {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: "segment needs at least 2 landmark indices".into(),
                });
            }
            segments.push(Segment { indices, closed });
        }
        Ok(Self { segments })
    }
}

impl fmt::Display for BoundarySchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.segments {
            f.write_str(if s.closed { "closed" } else { "open" })?;
            for i in &s.indices {
                write!(f, " {i}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn draw_line(grid: &mut Array2<f64>, a: [f64; 2], b: [f64; 2]) {
    let (h, w) = grid.dim();
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let steps = dx.abs().max(dy.abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = round_half_up(a[0] + t * dx);
        let y = round_half_up(a[1] + t * dy);
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            grid[[y as usize, x as usize]] = 1.0;
        }
    }
}

/// Rasterizes a single segment. Returns `None` (with a warning) when any of
/// its landmarks is not visible.
pub fn rasterize_segment(
    landmarks: &LandmarkSet,
    segment: &Segment,
    frame: Frame,
) -> Result<Option<Array2<f64>>> {
    if let Some(&bad) = segment.indices.iter().find(|&&k| k >= landmarks.len()) {
        return Err(Error::InvalidParam(format!(
            "segment references landmark {bad}, set has {}",
            landmarks.len()
        )));
    }
    if let Some(&hidden) = segment
        .indices
        .iter()
        .find(|&&k| landmarks.visibility_of(k) != Visibility::Visible)
    {
        log::warn!("skipping boundary segment {:?}: landmark {hidden} is not visible", segment.indices);
        return Ok(None);
    }
    let mut grid = Array2::<f64>::zeros((frame.height, frame.width));
    let pts: Vec<[f64; 2]> = segment.indices.iter().map(|&k| landmarks.point(k)).collect();
    for pair in pts.windows(2) {
        draw_line(&mut grid, pair[0], pair[1]);
    }
    if segment.closed && pts.len() > 2 {
        draw_line(&mut grid, pts[pts.len() - 1], pts[0]);
    }
    Ok(Some(grid))
}

/// Binary raster of all segments in `schema`. Segments touching an invisible
/// landmark are skipped.
pub fn rasterize_boundary(
    landmarks: &LandmarkSet,
    schema: &BoundarySchema,
    frame: Frame,
) -> Result<Array2<f64>> {
    landmarks.validate_in(frame)?;
    let mut grid = Array2::<f64>::zeros((frame.height, frame.width));
    for s in schema.segments() {
        if let Some(r) = rasterize_segment(landmarks, s, frame)? {
            ndarray::Zip::from(&mut grid).and(&r).for_each(|g: &mut f64, &v| *g = g.max(v));
        }
    }
    Ok(grid)
}

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas rooted at the finite samples).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let Some(mut kk) = k else {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = Some(0);
            continue;
        };
        let intersect = |p: usize| {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
        };
        let mut s = intersect(v[kk]);
        while s <= z[kk] {
            kk -= 1;
            s = intersect(v[kk]);
        }
        kk += 1;
        v[kk] = q;
        z[kk] = s;
        z[kk + 1] = f64::INFINITY;
        k = Some(kk);
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut kk = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[kk + 1] < q as f64 {
            kk += 1;
        }
        let d = q as f64 - v[kk] as f64;
        *o = d * d + f[v[kk]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest nonzero
/// pixel of `raster`. Infinite everywhere when the raster is empty.
pub fn squared_distance_transform(raster: &Array2<f64>) -> Array2<f64> {
    let (h, w) = raster.dim();
    let mut d = raster.mapv(|v| if v != 0.0 { 0.0 } else { f64::INFINITY });
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = d[[r, c]];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            d[[r, c]] = out[r];
        }
    }
    for r in 0..h {
        for c in 0..w {
            f[c] = d[[r, c]];
        }
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for c in 0..w {
            d[[r, c]] = out[c];
        }
    }
    d
}

/// `exp(−D²/2σ²)` of the distance to the raster, zero beyond 3σ.
pub fn boundary_heatmap(raster: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParam(format!("sigma must be positive, got {sigma}")));
    }
    let cutoff2 = (CUTOFF_SIGMAS * sigma).powi(2);
    let two_var = 2.0 * sigma * sigma;
    Ok(squared_distance_transform(raster).mapv(|d2| {
        if d2 > cutoff2 {
            0.0
        } else {
            (-d2 / two_var).exp()
        }
    }))
}

/// Pixelwise maximum over `grids`; all zeros for an empty list.
pub fn merge_boundaries(grids: &[Array2<f64>], frame: Frame) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((frame.height, frame.width));
    for g in grids {
        check_shape(&[frame.height, frame.width], g.shape())?;
        ndarray::Zip::from(&mut out).and(g).for_each(|o: &mut f64, &v| *o = o.max(v));
    }
    Ok(out)
}

/// Full boundary channel: per-segment raster → distance Gaussian → merge.
pub fn boundary_channel(
    landmarks: &LandmarkSet,
    schema: &BoundarySchema,
    frame: Frame,
    sigma: f64,
) -> Result<Array2<f64>> {
    landmarks.validate_in(frame)?;
    let mut per_segment = Vec::with_capacity(schema.segments().len());
    for s in schema.segments() {
        if let Some(r) = rasterize_segment(landmarks, s, frame)? {
            per_segment.push(boundary_heatmap(&r, sigma)?);
        }
    }
    merge_boundaries(&per_segment, frame)
}
