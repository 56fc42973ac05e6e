//! Coordinate-encoding channels appended to features before a convolution.
//!
//! `cx`/`cy` run from −1 to 1 across the frame, `radius` is the distance to
//! the frame centre scaled so the corners are 1, and `bx`/`by` keep `cx`/`cy`
//! only where the predicted boundary reaches [`BOUNDARY_THRESHOLD`].

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{check_shape, Error, Result};
use crate::heatmap::Frame;

pub const BOUNDARY_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordChannels {
    pub cx: Array2<f64>,
    pub cy: Array2<f64>,
    pub radius: Array2<f64>,
    /// Filled by [`mask_boundary_coords`]; `None` until then.
    pub bx: Option<Array2<f64>>,
    pub by: Option<Array2<f64>>,
}

pub fn make_xy_radius(frame: Frame) -> Result<CoordChannels> {
    if frame.height < 2 || frame.width < 2 {
        return Err(Error::Domain(format!(
            "coordinate channels need at least 2 pixels per axis, got {}x{}",
            frame.width, frame.height
        )));
    }
    let shape = (frame.height, frame.width);
    let sx = 2.0 / (frame.width as f64 - 1.0);
    let sy = 2.0 / (frame.height as f64 - 1.0);
    let cx = Array2::from_shape_fn(shape, |(_, c)| c as f64 * sx - 1.0);
    let cy = Array2::from_shape_fn(shape, |(r, _)| r as f64 * sy - 1.0);
    let radius = Array2::from_shape_fn(shape, |(r, c)| {
        cx[[r, c]].hypot(cy[[r, c]]) / std::f64::consts::SQRT_2
    });
    Ok(CoordChannels {
        cx,
        cy,
        radius,
        bx: None,
        by: None,
    })
}

/// Masks `cx`/`cy` by `boundary_pred >= threshold`, zero elsewhere.
pub fn mask_boundary_coords_at(
    coords: &CoordChannels,
    boundary_pred: ArrayView2<'_, f64>,
    threshold: f64,
) -> Result<CoordChannels> {
    check_shape(coords.cx.shape(), boundary_pred.shape())?;
    let keep = |src: &Array2<f64>| {
        let mut out = src.clone();
        ndarray::Zip::from(&mut out)
            .and(boundary_pred)
            .for_each(|o, &b| {
                if !(b >= threshold) {
                    *o = 0.0;
                }
            });
        out
    };
    Ok(CoordChannels {
        bx: Some(keep(&coords.cx)),
        by: Some(keep(&coords.cy)),
        ..coords.clone()
    })
}

pub fn mask_boundary_coords(
    coords: &CoordChannels,
    boundary_pred: ArrayView2<'_, f64>,
) -> Result<CoordChannels> {
    mask_boundary_coords_at(coords, boundary_pred, BOUNDARY_THRESHOLD)
}

/// Which coordinate channels to append. Appended in the order cx, cy,
/// radius, bx, by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct CoordSelection {
    pub cx: bool,
    pub cy: bool,
    pub radius: bool,
    pub bx: bool,
    pub by: bool,
}

impl CoordSelection {
    pub const NONE: Self = Self {
        cx: false,
        cy: false,
        radius: false,
        bx: false,
        by: false,
    };
    pub const ALL: Self = Self {
        cx: true,
        cy: true,
        radius: true,
        bx: true,
        by: true,
    };
    pub const XY_RADIUS: Self = Self {
        cx: true,
        cy: true,
        radius: true,
        bx: false,
        by: false,
    };

    pub fn count(&self) -> usize {
        [self.cx, self.cy, self.radius, self.bx, self.by]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn needs_boundary(&self) -> bool {
        self.bx || self.by
    }

    /// Parses a comma-separated list such as `cx,cy,radius`; `none` and `all`
    /// are accepted.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "" | "none" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut sel = Self::NONE;
        for part in s.split(',') {
            match part.trim() {
                "cx" | "x" => sel.cx = true,
                "cy" | "y" => sel.cy = true,
                "radius" | "r" => sel.radius = true,
                "bx" => sel.bx = true,
                "by" => sel.by = true,
                other => {
                    return Err(Error::InvalidParam(format!(
                        "unknown coordinate channel '{other}'"
                    )))
                }
            }
        }
        Ok(sel)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, name) in [
            (self.cx, "cx"),
            (self.cy, "cy"),
            (self.radius, "radius"),
            (self.bx, "bx"),
            (self.by, "by"),
        ] {
            if on {
                v.push(name);
            }
        }
        v
    }
}

/// Appends the selected coordinate channels to `input` (C×H×W).
pub fn concat_channels(
    input: ArrayView3<'_, f64>,
    coords: &CoordChannels,
    selection: CoordSelection,
) -> Result<Array3<f64>> {
    check_shape(&input.shape()[1..], coords.cx.shape())?;
    let mut out = input.to_owned();
    let missing = || Error::Domain("boundary coordinates requested but not computed".into());
    let mut push = |grid: &Array2<f64>| {
        out.push(Axis(0), grid.view())
            .expect("frame checked above");
    };
    if selection.cx {
        push(&coords.cx);
    }
    if selection.cy {
        push(&coords.cy);
    }
    if selection.radius {
        push(&coords.radius);
    }
    if selection.bx {
        push(coords.bx.as_ref().ok_or_else(missing)?);
    }
    if selection.by {
        push(coords.by.as_ref().ok_or_else(missing)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centre_and_corner_values() {
        let c = make_xy_radius(Frame::new(5, 7)).unwrap();
        assert_eq!((c.cx[[2, 3]], c.cy[[2, 3]], c.radius[[2, 3]]), (0.0, 0.0, 0.0));
        assert_eq!((c.cx[[0, 0]], c.cy[[0, 0]]), (-1.0, -1.0));
        assert!((c.radius[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((c.radius[[4, 6]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_by_three_grids() {
        let c = make_xy_radius(Frame::new(3, 3)).unwrap();
        let s = 0.5f64.sqrt();
        let cx = [[-1.0, 0.0, 1.0]; 3];
        let cy = [[-1.0; 3], [0.0; 3], [1.0; 3]];
        let radius = [[1.0, s, 1.0], [s, 0.0, s], [1.0, s, 1.0]];
        for r in 0..3 {
            for col in 0..3 {
                assert_eq!(c.cx[[r, col]], cx[r][col]);
                assert_eq!(c.cy[[r, col]], cy[r][col]);
                assert!((c.radius[[r, col]] - radius[r][col]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn degenerate_axis_is_rejected() {
        assert!(matches!(make_xy_radius(Frame::new(1, 8)), Err(Error::Domain(_))));
    }

    #[test]
    fn boundary_masking_extremes() {
        let c = make_xy_radius(Frame::new(4, 6)).unwrap();
        let m = mask_boundary_coords(&c, Array2::zeros((4, 6)).view()).unwrap();
        assert!(m.bx.unwrap().iter().all(|&v| v == 0.0));
        let m = mask_boundary_coords(&c, Array2::ones((4, 6)).view()).unwrap();
        assert_eq!(m.bx.unwrap(), c.cx);
        assert_eq!(m.by.unwrap(), c.cy);
        assert!(mask_boundary_coords(&c, Array2::ones((4, 5)).view()).is_err());
    }

    #[test]
    fn boundary_masking_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = make_xy_radius(Frame::new(9, 11)).unwrap();
        let b = Array2::from_shape_fn((9, 11), |_| rng.gen::<f64>() * 0.1);
        let m = mask_boundary_coords(&c, b.view()).unwrap();
        let (bx, by) = (m.bx.unwrap(), m.by.unwrap());
        for r in 0..9 {
            for col in 0..11 {
                let keep = b[[r, col]] >= 0.05;
                assert_eq!(bx[[r, col]], if keep { c.cx[[r, col]] } else { 0.0 });
                assert_eq!(by[[r, col]], if keep { c.cy[[r, col]] } else { 0.0 });
            }
        }
    }

    #[test]
    fn concat_counts_and_contents() {
        let input = Array3::<f64>::zeros((3, 4, 4));
        let c = make_xy_radius(Frame::new(4, 4)).unwrap();
        assert_eq!(concat_channels(input.view(), &c, CoordSelection::NONE).unwrap(), input);
        assert!(concat_channels(input.view(), &c, CoordSelection::ALL).is_err());
        let c = mask_boundary_coords(&c, Array2::from_elem((4, 4), 0.5).view()).unwrap();
        let out = concat_channels(input.view(), &c, CoordSelection::ALL).unwrap();
        assert_eq!(out.shape(), &[8, 4, 4]);
        let fresh = make_xy_radius(Frame::new(4, 4)).unwrap();
        assert_eq!(out.index_axis(Axis(0), 3), fresh.cx);
        assert_eq!(out.index_axis(Axis(0), 4), fresh.cy);
        assert_eq!(out.index_axis(Axis(0), 5), fresh.radius);
        assert_eq!(out.index_axis(Axis(0), 6), fresh.cx);
        let sel = CoordSelection {
            radius: true,
            by: true,
            ..CoordSelection::NONE
        };
        let out = concat_channels(input.view(), &c, sel).unwrap();
        assert_eq!(out.index_axis(Axis(0), 3), fresh.radius);
        assert_eq!(out.index_axis(Axis(0), 4), fresh.cy);
    }

    #[test]
    fn selection_parsing() {
        assert_eq!(CoordSelection::parse("all").unwrap(), CoordSelection::ALL);
        assert_eq!(CoordSelection::parse("cx,cy,radius").unwrap(), CoordSelection::XY_RADIUS);
        assert_eq!(CoordSelection::parse("none").unwrap().count(), 0);
        assert!(CoordSelection::parse("cz").is_err());
    }

    proptest! {
        #[test]
        fn masked_coords_are_zero_or_passthrough(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = make_xy_radius(Frame::new(6, 5)).unwrap();
            let b = Array2::from_shape_fn((6, 5), |_| rng.gen::<f64>() * 0.1);
            let m = mask_boundary_coords(&c, b.view()).unwrap();
            for (v, x) in m.bx.unwrap().iter().zip(c.cx.iter()) {
                prop_assert!(*v == 0.0 || v == x);
            }
        }

        #[test]
        fn threshold_covariance(seed in 0u64..500, k in 0.1f64..10.0, t in 0.01f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = make_xy_radius(Frame::new(5, 5)).unwrap();
            let b = Array2::from_shape_fn((5, 5), |_| rng.gen::<f64>());
            let scaled = b.mapv(|v| v * k);
            let a = mask_boundary_coords_at(&c, scaled.view(), t).unwrap();
            let z = mask_boundary_coords_at(&c, b.view(), t / k).unwrap();
            // exact except where rounding flips a value sitting on the threshold
            for ((x, y), v) in a.bx.unwrap().iter().zip(z.bx.unwrap().iter()).zip(b.iter()) {
                if (v * k - t).abs() > 1e-12 {
                    prop_assert_eq!(x, y);
                }
            }
        }
    }
}
