//! Elementwise regression losses with closed-form gradients.
//!
//! Every loss is evaluated on a single pair `(y, ŷ)` of ground-truth and
//! predicted intensities and returns both the value and `∂loss/∂ŷ`.
//! Arithmetic is always `f64`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, Zip};

use crate::error::{check_shape, Error, Result};
use crate::heatmap::HeatmapStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    L1,
    Wing,
    AWing,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Mse, LossKind::L1, LossKind::Wing, LossKind::AWing];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::L1 => "l1",
            LossKind::Wing => "wing",
            LossKind::AWing => "awing",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" | "l2" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            "wing" => Ok(LossKind::Wing),
            "awing" | "adaptive-wing" | "aw" => Ok(LossKind::AWing),
            other => Err(Error::InvalidParam(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Hyperparameters shared by the Wing family. `omega` and `epsilon` are used
/// by both Wing and Adaptive Wing; `theta` and `alpha` only by Adaptive Wing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub omega: f64,
    pub epsilon: f64,
    pub theta: f64,
    pub alpha: f64,
    pub kind: LossKind,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            omega: 14.0,
            epsilon: 1.0,
            theta: 0.5,
            alpha: 2.1,
            kind: LossKind::AWing,
        }
    }
}

impl LossParams {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega", self.omega),
            ("epsilon", self.epsilon),
            ("theta", self.theta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha > 2.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "alpha must exceed 2, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Evaluates the selected loss at one pixel.
    pub fn eval(&self, y: f64, yhat: f64) -> Result<LossSurface> {
        match self.kind {
            LossKind::Mse => Ok(mse_loss(y, yhat)),
            LossKind::L1 => Ok(l1_loss(y, yhat)),
            LossKind::Wing => Ok(wing_loss(y, yhat, self)),
            LossKind::AWing => awing_loss(y, yhat, self),
        }
    }
}

/// Loss value and its derivative with respect to the prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSurface {
    pub value: f64,
    pub gradient: f64,
}

/// Sign of `ŷ − y`, zero at zero error.
fn error_sign(y: f64, yhat: f64) -> f64 {
    if yhat > y {
        1.0
    } else if yhat < y {
        -1.0
    } else {
        0.0
    }
}

pub fn mse_loss(y: f64, yhat: f64) -> LossSurface {
    let d = yhat - y;
    LossSurface {
        value: d * d,
        gradient: 2.0 * d,
    }
}

/// L1 loss; the gradient at zero error is 0.
pub fn l1_loss(y: f64, yhat: f64) -> LossSurface {
    LossSurface {
        value: (y - yhat).abs(),
        gradient: error_sign(y, yhat),
    }
}

/// Offset of the Wing linear branch, `ω − ω·ln(1 + ω/ε)`.
pub fn wing_constant(omega: f64, epsilon: f64) -> f64 {
    omega - omega * (omega / epsilon).ln_1p()
}

/// Wing nonlinear branch `ω·ln(1 + e/ε)` at absolute error `e`.
pub fn wing_nonlinear(abs_err: f64, params: &LossParams) -> f64 {
    params.omega * (abs_err / params.epsilon).ln_1p()
}

/// Wing linear branch `e − C`.
pub fn wing_linear(abs_err: f64, params: &LossParams) -> f64 {
    abs_err - wing_constant(params.omega, params.epsilon)
}

/// Wing loss. The gradient at zero error is 0.
pub fn wing_loss(y: f64, yhat: f64, params: &LossParams) -> LossSurface {
    let e = (y - yhat).abs();
    let (value, slope) = if e < params.omega {
        (wing_nonlinear(e, params), params.omega / (params.epsilon + e))
    } else {
        (wing_linear(e, params), 1.0)
    };
    LossSurface {
        value,
        gradient: slope * error_sign(y, yhat),
    }
}

/// Adaptive Wing constants `(A, C)` for ground-truth intensity `y`.
pub fn awing_constants(y: f64, params: &LossParams) -> (f64, f64) {
    let LossParams {
        omega,
        epsilon,
        theta,
        alpha,
        ..
    } = *params;
    let p = alpha - y;
    let ratio = theta / epsilon;
    let a = omega * (1.0 / (1.0 + ratio.powf(p))) * p * ratio.powf(p - 1.0) * (1.0 / epsilon);
    let c = theta * a - omega * ratio.powf(p).ln_1p();
    (a, c)
}

/// Adaptive Wing nonlinear branch `ω·ln(1 + (e/ε)^(α−y))`.
pub fn awing_nonlinear(y: f64, abs_err: f64, params: &LossParams) -> f64 {
    params.omega * (abs_err / params.epsilon).powf(params.alpha - y).ln_1p()
}

/// Adaptive Wing linear branch `A·e − C`.
pub fn awing_linear(y: f64, abs_err: f64, params: &LossParams) -> f64 {
    let (a, c) = awing_constants(y, params);
    a * abs_err - c
}

/// Adaptive Wing loss. `y` must lie in [0, 1]; the nonlinear branch is used
/// for `|y − ŷ| < θ` and the linear branch otherwise.
pub fn awing_loss(y: f64, yhat: f64, params: &LossParams) -> Result<LossSurface> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Domain(format!(
            "adaptive wing target {y} outside [0, 1]"
        )));
    }
    let e = (y - yhat).abs();
    let p = params.alpha - y;
    let (value, slope) = if e < params.theta {
        let r = e / params.epsilon;
        let rp = r.powf(p);
        let slope = if e == 0.0 {
            0.0
        } else {
            params.omega * p * r.powf(p - 1.0) / (params.epsilon * (1.0 + rp))
        };
        (params.omega * rp.ln_1p(), slope)
    } else {
        let (a, c) = awing_constants(y, params);
        (a * e - c, a)
    };
    Ok(LossSurface {
        value,
        gradient: slope * error_sign(y, yhat),
    })
}

/// Magnitude of the loss gradient at signed error `y − ŷ = error`.
pub fn influence(error: f64, y: f64, params: &LossParams) -> Result<f64> {
    Ok(params.eval(y, y - error)?.gradient.abs())
}

/// Per-pixel values and gradients of a loss over a whole stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrid {
    pub values: Array3<f64>,
    pub gradients: Array3<f64>,
}

impl LossGrid {
    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// Applies the selected loss elementwise to raw arrays.
pub fn loss_grid(
    gt: ArrayView3<'_, f64>,
    pred: ArrayView3<'_, f64>,
    params: &LossParams,
) -> Result<LossGrid> {
    check_shape(gt.shape(), pred.shape())?;
    let mut values = Array3::zeros(gt.raw_dim());
    let mut gradients = Array3::zeros(gt.raw_dim());
    let mut failure = None;
    Zip::from(&mut values)
        .and(&mut gradients)
        .and(gt)
        .and(pred)
        .for_each(|v, g, &y, &yh| match params.eval(y, yh) {
            Ok(s) => {
                *v = s.value;
                *g = s.gradient;
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        });
    match failure {
        Some(e) => Err(e),
        None => Ok(LossGrid { values, gradients }),
    }
}

/// Per-pixel loss between two stacks together with its mean over all pixels
/// and channels.
pub fn batch_loss(
    gt: &HeatmapStack,
    pred: &HeatmapStack,
    params: &LossParams,
) -> Result<(Array3<f64>, f64)> {
    let grid = loss_grid(gt.data().view(), pred.data().view(), params)?;
    let mean = grid.mean();
    Ok((grid.values, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn defaults() -> LossParams {
        LossParams::default()
    }

    fn central_diff(params: &LossParams, y: f64, yhat: f64, h: f64) -> f64 {
        let f = |v| params.eval(y, v).unwrap().value;
        (f(yhat + h) - f(yhat - h)) / (2.0 * h)
    }

    #[test]
    fn defaults_are_valid() {
        defaults().validate().unwrap();
        let bad = LossParams {
            alpha: 2.0,
            ..defaults()
        };
        assert!(bad.validate().is_err());
        let bad = LossParams {
            epsilon: 0.0,
            ..defaults()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mse_and_l1_by_definition() {
        assert_eq!(mse_loss(1.0, 0.0), LossSurface { value: 1.0, gradient: -2.0 });
        assert_relative_eq!(mse_loss(0.5, 0.3).value, 0.04, epsilon = 1e-15);
        assert_eq!(l1_loss(0.3, 0.3), LossSurface { value: 0.0, gradient: 0.0 });
        assert_eq!(l1_loss(0.3, 0.5).gradient, 1.0);
    }

    #[test]
    fn wing_zero_and_continuity() {
        let p = LossParams::with_kind(LossKind::Wing);
        assert_eq!(wing_loss(0.4, 0.4, &p), LossSurface { value: 0.0, gradient: 0.0 });
        let at = p.omega;
        let expected = p.omega * (1.0 + p.omega / p.epsilon).ln();
        assert_relative_eq!(wing_nonlinear(at, &p), expected, epsilon = 1e-12);
        assert!((wing_nonlinear(at, &p) - wing_linear(at, &p)).abs() < 1e-9);
    }

    #[test]
    fn wing_closed_form_value() {
        // 14·ln(1.1), evaluated independently
        let p = LossParams::with_kind(LossKind::Wing);
        let v = wing_loss(1.0, 0.9, &p).value;
        assert_relative_eq!(v, 1.334_342_517_260_548_0, epsilon = 1e-12);
    }

    #[test]
    fn awing_zero_at_exact_prediction() {
        for y in [0.0, 0.5, 1.0] {
            let s = awing_loss(y, y, &defaults()).unwrap();
            assert_eq!(s, LossSurface { value: 0.0, gradient: 0.0 });
        }
    }

    #[test]
    fn awing_closed_form_value() {
        // 14·ln(1 + 0.05^1.1)
        let v = awing_loss(1.0, 0.95, &defaults()).unwrap().value;
        assert_relative_eq!(v, 0.509_412_769_017_157_6, epsilon = 1e-12);
    }

    #[test]
    fn awing_branches_meet_at_theta() {
        let p = defaults();
        for i in 0..=10 {
            let y = i as f64 / 10.0;
            let gap = (awing_nonlinear(y, p.theta, &p) - awing_linear(y, p.theta, &p)).abs();
            assert!(gap < 1e-9, "y={y} gap={gap}");
        }
    }

    #[test]
    fn awing_rejects_targets_outside_unit_interval() {
        assert!(matches!(awing_loss(1.2, 0.0, &defaults()), Err(Error::Domain(_))));
        assert!(awing_loss(-0.1, 0.0, &defaults()).is_err());
    }

    #[test]
    fn awing_linear_branch_has_constant_influence() {
        let p = defaults();
        let (a, _) = awing_constants(0.3, &p);
        for err in [0.5, 0.7, 2.0, -3.0] {
            assert_relative_eq!(influence(err, 0.3, &p).unwrap(), a, epsilon = 1e-12);
        }
    }

    #[test]
    fn influence_grows_with_target_at_small_error() {
        let p = defaults();
        let i0 = influence(0.05, 0.0, &p).unwrap();
        let i5 = influence(0.05, 0.5, &p).unwrap();
        let i1 = influence(0.05, 1.0, &p).unwrap();
        assert!(i0 < i5 && i5 < i1, "{i0} {i5} {i1}");
        assert_eq!(influence(0.0, 0.7, &p).unwrap(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for kind in LossKind::ALL {
            let p = LossParams::with_kind(kind);
            for i in 0..20 {
                for j in 0..20 {
                    let y = (i as f64 + 0.5) / 20.0;
                    let yhat = (j as f64 + 0.25) / 20.0;
                    let e = (y - yhat).abs();
                    if e < 1e-4 || (kind == LossKind::AWing && (e - p.theta).abs() < 1e-4) {
                        continue;
                    }
                    let g = p.eval(y, yhat).unwrap().gradient;
                    let fd = central_diff(&p, y, yhat, h);
                    let rel = (g - fd).abs() / g.abs().max(1e-8);
                    assert!(rel < 1e-5, "{kind} y={y} yhat={yhat}: {g} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn awing_gradient_vanishes_at_zero() {
        // |g| ≤ ω(α−y)|Δ|^(α−y−1) with α−y−1 ≥ 0.1, so the decay is slow near y = 1
        let p = defaults();
        for i in 0..=10 {
            let y = i as f64 / 10.0;
            let mut prev = f64::INFINITY;
            for k in 1..=12 {
                let yhat = y + 10f64.powi(-k);
                let d = yhat - y;
                let g = awing_loss(y, yhat, &p).unwrap().gradient;
                let bound = p.omega * (p.alpha - y) * d.powf(p.alpha - y - 1.0);
                assert!(g > 0.0 && g < prev && g <= bound * (1.0 + 1e-12), "y={y} d={d} g={g}");
                prev = g;
            }
        }
        let g = awing_loss(0.0, 1e-60, &p).unwrap().gradient;
        assert!(g > 0.0 && g < 1e-3);
    }

    #[test]
    fn batch_loss_shape_mismatch() {
        let a = HeatmapStack::zeros(1, crate::Frame::new(2, 2));
        let b = HeatmapStack::zeros(2, crate::Frame::new(2, 2));
        assert!(matches!(batch_loss(&a, &b, &defaults()), Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_loss_on_identical_stacks_is_zero() {
        let a = HeatmapStack::new(Array3::from_elem((2, 3, 3), 0.4), false).unwrap();
        for kind in LossKind::ALL {
            assert_eq!(batch_loss(&a, &a, &LossParams::with_kind(kind)).unwrap().1, 0.0);
        }
    }

    #[test]
    fn batch_loss_degenerate_shape_matches_scalar() {
        let gt = HeatmapStack::new(Array3::from_elem((1, 1, 1), 0.8), false).unwrap();
        let pred = HeatmapStack::from_raw(Array3::from_elem((1, 1, 1), 0.1), false).unwrap();
        for kind in LossKind::ALL {
            let p = LossParams::with_kind(kind);
            let (_, mean) = batch_loss(&gt, &pred, &p).unwrap();
            assert_eq!(mean, p.eval(0.8, 0.1).unwrap().value);
        }
    }

    proptest! {
        #[test]
        fn losses_are_symmetric(y in 0.0f64..=1.0, d in 0.0f64..2.0, k in 0usize..4) {
            let p = LossParams::with_kind(LossKind::ALL[k]);
            let a = p.eval(y, y + d).unwrap();
            let b = p.eval(y, y - d).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0));
            prop_assert!((a.gradient + b.gradient).abs() <= 1e-12 * a.gradient.abs().max(1.0));
        }

        #[test]
        fn losses_are_nonnegative(y in 0.0f64..=1.0, yhat in -2.0f64..3.0, k in 0usize..4) {
            let p = LossParams::with_kind(LossKind::ALL[k]);
            prop_assert!(p.eval(y, yhat).unwrap().value >= -1e-12);
        }
    }
}
