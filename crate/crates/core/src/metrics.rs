//! Landmark localization metrics: NME, failure rate, CED/AUC and PCK.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;

/// Number of CED samples over `[0, threshold]`.
pub const CED_POINTS: usize = 1001;

/// How the per-image normalization distance `d` is obtained from the
/// ground-truth landmarks.
#[derive(Clone, Debug, PartialEq)]
pub enum NormalizationRule {
    /// Distance between two landmarks (typically the outer eye corners).
    InterOcular(usize, usize),
    /// Distance between the centroids of two landmark sets (eye centres).
    InterPupil(Vec<usize>, Vec<usize>),
    /// Distance between two landmarks spanning the torso.
    Torso(usize, usize),
    Constant(f64),
}

fn centroid(set: &LandmarkSet, idx: &[usize]) -> [f64; 2] {
    let n = idx.len() as f64;
    let (sx, sy) = idx.iter().fold((0.0, 0.0), |(x, y), &i| {
        let p = set.point(i);
        (x + p[0], y + p[1])
    });
    [sx / n, sy / n]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl NormalizationRule {
    fn indices(&self) -> Vec<usize> {
        match self {
            Self::InterOcular(i, j) | Self::Torso(i, j) => vec![*i, *j],
            Self::InterPupil(a, b) => a.iter().chain(b).copied().collect(),
            Self::Constant(_) => Vec::new(),
        }
    }

    /// Normalization distance for one ground-truth shape.
    pub fn distance(&self, gt: &LandmarkSet) -> Result<f64> {
        if let Some(&bad) = self.indices().iter().find(|&&i| i >= gt.len()) {
            return Err(Error::InvalidParam(format!(
                "normalization references landmark {bad}, set has {}",
                gt.len()
            )));
        }
        let d = match self {
            Self::InterOcular(i, j) | Self::Torso(i, j) => dist(gt.point(*i), gt.point(*j)),
            Self::InterPupil(a, b) => {
                if a.is_empty() || b.is_empty() {
                    return Err(Error::InvalidParam("inter-pupil sets must be nonempty".into()));
                }
                dist(centroid(gt, a), centroid(gt, b))
            }
            Self::Constant(d) => *d,
        };
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::DegenerateNormalization(d));
        }
        Ok(d)
    }
}

fn parse_indices(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::InvalidParam(format!("bad landmark index '{p}': {e}")))
        })
        .collect()
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    match parse_indices(s)?.as_slice() {
        [i, j] => Ok((*i, *j)),
        _ => Err(Error::InvalidParam(format!("expected two indices 'i,j', got '{s}'"))),
    }
}

/// `interocular:i,j`, `interpupil:a,b,..;c,d,..`, `torso:i,j` or `const:d`.
impl FromStr for NormalizationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidParam(format!("normalization '{s}' lacks ':'")))?;
        match kind.trim() {
            "interocular" => parse_pair(args).map(|(i, j)| Self::InterOcular(i, j)),
            "torso" => parse_pair(args).map(|(i, j)| Self::Torso(i, j)),
            "interpupil" => {
                let (a, b) = args.split_once(';').ok_or_else(|| {
                    Error::InvalidParam("interpupil needs two ';'-separated sets".into())
                })?;
                Ok(Self::InterPupil(parse_indices(a)?, parse_indices(b)?))
            }
            "const" => args
                .trim()
                .parse::<f64>()
                .map(Self::Constant)
                .map_err(|e| Error::InvalidParam(format!("bad constant '{args}': {e}"))),
            other => Err(Error::InvalidParam(format!("unknown normalization '{other}'"))),
        }
    }
}

impl fmt::Display for NormalizationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            Self::InterOcular(i, j) => write!(f, "interocular:{i},{j}"),
            Self::Torso(i, j) => write!(f, "torso:{i},{j}"),
            Self::InterPupil(a, b) => write!(f, "interpupil:{};{}", join(a), join(b)),
            Self::Constant(d) => write!(f, "const:{d}"),
        }
    }
}

fn per_point_errors(gt: &LandmarkSet, pred: &LandmarkSet) -> Result<Vec<f64>> {
    if gt.len() != pred.len() {
        return Err(Error::Shape {
            expected: vec![gt.len()],
            actual: vec![pred.len()],
        });
    }
    Ok((0..gt.len())
        .filter(|&i| gt.visibility_of(i).is_labeled())
        .map(|i| dist(gt.point(i), pred.point(i)))
        .collect())
}

/// Mean Euclidean landmark error divided by the normalization distance.
/// Unlabeled ground-truth points are left out of the mean.
pub fn nme(gt: &LandmarkSet, pred: &LandmarkSet, norm: &NormalizationRule) -> Result<f64> {
    let errors = per_point_errors(gt, pred)?;
    let d = norm.distance(gt)?;
    if errors.is_empty() {
        return Err(Error::UndefinedMetric("no labeled landmarks"));
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64 / d)
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("threshold must be positive, got {t}")))
    }
}

/// Fraction of images whose NME is strictly above `threshold`.
pub fn failure_rate(nmes: &[f64], threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if nmes.is_empty() {
        return Err(Error::UndefinedMetric("failure rate of an empty list"));
    }
    let failed = nmes.iter().filter(|&&e| e > threshold).count();
    Ok(failed as f64 / nmes.len() as f64)
}

/// Empirical CDF of NME sampled on a uniform grid, plus its normalized area.
#[derive(Clone, Debug, PartialEq)]
pub struct Ced {
    /// `(nme, fraction of images with NME ≤ nme)` pairs.
    pub curve: Vec<(f64, f64)>,
    pub auc: f64,
}

/// CED over `[0, threshold]` on [`CED_POINTS`] samples; the AUC is the
/// trapezoidal area divided by `threshold`, so perfect predictions give 1.
pub fn ced_auc(nmes: &[f64], threshold: f64) -> Result<Ced> {
    check_threshold(threshold)?;
    if nmes.is_empty() {
        return Err(Error::UndefinedMetric("CED of an empty list"));
    }
    let mut sorted = nmes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let step = threshold / (CED_POINTS - 1) as f64;
    let curve: Vec<(f64, f64)> = (0..CED_POINTS)
        .map(|k| {
            let x = if k == CED_POINTS - 1 { threshold } else { k as f64 * step };
            let below = sorted.partition_point(|&e| e <= x);
            (x, below as f64 / n)
        })
        .collect();
    let area: f64 = curve
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum();
    Ok(Ced {
        curve,
        auc: area / threshold,
    })
}

/// Fraction of landmarks whose error is at most `fraction · d`.
pub fn pck(
    gt: &LandmarkSet,
    pred: &LandmarkSet,
    norm: &NormalizationRule,
    fraction: f64,
) -> Result<f64> {
    check_threshold(fraction)?;
    let errors = per_point_errors(gt, pred)?;
    let d = norm.distance(gt)?;
    if errors.is_empty() {
        return Err(Error::UndefinedMetric("no labeled landmarks"));
    }
    let limit = fraction * d;
    Ok(errors.iter().filter(|&&e| e <= limit).count() as f64 / errors.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_image_nme: Vec<f64>,
    pub fr_threshold: f64,
    pub fr: f64,
    pub auc_threshold: f64,
    pub auc: f64,
    pub ced: Vec<(f64, f64)>,
    /// Mean PCK over images, when a fraction was requested.
    pub pck: Option<f64>,
    pub mean_nme: f64,
}

/// Evaluates paired ground-truth and predicted shapes.
pub fn evaluate(
    gt: &[LandmarkSet],
    pred: &[LandmarkSet],
    norm: &NormalizationRule,
    fr_threshold: f64,
    auc_threshold: f64,
    pck_fraction: Option<f64>,
) -> Result<MetricsReport> {
    if gt.len() != pred.len() {
        return Err(Error::Shape {
            expected: vec![gt.len()],
            actual: vec![pred.len()],
        });
    }
    let per_image_nme = gt
        .iter()
        .zip(pred)
        .map(|(g, p)| nme(g, p, norm))
        .collect::<Result<Vec<_>>>()?;
    let fr = failure_rate(&per_image_nme, fr_threshold)?;
    let ced = ced_auc(&per_image_nme, auc_threshold)?;
    let pck = match pck_fraction {
        Some(f) => {
            let vals = gt
                .iter()
                .zip(pred)
                .map(|(g, p)| pck(g, p, norm, f))
                .collect::<Result<Vec<_>>>()?;
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
        None => None,
    };
    let mean_nme = per_image_nme.iter().sum::<f64>() / per_image_nme.len() as f64;
    Ok(MetricsReport {
        per_image_nme,
        fr_threshold,
        fr,
        auc_threshold,
        auc: ced.auc,
        ced: ced.curve,
        pck,
        mean_nme,
    })
}
