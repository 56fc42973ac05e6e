//! Desk-scale training harness: a tiny heatmap regressor trained with
//! minibatch gradient descent on synthetic faces.

pub mod config;
pub mod data;
pub mod net;

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coords::{concat_channels, make_xy_radius, CoordSelection};
use crate::error::{Error, Result};
use crate::heatmap::{decode_channel, LandmarkSet};
use crate::loss_map::{baseline_weight_map_array, build_mask_array};
use crate::losses::{LossKind, LossParams};
use crate::metrics::{nme, NormalizationRule};

pub use config::{TrainConfig, Weighting};
pub use data::{generate_dataset, generate_range, generate_sample, SyntheticSample, HEATMAP_STRIDE, NUM_LANDMARKS};
pub use net::{Act, NetSpec, TinyNet};

/// Held-out samples start at this index so they never overlap training data.
pub const TEST_INDEX_OFFSET: u64 = 1 << 32;

/// Sample converted to the channel-last rows consumed by the network.
#[derive(Clone, Debug)]
pub struct Prepared {
    input: Array2<f64>,
    target: Array2<f64>,
    multiplier: Option<Array2<f64>>,
    boundary_target: Option<Array2<f64>>,
    boundary_multiplier: Option<Array2<f64>>,
    gt_landmarks: LandmarkSet,
}

fn to_rows(stack: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = stack.dim();
    net::stack_images([stack.view()], c, h, w).data
}

fn multiplier(cfg: &TrainConfig, gt: &Array3<f64>) -> Result<Option<Array2<f64>>> {
    Ok(match cfg.weighting {
        Weighting::None => None,
        Weighting::LossMap => Some(to_rows(&build_mask_array(gt.view(), cfg.weight)?.multiplier())),
        Weighting::Baseline => Some(to_rows(&baseline_weight_map_array(gt.view(), cfg.weight)?)),
    })
}

pub fn prepare(cfg: &TrainConfig, sample: &SyntheticSample) -> Result<Prepared> {
    let input_sel = CoordSelection {
        bx: false,
        by: false,
        ..cfg.coords
    };
    let frame = cfg.frame;
    let coords = make_xy_radius(frame)?;
    let input = concat_channels(sample.input.view(), &coords, input_sel)?;

    let hm = sample.gt_heatmaps.data();
    let n_out = cfg.output_channels();
    let target = hm.slice(s![..n_out, .., ..]).to_owned();
    let boundary = hm.slice(s![NUM_LANDMARKS..NUM_LANDMARKS + 1, .., ..]).to_owned();
    let (boundary_target, boundary_multiplier) = if cfg.coords.needs_boundary() {
        (Some(to_rows(&boundary)), multiplier(cfg, &boundary)?)
    } else {
        (None, None)
    };
    Ok(Prepared {
        input: to_rows(&input),
        multiplier: multiplier(cfg, &target)?,
        target: to_rows(&target),
        boundary_target,
        boundary_multiplier,
        gt_landmarks: sample.gt_landmarks.clone(),
    })
}

pub fn prepare_all(cfg: &TrainConfig, samples: &[SyntheticSample]) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| prepare(cfg, s)).collect()
}

fn stack_rows<'a>(rows: impl Iterator<Item = ArrayView2<'a, f64>>) -> Array2<f64> {
    let views: Vec<_> = rows.collect();
    concatenate(Axis(0), &views).expect("equal column counts")
}

/// Mean weighted loss over all elements and its gradient with respect to the
/// predictions.
pub fn weighted_objective(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    mult: Option<&Array2<f64>>,
    params: &LossParams,
) -> Result<(f64, Array2<f64>)> {
    crate::error::check_shape(target.shape(), pred.shape())?;
    let n = pred.len() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = 0.0;
    let p = pred.as_slice().expect("standard layout");
    let t = target.as_slice().expect("standard layout");
    let g = grad.as_slice_mut().expect("standard layout");
    let m = mult.map(|m| m.as_slice().expect("standard layout"));
    for i in 0..p.len() {
        let s = params.eval(t[i], p[i])?;
        let w = m.map_or(1.0, |m| m[i]);
        total += w * s.value;
        g[i] = w * s.gradient / n;
    }
    Ok((total / n, grad))
}

/// Training statistics for one epoch. `mse_*` are evaluated with MSE
/// regardless of the training loss, over all output pixels and over
/// foreground pixels (ground truth > 0) only.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub objective: f64,
    pub mse_all: f64,
    pub mse_fg: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: TinyNet,
    pub trace: Vec<EpochStats>,
}

#[derive(Default)]
struct MseAccumulator {
    sum_all: f64,
    n_all: usize,
    sum_fg: f64,
    n_fg: usize,
}

impl MseAccumulator {
    fn add(&mut self, pred: &Array2<f64>, target: &Array2<f64>) {
        for (&p, &t) in pred.iter().zip(target.iter()) {
            let d = (p - t) * (p - t);
            self.sum_all += d;
            self.n_all += 1;
            if t > 0.0 {
                self.sum_fg += d;
                self.n_fg += 1;
            }
        }
    }

    fn means(&self) -> (f64, f64) {
        (
            self.sum_all / self.n_all.max(1) as f64,
            self.sum_fg / self.n_fg.max(1) as f64,
        )
    }
}

pub fn new_net(cfg: &TrainConfig) -> TinyNet {
    let spec = NetSpec {
        boundary_coords: cfg.coords.needs_boundary(),
        ..NetSpec::new(cfg.input_channels(), cfg.output_channels())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    TinyNet::new(spec, &mut rng)
}

fn batch_input(cfg: &TrainConfig, items: &[&Prepared]) -> Act {
    Act {
        data: stack_rows(items.iter().map(|p| p.input.view())),
        batch: items.len(),
        height: cfg.frame.height,
        width: cfg.frame.width,
    }
}

/// Objective and gradient for a single sample: the mean weighted loss over
/// every predicted map, the intermediate boundary head included.
fn sample_gradient(net: &TinyNet, cfg: &TrainConfig, item: &Prepared) -> Result<(f64, net::Grads, Array2<f64>)> {
    let cache = net.forward(batch_input(cfg, &[item]));
    let (mut value, mut d_out) =
        weighted_objective(&cache.output.data, &item.target, item.multiplier.as_ref(), &cfg.loss)?;
    let d_boundary = match (&cache.boundary, &item.boundary_target) {
        (Some(b), Some(bt)) => {
            let (v, mut g) = weighted_objective(&b.data, bt, item.boundary_multiplier.as_ref(), &cfg.loss)?;
            let (n_out, n_b) = (d_out.len() as f64, g.len() as f64);
            let (w_out, w_b) = (n_out / (n_out + n_b), n_b / (n_out + n_b));
            value = w_out * value + w_b * v;
            d_out *= w_out;
            g *= w_b;
            Some(g)
        }
        _ => None,
    };
    let grads = net.backward(&cache, &d_out, d_boundary.as_ref());
    Ok((value, grads, cache.output.data))
}

/// Gradient of the batch objective (the mean of the per-sample objectives)
/// plus each sample's output. Samples are processed one at a time, which
/// keeps the im2col buffers cache-resident, and reduced in batch order.
pub fn batch_gradient(
    net: &TinyNet,
    cfg: &TrainConfig,
    items: &[&Prepared],
) -> Result<(f64, net::Grads, Vec<Array2<f64>>)> {
    let scale = 1.0 / items.len() as f64;
    let mut total = net.zero_grads();
    let mut value = 0.0;
    let mut outputs = Vec::with_capacity(items.len());
    for item in items {
        let (v, g, out) = sample_gradient(net, cfg, item)?;
        value += scale * v;
        total.add_scaled(&g, scale);
        outputs.push(out);
    }
    Ok((value, total, outputs))
}

/// Trains from the seeded initialization in `cfg`.
pub fn train(cfg: &TrainConfig, data: &[Prepared]) -> Result<TrainOutcome> {
    train_from(new_net(cfg), cfg, data)
}

/// Minibatch gradient descent on the mean weighted loss.
pub fn train_from(mut net: TinyNet, cfg: &TrainConfig, data: &[Prepared]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut acc = MseAccumulator::default();
        let mut objective = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let (value, grads, outputs) = batch_gradient(&net, cfg, &items)?;
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            for (out, item) in outputs.iter().zip(&items) {
                acc.add(out, &item.target);
            }
            objective += value;
            batches += 1;
            net.sgd_step(&grads, lr);
        }
        if !net.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let (mse_all, mse_fg) = acc.means();
        let objective = objective / batches.max(1) as f64;
        log::debug!("epoch {epoch}: objective {objective:.6} mse {mse_all:.6} fg {mse_fg:.6}");
        trace.push(EpochStats {
            epoch,
            learning_rate: lr,
            objective,
            mse_all,
            mse_fg,
        });
    }
    Ok(TrainOutcome { net, trace })
}

/// Raw network output for every prepared sample, as `[C, H, W]` stacks.
pub fn predict(net: &TinyNet, cfg: &TrainConfig, data: &[Prepared]) -> Vec<Array3<f64>> {
    let (h, w) = net.output_size(cfg.frame.height, cfg.frame.width);
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(cfg.batch_size.max(1)) {
        let items: Vec<&Prepared> = chunk.iter().collect();
        let cache = net.forward(batch_input(cfg, &items));
        for b in 0..items.len() {
            out.push(net::unstack_image(cache.output.data.view(), b, h, w));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_image_nme: Vec<f64>,
    pub mean_nme: f64,
    pub mse_all: f64,
    pub mse_fg: f64,
    /// Decoded landmarks in input-pixel coordinates.
    pub predictions: Vec<LandmarkSet>,
}

/// Decodes predictions and scores them with NME normalized by the distance
/// between the two eyes.
pub fn evaluate(net: &TinyNet, cfg: &TrainConfig, data: &[Prepared]) -> Result<EvalReport> {
    let preds = predict(net, cfg, data);
    let norm = NormalizationRule::InterOcular(0, 1);
    let mut per_image_nme = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    let mut acc = MseAccumulator::default();
    for (p, item) in preds.iter().zip(data) {
        let points = (0..NUM_LANDMARKS)
            .map(|c| {
                let (pt, _) = decode_channel(p.index_axis(Axis(0), c));
                [pt[0] * HEATMAP_STRIDE as f64, pt[1] * HEATMAP_STRIDE as f64]
            })
            .collect();
        let decoded = LandmarkSet::new(points);
        per_image_nme.push(nme(&item.gt_landmarks, &decoded, &norm)?);
        predictions.push(decoded);
        acc.add(&to_rows(p), &item.target);
    }
    if per_image_nme.is_empty() {
        return Err(Error::UndefinedMetric("evaluation on an empty split"));
    }
    let mean_nme = per_image_nme.iter().sum::<f64>() / per_image_nme.len() as f64;
    let (mse_all, mse_fg) = acc.means();
    Ok(EvalReport {
        per_image_nme,
        mean_nme,
        mse_all,
        mse_fg,
        predictions,
    })
}

/// Named training configuration of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Mse,
    MseWm,
    AWing,
    AWingWmBase,
    AWingWm,
    AWingWmCoordsBoundary,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Mse,
        Ablation::MseWm,
        Ablation::AWing,
        Ablation::AWingWmBase,
        Ablation::AWingWm,
        Ablation::AWingWmCoordsBoundary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Mse => "MSE",
            Ablation::MseWm => "MSE+WM",
            Ablation::AWing => "AW",
            Ablation::AWingWmBase => "AW+WM_base",
            Ablation::AWingWm => "AW+WM",
            Ablation::AWingWmCoordsBoundary => "AW+WM+coords+boundary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidParam(format!("unknown ablation configuration '{s}'")))
    }

    /// `base` with this row's loss, weighting, coordinates and boundary.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (kind, weighting, extras) = match self {
            Ablation::Mse => (LossKind::Mse, Weighting::None, false),
            Ablation::MseWm => (LossKind::Mse, Weighting::LossMap, false),
            Ablation::AWing => (LossKind::AWing, Weighting::None, false),
            Ablation::AWingWmBase => (LossKind::AWing, Weighting::Baseline, false),
            Ablation::AWingWm => (LossKind::AWing, Weighting::LossMap, false),
            Ablation::AWingWmCoordsBoundary => (LossKind::AWing, Weighting::LossMap, true),
        };
        let mut cfg = base.clone();
        cfg.loss.kind = kind;
        cfg.weighting = weighting;
        cfg.coords = if extras { CoordSelection::ALL } else { CoordSelection::NONE };
        cfg.boundary_channel = extras;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: Ablation,
    pub seed: u64,
    pub nme: f64,
    pub test_mse_fg: f64,
    pub trace: Vec<EpochStats>,
}

/// Held-out split for `seed`; disjoint from the training indices.
pub fn split(cfg: &TrainConfig) -> (Vec<SyntheticSample>, Vec<SyntheticSample>) {
    (
        generate_range(cfg.seed, 0, cfg.train_count, cfg.frame),
        generate_range(cfg.seed, TEST_INDEX_OFFSET, cfg.test_count, cfg.frame),
    )
}

/// Trains and evaluates each of `rows` on the same data, initialization seed
/// and budget.
pub fn ablation_run(seed: u64, base: &TrainConfig, rows: &[Ablation]) -> Result<Vec<AblationRow>> {
    let base = TrainConfig {
        seed,
        ..base.clone()
    };
    let (train_set, test_set) = split(&base);
    rows.iter()
        .map(|&row| {
            let cfg = row.apply(&base);
            let train_data = prepare_all(&cfg, &train_set)?;
            let test_data = prepare_all(&cfg, &test_set)?;
            let outcome = train(&cfg, &train_data)?;
            let report = evaluate(&outcome.net, &cfg, &test_data)?;
            log::info!("seed {seed} {}: NME {:.4}", row.name(), report.mean_nme);
            Ok(AblationRow {
                config: row,
                seed,
                nme: report.mean_nme,
                test_mse_fg: report.mse_fg,
                trace: outcome.trace,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const PARAMS_MAGIC: &[u8; 4] = b"TNET";

/// Parameter dump: magic `TNET`, `u32` tensor count, then per tensor a `u32`
/// rank, `u32` dimensions and little-endian `f32` values.
pub fn encode_params(net: &TinyNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    let tensors = net.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (t, shape) in tensors.iter().zip(net.tensor_shapes()) {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Loads a parameter dump into a network of matching architecture.
pub fn decode_params_into(net: &mut TinyNet, bytes: &[u8]) -> Result<()> {
    let bad = |msg: String| Error::Parse { line: 0, msg };
    let mut pos = 0usize;
    let u32_at = |pos: &mut usize| -> Result<usize> {
        let b = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| bad("truncated parameter dump".into()))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    if bytes.get(..4) != Some(PARAMS_MAGIC.as_slice()) {
        return Err(bad("missing TNET header".into()));
    }
    pos += 4;
    let shapes = net.tensor_shapes();
    let count = u32_at(&mut pos)?;
    if count != shapes.len() {
        return Err(bad(format!("dump has {count} tensors, network has {}", shapes.len())));
    }
    let mut values = Vec::with_capacity(count);
    for shape in &shapes {
        let rank = u32_at(&mut pos)?;
        let dims = (0..rank).map(|_| u32_at(&mut pos)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(bad(format!("tensor shape {dims:?} does not match {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| bad("truncated parameter dump".into()))?;
        pos += 4 * n;
        values.push(
            raw.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect::<Vec<_>>(),
        );
    }
    for (dst, src) in net.tensors_mut().into_iter().zip(values) {
        dst.copy_from_slice(&src);
    }
    Ok(())
}
