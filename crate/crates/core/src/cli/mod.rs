//! `awing` command-line front end. Every command reads its inputs, calls
//! into the library and writes CSV (to `--out` or stdout) plus optional
//! binary dumps. Files are written atomically.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::boundary::{boundary_channel, BoundarySchema};
use crate::coords::{make_xy_radius, mask_boundary_coords, CoordChannels};
use crate::heatmap::{decode_landmarks, render_heatmap, Frame, FramePolicy, GaussianSpec, HeatmapStack};
use crate::io::{self, Csv};
use crate::loss_map::{build_mask_array, DEFAULT_WEIGHT};
use crate::losses::{LossKind, LossParams};
use crate::metrics::{self, NormalizationRule};
use crate::trainer::{self, Ablation, TrainConfig};

/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "AWING_SEED";

#[derive(Debug, Parser)]
#[command(name = "awing", version, about = "Adaptive Wing loss toolkit for heatmap regression")]
pub struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Loss value and influence over an error grid for each loss kind.
    Curves(CurvesArgs),
    /// Render Gaussian heatmaps from an annotation file.
    Render(RenderArgs),
    /// Decode landmark positions from heatmap dumps.
    Decode(DecodeArgs),
    /// Build the dilation-based weight mask for a heatmap dump.
    Mask(MaskArgs),
    /// Train and evaluate over a grid of loss parameters.
    Sweep(SweepArgs),
    /// Train the tiny network on synthetic data.
    Train(TrainArgs),
    /// Run the loss/weighting ablation over several seeds.
    Ablate(AblateArgs),
    /// Score predicted landmarks against ground truth.
    Evaluate(EvaluateArgs),
    /// Render boundary heatmaps from an annotation file.
    Boundary(BoundaryArgs),
    /// Emit coordinate channels for a frame.
    Coords(CoordsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct LossArgs {
    #[arg(long, default_value_t = 14.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    #[arg(long, default_value_t = 2.1)]
    pub alpha: f64,
}

impl LossArgs {
    fn params(&self, kind: LossKind) -> LossParams {
        LossParams {
            omega: self.omega,
            epsilon: self.epsilon,
            theta: self.theta,
            alpha: self.alpha,
            kind,
        }
    }
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// Comma-separated loss kinds.
    #[arg(long, default_value = "mse,l1,wing,awing", value_delimiter = ',')]
    pub kinds: Vec<LossKind>,
    /// Comma-separated ground-truth values in [0, 1].
    #[arg(long, default_value = "0,0.5,1", value_delimiter = ',')]
    pub y: Vec<f64>,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub error_min: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub error_max: f64,
    /// Grid points between `error_min` and `error_max`, inclusive.
    #[arg(long, default_value_t = 201)]
    pub steps: usize,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Odd side length of the kernel support.
    #[arg(long, default_value_t = 7)]
    pub size: usize,
    /// Evaluate the Gaussian at the sub-pixel landmark position.
    #[arg(long)]
    pub subpixel: bool,
    /// Clamp out-of-frame landmarks instead of failing.
    #[arg(long)]
    pub clamp: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Annotation file: `id W H x,y[,v] ...` per line.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory for `<id>.hmap` dumps.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Index CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Heatmap dumps to decode.
    #[arg(required = true)]
    pub heatmaps: Vec<PathBuf>,
    /// The last channel of every dump is a boundary map and is skipped.
    #[arg(long)]
    pub boundary: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub heatmaps: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WEIGHT)]
    pub weight: f64,
    /// Also dump the `W·M + 1` multiplier as a heatmap file.
    #[arg(long)]
    pub multiplier_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// `key=value` training config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::parse(
                &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override '{kv}' is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "14", value_delimiter = ',')]
    pub omega: Vec<f64>,
    #[arg(long, default_value = "1", value_delimiter = ',')]
    pub epsilon: Vec<f64>,
    #[arg(long, default_value = "0.5", value_delimiter = ',')]
    pub theta: Vec<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Write the learned parameters here.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Held-out evaluation summary CSV.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Per-epoch trace CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of consecutive seeds starting at `--seed` (default 0).
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Comma-separated configurations; default is the full table.
    #[arg(long, value_delimiter = ',')]
    pub configs: Vec<String>,
    /// Median NME per configuration.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Per-seed rows; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// `interocular:i,j`, `interpupil:a,b;c,d`, `torso:i,j` or `const:d`.
    #[arg(long, default_value = "interocular:0,1")]
    pub norm: NormalizationRule,
    /// Failure threshold as a fraction (0.10, not 10).
    #[arg(long, default_value_t = 0.1)]
    pub fr_threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    pub auc_threshold: f64,
    /// Also report PCK at this fraction of the normalizing distance.
    #[arg(long)]
    pub pck: Option<f64>,
    #[arg(long)]
    pub per_image: Option<PathBuf>,
    /// CED curve CSV.
    #[arg(long)]
    pub ced: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundaryArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Schema file with `open|closed i j ...` lines; five-point face when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Directory for `<id>.boundary.hmap` dumps.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoordsArgs {
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
    /// Heatmap dump whose last channel masks the boundary coordinates.
    #[arg(long)]
    pub boundary: Option<PathBuf>,
    /// Dump all channels as a heatmap file.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit(csv: &Csv, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => csv.write(p).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().lock().write_all(csv.as_str().as_bytes())?,
    }
    Ok(())
}

fn read_stack(path: &Path, boundary: bool) -> anyhow::Result<HeatmapStack> {
    let data = io::read_heatmaps(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(HeatmapStack::from_raw(data, boundary)?)
}

fn safe_id(id: &str) -> anyhow::Result<&str> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        bail!("image id '{id}' cannot be used as a file name");
    }
    Ok(id)
}

/// One row per (kind, y, error): value and influence (derivative with
/// respect to the prediction) at `ŷ = y + error`.
pub fn run_curves(
    kinds: &[LossKind],
    ys: &[f64],
    errors: &[f64],
    loss: &LossArgs,
) -> crate::Result<Csv> {
    if kinds.is_empty() || ys.is_empty() || errors.is_empty() {
        return Err(crate::Error::InvalidParam("curve grids must be nonempty".into()));
    }
    let mut csv = Csv::new(&["kind", "y", "error", "yhat", "value", "influence"]);
    for &kind in kinds {
        let p = loss.params(kind);
        p.validate()?;
        for &y in ys {
            for &e in errors {
                let s = p.eval(y, y + e)?;
                csv.row([kind.to_string(), y.to_string(), e.to_string(), (y + e).to_string(), s.value.to_string(), s.gradient.to_string()]);
            }
        }
    }
    Ok(csv)
}

/// Evenly spaced inclusive grid.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub omega: f64,
    pub epsilon: f64,
    pub theta: f64,
    pub nme: f64,
}

/// Trains and evaluates one network per (ω, ε, θ) cell on a shared split.
pub fn run_sweep(base: &TrainConfig, omegas: &[f64], epsilons: &[f64], thetas: &[f64]) -> crate::Result<Vec<SweepCell>> {
    if omegas.is_empty() || epsilons.is_empty() || thetas.is_empty() {
        return Err(crate::Error::InvalidParam("sweep grid must be nonempty".into()));
    }
    let (train_set, test_set) = trainer::split(base);
    let train_data = trainer::prepare_all(base, &train_set)?;
    let test_data = trainer::prepare_all(base, &test_set)?;
    let mut cells = Vec::new();
    for &omega in omegas {
        for &epsilon in epsilons {
            for &theta in thetas {
                let mut cfg = base.clone();
                cfg.loss.omega = omega;
                cfg.loss.epsilon = epsilon;
                cfg.loss.theta = theta;
                let net = trainer::train(&cfg, &train_data)?.net;
                let nme = trainer::evaluate(&net, &cfg, &test_data)?.mean_nme;
                log::info!("omega={omega} epsilon={epsilon} theta={theta}: NME {nme:.5}");
                cells.push(SweepCell {
                    omega,
                    epsilon,
                    theta,
                    nme,
                });
            }
        }
    }
    Ok(cells)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Curves(a) => {
            let csv = run_curves(&a.kinds, &a.y, &linspace(a.error_min, a.error_max, a.steps), &a.loss)?;
            emit(&csv, a.out.as_deref())
        }
        Command::Render(a) => render(a),
        Command::Decode(a) => decode(a),
        Command::Mask(a) => mask(a),
        Command::Sweep(a) => {
            let base = a.config.load()?;
            let cells = run_sweep(&base, &a.omega, &a.epsilon, &a.theta)?;
            let mut csv = Csv::new(&["omega", "epsilon", "theta", "nme"]);
            for c in cells {
                csv.row([c.omega, c.epsilon, c.theta, c.nme]);
            }
            emit(&csv, a.out.as_deref())
        }
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Boundary(a) => boundary(a),
        Command::Coords(a) => coords(a),
    }
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    let spec = GaussianSpec {
        sigma: a.kernel.sigma,
        size: a.kernel.size,
        subpixel: a.kernel.subpixel,
    };
    let policy = if a.kernel.clamp { FramePolicy::Clamp } else { FramePolicy::Reject };
    let annotations = io::read_annotations(&a.annotations)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut csv = Csv::new(&["id", "channels", "height", "width", "nonzero"]);
    for ann in &annotations {
        let stack = render_heatmap(&ann.landmarks, ann.frame, spec, policy)
            .with_context(|| format!("rendering '{}'", ann.id))?;
        io::write_heatmaps(&a.out_dir.join(format!("{}.hmap", safe_id(&ann.id)?)), stack.data())?;
        let nonzero = stack.data().iter().filter(|&&v| v > 0.0).count();
        let [c, h, w] = stack.shape();
        csv.row([ann.id.clone(), c.to_string(), h.to_string(), w.to_string(), nonzero.to_string()]);
    }
    emit(&csv, a.out.as_deref())
}

fn decode(a: DecodeArgs) -> anyhow::Result<()> {
    let mut csv = Csv::new(&["file", "landmark", "x", "y", "degenerate"]);
    for path in &a.heatmaps {
        let stack = read_stack(path, a.boundary)?;
        let decoded = decode_landmarks(&stack)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for (i, p) in decoded.landmarks.points().iter().enumerate() {
            csv.row([name.clone(), i.to_string(), p[0].to_string(), p[1].to_string(), decoded.degenerate[i].to_string()]);
        }
    }
    emit(&csv, a.out.as_deref())
}

fn mask(a: MaskArgs) -> anyhow::Result<()> {
    let gt = read_stack(&a.heatmaps, false)?;
    let m = build_mask_array(gt.data().view(), a.weight)?;
    let mult = m.multiplier();
    let mut csv = Csv::new(&["channel", "foreground", "support", "mean_multiplier"]);
    for c in 0..gt.channels() {
        let fg = gt.channel(c).iter().filter(|&&v| v > 0.0).count();
        let support = m.mask().index_axis(ndarray::Axis(0), c).iter().filter(|&&v| v != 0).count();
        let plane = mult.index_axis(ndarray::Axis(0), c);
        let mean = plane.sum() / plane.len() as f64;
        csv.row([c.to_string(), fg.to_string(), support.to_string(), mean.to_string()]);
    }
    if let Some(p) = &a.multiplier_out {
        io::write_heatmaps(p, &mult)?;
    }
    emit(&csv, a.out.as_deref())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = a.config.load()?;
    let (train_set, test_set) = trainer::split(&cfg);
    let train_data = trainer::prepare_all(&cfg, &train_set)?;
    let outcome = trainer::train(&cfg, &train_data)?;
    let mut csv = Csv::new(&["epoch", "learning_rate", "objective", "mse_all", "mse_fg"]);
    for e in &outcome.trace {
        csv.row([e.epoch as f64, e.learning_rate, e.objective, e.mse_all, e.mse_fg]);
    }
    if let Some(p) = &a.params {
        io::write_atomic(p, &trainer::encode_params(&outcome.net))?;
    }
    if let Some(p) = &a.summary {
        let test_data = trainer::prepare_all(&cfg, &test_set)?;
        let report = trainer::evaluate(&outcome.net, &cfg, &test_data)?;
        let mut s = Csv::new(&["metric", "value"]);
        s.row(["nme".to_string(), report.mean_nme.to_string()]);
        s.row(["test_mse_all".to_string(), report.mse_all.to_string()]);
        s.row(["test_mse_fg".to_string(), report.mse_fg.to_string()]);
        s.write(p)?;
    }
    emit(&csv, a.out.as_deref())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = a.config.load()?;
    let rows = if a.configs.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        a.configs.iter().map(|c| Ablation::parse(c)).collect::<crate::Result<Vec<_>>>()?
    };
    let first = a.config.seed.unwrap_or(0);
    let mut csv = Csv::new(&["seed", "config", "nme", "test_mse_fg"]);
    let mut per_config: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    for seed in first..first + a.seeds {
        for (k, r) in trainer::ablation_run(seed, &base, &rows)?.into_iter().enumerate() {
            per_config[k].push(r.nme);
            csv.row([seed.to_string(), r.config.name().to_string(), r.nme.to_string(), r.test_mse_fg.to_string()]);
        }
    }
    if let Some(p) = &a.summary {
        let mut s = Csv::new(&["config", "median_nme"]);
        for (r, v) in rows.iter().zip(&per_config) {
            s.row([r.name().to_string(), trainer::median(v).to_string()]);
        }
        s.write(p)?;
    }
    emit(&csv, a.out.as_deref())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let gt = io::read_annotations(&a.gt)?;
    let pred = io::read_annotations(&a.pred)?;
    if gt.len() != pred.len() || gt.iter().zip(&pred).any(|(g, p)| g.id != p.id) {
        bail!("ground truth and predictions must list the same images in the same order");
    }
    let g: Vec<_> = gt.iter().map(|x| x.landmarks.clone()).collect();
    let p: Vec<_> = pred.iter().map(|x| x.landmarks.clone()).collect();
    let report = metrics::evaluate(&g, &p, &a.norm, a.fr_threshold, a.auc_threshold, a.pck)?;
    let mut csv = Csv::new(&["metric", "value"]);
    csv.row(["nme".to_string(), report.mean_nme.to_string()]);
    csv.row([format!("fr@{}", report.fr_threshold), report.fr.to_string()]);
    csv.row([format!("auc@{}", report.auc_threshold), report.auc.to_string()]);
    if let (Some(f), Some(v)) = (a.pck, report.pck) {
        csv.row([format!("pck@{f}"), v.to_string()]);
    }
    if let Some(path) = &a.per_image {
        let mut s = Csv::new(&["id", "nme"]);
        for (ann, v) in gt.iter().zip(&report.per_image_nme) {
            s.row([ann.id.clone(), v.to_string()]);
        }
        s.write(path)?;
    }
    if let Some(path) = &a.ced {
        let mut s = Csv::new(&["threshold", "fraction"]);
        for (t, f) in &report.ced {
            s.row([t, f]);
        }
        s.write(path)?;
    }
    emit(&csv, a.out.as_deref())
}

fn boundary(a: BoundaryArgs) -> anyhow::Result<()> {
    let schema = match &a.schema {
        Some(p) => fs::read_to_string(p)?.parse::<BoundarySchema>()?,
        None => BoundarySchema::five_point(),
    };
    let annotations = io::read_annotations(&a.annotations)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut csv = Csv::new(&["id", "height", "width", "nonzero", "max"]);
    for ann in &annotations {
        let b = boundary_channel(&ann.landmarks, &schema, ann.frame, a.sigma)
            .with_context(|| format!("boundary for '{}'", ann.id))?;
        let nonzero = b.iter().filter(|&&v| v > 0.0).count();
        let max = b.iter().cloned().fold(0.0, f64::max);
        let stack = b.insert_axis(ndarray::Axis(0));
        io::write_heatmaps(&a.out_dir.join(format!("{}.boundary.hmap", safe_id(&ann.id)?)), &stack)?;
        csv.row([ann.id.clone(), ann.frame.height.to_string(), ann.frame.width.to_string(), nonzero.to_string(), max.to_string()]);
    }
    emit(&csv, a.out.as_deref())
}

fn coords(a: CoordsArgs) -> anyhow::Result<()> {
    let frame = Frame::new(a.height, a.width);
    let mut ch: CoordChannels = make_xy_radius(frame)?;
    if let Some(p) = &a.boundary {
        let data = io::read_heatmaps(p)?;
        let last = data.dim().0.checked_sub(1).context("boundary dump has no channels")?;
        ch = mask_boundary_coords(&ch, data.index_axis(ndarray::Axis(0), last))?;
    }
    let mut planes = vec![("cx", &ch.cx), ("cy", &ch.cy), ("radius", &ch.radius)];
    if let (Some(bx), Some(by)) = (&ch.bx, &ch.by) {
        planes.push(("bx", bx));
        planes.push(("by", by));
    }
    let mut csv = Csv::new(&["channel", "min", "max", "mean"]);
    for (name, p) in &planes {
        let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        csv.row([name.to_string(), min.to_string(), max.to_string(), (p.sum() / p.len() as f64).to_string()]);
    }
    if let Some(path) = &a.dump {
        let views: Vec<_> = planes.iter().map(|(_, p)| p.view()).collect();
        let stack = ndarray::stack(ndarray::Axis(0), &views)?;
        io::write_heatmaps(path, &stack)?;
    }
    emit(&csv, a.out.as_deref())
}
