use std::fmt;
use std::str::FromStr;

use crate::coords::CoordSelection;
use crate::error::{Error, Result};
use crate::heatmap::Frame;
use crate::loss_map::DEFAULT_WEIGHT;
use crate::losses::{LossKind, LossParams};

/// Pixel weighting applied to the elementwise loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Weighting {
    #[default]
    None,
    /// `W·M + 1` with the dilation mask.
    LossMap,
    /// `W·y + 1`.
    Baseline,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Weighting::None => "none",
            Weighting::LossMap => "map",
            Weighting::Baseline => "baseline",
        }
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Weighting::None),
            "map" | "wm" => Ok(Weighting::LossMap),
            "baseline" | "wm_base" => Ok(Weighting::Baseline),
            other => Err(Error::InvalidParam(format!("unknown weighting '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossParams,
    pub weighting: Weighting,
    pub weight: f64,
    /// `cx`, `cy`, `radius` are appended to the input image; `bx`, `by` are
    /// produced by the intermediate boundary head.
    pub coords: CoordSelection,
    pub boundary_channel: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub frame: Frame,
}

impl Default for TrainConfig {
    /// Desk-scale settings used by the ablation.
    fn default() -> Self {
        Self {
            loss: LossParams::default(),
            weighting: Weighting::None,
            weight: DEFAULT_WEIGHT,
            coords: CoordSelection::NONE,
            boundary_channel: false,
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.2,
            lr_decay_epochs: vec![15],
            lr_decay: 0.1,
            seed: 0,
            train_count: 500,
            test_count: 100,
            frame: Frame::new(64, 64),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule of the original stacked-hourglass setup (240
    /// epochs, 1e-4 decayed tenfold at 80 and 160). Far too slow for the tiny
    /// network; kept as a reference point.
    pub fn full_scale() -> Self {
        Self {
            epochs: 240,
            learning_rate: 1e-4,
            lr_decay_epochs: vec![80, 160],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.weight > 0.0) {
            return Err(Error::InvalidParam("weight must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam("learning rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::InvalidParam("lr_decay must be positive".into()));
        }
        if self.coords.needs_boundary() && !self.boundary_channel {
            return Err(Error::InvalidParam(
                "bx/by coordinate channels need boundary=true".into(),
            ));
        }
        let f = self.frame;
        if f.height % 4 != 0 || f.width % 4 != 0 || f.height < 16 || f.width < 16 {
            return Err(Error::InvalidParam(format!(
                "frame {}x{} must have sides that are multiples of 4 and at least 16",
                f.width, f.height
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| Error::InvalidParam(format!("{key}={value}: {e}"));
        let float = || value.parse::<f64>().map_err(|e| bad(&e));
        let int = || value.parse::<usize>().map_err(|e| bad(&e));
        match key {
            "loss" => self.loss.kind = value.parse::<LossKind>()?,
            "omega" => self.loss.omega = float()?,
            "epsilon" => self.loss.epsilon = float()?,
            "theta" => self.loss.theta = float()?,
            "alpha" => self.loss.alpha = float()?,
            "weighting" => self.weighting = value.parse()?,
            "weight" => self.weight = float()?,
            "coords" => self.coords = CoordSelection::parse(value)?,
            "boundary" => self.boundary_channel = value.parse::<bool>().map_err(|e| bad(&e))?,
            "epochs" => self.epochs = int()?,
            "batch_size" => self.batch_size = int()?,
            "lr" | "learning_rate" => self.learning_rate = float()?,
            "lr_decay" => self.lr_decay = float()?,
            "lr_decay_epochs" => {
                self.lr_decay_epochs = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>().map_err(|e| bad(&e)))
                        .collect::<Result<_>>()?
                }
            }
            "seed" => self.seed = value.parse::<u64>().map_err(|e| bad(&e))?,
            "train_count" => self.train_count = int()?,
            "test_count" => self.test_count = int()?,
            "frame" => {
                let n = int()?;
                self.frame = Frame::new(n, n);
            }
            other => return Err(Error::InvalidParam(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of output channels: landmarks plus the optional boundary.
    pub fn output_channels(&self) -> usize {
        super::data::NUM_LANDMARKS + usize::from(self.boundary_channel)
    }

    pub fn input_channels(&self) -> usize {
        1 + usize::from(self.coords.cx) + usize::from(self.coords.cy) + usize::from(self.coords.radius)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.coords.names();
        writeln!(f, "loss={}", self.loss.kind)?;
        writeln!(f, "omega={}", self.loss.omega)?;
        writeln!(f, "epsilon={}", self.loss.epsilon)?;
        writeln!(f, "theta={}", self.loss.theta)?;
        writeln!(f, "alpha={}", self.loss.alpha)?;
        writeln!(f, "weighting={}", self.weighting.name())?;
        writeln!(f, "weight={}", self.weight)?;
        writeln!(f, "coords={}", if names.is_empty() { "none".to_string() } else { names.join(",") })?;
        writeln!(f, "boundary={}", self.boundary_channel)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "lr={}", self.learning_rate)?;
        writeln!(
            f,
            "lr_decay_epochs={}",
            self.lr_decay_epochs
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )?;
        writeln!(f, "lr_decay={}", self.lr_decay)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "train_count={}", self.train_count)?;
        writeln!(f, "test_count={}", self.test_count)?;
        writeln!(f, "frame={}", self.frame.height)
    }
}
