//! Reconstruction settings, ablation switches and the `key = value` config
//! file format.

use crate::cost::{Hyperparameters, NccParams, PcMode};
use crate::refinement::RefineMode;
use std::fmt::Write as _;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("unknown ablation `{0}`")]
    UnknownAblation(String),
}

/// Component switches; each variant disables or swaps one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Fixed square window and single-scale matching cost.
    AcmCost,
    /// Fixed square window, multi-scale kept.
    NoAdpCost,
    /// Deformed window at the state's own level only.
    NoMulCost,
    /// Fixed near/far propagation domains.
    AcmProp,
    /// Branch pattern without deformation.
    NoAdpProp,
    /// Propagation domains from the state's own level only.
    NoMulProp,
    NoRef,
    /// Axis-additive perturbation with random restarts.
    Eq9Ref,
    NoEm,
}

impl Ablation {
    pub const ALL: [Ablation; 10] = [
        Ablation::None,
        Ablation::AcmCost,
        Ablation::NoAdpCost,
        Ablation::NoMulCost,
        Ablation::AcmProp,
        Ablation::NoAdpProp,
        Ablation::NoMulProp,
        Ablation::NoRef,
        Ablation::Eq9Ref,
        Ablation::NoEm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::AcmCost => "acm-cost",
            Ablation::NoAdpCost => "no-adp-cost",
            Ablation::NoMulCost => "no-mul-cost",
            Ablation::AcmProp => "acm-prop",
            Ablation::NoAdpProp => "no-adp-prop",
            Ablation::NoMulProp => "no-mul-prop",
            Ablation::NoRef => "no-ref",
            Ablation::Eq9Ref => "eq9-ref",
            Ablation::NoEm => "no-em",
        }
    }

    pub fn deformed_cost(&self) -> bool {
        !matches!(self, Ablation::AcmCost | Ablation::NoAdpCost)
    }

    pub fn multi_scale_cost(&self) -> bool {
        !matches!(self, Ablation::AcmCost | Ablation::NoMulCost)
    }

    pub fn prop_style(&self) -> PropStyle {
        match self {
            Ablation::AcmProp => PropStyle::Fixed,
            Ablation::NoAdpProp => PropStyle::Undeformed,
            _ => PropStyle::Deformed,
        }
    }

    pub fn multi_scale_prop(&self) -> bool {
        !matches!(self, Ablation::AcmProp | Ablation::NoMulProp)
    }

    pub fn refine_mode(&self) -> RefineMode {
        match self {
            Ablation::NoRef => RefineMode::Off,
            Ablation::Eq9Ref => RefineMode::Additive,
            _ => RefineMode::Spherical,
        }
    }

    pub fn em(&self) -> bool {
        *self != Ablation::NoEm
    }
}

impl FromStr for Ablation {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ConfigError::UnknownAblation(s.to_string()))
    }
}

/// Propagation domain geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropStyle {
    Deformed,
    Undeformed,
    Fixed,
}

/// Every tunable of a reconstruction run.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub hyper: Hyperparameters,
    pub ncc: NccParams,
    pub pc_mode: PcMode,
    pub tau_rp: f64,
    /// Sources averaged per pixel after ranking by aggregated cost.
    pub top_k_sources: usize,
    /// Base extent of the propagation pattern in pixels.
    pub prop_length: f64,
    pub cap_distance: u32,
    pub outer_iterations: usize,
    /// Checkerboard propagation sweeps (both parities) per iteration.
    pub prop_sweeps: usize,
    pub min_anchors: usize,
    pub max_corners: usize,
    pub barrier_start: f64,
    pub barrier_end: f64,
    /// One weight vector shared by all views instead of one per view.
    pub global_weights: bool,
    pub full_rodrigues: bool,
    pub raw_descent: bool,
    pub consistency_min: usize,
    pub fuse_rel_tol: f64,
    pub fuse_angle_deg: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for Config {
    fn default() -> Self {
        let hyper = Hyperparameters::default();
        Self {
            ncc: NccParams { sigma_spatial: hyper.patch_len as f64 / 2.0, ..NccParams::default() },
            hyper,
            pc_mode: PcMode::Literal,
            tau_rp: 2.0,
            top_k_sources: 1,
            prop_length: 4.0 * hyper.patch_len as f64,
            cap_distance: 2 * hyper.patch_len as u32,
            outer_iterations: 3,
            prop_sweeps: 2,
            min_anchors: 50,
            max_corners: 400,
            barrier_start: 1e-1,
            barrier_end: 1e-3,
            global_weights: false,
            full_rodrigues: false,
            raw_descent: false,
            consistency_min: 2,
            fuse_rel_tol: 0.01,
            fuse_angle_deg: 10.0,
            seed: 0,
            ablation: Ablation::None,
        }
    }
}

impl Config {
    /// Defaults for the small synthetic scenes: two halvings instead of three.
    pub fn synthetic() -> Self {
        let mut c = Self::default();
        c.hyper.levels = 2;
        c
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value
                .parse()
                .map_err(|_| ConfigError::BadValue { line: 0, key: key.into(), value: value.into() })
        }
        match key {
            "w_ms" => self.hyper.w_ms = num(key, value)?,
            "w_rp" => self.hyper.w_rp = num(key, value)?,
            "w_pc" => self.hyper.w_pc = num(key, value)?,
            "tau" => self.hyper.tau = num(key, value)?,
            "patch_len" => self.hyper.patch_len = num(key, value)?,
            "levels" => self.hyper.levels = num(key, value)?,
            "n_max" => self.hyper.n_max = num(key, value)?,
            "eta" => self.hyper.eta = num(key, value)?,
            "sigma_color" => self.ncc.sigma_color = num(key, value)?,
            "sigma_spatial" => self.ncc.sigma_spatial = num(key, value)?,
            "min_samples" => self.ncc.min_samples = num(key, value)?,
            "pc_mode" => {
                self.pc_mode = match value {
                    "literal" => PcMode::Literal,
                    "capped" => PcMode::Capped,
                    _ => return Err(ConfigError::BadValue { line: 0, key: key.into(), value: value.into() }),
                }
            }
            "tau_rp" => self.tau_rp = num(key, value)?,
            "top_k_sources" => self.top_k_sources = num(key, value)?,
            "prop_length" => self.prop_length = num(key, value)?,
            "cap_distance" => self.cap_distance = num(key, value)?,
            "outer_iterations" => self.outer_iterations = num(key, value)?,
            "prop_sweeps" => self.prop_sweeps = num(key, value)?,
            "min_anchors" => self.min_anchors = num(key, value)?,
            "max_corners" => self.max_corners = num(key, value)?,
            "barrier_start" => self.barrier_start = num(key, value)?,
            "barrier_end" => self.barrier_end = num(key, value)?,
            "global_weights" => self.global_weights = num(key, value)?,
            "full_rodrigues" => self.full_rodrigues = num(key, value)?,
            "raw_descent" => self.raw_descent = num(key, value)?,
            "consistency_min" => self.consistency_min = num(key, value)?,
            "fuse_rel_tol" => self.fuse_rel_tol = num(key, value)?,
            "fuse_angle_deg" => self.fuse_angle_deg = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            _ => return Err(ConfigError::UnknownKey { line: 0, key: key.into() }),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults in `self`. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse_onto(mut self, text: &str) -> Result<Self, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                ConfigError::BadValue { key, value, .. } => ConfigError::BadValue { line: i + 1, key, value },
                other => other,
            })?;
        }
        Ok(self)
    }

    /// Serializes every key; `parse_onto` of the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let h = &self.hyper;
        let pc = match self.pc_mode {
            PcMode::Literal => "literal",
            PcMode::Capped => "capped",
        };
        let _ = writeln!(s, "w_ms = {}\nw_rp = {}\nw_pc = {}", h.w_ms, h.w_rp, h.w_pc);
        let _ = writeln!(s, "tau = {}\npatch_len = {}\nlevels = {}\nn_max = {}\neta = {}", h.tau, h.patch_len, h.levels, h.n_max, h.eta);
        let _ = writeln!(s, "sigma_color = {}\nsigma_spatial = {}\nmin_samples = {}", self.ncc.sigma_color, self.ncc.sigma_spatial, self.ncc.min_samples);
        let _ = writeln!(s, "pc_mode = {pc}\ntau_rp = {}\ntop_k_sources = {}", self.tau_rp, self.top_k_sources);
        let _ = writeln!(s, "prop_length = {}\ncap_distance = {}", self.prop_length, self.cap_distance);
        let _ = writeln!(s, "outer_iterations = {}\nprop_sweeps = {}", self.outer_iterations, self.prop_sweeps);
        let _ = writeln!(s, "min_anchors = {}\nmax_corners = {}", self.min_anchors, self.max_corners);
        let _ = writeln!(s, "barrier_start = {}\nbarrier_end = {}\nglobal_weights = {}", self.barrier_start, self.barrier_end, self.global_weights);
        let _ = writeln!(s, "full_rodrigues = {}\nraw_descent = {}", self.full_rodrigues, self.raw_descent);
        let _ = writeln!(s, "consistency_min = {}\nfuse_rel_tol = {}\nfuse_angle_deg = {}", self.consistency_min, self.fuse_rel_tol, self.fuse_angle_deg);
        let _ = writeln!(s, "seed = {}\nablation = {}", self.seed, self.ablation.name());
        s
    }
}
