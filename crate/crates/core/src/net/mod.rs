//! The dual-path network: spiking forward layers, a spiking error path split
//! into positive and negative channels, and the two-phase per-sample schedule
//! that drives learning.

mod build;
mod run;
pub mod structure;

use std::fmt;
use std::str::FromStr;

pub use build::{
    BuiltNetwork, ConvProjection, DenseProjection, ErrorPopulation, Feedback, FeedbackMatrix, FeedbackTarget,
    ForwardLayer, ForwardProjection, Injection,
};
pub use run::{PhaseRecord, SampleMetrics};
pub use structure::{parse_structure, structure_string, LayerDesc, LayerKind, Shape};

use crate::error::{Error, Result};
use crate::neuron::{PreTraceMode, ResetMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeedbackMode {
    /// Error layers chained through fixed random matrices, one per
    /// trainable layer.
    Fa,
    /// Error spikes broadcast from the output loss neurons straight into every
    /// hidden trainable layer.
    Dfa,
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackMode::Fa => "FA",
            FeedbackMode::Dfa => "DFA",
        })
    }
}

impl FromStr for FeedbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fa" => Ok(FeedbackMode::Fa),
            "dfa" => Ok(FeedbackMode::Dfa),
            _ => Err(Error::Config(format!("unknown feedback mode {s:?}"))),
        }
    }
}

/// Knobs that shape the integer network beyond its topology.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOptions {
    /// Forward weights start uniform in `[-a, a]` with
    /// `a = init_gain * theta / sqrt(fan_in)` (potential units per presynaptic spike).
    pub init_gain: f64,
    /// Integer magnitude that `a` maps to; fixes each layer's scale.
    pub init_range_lsb: i32,
    /// Constant drive of the output neurons, in spikes per phase. Keeps
    /// output units above the gating threshold so the loss can reach them.
    pub output_bias: f64,
    /// Error-path threshold is `theta * error_resolution`.
    pub error_resolution: i64,
    /// FA: largest |B| in error spikes per upstream error spike.
    pub fa_feedback_scale: f64,
    /// DFA: largest |B| in forward-spike corrections per loss spike, times `T`.
    pub dfa_feedback_scale: f64,
    /// One error spike moves a forward neuron by `threshold / injection_divisor`.
    /// `None` means `T`. Smaller divisors give larger, less noisy corrections.
    pub injection_divisor: Option<i64>,
    /// Rate requested from the true-class loss neuron; `None` means `T`.
    pub target_rate: Option<u32>,
    /// Rate requested from every other output neuron. A nonzero floor keeps
    /// wrong-class outputs just above the gate instead of driving them to
    /// silence, where no error can reach them again.
    pub floor_rate: u32,
    /// Hidden layers learn with `eta >> hidden_eta_shift`.
    pub hidden_eta_shift: u32,
    pub reset: ResetMode,
    /// Optional floor on error-path soma potentials.
    pub error_clamp: Option<i64>,
    /// Clear forward potentials when phase 2 starts so the phase-2 count
    /// differs from the phase-1 count only through injected error.
    pub boundary_reset: bool,
    pub pre_trace: PreTraceMode,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            init_gain: 0.6,
            init_range_lsb: 127,
            output_bias: 2.0,
            error_resolution: 4,
            fa_feedback_scale: 0.5,
            dfa_feedback_scale: 0.5,
            injection_divisor: Some(16),
            target_rate: None,
            floor_rate: 16,
            hidden_eta_shift: 0,
            reset: ResetMode::Subtract,
            error_clamp: None,
            boundary_reset: true,
            pre_trace: PreTraceMode::FreezeAtBoundary,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn show_optional<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl NetOptions {
    pub const KEYS: &'static [&'static str] = &[
        "init_gain",
        "init_range_lsb",
        "output_bias",
        "error_resolution",
        "fa_feedback_scale",
        "dfa_feedback_scale",
        "injection_divisor",
        "target_rate",
        "floor_rate",
        "hidden_eta_shift",
        "reset",
        "error_clamp",
        "boundary_reset",
        "pre_trace",
    ];

    /// Every option as `(key, value)`; `set` reads the same strings back.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("init_gain", self.init_gain.to_string()),
            ("init_range_lsb", self.init_range_lsb.to_string()),
            ("output_bias", self.output_bias.to_string()),
            ("error_resolution", self.error_resolution.to_string()),
            ("fa_feedback_scale", self.fa_feedback_scale.to_string()),
            ("dfa_feedback_scale", self.dfa_feedback_scale.to_string()),
            ("injection_divisor", show_optional(&self.injection_divisor)),
            ("target_rate", show_optional(&self.target_rate)),
            ("floor_rate", self.floor_rate.to_string()),
            ("hidden_eta_shift", self.hidden_eta_shift.to_string()),
            ("reset", self.reset.to_string()),
            ("error_clamp", show_optional(&self.error_clamp)),
            ("boundary_reset", self.boundary_reset.to_string()),
            ("pre_trace", self.pre_trace.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "init_gain" => self.init_gain = parse_value(key, value)?,
            "init_range_lsb" => self.init_range_lsb = parse_value(key, value)?,
            "output_bias" => self.output_bias = parse_value(key, value)?,
            "error_resolution" => self.error_resolution = parse_value(key, value)?,
            "fa_feedback_scale" => self.fa_feedback_scale = parse_value(key, value)?,
            "dfa_feedback_scale" => self.dfa_feedback_scale = parse_value(key, value)?,
            "injection_divisor" => self.injection_divisor = parse_optional(key, value)?,
            "target_rate" => self.target_rate = parse_optional(key, value)?,
            "floor_rate" => self.floor_rate = parse_value(key, value)?,
            "hidden_eta_shift" => self.hidden_eta_shift = parse_value(key, value)?,
            "reset" => self.reset = value.parse()?,
            "error_clamp" => self.error_clamp = parse_optional(key, value)?,
            "boundary_reset" => self.boundary_reset = parse_value(key, value)?,
            "pre_trace" => self.pre_trace = value.parse()?,
            _ => return Err(Error::Config(format!("unknown network option {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerDesc>,
    pub feedback: FeedbackMode,
    /// Phase length in steps.
    pub t: u32,
    /// Logical threshold; integer thresholds are multiples of it per layer.
    pub theta: i64,
    pub trainable: Vec<bool>,
    pub options: NetOptions,
}

impl NetworkSpec {
    /// Dense layers train, convolutions stay fixed.
    pub fn new(structure: &str, feedback: FeedbackMode, t: u32, theta: i64) -> Result<Self> {
        let layers = parse_structure(structure)?;
        let trainable = layers
            .iter()
            .map(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .collect();
        let spec = NetworkSpec {
            layers,
            feedback,
            t,
            theta,
            trainable,
            options: NetOptions::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_options(mut self, options: NetOptions) -> Self {
        self.options = options;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("phase length T must be at least 1".into()));
        }
        if self.theta <= 0 {
            return Err(Error::Config("threshold must be positive".into()));
        }
        if self.trainable.len() != self.layers.len() {
            return Err(Error::Config(
                "trainable mask length differs from layer count".into(),
            ));
        }
        if self.trainable[0] {
            return Err(Error::Config("the input layer cannot be trainable".into()));
        }
        for (l, (desc, &tr)) in self.layers.iter().zip(&self.trainable).enumerate() {
            if tr && !matches!(desc.kind, LayerKind::Dense { .. }) {
                return Err(Error::Config(format!(
                    "layer {l} ({}) is not dense and cannot be trained in the substrate",
                    desc.token()
                )));
            }
        }
        let o = &self.options;
        if o.init_gain <= 0.0 || o.init_range_lsb <= 0 || o.init_range_lsb > 127 {
            return Err(Error::Config("bad weight initialisation options".into()));
        }
        if o.error_resolution <= 0 || o.injection_divisor.is_some_and(|d| d <= 0) {
            return Err(Error::Config("bad error-path scaling options".into()));
        }
        if o.target_rate.is_some_and(|r| r > self.t) {
            return Err(Error::Config("target rate exceeds phase length".into()));
        }
        if o.floor_rate > self.target_rate() {
            return Err(Error::Config("floor rate exceeds target rate".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, LayerDesc::size)
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].size()
    }

    pub fn structure(&self) -> String {
        structure_string(&self.layers)
    }

    pub fn trainable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.trainable[l]).collect()
    }

    pub fn target_rate(&self) -> u32 {
        self.options.target_rate.unwrap_or(self.t)
    }

    pub fn injection_divisor(&self) -> i64 {
        self.options.injection_divisor.unwrap_or(self.t as i64)
    }
}

/// One input sample as per-neuron intensities in `[0, T]` plus its label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePresentation {
    pub input: Vec<u16>,
    pub label: Option<usize>,
}

/// Maps raw intensities in `0..=255` onto `T` bins: `floor(x * T / 256)`.
pub fn quantize_input(raw: &[u8], t: u32) -> Vec<u16> {
    raw.iter().map(|&x| ((x as u32 * t) / 256) as u16).collect()
}

/// Per-step bias for each input neuron. A neuron with bias `i` and threshold
/// `theta` emits `floor(i * T / theta)` spikes over a phase.
pub fn encode_input_bias(x: &SamplePresentation, t: u32) -> Result<Vec<i64>> {
    x.input
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v as u32 > t {
                Err(Error::Config(format!(
                    "input component {i} = {v} exceeds phase length {t}"
                )))
            } else {
                Ok(v as i64)
            }
        })
        .collect()
}

/// Per-step bias for the positive loss channel of each class. The true class
/// gets enough drive to request `target_rate` spikes per phase from a
/// compartment with threshold `loss_threshold`; every other class gets none.
pub fn encode_label_bias(
    label: Option<usize>,
    num_classes: usize,
    t: u32,
    target_rate: u32,
    loss_threshold: i64,
) -> Result<Vec<i64>> {
    let mut bias = vec![0; num_classes];
    if let Some(c) = label {
        if c >= num_classes {
            return Err(Error::Config(format!(
                "label {c} out of range for {num_classes} classes"
            )));
        }
        bias[c] = loss_threshold * target_rate as i64 / t as i64;
    }
    Ok(bias)
}
