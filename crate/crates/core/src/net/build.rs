use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::structure::{LayerDesc, LayerKind, Shape};
use super::{FeedbackMode, NetworkSpec};
use crate::error::{Error, Result};
use crate::neuron::{CompartmentConfig, CompartmentState, PhaseTraces, TwoCompartmentNeuron};
use crate::plasticity::LearningParams;

/// Fully connected projection. Weights are stored source-major so a spike
/// adds one contiguous row; tags are stored destination-major so a
/// postsynaptic count updates one contiguous row.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseProjection {
    pub n_src: usize,
    pub n_dst: usize,
    pub weights: Vec<i16>,
    pub tags: Vec<u16>,
}

impl DenseProjection {
    pub fn new(n_src: usize, n_dst: usize, weights: Vec<i16>) -> Self {
        assert_eq!(weights.len(), n_src * n_dst);
        DenseProjection {
            n_src,
            n_dst,
            weights,
            tags: vec![0; n_src * n_dst],
        }
    }

    pub fn weight(&self, src: usize, dst: usize) -> i16 {
        self.weights[src * self.n_dst + dst]
    }

    pub fn tag(&self, src: usize, dst: usize) -> u16 {
        self.tags[dst * self.n_src + src]
    }

    pub(crate) fn deliver(&self, spikes: &[u32], acc: &mut [i64]) {
        for &s in spikes {
            let row = &self.weights[s as usize * self.n_dst..(s as usize + 1) * self.n_dst];
            for (a, &w) in acc.iter_mut().zip(row) {
                *a += w as i64;
            }
        }
    }
}

/// Fixed convolution with valid padding; kernel stored as
/// `[filter][ky][kx][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvProjection {
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<i16>,
}

impl ConvProjection {
    fn kernel_index(&self, f: usize, ky: usize, kx: usize, c: usize) -> usize {
        ((f * self.kernel + ky) * self.kernel + kx) * self.input.channels + c
    }

    /// Calls `visit(dst, weight)` for every synapse leaving input neuron `src`.
    pub fn for_each_target(&self, src: usize, mut visit: impl FnMut(usize, i16)) {
        let c = src % self.input.channels;
        let x = (src / self.input.channels) % self.input.width;
        let y = src / (self.input.channels * self.input.width);
        let (k, s) = (self.kernel, self.stride);
        let range = |p: usize, out: usize| {
            let lo = if p + 1 >= k { (p + 1 - k).div_ceil(s) } else { 0 };
            let hi = (p / s).min(out - 1);
            lo..=hi
        };
        for oy in range(y, self.output.height) {
            let ky = y - oy * s;
            for ox in range(x, self.output.width) {
                let kx = x - ox * s;
                for f in 0..self.output.channels {
                    visit(
                        self.output.index(ox, oy, f),
                        self.weights[self.kernel_index(f, ky, kx, c)],
                    );
                }
            }
        }
    }

    pub(crate) fn deliver(&self, spikes: &[u32], acc: &mut [i64]) {
        for &s in spikes {
            self.for_each_target(s as usize, |d, w| acc[d] += w as i64);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardProjection {
    Dense(DenseProjection),
    Conv(ConvProjection),
}

impl ForwardProjection {
    pub(crate) fn deliver(&self, spikes: &[u32], acc: &mut [i64]) {
        match self {
            ForwardProjection::Dense(d) => d.deliver(spikes, acc),
            ForwardProjection::Conv(c) => c.deliver(spikes, acc),
        }
    }

    pub fn as_dense(&self) -> Option<&DenseProjection> {
        match self {
            ForwardProjection::Dense(d) => Some(d),
            ForwardProjection::Conv(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardLayer {
    pub desc: LayerDesc,
    pub cfg: CompartmentConfig,
    pub trainable: bool,
    /// Weights arriving from the layer below (absent for the input layer).
    pub incoming: Option<ForwardProjection>,
    pub state: Vec<CompartmentState>,
    pub traces: Vec<PhaseTraces>,
    pub bias: Vec<i64>,
    /// Latched at the phase boundary: error may only enter neurons that were
    /// active in phase 1.
    pub gate_open: Vec<bool>,
    /// Error spikes delivered to each neuron during phase 2.
    pub injected: Vec<u32>,
    /// Neurons whose incoming weights may change.
    pub learn_mask: Vec<bool>,
    pub(crate) spikes: Vec<u32>,
    pub(crate) acc: Vec<i64>,
}

impl ForwardLayer {
    fn new(desc: LayerDesc, threshold: i64, trainable: bool, incoming: Option<ForwardProjection>) -> Self {
        let n = desc.size();
        ForwardLayer {
            desc,
            cfg: CompartmentConfig::integrate_and_fire(threshold),
            trainable,
            incoming,
            state: vec![CompartmentState::default(); n],
            traces: vec![PhaseTraces::default(); n],
            bias: vec![0; n],
            gate_open: vec![false; n],
            injected: vec![0; n],
            learn_mask: vec![true; n],
            spikes: Vec::new(),
            acc: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    pub fn threshold(&self) -> i64 {
        self.cfg.threshold
    }

    pub fn dense(&self) -> Option<&DenseProjection> {
        self.incoming.as_ref().and_then(ForwardProjection::as_dense)
    }

    pub fn dense_mut(&mut self) -> Option<&mut DenseProjection> {
        match self.incoming.as_mut() {
            Some(ForwardProjection::Dense(d)) => Some(d),
            _ => None,
        }
    }
}

/// Positive and negative error channels paired one-to-one with a forward
/// layer. Each error neuron is AND-gated by an auxiliary compartment that
/// listens to its forward partner during phase 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPopulation {
    pub paired_layer: usize,
    pub soma_cfg: CompartmentConfig,
    pub aux_cfg: CompartmentConfig,
    pub pos: Vec<TwoCompartmentNeuron>,
    pub neg: Vec<TwoCompartmentNeuron>,
    /// Label drive of the positive channel (loss population only).
    pub label_bias: Vec<i64>,
    /// Spike counts over phase 2.
    pub count_pos: Vec<u32>,
    pub count_neg: Vec<u32>,
    pub(crate) spikes_pos: Vec<u32>,
    pub(crate) spikes_neg: Vec<u32>,
    pub(crate) prev_pos: Vec<u32>,
    pub(crate) prev_neg: Vec<u32>,
}

impl ErrorPopulation {
    fn new(paired_layer: usize, n: usize, soma_cfg: CompartmentConfig) -> Self {
        ErrorPopulation {
            paired_layer,
            soma_cfg,
            aux_cfg: CompartmentConfig::integrate_and_fire(1),
            pos: vec![TwoCompartmentNeuron::and_gated(); n],
            neg: vec![TwoCompartmentNeuron::and_gated(); n],
            label_bias: vec![0; n],
            count_pos: vec![0; n],
            count_neg: vec![0; n],
            spikes_pos: Vec::new(),
            spikes_neg: Vec::new(),
            prev_pos: Vec::new(),
            prev_neg: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// Fixed random feedback weights, 8-bit with an integer multiplier, stored
/// source-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMatrix {
    pub n_src: usize,
    pub n_dst: usize,
    pub weights: Vec<i16>,
    pub multiplier: i64,
}

impl FeedbackMatrix {
    pub fn get(&self, src: usize, dst: usize) -> i64 {
        self.weights[src * self.n_dst + dst] as i64 * self.multiplier
    }

    fn row(&self, src: usize) -> &[i16] {
        &self.weights[src * self.n_dst..(src + 1) * self.n_dst]
    }

    /// `acc += sign * B[src, :]` for each source spike.
    pub(crate) fn accumulate(&self, spikes: &[u32], sign: i64, acc: &mut [i64]) {
        let m = sign * self.multiplier;
        for &s in spikes {
            for (a, &w) in acc.iter_mut().zip(self.row(s as usize)) {
                *a += w as i64 * m;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackTarget {
    /// FA: into the error population with this index.
    ErrorPopulation(usize),
    /// DFA: straight into this forward layer.
    ForwardLayer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub from: usize,
    pub to: FeedbackTarget,
    pub matrix: FeedbackMatrix,
}

/// One-to-one error injection: positive channel adds `gain`, negative
/// channel subtracts it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub from: usize,
    pub to_layer: usize,
    pub gain: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltNetwork {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub layers: Vec<ForwardLayer>,
    /// Index 0 is the loss population on the output layer.
    pub errors: Vec<ErrorPopulation>,
    pub feedback: Vec<Feedback>,
    pub injections: Vec<Injection>,
    pub learning: LearningParams,
    /// Samples trained so far; keys the stochastic rounding stream.
    pub samples_seen: u64,
    /// Per-step drive of one output spike into the loss neurons.
    pub loss_weight: i64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Quantizes real values to 8 bits with the smallest integer multiplier that
/// keeps every entry in range.
pub(crate) fn quantize_with_multiplier(values: &[f64]) -> (Vec<i16>, i64) {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mult = ((max / 127.0).ceil() as i64).max(1);
    let q = values
        .iter()
        .map(|v| (v / mult as f64).round().clamp(-128.0, 127.0) as i16)
        .collect();
    (q, mult)
}

fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, half_width: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(-half_width..=half_width))
        .collect()
}

/// Half-width of the uniform forward init in potential units per
/// presynaptic spike: `init_gain * theta / sqrt(fan_in)`.
pub(crate) fn init_half_width(spec: &NetworkSpec, fan_in: usize) -> f64 {
    spec.options.init_gain * spec.theta as f64 / (fan_in as f64).sqrt()
}

/// Integer threshold of a randomly initialised layer: the init half-width
/// lands on `init_range_lsb`, with the threshold rounded to a multiple of the
/// injection divisor so the injection gain is exact.
pub(crate) fn layer_threshold(spec: &NetworkSpec, fan_in: usize) -> i64 {
    let t = spec.injection_divisor();
    let raw = spec.options.init_range_lsb as f64 * spec.theta as f64 / init_half_width(spec, fan_in);
    t * ((raw / t as f64).round() as i64).max(1)
}

impl BuiltNetwork {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        build_network(spec, seed)
    }

    pub fn output_layer(&self) -> &ForwardLayer {
        self.layers.last().expect("network has layers")
    }

    pub fn output_layer_mut(&mut self) -> &mut ForwardLayer {
        self.layers.last_mut().expect("network has layers")
    }

    pub fn num_classes(&self) -> usize {
        self.output_layer().len()
    }

    /// Logical error-channel neurons (positive plus negative).
    pub fn error_path_neurons(&self) -> usize {
        self.errors.iter().map(|e| 2 * e.len()).sum()
    }

    pub fn forward_neurons(&self) -> usize {
        self.layers.iter().map(ForwardLayer::len).sum()
    }

    /// Physical compartments: one per forward neuron, two per error neuron.
    pub fn compartments(&self) -> usize {
        self.forward_neurons() + 2 * self.error_path_neurons()
    }

    pub fn loss_threshold(&self) -> i64 {
        self.errors[0].soma_cfg.threshold
    }

    /// Restricts training to the given output classes: the others get no
    /// label drive, do not feed the loss and keep their weights. `None`
    /// re-enables every class. Inference always uses every output.
    pub fn set_enabled_outputs(&mut self, enabled: Option<&[usize]>) {
        let out = self.layers.len() - 1;
        let n = self.layers[out].len();
        let mask: Vec<bool> = match enabled {
            None => vec![true; n],
            Some(list) => (0..n).map(|c| list.contains(&c)).collect(),
        };
        self.layers[out].learn_mask = mask;
    }

    pub fn enabled_outputs(&self) -> Vec<bool> {
        self.output_layer().learn_mask.clone()
    }
}

pub(crate) fn build_network(spec: &NetworkSpec, seed: u64) -> Result<BuiltNetwork> {
    spec.validate()?;
    let opts = &spec.options;
    let theta = spec.theta;
    let n_layers = spec.layers.len();
    if n_layers < 2 {
        return Err(Error::Structure(
            "network needs at least one layer after the input".into(),
        ));
    }

    let mut layers = Vec::with_capacity(n_layers);
    let mut input = ForwardLayer::new(spec.layers[0], theta, false, None);
    input.cfg = input.cfg.with_reset(opts.reset);
    layers.push(input);
    for (l, desc) in spec.layers.iter().enumerate().skip(1) {
        let fan_in = desc.fan_in();
        let threshold = layer_threshold(spec, fan_in);
        let a = init_half_width(spec, fan_in);
        let to_int = threshold as f64 / theta as f64;
        let mut rng = stream_rng(seed, l as u64);
        let incoming = match desc.kind {
            LayerKind::Dense { units } => {
                let real = uniform_matrix(&mut rng, desc.input.size() * units, a);
                let w = real
                    .iter()
                    .map(|v| (v * to_int).round().clamp(-128.0, 127.0) as i16)
                    .collect();
                ForwardProjection::Dense(DenseProjection::new(desc.input.size(), units, w))
            }
            LayerKind::Conv {
                kernel,
                filters,
                stride,
            } => {
                let n = filters * kernel * kernel * desc.input.channels;
                let real = uniform_matrix(&mut rng, n, a);
                let w = real
                    .iter()
                    .map(|v| (v * to_int).round().clamp(-128.0, 127.0) as i16)
                    .collect();
                ForwardProjection::Conv(ConvProjection {
                    input: desc.input,
                    output: desc.output,
                    kernel,
                    stride,
                    weights: w,
                })
            }
            LayerKind::Input => {
                return Err(Error::Structure(format!("input token at position {l}")));
            }
        };
        let mut layer = ForwardLayer::new(*desc, threshold, spec.trainable[l], Some(incoming));
        layer.cfg = layer.cfg.with_reset(opts.reset);
        if l == n_layers - 1 {
            let b = opts.output_bias * threshold as f64 / spec.t as f64;
            layer.cfg = layer.cfg.with_bias(b.round() as i64);
        }
        layers.push(layer);
    }

    let err_threshold = theta * opts.error_resolution;
    let soma_cfg = CompartmentConfig::integrate_and_fire(err_threshold)
        .with_reset(opts.reset)
        .with_lower_clamp(opts.error_clamp);
    let out = n_layers - 1;
    let trainable = spec.trainable_layers();
    let divisor = spec.injection_divisor();

    let mut errors = Vec::new();
    let mut feedback = Vec::new();
    let mut injections = Vec::new();
    if !trainable.is_empty() {
        if !spec.trainable[out] {
            return Err(Error::Config(
                "hidden layers can only learn when the output layer does".into(),
            ));
        }
        errors.push(ErrorPopulation::new(out, layers[out].len(), soma_cfg));
        injections.push(Injection {
            from: 0,
            to_layer: out,
            gain: layers[out].threshold() / divisor,
        });
        let hidden: Vec<usize> = trainable.iter().copied().filter(|&l| l != out).rev().collect();
        let mut upstream = 0usize;
        for (k, &l) in hidden.iter().enumerate() {
            let mut rng = stream_rng(seed, 1000 + k as u64);
            let n_l = layers[l].len();
            match spec.feedback {
                FeedbackMode::Fa => {
                    let n_up = errors[upstream].len();
                    let real = uniform_matrix(&mut rng, n_up * n_l, opts.fa_feedback_scale);
                    let scaled: Vec<f64> = real.iter().map(|b| b * err_threshold as f64).collect();
                    let (w, m) = quantize_with_multiplier(&scaled);
                    errors.push(ErrorPopulation::new(l, n_l, soma_cfg));
                    let idx = errors.len() - 1;
                    feedback.push(Feedback {
                        from: upstream,
                        to: FeedbackTarget::ErrorPopulation(idx),
                        matrix: FeedbackMatrix {
                            n_src: n_up,
                            n_dst: n_l,
                            weights: w,
                            multiplier: m,
                        },
                    });
                    injections.push(Injection {
                        from: idx,
                        to_layer: l,
                        gain: layers[l].threshold() / divisor,
                    });
                    upstream = idx;
                }
                FeedbackMode::Dfa => {
                    let n_out = errors[0].len();
                    let half = opts.dfa_feedback_scale / spec.t as f64;
                    let real = uniform_matrix(&mut rng, n_out * n_l, half);
                    let scaled: Vec<f64> = real.iter().map(|b| b * layers[l].threshold() as f64).collect();
                    let (w, m) = quantize_with_multiplier(&scaled);
                    feedback.push(Feedback {
                        from: 0,
                        to: FeedbackTarget::ForwardLayer(l),
                        matrix: FeedbackMatrix {
                            n_src: n_out,
                            n_dst: n_l,
                            weights: w,
                            multiplier: m,
                        },
                    });
                }
            }
        }
    }

    Ok(BuiltNetwork {
        spec: spec.clone(),
        seed,
        layers,
        errors,
        feedback,
        injections,
        learning: LearningParams::default(),
        samples_seen: 0,
        loss_weight: err_threshold,
    })
}
