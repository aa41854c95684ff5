use super::build::{BuiltNetwork, FeedbackTarget, ForwardProjection};
use super::{encode_input_bias, encode_label_bias, SamplePresentation};
use crate::error::{Error, Result};
use crate::neuron::Phase;
use crate::plasticity::{apply_delta, counter_hash, tagged_delta};

/// Spike counts of every population over one phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseRecord {
    pub phase: Phase,
    /// Per forward layer: `h` after phase 1, `h_hat` after phase 2.
    pub forward: Vec<Vec<u32>>,
    /// Per error population: positive and negative channel counts.
    pub error_pos: Vec<Vec<u32>>,
    pub error_neg: Vec<Vec<u32>>,
    /// Error spikes delivered into each forward layer.
    pub injected: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub label: Option<usize>,
    /// Argmax of the phase-1 output counts.
    pub predicted: usize,
    pub output_h: Vec<u32>,
    pub output_h_hat: Vec<u32>,
    /// Sum of |Δw| per forward layer, in weight LSBs.
    pub weight_change_l1: Vec<u64>,
    pub error_spikes: u64,
}

/// Lowest index among the largest counts.
pub(crate) fn argmax(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

impl BuiltNetwork {
    /// Returns every neuron, trace, tag and error counter to its initial state.
    /// Weights and feedback matrices are untouched.
    pub fn reset_all(&mut self) {
        for layer in &mut self.layers {
            layer.state.iter_mut().for_each(|s| s.reset());
            layer.traces.iter_mut().for_each(|t| t.reset());
            layer.gate_open.fill(false);
            layer.injected.fill(0);
            layer.bias.fill(0);
            layer.spikes.clear();
            layer.acc.fill(0);
            if let Some(ForwardProjection::Dense(d)) = layer.incoming.as_mut() {
                d.tags.fill(0);
            }
        }
        for pop in &mut self.errors {
            pop.pos.iter_mut().for_each(|n| n.reset());
            pop.neg.iter_mut().for_each(|n| n.reset());
            pop.label_bias.fill(0);
            pop.count_pos.fill(0);
            pop.count_neg.fill(0);
            pop.spikes_pos.clear();
            pop.spikes_neg.clear();
            pop.prev_pos.clear();
            pop.prev_neg.clear();
        }
    }

    /// Loads the input biases (and, when present, the label biases used in
    /// phase 2).
    pub fn present(&mut self, sample: &SamplePresentation) -> Result<()> {
        if sample.input.len() != self.layers[0].len() {
            return Err(Error::Shape(format!(
                "sample has {} components, input layer has {}",
                sample.input.len(),
                self.layers[0].len()
            )));
        }
        let t = self.spec.t;
        self.layers[0].bias = encode_input_bias(sample, t)?;
        if !self.errors.is_empty() {
            // Every class asks for the floor rate; the labelled class asks for
            // the remainder up to the target on top of it.
            let floor = self.spec.options.floor_rate;
            let theta = self.loss_threshold();
            let mut bias = encode_label_bias(
                sample.label,
                self.num_classes(),
                t,
                self.spec.target_rate() - floor,
                theta,
            )?;
            if sample.label.is_some() {
                let base = theta * floor as i64 / t as i64;
                bias.iter_mut().for_each(|b| *b += base);
            }
            for (b, &on) in bias.iter_mut().zip(&self.output_layer().learn_mask) {
                if !on {
                    *b = 0;
                }
            }
            self.errors[0].label_bias = bias;
        } else if let Some(c) = sample.label {
            if c >= self.num_classes() {
                return Err(Error::Config(format!("label {c} out of range")));
            }
        }
        Ok(())
    }

    fn step(&mut self, phase: Phase) -> Result<()> {
        let n_layers = self.layers.len();

        // Input layer: bias drive only.
        {
            let input = &mut self.layers[0];
            input.spikes.clear();
            for i in 0..input.state.len() {
                if input.state[i].advance(&input.cfg, 0, input.bias[i])? {
                    input.spikes.push(i as u32);
                    input.traces[i].record_spike(phase);
                }
            }
        }

        // Forward layers bottom-up; a spike reaches the next layer in the
        // same step.
        for l in 1..n_layers {
            let (below, rest) = self.layers.split_at_mut(l);
            let layer = &mut rest[0];
            let pre = &below[l - 1].spikes;
            layer.acc.fill(0);
            if let Some(proj) = &layer.incoming {
                proj.deliver(pre, &mut layer.acc);
            }
            if phase == Phase::Two {
                for inj in self.injections.iter().filter(|i| i.to_layer == l) {
                    let pop = &self.errors[inj.from];
                    for (spikes, sign) in [(&pop.prev_pos, 1), (&pop.prev_neg, -1)] {
                        for &j in spikes {
                            let j = j as usize;
                            if layer.gate_open[j] {
                                layer.acc[j] += sign * inj.gain;
                                layer.injected[j] += 1;
                            }
                        }
                    }
                }
                for fb in &self.feedback {
                    if fb.to != FeedbackTarget::ForwardLayer(l) {
                        continue;
                    }
                    let pop = &self.errors[fb.from];
                    let n_spikes = (pop.prev_pos.len() + pop.prev_neg.len()) as u32;
                    if n_spikes == 0 {
                        continue;
                    }
                    let mut drive = vec![0i64; layer.len()];
                    fb.matrix.accumulate(&pop.prev_pos, 1, &mut drive);
                    fb.matrix.accumulate(&pop.prev_neg, -1, &mut drive);
                    for (j, d) in drive.into_iter().enumerate() {
                        if layer.gate_open[j] {
                            layer.acc[j] += d;
                            layer.injected[j] += n_spikes;
                        }
                    }
                }
            }
            layer.spikes.clear();
            for j in 0..layer.state.len() {
                let bias = layer.bias[j] + layer.cfg.bias;
                if layer.state[j].advance(&layer.cfg, layer.acc[j], bias)? {
                    layer.spikes.push(j as u32);
                    layer.traces[j].record_spike(phase);
                }
            }
        }

        // Error populations, top-down. In phase 1 only the auxiliary
        // compartments listen to their forward partners.
        for p in 0..self.errors.len() {
            let (done, rest) = self.errors.split_at_mut(p);
            let pop = &mut rest[0];
            let partner = &self.layers[pop.paired_layer];
            let n = pop.len();
            let mut aux_in = vec![0i64; n];
            let mut soma_in = vec![0i64; n];
            if phase == Phase::One {
                for &j in &partner.spikes {
                    aux_in[j as usize] = 1;
                }
            } else if p == 0 {
                for &j in &partner.spikes {
                    if partner.learn_mask[j as usize] {
                        soma_in[j as usize] = -self.loss_weight;
                    }
                }
            } else {
                for fb in &self.feedback {
                    if fb.to == FeedbackTarget::ErrorPopulation(p) {
                        let up = &done[fb.from];
                        fb.matrix.accumulate(&up.spikes_pos, 1, &mut soma_in);
                        fb.matrix.accumulate(&up.spikes_neg, -1, &mut soma_in);
                    }
                }
            }
            pop.spikes_pos.clear();
            pop.spikes_neg.clear();
            for j in 0..n {
                let bias = if phase == Phase::Two { pop.label_bias[j] } else { 0 };
                let (s, a) = (soma_in[j], aux_in[j]);
                if pop.pos[j].step(&pop.soma_cfg, &pop.aux_cfg, s, bias, a)? {
                    pop.spikes_pos.push(j as u32);
                    pop.count_pos[j] += 1;
                }
                if pop.neg[j].step(&pop.soma_cfg, &pop.aux_cfg, -s, -bias, a)? {
                    pop.spikes_neg.push(j as u32);
                    pop.count_neg[j] += 1;
                }
            }
        }
        for pop in &mut self.errors {
            std::mem::swap(&mut pop.prev_pos, &mut pop.spikes_pos);
            std::mem::swap(&mut pop.prev_neg, &mut pop.spikes_neg);
        }
        Ok(())
    }

    /// Adds each neuron's spike count for the phase to the tags of all its
    /// incoming plastic synapses. Tags are only read at commit time, so one
    /// batched increment per phase equals one increment per spike.
    fn accumulate_tags(&mut self, phase: Phase) {
        for layer in &mut self.layers {
            if !layer.trainable {
                continue;
            }
            let counts: Vec<u32> = layer
                .traces
                .iter()
                .map(|t| match phase {
                    Phase::One => t.h,
                    Phase::Two => t.h_hat,
                })
                .collect();
            if let Some(d) = layer.dense_mut() {
                for (j, &c) in counts.iter().enumerate() {
                    if c == 0 {
                        continue;
                    }
                    let c = c.min(u16::MAX as u32) as u16;
                    for t in &mut d.tags[j * d.n_src..(j + 1) * d.n_src] {
                        *t = t.saturating_add(c);
                    }
                }
            }
        }
    }

    fn phase_boundary(&mut self) {
        let clear = self.spec.options.boundary_reset;
        for layer in &mut self.layers {
            for (j, t) in layer.traces.iter_mut().enumerate() {
                t.freeze_pre();
                layer.gate_open[j] = t.h >= 1;
            }
            if clear {
                layer.state.iter_mut().for_each(|s| s.reset());
            }
            layer.spikes.clear();
        }
        for pop in &mut self.errors {
            pop.prev_pos.clear();
            pop.prev_neg.clear();
        }
    }

    fn record(&self, phase: Phase) -> PhaseRecord {
        PhaseRecord {
            phase,
            forward: self
                .layers
                .iter()
                .map(|l| {
                    l.traces
                        .iter()
                        .map(|t| match phase {
                            Phase::One => t.h,
                            Phase::Two => t.h_hat,
                        })
                        .collect()
                })
                .collect(),
            error_pos: self.errors.iter().map(|e| e.count_pos.clone()).collect(),
            error_neg: self.errors.iter().map(|e| e.count_neg.clone()).collect(),
            injected: self.layers.iter().map(|l| l.injected.clone()).collect(),
        }
    }

    fn phase1(&mut self) -> Result<()> {
        for _ in 0..self.spec.t {
            self.step(Phase::One)?;
        }
        self.accumulate_tags(Phase::One);
        self.phase_boundary();
        Ok(())
    }

    fn phase2(&mut self) -> Result<()> {
        for _ in 0..self.spec.t {
            self.step(Phase::Two)?;
        }
        self.accumulate_tags(Phase::Two);
        Ok(())
    }

    /// Resets the network, presents `sample` and runs `T` steps without error
    /// feedback.
    pub fn run_phase1(&mut self, sample: &SamplePresentation) -> Result<PhaseRecord> {
        self.reset_all();
        self.present(sample)?;
        self.phase1()?;
        Ok(self.record(Phase::One))
    }

    /// Runs the `T` steps of the error phase on the state left by
    /// [`run_phase1`](Self::run_phase1).
    pub fn run_phase2(&mut self) -> Result<PhaseRecord> {
        self.phase2()?;
        Ok(self.record(Phase::Two))
    }

    /// Applies the tagged update to every trainable dense projection and
    /// clears the tags. Returns `sum |Δw|` per layer.
    pub fn commit(&mut self) -> Result<Vec<u64>> {
        self.learning.validate()?;
        let base = self.learning;
        let out = self.layers.len() - 1;
        let mode = self.spec.options.pre_trace;
        let (seed, sample) = (self.seed, self.samples_seen);
        let mut changes = vec![0u64; self.layers.len()];
        let mut offset = 0u64;
        for l in 1..self.layers.len() {
            let (below, rest) = self.layers.split_at_mut(l);
            let layer = &mut rest[0];
            let pre: Vec<u32> = below[l - 1].traces.iter().map(|t| t.pre_trace(mode)).collect();
            let trainable = layer.trainable;
            let Some(ForwardProjection::Dense(d)) = layer.incoming.as_mut() else {
                continue;
            };
            let size = (d.n_src * d.n_dst) as u64;
            let params = if l == out {
                base
            } else {
                base.slowed(self.spec.options.hidden_eta_shift)
            };
            if trainable && !params.eta.is_zero() {
                for j in 0..d.n_dst {
                    if !layer.learn_mask[j] {
                        continue;
                    }
                    let h_hat = layer.traces[j].h_hat;
                    for (i, &p) in pre.iter().enumerate() {
                        if p == 0 {
                            continue;
                        }
                        let tag = d.tags[j * d.n_src + i] as u32;
                        let delta = tagged_delta(h_hat, tag, p, params.eta);
                        if delta.is_zero() {
                            continue;
                        }
                        let k = i * d.n_dst + j;
                        let idx = offset + k as u64;
                        let old = d.weights[k] as i32;
                        let new = apply_delta(old, delta, &params, || counter_hash(seed, sample, idx));
                        d.weights[k] = new as i16;
                        changes[l] += (new - old).unsigned_abs() as u64;
                    }
                }
            }
            d.tags.fill(0);
            offset += size;
        }
        Ok(changes)
    }

    /// One online learning step: phase 1, phase 2, commit, reset.
    pub fn train_sample(&mut self, sample: &SamplePresentation) -> Result<SampleMetrics> {
        if sample.label.is_none() {
            return Err(Error::Config("training sample without a label".into()));
        }
        self.reset_all();
        self.present(sample)?;
        self.phase1()?;
        let output_h: Vec<u32> = self.output_layer().traces.iter().map(|t| t.h).collect();
        self.phase2()?;
        let output_h_hat = self.output_layer().traces.iter().map(|t| t.h_hat).collect();
        let error_spikes = self
            .errors
            .iter()
            .map(|e| {
                e.count_pos
                    .iter()
                    .chain(&e.count_neg)
                    .map(|&c| c as u64)
                    .sum::<u64>()
            })
            .sum();
        let weight_change_l1 = self.commit()?;
        self.samples_seen += 1;
        self.reset_all();
        Ok(SampleMetrics {
            label: sample.label,
            predicted: argmax(&output_h),
            output_h,
            output_h_hat,
            weight_change_l1,
            error_spikes,
        })
    }

    /// Phase-1 output spike counts for `sample`.
    pub fn output_counts(&mut self, sample: &SamplePresentation) -> Result<Vec<u32>> {
        let unlabeled = SamplePresentation {
            input: sample.input.clone(),
            label: None,
        };
        self.reset_all();
        self.present(&unlabeled)?;
        for _ in 0..self.spec.t {
            self.step(Phase::One)?;
        }
        let counts = self.output_layer().traces.iter().map(|t| t.h).collect();
        self.reset_all();
        Ok(counts)
    }

    /// Phase 1 only; argmax over output counts, ties to the lowest class.
    pub fn infer_sample(&mut self, sample: &SamplePresentation) -> Result<usize> {
        Ok(argmax(&self.output_counts(sample)?))
    }
}
