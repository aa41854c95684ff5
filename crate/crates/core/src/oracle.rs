//! Real-valued reference model of the two-phase rule and plain
//! backpropagation on the same rate surrogate.
//!
//! Units match the integer engine: a weight is the potential one
//! presynaptic spike adds, activations are spike counts in `[0, T]`, and a
//! layer's output is `act(W h_prev / threshold)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{BuiltNetwork, FeedbackMode, FeedbackTarget, ForwardProjection, LayerDesc, LayerKind};

named_enum!(Activation, "activation", {
    Activation::Floor => "floor",
    Activation::Relaxed => "relaxed",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `floor(u / theta)` clipped to `[0, T]`, the spike-count surrogate.
    #[default]
    Floor,
    /// `u / theta` clipped to `[0, T]`.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FpWeights {
    /// Source-major `[src][dst]`.
    Dense(Vec<f64>),
    /// `[filter][ky][kx][channel]`, fixed.
    Conv(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpLayer {
    pub desc: LayerDesc,
    pub threshold: f64,
    /// Constant drive per step.
    pub bias: f64,
    pub trainable: bool,
    pub weights: FpWeights,
}

impl FpLayer {
    fn dense(&self) -> Option<&[f64]> {
        match &self.weights {
            FpWeights::Dense(w) => Some(w),
            FpWeights::Conv(_) => None,
        }
    }

    /// Membrane potential accumulated over a phase from presynaptic counts.
    fn potential(&self, pre: &[f64], t: f64) -> Vec<f64> {
        let n_dst = self.desc.size();
        let mut u = vec![self.bias * t; n_dst];
        match (&self.weights, self.desc.kind) {
            (FpWeights::Dense(w), _) => {
                for (i, &p) in pre.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (a, &wij) in u.iter_mut().zip(&w[i * n_dst..(i + 1) * n_dst]) {
                        *a += wij * p;
                    }
                }
            }
            (FpWeights::Conv(w), LayerKind::Conv { kernel, stride, .. }) => {
                let (inp, out) = (self.desc.input, self.desc.output);
                for oy in 0..out.height {
                    for ox in 0..out.width {
                        for f in 0..out.channels {
                            let mut acc = 0.0;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    for c in 0..inp.channels {
                                        let k = ((f * kernel + ky) * kernel + kx) * inp.channels + c;
                                        acc += w[k] * pre[inp.index(ox * stride + kx, oy * stride + ky, c)];
                                    }
                                }
                            }
                            u[out.index(ox, oy, f)] += acc;
                        }
                    }
                }
            }
            (FpWeights::Conv(_), _) => unreachable!("conv weights on a non-conv layer"),
        }
        u
    }
}

/// Feedback matrix in real units, source-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FpFeedback {
    pub from_layer: usize,
    pub to_layer: usize,
    pub n_src: usize,
    pub n_dst: usize,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpNetwork {
    pub layers: Vec<FpLayer>,
    pub feedback_mode: FeedbackMode,
    pub feedback: Vec<FpFeedback>,
    pub t: u32,
    pub activation: Activation,
    /// Target count of the labelled class.
    pub target_rate: f64,
    /// Target count of every other class.
    pub floor_rate: f64,
    /// Error spikes needed to move a forward count by one.
    pub injection_divisor: f64,
}

/// Per-layer rates plus the potentials that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub h: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

/// One weight-delta vector per layer (empty for layers without dense weights).
pub type LayerDeltas = Vec<Vec<f64>>;

impl FpNetwork {
    /// Dequantized copy of an integer network. Feedback matrices are
    /// converted to the rate units the oracle uses: FA entries become error
    /// spikes per upstream error spike, DFA entries forward spikes per loss
    /// spike.
    pub fn from_built(net: &BuiltNetwork) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let weights = match &l.incoming {
                    None => FpWeights::Dense(Vec::new()),
                    Some(ForwardProjection::Dense(d)) => {
                        FpWeights::Dense(d.weights.iter().map(|&w| w as f64).collect())
                    }
                    Some(ForwardProjection::Conv(c)) => {
                        FpWeights::Conv(c.weights.iter().map(|&w| w as f64).collect())
                    }
                };
                FpLayer {
                    desc: l.desc,
                    threshold: l.threshold() as f64,
                    bias: l.cfg.bias as f64,
                    trainable: l.trainable,
                    weights,
                }
            })
            .collect();
        let err_threshold = net.errors.first().map_or(1.0, |e| e.soma_cfg.threshold as f64);
        let feedback = net
            .feedback
            .iter()
            .map(|f| {
                let (to_layer, unit) = match f.to {
                    FeedbackTarget::ErrorPopulation(p) => (net.errors[p].paired_layer, err_threshold),
                    FeedbackTarget::ForwardLayer(l) => (l, net.layers[l].threshold() as f64),
                };
                let m = f.matrix.multiplier as f64;
                FpFeedback {
                    from_layer: net.errors[f.from].paired_layer,
                    to_layer,
                    n_src: f.matrix.n_src,
                    n_dst: f.matrix.n_dst,
                    b: f.matrix.weights.iter().map(|&w| w as f64 * m / unit).collect(),
                }
            })
            .collect();
        FpNetwork {
            layers,
            feedback_mode: net.spec.feedback,
            feedback,
            t: net.spec.t,
            activation: Activation::Floor,
            target_rate: net.spec.target_rate() as f64,
            floor_rate: net.spec.options.floor_rate as f64,
            injection_divisor: net.spec.injection_divisor() as f64,
        }
    }

    /// Small dense network with random real weights, for diagnostics.
    /// `sizes[0]` is the input width. Weights are uniform in
    /// `[-gain * theta / fan_in, +]`, feedback uniform in `[-b_scale, b_scale]`.
    pub fn random_dense(
        sizes: &[usize],
        mode: FeedbackMode,
        t: u32,
        gain: f64,
        b_scale: f64,
        seed: u64,
    ) -> Self {
        let structure = std::iter::once(format!("1x1x{}", sizes[0]))
            .chain(sizes[1..].iter().map(|n| format!("{n}d")))
            .collect::<Vec<_>>()
            .join("-");
        let descs = crate::net::parse_structure(&structure).expect("valid sizes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = t as f64;
        let layers = descs
            .iter()
            .enumerate()
            .map(|(l, &desc)| {
                let n = desc.fan_in() * desc.size();
                let a = if l == 0 {
                    0.0
                } else {
                    gain * theta / desc.fan_in() as f64
                };
                FpLayer {
                    desc,
                    threshold: theta,
                    bias: 0.0,
                    trainable: l > 0,
                    weights: FpWeights::Dense((0..n).map(|_| rng.random_range(-a..=a)).collect()),
                }
            })
            .collect::<Vec<_>>();
        let out = layers.len() - 1;
        let mut feedback = Vec::new();
        let mut upstream = out;
        for l in (1..out).rev() {
            let from = match mode {
                FeedbackMode::Fa => upstream,
                FeedbackMode::Dfa => out,
            };
            let (n_src, n_dst) = (layers[from].desc.size(), layers[l].desc.size());
            feedback.push(FpFeedback {
                from_layer: from,
                to_layer: l,
                n_src,
                n_dst,
                b: (0..n_src * n_dst)
                    .map(|_| rng.random_range(-b_scale..=b_scale))
                    .collect(),
            });
            upstream = l;
        }
        FpNetwork {
            layers,
            feedback_mode: mode,
            feedback,
            t,
            activation: Activation::Relaxed,
            target_rate: t as f64,
            floor_rate: 0.0,
            injection_divisor: t as f64,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.desc.size())
    }

    fn act(&self, u: f64, threshold: f64) -> f64 {
        let r = u / threshold;
        let r = match self.activation {
            Activation::Floor => r.floor(),
            Activation::Relaxed => r,
        };
        r.clamp(0.0, self.t as f64)
    }

    /// Derivative gate: open iff the neuron was active.
    fn gate(h: f64) -> f64 {
        if h > 0.0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn fp_forward(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.layers[0].desc.size() {
            return Err(Error::Shape(format!(
                "input has {} components, expected {}",
                x.len(),
                self.layers[0].desc.size()
            )));
        }
        let mut h = vec![x.to_vec()];
        let mut u = vec![x.to_vec()];
        for layer in &self.layers[1..] {
            let pot = layer.potential(h.last().expect("nonempty"), self.t as f64);
            h.push(pot.iter().map(|&p| self.act(p, layer.threshold)).collect());
            u.push(pot);
        }
        Ok(ForwardPass { h, u })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let fp = self.fp_forward(x)?;
        let out = fp.h.last().expect("nonempty");
        let mut best = 0;
        for (i, &v) in out.iter().enumerate() {
            if v > out[best] {
                best = i;
            }
        }
        Ok(best)
    }

    fn targets(&self, label: usize) -> Result<Vec<f64>> {
        let n = self.num_classes();
        if label >= n {
            return Err(Error::Config(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let mut t = vec![self.floor_rate; n];
        t[label] = self.target_rate;
        Ok(t)
    }

    /// Phase-2 shift of every layer's count (`h_hat - h`) under the same
    /// conventions as the spiking engine.
    pub fn corrections(&self, fp: &ForwardPass, label: usize) -> Result<Vec<Vec<f64>>> {
        let target = self.targets(label)?;
        let d = self.injection_divisor;
        let out = self.layers.len() - 1;
        let mut corr: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.desc.size()]).collect();
        // Error spike counts per layer (FA chain); output is the loss.
        let mut errors: Vec<Vec<f64>> = corr.clone();
        // The loss compares the target with the corrected output h + e/d.
        errors[out] = target
            .iter()
            .zip(&fp.h[out])
            .map(|(&tg, &h)| (tg - h) * d / (d + 1.0) * Self::gate(h))
            .collect();
        corr[out] = errors[out].iter().map(|e| e / d).collect();
        let mut fbs: Vec<&FpFeedback> = self.feedback.iter().collect();
        fbs.sort_by_key(|f| std::cmp::Reverse(f.to_layer));
        for fb in fbs {
            let src = &errors[fb.from_layer];
            let mut drive = vec![0.0; fb.n_dst];
            for (i, &e) in src.iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                for (d, &b) in drive.iter_mut().zip(&fb.b[i * fb.n_dst..(i + 1) * fb.n_dst]) {
                    *d += b * e;
                }
            }
            let l = fb.to_layer;
            let gated: Vec<f64> = drive
                .iter()
                .zip(&fp.h[l])
                .map(|(&d, &h)| d * Self::gate(h))
                .collect();
            match self.feedback_mode {
                FeedbackMode::Fa => {
                    corr[l] = gated.iter().map(|e| e / d).collect();
                    errors[l] = gated;
                }
                FeedbackMode::Dfa => corr[l] = gated,
            }
        }
        Ok(corr)
    }

    /// Phase-2 counts `h_hat`. Each layer keeps its phase-1 count, shifted
    /// by the change that the corrected counts below it cause, plus its own
    /// correction. The output correction is taken against the shifted
    /// output, which is what the loss neurons see.
    pub fn phase2_counts(&self, fp: &ForwardPass, label: usize) -> Result<Vec<Vec<f64>>> {
        let corr = self.corrections(fp, label)?;
        let target = self.targets(label)?;
        let d = self.injection_divisor;
        let out = self.layers.len() - 1;
        let t = self.t as f64;
        let mut hat = vec![fp.h[0].clone()];
        for l in 1..self.layers.len() {
            let layer = &self.layers[l];
            let now = layer.potential(&hat[l - 1], t);
            let before = layer.potential(&fp.h[l - 1], t);
            let h: Vec<f64> = (0..layer.desc.size())
                .map(|j| {
                    let shift = self.act(now[j], layer.threshold) - self.act(before[j], layer.threshold);
                    let x = fp.h[l][j] + shift;
                    let c = if l == out {
                        (target[j] - x) / (d + 1.0) * Self::gate(fp.h[l][j])
                    } else {
                        corr[l][j]
                    };
                    (x + c).clamp(0.0, t)
                })
                .collect();
            hat.push(h);
        }
        Ok(hat)
    }

    /// Rate-domain weight deltas `eta * (h_hat - h) * h_pre` for every
    /// trainable dense layer.
    pub fn fp_emstdp_step(&self, x: &[f64], label: usize, eta: f64) -> Result<LayerDeltas> {
        let fp = self.fp_forward(x)?;
        let corr = self.corrections(&fp, label)?;
        Ok(self.outer_deltas(&fp, &corr, eta))
    }

    pub fn outer_deltas(&self, fp: &ForwardPass, post: &[Vec<f64>], scale: f64) -> LayerDeltas {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                if l == 0 || !layer.trainable || layer.dense().is_none() {
                    return Vec::new();
                }
                let pre = &fp.h[l - 1];
                let n_dst = layer.desc.size();
                let mut d = vec![0.0; pre.len() * n_dst];
                for (i, &p) in pre.iter().enumerate() {
                    for j in 0..n_dst {
                        d[i * n_dst + j] = scale * post[l][j] * p;
                    }
                }
                d
            })
            .collect()
    }

    pub fn apply(&mut self, deltas: &LayerDeltas) -> Result<()> {
        if deltas.len() != self.layers.len() {
            return Err(Error::Shape("delta list length differs from layer count".into()));
        }
        for (layer, d) in self.layers.iter_mut().zip(deltas) {
            if d.is_empty() {
                continue;
            }
            match &mut layer.weights {
                FpWeights::Dense(w) if w.len() == d.len() => w.iter_mut().zip(d).for_each(|(w, d)| *w += d),
                _ => return Err(Error::Shape("delta shape differs from layer weights".into())),
            }
        }
        Ok(())
    }

    pub fn train_sample(&mut self, x: &[f64], label: usize, eta: f64) -> Result<usize> {
        let fp = self.fp_forward(x)?;
        let pred = argmax_f(fp.h.last().expect("nonempty"));
        let corr = self.corrections(&fp, label)?;
        let d = self.outer_deltas(&fp, &corr, eta);
        self.apply(&d)?;
        Ok(pred)
    }

    /// `0.5 * sum (target - h_out)^2`.
    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        let fp = self.fp_forward(x)?;
        let target = self.targets(label)?;
        Ok(0.5
            * target
                .iter()
                .zip(fp.h.last().expect("nonempty"))
                .map(|(t, h)| (t - h).powi(2))
                .sum::<f64>())
    }

    /// Exact gradient of [`loss`](Self::loss) with respect to every trainable
    /// dense weight, in relaxed mode. The activation derivative is
    /// `1 / threshold` wherever the neuron is inside `(0, T)`.
    pub fn bp_gradient(&self, x: &[f64], label: usize) -> Result<LayerDeltas> {
        if self.activation != Activation::Relaxed {
            return Err(Error::Config(
                "backprop gradient needs the relaxed activation".into(),
            ));
        }
        let fp = self.fp_forward(x)?;
        let target = self.targets(label)?;
        let out = self.layers.len() - 1;
        let t = self.t as f64;
        // dL/du per layer.
        let mut delta: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.desc.size()]).collect();
        let slope = |l: usize, j: usize| {
            let r = fp.u[l][j] / self.layers[l].threshold;
            if r > 0.0 && r < t {
                1.0 / self.layers[l].threshold
            } else {
                0.0
            }
        };
        for j in 0..target.len() {
            delta[out][j] = -(target[j] - fp.h[out][j]) * slope(out, j);
        }
        for l in (1..out).rev() {
            let above = &self.layers[l + 1];
            let Some(w) = above.dense() else {
                return Err(Error::Config(
                    "backprop through a convolution is not supported".into(),
                ));
            };
            let n_up = above.desc.size();
            for j in 0..self.layers[l].desc.size() {
                let s: f64 = (0..n_up).map(|k| w[j * n_up + k] * delta[l + 1][k]).sum();
                delta[l][j] = s * slope(l, j);
            }
        }
        Ok(self.outer_deltas(&fp, &delta, 1.0))
    }
}

fn argmax_f(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity and sign agreement between two delta vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub cosine: f64,
    /// Fraction of entries where both are nonzero and share a sign, out of
    /// the entries where either is nonzero.
    pub sign_match: f64,
}

pub fn agreement(a: &[f64], b: &[f64]) -> Result<Agreement> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} entries", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    };
    let (mut same, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        if x != 0.0 || y != 0.0 {
            total += 1;
            if x * y > 0.0 {
                same += 1;
            }
        }
    }
    let sign_match = if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    };
    Ok(Agreement { cosine, sign_match })
}

/// Per-layer [`agreement`] over layers that carry deltas in both lists.
pub fn agreement_metric(a: &LayerDeltas, b: &LayerDeltas) -> Result<Vec<Option<Agreement>>> {
    if a.len() != b.len() {
        return Err(Error::Shape("layer count mismatch".into()));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.is_empty() && y.is_empty() {
                Ok(None)
            } else {
                agreement(x, y).map(Some)
            }
        })
        .collect()
}
