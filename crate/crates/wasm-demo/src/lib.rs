//! Browser bindings for the static demo page in `www/`.

use emstdp::harness::{self, RunConfig};
use emstdp::net::{BuiltNetwork, FeedbackMode, NetworkSpec, SamplePresentation};
use emstdp::neuron::{step_compartment, CompartmentConfig, CompartmentState};
use wasm_bindgen::prelude::*;

fn js(e: emstdp::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Spike times of one bias-driven input neuron over a phase of `t` steps.
#[wasm_bindgen]
pub fn spike_times(input: u32, t: u32, theta: i32) -> Result<Vec<u32>, JsError> {
    let cfg = CompartmentConfig::integrate_and_fire(theta as i64).with_bias(input as i64);
    let mut s = CompartmentState::default();
    let mut times = Vec::new();
    for step in 0..t {
        s = step_compartment(s, &cfg, 0).map_err(js)?;
        if s.spiked {
            times.push(step);
        }
    }
    Ok(times)
}

/// Spike count for every input value `0..=t`.
#[wasm_bindgen]
pub fn rate_curve(t: u32, theta: i32) -> Result<Vec<u32>, JsError> {
    (0..=t)
        .map(|i| spike_times(i, t, theta).map(|v| v.len() as u32))
        .collect()
}

/// Neurons-per-core sweep as CSV, for both feedback modes.
#[wasm_bindgen]
pub fn sweep_csv(structure: &str, l_m: &str) -> Result<String, JsError> {
    let mut cfg = RunConfig {
        structure: structure.to_string(),
        ..RunConfig::default()
    };
    cfg.set("sweep_l_m", l_m).map_err(js)?;
    Ok(harness::sweep_csv(&harness::sweep(&cfg).map_err(js)?))
}

const SIDE: usize = 6;
const CLASSES: usize = 3;

/// A 6x6 image of a bar: horizontal, vertical or diagonal, at a random
/// offset, with some background noise.
fn bar(class: usize, rng: &mut u64) -> Vec<u16> {
    let mut next = || {
        *rng ^= *rng << 13;
        *rng ^= *rng >> 7;
        *rng ^= *rng << 17;
        *rng
    };
    let offset = (next() % SIDE as u64) as usize;
    let mut img = vec![0u16; SIDE * SIDE];
    for k in 0..SIDE {
        let (x, y) = match class {
            0 => (k, offset),
            1 => (offset, k),
            _ => (k, (k + offset) % SIDE),
        };
        img[y * SIDE + x] = 48;
    }
    for p in img.iter_mut() {
        if next() % 8 == 0 {
            *p += 12;
        }
    }
    img
}

/// A small network learning to tell bar orientations apart, one
/// two-phase sample at a time.
#[wasm_bindgen]
pub struct TwoPhaseDemo {
    net: BuiltNetwork,
    rng: u64,
    test: Vec<(Vec<u16>, usize)>,
    last_h: Vec<u32>,
    last_h_hat: Vec<u32>,
}

#[wasm_bindgen]
impl TwoPhaseDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(dfa: bool, seed: u32) -> Result<TwoPhaseDemo, JsError> {
        let mode = if dfa { FeedbackMode::Dfa } else { FeedbackMode::Fa };
        let mut spec = NetworkSpec::new("6x6x1-48d-3d", mode, 64, 64).map_err(js)?;
        spec.options.init_gain = 1.2;
        let net = BuiltNetwork::build(&spec, seed as u64).map_err(js)?;
        let mut rng = seed as u64 * 2 + 0x9e37_79b9_7f4a_7c15;
        let test = (0..60)
            .map(|i| (bar(i % CLASSES, &mut rng), i % CLASSES))
            .collect();
        Ok(TwoPhaseDemo {
            net,
            rng,
            test,
            last_h: Vec::new(),
            last_h_hat: Vec::new(),
        })
    }

    /// Trains on one random sample and returns its label.
    pub fn step(&mut self) -> Result<usize, JsError> {
        let label = (self.rng % CLASSES as u64) as usize;
        let x = SamplePresentation {
            input: bar(label, &mut self.rng),
            label: Some(label),
        };
        let m = self.net.train_sample(&x).map_err(js)?;
        self.last_h = m.output_h;
        self.last_h_hat = m.output_h_hat;
        Ok(label)
    }

    /// Output spike counts of the last sample in phase 1.
    pub fn last_h(&self) -> Vec<u32> {
        self.last_h.clone()
    }

    /// Output spike counts of the last sample in phase 2.
    pub fn last_h_hat(&self) -> Vec<u32> {
        self.last_h_hat.clone()
    }

    pub fn samples_seen(&self) -> u32 {
        self.net.samples_seen as u32
    }

    /// Accuracy on a fixed set of 60 bars.
    pub fn accuracy(&mut self) -> Result<f64, JsError> {
        let mut hits = 0;
        for (img, label) in &self.test {
            let x = SamplePresentation {
                input: img.clone(),
                label: None,
            };
            hits += (self.net.infer_sample(&x).map_err(js)? == *label) as usize;
        }
        Ok(hits as f64 / self.test.len() as f64)
    }
}
