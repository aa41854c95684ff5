//! Discrete-time compartment dynamics.
//!
//! A compartment carries an integer synaptic current `u` and membrane
//! potential `v`. Each step the current decays and picks up the weighted
//! input, the potential decays and integrates the current plus a constant
//! bias, and a spike is emitted when the potential reaches threshold.
//!
//! With `voltage_decay = 1` and `current_decay = 0` the compartment is a
//! plain integrate-and-fire unit, which is how both the forward and the
//! error path are configured.

use crate::error::{Error, Result};

/// Fixed-point multiplicative decay factor in `[0, 1]`, stored as a 12-bit
/// fraction (`4096` is 1.0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Decay(u16);

impl Decay {
    pub const SCALE: u16 = 4096;
    /// Keeps the full value (no leak).
    pub const ONE: Decay = Decay(Self::SCALE);
    /// Drops the value entirely each step.
    pub const ZERO: Decay = Decay(0);

    pub fn from_fraction(num: u16) -> Result<Self> {
        if num > Self::SCALE {
            return Err(Error::Config(format!(
                "decay {num}/{} is outside [0, 1]",
                Self::SCALE
            )));
        }
        Ok(Decay(num))
    }

    /// Nearest representable factor to `x`.
    pub fn from_f64(x: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Config(format!("decay {x} is outside [0, 1]")));
        }
        Ok(Decay((x * Self::SCALE as f64).round() as u16))
    }

    pub fn fraction(self) -> u16 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    /// `x * factor`, truncated toward zero.
    fn apply(self, x: i64) -> Option<i64> {
        match self.0 {
            Self::SCALE => Some(x),
            0 => Some(0),
            f => x.checked_mul(f as i64).map(|p| p / Self::SCALE as i64),
        }
    }
}

named_enum!(ResetMode, "reset mode", {
    ResetMode::Subtract => "subtract",
    ResetMode::Zero => "zero",
});

named_enum!(PreTraceMode, "pre-trace mode", {
    PreTraceMode::FreezeAtBoundary => "freeze",
    PreTraceMode::Accumulate => "accumulate",
});

/// What happens to the potential when a spike is emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetMode {
    /// `v -= threshold`; the overshoot carries into the next interval.
    #[default]
    Subtract,
    /// `v = 0`; the overshoot is discarded.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompartmentConfig {
    pub threshold: i64,
    pub voltage_decay: Decay,
    pub current_decay: Decay,
    pub bias: i64,
    pub lower_clamp: Option<i64>,
    pub reset: ResetMode,
}

impl CompartmentConfig {
    /// Non-leaky integrate-and-fire: the potential never leaks and the
    /// current is consumed within the step it arrives.
    pub fn integrate_and_fire(threshold: i64) -> Self {
        CompartmentConfig {
            threshold,
            voltage_decay: Decay::ONE,
            current_decay: Decay::ZERO,
            bias: 0,
            lower_clamp: None,
            reset: ResetMode::Subtract,
        }
    }

    pub fn with_bias(mut self, bias: i64) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_reset(mut self, reset: ResetMode) -> Self {
        self.reset = reset;
        self
    }

    pub fn with_lower_clamp(mut self, clamp: Option<i64>) -> Self {
        self.lower_clamp = clamp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold <= 0 {
            return Err(Error::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct CompartmentState {
    pub v: i64,
    pub u: i64,
    pub spiked: bool,
}

impl CompartmentState {
    pub fn reset(&mut self) {
        *self = CompartmentState::default();
    }

    /// Current and potential update without the threshold test.
    pub(crate) fn integrate(
        &mut self,
        cfg: &CompartmentConfig,
        weighted_input: i64,
        bias: i64,
    ) -> Result<()> {
        let overflow = || Error::Overflow {
            v: self.v,
            input: weighted_input,
        };
        let u = cfg
            .current_decay
            .apply(self.u)
            .and_then(|u| u.checked_add(weighted_input))
            .ok_or_else(overflow)?;
        let v = cfg
            .voltage_decay
            .apply(self.v)
            .and_then(|v| v.checked_add(u))
            .and_then(|v| v.checked_add(bias))
            .ok_or_else(overflow)?;
        self.u = u;
        self.v = v;
        self.spiked = false;
        Ok(())
    }

    pub(crate) fn crossed(&self, cfg: &CompartmentConfig) -> bool {
        self.v >= cfg.threshold
    }

    pub(crate) fn fire(&mut self, cfg: &CompartmentConfig) {
        self.spiked = true;
        match cfg.reset {
            ResetMode::Subtract => self.v -= cfg.threshold,
            ResetMode::Zero => self.v = 0,
        }
    }

    pub(crate) fn clamp(&mut self, cfg: &CompartmentConfig) {
        if let Some(lo) = cfg.lower_clamp {
            self.v = self.v.max(lo);
        }
    }

    /// One full step with an explicit per-neuron bias, mutating in place.
    /// Returns whether the compartment spiked.
    pub(crate) fn advance(
        &mut self,
        cfg: &CompartmentConfig,
        weighted_input: i64,
        bias: i64,
    ) -> Result<bool> {
        self.integrate(cfg, weighted_input, bias)?;
        if self.crossed(cfg) {
            self.fire(cfg);
        }
        self.clamp(cfg);
        Ok(self.spiked)
    }
}

/// Advances one compartment by a single time step.
pub fn step_compartment(
    state: CompartmentState,
    cfg: &CompartmentConfig,
    weighted_input: i64,
) -> Result<CompartmentState> {
    cfg.validate()?;
    let mut next = state;
    next.advance(cfg, weighted_input, cfg.bias)?;
    Ok(next)
}

/// Spike count implied by an accumulated sub-threshold potential:
/// `floor(u / theta)`, never negative.
pub fn spike_count_activation(u_accum: i64, theta: i64) -> u32 {
    assert!(theta > 0, "threshold must be positive");
    if u_accum <= 0 {
        0
    } else {
        (u_accum / theta).min(u32::MAX as i64) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    None,
    /// The soma may only spike while the auxiliary compartment is active.
    AndGate,
}

/// Soma plus auxiliary compartment. The auxiliary compartment never fires
/// or resets; it latches to "active" once its potential reaches its own
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TwoCompartmentNeuron {
    pub soma: CompartmentState,
    pub auxiliary: CompartmentState,
    pub gate_mode: GateMode,
}

impl TwoCompartmentNeuron {
    pub fn and_gated() -> Self {
        TwoCompartmentNeuron {
            gate_mode: GateMode::AndGate,
            ..Default::default()
        }
    }

    pub fn auxiliary_active(&self, aux_cfg: &CompartmentConfig) -> bool {
        self.auxiliary.v >= aux_cfg.threshold
    }

    /// Integrates both compartments and applies the gate. The soma keeps its
    /// potential when the gate blocks a crossing.
    pub fn step(
        &mut self,
        soma_cfg: &CompartmentConfig,
        aux_cfg: &CompartmentConfig,
        soma_input: i64,
        soma_bias: i64,
        aux_input: i64,
    ) -> Result<bool> {
        self.auxiliary.integrate(aux_cfg, aux_input, 0)?;
        self.soma.integrate(soma_cfg, soma_input, soma_bias)?;
        if gated_fire(self, soma_cfg, aux_cfg) {
            self.soma.fire(soma_cfg);
        }
        self.soma.clamp(soma_cfg);
        Ok(self.soma.spiked)
    }

    pub fn reset(&mut self) {
        self.soma.reset();
        self.auxiliary.reset();
    }
}

/// Spike decision of a two-compartment neuron after integration.
pub fn gated_fire(
    n: &TwoCompartmentNeuron,
    soma_cfg: &CompartmentConfig,
    aux_cfg: &CompartmentConfig,
) -> bool {
    let crossed = n.soma.crossed(soma_cfg);
    match n.gate_mode {
        GateMode::None => crossed,
        GateMode::AndGate => crossed && n.auxiliary_active(aux_cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

/// How the presynaptic trace used by the learning rule is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PreTraceMode {
    /// Snapshot of the phase-1 count, taken at the phase boundary.
    #[default]
    FreezeAtBoundary,
    /// Count over both phases.
    Accumulate,
}

/// Per-neuron spike counters split by phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseTraces {
    /// Phase-1 spike count.
    pub h: u32,
    /// Phase-2 spike count.
    pub h_hat: u32,
    /// Spike count over both phases (`h + h_hat`).
    pub z: u32,
    /// Presynaptic trace as seen by outgoing synapses.
    pub pre_frozen: u32,
}

impl PhaseTraces {
    pub fn record_spike(&mut self, phase: Phase) {
        match phase {
            Phase::One => self.h += 1,
            Phase::Two => self.h_hat += 1,
        }
        self.z += 1;
    }

    pub fn freeze_pre(&mut self) {
        self.pre_frozen = self.h;
    }

    /// Presynaptic value to hand to the learning rule at the end of phase 2.
    pub fn pre_trace(&self, mode: PreTraceMode) -> u32 {
        match mode {
            PreTraceMode::FreezeAtBoundary => self.pre_frozen,
            PreTraceMode::Accumulate => self.z,
        }
    }

    pub fn reset(&mut self) {
        *self = PhaseTraces::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_bias(bias: i64, theta: i64, steps: usize) -> (u32, i64) {
        let cfg = CompartmentConfig::integrate_and_fire(theta).with_bias(bias);
        let mut s = CompartmentState::default();
        let mut count = 0;
        for _ in 0..steps {
            s = step_compartment(s, &cfg, 0).unwrap();
            count += s.spiked as u32;
        }
        (count, s.v)
    }

    #[test]
    fn input_exactly_at_threshold_fires_and_resets() {
        let cfg = CompartmentConfig::integrate_and_fire(64);
        let s = step_compartment(CompartmentState::default(), &cfg, 64).unwrap();
        assert!(s.spiked);
        assert_eq!(s.v, 0);
    }

    #[test]
    fn zero_drive_holds_potential() {
        let cfg = CompartmentConfig::integrate_and_fire(64);
        let s0 = CompartmentState {
            v: 30,
            ..Default::default()
        };
        let s = step_compartment(s0, &cfg, 0).unwrap();
        assert_eq!(s.v, 30);
        assert!(!s.spiked);
    }

    #[test]
    fn bias_three_gives_three_spikes_in_64_steps() {
        // Brute force: 3 * 64 = 192 = 3 thresholds.
        assert_eq!(run_bias(3, 64, 64), (3, 0));
    }

    #[test]
    fn zero_reset_discards_overshoot() {
        let cfg = CompartmentConfig::integrate_and_fire(64)
            .with_bias(3)
            .with_reset(ResetMode::Zero);
        let mut s = CompartmentState::default();
        let mut count = 0;
        for _ in 0..64 {
            s = step_compartment(s, &cfg, 0).unwrap();
            if s.spiked {
                assert_eq!(s.v, 0);
            }
            count += s.spiked as u32;
        }
        // 66 -> 0 twice (steps 22 and 44); 60 left over.
        assert_eq!(count, 2);
        assert_eq!(s.v, 60);
    }

    #[test]
    fn lower_clamp_applies_last() {
        let cfg = CompartmentConfig::integrate_and_fire(64).with_lower_clamp(Some(0));
        let s = step_compartment(CompartmentState::default(), &cfg, -500).unwrap();
        assert_eq!(s.v, 0);
    }

    #[test]
    fn overflow_is_an_error() {
        let cfg = CompartmentConfig::integrate_and_fire(64);
        let s0 = CompartmentState {
            v: i64::MAX - 1,
            ..Default::default()
        };
        assert!(matches!(
            step_compartment(s0, &cfg, 10),
            Err(Error::Overflow { .. })
        ));
    }

    #[test]
    fn invalid_threshold_rejected() {
        let cfg = CompartmentConfig::integrate_and_fire(0);
        assert!(step_compartment(CompartmentState::default(), &cfg, 0).is_err());
        assert!(Decay::from_f64(1.5).is_err());
        assert!(Decay::from_fraction(5000).is_err());
    }

    #[test]
    fn leaky_decay_truncates_toward_zero() {
        let cfg = CompartmentConfig {
            voltage_decay: Decay::from_fraction(2048).unwrap(),
            current_decay: Decay::from_fraction(2048).unwrap(),
            ..CompartmentConfig::integrate_and_fire(1000)
        };
        let s = step_compartment(CompartmentState::default(), &cfg, 100).unwrap();
        assert_eq!((s.u, s.v), (100, 100));
        let s = step_compartment(s, &cfg, 0).unwrap();
        assert_eq!((s.u, s.v), (50, 100));
        let s = step_compartment(
            CompartmentState {
                v: -3,
                u: -3,
                spiked: false,
            },
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!((s.u, s.v), (-1, -2));
    }

    #[test]
    fn activation_floors_and_clamps() {
        assert_eq!(spike_count_activation(128, 64), 2);
        assert_eq!(spike_count_activation(0, 64), 0);
        assert_eq!(spike_count_activation(130, 64), 2);
        assert_eq!(spike_count_activation(-500, 64), 0);
    }

    fn gate_cfgs() -> (CompartmentConfig, CompartmentConfig) {
        (
            CompartmentConfig::integrate_and_fire(64),
            CompartmentConfig::integrate_and_fire(1),
        )
    }

    #[test]
    fn and_gate_truth_table() {
        let (soma, aux) = gate_cfgs();
        let mut n = TwoCompartmentNeuron::and_gated();
        n.soma.v = 64;
        n.auxiliary.v = 1;
        assert!(gated_fire(&n, &soma, &aux));
        n.auxiliary.v = 0;
        assert!(!gated_fire(&n, &soma, &aux));
        n.soma.v = 10;
        n.auxiliary.v = 1;
        assert!(!gated_fire(&n, &soma, &aux));
    }

    #[test]
    fn blocked_soma_keeps_potential() {
        let (soma, aux) = gate_cfgs();
        let mut n = TwoCompartmentNeuron::and_gated();
        for _ in 0..4 {
            assert!(!n.step(&soma, &aux, 40, 0, 0).unwrap());
        }
        assert_eq!(n.soma.v, 160);
        // Opening the gate releases one spike per step.
        assert!(n.step(&soma, &aux, 0, 0, 1).unwrap());
        assert_eq!(n.soma.v, 96);
    }

    #[test]
    fn phase_traces_track_both_phases() {
        let mut t = PhaseTraces::default();
        t.record_spike(Phase::One);
        t.record_spike(Phase::One);
        t.freeze_pre();
        t.record_spike(Phase::Two);
        assert_eq!((t.h, t.h_hat, t.z, t.pre_frozen), (2, 1, 3, 2));
        assert_eq!(t.pre_trace(PreTraceMode::Accumulate), 3);
        t.reset();
        assert_eq!(t, PhaseTraces::default());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn constant_drive_count_is_floor(d in 0i64..200, steps in 1usize..200) {
                let cfg = CompartmentConfig::integrate_and_fire(64);
                let mut s = CompartmentState::default();
                let mut count = 0i64;
                for _ in 0..steps {
                    s = step_compartment(s, &cfg, d).unwrap();
                    count += s.spiked as i64;
                }
                // At most one spike per step.
                let expected = (d * steps as i64 / 64).min(steps as i64);
                prop_assert_eq!(count, expected);
            }

            #[test]
            fn fire_and_reset_conserves_charge(drive in proptest::collection::vec(-80i64..80, 1..150)) {
                let cfg = CompartmentConfig::integrate_and_fire(64);
                let mut s = CompartmentState::default();
                let mut count = 0i64;
                for &d in &drive {
                    s = step_compartment(s, &cfg, d).unwrap();
                    count += s.spiked as i64;
                }
                prop_assert_eq!(drive.iter().sum::<i64>() - count * 64, s.v);
            }

            #[test]
            fn inactive_aux_blocks_everything(drive in proptest::collection::vec(0i64..500, 1..100)) {
                let (soma, aux) = gate_cfgs();
                let mut n = TwoCompartmentNeuron::and_gated();
                for &d in &drive {
                    prop_assert!(!n.step(&soma, &aux, d, 0, 0).unwrap());
                }
            }

            #[test]
            fn traces_z_is_sum(spikes in proptest::collection::vec(any::<bool>(), 0..200)) {
                let mut t = PhaseTraces::default();
                let mut prev = t;
                for (i, &two) in spikes.iter().enumerate() {
                    t.record_spike(if two { Phase::Two } else { Phase::One });
                    prop_assert_eq!(t.z, t.h + t.h_hat);
                    prop_assert!(t.z > prev.z && t.h >= prev.h && t.h_hat >= prev.h_hat, "step {}", i);
                    prev = t;
                }
            }
        }
    }
}
