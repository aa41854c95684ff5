//! Synapse-local learning.
//!
//! Two layers live here: a generic evaluator for rules written as a sum of
//! products of locally available variables, and the concrete two-phase rule
//! that updates each weight once at the end of a sample from the postsynaptic
//! phase-2 count, the synapse tag and the frozen presynaptic trace.

use num_rational::Rational64;

use crate::error::{Error, Result};
use crate::neuron::PhaseTraces;

impl std::fmt::Display for Dyadic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Accepts a decimal (`0.125`), a power of two (`2^-3`) or a fraction with a
/// power-of-two denominator (`1/8`).
impl std::str::FromStr for Dyadic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("{s:?} is not a binary fraction"));
        let s = s.trim();
        let v = if let Some(e) = s.strip_prefix("2^") {
            let e: i32 = e.parse().map_err(|_| bad())?;
            2f64.powi(e)
        } else if let Some((a, b)) = s.split_once('/') {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        } else {
            s.parse().map_err(|_| bad())?
        };
        Dyadic::from_f64(v).ok_or_else(bad)
    }
}

/// Exact binary fraction `num / 2^shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dyadic {
    pub num: i64,
    pub shift: u32,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic { num: 0, shift: 0 };

    pub fn new(num: i64, shift: u32) -> Self {
        assert!(shift < 48, "dyadic shift {shift} out of range");
        Dyadic { num, shift }
    }

    pub fn integer(num: i64) -> Self {
        Dyadic { num, shift: 0 }
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / (1u64 << self.shift) as f64
    }

    /// Exact dyadic value of `v`, if it has one with a shift below 48.
    pub fn from_f64(v: f64) -> Option<Self> {
        (0..48).find_map(|shift| {
            let scaled = v * (1u64 << shift) as f64;
            (scaled.fract() == 0.0 && scaled.abs() < 9.0e15).then(|| Dyadic::new(scaled as i64, shift))
        })
    }

    pub fn to_rational(self) -> Rational64 {
        Rational64::new(self.num, 1i64 << self.shift)
    }

    pub fn mul_int(self, k: i64) -> Self {
        Dyadic {
            num: self.num * k,
            shift: self.shift,
        }
    }
}

/// Variables a synapse-local rule may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarRef {
    PreTrace,
    PostTrace,
    Tag,
    Weight,
    /// Always 1; useful for constant terms.
    ConstantOne,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Bindings {
    pub pre_trace: Option<i64>,
    pub post_trace: Option<i64>,
    pub tag: Option<i64>,
    pub weight: Option<i64>,
}

impl Bindings {
    pub fn get(&self, var: VarRef) -> Option<i64> {
        match var {
            VarRef::PreTrace => self.pre_trace,
            VarRef::PostTrace => self.post_trace,
            VarRef::Tag => self.tag,
            VarRef::Weight => self.weight,
            VarRef::ConstantOne => Some(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Factor {
    pub var: VarRef,
    pub constant: i64,
}

impl Factor {
    pub fn new(var: VarRef, constant: i64) -> Self {
        Factor { var, constant }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub scale: Rational64,
    pub factors: Vec<Factor>,
}

/// `sum_i S_i * prod_j (V_ij + C_ij)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SumOfProductsRule {
    terms: Vec<Term>,
}

impl SumOfProductsRule {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("rule needs at least one term".into()));
        }
        if terms.iter().any(|t| t.factors.is_empty()) {
            return Err(Error::Config("every rule term needs a factor".into()));
        }
        Ok(SumOfProductsRule { terms })
    }

    /// `2 eta * post * pre - eta * tag * pre`.
    pub fn emstdp(eta: Rational64) -> Self {
        SumOfProductsRule {
            terms: vec![
                Term {
                    scale: eta * 2,
                    factors: vec![
                        Factor::new(VarRef::PostTrace, 0),
                        Factor::new(VarRef::PreTrace, 0),
                    ],
                },
                Term {
                    scale: -eta,
                    factors: vec![Factor::new(VarRef::Tag, 0), Factor::new(VarRef::PreTrace, 0)],
                },
            ],
        }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }
}

pub fn eval_sum_of_products(rule: &SumOfProductsRule, bindings: &Bindings) -> Result<Rational64> {
    let mut total = Rational64::from_integer(0);
    for term in &rule.terms {
        let mut product = Rational64::from_integer(1);
        for f in &term.factors {
            let v = bindings
                .get(f.var)
                .ok_or_else(|| Error::Config(format!("unbound rule variable {:?}", f.var)))?;
            product *= Rational64::from_integer(v + f.constant);
        }
        total += term.scale * product;
    }
    Ok(total)
}

named_enum!(Rounding, "rounding mode", {
    Rounding::Stochastic => "stochastic",
    Rounding::NearestEven => "nearest-even",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    /// Round up with probability equal to the fractional part.
    #[default]
    Stochastic,
    /// Round half to even.
    NearestEven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearningParams {
    /// Learning rate as an exact binary fraction; `2^-3` by default.
    pub eta: Dyadic,
    pub weight_min: i32,
    pub weight_max: i32,
    pub rounding: Rounding,
}

impl Default for LearningParams {
    fn default() -> Self {
        LearningParams {
            eta: Dyadic::new(1, 3),
            weight_min: -128,
            weight_max: 127,
            rounding: Rounding::Stochastic,
        }
    }
}

impl LearningParams {
    pub fn validate(&self) -> Result<()> {
        if self.eta.num < 0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.weight_min > self.weight_max {
            return Err(Error::Config(format!(
                "empty weight range [{}, {}]",
                self.weight_min, self.weight_max
            )));
        }
        Ok(())
    }

    /// Same parameters with the learning rate divided by `2^k`.
    pub fn slowed(mut self, k: u32) -> Self {
        self.eta = Dyadic::new(self.eta.num, self.eta.shift + k);
        self
    }
}

/// Weight change from quantities available at the synapse when phase 2 ends:
/// `2 eta * h_hat * pre - eta * tag * pre`.
///
/// With `tag = h + h_hat` this is `eta * (h_hat - h) * pre`.
pub fn tagged_delta(h_hat: u32, tag_z: u32, pre: u32, eta: Dyadic) -> Dyadic {
    let pre = pre as i64;
    let num = 2 * h_hat as i64 * pre - tag_z as i64 * pre;
    Dyadic::new(eta.num * num, eta.shift)
}

/// End-of-sample update for one synapse given the postsynaptic traces and the
/// frozen presynaptic count.
pub fn emstdp_weight_delta(traces: &PhaseTraces, pre_frozen: u32, params: &LearningParams) -> Dyadic {
    tagged_delta(traces.h_hat, traces.z, pre_frozen, params.eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynapseRecord {
    pub weight: i32,
    pub tag_z: u32,
    pub src: u32,
    pub dst: u32,
    pub plastic: bool,
}

/// Stateless 64-bit mixer (splitmix64 finalizer). Gives every
/// `(seed, sample, synapse)` triple its own rounding draw so update order
/// cannot influence results.
pub fn counter_hash(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `clip(round(weight + delta))`. `draw` supplies uniform random bits and is
/// only consulted for stochastic rounding of a non-integer result.
pub fn apply_delta(weight: i32, delta: Dyadic, params: &LearningParams, draw: impl FnOnce() -> u64) -> i32 {
    let s = delta.shift;
    let scaled = ((weight as i64) << s) + delta.num;
    let floor = scaled >> s;
    let frac = scaled - (floor << s);
    let rounded = if frac == 0 {
        floor
    } else {
        match params.rounding {
            Rounding::Stochastic => {
                let r = (draw() & ((1u64 << s) - 1)) as i64;
                floor + (r < frac) as i64
            }
            Rounding::NearestEven => {
                let half = 1i64 << (s - 1);
                if frac > half || (frac == half && floor & 1 == 1) {
                    floor + 1
                } else {
                    floor
                }
            }
        }
    };
    rounded.clamp(params.weight_min as i64, params.weight_max as i64) as i32
}

/// Applies one delta per synapse, rounds and clips, and clears every tag.
/// Non-plastic synapses are left untouched.
pub fn commit_updates(
    synapses: &mut [SynapseRecord],
    deltas: &[Dyadic],
    params: &LearningParams,
    seed: u64,
    sample: u64,
) -> Result<()> {
    params.validate()?;
    if synapses.len() != deltas.len() {
        return Err(Error::Shape(format!(
            "{} synapses but {} deltas",
            synapses.len(),
            deltas.len()
        )));
    }
    for (i, (syn, &d)) in synapses.iter_mut().zip(deltas).enumerate() {
        if !syn.plastic {
            continue;
        }
        syn.weight = apply_delta(syn.weight, d, params, || counter_hash(seed, sample, i as u64));
        syn.tag_z = 0;
    }
    Ok(())
}
