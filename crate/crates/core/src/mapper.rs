//! Layer-at-a-time placement of compartments onto bounded cores, plus the
//! neurons-per-core sweep used to trade core count against time
//! multiplexing.

use std::fmt;

use crate::error::{Error, Result};
use crate::net::{BuiltNetwork, FeedbackMode, FeedbackTarget, ForwardProjection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoreConstraints {
    pub max_compartments_per_core: usize,
    pub max_synapses_per_core: usize,
    /// Distinct presynaptic neurons feeding one core.
    pub max_fanin_per_core: usize,
    /// Synapses leaving the neurons of one core.
    pub max_fanout_per_core: usize,
}

impl Default for CoreConstraints {
    fn default() -> Self {
        CoreConstraints {
            max_compartments_per_core: 1024,
            max_synapses_per_core: 1_000_000,
            max_fanin_per_core: 4096,
            max_fanout_per_core: 1_000_000,
        }
    }
}

impl CoreConstraints {
    pub fn validate(&self) -> Result<()> {
        if self.max_compartments_per_core == 0
            || self.max_synapses_per_core == 0
            || self.max_fanin_per_core == 0
            || self.max_fanout_per_core == 0
        {
            return Err(Error::Config("core constraints must be positive".into()));
        }
        Ok(())
    }
}

/// A placement unit: a forward layer or one error population (positive
/// channel first, then negative).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Forward(usize),
    Error(usize),
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Forward(l) => write!(f, "layer{l}"),
            Group::Error(p) => write!(f, "error{p}"),
        }
    }
}

/// Every group of a network in placement order: forward layers bottom-up,
/// then error populations.
pub fn groups(net: &BuiltNetwork) -> Vec<Group> {
    (0..net.layers.len())
        .map(Group::Forward)
        .chain((0..net.errors.len()).map(Group::Error))
        .collect()
}

pub fn group_neurons(net: &BuiltNetwork, g: Group) -> usize {
    match g {
        Group::Forward(l) => net.layers[l].len(),
        Group::Error(p) => 2 * net.errors[p].len(),
    }
}

/// Error neurons carry a gating compartment next to the soma.
pub fn compartments_per_neuron(g: Group) -> usize {
    match g {
        Group::Forward(_) => 1,
        Group::Error(_) => 2,
    }
}

/// Sparse connectivity between two groups, one entry per synapse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub n_src: usize,
    pub n_dst: usize,
    pub entries: Vec<(u32, u32)>,
}

impl Adjacency {
    fn new(n_src: usize, n_dst: usize) -> Self {
        Adjacency {
            n_src,
            n_dst,
            entries: Vec::new(),
        }
    }

    fn push(&mut self, src: usize, dst: usize) {
        self.entries.push((src as u32, dst as u32));
    }

    fn dense(&mut self, src_offset: usize, n_src: usize, dst_offset: usize, n_dst: usize) {
        for i in 0..n_src {
            for j in 0..n_dst {
                self.push(src_offset + i, dst_offset + j);
            }
        }
    }

    fn diagonal(&mut self, src_offset: usize, dst_offset: usize, n: usize) {
        for j in 0..n {
            self.push(src_offset + j, dst_offset + j);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fan_out(&self) -> Vec<u32> {
        let mut v = vec![0; self.n_src];
        for &(s, _) in &self.entries {
            v[s as usize] += 1;
        }
        v
    }

    pub fn fan_in(&self) -> Vec<u32> {
        let mut v = vec![0; self.n_dst];
        for &(_, d) in &self.entries {
            v[d as usize] += 1;
        }
        v
    }
}

/// All synaptic connections of the network, forward and error path.
fn connections(net: &BuiltNetwork) -> Vec<(Group, Group, Adjacency)> {
    let mut out = Vec::new();
    for l in 1..net.layers.len() {
        let n_src = net.layers[l - 1].len();
        let n_dst = net.layers[l].len();
        let mut a = Adjacency::new(n_src, n_dst);
        match &net.layers[l].incoming {
            Some(ForwardProjection::Dense(_)) => a.dense(0, n_src, 0, n_dst),
            Some(ForwardProjection::Conv(c)) => {
                for s in 0..n_src {
                    c.for_each_target(s, |d, _| a.push(s, d));
                }
            }
            None => {}
        }
        out.push((Group::Forward(l - 1), Group::Forward(l), a));
    }
    for (p, pop) in net.errors.iter().enumerate() {
        let n = pop.len();
        let mut a = Adjacency::new(net.layers[pop.paired_layer].len(), 2 * n);
        // Gating compartments on both channels.
        a.diagonal(0, 0, n);
        a.diagonal(0, n, n);
        if p == 0 {
            // Loss somas compare the output spikes with the label.
            a.diagonal(0, 0, n);
            a.diagonal(0, n, n);
        }
        out.push((Group::Forward(pop.paired_layer), Group::Error(p), a));
    }
    for inj in &net.injections {
        let n = net.errors[inj.from].len();
        let mut a = Adjacency::new(2 * n, net.layers[inj.to_layer].len());
        a.diagonal(0, 0, n);
        a.diagonal(n, 0, n);
        out.push((Group::Error(inj.from), Group::Forward(inj.to_layer), a));
    }
    for fb in &net.feedback {
        let (ns, nd) = (fb.matrix.n_src, fb.matrix.n_dst);
        match fb.to {
            FeedbackTarget::ErrorPopulation(q) => {
                let mut a = Adjacency::new(2 * ns, 2 * nd);
                for (so, dof) in [(0, 0), (ns, 0), (0, nd), (ns, nd)] {
                    a.dense(so, ns, dof, nd);
                }
                out.push((Group::Error(fb.from), Group::Error(q), a));
            }
            FeedbackTarget::ForwardLayer(l) => {
                let mut a = Adjacency::new(2 * ns, nd);
                a.dense(0, ns, 0, nd);
                a.dense(ns, ns, 0, nd);
                out.push((Group::Error(fb.from), Group::Forward(l), a));
            }
        }
    }
    out
}

/// Synapses from `from` into `to`; empty when the groups are not connected.
pub fn build_adjacency(net: &BuiltNetwork, from: Group, to: Group) -> Adjacency {
    let mut adj = Adjacency::new(group_neurons(net, from), group_neurons(net, to));
    for (f, t, a) in connections(net) {
        if f == from && t == to {
            adj.entries.extend(a.entries);
        }
    }
    adj
}

/// Per-neuron connectivity of one group.
#[derive(Debug, Clone)]
struct GroupProfile {
    group: Group,
    compartments: usize,
    fan_in: Vec<u64>,
    fan_out: Vec<u64>,
    /// Sorted, deduplicated presynaptic neuron keys.
    sources: Vec<Vec<u64>>,
}

fn source_key(g: Group, idx: u32) -> u64 {
    let tag = match g {
        Group::Forward(l) => l as u64,
        Group::Error(p) => (1 << 15) | p as u64,
    };
    (tag << 32) | idx as u64
}

/// Connectivity summary of a whole network, computed once and reused by
/// every mapping of it.
#[derive(Debug, Clone)]
pub struct Layout {
    pub mode: FeedbackMode,
    pub t: u32,
    paired: Vec<usize>,
    profiles: Vec<GroupProfile>,
}

impl Layout {
    pub fn new(net: &BuiltNetwork) -> Self {
        let gs = groups(net);
        let mut profiles: Vec<GroupProfile> = gs
            .iter()
            .map(|&g| {
                let n = group_neurons(net, g);
                GroupProfile {
                    group: g,
                    compartments: compartments_per_neuron(g),
                    fan_in: vec![0; n],
                    fan_out: vec![0; n],
                    sources: vec![Vec::new(); n],
                }
            })
            .collect();
        let index = |g: Group| gs.iter().position(|&x| x == g).expect("known group");
        for (from, to, a) in connections(net) {
            let (fi, ti) = (index(from), index(to));
            for &(s, d) in &a.entries {
                profiles[fi].fan_out[s as usize] += 1;
                profiles[ti].fan_in[d as usize] += 1;
                profiles[ti].sources[d as usize].push(source_key(from, s));
            }
        }
        for p in &mut profiles {
            for s in &mut p.sources {
                s.sort_unstable();
                s.dedup();
            }
        }
        let paired = gs
            .iter()
            .map(|&g| match g {
                Group::Forward(l) => l,
                Group::Error(p) => net.errors[p].paired_layer,
            })
            .collect();
        Layout {
            mode: net.spec.feedback,
            t: net.spec.t,
            paired,
            profiles,
        }
    }

    pub fn groups(&self) -> Vec<Group> {
        self.profiles.iter().map(|p| p.group).collect()
    }

    pub fn total_compartments(&self) -> usize {
        self.profiles
            .iter()
            .map(|p| p.compartments * p.fan_in.len())
            .sum()
    }

    fn tally(&self, gi: usize, range: std::ops::Range<usize>) -> CoreTally {
        let p = &self.profiles[gi];
        let mut sources: Vec<u64> = p.sources[range.clone()].iter().flatten().copied().collect();
        sources.sort_unstable();
        sources.dedup();
        CoreTally {
            group: p.group,
            neurons: range.len(),
            compartments: range.len() * p.compartments,
            synapses_in: p.fan_in[range.clone()].iter().sum(),
            synapses_out: p.fan_out[range].iter().sum(),
            fanin: sources.len(),
        }
    }

    fn blocks(&self, gi: usize, l_m: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
        let n = self.profiles[gi].fan_in.len();
        (0..n.div_ceil(l_m)).map(move |k| k * l_m..((k + 1) * l_m).min(n))
    }

    fn group_fits(&self, gi: usize, l_m: usize, c: &CoreConstraints) -> bool {
        self.blocks(gi, l_m)
            .all(|r| self.tally(gi, r).violation(c).is_none())
    }

    /// Largest neurons-per-core for one group, capped at `cap`, such that
    /// every core of the group respects the constraints.
    pub fn neurons_per_core(&self, g: Group, c: &CoreConstraints, cap: usize) -> Result<usize> {
        c.validate()?;
        let gi = self.group_index(g)?;
        let p = &self.profiles[gi];
        let n = p.fan_in.len();
        if cap == 0 {
            return Err(Error::Config("neurons-per-core cap must be at least 1".into()));
        }
        for j in 0..n {
            if let Some(v) = self.tally(gi, j..j + 1).violation(c) {
                return Err(Error::Unmappable(format!("{g} neuron {j} alone exceeds {v}")));
            }
        }
        let max_in = p.fan_in.iter().copied().max().unwrap_or(0) as usize;
        let max_out = p.fan_out.iter().copied().max().unwrap_or(0) as usize;
        let mut upper = cap.min(c.max_compartments_per_core / p.compartments);
        if let Some(k) = c.max_synapses_per_core.checked_div(max_in) {
            upper = upper.min(k);
        }
        if let Some(k) = c.max_fanout_per_core.checked_div(max_out) {
            upper = upper.min(k);
        }
        if upper >= n {
            if self.group_fits(gi, n, c) {
                return Ok(upper);
            }
            upper = n - 1;
        }
        (1..=upper)
            .rev()
            .find(|&l_m| self.group_fits(gi, l_m, c))
            .ok_or_else(|| Error::Unmappable(format!("{g} fits no core size")))
    }

    fn group_index(&self, g: Group) -> Result<usize> {
        self.profiles
            .iter()
            .position(|p| p.group == g)
            .ok_or_else(|| Error::Config(format!("no group {g} in network")))
    }

    /// Places every group with the neurons-per-core of its forward layer
    /// (`per_layer[l]`); error populations follow their paired layer.
    pub fn map(&self, c: &CoreConstraints, per_layer: &[usize]) -> Result<CoreMap> {
        c.validate()?;
        let n_layers = self.paired.iter().copied().max().map_or(0, |m| m + 1);
        if per_layer.len() != n_layers {
            return Err(Error::Config(format!(
                "{} neurons-per-core values for {n_layers} layers",
                per_layer.len()
            )));
        }
        let l_m: Vec<usize> = self.paired.iter().map(|&l| per_layer[l]).collect();
        self.map_groups(c, &l_m)
    }

    fn map_groups(&self, c: &CoreConstraints, l_m: &[usize]) -> Result<CoreMap> {
        let mut assignments = Vec::with_capacity(self.total_compartments());
        let mut cores = Vec::new();
        for (gi, &lm) in l_m.iter().enumerate() {
            let g = self.profiles[gi].group;
            if lm == 0 {
                return Err(Error::Config(format!("{g}: neurons per core must be at least 1")));
            }
            for r in self.blocks(gi, lm) {
                let tally = self.tally(gi, r);
                if let Some(v) = tally.violation(c) {
                    return Err(Error::Unmappable(format!(
                        "{g} with {lm} neurons per core: core {} exceeds {v}",
                        cores.len()
                    )));
                }
                let id = cores.len() as u32;
                assignments.extend(std::iter::repeat_n(id, tally.compartments));
                cores.push(tally);
            }
        }
        Ok(CoreMap {
            groups: self.groups(),
            l_m: l_m.to_vec(),
            assignments,
            cores,
        })
    }

    /// Maps the network once per neurons-per-core value, applied to every
    /// group. Values that break a constraint give an infeasible row.
    pub fn sweep(&self, c: &CoreConstraints, l_m_list: &[usize], k0: usize) -> Result<Vec<SweepRow>> {
        c.validate()?;
        if k0 == 0 {
            return Err(Error::Config("compartments per step must be at least 1".into()));
        }
        let rows = l_m_list
            .iter()
            .map(|&l_m| {
                let per_group = vec![l_m; self.profiles.len()];
                match self.map_groups(c, &per_group) {
                    Ok(map) => {
                        let factor = map.max_compartments_per_core().div_ceil(k0).max(1);
                        let steps = 2 * self.t as u64 * factor as u64;
                        SweepRow::Feasible(CostProxy {
                            l_m,
                            cores_used: map.cores_used(),
                            steps_per_sample: steps,
                            energy_proxy: map.cores_used() as u64 * steps,
                            mode: self.mode,
                        })
                    }
                    Err(e) => SweepRow::Infeasible {
                        l_m,
                        mode: self.mode,
                        reason: e.to_string(),
                    },
                }
            })
            .collect();
        Ok(rows)
    }

    /// Neurons per core for every forward layer: the largest feasible value
    /// not above `cap`, with error populations held to the same bound.
    pub fn auto_l_m(&self, c: &CoreConstraints, cap: usize) -> Result<Vec<usize>> {
        let n_layers = self.paired.iter().copied().max().map_or(0, |m| m + 1);
        let mut per_layer = vec![cap; n_layers];
        for (gi, p) in self.profiles.iter().enumerate() {
            let l = self.paired[gi];
            per_layer[l] = per_layer[l].min(self.neurons_per_core(p.group, c, cap)?);
        }
        Ok(per_layer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepRow {
    Feasible(CostProxy),
    Infeasible {
        l_m: usize,
        mode: FeedbackMode,
        reason: String,
    },
}

impl SweepRow {
    pub fn l_m(&self) -> usize {
        match self {
            SweepRow::Feasible(c) => c.l_m,
            SweepRow::Infeasible { l_m, .. } => *l_m,
        }
    }

    pub fn cost(&self) -> Option<&CostProxy> {
        match self {
            SweepRow::Feasible(c) => Some(c),
            SweepRow::Infeasible { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoreTally {
    pub group: Group,
    pub neurons: usize,
    pub compartments: usize,
    pub synapses_in: u64,
    pub synapses_out: u64,
    pub fanin: usize,
}

impl CoreTally {
    /// Name of the first bound this core breaks, if any.
    pub fn violation(&self, c: &CoreConstraints) -> Option<String> {
        if self.compartments > c.max_compartments_per_core {
            Some(format!(
                "{} compartments > {}",
                self.compartments, c.max_compartments_per_core
            ))
        } else if self.synapses_in > c.max_synapses_per_core as u64 {
            Some(format!(
                "{} synapses > {}",
                self.synapses_in, c.max_synapses_per_core
            ))
        } else if self.fanin > c.max_fanin_per_core {
            Some(format!("fan-in {} > {}", self.fanin, c.max_fanin_per_core))
        } else if self.synapses_out > c.max_fanout_per_core as u64 {
            Some(format!(
                "fan-out {} > {}",
                self.synapses_out, c.max_fanout_per_core
            ))
        } else {
            None
        }
    }
}

/// Core assignment of every compartment, numbered group by group in
/// placement order (an error neuron's two compartments are adjacent).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreMap {
    pub groups: Vec<Group>,
    /// Neurons per core actually used for each group.
    pub l_m: Vec<usize>,
    pub assignments: Vec<u32>,
    pub cores: Vec<CoreTally>,
}

impl CoreMap {
    pub fn cores_used(&self) -> usize {
        self.cores.len()
    }

    pub fn max_compartments_per_core(&self) -> usize {
        self.cores.iter().map(|c| c.compartments).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostProxy {
    pub l_m: usize,
    pub cores_used: usize,
    /// `2T` times the serialization factor.
    pub steps_per_sample: u64,
    pub energy_proxy: u64,
    pub mode: FeedbackMode,
}

pub fn map_network(net: &BuiltNetwork, c: &CoreConstraints, per_layer: &[usize]) -> Result<CoreMap> {
    Layout::new(net).map(c, per_layer)
}

pub fn sweep_neurons_per_core(
    net: &BuiltNetwork,
    c: &CoreConstraints,
    l_m_list: &[usize],
    k0: usize,
) -> Result<Vec<SweepRow>> {
    Layout::new(net).sweep(c, l_m_list, k0)
}
