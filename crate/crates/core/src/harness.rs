//! End-to-end runs: configuration, training and evaluation loops for the
//! integer engine and the reference model, the class-incremental protocol,
//! core mapping reports, and their CSV outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::data::{idx_pair, Dataset};
use crate::error::{Error, Result};
use crate::mapper::{CoreConstraints, CoreMap, Layout, SweepRow};
use crate::net::{BuiltNetwork, FeedbackMode, NetOptions, NetworkSpec, SamplePresentation, Shape};
use crate::oracle::FpNetwork;
use crate::plasticity::{Dyadic, Rounding};

pub const METRICS_VERSION: &str = "# emstdp metrics v1";
pub const METRICS_HEADER: &str =
    "run,epoch,round,step,samples_seen,accuracy,per_class,weight_update_l1,cores_used,wall_clock_s";
pub const SWEEP_HEADER: &str = "l_m,cores_used,steps_per_sample,energy_proxy,mode";

/// Neurons per core for each forward layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LmSetting {
    /// Largest value each layer's constraints allow.
    Auto,
    Uniform(usize),
    PerLayer(Vec<usize>),
}

impl std::fmt::Display for LmSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LmSetting::Auto => f.write_str("auto"),
            LmSetting::Uniform(n) => write!(f, "{n}"),
            LmSetting::PerLayer(v) => f.write_str(&join(v, ",")),
        }
    }
}

impl std::str::FromStr for LmSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LmSetting::Auto);
        }
        let v = parse_list::<usize>("l_m", s)?;
        match v.as_slice() {
            [n] => Ok(LmSetting::Uniform(*n)),
            _ => Ok(LmSetting::PerLayer(v)),
        }
    }
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Config(format!("bad list entry {x:?} for {key}")))
        })
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && !v.eq_ignore_ascii_case("none")).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".into(), |p| p.display().to_string())
}

fn opt_usize(key: &str, v: &str) -> Result<Option<usize>> {
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), T::to_string)
}

/// Class order for the incremental protocol. Empty lists are drawn from the
/// run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalSchedule {
    pub initial: Vec<usize>,
    pub increments: Vec<Vec<usize>>,
    pub initial_count: usize,
    pub increment_size: usize,
    pub num_increments: usize,
    pub chunks: usize,
    /// Samples per class per chunk; 0 splits every sample of the class.
    pub chunk_size: usize,
    /// Step 1 trains with `eta >> step1_eta_shift`.
    pub step1_eta_shift: u32,
    pub pretrain_epochs: usize,
    /// Uniform pixel noise of `+/- rehearsal_noise` on rehearsed samples.
    pub rehearsal_noise: u8,
    /// Also train a network on the pooled data for comparison.
    pub baseline: bool,
}

impl Default for IncrementalSchedule {
    fn default() -> Self {
        IncrementalSchedule {
            initial: Vec::new(),
            increments: Vec::new(),
            initial_count: 4,
            increment_size: 2,
            num_increments: 3,
            chunks: 5,
            chunk_size: 500,
            step1_eta_shift: 2,
            pretrain_epochs: 1,
            rehearsal_noise: 0,
            baseline: true,
        }
    }
}

impl IncrementalSchedule {
    /// Fills in random class lists and checks that classes are disjoint and
    /// in range.
    pub fn resolve(&self, num_classes: usize, seed: u64) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        let (initial, increments) = if self.initial.is_empty() {
            let mut order: Vec<usize> = (0..num_classes).collect();
            order.shuffle(&mut rng(seed, 3000));
            let need = self.initial_count + self.increment_size * self.num_increments;
            if need > num_classes || self.initial_count == 0 {
                return Err(Error::Config(format!(
                    "schedule needs {need} classes, dataset has {num_classes}"
                )));
            }
            let initial = order[..self.initial_count].to_vec();
            let increments = order[self.initial_count..need]
                .chunks(self.increment_size.max(1))
                .map(<[usize]>::to_vec)
                .collect();
            (initial, increments)
        } else {
            (self.initial.clone(), self.increments.clone())
        };
        let mut seen = vec![false; num_classes];
        for &c in initial.iter().chain(increments.iter().flatten()) {
            if c >= num_classes {
                return Err(Error::Config(format!(
                    "class {c} outside the dataset's {num_classes}"
                )));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!("class {c} appears twice in the schedule")));
            }
        }
        if increments.iter().any(Vec::is_empty) {
            return Err(Error::Config("empty increment in schedule".into()));
        }
        Ok((initial, increments))
    }
}

fn class_groups(s: &str) -> Result<Vec<Vec<usize>>> {
    if s.eq_ignore_ascii_case("random") || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|g| parse_list("incr_increments", g)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub structure: String,
    pub t: u32,
    pub theta: i64,
    pub eta: Dyadic,
    pub epochs: usize,
    pub feedback: FeedbackMode,
    pub seed: u64,
    /// Directory holding the four standard IDX files.
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub shuffle: bool,
    pub conv_checkpoint: Option<PathBuf>,
    pub l_m: LmSetting,
    pub rounding: Rounding,
    pub out_dir: PathBuf,
    pub record_wall_clock: bool,
    pub options: NetOptions,
    pub constraints: CoreConstraints,
    /// Compartments a core updates per step.
    pub k0: usize,
    pub sweep_l_m: Vec<usize>,
    pub sweep_modes: Vec<FeedbackMode>,
    pub incremental: IncrementalSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            structure: "28x28x1-100d-10d".into(),
            t: 64,
            theta: 64,
            eta: Dyadic::new(1, 3),
            epochs: 3,
            feedback: FeedbackMode::Dfa,
            seed: 1,
            data_dir: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_csv: None,
            test_csv: None,
            train_limit: None,
            test_limit: None,
            shuffle: false,
            conv_checkpoint: None,
            l_m: LmSetting::Auto,
            rounding: Rounding::Stochastic,
            out_dir: PathBuf::from("out"),
            record_wall_clock: false,
            options: NetOptions::default(),
            constraints: CoreConstraints::default(),
            k0: 8,
            sweep_l_m: vec![1, 2, 5, 10, 20, 50, 100, 200, 500, 1000],
            sweep_modes: vec![FeedbackMode::Fa, FeedbackMode::Dfa],
            incremental: IncrementalSchedule::default(),
        }
    }
}

impl RunConfig {
    /// Every setting as `(key, value)` in the config-file syntax.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let inc = &self.incremental;
        let c = &self.constraints;
        let mut v: Vec<(&str, String)> = vec![
            ("structure", self.structure.clone()),
            ("t", self.t.to_string()),
            ("theta", self.theta.to_string()),
            ("eta", self.eta.to_string()),
            ("epochs", self.epochs.to_string()),
            ("feedback", self.feedback.to_string()),
            ("seed", self.seed.to_string()),
            ("data_dir", show_path(&self.data_dir)),
            ("train_images", show_path(&self.train_images)),
            ("train_labels", show_path(&self.train_labels)),
            ("test_images", show_path(&self.test_images)),
            ("test_labels", show_path(&self.test_labels)),
            ("train_csv", show_path(&self.train_csv)),
            ("test_csv", show_path(&self.test_csv)),
            ("train_limit", show_opt(&self.train_limit)),
            ("test_limit", show_opt(&self.test_limit)),
            ("shuffle", self.shuffle.to_string()),
            ("conv_checkpoint", show_path(&self.conv_checkpoint)),
            ("l_m", self.l_m.to_string()),
            ("rounding", self.rounding.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("record_wall_clock", self.record_wall_clock.to_string()),
            ("max_compartments", c.max_compartments_per_core.to_string()),
            ("max_synapses", c.max_synapses_per_core.to_string()),
            ("max_fanin", c.max_fanin_per_core.to_string()),
            ("max_fanout", c.max_fanout_per_core.to_string()),
            ("k0", self.k0.to_string()),
            ("sweep_l_m", join(&self.sweep_l_m, ",")),
            ("sweep_modes", join(&self.sweep_modes, ",")),
            (
                "incr_initial",
                if inc.initial.is_empty() {
                    "random".into()
                } else {
                    join(&inc.initial, ",")
                },
            ),
            (
                "incr_increments",
                if inc.increments.is_empty() {
                    "random".into()
                } else {
                    inc.increments
                        .iter()
                        .map(|g| join(g, ","))
                        .collect::<Vec<_>>()
                        .join(";")
                },
            ),
            ("incr_initial_count", inc.initial_count.to_string()),
            ("incr_increment_size", inc.increment_size.to_string()),
            ("incr_num_increments", inc.num_increments.to_string()),
            ("incr_chunks", inc.chunks.to_string()),
            ("incr_chunk_size", inc.chunk_size.to_string()),
            ("incr_step1_eta_shift", inc.step1_eta_shift.to_string()),
            ("incr_pretrain_epochs", inc.pretrain_epochs.to_string()),
            ("incr_rehearsal_noise", inc.rehearsal_noise.to_string()),
            ("incr_baseline", inc.baseline.to_string()),
        ];
        v.extend(self.options.to_pairs());
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let inc = &mut self.incremental;
        match key {
            "structure" => self.structure = v.to_string(),
            "t" => self.t = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "eta" => self.eta = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "feedback" => self.feedback = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = opt_path(v),
            "train_images" => self.train_images = opt_path(v),
            "train_labels" => self.train_labels = opt_path(v),
            "test_images" => self.test_images = opt_path(v),
            "test_labels" => self.test_labels = opt_path(v),
            "train_csv" => self.train_csv = opt_path(v),
            "test_csv" => self.test_csv = opt_path(v),
            "train_limit" => self.train_limit = opt_usize(key, v)?,
            "test_limit" => self.test_limit = opt_usize(key, v)?,
            "shuffle" => self.shuffle = parse(key, v)?,
            "conv_checkpoint" => self.conv_checkpoint = opt_path(v),
            "l_m" => self.l_m = v.parse()?,
            "rounding" => self.rounding = v.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "record_wall_clock" => self.record_wall_clock = parse(key, v)?,
            "max_compartments" => self.constraints.max_compartments_per_core = parse(key, v)?,
            "max_synapses" => self.constraints.max_synapses_per_core = parse(key, v)?,
            "max_fanin" => self.constraints.max_fanin_per_core = parse(key, v)?,
            "max_fanout" => self.constraints.max_fanout_per_core = parse(key, v)?,
            "k0" => self.k0 = parse(key, v)?,
            "sweep_l_m" => self.sweep_l_m = parse_list(key, v)?,
            "sweep_modes" => self.sweep_modes = parse_list(key, v)?,
            "incr_initial" => {
                inc.initial = if v.eq_ignore_ascii_case("random") {
                    Vec::new()
                } else {
                    parse_list(key, v)?
                }
            }
            "incr_increments" => inc.increments = class_groups(v)?,
            "incr_initial_count" => inc.initial_count = parse(key, v)?,
            "incr_increment_size" => inc.increment_size = parse(key, v)?,
            "incr_num_increments" => inc.num_increments = parse(key, v)?,
            "incr_chunks" => inc.chunks = parse(key, v)?,
            "incr_chunk_size" => inc.chunk_size = parse(key, v)?,
            "incr_step1_eta_shift" => inc.step1_eta_shift = parse(key, v)?,
            "incr_pretrain_epochs" => inc.pretrain_epochs = parse(key, v)?,
            "incr_rehearsal_noise" => inc.rehearsal_noise = parse(key, v)?,
            "incr_baseline" => inc.baseline = parse(key, v)?,
            _ => self.options.set(key, v)?,
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        self.spec_for(self.feedback)
    }

    pub fn spec_for(&self, mode: FeedbackMode) -> Result<NetworkSpec> {
        let spec =
            NetworkSpec::new(&self.structure, mode, self.t, self.theta)?.with_options(self.options.clone());
        spec.validate()?;
        Ok(spec)
    }

    /// Fresh network with the configured learning rule, with conv weights
    /// copied from `conv_checkpoint` when one is set.
    pub fn build_network(&self) -> Result<BuiltNetwork> {
        let mut net = BuiltNetwork::build(&self.spec()?, self.seed)?;
        net.learning.eta = self.eta;
        net.learning.rounding = self.rounding;
        net.learning.validate()?;
        if let Some(p) = &self.conv_checkpoint {
            let src = checkpoint::load_engine(p)?;
            if checkpoint::copy_conv_weights(&mut net, &src)? == 0 {
                return Err(Error::Shape(format!(
                    "{} has no matching conv layers",
                    p.display()
                )));
            }
        }
        Ok(net)
    }

    fn input_shape(&self) -> Result<Shape> {
        Ok(self.spec()?.layers[0].output)
    }

    fn load(&self, train: bool) -> Result<Dataset> {
        let (images, labels, csv, limit) = if train {
            (
                &self.train_images,
                &self.train_labels,
                &self.train_csv,
                self.train_limit,
            )
        } else {
            (
                &self.test_images,
                &self.test_labels,
                &self.test_csv,
                self.test_limit,
            )
        };
        let which = if train { "train" } else { "test" };
        let data = match (images, labels, csv, &self.data_dir) {
            (Some(i), Some(l), _, _) => Dataset::from_idx(i, l)?,
            (Some(_), None, _, _) | (None, Some(_), _, _) => {
                return Err(Error::Config(format!(
                    "{which}_images and {which}_labels go together"
                )));
            }
            (None, None, Some(c), _) => Dataset::from_csv(c, self.input_shape()?)?,
            (None, None, None, Some(dir)) => {
                let (i, l) = idx_pair(dir, train);
                Dataset::from_idx(i, l)?
            }
            (None, None, None, None) => {
                return Err(Error::Config(format!(
                    "no {which} data: set data_dir, {which}_images/{which}_labels or {which}_csv"
                )));
            }
        };
        let shape = self.input_shape()?;
        if data.shape != shape {
            return Err(Error::Shape(format!(
                "{which} images are {}, the network expects {shape}",
                data.shape
            )));
        }
        Ok(match limit {
            Some(n) => data.head(n),
            None => data,
        })
    }

    pub fn load_train(&self) -> Result<Dataset> {
        self.load(true)
    }

    pub fn load_test(&self) -> Result<Dataset> {
        self.load(false)
    }

    pub fn per_layer_l_m(&self, layout: &Layout, n_layers: usize) -> Result<Vec<usize>> {
        match &self.l_m {
            LmSetting::Auto => layout.auto_l_m(&self.constraints, self.constraints.max_compartments_per_core),
            LmSetting::Uniform(n) => Ok(vec![*n; n_layers]),
            LmSetting::PerLayer(v) => Ok(v.clone()),
        }
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run: String,
    pub epoch: Option<usize>,
    pub round: Option<usize>,
    pub step: Option<usize>,
    pub samples_seen: u64,
    pub accuracy: f64,
    /// Per-class accuracy; `None` for classes not evaluated.
    pub per_class: Vec<Option<f64>>,
    pub weight_update_l1: u64,
    pub cores_used: Option<usize>,
    pub wall_clock_s: Option<f64>,
}

impl MetricsRecord {
    fn new(run: &str, samples_seen: u64, report: &EvalReport) -> Self {
        MetricsRecord {
            run: run.to_string(),
            epoch: None,
            round: None,
            step: None,
            samples_seen,
            accuracy: report.accuracy,
            per_class: report.per_class.clone(),
            weight_update_l1: 0,
            cores_used: None,
            wall_clock_s: None,
        }
    }

    pub fn csv_row(&self) -> String {
        let per_class = self
            .per_class
            .iter()
            .enumerate()
            .filter_map(|(c, a)| a.map(|a| format!("{c}:{a:.4}")))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{:.4},{},{},{},{}",
            self.run,
            show_blank(&self.epoch),
            show_blank(&self.round),
            show_blank(&self.step),
            self.samples_seen,
            self.accuracy,
            per_class,
            self.weight_update_l1,
            show_blank(&self.cores_used),
            self.wall_clock_s.map_or(String::new(), |s| format!("{s:.3}")),
        )
    }
}

fn show_blank<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

/// Versioned metrics file; rows are appended as they arrive.
pub struct MetricsWriter {
    file: fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_VERSION}\n{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", r.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    fn from_predictions(
        data: &Dataset,
        indices: &[usize],
        predictions: Vec<usize>,
        n_classes: usize,
    ) -> Self {
        let mut hits = vec![0usize; n_classes];
        let mut totals = vec![0usize; n_classes];
        for (&i, &p) in indices.iter().zip(&predictions) {
            let c = data.label(i);
            if c < n_classes {
                totals[c] += 1;
                hits[c] += (p == c) as usize;
            }
        }
        let correct: usize = hits.iter().sum();
        EvalReport {
            accuracy: correct as f64 / indices.len() as f64,
            per_class: totals
                .iter()
                .zip(&hits)
                .map(|(&t, &h)| (t > 0).then(|| h as f64 / t as f64))
                .collect(),
            predictions,
        }
    }
}

fn argmax_allowed<T: PartialOrd + Copy>(scores: &[T], allowed: Option<&[usize]>) -> usize {
    let mut best: Option<usize> = None;
    for (j, &s) in scores.iter().enumerate() {
        if allowed.is_some_and(|a| !a.contains(&j)) {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(j);
        }
    }
    best.unwrap_or(0)
}

/// Phase-1 inference over `indices` (every sample when `None`), in parallel.
/// With `allowed`, the prediction is the strongest allowed output.
pub fn evaluate(
    net: &BuiltNetwork,
    data: &Dataset,
    indices: Option<&[usize]>,
    allowed: Option<&[usize]>,
) -> Result<EvalReport> {
    let all: Vec<usize>;
    let indices = match indices {
        Some(i) => i,
        None => {
            all = (0..data.len()).collect();
            &all
        }
    };
    if indices.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let t = net.spec.t;
    let predictions = indices
        .par_iter()
        .map_init(
            || net.clone(),
            |n, &i| {
                let counts = n.output_counts(&data.presentation(i, t))?;
                Ok(argmax_allowed(&counts, allowed))
            },
        )
        .collect::<Result<Vec<usize>>>()?;
    Ok(EvalReport::from_predictions(
        data,
        indices,
        predictions,
        net.num_classes(),
    ))
}

pub fn evaluate_oracle(fp: &FpNetwork, data: &Dataset, indices: Option<&[usize]>) -> Result<EvalReport> {
    let idx: Vec<usize> = indices.map_or_else(|| (0..data.len()).collect(), <[usize]>::to_vec);
    if idx.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let predictions = idx
        .par_iter()
        .map(|&i| fp.predict(&real_input(data, i, fp.t)))
        .collect::<Result<Vec<usize>>>()?;
    let n = fp.layers.last().map_or(0, |l| l.desc.size());
    Ok(EvalReport::from_predictions(data, &idx, predictions, n))
}

fn real_input(data: &Dataset, i: usize, t: u32) -> Vec<f64> {
    data.presentation(i, t).input.iter().map(|&v| v as f64).collect()
}

fn epoch_order(cfg: &RunConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(&mut rng(cfg.seed, 4000 + epoch as u64));
    }
    order
}

pub struct TrainOutcome {
    pub net: BuiltNetwork,
    pub records: Vec<MetricsRecord>,
    pub core_map: CoreMap,
}

/// Maps the network with the configured neurons-per-core.
pub fn map_for(cfg: &RunConfig, net: &BuiltNetwork) -> Result<CoreMap> {
    let layout = Layout::new(net);
    let l_m = cfg.per_layer_l_m(&layout, net.layers.len())?;
    layout.map(&cfg.constraints, &l_m)
}

/// Online training: every sample runs both phases and commits its update
/// before the next one. `test` is evaluated after every epoch (once when
/// `epochs` is 0), and each record is passed to `sink` as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_data: &Dataset,
    test: Option<&Dataset>,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut net = cfg.build_network()?;
    let core_map = map_for(cfg, &net)?;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut emit = |mut r: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        r.cores_used = Some(core_map.cores_used());
        if cfg.record_wall_clock {
            r.wall_clock_s = Some(start.elapsed().as_secs_f64());
        }
        sink(&r)?;
        records.push(r);
        Ok(())
    };
    if cfg.epochs == 0 {
        if let Some(test) = test {
            let mut r = MetricsRecord::new("train", 0, &evaluate(&net, test, None, None)?);
            r.epoch = Some(0);
            emit(r, &mut records)?;
        }
    }
    let t = cfg.t;
    for epoch in 0..cfg.epochs {
        let mut l1 = 0u64;
        for i in epoch_order(cfg, train_data.len(), epoch) {
            let m = net.train_sample(&train_data.presentation(i, t))?;
            l1 += m.weight_change_l1.iter().sum::<u64>();
        }
        let report = match test {
            Some(test) => evaluate(&net, test, None, None)?,
            None => EvalReport {
                accuracy: f64::NAN,
                per_class: Vec::new(),
                predictions: Vec::new(),
            },
        };
        let mut r = MetricsRecord::new("train", net.samples_seen, &report);
        r.epoch = Some(epoch + 1);
        r.weight_update_l1 = l1;
        emit(r, &mut records)?;
    }
    Ok(TrainOutcome {
        net,
        records,
        core_map,
    })
}

/// Trains the real-valued reference model from the same initial weights as
/// the engine would use.
pub fn train_oracle(
    cfg: &RunConfig,
    train_data: &Dataset,
    test: Option<&Dataset>,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<(FpNetwork, Vec<MetricsRecord>)> {
    let net = cfg.build_network()?;
    let mut fp = FpNetwork::from_built(&net);
    let eta = cfg.eta.to_f64();
    let mut records = Vec::new();
    let mut seen = 0u64;
    let start = Instant::now();
    for epoch in 0..cfg.epochs.max(1) {
        if cfg.epochs > 0 {
            for i in epoch_order(cfg, train_data.len(), epoch) {
                fp.train_sample(&real_input(train_data, i, cfg.t), train_data.label(i), eta)?;
                seen += 1;
            }
        }
        if let Some(test) = test {
            let mut r = MetricsRecord::new("oracle", seen, &evaluate_oracle(&fp, test, None)?);
            r.epoch = Some(if cfg.epochs == 0 { 0 } else { epoch + 1 });
            if cfg.record_wall_clock {
                r.wall_clock_s = Some(start.elapsed().as_secs_f64());
            }
            sink(&r)?;
            records.push(r);
        }
    }
    Ok((fp, records))
}

/// Accuracy after one step of one round of the incremental protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub increment: usize,
    pub round: usize,
    pub step: usize,
    pub accuracy: f64,
    /// New-class samples trained in this step.
    pub fresh: usize,
    /// Old-class samples rehearsed in this step.
    pub rehearsal: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalReport {
    pub initial: Vec<usize>,
    pub increments: Vec<Vec<usize>>,
    /// Accuracy on the observed classes right before each increment.
    pub before: Vec<f64>,
    pub rounds: Vec<RoundResult>,
    pub final_accuracy: f64,
    pub baseline_accuracy: Option<f64>,
    pub records: Vec<MetricsRecord>,
}

impl IncrementalReport {
    pub fn round(&self, increment: usize, round: usize, step: usize) -> Option<&RoundResult> {
        self.rounds
            .iter()
            .find(|r| r.increment == increment && r.round == round && r.step == step)
    }
}

/// Per class, `chunks` disjoint chunks of training indices.
fn class_chunks(
    data: &Dataset,
    classes: &[usize],
    sched: &IncrementalSchedule,
    seed: u64,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let n_classes = classes.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); n_classes];
    for &c in classes {
        let mut idx = data.indices_of(&[c]);
        idx.shuffle(&mut rng(seed, 2000 + c as u64));
        let k = sched.chunks;
        if k == 0 || idx.len() < k || sched.chunk_size * k > idx.len() {
            return Err(Error::Config(format!(
                "class {c} has {} samples, schedule needs {k} chunks of {}",
                idx.len(),
                sched.chunk_size
            )));
        }
        out[c] = if sched.chunk_size == 0 {
            // Near-equal parts covering every sample once.
            (0..k)
                .map(|i| idx[i * idx.len() / k..(i + 1) * idx.len() / k].to_vec())
                .collect()
        } else {
            idx.chunks(sched.chunk_size)
                .take(k)
                .map(<[usize]>::to_vec)
                .collect()
        };
    }
    Ok(out)
}

fn noisy(data: &Dataset, i: usize, noise: u8, r: &mut ChaCha8Rng, t: u32) -> SamplePresentation {
    if noise == 0 {
        return data.presentation(i, t);
    }
    let n = noise as i16;
    let raw: Vec<u8> = data
        .image(i)
        .iter()
        .map(|&p| (p as i16 + r.random_range(-n..=n)).clamp(0, 255) as u8)
        .collect();
    SamplePresentation {
        input: crate::net::quantize_input(&raw, t),
        label: Some(data.label(i)),
    }
}

/// Class-incremental learning: pretrain on the initial classes (unless
/// `pretrained` is given), then for each increment run `chunks` rounds of
/// step 1 (new-class chunk, old outputs disabled, reduced rate) and step 2
/// (new chunk plus an equal number of rehearsed old-class samples).
pub fn incremental(
    cfg: &RunConfig,
    train_data: &Dataset,
    test: &Dataset,
    pretrained: Option<BuiltNetwork>,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<IncrementalReport> {
    let sched = &cfg.incremental;
    let n_classes = cfg.spec()?.num_classes();
    let (initial, increments) = sched.resolve(n_classes, cfg.seed)?;
    let all: Vec<usize> = initial
        .iter()
        .chain(increments.iter().flatten())
        .copied()
        .collect();
    let chunks = class_chunks(train_data, &all, sched, cfg.seed)?;
    let t = cfg.t;
    let mut records = Vec::new();
    let mut emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        sink(&r)?;
        records.push(r);
        Ok(())
    };

    let mut observed = initial.clone();
    let eval_observed = |net: &BuiltNetwork, observed: &[usize]| {
        let idx = test.indices_of(observed);
        evaluate(net, test, Some(&idx), Some(observed))
    };

    let mut net = match pretrained {
        Some(n) => n,
        None => {
            let mut net = cfg.build_network()?;
            net.set_enabled_outputs(Some(&initial));
            let mut pool: Vec<usize> = initial.iter().flat_map(|&c| chunks[c].concat()).collect();
            for e in 0..sched.pretrain_epochs {
                pool.shuffle(&mut rng(cfg.seed, 5000 + e as u64));
                for &i in &pool {
                    net.train_sample(&train_data.presentation(i, t))?;
                }
            }
            net
        }
    };
    let base = net.learning;
    let report = eval_observed(&net, &observed)?;
    let mut r = MetricsRecord::new("incremental", net.samples_seen, &report);
    r.round = Some(0);
    emit(r, &mut records)?;

    let mut before = Vec::new();
    let mut rounds = Vec::new();
    let mut sample_rng = rng(cfg.seed, 6000);
    for (k, new) in increments.iter().enumerate() {
        before.push(eval_observed(&net, &observed)?.accuracy);
        let old = observed.clone();
        observed.extend(new);
        for round in 0..sched.chunks {
            let mut fresh: Vec<usize> = new.iter().flat_map(|&c| chunks[c][round].clone()).collect();
            fresh.shuffle(&mut sample_rng);

            net.set_enabled_outputs(Some(new));
            net.learning = base.slowed(sched.step1_eta_shift);
            for &i in &fresh {
                net.train_sample(&train_data.presentation(i, t))?;
            }
            net.learning = base;
            let rep = eval_observed(&net, &observed)?;
            rounds.push(RoundResult {
                increment: k + 1,
                round: round + 1,
                step: 1,
                accuracy: rep.accuracy,
                fresh: fresh.len(),
                rehearsal: 0,
            });
            let mut r = MetricsRecord::new("incremental", net.samples_seen, &rep);
            (r.epoch, r.round, r.step) = (Some(k + 1), Some(round + 1), Some(1));
            emit(r, &mut records)?;

            // Equal-size rehearsal, spread as evenly as possible over the
            // old classes and drawn from their chunk for this round.
            let mut rehearsal = Vec::with_capacity(fresh.len());
            for j in 0..fresh.len() {
                let c = old[j % old.len()];
                let pool = &chunks[c][round];
                rehearsal.push(pool[(j / old.len()) % pool.len()]);
            }
            if rehearsal.len() != fresh.len() {
                return Err(Error::Config("rehearsal size differs from the new chunk".into()));
            }
            let mut mixed: Vec<(usize, bool)> = fresh
                .iter()
                .map(|&i| (i, false))
                .chain(rehearsal.iter().map(|&i| (i, true)))
                .collect();
            mixed.shuffle(&mut sample_rng);
            net.set_enabled_outputs(Some(&observed));
            for (i, rehearsed) in mixed {
                let x = if rehearsed {
                    noisy(train_data, i, sched.rehearsal_noise, &mut sample_rng, t)
                } else {
                    train_data.presentation(i, t)
                };
                net.train_sample(&x)?;
            }
            let rep = eval_observed(&net, &observed)?;
            rounds.push(RoundResult {
                increment: k + 1,
                round: round + 1,
                step: 2,
                accuracy: rep.accuracy,
                fresh: fresh.len(),
                rehearsal: rehearsal.len(),
            });
            let mut r = MetricsRecord::new("incremental", net.samples_seen, &rep);
            (r.epoch, r.round, r.step) = (Some(k + 1), Some(round + 1), Some(2));
            emit(r, &mut records)?;
        }
    }
    let final_accuracy = eval_observed(&net, &observed)?.accuracy;

    let baseline_accuracy = if sched.baseline && !increments.is_empty() {
        let mut joint = cfg.build_network()?;
        joint.set_enabled_outputs(Some(&observed));
        let mut pool: Vec<usize> = observed.iter().flat_map(|&c| chunks[c].concat()).collect();
        for e in 0..sched.pretrain_epochs.max(1) {
            pool.shuffle(&mut rng(cfg.seed, 7000 + e as u64));
            for &i in &pool {
                joint.train_sample(&train_data.presentation(i, t))?;
            }
        }
        let rep = eval_observed(&joint, &observed)?;
        let mut r = MetricsRecord::new("joint", joint.samples_seen, &rep);
        r.epoch = Some(sched.pretrain_epochs.max(1));
        emit(r, &mut records)?;
        Some(rep.accuracy)
    } else {
        None
    };
    net.set_enabled_outputs(None);

    Ok(IncrementalReport {
        initial,
        increments,
        before,
        rounds,
        final_accuracy,
        baseline_accuracy,
        records,
    })
}

/// Neurons-per-core sweep for every configured feedback mode.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &mode in &cfg.sweep_modes {
        let net = BuiltNetwork::build(&cfg.spec_for(mode)?, cfg.seed)?;
        rows.extend(Layout::new(&net).sweep(&cfg.constraints, &cfg.sweep_l_m, cfg.k0)?);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        match r {
            SweepRow::Feasible(c) => s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.l_m, c.cores_used, c.steps_per_sample, c.energy_proxy, c.mode
            )),
            SweepRow::Infeasible { l_m, mode, .. } => {
                s.push_str(&format!("{l_m},infeasible,infeasible,infeasible,{mode}\n"))
            }
        }
    }
    s
}

/// Per-core occupancy of a mapping.
pub fn core_map_csv(map: &CoreMap) -> String {
    let mut s = String::from("core,group,neurons,compartments,synapses_in,synapses_out,fanin\n");
    for (k, c) in map.cores.iter().enumerate() {
        s.push_str(&format!(
            "{k},{},{},{},{},{},{}\n",
            c.group, c.neurons, c.compartments, c.synapses_in, c.synapses_out, c.fanin
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "epochs = 7 # comment\nfeedback=fa\nl_m = 784,10,10\nincr_increments = 4,5;6,7\nfloor_rate = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.feedback, FeedbackMode::Fa);
        assert_eq!(cfg.l_m, LmSetting::PerLayer(vec![784, 10, 10]));
        assert_eq!(cfg.incremental.increments, vec![vec![4, 5], vec![6, 7]]);
        assert_eq!(cfg.options.floor_rate, 8);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.apply_text("bogus = 1").is_err());
        assert!(cfg.apply_text("epochs").is_err());
    }

    #[test]
    fn missing_data_is_a_config_error() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.load_train(), Err(Error::Config(_))));
        let cfg = RunConfig {
            data_dir: Some(PathBuf::from("/nonexistent")),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.load_test(), Err(Error::Io { .. })));
    }

    #[test]
    fn schedule_resolution() {
        let s = IncrementalSchedule::default();
        let (init, inc) = s.resolve(10, 3).unwrap();
        assert_eq!(init.len(), 4);
        assert_eq!(inc.len(), 3);
        let mut all: Vec<usize> = init.iter().chain(inc.iter().flatten()).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let bad = IncrementalSchedule {
            initial: vec![0, 1],
            increments: vec![vec![1, 2]],
            ..s.clone()
        };
        assert!(bad.resolve(10, 0).is_err());
        let out_of_range = IncrementalSchedule {
            initial: vec![0],
            increments: vec![vec![12]],
            ..s
        };
        assert!(out_of_range.resolve(10, 0).is_err());
    }

    #[test]
    fn chunks_partition_each_class() {
        let labels: Vec<u8> = (0..103).map(|i| (i % 3) as u8).collect();
        let data = Dataset::new(Shape::flat(1), vec![0; 103], labels).unwrap();
        let sched = IncrementalSchedule {
            chunk_size: 0,
            ..IncrementalSchedule::default()
        };
        let chunks = class_chunks(&data, &[0, 1, 2], &sched, 4).unwrap();
        for c in 0..3 {
            let mut all: Vec<usize> = chunks[c].concat();
            all.sort();
            assert_eq!(all, data.indices_of(&[c]));
            let sizes: Vec<usize> = chunks[c].iter().map(Vec::len).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        let fixed = IncrementalSchedule {
            chunk_size: 6,
            ..sched.clone()
        };
        let chunks = class_chunks(&data, &[1], &fixed, 4).unwrap();
        assert!(chunks[1].iter().all(|c| c.len() == 6));
        let too_big = IncrementalSchedule {
            chunk_size: 8,
            ..sched
        };
        assert!(class_chunks(&data, &[1], &too_big, 4).is_err());
    }

    #[test]
    fn allowed_argmax() {
        assert_eq!(argmax_allowed(&[5, 9, 7], None), 1);
        assert_eq!(argmax_allowed(&[5, 9, 7], Some(&[0, 2])), 2);
        assert_eq!(argmax_allowed(&[5, 5, 5], Some(&[1, 2])), 1);
    }

    #[test]
    fn sweep_csv_shape() {
        let cfg = RunConfig {
            sweep_l_m: vec![1, 2, 5, 10, 20, 50],
            sweep_modes: vec![FeedbackMode::Dfa],
            ..RunConfig::default()
        };
        let csv = sweep_csv(&sweep(&cfg).unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[1].ends_with(",DFA"));
    }

    #[test]
    fn metrics_row_format() {
        let rep = EvalReport {
            accuracy: 0.5,
            per_class: vec![Some(1.0), None, Some(0.0)],
            predictions: vec![],
        };
        let mut r = MetricsRecord::new("train", 10, &rep);
        r.epoch = Some(1);
        assert_eq!(r.csv_row(), "train,1,,,10,0.5000,0:1.0000;2:0.0000,0,,");
        assert_eq!(METRICS_HEADER.split(',').count(), r.csv_row().split(',').count());
    }
}
