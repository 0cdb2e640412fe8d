//! Experiment harness: configs, teacher-driven pre-training, load sweeps,
//! comparisons and CSV reports.
//!
//! A sweep runs `repetitions` independent replicas. Replica `r` uses seed
//! `seed + r` for traffic, exploration and weight initialization, and walks
//! the whole load schedule with learning left on, so later levels see a
//! policy shaped by earlier ones. Each level settles for `settle_steps`, then
//! opens a measurement window of `measure_steps`; only packets born inside
//! the window count towards its average delay.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{epsilon_greedy, GlobalRouting, Learner, QRouting, ShortestPath, Transition};
use crate::paradigms::{Centralized, Cooperated, Federated, Paradigm, TrainingConfig};
use crate::qnet::{td_target, GatQNet, Hyperparams, MlpQNet, ParamSet, QModel, QNetError};
use crate::sim::{DeliveryFeedback, NetworkView, RoutingPolicy, SimError, Simulator, TrafficConfig};
use crate::encoding::Observation;
use crate::topology::{NodeId, Topology, TopologyError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("configs disagree on {0}")]
    Mismatch(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    QNet(#[from] QNetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Shortest,
    Qrouting,
    Dqn,
    Dgatr,
    Global,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Shortest => "shortest",
            Algorithm::Qrouting => "qrouting",
            Algorithm::Dqn => "dqn",
            Algorithm::Dgatr => "dgatr",
            Algorithm::Global => "global",
        }
    }

    /// Name written to reports. Global Routing is a queue-aware Dijkstra
    /// heuristic and is labelled as such.
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Global => "global-heuristic",
            other => other.as_str(),
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Algorithm::Dqn | Algorithm::Dgatr)
    }
}

fn default_settle_steps() -> u64 {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadLevel {
    pub lambda: f64,
    #[serde(default = "default_settle_steps")]
    pub settle_steps: u64,
    pub measure_steps: u64,
}

/// How the Q-routing teacher is trained and how pre-trained models are
/// evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub teacher_load: f64,
    pub teacher_max_steps: u64,
    /// The teacher counts as converged once no greedy choice changed for
    /// this many consecutive steps.
    pub teacher_stable_steps: u64,
    /// Transitions logged from the trained teacher.
    pub log_transitions: usize,
    /// Exploration rate of the teacher while logging, so the data also
    /// covers actions its greedy policy never takes.
    pub teacher_epsilon: f64,
    /// Step size for the offline fit; the online `hyperparams.step_size`
    /// applies when unset.
    pub step_size: Option<f64>,
    pub eval_load: f64,
    pub eval_warmup_steps: u64,
    pub eval_steps: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            teacher_load: 1.0,
            teacher_max_steps: 100_000,
            teacher_stable_steps: 10_000,
            log_transitions: 50_000,
            teacher_epsilon: 0.2,
            step_size: None,
            eval_load: 1.0,
            eval_warmup_steps: 1_000,
            eval_steps: 4_000,
        }
    }
}

fn default_paradigm() -> Paradigm {
    Paradigm::Centralized
}
fn default_repetitions() -> usize {
    10
}
fn default_train_period() -> usize {
    4
}
fn default_central_memory() -> usize {
    10_000
}
fn default_eta() -> f64 {
    QRouting::DEFAULT_ETA
}
fn default_service_time() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// `irregular6x6`, `grid:RxC`, or a path to a topology file.
    pub topology: String,
    pub algorithm: Algorithm,
    #[serde(default = "default_paradigm")]
    pub paradigm: Paradigm,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    pub loads: Vec<LoadLevel>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Off-policy pre-training steps applied to neural models before the
    /// sweep starts.
    #[serde(default)]
    pub pretrain_steps: u64,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default = "default_train_period")]
    pub train_period: usize,
    #[serde(default = "default_central_memory")]
    pub central_memory: usize,
    #[serde(default = "default_eta")]
    pub qrouting_eta: f64,
    #[serde(default = "default_service_time")]
    pub service_time: f64,
}

impl ExperimentConfig {
    /// A config with defaults for everything but the essentials.
    pub fn new(topology: &str, algorithm: Algorithm, loads: Vec<LoadLevel>) -> Self {
        Self {
            topology: topology.to_string(),
            algorithm,
            paradigm: default_paradigm(),
            hyperparams: Hyperparams::default(),
            loads,
            repetitions: default_repetitions(),
            seed: 0,
            pretrain_steps: 0,
            pretrain: PretrainSettings::default(),
            train_period: default_train_period(),
            central_memory: default_central_memory(),
            qrouting_eta: default_eta(),
            service_time: default_service_time(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.loads.is_empty() {
            return bad("load schedule is empty".into());
        }
        for (i, l) in self.loads.iter().enumerate() {
            if !(l.lambda >= 0.0 && l.lambda.is_finite()) {
                return bad(format!("loads[{i}].lambda must be >= 0"));
            }
            if l.measure_steps == 0 {
                return bad(format!("loads[{i}].measure_steps must be > 0"));
            }
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.train_period == 0 {
            return bad("train_period must be >= 1".into());
        }
        if self.central_memory < self.hyperparams.batch_size {
            return bad("central_memory must hold at least one batch".into());
        }
        if !(self.qrouting_eta > 0.0 && self.qrouting_eta <= 1.0) {
            return bad("qrouting_eta must lie in (0, 1]".into());
        }
        if !(self.service_time > 0.0 && self.service_time.is_finite()) {
            return bad("service_time must be positive".into());
        }
        let p = &self.pretrain;
        if !(p.teacher_load >= 0.0 && p.eval_load >= 0.0) || p.eval_steps == 0 {
            return bad("pretrain loads must be >= 0 and eval_steps > 0".into());
        }
        if !(0.0..=1.0).contains(&p.teacher_epsilon) {
            return bad("pretrain.teacher_epsilon must lie in [0, 1]".into());
        }
        if p.step_size.is_some_and(|a| !(a > 0.0 && a.is_finite())) {
            return bad("pretrain.step_size must be positive".into());
        }
        self.hyperparams.validate()?;
        Ok(())
    }

    /// Label written to the `paradigm` column.
    pub fn paradigm_label(&self) -> &'static str {
        match self.algorithm {
            Algorithm::Dgatr => self.paradigm.as_str(),
            Algorithm::Dqn => Paradigm::Centralized.as_str(),
            _ => "none",
        }
    }

    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            hyper: self.hyperparams.clone(),
            central_memory: self.central_memory,
            train_period: self.train_period,
            seed,
        }
    }
}

/// First 16 hex digits of the SHA-256 of the canonical JSON form of the
/// config with its seed zeroed. Object keys are sorted, so the hash does not
/// depend on key order in the source file.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.seed = 0;
    let value = serde_json::to_value(&c).expect("config serializes");
    let digest = Sha256::digest(value.to_string().as_bytes());
    hex::encode(digest)[..16].to_string()
}

pub fn load_topology(source: &str) -> Result<Topology> {
    if source == "irregular6x6" {
        return Ok(Topology::irregular_6x6());
    }
    if let Some(dims) = source.strip_prefix("grid:") {
        let parsed = dims
            .split_once('x')
            .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)));
        return match parsed {
            Some((r, c)) => Ok(Topology::grid(r, c, &[])?),
            None => Err(HarnessError::Config(format!("expected `grid:RxC`, got `{source}`"))),
        };
    }
    let text = std::fs::read_to_string(source)?;
    Ok(Topology::parse(&text)?)
}

/// Outcome of one measurement window.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub load: f64,
    pub start: u64,
    pub end: u64,
    pub delivered: u64,
    pub average_delay: Option<f64>,
    /// Packets in the system after every step of the window.
    pub in_flight: Vec<usize>,
}

impl LevelResult {
    pub fn in_flight_end(&self) -> usize {
        self.in_flight.last().copied().unwrap_or(0)
    }

    /// Mean of the last tenth of the in-flight series minus the mean of the
    /// first tenth.
    pub fn in_flight_growth(&self) -> f64 {
        let s = &self.in_flight;
        if s.is_empty() {
            return 0.0;
        }
        let k = (s.len() / 10).max(1);
        let mean = |xs: &[usize]| xs.iter().sum::<usize>() as f64 / xs.len() as f64;
        mean(&s[s.len() - k..]) - mean(&s[..k])
    }

    pub fn mean_in_flight(&self) -> f64 {
        if self.in_flight.is_empty() {
            return 0.0;
        }
        self.in_flight.iter().sum::<usize>() as f64 / self.in_flight.len() as f64
    }

    /// The backlog did not trend upwards over the window: packets piled up
    /// at under 2% of the offered rate, with two packets of slack for
    /// noise at light load.
    pub fn in_flight_bounded(&self) -> bool {
        let offered = self.load * (self.end - self.start) as f64;
        self.in_flight_growth() <= 0.02 * offered + 2.0
    }
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub load: f64,
    pub step_window: String,
    pub avg_e2e_delay: Option<f64>,
    pub delivered: u64,
    pub in_flight: usize,
    pub algorithm: String,
    pub paradigm: String,
    pub seed: u64,
    pub config_hash: String,
    pub pretrain_steps: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub levels: Vec<LevelResult>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub runs: Vec<RunResult>,
}

impl SweepReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for run in &self.runs {
            for level in &run.levels {
                rows.push(ReportRow {
                    load: level.load,
                    step_window: format!("{}-{}", level.start, level.end),
                    avg_e2e_delay: level.average_delay,
                    delivered: level.delivered,
                    in_flight: level.in_flight_end(),
                    algorithm: self.config.algorithm.label().to_string(),
                    paradigm: self.config.paradigm_label().to_string(),
                    seed: run.seed,
                    config_hash: self.config_hash.clone(),
                    pretrain_steps: self.config.pretrain_steps,
                });
            }
        }
        rows
    }
}

pub fn write_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[ReportRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Mean and sample variance of the per-replica average delay at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub paradigm: String,
    pub load: f64,
    pub step_window: String,
    pub mean_delay: Option<f64>,
    pub variance: f64,
    /// Replicas that delivered at least one packet in the window.
    pub runs: usize,
    pub mean_in_flight: f64,
}

/// Groups rows by `(algorithm, paradigm, step_window)` in first-seen order.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.algorithm.clone(), r.paradigm.clone(), r.step_window.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let group = &groups[&key];
            let delays: Vec<f64> = group.iter().filter_map(|r| r.avg_e2e_delay).collect();
            let (mean, variance) = mean_variance(&delays);
            SummaryRow {
                algorithm: key.0,
                paradigm: key.1,
                load: group[0].load,
                step_window: key.2,
                mean_delay: mean,
                variance,
                runs: delays.len(),
                mean_in_flight: group.iter().map(|r| r.in_flight as f64).sum::<f64>() / group.len() as f64,
            }
        })
        .collect()
}

/// Mean and sample variance (`n − 1` denominator; zero for one sample).
pub fn mean_variance(xs: &[f64]) -> (Option<f64>, f64) {
    if xs.is_empty() {
        return (None, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), var)
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::from("# delays count packets born and delivered inside each window\n");
    s += &format!(
        "{:<16} {:<12} {:>7} {:>16} {:>12} {:>12} {:>5}\n",
        "algorithm", "paradigm", "load", "window", "mean_delay", "variance", "runs"
    );
    for r in rows {
        let mean = r.mean_delay.map_or("-".to_string(), |m| format!("{m:.3}"));
        s.push_str(&format!(
            "{:<16} {:<12} {:>7.3} {:>16} {:>12} {:>12.4} {:>5}\n",
            r.algorithm, r.paradigm, r.load, r.step_window, mean, r.variance, r.runs
        ));
    }
    s
}

fn model_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_1417
}

fn neural_learner<M: QModel + 'static>(
    model: Arc<M>,
    params: ParamSet,
    paradigm: Paradigm,
    topology: &Topology,
    training: TrainingConfig,
) -> Box<dyn Learner> {
    match paradigm {
        Paradigm::Centralized => Box::new(Centralized::new(model, params, training)),
        Paradigm::Federated => Box::new(Federated::new(model, params, training)),
        Paradigm::Cooperated => Box::new(Cooperated::new(model, topology, params, training)),
    }
}

/// Builds the routing policy of `cfg` for one replica. Neural models start
/// from `init` when given, otherwise from a seeded random initialization.
pub fn build_learner(
    cfg: &ExperimentConfig,
    topology: &Topology,
    seed: u64,
    init: Option<ParamSet>,
) -> Box<dyn Learner> {
    let hp = &cfg.hyperparams;
    let training = cfg.training_config(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(model_seed(seed));
    match cfg.algorithm {
        Algorithm::Shortest => Box::new(ShortestPath::new(topology)),
        Algorithm::Global => Box::new(GlobalRouting::new()),
        Algorithm::Qrouting => Box::new(QRouting::new(topology, cfg.qrouting_eta, hp.gamma)),
        Algorithm::Dgatr => {
            let model = Arc::new(GatQNet::from_hyperparams(topology, hp));
            let params = init.unwrap_or_else(|| model.init_params(&mut rng));
            neural_learner(model, params, cfg.paradigm, topology, training)
        }
        Algorithm::Dqn => {
            let model = Arc::new(MlpQNet::from_hyperparams(topology, hp));
            let params = init.unwrap_or_else(|| model.init_params(&mut rng));
            neural_learner(model, params, Paradigm::Centralized, topology, training)
        }
    }
}

/// Runs `steps` steps, feeding every feedback batch to the learner.
pub fn run_steps(sim: &mut Simulator, learner: &mut dyn Learner, steps: u64) -> Result<()> {
    for _ in 0..steps {
        let fbs = sim.step(&mut *learner)?;
        learner.learn(&fbs);
    }
    Ok(())
}

/// Walks the load schedule on an existing simulator.
pub fn run_schedule(
    sim: &mut Simulator,
    learner: &mut dyn Learner,
    loads: &[LoadLevel],
) -> Result<Vec<LevelResult>> {
    let mut out = Vec::with_capacity(loads.len());
    for level in loads {
        sim.set_load(level.lambda)?;
        run_steps(sim, learner, level.settle_steps)?;
        sim.begin_window();
        let start = sim.now() as u64;
        run_steps(sim, learner, level.measure_steps)?;
        let w = &sim.metrics().window;
        out.push(LevelResult {
            load: level.lambda,
            start,
            end: sim.now() as u64,
            delivered: w.delivered,
            average_delay: w.average_delay(),
            in_flight: w.in_flight.clone(),
        });
    }
    Ok(out)
}

/// Initial parameters for a neural replica: pre-trained when the config asks
/// for it, random otherwise.
pub fn initial_params(cfg: &ExperimentConfig, topology: &Topology, seed: u64) -> Result<Option<ParamSet>> {
    if !cfg.algorithm.is_neural() || cfg.pretrain_steps == 0 {
        return Ok(None);
    }
    let data = PretrainData::collect(cfg, topology, seed)?;
    let params = match cfg.algorithm {
        Algorithm::Dgatr => {
            let model = Arc::new(GatQNet::from_hyperparams(topology, &cfg.hyperparams));
            let mut p = Pretrainer::new(model, &data, cfg, seed);
            p.train(cfg.pretrain_steps);
            p.params().clone()
        }
        _ => {
            let model = Arc::new(MlpQNet::from_hyperparams(topology, &cfg.hyperparams));
            let mut p = Pretrainer::new(model, &data, cfg, seed);
            p.train(cfg.pretrain_steps);
            p.params().clone()
        }
    };
    Ok(Some(params))
}

pub fn run_replica(cfg: &ExperimentConfig, topology: &Topology, seed: u64) -> Result<RunResult> {
    let init = initial_params(cfg, topology, seed)?;
    let mut learner = build_learner(cfg, topology, seed, init);
    let mut sim = Simulator::with_service_time(
        topology.clone(),
        TrafficConfig { load: 0.0, seed },
        cfg.service_time,
    )?;
    let levels = run_schedule(&mut sim, learner.as_mut(), &cfg.loads)?;
    Ok(RunResult { seed, levels })
}

pub fn load_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let topology = load_topology(&cfg.topology)?;
    let runs = (0..cfg.repetitions as u64)
        .map(|r| run_replica(cfg, &topology, cfg.seed.wrapping_add(r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        config: cfg.clone(),
        config_hash: config_hash(cfg),
        runs,
    })
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub reports: Vec<SweepReport>,
}

impl Comparison {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.reports.iter().flat_map(|r| r.rows()).collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.rows())
    }
}

/// Runs every config; all must share the topology and load schedule.
pub fn compare(cfgs: &[ExperimentConfig]) -> Result<Comparison> {
    let Some(first) = cfgs.first() else {
        return Err(HarnessError::Config("nothing to compare".into()));
    };
    for c in &cfgs[1..] {
        if c.topology != first.topology {
            return Err(HarnessError::Mismatch("topology".into()));
        }
        if c.loads != first.loads {
            return Err(HarnessError::Mismatch("load schedule".into()));
        }
    }
    let reports = cfgs.iter().map(load_sweep).collect::<Result<Vec<_>>>()?;
    Ok(Comparison { reports })
}

/// Q-routing trained at the teacher load.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub policy: QRouting,
    pub steps: u64,
    pub converged: bool,
    sim: Simulator,
    rng: ChaCha8Rng,
}

/// The teacher acting ε-greedily; the next-action hint stays greedy.
struct Exploring<'a> {
    inner: &'a mut QRouting,
    rng: &'a mut ChaCha8Rng,
    epsilon: f64,
}

impl RoutingPolicy for Exploring<'_> {
    fn next_hop(&mut self, view: &NetworkView<'_>, obs: &Observation) -> NodeId {
        let inner = &mut *self.inner;
        epsilon_greedy(self.rng, self.epsilon, obs, || inner.next_hop(view, obs))
    }
    fn next_hop_value(&mut self, obs: &Observation) -> f64 {
        self.inner.next_hop_value(obs)
    }
    fn next_action_hint(&mut self, obs: &Observation) -> Option<NodeId> {
        self.inner.next_action_hint(obs)
    }
}

/// Wraps Q-routing to record when a greedy choice last changed.
struct Tracked<'a> {
    inner: &'a mut QRouting,
    changed: bool,
}

impl RoutingPolicy for Tracked<'_> {
    fn next_hop(&mut self, view: &NetworkView<'_>, obs: &Observation) -> NodeId {
        self.inner.next_hop(view, obs)
    }
    fn next_hop_value(&mut self, obs: &Observation) -> f64 {
        self.inner.next_hop_value(obs)
    }
    fn next_action_hint(&mut self, obs: &Observation) -> Option<NodeId> {
        self.inner.next_action_hint(obs)
    }
}

impl Tracked<'_> {
    fn learn(&mut self, fbs: &[DeliveryFeedback]) {
        for fb in fbs {
            let (x, d) = (fb.sender, fb.state.destination);
            let before = self.inner.table.greedy(x, d);
            self.inner.learn_from(fb);
            if self.inner.table.greedy(x, d) != before {
                self.changed = true;
            }
        }
    }
}

impl Teacher {
    /// Trains until no greedy choice changed for `teacher_stable_steps`
    /// consecutive steps, or `teacher_max_steps` elapse.
    pub fn train(cfg: &ExperimentConfig, topology: &Topology, seed: u64) -> Result<Self> {
        let s = &cfg.pretrain;
        let mut policy = QRouting::new(topology, cfg.qrouting_eta, cfg.hyperparams.gamma);
        let mut sim = Simulator::with_service_time(
            topology.clone(),
            TrafficConfig {
                load: s.teacher_load,
                seed: seed ^ 0x7EAC,
            },
            cfg.service_time,
        )?;
        let mut stable = 0;
        let mut steps = 0;
        let mut converged = false;
        while steps < s.teacher_max_steps {
            let mut tracked = Tracked {
                inner: &mut policy,
                changed: false,
            };
            let fbs = sim.step(&mut tracked)?;
            tracked.learn(&fbs);
            stable = if tracked.changed { 0 } else { stable + 1 };
            steps += 1;
            if stable >= s.teacher_stable_steps {
                converged = true;
                break;
            }
        }
        Ok(Self {
            policy,
            steps,
            converged,
            sim,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x106),
        })
    }

    /// Keeps running the teacher at its load, acting ε-greedily, and logs
    /// `count` transitions `(s, a, r, s̃, ã, f)` where `ã` is the next hop's
    /// greedy choice.
    pub fn log(&mut self, count: usize, epsilon: f64) -> Result<Vec<Transition>> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut acting = Exploring {
                inner: &mut self.policy,
                rng: &mut self.rng,
                epsilon,
            };
            let fbs = self.sim.step(&mut acting)?;
            self.policy.learn(&fbs);
            out.extend(fbs.iter().map(Transition::from));
        }
        out.truncate(count);
        Ok(out)
    }
}

/// Delay figures of a frozen policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub delivered: u64,
    /// Packets born in the window and still in the system at its end.
    pub undelivered: u64,
    pub average_delay: Option<f64>,
    /// Average over all packets born in the window, counting undelivered
    /// ones with their age at the end of the window.
    pub censored_delay: f64,
}

impl EvalReport {
    pub fn delivered_fraction(&self) -> f64 {
        let total = self.delivered + self.undelivered;
        if total == 0 {
            1.0
        } else {
            self.delivered as f64 / total as f64
        }
    }
}

/// Runs `policy` with learning disabled at `load` and reports window delays.
pub fn evaluate(
    topology: &Topology,
    policy: &mut dyn RoutingPolicy,
    load: f64,
    warmup: u64,
    steps: u64,
    seed: u64,
    service_time: f64,
) -> Result<EvalReport> {
    let mut sim = Simulator::with_service_time(topology.clone(), TrafficConfig { load, seed }, service_time)?;
    for _ in 0..warmup {
        sim.step(policy)?;
    }
    sim.begin_window();
    let start = sim.now();
    for _ in 0..steps {
        sim.step(policy)?;
    }
    let now = sim.now();
    let w = &sim.metrics().window;
    let (mut undelivered, mut age) = (0u64, 0.0);
    for p in sim.packets_in_system().filter(|p| p.birth_time >= start) {
        undelivered += 1;
        age += now - p.birth_time;
    }
    let total = w.delivered + undelivered;
    let censored = if total == 0 {
        0.0
    } else {
        (w.total_delay + age) / total as f64
    };
    Ok(EvalReport {
        delivered: w.delivered,
        undelivered,
        average_delay: w.average_delay(),
        censored_delay: censored,
    })
}

/// Teacher transitions plus the teacher's own evaluation.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub transitions: Vec<Transition>,
    pub teacher_converged: bool,
    pub teacher_steps: u64,
    pub teacher_report: EvalReport,
}

impl PretrainData {
    pub fn collect(cfg: &ExperimentConfig, topology: &Topology, seed: u64) -> Result<Self> {
        let s = &cfg.pretrain;
        let mut teacher = Teacher::train(cfg, topology, seed)?;
        if !teacher.converged {
            eprintln!(
                "warning: Q-routing teacher still changing after {} steps; pre-training proceeds with the current table",
                teacher.steps
            );
        }
        let transitions = teacher.log(s.log_transitions, s.teacher_epsilon)?;
        let mut frozen = teacher.policy.clone();
        frozen.set_learning(false);
        let teacher_report = evaluate(
            topology,
            &mut frozen,
            s.eval_load,
            s.eval_warmup_steps,
            s.eval_steps,
            eval_seed(seed),
            cfg.service_time,
        )?;
        Ok(Self {
            transitions,
            teacher_converged: teacher.converged,
            teacher_steps: teacher.steps,
            teacher_report,
        })
    }
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0xE7A1
}

/// Off-policy training on logged teacher transitions with targets
/// `r + γ·Q(s̃, ã; w_target)·(1 − f)`.
pub struct Pretrainer<'a, M: QModel> {
    learner: Centralized<M>,
    data: &'a [Transition],
    rng: ChaCha8Rng,
    batch: usize,
    gamma: f64,
    steps: u64,
}

impl<'a, M: QModel> Pretrainer<'a, M> {
    pub fn new(model: Arc<M>, data: &'a PretrainData, cfg: &ExperimentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed(seed));
        let init = model.init_params(&mut rng);
        let mut training = cfg.training_config(seed);
        if let Some(alpha) = cfg.pretrain.step_size {
            training.hyper.step_size = alpha;
        }
        Self {
            learner: Centralized::new(model, init, training),
            data: &data.transitions,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9A7A),
            batch: cfg.hyperparams.batch_size.min(data.transitions.len()),
            gamma: cfg.hyperparams.gamma,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &ParamSet {
        self.learner.agent().params()
    }

    pub fn learner_mut(&mut self) -> &mut Centralized<M> {
        &mut self.learner
    }

    pub fn train(&mut self, steps: u64) {
        if self.batch == 0 {
            return;
        }
        for _ in 0..steps {
            let picks = index::sample(&mut self.rng, self.data.len(), self.batch);
            let batch: Vec<Transition> = picks.iter().map(|i| self.data[i].clone()).collect();
            let gamma = self.gamma;
            let agent = self.learner.agent_mut();
            let targets: Vec<f64> = batch
                .iter()
                .map(|t| {
                    if t.terminal {
                        return t.reward;
                    }
                    let next = match t.next_action {
                        Some(a) => agent.target_value_of(&t.next_state, a),
                        None => agent.target_max(&t.next_state),
                    };
                    td_target(t.reward, next, false, gamma)
                })
                .collect();
            self.learner.apply_batch(&batch, &targets);
            self.steps += 1;
        }
    }

    /// Greedy evaluation of the current parameters at the configured load.
    pub fn evaluate(&mut self, topology: &Topology, cfg: &ExperimentConfig, seed: u64) -> Result<EvalReport> {
        let s = &cfg.pretrain;
        self.learner.set_learning(false);
        let report = evaluate(
            topology,
            &mut self.learner,
            s.eval_load,
            s.eval_warmup_steps,
            s.eval_steps,
            eval_seed(seed),
            cfg.service_time,
        );
        self.learner.set_learning(true);
        report
    }
}

/// Result of the `pretrain` command.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub report: EvalReport,
    pub teacher_report: EvalReport,
    pub teacher_converged: bool,
    pub steps: u64,
}

pub fn pretrain(cfg: &ExperimentConfig, steps: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if !cfg.algorithm.is_neural() {
        return Err(HarnessError::Config(format!(
            "pre-training needs a neural algorithm, got `{}`",
            cfg.algorithm.as_str()
        )));
    }
    let topology = load_topology(&cfg.topology)?;
    let data = PretrainData::collect(cfg, &topology, cfg.seed)?;
    let (params, report) = match cfg.algorithm {
        Algorithm::Dgatr => {
            let model = Arc::new(GatQNet::from_hyperparams(&topology, &cfg.hyperparams));
            pretrain_with(model, &data, cfg, &topology, steps)?
        }
        _ => {
            let model = Arc::new(MlpQNet::from_hyperparams(&topology, &cfg.hyperparams));
            pretrain_with(model, &data, cfg, &topology, steps)?
        }
    };
    Ok(PretrainOutcome {
        params,
        report,
        teacher_report: data.teacher_report.clone(),
        teacher_converged: data.teacher_converged,
        steps,
    })
}

fn pretrain_with<M: QModel>(
    model: Arc<M>,
    data: &PretrainData,
    cfg: &ExperimentConfig,
    topology: &Topology,
    steps: u64,
) -> Result<(ParamSet, EvalReport)> {
    let mut p = Pretrainer::new(model, data, cfg, cfg.seed);
    p.train(steps);
    let report = p.evaluate(topology, cfg, cfg.seed)?;
    Ok((p.params().clone(), report))
}

/// Evaluation after each cumulative step budget (budgets must be sorted).
pub fn pretrain_curve<M: QModel>(
    model: Arc<M>,
    data: &PretrainData,
    cfg: &ExperimentConfig,
    topology: &Topology,
    budgets: &[u64],
    seed: u64,
) -> Result<Vec<(u64, EvalReport)>> {
    let mut p = Pretrainer::new(model, data, cfg, seed);
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        if b < p.steps() {
            return Err(HarnessError::Config("budgets must be non-decreasing".into()));
        }
        p.train(b - p.steps());
        out.push((b, p.evaluate(topology, cfg, seed)?));
    }
    Ok(out)
}
