//! Experiment configuration and the four runnable studies: kernel labeling,
//! fixed-vs-adaptive comparison, the transfer-entropy table and single-cycle
//! simulation. Every study writes into its own subdirectory of the output
//! directory together with a `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commloop::{run_cycle, run_window, write_trajectory_csv, AdaptivePolicy, CommPolicy, CycleOutcome, PhaseRate};
use crate::control::{next_phase_index, previous_phase_index, synthesize_gain, GainMatrix, PhaseSpec};
use crate::error::{Error, Result};
use crate::infotheory::{te_table, write_te_csv, PeriodRuns, TeCell, TeSettings};
use crate::plant::{PlantModel, PlantState};
use crate::rng::{substream, Purpose};
use crate::viability::{
    estimate_kernel_detailed, kernel_width, level_priors, write_kernel_csv, KernelEstimate, KernelOptions, KernelRun,
    KernelSummary,
};

pub const TARGETS: [PlantState; 3] = [
    PlantState::new(0.0, 0.0),
    PlantState::new(2.5, 2.0),
    PlantState::new(1.0, 3.0),
];
pub const UPDATE_PERIODS: [f64; 3] = [0.1, 0.05, 0.05];
pub const TIME_BUDGETS: [f64; 3] = [0.6, 0.6, 0.25];
pub const NEIGHBORHOOD_RADIUS: f64 = 0.35;

/// One phase as written in the config file. Omitted fields take the
/// default of that phase; an omitted gain is synthesized at load time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PlantState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighborhood_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_update_period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fast_update_period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_budget: Option<f64>,
    /// Row-major 2x2 feedback gain. When absent the gain places the
    /// closed-loop pole at `gain_pole` for the base update period.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<GainMatrix>,
}

impl PhaseConfig {
    fn defaults_for(index: usize) -> Self {
        Self {
            target: Some(TARGETS[index]),
            neighborhood_radius: Some(NEIGHBORHOOD_RADIUS),
            base_update_period: Some(UPDATE_PERIODS[index]),
            fast_update_period: Some(UPDATE_PERIODS[index]),
            time_budget: Some(TIME_BUDGETS[index]),
            gain: None,
        }
    }

    fn fill(&mut self, index: usize) {
        let d = Self::defaults_for(index);
        self.target = self.target.or(d.target);
        self.neighborhood_radius = self.neighborhood_radius.or(d.neighborhood_radius);
        self.base_update_period = self.base_update_period.or(d.base_update_period);
        self.time_budget = self.time_budget.or(d.time_budget);
        // fast defaults to the (possibly overridden) base period
        self.fast_update_period = self.fast_update_period.or(self.base_update_period);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Fixed,
    Adaptive,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Fixed => "fixed",
            PolicyKind::Adaptive => "adaptive",
        }
    }
}

/// Edge-aware scheduling: `fast_update_period` of the phase near the kernel
/// edge, `interior_period_scale` times its base period elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub edge_radius: f64,
    pub interior_period_scale: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            edge_radius: 0.3,
            interior_period_scale: 2.0,
        }
    }
}

/// Transfer-entropy study: runs of one phase observed for `window` time
/// units at each of `periods`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeConfig {
    pub n_bins: u32,
    pub k: usize,
    pub l: usize,
    pub n_shuffles: usize,
    pub phase: u8,
    pub periods: Vec<f64>,
    pub window: f64,
    /// Runs per prior; each repeat uses a fresh noise stream.
    pub repeats: usize,
}

impl Default for TeConfig {
    fn default() -> Self {
        let s = TeSettings::default();
        Self {
            n_bins: s.n_bins,
            k: s.k,
            l: s.l,
            n_shuffles: s.n_shuffles,
            phase: 2,
            periods: vec![0.1, 0.075, 0.05],
            window: 1.0,
            repeats: 1,
        }
    }
}

impl TeConfig {
    pub fn settings(&self) -> TeSettings {
        TeSettings {
            n_bins: self.n_bins,
            k: self.k,
            l: self.l,
            n_shuffles: self.n_shuffles,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_priors: usize,
    pub n_cycles: usize,
    pub repetitions: usize,
    pub policies: Vec<PolicyKind>,
    /// Closed-loop pole used for phases without an explicit gain.
    pub gain_pole: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub plant: PlantModel,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub phase3: PhaseConfig,
    pub adaptive: AdaptiveConfig,
    pub te: TeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_priors: 50,
            n_cycles: 3,
            repetitions: 1,
            policies: vec![PolicyKind::Fixed, PolicyKind::Adaptive],
            gain_pole: -0.3,
            out_dir: None,
            plant: PlantModel::default(),
            phase1: PhaseConfig::defaults_for(0),
            phase2: PhaseConfig::defaults_for(1),
            phase3: PhaseConfig::defaults_for(2),
            adaptive: AdaptiveConfig::default(),
            te: TeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, fills omitted keys and validates. Every unknown key
    /// is reported, not only the first.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut unknown = Vec::new();
        let mut cfg: ExperimentConfig =
            serde_ignored::deserialize(de, |path| unknown.push(path.to_string())).map_err(|e| Error::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        cfg.fill();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    fn fill(&mut self) {
        for (i, p) in self.phases_mut().into_iter().enumerate() {
            p.fill(i);
        }
    }

    fn phases_mut(&mut self) -> [&mut PhaseConfig; 3] {
        [&mut self.phase1, &mut self.phase2, &mut self.phase3]
    }

    pub fn phase_configs(&self) -> [&PhaseConfig; 3] {
        [&self.phase1, &self.phase2, &self.phase3]
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        if self.n_priors == 0 {
            return Err(Error::field("n_priors", "must be >= 1"));
        }
        if self.repetitions == 0 {
            return Err(Error::field("repetitions", "must be >= 1"));
        }
        if self.policies.is_empty() {
            return Err(Error::field("policies", "must name at least one policy"));
        }
        if !(self.gain_pole.abs() < 1.0) {
            return Err(Error::field("gain_pole", "must lie in (-1, 1)"));
        }
        if !(self.adaptive.edge_radius > 0.0) || !self.adaptive.edge_radius.is_finite() {
            return Err(Error::field("adaptive.edge_radius", "must be > 0"));
        }
        if !(self.adaptive.interior_period_scale >= 1.0) || !self.adaptive.interior_period_scale.is_finite() {
            return Err(Error::field("adaptive.interior_period_scale", "must be >= 1"));
        }
        let te = &self.te;
        if te.n_bins < 2 {
            return Err(Error::field("te.n_bins", "must be >= 2"));
        }
        if te.k == 0 || te.l == 0 {
            return Err(Error::field("te.k", "history lengths k and l must be >= 1"));
        }
        if !(1..=3).contains(&te.phase) {
            return Err(Error::field("te.phase", "must be 1, 2 or 3"));
        }
        if te.periods.is_empty() || te.periods.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::field("te.periods", "must be a non-empty list of positive periods"));
        }
        if !(te.window > 0.0) || !te.window.is_finite() {
            return Err(Error::field("te.window", "must be > 0"));
        }
        if te.repeats == 0 {
            return Err(Error::field("te.repeats", "must be >= 1"));
        }
        for p in self.phase_specs()? {
            p.validate()?;
            if p.time_budget < p.base_update_period * self.adaptive.interior_period_scale {
                return Err(Error::field(
                    format!("phase{}.time_budget", p.index),
                    "must cover one adaptive interior period",
                ));
            }
        }
        Ok(())
    }

    /// Resolved phase specifications, gains included.
    pub fn phase_specs(&self) -> Result<[PhaseSpec; 3]> {
        let mut out = [PhaseSpec {
            index: 1,
            target: PlantState::default(),
            neighborhood_radius: NEIGHBORHOOD_RADIUS,
            base_update_period: UPDATE_PERIODS[0],
            fast_update_period: UPDATE_PERIODS[0],
            time_budget: TIME_BUDGETS[0],
            gain: GainMatrix::zero(),
        }; 3];
        for (i, c) in self.phase_configs().into_iter().enumerate() {
            let d = PhaseConfig::defaults_for(i);
            let target = c.target.or(d.target).unwrap_or_default();
            let base = c.base_update_period.or(d.base_update_period).unwrap_or(UPDATE_PERIODS[i]);
            let gain = match c.gain {
                Some(g) => g,
                None => synthesize_gain(target, base, self.gain_pole, &self.plant)
                    .map_err(|e| Error::field(format!("phase{}.gain", i + 1), e.to_string()))?,
            };
            out[i] = PhaseSpec {
                index: i as u8 + 1,
                target,
                neighborhood_radius: c.neighborhood_radius.or(d.neighborhood_radius).unwrap_or(NEIGHBORHOOD_RADIUS),
                base_update_period: base,
                fast_update_period: c.fast_update_period.unwrap_or(base),
                time_budget: c.time_budget.or(d.time_budget).unwrap_or(TIME_BUDGETS[i]),
                gain,
            };
        }
        Ok(out)
    }

    pub fn kernel_options(&self) -> KernelOptions {
        KernelOptions {
            n_priors: self.n_priors,
            n_cycles: self.n_cycles,
            repetitions: self.repetitions,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical TOML form, ignoring `out_dir`.
    pub fn hash(&self) -> Result<String> {
        let canonical = ExperimentConfig {
            out_dir: None,
            ..self.clone()
        };
        Ok(sha256_hex(canonical.to_toml_string()?.as_bytes()))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}

/// Same gains and budgets with every update period multiplied by `factor`.
pub fn scale_periods(phases: &[PhaseSpec; 3], factor: f64) -> [PhaseSpec; 3] {
    phases.map(|p| PhaseSpec {
        base_update_period: p.base_update_period * factor,
        fast_update_period: p.fast_update_period * factor,
        ..p
    })
}

pub fn fixed_policies() -> [CommPolicy; 3] {
    [CommPolicy::Fixed, CommPolicy::Fixed, CommPolicy::Fixed]
}

/// Adaptive policies whose edge test uses the labels of a fixed-policy run:
/// phase `n` consults the priors of the level it departs from.
pub fn adaptive_policies(phases: &[PhaseSpec; 3], fixed: &KernelRun, cfg: &AdaptiveConfig) -> [CommPolicy; 3] {
    std::array::from_fn(|i| {
        let p = &phases[i];
        CommPolicy::Adaptive(AdaptivePolicy {
            base_period: p.base_update_period * cfg.interior_period_scale,
            fast_period: p.fast_update_period,
            edge_radius: cfg.edge_radius,
            labeled: fixed.labeled_for_phase(p.index).into(),
        })
    })
}

/// Per-phase update accounting pooled over the first rollout of every prior.
pub fn phase_rates(run: &KernelRun) -> [PhaseRate; 3] {
    let mut rates = [PhaseRate::new(1), PhaseRate::new(2), PhaseRate::new(3)];
    for (li, outcomes) in run.rollouts.iter().enumerate() {
        let phase = next_phase_index(li as u8 + 1) as usize - 1;
        for o in outcomes {
            rates[phase].add(o);
        }
    }
    rates
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseComparison {
    pub phase: u8,
    /// Level whose priors were rolled out in this phase.
    pub level: u8,
    pub fixed_rate: Option<f64>,
    pub adaptive_rate: Option<f64>,
    pub rate_reduction_percent: Option<f64>,
    pub fixed_updates_per_run: Option<f64>,
    pub adaptive_updates_per_run: Option<f64>,
    pub updates_reduction_percent: Option<f64>,
    pub fixed_viable_fraction: f64,
    pub adaptive_viable_fraction: f64,
    pub fixed_width: f64,
    pub adaptive_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallComparison {
    pub fixed_rate: Option<f64>,
    pub adaptive_rate: Option<f64>,
    pub rate_reduction_percent: Option<f64>,
    pub fixed_mean_viable_fraction: f64,
    pub adaptive_mean_viable_fraction: f64,
    pub fixed_mean_width: f64,
    pub adaptive_mean_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub phases: Vec<PhaseComparison>,
    pub overall: OverallComparison,
}

fn reduction(fixed: Option<f64>, adaptive: Option<f64>) -> Option<f64> {
    match (fixed, adaptive) {
        (Some(f), Some(a)) if f > 0.0 => Some(100.0 * (f - a) / f),
        _ => None,
    }
}

impl ComparisonReport {
    pub fn new(seed: u64, fixed: &KernelRun, adaptive: &KernelRun) -> Self {
        let fr = phase_rates(fixed);
        let ar = phase_rates(adaptive);
        let phases: Vec<PhaseComparison> = (0..3)
            .map(|i| {
                let level = previous_phase_index(i as u8 + 1);
                let fe = &fixed.estimates[level as usize - 1];
                let ae = &adaptive.estimates[level as usize - 1];
                let (fu, au) = (fr[i].updates_per_run(), ar[i].updates_per_run());
                PhaseComparison {
                    phase: i as u8 + 1,
                    level,
                    fixed_rate: fr[i].rate,
                    adaptive_rate: ar[i].rate,
                    rate_reduction_percent: reduction(fr[i].rate, ar[i].rate),
                    fixed_updates_per_run: fu,
                    adaptive_updates_per_run: au,
                    updates_reduction_percent: reduction(fu, au),
                    fixed_viable_fraction: fe.viable_fraction,
                    adaptive_viable_fraction: ae.viable_fraction,
                    fixed_width: kernel_width(fe),
                    adaptive_width: kernel_width(ae),
                }
            })
            .collect();
        let total = |r: &[PhaseRate; 3]| {
            let u: u64 = r.iter().map(|p| p.updates).sum();
            let t: f64 = r.iter().map(|p| p.elapsed).sum();
            (t > 0.0).then(|| u as f64 / t)
        };
        let mean = |f: &dyn Fn(&PhaseComparison) -> f64| phases.iter().map(f).sum::<f64>() / phases.len() as f64;
        let overall = OverallComparison {
            fixed_rate: total(&fr),
            adaptive_rate: total(&ar),
            rate_reduction_percent: reduction(total(&fr), total(&ar)),
            fixed_mean_viable_fraction: mean(&|p| p.fixed_viable_fraction),
            adaptive_mean_viable_fraction: mean(&|p| p.adaptive_viable_fraction),
            fixed_mean_width: mean(&|p| p.fixed_width),
            adaptive_mean_width: mean(&|p| p.adaptive_width),
        };
        Self { seed, phases, overall }
    }
}

pub const COMPARISON_CSV_HEADER: &str = "phase,level,fixed_rate,adaptive_rate,rate_reduction_percent,\
fixed_updates_per_run,adaptive_updates_per_run,updates_reduction_percent,\
fixed_viable_fraction,adaptive_viable_fraction,fixed_width,adaptive_width";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn write_comparison_csv<W: std::io::Write>(mut w: W, report: &ComparisonReport) -> std::io::Result<()> {
    writeln!(w, "{COMPARISON_CSV_HEADER}")?;
    for p in &report.phases {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            p.phase,
            p.level,
            opt(p.fixed_rate),
            opt(p.adaptive_rate),
            opt(p.rate_reduction_percent),
            opt(p.fixed_updates_per_run),
            opt(p.adaptive_updates_per_run),
            opt(p.updates_reduction_percent),
            p.fixed_viable_fraction,
            p.adaptive_viable_fraction,
            p.fixed_width,
            p.adaptive_width
        )?;
    }
    Ok(())
}

/// Fixed-policy kernel run followed by the paired adaptive run.
pub struct PolicyRuns {
    pub phases: [PhaseSpec; 3],
    pub fixed: KernelRun,
    pub adaptive: Option<KernelRun>,
}

pub fn run_policies(cfg: &ExperimentConfig, with_adaptive: bool) -> Result<PolicyRuns> {
    let phases = cfg.phase_specs()?;
    let opts = cfg.kernel_options();
    let fixed = estimate_kernel_detailed(&phases, &fixed_policies(), &cfg.plant, &opts)?;
    let adaptive = if with_adaptive {
        let pols = adaptive_policies(&phases, &fixed, &cfg.adaptive);
        Some(estimate_kernel_detailed(&phases, &pols, &cfg.plant, &opts)?)
    } else {
        None
    };
    Ok(PolicyRuns {
        phases,
        fixed,
        adaptive,
    })
}

pub fn compare(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    let runs = run_policies(cfg, true)?;
    let adaptive = runs.adaptive.as_ref().ok_or_else(|| Error::Config("adaptive run missing".into()))?;
    Ok(ComparisonReport::new(cfg.seed, &runs.fixed, adaptive))
}

/// Exchange records for the transfer-entropy study, one entry per period.
pub fn te_runs(cfg: &ExperimentConfig) -> Result<Vec<PeriodRuns>> {
    let phases = cfg.phase_specs()?;
    let spec = phases[cfg.te.phase as usize - 1];
    let level = previous_phase_index(spec.index);
    let priors = level_priors(&phases, level, cfg.n_priors, cfg.seed)?;
    cfg.te
        .periods
        .iter()
        .map(|&period| {
            let phase = PhaseSpec {
                base_update_period: period,
                fast_update_period: period,
                ..spec
            };
            let runs = (0..cfg.te.repeats)
                .flat_map(|rep| priors.iter().enumerate().map(move |(i, &p)| (rep, i, p)))
                .collect::<Vec<_>>();
            use rayon::prelude::*;
            let runs = runs
                .par_iter()
                .map(|&(rep, i, p)| {
                    let mut rng = substream(cfg.seed, Purpose::TeTrajectory, level, rep as u16, i as u32);
                    run_window(p, &phase, &CommPolicy::Fixed, &cfg.plant, &mut rng, cfg.te.window).map(|o| o.exchanges)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PeriodRuns {
                update_period: period,
                runs,
            })
        })
        .collect()
}

pub fn te_study(cfg: &ExperimentConfig) -> Result<Vec<TeCell>> {
    let inputs = te_runs(cfg)?;
    Ok(te_table(&inputs, &cfg.te.settings(), cfg.seed))
}

/// One seeded cycle run under the fixed policy.
pub fn simulate(cfg: &ExperimentConfig, start: PlantState, n_cycles: usize) -> Result<CycleOutcome> {
    let phases = cfg.phase_specs()?;
    let mut rng = substream(cfg.seed, Purpose::Simulate, 0, 0, 0);
    run_cycle(start, &phases, &fixed_policies(), &cfg.plant, &mut rng, n_cycles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Collects output files in memory and writes them, plus the manifest, into
/// one subdirectory.
struct OutputSet {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl OutputSet {
    fn new(out_dir: &Path, sub: &str) -> Self {
        Self {
            dir: out_dir.join(sub),
            files: BTreeMap::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
        s.push('\n');
        self.add(name, s.into_bytes());
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let manifest = Manifest {
            command: command.to_string(),
            seed: cfg.seed,
            config_sha256: cfg.hash()?,
            files: self.files.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect(),
        };
        self.add_json("manifest.json", &manifest)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::Serialize(e.to_string()))?;
    Ok(buf)
}

/// Runs studies with an optional dedicated worker pool. Results do not
/// depend on the worker count.
#[derive(Debug, Clone)]
pub struct Runner {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    /// 0 uses the global pool.
    pub workers: usize,
}

impl Runner {
    pub fn new(config: ExperimentConfig, out_dir: impl Into<PathBuf>, workers: usize) -> Self {
        Self {
            config,
            out_dir: out_dir.into(),
            workers,
        }
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        if self.workers == 0 {
            return f();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(f)
    }

    /// Kernel CSV and summary JSON for each configured policy.
    pub fn cmd_kernel(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let want_adaptive = cfg.policies.contains(&PolicyKind::Adaptive);
        let runs = self.install(|| run_policies(cfg, want_adaptive))?;
        let mut out = OutputSet::new(&self.out_dir, "kernel");
        let mut kinds = cfg.policies.clone();
        kinds.sort();
        kinds.dedup();
        for kind in kinds {
            let run = match kind {
                PolicyKind::Fixed => &runs.fixed,
                PolicyKind::Adaptive => runs.adaptive.as_ref().ok_or_else(|| Error::Config("adaptive run missing".into()))?,
            };
            let name = kind.as_str();
            out.add(format!("kernel_{name}.csv"), csv_bytes(|b| write_kernel_csv(b, &run.estimates))?);
            out.add_json(&format!("summary_{name}.json"), &KernelSummary::new(name, &run.estimates))?;
        }
        out.finish("kernel", cfg)
    }

    pub fn cmd_compare(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let report = self.install(|| compare(cfg))?;
        let mut out = OutputSet::new(&self.out_dir, "compare");
        out.add("comparison.csv", csv_bytes(|b| write_comparison_csv(b, &report))?);
        out.add_json("comparison.json", &report)?;
        out.finish("compare", cfg)
    }

    pub fn cmd_te(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let cells = self.install(|| te_study(cfg))?;
        let mut out = OutputSet::new(&self.out_dir, "te");
        out.add("te.csv", csv_bytes(|b| write_te_csv(b, &cells, &cfg.te.settings()))?);
        out.finish("te", cfg)
    }

    pub fn cmd_simulate(&self, start: PlantState, n_cycles: usize) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let outcome = simulate(cfg, start, n_cycles)?;
        let mut out = OutputSet::new(&self.out_dir, "sim");
        out.add("trajectory.csv", csv_bytes(|b| write_trajectory_csv(b, &outcome))?);
        out.add_json("summary.json", &SimulationSummary::new(start, n_cycles, &outcome))?;
        out.finish("simulate", cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub start: PlantState,
    pub n_cycles: usize,
    pub viable: bool,
    pub phases_run: usize,
    pub total_updates: u64,
    pub total_time: f64,
    pub final_state: PlantState,
}

impl SimulationSummary {
    pub fn new(start: PlantState, n_cycles: usize, o: &CycleOutcome) -> Self {
        Self {
            start,
            n_cycles,
            viable: o.viable,
            phases_run: o.phases.len(),
            total_updates: o.total_updates,
            total_time: o.total_time,
            final_state: o.phases.last().map_or(start, |p| p.final_state),
        }
    }
}

/// Level estimates of a run, for callers that only need fractions.
pub fn viable_fractions(estimates: &[KernelEstimate; 3]) -> [f64; 3] {
    estimates.each_ref().map(|e| e.viable_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.n_priors, 50);
        assert_eq!(c.phase2.target, Some(PlantState::new(2.5, 2.0)));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = ExperimentConfig::from_toml_str("sed = 1\n[plant]\nalfa = 2.0\n").unwrap_err();
        match err {
            Error::UnknownKeys(keys) => {
                assert_eq!(keys.len(), 2, "{keys:?}");
                assert!(keys.iter().any(|k| k.contains("sed")));
                assert!(keys.iter().any(|k| k.contains("alfa")));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn partial_phase_keeps_its_own_defaults() {
        let c = ExperimentConfig::from_toml_str("[phase3]\ntime_budget = 2.0\n").unwrap();
        let p = c.phase_specs().unwrap();
        assert_eq!(p[2].time_budget, 2.0);
        assert_eq!(p[2].target, PlantState::new(1.0, 3.0));
        assert_eq!(p[2].base_update_period, 0.05);
        assert_eq!(p[0].base_update_period, 0.1);
    }

    #[test]
    fn fast_above_base_names_the_field() {
        let err = ExperimentConfig::from_toml_str("[phase1]\nfast_update_period = 0.2\n").unwrap_err();
        assert!(matches!(err, Error::InvalidField { ref field, .. } if field == "phase1.fast_update_period"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig {
            seed: 42,
            ..Default::default()
        };
        c.phase2.gain = Some(GainMatrix([[1.0, 0.5], [0.0, 2.0]]));
        c.te.periods = vec![0.2, 0.1];
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: Some("elsewhere".into()),
            ..a.clone()
        };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn doubling_keeps_gains_and_budgets() {
        let p = ExperimentConfig::default().phase_specs().unwrap();
        let d = scale_periods(&p, 2.0);
        for (a, b) in p.iter().zip(&d) {
            assert_eq!(a.gain, b.gain);
            assert_eq!(a.time_budget, b.time_budget);
            assert_eq!(2.0 * a.base_update_period, b.base_update_period);
        }
    }
}
