//! Experiment configuration: a plain `key = value` document with dotted
//! keys. Lines starting with `#` are comments. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use optzoo_core::curvature::HessianEstimator;
use optzoo_core::first_order::{DecayMode, SgdVariant};
use optzoo_core::modular::{BlockNorm, NormKind};
use optzoo_core::optimizer::{ModularMode, ModularOptions};
use optzoo_core::schedule::{BemaConfig, CooldownShape, ScheduleKind, ScheduleSpec, SpikeSpec, WeightDecaySpec};
use optzoo_core::{Algorithm, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Train,
    Rosenbrock,
    SpikeGrid,
    BiasVariance,
    Sweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Rosenbrock => "rosenbrock",
            ExperimentKind::SpikeGrid => "spike-grid",
            ExperimentKind::BiasVariance => "bias-variance",
            ExperimentKind::Sweep => "sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => ExperimentKind::Train,
            "rosenbrock" => ExperimentKind::Rosenbrock,
            "spike-grid" => ExperimentKind::SpikeGrid,
            "bias-variance" => ExperimentKind::BiasVariance,
            "sweep" => ExperimentKind::Sweep,
            other => return Err(Error::Config(format!("unknown experiment `{other}`"))),
        })
    }
}

/// Optimizer name, peak learning rate and raw hyperparameter overrides.
/// Overrides are validated against the named algorithm by [`build_algorithm`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSpec {
    pub name: String,
    pub lr: f64,
    pub params: BTreeMap<String, String>,
}

impl OptimizerSpec {
    pub fn new(name: &str, lr: f64) -> Self {
        OptimizerSpec {
            name: name.to_string(),
            lr,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        build_algorithm(&self.name, &self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleName {
    Constant,
    Wsd,
    Linear,
    Cosine,
    Step,
    Exponential,
    OneCycle,
    ConstantCooldown,
}

impl ScheduleName {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "constant" => ScheduleName::Constant,
            "wsd" => ScheduleName::Wsd,
            "linear" => ScheduleName::Linear,
            "cosine" => ScheduleName::Cosine,
            "step" => ScheduleName::Step,
            "exponential" => ScheduleName::Exponential,
            "one-cycle" => ScheduleName::OneCycle,
            "constant-cooldown" => ScheduleName::ConstantCooldown,
            other => return Err(Error::Config(format!("unknown schedule `{other}`"))),
        })
    }

    fn name(self) -> &'static str {
        match self {
            ScheduleName::Constant => "constant",
            ScheduleName::Wsd => "wsd",
            ScheduleName::Linear => "linear",
            ScheduleName::Cosine => "cosine",
            ScheduleName::Step => "step",
            ScheduleName::Exponential => "exponential",
            ScheduleName::OneCycle => "one-cycle",
            ScheduleName::ConstantCooldown => "constant-cooldown",
        }
    }
}

/// Schedule parameters in steps. The horizon defaults to the run length.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleName,
    pub total: Option<u64>,
    pub warmup: u64,
    /// Cooldown length; `None` means a fifth of the horizon.
    pub cooldown: Option<u64>,
    pub shape: CooldownShape,
    pub min_lr: f64,
    pub period: u64,
    pub factor: f64,
    pub rate: f64,
    pub peak_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleName::Constant,
            total: None,
            warmup: 0,
            cooldown: None,
            shape: CooldownShape::Linear,
            min_lr: 0.0,
            period: 1000,
            factor: 0.1,
            rate: 1e-3,
            peak_fraction: 0.3,
        }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self, max_lr: f64, run_steps: u64) -> Result<ScheduleSpec> {
        let total = self.total.unwrap_or(run_steps).max(1);
        let cooldown = self.cooldown.unwrap_or(total / 5).min(total);
        let kind = match self.kind {
            ScheduleName::Constant => ScheduleKind::Constant,
            ScheduleName::Wsd => ScheduleKind::WarmupStableDecay {
                warmup: self.warmup,
                stable_end: total.saturating_sub(cooldown),
                total,
                shape: self.shape,
            },
            ScheduleName::Linear => ScheduleKind::LinearDecay { total },
            ScheduleName::Cosine => ScheduleKind::Cosine {
                total,
                min_lr: self.min_lr,
            },
            ScheduleName::Step => ScheduleKind::Step {
                period: self.period,
                factor: self.factor,
            },
            ScheduleName::Exponential => ScheduleKind::Exponential { rate: self.rate },
            ScheduleName::OneCycle => ScheduleKind::OneCycle {
                total,
                peak_fraction: self.peak_fraction,
            },
            ScheduleName::ConstantCooldown => ScheduleKind::ConstantCooldown { cooldown, total },
        };
        ScheduleSpec::new(kind, max_lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AveragingSpec {
    None,
    Ema { beta: f64, bias_correct: bool },
    Bema(BemaConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// CIFAR-10 when present in `data.dir`, otherwise the synthetic task.
    Auto,
    Synthetic,
    Cifar10,
    /// A file written by the `project` subcommand.
    Projected,
}

impl DataSource {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => DataSource::Auto,
            "synthetic" => DataSource::Synthetic,
            "cifar10" => DataSource::Cifar10,
            "projected" => DataSource::Projected,
            other => return Err(Error::Config(format!("unknown data source `{other}`"))),
        })
    }

    fn name(self) -> &'static str {
        match self {
            DataSource::Auto => "auto",
            DataSource::Synthetic => "synthetic",
            DataSource::Cifar10 => "cifar10",
            DataSource::Projected => "projected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    pub projection_dim: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub condition: f64,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RosenbrockConfig {
    pub optimizers: Vec<OptimizerSpec>,
    pub steps: u64,
    pub starts: Vec<(f64, f64)>,
}

/// Default starts: the reference point plus three fixed points around the
/// valley.
pub const ROSENBROCK_STARTS: [(f64, f64); 4] = [(1.5, 2.5), (-1.5, 2.0), (-0.5, -0.5), (0.5, 1.5)];

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub factors: Vec<f64>,
    pub periods: Vec<u64>,
    pub lrs: Vec<f64>,
    pub duration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub optimizers: Vec<String>,
    pub lrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasVarianceConfig {
    pub pre_epochs: usize,
    pub cooldown_epochs: usize,
    pub reference_epochs: usize,
    pub shapes: Vec<CooldownShape>,
    /// One permutation seed per cooldown run.
    pub permutation_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub save_weights: bool,
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleConfig,
    pub weight_decay: WeightDecaySpec,
    pub spike: Option<SpikeSpec>,
    pub averaging: AveragingSpec,
    pub hidden: Vec<usize>,
    pub data: DataConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub rosenbrock: RosenbrockConfig,
    pub grid: GridConfig,
    pub sweep: SweepConfig,
    pub bias_variance: BiasVarianceConfig,
}

/// Default learning rate per optimizer on the Rosenbrock function.
pub fn rosenbrock_default_lr(name: &str) -> f64 {
    match name {
        "sgd" | "heavy-ball" | "nesterov" => 1e-3,
        "prodigy" => 1.0,
        _ => 1e-2,
    }
}

impl ExperimentConfig {
    /// Defaults for `experiment` with the given seed.
    pub fn defaults(experiment: ExperimentKind, seed: u64) -> Self {
        let rosenbrock_names = ["sgd", "adamw", "shampoo", "prodigy"];
        ExperimentConfig {
            experiment,
            seed,
            output_dir: PathBuf::from("runs").join(experiment.name()),
            save_weights: true,
            optimizer: OptimizerSpec::new("adamw", 1e-3),
            schedule: ScheduleConfig::default(),
            weight_decay: WeightDecaySpec {
                base: 0.0,
                scheduled: false,
            },
            spike: None,
            averaging: AveragingSpec::None,
            hidden: vec![256, 256],
            data: DataConfig {
                source: DataSource::Auto,
                dir: None,
                projection_dim: 256,
                seed,
                n_train: 10_000,
                n_test: 2_000,
                condition: 100.0,
                classes: 10,
            },
            epochs: 10,
            batch_size: 128,
            rosenbrock: RosenbrockConfig {
                optimizers: rosenbrock_names
                    .iter()
                    .map(|n| OptimizerSpec::new(n, rosenbrock_default_lr(n)))
                    .collect(),
                steps: 500,
                starts: ROSENBROCK_STARTS.to_vec(),
            },
            grid: GridConfig {
                factors: vec![1.0, 3.0, 10.0],
                periods: vec![10, 20, 50],
                lrs: vec![1e-4, 1e-3],
                duration: 1,
            },
            sweep: SweepConfig {
                optimizers: vec![],
                lrs: vec![1e-4, 3e-4, 1e-3, 3e-3],
            },
            bias_variance: BiasVarianceConfig {
                pre_epochs: 2,
                cooldown_epochs: 1,
                reference_epochs: 4,
                shapes: vec![CooldownShape::Linear, CooldownShape::Sqrt],
                permutation_seeds: vec![1, 2, 3, 4],
            },
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses a configuration document. `experiment` and `seed` are required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = parse_document(text)?;
        let experiment = ExperimentKind::parse(&doc.take_required("experiment")?)?;
        let seed: u64 = parse_value("seed", &doc.take_required("seed")?)?;
        let mut cfg = ExperimentConfig::defaults(experiment, seed);

        if let Some(v) = doc.take("output.dir") {
            cfg.output_dir = PathBuf::from(v);
        }
        doc.set("output.save_weights", &mut cfg.save_weights)?;

        if let Some(v) = doc.take("optimizer.name") {
            cfg.optimizer.name = v;
        }
        doc.set("optimizer.lr", &mut cfg.optimizer.lr)?;
        for key in doc.keys_with_prefix("optimizer.") {
            let value = doc.take(&key).expect("key listed above");
            cfg.optimizer.params.insert(key["optimizer.".len()..].to_string(), value);
        }
        cfg.optimizer.algorithm()?;

        let s = &mut cfg.schedule;
        if let Some(v) = doc.take("schedule.kind") {
            s.kind = ScheduleName::parse(&v)?;
        }
        if let Some(v) = doc.take("schedule.total") {
            s.total = Some(parse_value("schedule.total", &v)?);
        }
        doc.set("schedule.warmup", &mut s.warmup)?;
        if let Some(v) = doc.take("schedule.cooldown") {
            s.cooldown = Some(parse_value("schedule.cooldown", &v)?);
        }
        if let Some(v) = doc.take("schedule.shape") {
            s.shape = CooldownShape::parse(&v)?;
        }
        doc.set("schedule.min_lr", &mut s.min_lr)?;
        doc.set("schedule.period", &mut s.period)?;
        doc.set("schedule.factor", &mut s.factor)?;
        doc.set("schedule.rate", &mut s.rate)?;
        doc.set("schedule.peak_fraction", &mut s.peak_fraction)?;

        doc.set("weight_decay.base", &mut cfg.weight_decay.base)?;
        doc.set("weight_decay.scheduled", &mut cfg.weight_decay.scheduled)?;
        if !(cfg.weight_decay.base >= 0.0) {
            return Err(Error::Config("weight_decay.base must be nonnegative".into()));
        }

        if doc.has_prefix("spike.") {
            let (mut period, mut factor, mut duration) = (0u64, 1.0f64, 1u64);
            doc.set("spike.period", &mut period)?;
            doc.set("spike.factor", &mut factor)?;
            doc.set("spike.duration", &mut duration)?;
            cfg.spike = Some(SpikeSpec::new(period, factor, duration)?);
        }

        let kind = doc.take("averaging.kind").unwrap_or_else(|| "none".into());
        cfg.averaging = match kind.as_str() {
            "none" => AveragingSpec::None,
            "ema" => {
                let (mut beta, mut bias_correct) = (0.999, true);
                doc.set("averaging.beta", &mut beta)?;
                doc.set("averaging.bias_correct", &mut bias_correct)?;
                if !(0.0..1.0).contains(&beta) {
                    return Err(Error::Config("averaging.beta must lie in [0, 1)".into()));
                }
                AveragingSpec::Ema { beta, bias_correct }
            }
            "bema" => {
                let mut b = BemaConfig::default();
                doc.set("averaging.bias_power", &mut b.bias_power)?;
                doc.set("averaging.ema_power", &mut b.ema_power)?;
                doc.set("averaging.lag", &mut b.lag)?;
                doc.set("averaging.multiplier", &mut b.multiplier)?;
                doc.set("averaging.burn_in", &mut b.burn_in)?;
                doc.set("averaging.frequency", &mut b.frequency)?;
                if !(b.lag > 0.0 && b.multiplier > 0.0 && b.frequency >= 1) {
                    return Err(Error::Config("averaging.lag, multiplier and frequency must be positive".into()));
                }
                AveragingSpec::Bema(b)
            }
            other => return Err(Error::Config(format!("unknown averaging `{other}`"))),
        };

        if let Some(v) = doc.take("model.hidden") {
            cfg.hidden = if v.trim().is_empty() { vec![] } else { parse_list("model.hidden", &v)? };
        }

        let d = &mut cfg.data;
        if let Some(v) = doc.take("data.source") {
            d.source = DataSource::parse(&v)?;
        }
        if let Some(v) = doc.take("data.dir") {
            d.dir = Some(PathBuf::from(v));
        }
        doc.set("data.projection_dim", &mut d.projection_dim)?;
        doc.set("data.seed", &mut d.seed)?;
        doc.set("data.n_train", &mut d.n_train)?;
        doc.set("data.n_test", &mut d.n_test)?;
        doc.set("data.condition", &mut d.condition)?;
        doc.set("data.classes", &mut d.classes)?;

        doc.set("train.epochs", &mut cfg.epochs)?;
        doc.set("train.batch_size", &mut cfg.batch_size)?;
        if cfg.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }

        let r = &mut cfg.rosenbrock;
        if let Some(v) = doc.take("rosenbrock.optimizers") {
            r.optimizers = split_list(&v)
                .into_iter()
                .map(|n| OptimizerSpec::new(n, rosenbrock_default_lr(n)))
                .collect();
        }
        for key in doc.keys_with_prefix("rosenbrock.lr.") {
            let name = &key["rosenbrock.lr.".len()..];
            let value = parse_value(&key, &doc.take(&key).expect("key listed above"))?;
            match r.optimizers.iter_mut().find(|o| o.name == name) {
                Some(o) => o.lr = value,
                None => return Err(Error::Config(format!("`{key}` names an optimizer not in rosenbrock.optimizers"))),
            }
        }
        doc.set("rosenbrock.steps", &mut r.steps)?;
        if let Some(v) = doc.take("rosenbrock.starts") {
            r.starts = split_list(&v)
                .into_iter()
                .map(|p| {
                    let (x, y) = p
                        .split_once(':')
                        .ok_or_else(|| Error::Config(format!("rosenbrock start `{p}` is not x:y")))?;
                    Ok((parse_value("rosenbrock.starts", x)?, parse_value("rosenbrock.starts", y)?))
                })
                .collect::<Result<_>>()?;
        }
        for o in &r.optimizers {
            o.algorithm()?;
        }

        let g = &mut cfg.grid;
        if let Some(v) = doc.take("grid.factors") {
            g.factors = parse_list("grid.factors", &v)?;
        }
        if let Some(v) = doc.take("grid.periods") {
            g.periods = parse_list("grid.periods", &v)?;
        }
        if let Some(v) = doc.take("grid.lrs") {
            g.lrs = parse_list("grid.lrs", &v)?;
        }
        doc.set("grid.duration", &mut g.duration)?;

        if let Some(v) = doc.take("sweep.optimizers") {
            cfg.sweep.optimizers = split_list(&v).into_iter().map(String::from).collect();
        }
        if let Some(v) = doc.take("sweep.lrs") {
            cfg.sweep.lrs = parse_list("sweep.lrs", &v)?;
        }
        for name in &cfg.sweep.optimizers {
            build_algorithm(name, &BTreeMap::new())?;
        }

        let bv = &mut cfg.bias_variance;
        doc.set("bv.pre_epochs", &mut bv.pre_epochs)?;
        doc.set("bv.cooldown_epochs", &mut bv.cooldown_epochs)?;
        doc.set("bv.reference_epochs", &mut bv.reference_epochs)?;
        if let Some(v) = doc.take("bv.shapes") {
            bv.shapes = split_list(&v).into_iter().map(CooldownShape::parse).collect::<Result<_>>()?;
        }
        if let Some(v) = doc.take("bv.permutation_seeds") {
            bv.permutation_seeds = parse_list("bv.permutation_seeds", &v)?;
        }

        doc.finish()?;
        Ok(cfg)
    }

    /// Number of optimizer steps per epoch.
    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size) as u64
    }

    /// Resolved configuration as a parseable document, with the fully
    /// resolved algorithm and schedule as trailing comments.
    pub fn echo(&self, run_steps: u64) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("experiment", self.experiment.name().into());
        line("seed", self.seed.to_string());
        line("output.dir", self.output_dir.display().to_string());
        line("output.save_weights", self.save_weights.to_string());
        line("optimizer.name", self.optimizer.name.clone());
        line("optimizer.lr", self.optimizer.lr.to_string());
        for (k, v) in &self.optimizer.params {
            line(&format!("optimizer.{k}"), v.clone());
        }
        let s = &self.schedule;
        line("schedule.kind", s.kind.name().into());
        if let Some(t) = s.total {
            line("schedule.total", t.to_string());
        }
        line("schedule.warmup", s.warmup.to_string());
        if let Some(c) = s.cooldown {
            line("schedule.cooldown", c.to_string());
        }
        line("schedule.shape", s.shape.name().into());
        line("schedule.min_lr", s.min_lr.to_string());
        line("schedule.period", s.period.to_string());
        line("schedule.factor", s.factor.to_string());
        line("schedule.rate", s.rate.to_string());
        line("schedule.peak_fraction", s.peak_fraction.to_string());
        line("weight_decay.base", self.weight_decay.base.to_string());
        line("weight_decay.scheduled", self.weight_decay.scheduled.to_string());
        if let Some(sp) = &self.spike {
            line("spike.period", sp.period.to_string());
            line("spike.factor", sp.factor.to_string());
            line("spike.duration", sp.duration.to_string());
        }
        match self.averaging {
            AveragingSpec::None => line("averaging.kind", "none".into()),
            AveragingSpec::Ema { beta, bias_correct } => {
                line("averaging.kind", "ema".into());
                line("averaging.beta", beta.to_string());
                line("averaging.bias_correct", bias_correct.to_string());
            }
            AveragingSpec::Bema(b) => {
                line("averaging.kind", "bema".into());
                line("averaging.bias_power", b.bias_power.to_string());
                line("averaging.ema_power", b.ema_power.to_string());
                line("averaging.lag", b.lag.to_string());
                line("averaging.multiplier", b.multiplier.to_string());
                line("averaging.burn_in", b.burn_in.to_string());
                line("averaging.frequency", b.frequency.to_string());
            }
        }
        line("model.hidden", join(&self.hidden));
        let d = &self.data;
        line("data.source", d.source.name().into());
        if let Some(dir) = &d.dir {
            line("data.dir", dir.display().to_string());
        }
        line("data.projection_dim", d.projection_dim.to_string());
        line("data.seed", d.seed.to_string());
        line("data.n_train", d.n_train.to_string());
        line("data.n_test", d.n_test.to_string());
        line("data.condition", d.condition.to_string());
        line("data.classes", d.classes.to_string());
        line("train.epochs", self.epochs.to_string());
        line("train.batch_size", self.batch_size.to_string());
        match self.experiment {
            ExperimentKind::Rosenbrock => {
                let r = &self.rosenbrock;
                line("rosenbrock.optimizers", r.optimizers.iter().map(|o| o.name.clone()).collect::<Vec<_>>().join(","));
                for o in &r.optimizers {
                    line(&format!("rosenbrock.lr.{}", o.name), o.lr.to_string());
                }
                line("rosenbrock.steps", r.steps.to_string());
                line(
                    "rosenbrock.starts",
                    r.starts.iter().map(|(x, y)| format!("{x}:{y}")).collect::<Vec<_>>().join(","),
                );
            }
            ExperimentKind::SpikeGrid => {
                line("grid.factors", join(&self.grid.factors));
                line("grid.periods", join(&self.grid.periods));
                line("grid.lrs", join(&self.grid.lrs));
                line("grid.duration", self.grid.duration.to_string());
            }
            ExperimentKind::Sweep => {
                line("sweep.optimizers", self.sweep.optimizers.join(","));
                line("sweep.lrs", join(&self.sweep.lrs));
            }
            ExperimentKind::BiasVariance => {
                let bv = &self.bias_variance;
                line("bv.pre_epochs", bv.pre_epochs.to_string());
                line("bv.cooldown_epochs", bv.cooldown_epochs.to_string());
                line("bv.reference_epochs", bv.reference_epochs.to_string());
                line("bv.shapes", bv.shapes.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));
                line("bv.permutation_seeds", join(&bv.permutation_seeds));
            }
            ExperimentKind::Train => {}
        }
        if self.experiment != ExperimentKind::Rosenbrock {
            match self.optimizer.algorithm() {
                Ok(alg) => {
                    let _ = writeln!(out, "# resolved algorithm: {alg:?}");
                }
                Err(e) => {
                    let _ = writeln!(out, "# unresolved algorithm: {e}");
                }
            }
            match self.schedule.resolve(self.optimizer.lr, run_steps) {
                Ok(spec) => {
                    let _ = writeln!(out, "# resolved schedule: {spec:?}");
                }
                Err(e) => {
                    let _ = writeln!(out, "# unresolved schedule: {e}");
                }
            }
        }
        out
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    split_list(v).into_iter().map(|x| parse_value(key, x)).collect()
}

struct Document {
    entries: BTreeMap<String, (usize, String)>,
}

fn parse_document(text: &str) -> Result<Document> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        let valid = !key.is_empty()
            && key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '.' | '_' | '-'));
        if !valid {
            return Err(Error::Config(format!("line {}: invalid key `{key}`", i + 1)));
        }
        let mut value = value.trim();
        if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
            value = &value[1..value.len() - 1];
        }
        if entries.insert(key.to_string(), (i + 1, value.to_string())).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(Document { entries })
}

impl Document {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    fn take_required(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = parse_value(key, &v)?;
        }
        Ok(())
    }

    fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
            None => Ok(()),
        }
    }
}

/// Resolves an optimizer name and hyperparameter overrides. Keys that the
/// named algorithm does not use are errors.
pub fn build_algorithm(name: &str, params: &BTreeMap<String, String>) -> Result<Algorithm> {
    let mut alg = Algorithm::from_name(name)?;
    let mut used: Vec<&str> = Vec::new();
    {
        let mut get = |key: &'static str| -> Option<&String> {
            let v = params.get(key);
            if v.is_some() {
                used.push(key);
            }
            v
        };
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = get($key) {
                    $slot = parse_value(concat!("optimizer.", $key), v)?;
                }
            };
        }
        match &mut alg {
            Algorithm::Sgd(c) => {
                field!("momentum", c.momentum);
                if c.variant != SgdVariant::Plain && c.momentum == 0.0 {
                    c.variant = SgdVariant::Plain;
                }
            }
            Algorithm::DualAveraging => {}
            Algorithm::AdaGrad(c) => field!("eps", c.eps),
            Algorithm::RmsProp(c) => {
                field!("beta2", c.beta2);
                field!("eps", c.eps);
            }
            Algorithm::Adam(c) => {
                field!("beta1", c.beta1);
                field!("beta2", c.beta2);
                field!("eps", c.eps);
                if let Some(v) = get("decay") {
                    c.decay = match v.as_str() {
                        "none" => DecayMode::None,
                        "coupled" => DecayMode::CoupledL2,
                        "decoupled" => DecayMode::Decoupled,
                        other => return Err(Error::Config(format!("unknown optimizer.decay `{other}`"))),
                    };
                }
            }
            Algorithm::SignSgd(c) => field!("beta1", c.beta1),
            Algorithm::Prodigy { initial_step } => field!("initial_step", *initial_step),
            Algorithm::Kfac(c) => {
                field!("beta2", c.beta2);
                field!("damping", c.damping);
                field!("period", c.inverse_period);
                field!("bias_correct", c.bias_correct);
                let (mut pa, mut ps) = (c.pi_a(), c.pi_s());
                field!("pi_a", pa);
                field!("pi_s", ps);
                *c = c.with_factored_damping(pa, ps)?;
            }
            Algorithm::Ekfac(c) => {
                field!("beta2", c.beta2);
                field!("damping", c.damping);
                field!("period", c.eigen_period);
                field!("bias_correct", c.bias_correct);
            }
            Algorithm::Shampoo(c) => {
                field!("beta2", c.beta2);
                field!("damping", c.damping);
                field!("exponent", c.exponent);
                field!("period", c.precond_period);
                field!("bias_correct", c.bias_correct);
            }
            Algorithm::Soap(c) => {
                field!("beta2", c.beta2);
                field!("eps", c.eps);
                field!("period", c.precond_period);
                field!("bias_correct", c.bias_correct);
                if let Some(v) = get("beta1") {
                    let b: f64 = parse_value("optimizer.beta1", v)?;
                    c.momentum = (b > 0.0).then_some(b);
                }
            }
            Algorithm::Splus(c) => {
                field!("beta2", c.beta2);
                field!("period", c.precond_period);
                field!("averaging", c.averaging);
            }
            Algorithm::Muon(c) => {
                field!("beta1", c.beta1);
                field!("ns_steps", c.ns_steps);
            }
            Algorithm::Sophia(c) => {
                field!("beta1", c.beta1);
                field!("beta2", c.beta2);
                field!("eps", c.eps);
                field!("clip", c.clip);
                field!("period", c.hessian_period);
                if let Some(v) = get("estimator") {
                    c.estimator = match v.as_str() {
                        "gnb" => HessianEstimator::GaussNewtonBartlett,
                        "hutchinson" => HessianEstimator::Hutchinson,
                        other => return Err(Error::Config(format!("unknown optimizer.estimator `{other}`"))),
                    };
                }
            }
            Algorithm::Modular(opts) => {
                if let Some(v) = get("mode") {
                    opts.mode = match v.as_str() {
                        "normalized" => ModularMode::Normalized,
                        "theorem" => ModularMode::Theorem,
                        other => return Err(Error::Config(format!("unknown optimizer.mode `{other}`"))),
                    };
                }
                if let Some(v) = get("norm") {
                    *opts = modular_norm_options(opts.mode, v)?;
                }
            }
        }
    }
    if let Some(unused) = params.keys().find(|k| !used.contains(&k.as_str())) {
        return Err(Error::Config(format!("`optimizer.{unused}` does not apply to `{name}`")));
    }
    Ok(alg)
}

/// `default` keeps the per-shape assignment; `max-of-max`, `spectral` and
/// `euclid` apply one norm to every block; the block list is filled in when
/// the model is known.
fn modular_norm_options(mode: ModularMode, norm: &str) -> Result<ModularOptions> {
    let kind = match norm {
        "default" => return Ok(ModularOptions { mode, norms: None }),
        "max-of-max" => NormKind::MaxOfMax,
        "spectral" => NormKind::Spectral,
        "euclid" => NormKind::Euclid,
        other => return Err(Error::Config(format!("unknown optimizer.norm `{other}`"))),
    };
    Ok(ModularOptions {
        mode,
        norms: Some(vec![BlockNorm { norm: kind, weight: 1.0 }]),
    })
}

/// Expands a single-entry norm list to one entry per block.
pub fn expand_modular_norms(alg: Algorithm, blocks: usize) -> Algorithm {
    match alg {
        Algorithm::Modular(ModularOptions {
            mode,
            norms: Some(norms),
        }) if norms.len() == 1 && blocks != 1 => Algorithm::Modular(ModularOptions {
            mode,
            norms: Some(vec![norms[0]; blocks]),
        }),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_uses_defaults() {
        let cfg = ExperimentConfig::parse("experiment = train\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.seed, 7);
        assert_eq!(cfg.optimizer.name, "adamw");
    }

    #[test]
    fn seed_is_required() {
        let err = ExperimentConfig::parse("experiment = train\n").unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("experiment = train\nseed = 1\nschedule.kidn = wsd\n").unwrap_err();
        assert!(err.to_string().contains("schedule.kidn"), "{err}");
        let err = ExperimentConfig::parse("experiment = train\nseed = 1\noptimizer.damping = 1\n").unwrap_err();
        assert!(err.to_string().contains("damping"), "{err}");
    }

    #[test]
    fn hyperparameters_reach_the_algorithm() {
        let text = "experiment = train\nseed = 1\noptimizer.name = kfac\noptimizer.damping = 0.01\noptimizer.period = 5\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        match cfg.optimizer.algorithm().unwrap() {
            Algorithm::Kfac(c) => {
                assert_eq!(c.damping, 0.01);
                assert_eq!(c.inverse_period, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn echo_round_trips() {
        let text = "experiment = train\nseed = 3\noptimizer.name = soap\noptimizer.beta1 = 0.9\nschedule.kind = wsd\n\
                    spike.period = 20\nspike.factor = 3\naveraging.kind = bema\nmodel.hidden = 16,8\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&cfg.echo(100)).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn malformed_lines_and_duplicates_fail() {
        assert!(ExperimentConfig::parse("experiment = train\nseed = 1\njunk\n").is_err());
        assert!(ExperimentConfig::parse("experiment = train\nseed = 1\nseed = 2\n").is_err());
        assert!(ExperimentConfig::parse("experiment = train\nseed = x\n").is_err());
        assert!(ExperimentConfig::parse("experiment = fly\nseed = 1\n").is_err());
    }
}
