//! Training loop and the six training strategies: ST, AT, ST_FT, ST_AFT,
//! AT_FT and AT_AFT.

mod cache;
mod sampler;

use std::fmt;
use std::str::FromStr;

use crate::attack::{pgd_perturb, PerturbationBudget};
use crate::datagen::{check_source_ratio, mix_seed, Dataset};
use crate::error::{Error, Result};
use crate::model::{MicroResNet, Mode, Provenance, DEFAULT_WIDTHS, NUM_BLOCKS};
use crate::tensor::{Graph, Scalar, ScalarMode, Tensor};

pub use cache::{source_provenance, CacheOutcome, PretrainCache, SourceKind};
pub use sampler::{make_balanced_sampler, BalancedSampler};

pub const DIRECT_LR: f64 = 0.1;
pub const FINETUNE_LR: f64 = 0.005;
pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_FROZEN_PREFIX: usize = 1;
pub const ST_AFT_TARGET_EPS: f64 = 0.05;

/// Linearly decayed learning rate `lr0 * (1 - e / E)` for epoch `e` of `E`.
pub fn lr_at(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    lr0 * (1.0 - epoch as f64 / epochs as f64)
}

/// `theta -= lr * grad` for every trainable tensor holding a gradient.
/// Frozen tensors are skipped even if a gradient is present.
pub fn sgd_step<'a, T, I>(params: I, lr: f64) -> Result<()>
where
    T: Scalar,
    I: IntoIterator<Item = (String, &'a mut Tensor<T>)>,
{
    let lr = T::from_f64(lr);
    for (name, t) in params {
        if !t.requires_grad {
            continue;
        }
        let Some(grad) = t.grad.take() else { continue };
        if grad.iter().any(|g| g.is_nan()) {
            return Err(Error::Divergence {
                detail: format!("NaN gradient in {name}"),
                trace: Vec::new(),
            });
        }
        for (v, g) in t.values_mut().iter_mut().zip(&grad) {
            *v = *v - lr * *g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: ScalarMode,
}

impl TrainConfig {
    /// Training from scratch: 30 epochs, lr 0.1.
    pub fn direct(seed: u64) -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            lr0: DIRECT_LR,
            batch_size: DEFAULT_BATCH,
            seed,
            precision: ScalarMode::Single,
        }
    }

    /// Transfer-learning refinement: 30 epochs, lr 0.005.
    pub fn finetune(seed: u64) -> Self {
        Self {
            lr0: FINETUNE_LR,
            ..Self::direct(seed)
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseName {
    Train,
    AdvTrain,
    Finetune,
    AdvFinetune,
}

impl PhaseName {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseName::Train => "train",
            PhaseName::AdvTrain => "adv-train",
            PhaseName::Finetune => "finetune",
            PhaseName::AdvFinetune => "adv-finetune",
        }
    }
}

impl FromStr for PhaseName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PhaseName::Train, PhaseName::AdvTrain, PhaseName::Finetune, PhaseName::AdvFinetune]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown phase '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::config(format!("unknown domain '{other}'"))),
        }
    }
}

/// One completed (or failed) training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRecord {
    pub phase: PhaseName,
    pub domain: Domain,
    pub adversarial: bool,
    pub epsilon: f64,
    pub frozen_prefix: usize,
    pub epochs: usize,
    /// Mean loss and accuracy over the batches of the last epoch.
    pub final_loss: f64,
    pub final_acc: f64,
}

pub const TRACE_HEADER: &str = "phase\tdomain\tadversarial\tepsilon\tL\tepochs\tfinal_loss\tfinal_acc";

impl PhaseRecord {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.phase.as_str(),
            self.domain.as_str(),
            self.adversarial,
            self.epsilon,
            self.frozen_prefix,
            self.epochs,
            self.final_loss,
            self.final_acc
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::config(format!("trace line needs 8 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::config(format!("bad number '{s}': {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::config(format!("bad integer '{s}': {e}")));
        Ok(Self {
            phase: f[0].parse()?,
            domain: f[1].parse()?,
            adversarial: f[2].parse().map_err(|_| Error::config(format!("bad flag '{}'", f[2])))?,
            epsilon: num(f[3])?,
            frozen_prefix: int(f[4])?,
            epochs: int(f[5])?,
            final_loss: num(f[6])?,
            final_acc: num(f[7])?,
        })
    }

    fn write_provenance(&self, p: &mut Provenance) {
        p.set("phase.name", self.phase.as_str())
            .set("phase.domain", self.domain.as_str())
            .set("phase.adversarial", self.adversarial)
            .set("phase.epsilon", self.epsilon)
            .set("phase.L", self.frozen_prefix)
            .set("phase.epochs", self.epochs)
            .set("phase.final_loss", self.final_loss)
            .set("phase.final_acc", self.final_acc);
    }

    fn read_provenance(p: &Provenance) -> Result<Self> {
        let get = |k: &str| p.get(k).ok_or_else(|| Error::config(format!("provenance lacks '{k}'")));
        let line = [
            "phase.name",
            "phase.domain",
            "phase.adversarial",
            "phase.epsilon",
            "phase.L",
            "phase.epochs",
            "phase.final_loss",
            "phase.final_acc",
        ]
        .iter()
        .map(|k| get(k))
        .collect::<Result<Vec<_>>>()?
        .join("\t");
        Self::from_tsv(&line)
    }
}

/// Ordered phase records of one strategy run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub phases: Vec<PhaseRecord>,
}

impl RunTrace {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for p in &self.phases {
            out.push_str(&p.to_tsv());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(Error::config("run trace lacks its header line"));
        }
        let phases = lines.filter(|l| !l.is_empty()).map(PhaseRecord::from_tsv).collect::<Result<_>>()?;
        Ok(Self { phases })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    St,
    At,
    StFt,
    StAft,
    AtFt,
    AtAft,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::St,
        StrategyKind::At,
        StrategyKind::StFt,
        StrategyKind::StAft,
        StrategyKind::AtFt,
        StrategyKind::AtAft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::St => "ST",
            StrategyKind::At => "AT",
            StrategyKind::StFt => "ST_FT",
            StrategyKind::StAft => "ST_AFT",
            StrategyKind::AtFt => "AT_FT",
            StrategyKind::AtAft => "AT_AFT",
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            StrategyKind::St => "st",
            StrategyKind::At => "at",
            StrategyKind::StFt => "st-ft",
            StrategyKind::StAft => "st-aft",
            StrategyKind::AtFt => "at-ft",
            StrategyKind::AtAft => "at-aft",
        }
    }

    pub fn is_transfer(self) -> bool {
        !matches!(self, StrategyKind::St | StrategyKind::At)
    }

    pub fn adversarial_source(self) -> bool {
        matches!(self, StrategyKind::AtFt | StrategyKind::AtAft)
    }

    pub fn adversarial_target(self) -> bool {
        matches!(self, StrategyKind::At | StrategyKind::StAft | StrategyKind::AtAft)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.cli_name() == s || k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub source_budget: Option<PerturbationBudget>,
    pub target_budget: Option<PerturbationBudget>,
    pub frozen_prefix: usize,
}

impl StrategySpec {
    /// Builds a spec with l2 PGD budgets, keeping only the budgets the kind uses.
    ///
    /// When `eps_t` is absent it defaults to `eps_s`, except for ST_AFT
    /// where it defaults to 0.05.
    pub fn resolve(kind: StrategyKind, eps_s: Option<f64>, eps_t: Option<f64>, frozen_prefix: usize) -> Self {
        let eps_t = eps_t.or(match kind {
            StrategyKind::StAft => Some(ST_AFT_TARGET_EPS),
            _ => eps_s,
        });
        Self {
            kind,
            source_budget: eps_s.filter(|_| kind.adversarial_source()).map(PerturbationBudget::l2),
            target_budget: eps_t.filter(|_| kind.adversarial_target()).map(PerturbationBudget::l2),
            frozen_prefix,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.adversarial_source() && self.source_budget.is_none() {
            return Err(Error::config(format!("{} needs a source budget (eps_s)", self.kind)));
        }
        if self.kind.adversarial_target() && self.target_budget.is_none() {
            return Err(Error::config(format!("{} needs a target budget (eps_t)", self.kind)));
        }
        for b in self.source_budget.iter().chain(&self.target_budget) {
            b.validate()?;
        }
        if self.kind.is_transfer() && self.frozen_prefix > NUM_BLOCKS {
            return Err(Error::config(format!(
                "frozen prefix must be in 0..={NUM_BLOCKS}, got {}",
                self.frozen_prefix
            )));
        }
        Ok(())
    }

    pub fn source_kind(&self) -> Option<SourceKind> {
        match self.kind {
            StrategyKind::St | StrategyKind::At => None,
            StrategyKind::StFt | StrategyKind::StAft => Some(SourceKind::Standard),
            StrategyKind::AtFt | StrategyKind::AtAft => Some(SourceKind::Adversarial),
        }
    }
}

/// Everything a run needs besides the spec and data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub widths: [usize; NUM_BLOCKS],
    /// Source-domain phase of transfer strategies.
    pub source: TrainConfig,
    /// Target-domain training from scratch (ST, AT).
    pub direct: TrainConfig,
    /// Target-domain refinement of transfer strategies.
    pub finetune: TrainConfig,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            widths: DEFAULT_WIDTHS,
            source: TrainConfig::direct(seed),
            direct: TrainConfig::direct(seed),
            finetune: TrainConfig::finetune(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config(format!("block widths must be positive, got {:?}", self.widths)));
        }
        self.source.validate()?;
        self.direct.validate()?;
        self.finetune.validate()
    }
}

/// Seed of the attack on batch `batch` of epoch `epoch`.
pub fn attack_seed(run_seed: u64, epoch: usize, batch: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(run_seed, 0xa77a_c4), epoch as u64), batch as u64)
}

/// What a training phase is, for its record.
#[derive(Debug, Clone, Copy)]
pub struct PhaseInfo {
    pub phase: PhaseName,
    pub domain: Domain,
}

/// Runs `config.epochs` epochs of balanced-sampled SGD on `dataset`.
///
/// Each epoch draws `len(dataset)` samples with replacement. With an
/// adversarial budget every batch is replaced by its PGD perturbation
/// (computed in eval mode) before the train-mode loss. There is no early
/// stopping: the model after the last epoch is kept.
pub fn train<T: Scalar>(
    model: &mut MicroResNet<T>,
    dataset: &Dataset,
    config: &TrainConfig,
    adversarial: Option<&PerturbationBudget>,
    info: PhaseInfo,
) -> Result<PhaseRecord> {
    config.validate()?;
    if let Some(b) = adversarial {
        b.validate()?;
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes but the model head has {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let mut sampler = BalancedSampler::new(&dataset.labels(), dataset.num_classes(), mix_seed(config.seed, 0x5a3f))?;
    let mut record = PhaseRecord {
        phase: info.phase,
        domain: info.domain,
        adversarial: adversarial.is_some(),
        epsilon: adversarial.map_or(0.0, |b| b.epsilon),
        frozen_prefix: model.frozen_prefix(),
        epochs: config.epochs,
        final_loss: f64::NAN,
        final_acc: f64::NAN,
    };
    let n = dataset.len();
    for epoch in 0..config.epochs {
        let lr = lr_at(config.lr0, epoch, config.epochs);
        let order = sampler.draw(n);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (mut x, labels) = dataset.batch::<T>(idx);
            if let Some(budget) = adversarial {
                x = pgd_perturb(model, &x, &labels, budget, attack_seed(config.seed, epoch, b))?;
            }
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let pass = model.forward(&mut g, xv, Mode::Train, true)?;
            let loss_var = g.softmax_cross_entropy(pass.logits, &labels)?;
            let loss = g.value(loss_var).values()[0].as_f64();
            if !loss.is_finite() {
                record.final_loss = loss;
                return Err(Error::Divergence {
                    detail: format!("non-finite loss at epoch {epoch}, batch {b}"),
                    trace: vec![record],
                });
            }
            loss_sum += loss * idx.len() as f64;
            correct += count_correct(g.value(pass.logits), &labels);
            let mut grads = g.backward(loss_var)?;
            model.collect_gradients(&pass, &mut grads);
            model.commit_batch_stats(&pass);
            sgd_step(model.named_parameters_mut(), lr).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence {
                    detail: format!("{detail} at epoch {epoch}, batch {b}"),
                    trace: vec![record.clone()],
                },
                other => other,
            })?;
        }
        record.final_loss = loss_sum / n as f64;
        record.final_acc = correct as f64 / n as f64;
    }
    Ok(record)
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.dims()[1];
    logits
        .values()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Where a transfer strategy gets its source model from.
pub enum SourceInput<'a, T> {
    /// Train the source phase in this run.
    Dataset(&'a Dataset),
    /// A model already trained on the source domain, with its phase record.
    Pretrained(MicroResNet<T>, PhaseRecord),
    /// No source domain (ST and AT only).
    None,
}

/// Trains the source-domain model of a transfer strategy.
pub fn train_source<T: Scalar>(
    source: &Dataset,
    kind: SourceKind,
    budget: Option<&PerturbationBudget>,
    config: &RunConfig,
) -> Result<(MicroResNet<T>, PhaseRecord)> {
    check_precision::<T>(&config.source)?;
    let mut model = MicroResNet::build(&config.widths, source.num_classes(), config.source.seed)?;
    let (phase, budget) = match kind {
        SourceKind::Standard => (PhaseName::Train, None),
        SourceKind::Adversarial => (
            PhaseName::AdvTrain,
            Some(budget.ok_or_else(|| Error::config("adversarial source training needs eps_s"))?),
        ),
    };
    let info = PhaseInfo {
        phase,
        domain: Domain::Source,
    };
    let record = train(&mut model, source, &config.source, budget, info)?;
    Ok((model, record))
}

fn check_precision<T: Scalar>(config: &TrainConfig) -> Result<()> {
    if config.precision != T::MODE {
        return Err(Error::config(format!(
            "configured precision {} but running in {}",
            config.precision,
            T::MODE
        )));
    }
    Ok(())
}

/// Executes the phase sequence of `spec.kind` and records it.
///
/// ST trains on the target from scratch, AT does the same adversarially.
/// Transfer kinds train on the source (adversarially for AT_*), freeze the
/// stem and first `L` blocks, replace the head and refine on the target
/// (adversarially for *_AFT) at the fine-tuning learning rate. All
/// configuration is validated before any training starts.
pub fn run_strategy<T: Scalar>(
    spec: &StrategySpec,
    source: SourceInput<'_, T>,
    target: &Dataset,
    config: &RunConfig,
) -> Result<(MicroResNet<T>, RunTrace)> {
    spec.validate()?;
    config.validate()?;
    for c in [&config.source, &config.direct, &config.finetune] {
        check_precision::<T>(c)?;
    }
    BalancedSampler::new(&target.labels(), target.num_classes(), 0)?;
    let target_budget = spec.target_budget.as_ref().filter(|_| spec.kind.adversarial_target());

    if !spec.kind.is_transfer() {
        let mut model = MicroResNet::build(&config.widths, target.num_classes(), config.direct.seed)?;
        let phase = if target_budget.is_some() { PhaseName::AdvTrain } else { PhaseName::Train };
        let info = PhaseInfo {
            phase,
            domain: Domain::Target,
        };
        let record = train(&mut model, target, &config.direct, target_budget, info)?;
        return Ok((model, RunTrace { phases: vec![record] }));
    }

    let kind = spec.source_kind().expect("transfer kind");
    let (mut model, source_record) = match source {
        SourceInput::Dataset(ds) => {
            check_source_ratio(ds, target)?;
            BalancedSampler::new(&ds.labels(), ds.num_classes(), 0)?;
            train_source(ds, kind, spec.source_budget.as_ref(), config)?
        }
        SourceInput::Pretrained(model, record) => {
            let expected = kind == SourceKind::Adversarial;
            let eps_s = spec.source_budget.map_or(0.0, |b| b.epsilon);
            if record.adversarial != expected || (expected && record.epsilon != eps_s) {
                return Err(Error::config(format!(
                    "pre-trained source model (adversarial={}, eps={}) does not match {}",
                    record.adversarial, record.epsilon, spec.kind
                )));
            }
            (model, record)
        }
        SourceInput::None => {
            return Err(Error::config(format!("{} needs a source dataset or model", spec.kind)));
        }
    };

    model.freeze_prefix(spec.frozen_prefix)?;
    model.replace_head(target.num_classes(), config.finetune.seed)?;
    let phase = if target_budget.is_some() { PhaseName::AdvFinetune } else { PhaseName::Finetune };
    let info = PhaseInfo {
        phase,
        domain: Domain::Target,
    };
    let target_record = train(&mut model, target, &config.finetune, target_budget, info).map_err(|e| match e {
        Error::Divergence { detail, mut trace } => {
            trace.insert(0, source_record.clone());
            Error::Divergence { detail, trace }
        }
        other => other,
    })?;
    Ok((
        model,
        RunTrace {
            phases: vec![source_record, target_record],
        },
    ))
}
