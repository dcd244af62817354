//! End-to-end pipelines behind the command line: baseline training,
//! calibration, fine-tuning after quantization, evaluation, lowering, the
//! ablation grid and the diagnostics sweep.

use std::fs;
use std::path::{Path, PathBuf};

use faq_core::calibrate::{calibrate, CalibrationReport};
use faq_core::data::{Dataset, Normalization, Split};
use faq_core::diagnostics::{network_similarity, NoiseProbe, Similarity};
use faq_core::int_infer::{int_forward, lower, quantize_input, IntegerModel};
use faq_core::models::build_model;
use faq_core::optim::{BatchPhase, LrSchedule};
use faq_core::train::{calibration_batches, evaluate, fit, quantize_for_finetune, EpochMetrics, TrainState};
use faq_core::{Network, QuantNet};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::datasets::load_dataset;
use crate::error::{Error, Result};
use crate::reports::{self, MetricsLog};

pub const EVAL_BATCH: usize = 500;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const CALIBRATION_FILE: &str = "calibration.jsonl";
pub const INTEGER_FILE: &str = "model.faqi";
pub const NOISE_FILE: &str = "noise.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    pub norm: Normalization,
}

/// Loads the splits named by `cfg.data`. Normalization constants are
/// computed from the training split when the config has none, and stored
/// back into `cfg`.
pub fn load_data(cfg: &mut RunConfig) -> Result<Data> {
    let d = &cfg.data;
    let mut train = load_dataset(&d.dir, d.kind, Split::Train)?;
    let test = load_dataset(&d.dir, d.kind, Split::Test)?;
    if let Some(n) = d.train_limit {
        train = train.slice(0..n.min(train.len()), Split::Train);
    }
    let val = if d.validation > 0 {
        if d.validation >= train.len() {
            return Err(Error::Config(format!(
                "validation size {} leaves no training data",
                d.validation
            )));
        }
        let (t, v) = train.split_validation(d.validation);
        train = t;
        Some(v)
    } else {
        None
    };
    let norm = match &cfg.data.normalization {
        Some(n) => n.clone(),
        None => {
            let n = Normalization::compute(&train);
            cfg.data.normalization = Some(n.clone());
            n
        }
    };
    norm.check(train.channels)?;
    Ok(Data { train, val, test, norm })
}

/// Creates the output directory. Existing outputs are an error unless
/// `overwrite`, in which case they are removed first.
pub fn prepare_output(dir: &Path, overwrite: bool) -> Result<()> {
    let files = [
        METRICS_FILE,
        CHECKPOINT_FILE,
        CALIBRATION_FILE,
        INTEGER_FILE,
        NOISE_FILE,
        SUMMARY_FILE,
        RESOLVED_CONFIG,
    ];
    let present: Vec<&str> = files.iter().copied().filter(|f| dir.join(f).exists()).collect();
    if !present.is_empty() && !overwrite {
        return Err(Error::Config(format!(
            "{} already holds {}; pass --overwrite to replace",
            dir.display(),
            present.join(", ")
        )));
    }
    for f in present {
        let p = dir.join(f);
        fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub test_loss: f64,
    pub test_acc: f64,
    pub epochs: usize,
    pub iterations: usize,
    /// Mean per-neuron cosine between the initial and final weights.
    pub similarity_to_init: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub summary: Summary,
    pub report: Option<CalibrationReport>,
    pub probe: Option<NoiseProbe>,
    pub integer: Option<IntegerModel>,
}

/// Where fine-tuning starts.
#[derive(Debug, Clone)]
pub enum Init {
    Pretrained(Network<f32>),
    /// Fresh He initialization from the run seed; activation ranges use
    /// the uncalibrated defaults.
    Scratch,
}

fn train_loop(cfg: &RunConfig, data: &Data, state: TrainState<f32>, init: &Network<f32>) -> Result<RunOutcome> {
    let mut state = state;
    let out = &cfg.output_dir;
    let mut log = MetricsLog::open(&out.join(METRICS_FILE))?;
    let mut probe = cfg
        .diagnostics
        .noise_probe
        .then(|| NoiseProbe::new(state.qnet.network(), cfg.diagnostics.smoothing));
    let mut log_err = None;
    let result = fit(
        &mut state,
        &data.train,
        data.val.as_ref(),
        &data.norm,
        &cfg.plan,
        probe.as_mut().map(|p| p as &mut dyn faq_core::train::StepObserver<f32>),
        &mut |m, _| {
            if let Err(e) = log.append(m) {
                log_err.get_or_insert(e);
            }
        },
    );
    if let Some(e) = log_err {
        return Err(e);
    }
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics = match result {
        Ok(m) => m,
        Err(e) => {
            // state holds the last good epoch
            Checkpoint::new(state, Some(cfg.model.clone()), data.norm.clone(), cfg.seed).save(&ckpt_path)?;
            return Err(e.into());
        }
    };
    if let Some(p) = &probe {
        reports::write_noise_csv(p, cfg.diagnostics.log_every, &out.join(NOISE_FILE))?;
    }
    let (test_loss, test_acc) = evaluate(&state.qnet, &data.test, &data.norm, EVAL_BATCH)?;
    let similarity_to_init = network_similarity(init, state.qnet.network()).ok().map(|s| s.mean);
    let summary = Summary {
        test_loss,
        test_acc,
        epochs: state.epoch,
        iterations: state.iteration,
        similarity_to_init,
        warnings: state.qnet.warnings(),
    };
    let integer = if state.qnet.is_float() {
        None
    } else {
        let m = lower(&state.qnet)?;
        crate::intfile::save(&m, &out.join(INTEGER_FILE))?;
        Some(m)
    };
    reports::write_json(&summary, &out.join(SUMMARY_FILE))?;
    let checkpoint = Checkpoint::new(state, Some(cfg.model.clone()), data.norm.clone(), cfg.seed);
    checkpoint.save(&ckpt_path)?;
    Ok(RunOutcome {
        checkpoint,
        metrics,
        summary,
        report: None,
        probe,
        integer,
    })
}

/// Float training from a fresh initialization.
pub fn train_baseline(cfg: &RunConfig, data: &Data) -> Result<RunOutcome> {
    cfg.persist()?;
    let net = build_model::<f32>(&cfg.model, cfg.seed)?;
    let init = net.clone();
    train_loop(cfg, data, TrainState::new(QuantNet::float(net)), &init)
}

/// Activation ranges of `net` on the run's calibration batches.
pub fn calibrate_network(cfg: &RunConfig, data: &Data, net: &Network<f32>) -> Result<CalibrationReport> {
    let batches = calibration_batches::<f32>(&data.train, &data.norm, &cfg.calibration, cfg.seed);
    Ok(calibrate(net, &batches, &cfg.precision.policy())?)
}

/// Calibrate (unless disabled), quantize, fine-tune, evaluate and lower.
pub fn run_faq(cfg: &RunConfig, data: &Data, init: Init) -> Result<RunOutcome> {
    cfg.persist()?;
    let (net, settings) = match init {
        Init::Pretrained(n) => (n, cfg.calibration),
        Init::Scratch => {
            let mut s = cfg.calibration;
            s.enabled = false;
            (build_model::<f32>(&cfg.model, cfg.seed)?, s)
        }
    };
    if net.architecture() != cfg.model.builder().architecture() {
        return Err(Error::Config("checkpoint architecture does not match the configured model".into()));
    }
    let start = net.clone();
    let (qnet, report) = quantize_for_finetune(net, cfg.precision.policy(), &data.train, &data.norm, &settings, cfg.seed)?;
    if let Some(r) = &report {
        reports::write_calibration(r, &cfg.output_dir.join(CALIBRATION_FILE))?;
    }
    let mut outcome = train_loop(cfg, data, TrainState::new(qnet), &start)?;
    outcome.report = report;
    Ok(outcome)
}

pub fn load_baseline(cfg: &RunConfig) -> Result<Network<f32>> {
    let p = cfg
        .baseline
        .as_ref()
        .ok_or_else(|| Error::Config("no baseline checkpoint given".into()))?;
    Ok(Checkpoint::<f32>::load(p)?.state.qnet.into_network())
}

/// Test accuracy of the integer model, computed with integer arithmetic.
pub fn integer_accuracy(model: &IntegerModel, data: &Dataset, norm: &Normalization) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(100) {
        let (x, labels) = data.batch::<f64>(chunk, norm, None);
        let codes = int_forward(model, &quantize_input(model, &x)?)?;
        correct += codes.argmax_rows().iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One change applied to the base configuration of an ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum Variation {
    Epochs { epochs: usize },
    /// Random initialization instead of the pretrained network.
    Scratch,
    BatchSchedule { phases: Vec<BatchPhase> },
    LrSchedule { base_lr: f64, schedule: LrSchedule },
    WeightDecay { weight_decay: f64 },
    Calibration { enabled: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    /// Deltas in the table are taken against the reference cell.
    #[serde(default)]
    pub reference: bool,
    #[serde(default)]
    pub variations: Vec<Variation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub base: RunConfig,
    #[serde(default)]
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut g: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        g.base.plan.seed = g.base.seed;
        g.base.validate()?;
        if g.cells.iter().filter(|c| c.reference).count() > 1 {
            return Err(Error::Config("at most one ablation cell may be the reference".into()));
        }
        Ok(g)
    }

    pub fn cell_config(&self, cell: &AblationCell) -> (RunConfig, bool) {
        let mut c = self.base.clone();
        c.output_dir = self.base.output_dir.join(&cell.name);
        let mut scratch = false;
        for v in &cell.variations {
            match v {
                Variation::Epochs { epochs } => c.plan.epochs = *epochs,
                Variation::Scratch => scratch = true,
                Variation::BatchSchedule { phases } => {
                    c.plan.batch_schedule = phases.clone();
                }
                Variation::LrSchedule { base_lr, schedule } => {
                    c.plan.base_lr = *base_lr;
                    c.plan.schedule = schedule.clone();
                }
                Variation::WeightDecay { weight_decay } => c.plan.weight_decay = *weight_decay,
                Variation::Calibration { enabled } => c.calibration.enabled = *enabled,
            }
        }
        (c, scratch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub reference: bool,
    pub epochs: usize,
    pub init: String,
    pub batch_schedule: String,
    pub lr_schedule: String,
    pub weight_decay: f64,
    pub calibration: bool,
    pub test_acc: Option<f64>,
    pub delta: Option<f64>,
    pub status: String,
}

pub const ABLATION_HEADER: [&str; 11] = [
    "cell",
    "reference",
    "epochs",
    "init",
    "batch_schedule",
    "lr_schedule",
    "weight_decay",
    "calibration",
    "test_acc",
    "delta_vs_reference",
    "status",
];

fn describe_batches(p: &[BatchPhase]) -> String {
    p.iter()
        .map(|b| format!("{}@{}", b.batch_size, b.from_epoch))
        .collect::<Vec<_>>()
        .join(" ")
}

fn describe_lr(base: f64, s: &LrSchedule) -> String {
    match s {
        LrSchedule::Constant => format!("constant {base}"),
        LrSchedule::Exponential { decay } => format!("exp {base} x{decay:.5}"),
        LrSchedule::Step { milestones, factor } => format!("step {base} x{factor} at {milestones:?}"),
    }
}

/// Runs every cell; a failing cell is recorded and the grid carries on.
pub fn ablate(grid: &AblationGrid, pretrained: Option<&Network<f32>>, overwrite: bool) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.cells.len());
    let mut shared: Option<Data> = None;
    for cell in &grid.cells {
        let (mut cfg, scratch) = grid.cell_config(cell);
        let mut row = AblationRow {
            cell: cell.name.clone(),
            reference: cell.reference,
            epochs: cfg.plan.epochs,
            init: if scratch { "scratch" } else { "pretrained" }.into(),
            batch_schedule: describe_batches(&cfg.plan.batch_schedule),
            lr_schedule: describe_lr(cfg.plan.base_lr, &cfg.plan.schedule),
            weight_decay: cfg.plan.weight_decay,
            calibration: cfg.calibration.enabled && !scratch,
            test_acc: None,
            delta: None,
            status: String::new(),
        };
        let res = (|| -> Result<f64> {
            cfg.validate()?;
            prepare_output(&cfg.output_dir, overwrite)?;
            if shared.is_none() {
                shared = Some(load_data(&mut cfg)?);
            }
            let data = shared.as_ref().unwrap();
            cfg.data.normalization = Some(data.norm.clone());
            let init = if scratch {
                Init::Scratch
            } else {
                match pretrained {
                    Some(n) => Init::Pretrained(n.clone()),
                    None => Init::Pretrained(load_baseline(&cfg)?),
                }
            };
            Ok(run_faq(&cfg, data, init)?.summary.test_acc)
        })();
        match res {
            Ok(acc) => {
                row.test_acc = Some(acc);
                row.status = "ok".into();
            }
            Err(e) => row.status = format!("failed: {e}"),
        }
        rows.push(row);
    }
    if let Some(r) = rows.iter().find(|r| r.reference).and_then(|r| r.test_acc) {
        for row in &mut rows {
            row.delta = row.test_acc.map(|a| a - r);
        }
    }
    Ok(rows)
}

pub fn write_ablation_table(rows: &[AblationRow], path: &Path) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.cell.clone(),
                r.reference.to_string(),
                r.epochs.to_string(),
                r.init.clone(),
                r.batch_schedule.clone(),
                r.lr_schedule.clone(),
                r.weight_decay.to_string(),
                r.calibration.to_string(),
                opt(r.test_acc),
                opt(r.delta),
                r.status.clone(),
            ]
        })
        .collect();
    reports::write_table(path, &ABLATION_HEADER, &body)
}

/// Per-layer mean noise cosine for one precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub bits: u32,
    pub layers: Vec<String>,
    pub mean_cosine: Vec<Option<f64>>,
    pub steps: usize,
}

/// Fine-tunes the baseline once per precision with noise probes attached
/// and reports each layer's mean cosine over the configured window. Each
/// run writes its own subdirectory `bits-{b}`.
pub fn noise_sweep(cfg: &RunConfig, data: &Data, pretrained: &Network<f32>, precisions: &[u32]) -> Result<Vec<NoiseRow>> {
    let mut rows = Vec::new();
    for &bits in precisions {
        let mut c = cfg.clone();
        c.precision.bits = bits;
        c.diagnostics.noise_probe = true;
        c.output_dir = cfg.output_dir.join(format!("bits-{bits}"));
        prepare_output(&c.output_dir, true)?;
        let out = run_faq(&c, data, Init::Pretrained(pretrained.clone()))?;
        let probe = out.probe.expect("probe attached");
        let [from, to] = c.diagnostics.window;
        rows.push(NoiseRow {
            bits,
            layers: probe.names.clone(),
            mean_cosine: probe.window_mean(from, to),
            steps: probe.steps(),
        });
    }
    Ok(rows)
}

/// Layer-by-precision table: one row per layer, one column per precision.
pub fn write_noise_table(rows: &[NoiseRow], path: &Path) -> Result<()> {
    let mut header = vec!["layer_index".to_string(), "layer".to_string()];
    header.extend(rows.iter().map(|r| if r.bits >= 32 { "fp32".to_string() } else { format!("{}bit", r.bits) }));
    let layers = rows.first().map(|r| r.layers.clone()).unwrap_or_default();
    let body: Vec<Vec<String>> = layers
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut v = vec![i.to_string(), name.clone()];
            v.extend(rows.iter().map(|r| r.mean_cosine[i].map(|c| format!("{c:.6}")).unwrap_or_default()));
            v
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    reports::write_table(path, &h, &body)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub a: PathBuf,
    pub b: PathBuf,
    pub similarity: Similarity,
}

pub fn checkpoint_similarity(a: &Path, b: &Path) -> Result<SimilarityReport> {
    let na = Checkpoint::<f32>::load(a)?;
    let nb = Checkpoint::<f32>::load(b)?;
    Ok(SimilarityReport {
        a: a.into(),
        b: b.into(),
        similarity: network_similarity(na.network(), nb.network())?,
    })
}
