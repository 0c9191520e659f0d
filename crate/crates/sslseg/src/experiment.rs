use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sslseg_core::contrastive::pretrain_contrastive;
use sslseg_core::data::{load_checkpoint, save_checkpoint, Volume};
use sslseg_core::finetune::{finetune, predict, volume_dice, SegSample};
use sslseg_core::model::{build_model, HeadKind, ModelParams};
use sslseg_core::regression::pretrain_regression;
use sslseg_core::train::{EpochRecord, ScheduleConfig};
use sslseg_core::{rng, Tensor};

use crate::config::{ExperimentConfig, Method};
use crate::dataset::Dataset;
use crate::report;
use crate::{CliError, Result};

/// One epoch of a training history; `stage` names the pretraining phase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

fn rows<'a>(stage: &str, records: &'a [EpochRecord], offset: usize) -> impl Iterator<Item = HistoryRow> + 'a {
    let stage = stage.to_string();
    records.iter().map(move |r| HistoryRow {
        stage: stage.clone(),
        epoch: r.epoch + offset,
        train_loss: r.train_loss,
        val_loss: r.val_loss,
        lr: r.lr,
    })
}

/// One finetuning epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

impl From<&EpochRecord> for EpochRow {
    fn from(r: &EpochRecord) -> Self {
        Self { epoch: r.epoch, train_loss: r.train_loss, val_loss: r.val_loss, lr: r.lr }
    }
}

pub struct Pretrained {
    pub model: ModelParams<f32>,
    pub history: Vec<HistoryRow>,
}

fn pool_images(volumes: &[Volume]) -> Vec<Tensor<f32>> {
    volumes.iter().flat_map(|v| v.images()).collect()
}

/// Pretrains a fresh backbone on the pretraining pool. `None` returns the
/// randomly initialized backbone itself.
pub fn pretrain(config: &ExperimentConfig, method: Method, data: &Dataset) -> Result<Pretrained> {
    let base = build_model::<f32>(&config.model.unet(), config.model.seed)?;
    if method == Method::None {
        return Ok(Pretrained { model: base, history: Vec::new() });
    }
    let images = pool_images(&data.pretrain);
    if images.is_empty() {
        return Err(CliError::Data("pretraining pool is empty".into()));
    }
    let p = &config.pretrain;
    log::info!("pretraining ({method}) on {} slices from {} subjects", images.len(), data.pretrain.len());
    match method {
        Method::Regression => {
            let model = base.swap_heads(HeadKind::Regression, p.seed);
            let out = pretrain_regression(&model, &images, &config.corruption(p.seed), &p.schedule())?;
            Ok(Pretrained { model: out.params, history: rows("regression", &out.history, 0).collect() })
        }
        Method::Contrastive => {
            let c = &config.contrastive;
            let global = ScheduleConfig { epochs: c.global_epochs.unwrap_or(p.epochs), ..p.schedule() };
            let local = ScheduleConfig { epochs: c.local_epochs.unwrap_or(p.epochs), ..p.schedule() };
            let out = pretrain_contrastive(
                &base,
                &images,
                &config.contrastive_config(),
                &config.global_augmentation(),
                &config.local_augmentation(),
                &global,
                &local,
            )?;
            let history =
                rows("global", &out.global_history, 0).chain(rows("local", &out.local_history, global.epochs)).collect();
            Ok(Pretrained { model: out.params, history })
        }
        Method::None => unreachable!(),
    }
}

pub fn samples(volumes: &[Volume]) -> Vec<SegSample<f32>> {
    volumes.iter().flat_map(|v| v.samples()).collect()
}

pub struct Finetuned {
    pub model: ModelParams<f32>,
    pub history: Vec<EpochRow>,
}

/// Attaches a fresh segmentation head (seeded by `seed`) and finetunes.
pub fn finetune_from(
    config: &ExperimentConfig,
    init: &ModelParams<f32>,
    train: &[Volume],
    val: &[Volume],
    seed: u64,
) -> Result<Finetuned> {
    let model = init.swap_heads(HeadKind::Segmentation, seed);
    let out = finetune(&model, &samples(train), &samples(val), &config.finetune.schedule(seed), &config.finetune_options())?;
    log::debug!("finetune best epoch {} of {}", out.best_epoch, out.history.len());
    Ok(Finetuned { model: out.params, history: out.history.iter().map(EpochRow::from).collect() })
}

/// Per-class volume Dice of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDice {
    pub subject: String,
    /// Foreground classes `1..num_classes`.
    pub dice: Vec<f64>,
}

/// Scores predicted label maps (one `Vec` of slices per subject) against the
/// subjects' labels.
pub fn score_subjects(predictions: &[Vec<Vec<u8>>], subjects: &[Volume], num_classes: usize) -> Result<Vec<SubjectDice>> {
    predictions
        .iter()
        .zip(subjects)
        .map(|(pred, v)| {
            let labels = v.labels.as_ref().ok_or_else(|| CliError::Data(format!("{} has no labels", v.subject_id)))?;
            let (h, w) = v.dims();
            let truth: Vec<Vec<u8>> = labels.chunks(h * w).map(<[u8]>::to_vec).collect();
            Ok(SubjectDice { subject: v.subject_id.clone(), dice: volume_dice(pred, &truth, num_classes) })
        })
        .collect()
}

pub fn evaluate(model: &ModelParams<f32>, subjects: &[Volume]) -> Result<Vec<SubjectDice>> {
    let predictions = subjects
        .iter()
        .map(|v| predict(model, &v.images(), 8))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    score_subjects(&predictions, subjects, model.config().num_classes)
}

/// Mean over subjects, per class.
pub fn cohort_mean(rows: &[SubjectDice]) -> Vec<f64> {
    let classes = rows.first().map_or(0, |r| r.dice.len());
    (0..classes).map(|c| rows.iter().map(|r| r.dice[c]).sum::<f64>() / rows.len() as f64).collect()
}

/// Rejects a checkpoint whose architecture differs from the configured one.
pub fn check_compatible(config: &ExperimentConfig, model: &ModelParams<f32>, source: &Path) -> Result<()> {
    let want = config.model.unet();
    if *model.config() != want {
        return Err(CliError::Config(format!(
            "checkpoint {} has model {:?}, config expects {:?}",
            source.display(),
            model.config(),
            want
        )));
    }
    Ok(())
}

pub fn load_model(config: &ExperimentConfig, path: &Path) -> Result<ModelParams<f32>> {
    let model = load_checkpoint::<f32>(path)?;
    check_compatible(config, &model, path)?;
    Ok(model)
}

pub fn pretrain_checkpoint_path(out: &Path, method: Method) -> PathBuf {
    out.join(format!("pretrain_{method}.ckpt"))
}

/// Runs `pretrain` and writes its checkpoint and history under `out`.
pub fn pretrain_and_save(config: &ExperimentConfig, method: Method, data: &Dataset, out: &Path) -> Result<Pretrained> {
    std::fs::create_dir_all(out)?;
    let result = pretrain(config, method, data)?;
    save_checkpoint(&pretrain_checkpoint_path(out, method), &result.model)?;
    report::write_csv(&out.join(format!("pretrain_{method}_history.csv")), &result.history)?;
    Ok(result)
}

/// One row of the sweep results table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub class: usize,
    pub dice: f64,
    pub seconds: f64,
}

/// Indices of the `n` training subjects used by sweep cell `(n, seed)`.
pub fn labeled_subset(pool: usize, n: usize, seed: u64, nested: bool) -> Vec<usize> {
    let draw = |count: usize, salt: u64| {
        rng::sample_indices(&mut rng::stream(seed, &[rng::key("labeled-subset"), salt]), pool, count)
    };
    if nested {
        draw(pool, 0).into_iter().take(n).collect()
    } else {
        draw(n, n as u64)
    }
}

/// Every `(method, N, seed)` cell: finetune from the method's pretrained
/// backbone on `N` training subjects and score the test set. Missing
/// pretraining checkpoints under `out` are produced first.
pub fn sweep(config: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<Vec<ResultRow>> {
    let f = &config.finetune;
    let pool = data.train.len();
    if let Some(&n) = f.n_values.iter().find(|&&n| n > pool) {
        return Err(CliError::Config(format!("N={n} exceeds the {pool} labeled training subjects")));
    }
    if data.test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    std::fs::create_dir_all(out.join("histories"))?;

    let mut cells: BTreeSet<(Method, usize, u64)> = BTreeSet::new();
    for &m in &f.methods {
        for &n in &f.n_values {
            for &s in &f.seeds {
                cells.insert((m, n, s));
            }
        }
    }
    if f.baseline {
        for &s in &f.seeds {
            cells.insert((Method::None, pool, s));
        }
    }
    let methods: BTreeSet<Method> = cells.iter().map(|c| c.0).collect();

    let mut rows = Vec::new();
    for method in methods {
        let path = pretrain_checkpoint_path(out, method);
        let init = if path.exists() {
            log::info!("using existing checkpoint {}", path.display());
            load_model(config, &path)?
        } else {
            pretrain_and_save(config, method, data, out)?.model
        };
        for &(_, n, seed) in cells.iter().filter(|c| c.0 == method) {
            let started = Instant::now();
            let picked: Vec<Volume> =
                labeled_subset(pool, n, seed, f.nested_subsets).into_iter().map(|i| data.train[i].clone()).collect();
            let tuned = finetune_from(config, &init, &picked, &data.val, seed)?;
            let scores = evaluate(&tuned.model, &data.test)?;
            let seconds = if config.output.record_timings { started.elapsed().as_secs_f64() } else { 0.0 };
            report::write_csv(&out.join("histories").join(format!("{method}_N{n}_seed{seed}.csv")), &tuned.history)?;
            let mean = cohort_mean(&scores);
            log::info!("{method} N={n} seed={seed}: dice {mean:?} ({seconds:.1}s)");
            for (c, dice) in mean.into_iter().enumerate() {
                rows.push(ResultRow { method: method.to_string(), n, seed, class: c + 1, dice, seconds });
            }
        }
    }
    rows.sort_by(|a, b| (&a.method, a.n, a.seed, a.class).cmp(&(&b.method, b.n, b.seed, b.class)));
    report::write_csv(&out.join("results.csv"), &rows)?;
    let summary = report::summarize(&rows);
    report::write_csv(&out.join("summary.csv"), &summary)?;
    let baseline = f.baseline.then(|| report::baseline_value(&rows, pool)).flatten();
    std::fs::write(out.join("plot.svg"), report::svg_plot(&summary, &f.n_values, baseline))?;
    Ok(rows)
}
