//! The training workflow: open (and recover) the heap, load data into
//! the persistent matrix if needed, restore or allocate the encrypted
//! model replica, then iterate batch decryption + training + mirroring
//! until the target iteration count. A kill at any instant leaves the
//! heap recoverable; the next run resumes from the last snapshot.
//!
//! With the persisted RNG cursor (default), a resumed run replays the
//! exact batch sequence, so the stitched loss log is bit-identical to an
//! uninterrupted run. `no_replay` reseeds the sampler on each resume
//! instead, reproducing a weaker fault-tolerance mode; `no_restore`
//! disables mirroring entirely, so every run restarts from scratch.

use anyhow::{bail, Context, Result};
use std::path::PathBuf;
use thiserror::Error;

use pmtrain_core::data::{self, DataFormat, Dataset, DatasetSource, LOAD_TXN_ROWS};
use pmtrain_core::mirror;
use pmtrain_core::nn::{parse_config, Model, NetConfig};
use pmtrain_core::{Heap, Key128, SplitMix64};

use crate::losslog;

/// The run stopped early on purpose (iteration budget); rerunning the
/// same command continues from the snapshot. Mapped to exit code 3.
#[derive(Debug, Error)]
#[error("iteration budget exhausted at {done}/{target}; restart to continue")]
pub struct RestartRequested {
    pub done: u64,
    pub target: u64,
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub heap: PathBuf,
    pub config: PathBuf,
    pub key: Option<PathBuf>,
    pub seed: u64,
    pub max_iter: Option<u64>,
    pub mirror_freq: u64,
    pub loss_log: PathBuf,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub format: DataFormat,
    pub no_restore: bool,
    pub no_replay: bool,
    pub iter_budget: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_iter: u64,
    pub final_loss: Option<f32>,
    pub iterations_run: u64,
}

pub fn dataset_source(args: &TrainArgs) -> Option<DatasetSource> {
    args.images.as_ref().map(|images| DatasetSource {
        images: images.clone(),
        labels: args.labels.clone(),
        format: args.format,
        classes: 0, // filled by the caller from the model config
    })
}

/// Ensure the persistent matrix exists, loading (or resuming a load of)
/// the source dataset when necessary.
pub fn ensure_data(
    h: &mut Heap,
    args: &TrainArgs,
    classes: usize,
) -> Result<data::PmMatrix> {
    if data::pm_data_exists(h) {
        return Ok(data::open_pm_data(h)?);
    }
    let Some(mut src) = dataset_source(args) else {
        bail!(
            "heap {} holds no training data; run `pmtrain load-data` or pass --images/--labels",
            args.heap.display()
        );
    };
    src.classes = classes;
    let key = crate::keyfile::load_key(args.key.as_deref())?;
    let ds = Dataset::load(&src)?;
    Ok(data::load_to_pm(h, &ds, &key, LOAD_TXN_ROWS)?)
}

fn reseed_for_resume(seed: u64, iter: u64) -> SplitMix64 {
    // Deliberately different stream per resume point.
    SplitMix64::new(seed ^ (iter + 1).wrapping_mul(0xd134_2543_de82_ef95))
}

pub fn load_config(path: &PathBuf) -> Result<NetConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("config {}", path.display()))?;
    Ok(parse_config(&text)?)
}

pub fn run_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let key = crate::keyfile::load_key(args.key.as_deref())?;
    let cfg = load_config(&args.config)?;
    let max_iter = args.max_iter.unwrap_or(cfg.max_iter as u64);
    let lr = cfg.learning_rate as f32;
    let mut h = Heap::open(&args.heap)
        .with_context(|| format!("heap {} (run `pmtrain init` first)", args.heap.display()))?;

    let mut model: Model<f32> = Model::build(&cfg, args.seed)?;
    let dm = ensure_data(&mut h, args, model.classes)?;
    if dm.cols != (cfg.input.0 * cfg.input.1 * cfg.input.2) as u64
        || dm.classes != model.classes as u64
    {
        bail!(
            "persistent data is {}x{} features/classes but the config wants {}x{}",
            dm.cols,
            dm.classes,
            cfg.input.0 * cfg.input.1 * cfg.input.2,
            model.classes
        );
    }

    if args.no_restore {
        return run_without_mirroring(&mut h, &dm, &key, &cfg, args, max_iter, lr, model);
    }

    // Restore the replica or allocate it with the initial snapshot.
    let (pm, mut iter, mut rng) = if mirror::mirror_exists(&h) {
        let pm = mirror::open_mirror(&h)?;
        let (state, _) = mirror::mirror_in(&h, &pm, &mut model, &key)?;
        let rng = if args.no_replay {
            reseed_for_resume(args.seed, state.iter)
        } else {
            SplitMix64::from_state(state.rng_cursor)
        };
        (pm, state.iter, rng)
    } else {
        let rng = SplitMix64::new(args.seed);
        let pm = mirror::alloc_mirror_model(&mut h, &model, &key, rng.state())?;
        (pm, 0, rng)
    };

    // Drop loss rows beyond the snapshot; they will be recomputed.
    let rows = losslog::read_rows(&args.loss_log);
    let keep: Vec<_> = rows.into_iter().take(iter as usize).collect();
    if (keep.len() as u64) < iter {
        bail!(
            "loss log {} has {} rows but the snapshot is at iteration {iter}",
            args.loss_log.display(),
            keep.len()
        );
    }
    let mut log = losslog::rewrite(&args.loss_log, &keep)?;

    let mut final_loss = None;
    let mut ran = 0u64;
    while iter < max_iter {
        if let Some(budget) = args.iter_budget {
            if ran >= budget {
                return Err(RestartRequested { done: iter, target: max_iter }.into());
            }
        }
        let batch = data::decrypt_batch(&h, &dm, &key, cfg.batch, &mut rng)?;
        let loss = model.train_iteration(&batch, lr)?;
        iter += 1;
        ran += 1;
        losslog::append_row(&mut log, iter, loss)?;
        if iter % args.mirror_freq == 0 || iter == max_iter {
            mirror::mirror_out(&mut h, &pm, &model, iter, rng.state(), &key)?;
        }
        final_loss = Some(loss);
    }

    Ok(TrainOutcome { final_iter: iter, final_loss, iterations_run: ran })
}

/// Fault-intolerant variant: no replica, every run starts from scratch
/// and appends to the loss log without truncation.
#[allow(clippy::too_many_arguments)]
fn run_without_mirroring(
    h: &mut Heap,
    dm: &data::PmMatrix,
    key: &Key128,
    cfg: &NetConfig,
    args: &TrainArgs,
    max_iter: u64,
    lr: f32,
    mut model: Model<f32>,
) -> Result<TrainOutcome> {
    // Sanitize: a kill can leave a torn final line that would derail
    // row counting on the next run.
    let prior = losslog::read_rows(&args.loss_log);
    let prior_rows = prior.len() as u64;
    let mut log = losslog::rewrite(&args.loss_log, &prior)?;
    let mut rng = reseed_for_resume(args.seed, prior_rows);
    let mut final_loss = None;
    for iter in 1..=max_iter {
        if let Some(budget) = args.iter_budget {
            if iter > budget {
                return Err(RestartRequested { done: iter - 1, target: max_iter }.into());
            }
        }
        let batch = data::decrypt_batch(h, dm, key, cfg.batch, &mut rng)?;
        let loss = model.train_iteration(&batch, lr)?;
        losslog::append_row(&mut log, prior_rows + iter, loss)?;
        final_loss = Some(loss);
    }
    Ok(TrainOutcome { final_iter: max_iter, final_loss, iterations_run: max_iter })
}

#[derive(Debug, Clone)]
pub struct InferArgs {
    pub heap: PathBuf,
    pub config: PathBuf,
    pub key: Option<PathBuf>,
    pub test_images: PathBuf,
    pub test_labels: Option<PathBuf>,
    pub format: DataFormat,
}

/// Restore the trained replica and classify the test set.
pub fn run_infer(args: &InferArgs) -> Result<f64> {
    let key = crate::keyfile::load_key(args.key.as_deref())?;
    let cfg = load_config(&args.config)?;
    let h = Heap::open(&args.heap)?;
    let mut model: Model<f32> = Model::build(&cfg, 0)?;
    let pm = mirror::open_mirror(&h)?;
    mirror::mirror_in(&h, &pm, &mut model, &key)?;

    let src = DatasetSource {
        images: args.test_images.clone(),
        labels: args.test_labels.clone(),
        format: args.format,
        classes: model.classes,
    };
    let ds = Dataset::load(&src)?;
    if ds.cols != cfg.input.0 * cfg.input.1 * cfg.input.2 {
        bail!("test data has {} features, config wants {}", ds.cols, cfg.input.0 * cfg.input.1 * cfg.input.2);
    }
    let mut correct = 0usize;
    for row in 0..ds.rows {
        let sample = &ds.features[row * ds.cols..(row + 1) * ds.cols];
        if model.predict(sample)? == ds.labels[row] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.rows as f64)
}
