//! The pretraining and fine-tuning loops plus checkpoint evaluation.
//!
//! Determinism rules: every random draw comes from a counter-based
//! ChaCha stream keyed by (seed, role). Model initialization uses stream
//! 0, view augmentations use `VIEW_STREAM_BASE + 2·id` (+1 for the key
//! view) where `id` counts (epoch, batch, position), and epoch shuffles
//! use dedicated high ranges. Batch composition therefore never depends
//! on thread scheduling, and reruns are bit-identical.

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::history::{BatchRecord, LossHistory, ValPoint};
use super::TrainConfig;
use crate::augment::{make_positive_pair, RngStream};
use crate::contrastive::{
    full_negative_sets, select_hard_negatives, stage_loss, total_loss, FeatureSource,
    NegativeSets, StagePlan, Temperature,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::imagebuf::ImageBuf;
use crate::metrics::{self, MetricsReport, PredictionSet};
use crate::model::{Model, ModelConfig, StageFeatureIds};
use crate::optim::{adam_step, AdamConfig, AdamSlot};
use crate::polar::{warp_to_polar, PolarGrid};
use crate::scalar::Scalar;
use crate::synth::{LabeledSet, UnlabeledSet};
use crate::tensor::Tensor;

pub const PHASE_PRETRAINED: &str = "pretrained";
pub const PHASE_FINETUNED: &str = "finetuned";

const VIEW_STREAM_BASE: u64 = 1 << 40;
const PRETRAIN_SHUFFLE_BASE: u64 = 1 << 63;
const FINETUNE_SHUFFLE_BASE: u64 = (1 << 63) + (1 << 62);

/// Images forwarded per evaluation graph; rows are independent in eval
/// mode, so the chunk size never changes the features.
const EVAL_CHUNK: usize = 64;

fn shuffled_indices(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = RngStream::new(seed, stream).rng();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn images_to_tensor<S: Scalar>(views: &[&ImageBuf], cfg: &ModelConfig) -> Result<Tensor<S>> {
    let (c, s) = (cfg.input_channels, cfg.input_size);
    let mut data = Vec::with_capacity(views.len() * c * s * s);
    for (i, v) in views.iter().enumerate() {
        if v.width() != s || v.height() != s || v.channels() != c {
            return Err(Error::shape(format!(
                "image {i} is {}x{}x{}, the model wants {s}x{s}x{c}",
                v.width(),
                v.height(),
                v.channels()
            )));
        }
        data.extend(v.to_chw().iter().map(|&x| S::from_f32(x)));
    }
    Tensor::new(vec![views.len(), c, s, s], data)
}

/// Build the 2n-row view stack for one batch: augmented queries first,
/// then keys, in batch order. Streams are keyed by the global sample
/// position, so any worker count yields the same views.
fn prepare_views(
    cfg: &TrainConfig,
    grid: Option<&PolarGrid>,
    images: &[&ImageBuf],
    epoch: usize,
    batch: usize,
    batches_per_epoch: usize,
) -> Result<Vec<ImageBuf>> {
    let n = images.len();
    let make = |pos: usize| -> Result<(ImageBuf, ImageBuf)> {
        let id = ((epoch * batches_per_epoch + batch) * cfg.batch_size + pos) as u64;
        let (mut q, mut k) = make_positive_pair(
            images[pos],
            &cfg.augment,
            RngStream::new(cfg.seed, VIEW_STREAM_BASE + 2 * id),
            RngStream::new(cfg.seed, VIEW_STREAM_BASE + 2 * id + 1),
        )?;
        if let Some(grid) = grid {
            q = warp_to_polar(grid, &q)?;
            k = warp_to_polar(grid, &k)?;
        }
        Ok((q, k))
    };

    let mut pairs: Vec<Option<(ImageBuf, ImageBuf)>> = Vec::new();
    pairs.resize_with(n, || None);
    let workers = cfg.workers.min(n).max(1);
    if workers == 1 {
        for (pos, slot) in pairs.iter_mut().enumerate() {
            *slot = Some(make(pos)?);
        }
    } else {
        let chunk = n.div_ceil(workers);
        let results: Vec<Result<Vec<(usize, (ImageBuf, ImageBuf))>>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..n)
                    .step_by(chunk)
                    .map(|start| {
                        let make = &make;
                        let end = (start + chunk).min(n);
                        scope.spawn(move || {
                            (start..end).map(|pos| Ok((pos, make(pos)?))).collect()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("view worker panicked")).collect()
            });
        for r in results {
            for (pos, pair) in r? {
                pairs[pos] = Some(pair);
            }
        }
    }

    let mut queries = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for pair in pairs {
        let (q, k) = pair.expect("every position filled");
        queries.push(q);
        keys.push(k);
    }
    queries.extend(keys);
    Ok(queries)
}

/// Per-stage losses for one forward pass. Returns the loss nodes (one if
/// `use_pcl` is off) and the three stage values for the history, with
/// unused stages recorded as 0.
fn batch_losses<S: Scalar>(
    g: &mut Graph<S>,
    feats: &StageFeatureIds,
    n: usize,
    plans: &[StagePlan; 3],
    tau: Temperature,
    cfg: &TrainConfig,
) -> Result<(Vec<NodeId>, [f64; 3])> {
    let mut halves = [(feats.f, feats.f); 3];
    for (t, plan) in plans.iter().enumerate() {
        let whole = plan.source.pick(feats);
        halves[t] = (g.slice_rows(whole, 0, n)?, g.slice_rows(whole, n, 2 * n)?);
    }

    let full = full_negative_sets(n);
    let mut stage_sets = vec![full.clone()];
    if cfg.use_pcl {
        for t in 1..3 {
            let (q, k) = halves[t];
            let picked = {
                let candidates = if cfg.nested_selection {
                    stage_sets.last().expect("stage t-1 present")
                } else {
                    &full
                };
                select_hard_negatives(
                    g.value(q),
                    g.value(k),
                    candidates,
                    plans[t].n_neg,
                    cfg.ranking_view,
                )?
            };
            stage_sets.push(picked);
        }
    }
    // validates sizes, self-exclusion and (when selected from survivors)
    // the nesting invariant
    let sets = NegativeSets::new(n, stage_sets, cfg.use_pcl && cfg.nested_selection)?;

    let mut losses = Vec::with_capacity(sets.num_stages());
    let mut values = [0.0f64; 3];
    for t in 0..sets.num_stages() {
        let (q, k) = halves[t];
        let node = stage_loss(g, q, k, sets.stage(t + 1)?, tau)?;
        values[t] = g.value(node).data()[0].as_f64();
        losses.push(node);
    }
    Ok((losses, values))
}

fn adam_update<S: Scalar>(
    model: &mut Model<S>,
    g: &Graph<S>,
    bind_nodes: &[NodeId],
    adam: &AdamConfig,
    step: usize,
    slots: &mut [AdamSlot<S>],
) -> Result<()> {
    for i in 0..bind_nodes.len() {
        let Some(grad) = g.grad(bind_nodes[i]) else { continue };
        let p = &mut model.params_mut()[i];
        if !p.trainable {
            continue;
        }
        adam_step(adam, step, &p.name, p.value.data_mut(), grad.data(), &mut slots[i])?;
    }
    Ok(())
}

/// Self-supervised pretraining. Shuffles each epoch, drops the last
/// incomplete batch, and records every step's total and per-stage losses.
pub fn pretrain<S: Scalar>(
    cfg: &TrainConfig,
    data: &UnlabeledSet,
) -> Result<(Checkpoint, LossHistory)> {
    cfg.validate()?;
    let n = cfg.batch_size;
    if data.len() < n {
        return Err(Error::data(format!(
            "pretraining needs at least one full batch of {n} images, got {}",
            data.len()
        )));
    }
    let plans = cfg.stage_plans()?;
    let tau = cfg.temperature()?;
    let adam = cfg.adam();
    let grid = if cfg.use_polar { Some(PolarGrid::square(cfg.model.input_size)?) } else { None };

    let mut model = Model::<S>::new(cfg.model.clone(), cfg.seed)?;
    let mut slots: Vec<AdamSlot<S>> =
        model.params().iter().map(|p| AdamSlot::new(p.value.numel())).collect();
    let batches_per_epoch = data.len() / n;
    let mut history = LossHistory::new();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(data.len(), cfg.seed, PRETRAIN_SHUFFLE_BASE + epoch as u64);
        let mut epoch_total = 0.0;
        for batch in 0..batches_per_epoch {
            let members: Vec<&ImageBuf> =
                order[batch * n..(batch + 1) * n].iter().map(|&i| &data.images[i]).collect();
            let views = prepare_views(cfg, grid.as_ref(), &members, epoch, batch, batches_per_epoch)?;
            let view_refs: Vec<&ImageBuf> = views.iter().collect();
            let stack = images_to_tensor::<S>(&view_refs, &cfg.model)?;

            let mut g = Graph::new();
            let bind = model.bind(&mut g);
            let input = g.constant(stack);
            let feats = model.forward_features(&mut g, &bind, input)?;
            let (losses, stage_values) = batch_losses(&mut g, &feats, n, &plans, tau, cfg)?;
            let total = total_loss(&mut g, &losses)?;
            let l_total = g.value(total).data()[0].as_f64();
            g.backward(total)?;
            step += 1;
            let nodes: Vec<NodeId> = (0..model.params().len()).map(|i| bind.node(i)).collect();
            adam_update(&mut model, &g, &nodes, &adam, step, &mut slots)?;

            epoch_total += l_total;
            history.push(BatchRecord {
                epoch: epoch + 1,
                batch: batch + 1,
                l_total,
                l_stage1: stage_values[0],
                l_stage2: stage_values[1],
                l_stage3: stage_values[2],
            });
        }
        let mean = epoch_total / batches_per_epoch as f64;
        epoch_loss.push(mean);
        log::info!("pretrain epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.epochs);
    }

    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        use_polar: cfg.use_polar,
        seed: cfg.seed,
        phase: PHASE_PRETRAINED.to_string(),
        epoch: cfg.epochs,
        epoch_loss,
        best_val_accuracy: None,
    };
    Ok((Checkpoint { meta, tensors: model.named_tensors() }, history))
}

/// Eval-mode features for a stack of images at the requested level,
/// computed in fixed chunks. When `use_polar` is set each image is
/// warped first, exactly as in training.
pub fn feature_matrix<S: Scalar>(
    model: &Model<S>,
    images: &[ImageBuf],
    use_polar: bool,
    source: FeatureSource,
) -> Result<Tensor<S>> {
    let cfg = model.config();
    let grid = if use_polar { Some(PolarGrid::square(cfg.input_size)?) } else { None };
    let dim = match source {
        FeatureSource::F => cfg.dims.0,
        FeatureSource::H1 => cfg.dims.1,
        FeatureSource::H2 => cfg.dims.2,
    };
    let mut out = Vec::with_capacity(images.len() * dim);
    for chunk in images.chunks(EVAL_CHUNK) {
        let warped: Vec<ImageBuf> = match &grid {
            Some(grid) => chunk.iter().map(|img| warp_to_polar(grid, img)).collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let views: Vec<&ImageBuf> =
            if grid.is_some() { warped.iter().collect() } else { chunk.iter().collect() };
        let stack = images_to_tensor::<S>(&views, cfg)?;
        let mut g = Graph::new();
        let bind = model.bind(&mut g);
        let input = g.constant(stack);
        let feats = model.forward_features_eval(&mut g, &bind, input)?;
        out.extend_from_slice(g.value(source.pick(&feats)).data());
    }
    Tensor::new(vec![images.len(), dim], out)
}

fn gather_rows<S: Scalar>(matrix: &Tensor<S>, rows: &[usize]) -> Result<Tensor<S>> {
    let cols = matrix.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(matrix.row(r));
    }
    Tensor::new(vec![rows.len(), cols], data)
}

/// Classifier logits for pre-pooled backbone features.
fn probe_logits<S: Scalar>(model: &Model<S>, pooled: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let bind = model.bind(&mut g);
    let input = g.constant(pooled.clone());
    let feats = model.forward_from_pooled(&mut g, &bind, input)?;
    let logits = model.forward_classifier(&mut g, &bind, &feats)?;
    Ok(g.value(logits).clone())
}

fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if v.as_f64() > row[best].as_f64() {
            best = i;
        }
    }
    best
}

fn probe_accuracy<S: Scalar>(
    model: &Model<S>,
    pooled: &Tensor<S>,
    labels: &[usize],
) -> Result<f64> {
    let logits = probe_logits(model, pooled)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax_row(logits.row(i)) == label)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Supervised fine-tuning with a frozen backbone. With `base = None` the
/// probe starts from random initialization (the no-pretraining baseline).
/// The checkpoint returned holds the parameters of the epoch with the
/// best validation accuracy — possibly epoch 0, the untouched start.
///
/// Because the backbone is frozen and runs in eval mode, and fine-tuning
/// uses no augmentation, each image's pooled feature is constant: it is
/// computed once and replayed through the head and classifier layers,
/// which is arithmetically identical to the full forward.
pub fn finetune<S: Scalar>(
    base: Option<&Checkpoint>,
    cfg: &TrainConfig,
    train: &LabeledSet,
    val: &LabeledSet,
) -> Result<(Checkpoint, Vec<ValPoint>)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data(
            "fine-tuning needs non-empty train and validation sets".to_string(),
        ));
    }
    let mut model = Model::<S>::new(cfg.model.clone(), cfg.seed)?;
    if let Some(ckpt) = base {
        if ckpt.meta.model != cfg.model {
            return Err(Error::config(
                "checkpoint model config does not match the fine-tune config".to_string(),
            ));
        }
        if ckpt.meta.use_polar != cfg.use_polar {
            return Err(Error::config(format!(
                "polar-mode mismatch: checkpoint was pretrained with use_polar={}, config asks for {}",
                ckpt.meta.use_polar, cfg.use_polar
            )));
        }
        model.load_named(&ckpt.tensors)?;
    }
    model.freeze_backbone();
    let adam = cfg.adam();

    let train_pooled = feature_matrix(&model, train.images(), cfg.use_polar, FeatureSource::F)?;
    let val_pooled = feature_matrix(&model, val.images(), cfg.use_polar, FeatureSource::F)?;
    let train_labels = train.labels().to_vec();
    let val_labels = val.labels().to_vec();
    for (labels, which) in [(&train_labels, "train"), (&val_labels, "validation")] {
        if let Some(&label) = labels.iter().find(|&&l| l >= cfg.model.num_classes) {
            return Err(Error::data(format!(
                "{which} label {label} is out of range for {} classes",
                cfg.model.num_classes
            )));
        }
    }

    let mut slots: Vec<AdamSlot<S>> =
        model.params().iter().map(|p| AdamSlot::new(p.value.numel())).collect();
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let accuracy = probe_accuracy(&model, &val_pooled, &val_labels)?;
    curve.push(ValPoint { epoch: 0, accuracy });
    let mut best = (accuracy, model.named_tensors(), 0usize);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(
            train.len(),
            cfg.seed,
            FINETUNE_SHUFFLE_BASE + (epoch - 1) as u64,
        );
        let mut total_ce = 0.0;
        let mut batches = 0;
        for members in order.chunks(cfg.batch_size) {
            let pooled = gather_rows(&train_pooled, members)?;
            let labels: Vec<usize> = members.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let bind = model.bind(&mut g);
            let input = g.constant(pooled);
            let feats = model.forward_from_pooled(&mut g, &bind, input)?;
            let logits = model.forward_classifier(&mut g, &bind, &feats)?;
            let loss = g.cross_entropy(logits, &labels)?;
            total_ce += g.value(loss).data()[0].as_f64();
            batches += 1;
            g.backward(loss)?;
            step += 1;
            let nodes: Vec<NodeId> = (0..model.params().len()).map(|i| bind.node(i)).collect();
            adam_update(&mut model, &g, &nodes, &adam, step, &mut slots)?;
        }
        epoch_loss.push(total_ce / batches as f64);
        let accuracy = probe_accuracy(&model, &val_pooled, &val_labels)?;
        curve.push(ValPoint { epoch, accuracy });
        if accuracy > best.0 {
            best = (accuracy, model.named_tensors(), epoch);
        }
        log::info!("finetune epoch {epoch}/{}: val accuracy {accuracy:.4}", cfg.epochs);
    }

    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        use_polar: cfg.use_polar,
        seed: cfg.seed,
        phase: PHASE_FINETUNED.to_string(),
        epoch: best.2,
        epoch_loss,
        best_val_accuracy: Some(best.0),
    };
    Ok((Checkpoint { meta, tensors: best.1 }, curve))
}

/// Evaluation artifact: the metrics plus enough provenance to tie the
/// numbers back to the exact model that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub model: ModelConfig,
    pub use_polar: bool,
    pub checkpoint_hash: String,
}

impl EvalOutput {
    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Score a fine-tuned checkpoint on labeled data: eval-mode forward,
/// softmax probabilities, full metrics.
pub fn evaluate_checkpoint<S: Scalar>(
    ckpt: &Checkpoint,
    data: &LabeledSet,
) -> Result<EvalOutput> {
    if ckpt.meta.phase != PHASE_FINETUNED {
        return Err(Error::config(format!(
            "evaluation expects a fine-tuned checkpoint, this one is `{}`",
            ckpt.meta.phase
        )));
    }
    if data.is_empty() {
        return Err(Error::data("evaluation needs a non-empty dataset".to_string()));
    }
    let mut model = Model::<S>::new(ckpt.meta.model.clone(), 0)?;
    model.load_named(&ckpt.tensors)?;
    let pooled = feature_matrix(&model, data.images(), ckpt.meta.use_polar, FeatureSource::F)?;
    let logits = probe_logits(&model, &pooled)?;

    let (n, k) = (data.len(), ckpt.meta.model.num_classes);
    let flat: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let mut scores = vec![0.0; n * k];
    crate::ops::softmax_rows(&flat, n, k, &mut scores);
    let pred = PredictionSet::new(k, scores, data.labels().to_vec())?;
    let report = metrics::evaluate(&pred)?;
    Ok(EvalOutput {
        report,
        model: ckpt.meta.model.clone(),
        use_polar: ckpt.meta.use_polar,
        checkpoint_hash: ckpt.hash_hex()?,
    })
}
