//! Imitation training: the weighted L1 loss on (steer, accel), the halving
//! learning-rate schedule, AdamW with decoupled weight decay, global-norm
//! clipping and the epoch loop with offline MAE logging.

use std::collections::BTreeMap;

use bid_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, RunConfig, TrainConfig};
use crate::dataops::{make_batch, Batch, DataError, Dataset, EpochSampler, Split};
use crate::model::BidModel;

/// `mean_b( λ_s |Δsteer| + λ_a |Δaccel| )` over a `(B, 2)` batch.
pub fn bid_loss<T: bid_tensor::Scalar>(g: &mut Graph<T>, pred: Var, target: Var, cfg: &LossConfig) -> bid_tensor::Result<Var> {
    let (ps, ts) = (g.shape(pred).to_vec(), g.shape(target).to_vec());
    if ps != ts || ps.len() != 2 || ps[1] != 2 || ps[0] == 0 {
        return Err(TensorError::Shape { op: "bid_loss", expected: "pred and target both (B, 2)".into(), got: format!("{ps:?} / {ts:?}") });
    }
    let diff = g.sub(pred, target)?;
    let diff = g.abs(diff)?;
    let w = g.constant(Tensor::new(vec![2], vec![T::lit(cfg.lambda_s), T::lit(cfg.lambda_a)])?);
    let weighted = g.mul_bcast(diff, w)?;
    let total = g.sum(weighted)?;
    g.scale(total, 1.0 / ps[0] as f64)
}

/// Learning rate after halving once per milestone already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * 0.5f64.powi(halvings as i32)
}

/// Scales all gradients so that their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm = 0` only measures.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|t| t.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Adam with decoupled weight decay applied to every parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub steps: u64,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64, cfg: &TrainConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        let eps = (cfg.adam_eps * c2.sqrt()) as f32;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x = *x * decay - step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    pub steer: f64,
    pub accel: f64,
    pub count: usize,
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub updates: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Running MAE of the epoch's own batch predictions.
    pub train_mae_steer: f64,
    pub train_mae_accel: f64,
    pub heldout_mae_steer: Option<f64>,
    pub heldout_mae_accel: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch}, update {update}; parameters before the failing update are kept for diagnosis")]
    NonFinite { epoch: usize, update: usize, diagnostic: Box<ParamStore<f32>> },
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub log: Vec<LogRecord>,
    pub updates: usize,
    /// `(epoch, parameters)` every `checkpoint_every` epochs.
    pub snapshots: Vec<(usize, ParamStore<f32>)>,
}

fn batch_vars(g: &mut Graph<f32>, b: &Batch) -> (Var, Var, Var, Var) {
    (g.constant(b.frames.clone()), g.constant(b.prev.clone()), g.constant(b.commands.clone()), g.constant(b.targets.clone()))
}

fn accumulate_mae(pred: &[f32], target: &[f32], sum: &mut [f64; 2]) {
    for (p, t) in pred.chunks(2).zip(target.chunks(2)) {
        sum[0] += (p[0] - t[0]).abs() as f64;
        sum[1] += (p[1] - t[1]).abs() as f64;
    }
}

/// Loss and parameter gradients on one batch.
pub fn loss_and_grads(model: &BidModel, params: &ParamStore<f32>, batch: &Batch, loss: &LossConfig) -> bid_tensor::Result<(f64, Vec<f32>, BTreeMap<String, Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, true);
    let (f, pv, c, t) = batch_vars(&mut g, batch);
    let out = model.forward(&mut g, &p, f, pv, c)?;
    let l = bid_loss(&mut g, out.action, t, loss)?;
    let value = g.value(l).data()[0] as f64;
    let pred = g.value(out.action).data().to_vec();
    g.backward(l)?;
    Ok((value, pred, p.grads(&g)))
}

/// Model predictions `(B, 2)` for a batch without building gradients.
pub fn predict(model: &BidModel, params: &ParamStore<f32>, batch: &Batch) -> bid_tensor::Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false);
    let (f, pv, c, _) = batch_vars(&mut g, batch);
    let out = model.forward(&mut g, &p, f, pv, c)?;
    Ok(g.value(out.action).data().to_vec())
}

/// Per-component mean absolute error of the model over a split.
pub fn evaluate_offline(model: &BidModel, params: &ParamStore<f32>, ds: &Dataset, split: Split, batch_size: usize) -> bid_tensor::Result<Mae> {
    let keys = ds.keys(split);
    let mut sum = [0.0; 2];
    for chunk in keys.chunks(batch_size.max(1)) {
        let b = make_batch(ds, chunk, None);
        let pred = predict(model, params, &b)?;
        accumulate_mae(&pred, b.targets.data(), &mut sum);
    }
    let n = keys.len().max(1) as f64;
    Ok(Mae { steer: sum[0] / n, accel: sum[1] / n, count: keys.len() })
}

/// Trains from `init` (or a fresh seeded initialization) on the training
/// split. `on_log` sees every log record as it is produced.
pub fn train(
    model: &BidModel,
    ds: &Dataset,
    cfg: &RunConfig,
    init: Option<ParamStore<f32>>,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome, TrainError> {
    let tc = &cfg.train;
    ds.check_no_leakage()?;
    if ds.len(Split::Train) == 0 {
        return Err(DataError::Empty.into());
    }
    let mut params = init.unwrap_or_else(|| model.init(cfg.seed));
    let mut opt = AdamW::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let has_heldout = ds.len(Split::HeldOut) > 0;
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let mut updates = 0;
    'epochs: for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc);
        let sampler = EpochSampler::new(ds, Split::Train, tc.batch_size, &mut order_rng)?;
        let (mut loss_sum, mut mae_sum, mut seen) = (0.0, [0.0; 2], 0usize);
        let mut stop = false;
        for keys in sampler {
            let batch = make_batch(ds, &keys, Some((tc.color_jitter, &mut jitter_rng)));
            let step = loss_and_grads(model, &params, &batch, &cfg.loss);
            let (loss, pred, mut grads) = match step {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) | Err(TensorError::NonFinite { .. }) => {
                    return Err(TrainError::NonFinite { epoch, update: updates, diagnostic: Box::new(params) });
                }
                Err(e) => return Err(e.into()),
            };
            clip_grad_norm(&mut grads, tc.grad_clip);
            opt.step(&mut params, &grads, lr, tc);
            updates += 1;
            loss_sum += loss * keys.len() as f64;
            accumulate_mae(&pred, batch.targets.data(), &mut mae_sum);
            seen += keys.len();
            if tc.max_updates > 0 && updates >= tc.max_updates {
                stop = true;
                break;
            }
        }
        let last = stop || epoch + 1 == tc.epochs;
        let n = seen.max(1) as f64;
        let mut rec = LogRecord {
            epoch,
            updates,
            lr,
            train_loss: loss_sum / n,
            train_mae_steer: mae_sum[0] / n,
            train_mae_accel: mae_sum[1] / n,
            heldout_mae_steer: None,
            heldout_mae_accel: None,
        };
        if has_heldout && (last || (tc.log_every > 0 && (epoch + 1) % tc.log_every == 0)) {
            let m = evaluate_offline(model, &params, ds, Split::HeldOut, tc.batch_size)?;
            rec.heldout_mae_steer = Some(m.steer);
            rec.heldout_mae_accel = Some(m.accel);
        }
        on_log(&rec);
        log.push(rec);
        if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 {
            snapshots.push((epoch + 1, params.clone()));
        }
        if stop {
            break 'epochs;
        }
    }
    Ok(TrainOutcome { params, log, updates, snapshots })
}

/// Writes the log as one JSON record per line.
pub fn write_train_log(log: &[LogRecord]) -> String {
    log.iter().map(|r| serde_json::to_string(r).expect("log record serializes") + "\n").collect()
}
