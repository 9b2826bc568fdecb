//! Small recurrent classifier: per-step hidden states and logits, trained
//! with backpropagation through time, frozen afterwards for the stopping
//! modules.
//!
//!   h_t = tanh(W_in x_t + W_rec h_{t-1} + b),  h_0 = 0
//!   l_t = W_out h_t + b_out

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffcore::{matmul, Adam, AdamConfig, Array, DiffError, Tape, Var};
use crate::seed::{derive_seed, TAG_BATCH_ORDER, TAG_PARAM_INIT};
use crate::stimuli::Dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone)]
pub struct RnnParams {
    pub w_in: Array,
    pub w_rec: Array,
    pub b: Array,
    pub w_out: Array,
    pub b_out: Array,
}

impl RnnParams {
    pub fn init(d_in: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_PARAM_INIT, 0));
        let mut randn = |shape: Vec<usize>, std: f32| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Array::raw(shape, data)
        };
        RnnParams {
            w_in: randn(vec![d_in, hidden], 1.0 / (d_in as f32).sqrt()),
            w_rec: randn(vec![hidden, hidden], 0.5 / (hidden as f32).sqrt()),
            b: Array::zeros(vec![hidden]),
            w_out: randn(vec![hidden, classes], 1.0 / (hidden as f32).sqrt()),
            b_out: Array::zeros(vec![classes]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn n_classes(&self) -> usize {
        self.w_out.shape()[1]
    }

    /// SHA-256 over the little-endian bytes of all parameter arrays, used to
    /// verify the freezing contract.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for arr in [&self.w_in, &self.w_rec, &self.b, &self.w_out, &self.b_out] {
            for v in arr.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("backbone", seed, config_hash);
        ck.push("w_in", self.w_in.clone());
        ck.push("w_rec", self.w_rec.clone());
        ck.push("b", self.b.clone());
        ck.push("w_out", self.w_out.clone());
        ck.push("b_out", self.b_out.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        Ok(RnnParams {
            w_in: ck.get("w_in")?.clone(),
            w_rec: ck.get("w_rec")?.clone(),
            b: ck.get("b")?.clone(),
            w_out: ck.get("w_out")?.clone(),
            b_out: ck.get("b_out")?.clone(),
        })
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hidden states and per-step logits for one trial.
#[derive(Debug, Clone)]
pub struct HiddenTrace {
    pub n_steps: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    /// `n_steps × hidden_dim`, row-major.
    pub hidden: Vec<f32>,
    /// `n_steps × n_classes`, row-major.
    pub logits: Vec<f32>,
}

impl HiddenTrace {
    pub fn hidden_at(&self, t: usize) -> &[f32] {
        &self.hidden[t * self.hidden_dim..(t + 1) * self.hidden_dim]
    }

    pub fn logits_at(&self, t: usize) -> &[f32] {
        &self.logits[t * self.n_classes..(t + 1) * self.n_classes]
    }
}

/// Plain (untaped) forward pass over one evidence stream laid out as
/// `n_steps × d_in`.
pub fn forward(params: &RnnParams, stream: &[f32]) -> Result<HiddenTrace, BackboneError> {
    let d_in = params.input_dim();
    let k = params.hidden_dim();
    let c = params.n_classes();
    if stream.len() % d_in != 0 {
        return Err(BackboneError::Dim(format!(
            "stream length {} is not a multiple of input dim {d_in}",
            stream.len()
        )));
    }
    let n = stream.len() / d_in;
    let mut hidden = Vec::with_capacity(n * k);
    let mut logits = Vec::with_capacity(n * c);
    let mut h = vec![0.0f32; k];
    for t in 0..n {
        let x = &stream[t * d_in..(t + 1) * d_in];
        let mut pre = matmul(x, params.w_in.data(), 1, d_in, k);
        let hr = matmul(&h, params.w_rec.data(), 1, k, k);
        for j in 0..k {
            pre[j] = (pre[j] + hr[j] + params.b.data()[j]).tanh();
        }
        h = pre;
        let mut l = matmul(&h, params.w_out.data(), 1, k, c);
        for j in 0..c {
            l[j] += params.b_out.data()[j];
        }
        hidden.extend_from_slice(&h);
        logits.extend_from_slice(&l);
    }
    Ok(HiddenTrace {
        n_steps: n,
        hidden_dim: k,
        n_classes: c,
        hidden,
        logits,
    })
}

/// Logit pooling for pre-training supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitPool {
    /// Cross-entropy on per-step logits averaged over time.
    Mean,
    /// Cross-entropy on the final step's logits.
    Final,
}

pub struct BackboneLeaves {
    pub w_in: Var,
    pub w_rec: Var,
    pub b: Var,
    pub w_out: Var,
    pub b_out: Var,
}

pub fn insert_leaves(tape: &mut Tape, p: &RnnParams, trainable: bool) -> BackboneLeaves {
    BackboneLeaves {
        w_in: tape.leaf(p.w_in.clone(), trainable),
        w_rec: tape.leaf(p.w_rec.clone(), trainable),
        b: tape.leaf(p.b.clone(), trainable),
        w_out: tape.leaf(p.w_out.clone(), trainable),
        b_out: tape.leaf(p.b_out.clone(), trainable),
    }
}

/// Taped batched forward: `batch` holds `n_steps` blocks of `batch_size × d_in`
/// inputs. Returns the pooled logits (`batch_size × classes`).
pub fn pooled_logits_on_tape(
    tape: &mut Tape,
    leaves: &BackboneLeaves,
    batch: Var,
    n_steps: usize,
    batch_size: usize,
    d_in: usize,
    pool: LogitPool,
) -> Result<Var, DiffError> {
    let k = tape.value(leaves.b).numel();
    let b_tile = tape.tile(leaves.b, batch_size)?;
    let mut h = tape.constant(Array::zeros(vec![batch_size, k]));
    let mut h_acc: Option<Var> = None;
    for t in 0..n_steps {
        let xt = tape.slice(
            batch,
            t * batch_size * d_in,
            batch_size * d_in,
            vec![batch_size, d_in],
        )?;
        let xw = tape.matmul(xt, leaves.w_in)?;
        let hw = tape.matmul(h, leaves.w_rec)?;
        let s = tape.add(xw, hw)?;
        let s = tape.add(s, b_tile)?;
        h = tape.tanh(s)?;
        if pool == LogitPool::Mean {
            h_acc = Some(match h_acc {
                Some(acc) => tape.add(acc, h)?,
                None => h,
            });
        }
    }
    let h_pool = match pool {
        LogitPool::Mean => tape.scale(h_acc.unwrap(), 1.0 / n_steps as f32)?,
        LogitPool::Final => h,
    };
    let bo_tile = tape.tile(leaves.b_out, batch_size)?;
    let logits = tape.matmul(h_pool, leaves.w_out)?;
    tape.add(logits, bo_tile)
}

/// Mean cross-entropy of row-wise logits against integer labels.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
) -> Result<Var, DiffError> {
    let c = tape.value(logits).last_dim();
    let b = labels.len();
    let mut mask = vec![0.0f32; b * c];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * c + y] = 1.0;
    }
    let mask = tape.constant(Array::raw(vec![b, c], mask));
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f32)
}

#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f32,
    pub post_warmup_lr: f32,
    pub batch_size: usize,
    pub pool: LogitPool,
    pub grad_clip: Option<f32>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 100,
            warmup_epochs: 10,
            lr: 1e-3,
            post_warmup_lr: 3e-4,
            batch_size: 64,
            pool: LogitPool::Mean,
            grad_clip: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub warmup: bool,
    pub loss: f64,
    /// Per-condition accuracy on the eval split, empty when none was given.
    pub eval_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n_cond = self
            .epochs
            .first()
            .map(|e| e.eval_accuracy.len())
            .unwrap_or(0);
        let mut header = vec!["epoch".to_string(), "warmup".into(), "loss".into()];
        for i in 0..n_cond {
            header.push(format!("accuracy_c{i}"));
        }
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut rec = vec![
                e.epoch.to_string(),
                (e.warmup as u8).to_string(),
                format!("{:.6}", e.loss),
            ];
            for a in &e.eval_accuracy {
                rec.push(format!("{a:.4}"));
            }
            w.write_record(&rec)?;
        }
        w.flush()
    }
}

/// Where per-epoch checkpoints land during training.
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub seed: u64,
    pub config_hash: &'a str,
}

/// Trains with BPTT. Warm-up epochs run on the warm-up dataset (when given)
/// at `lr`; remaining epochs run on the train split at `post_warmup_lr`.
/// A checkpoint is written after every epoch; divergence aborts with the
/// parameters rolled back to the last finished epoch.
pub fn train_bptt(
    train: &Dataset,
    warmup: Option<&Dataset>,
    eval: Option<&Dataset>,
    params: &mut RnnParams,
    schedule: &TrainSchedule,
    sink: Option<&CheckpointSink>,
) -> Result<TrainLog, BackboneError> {
    if train.is_empty() {
        return Err(BackboneError::EmptyDataset);
    }
    let d_in = params.input_dim();
    if train.meta.n_channels != d_in {
        return Err(BackboneError::Dim(format!(
            "dataset has {} channels, backbone expects {d_in}",
            train.meta.n_channels
        )));
    }

    let mut adam = Adam::new(AdamConfig {
        lr: schedule.lr,
        clip_norm: schedule.grad_clip,
        ..Default::default()
    });
    let mut log = TrainLog::default();

    for epoch in 0..schedule.epochs {
        let in_warmup = epoch < schedule.warmup_epochs && warmup.is_some();
        let data = if in_warmup { warmup.unwrap() } else { train };
        adam.set_lr(if in_warmup {
            schedule.lr
        } else {
            schedule.post_warmup_lr
        });

        let snapshot = params.clone();
        match run_epoch(data, params, schedule, &mut adam, epoch) {
            Ok(loss) => {
                let eval_accuracy = match eval {
                    Some(ds) => accuracy_per_condition(params, ds, schedule.pool)?,
                    None => Vec::new(),
                };
                log.epochs.push(EpochStats {
                    epoch,
                    warmup: in_warmup,
                    loss,
                    eval_accuracy,
                });
                if let Some(sink) = sink {
                    let mut ck = params.to_checkpoint(sink.seed, sink.config_hash);
                    ck.set_meta("epoch", epoch);
                    ck.save(&sink.dir.join("backbone_last.ckpt"))?;
                }
            }
            Err(e) => {
                *params = snapshot;
                return Err(BackboneError::Diverged {
                    epoch,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok(log)
}

fn run_epoch(
    data: &Dataset,
    params: &mut RnnParams,
    schedule: &TrainSchedule,
    adam: &mut Adam,
    epoch: usize,
) -> Result<f64, DiffError> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        schedule.seed,
        TAG_BATCH_ORDER,
        epoch as u64,
    ));
    order.shuffle(&mut rng);

    let d_in = data.meta.n_channels;
    let n_steps = data.meta.n_frames;
    let mut total_loss = 0.0f64;
    let mut n_batches = 0usize;

    for chunk in order.chunks(schedule.batch_size) {
        let bsz = chunk.len();
        // inputs laid out time-major: n_steps blocks of (bsz × d_in)
        let mut xs = vec![0.0f32; n_steps * bsz * d_in];
        let mut labels = Vec::with_capacity(bsz);
        for (bi, &ri) in chunk.iter().enumerate() {
            let rec = &data.records[ri];
            labels.push(rec.label);
            for t in 0..n_steps {
                let src = &rec.stream[t * d_in..(t + 1) * d_in];
                let dst = (t * bsz + bi) * d_in;
                xs[dst..dst + d_in].copy_from_slice(src);
            }
        }

        let mut tape = Tape::new();
        let leaves = insert_leaves(&mut tape, params, true);
        let batch = tape.constant(Array::raw(vec![n_steps * bsz, d_in], xs));
        let logits = pooled_logits_on_tape(
            &mut tape, &leaves, batch, n_steps, bsz, d_in, schedule.pool,
        )?;
        let loss = cross_entropy_on_tape(&mut tape, logits, &labels)?;
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(DiffError::NonFinite {
                context: "bptt loss".into(),
                index: 0,
                value: loss_val as f32,
            });
        }
        let grads = tape.backward(loss)?;

        adam.step(
            &mut [
                ("w_in", &mut params.w_in),
                ("w_rec", &mut params.w_rec),
                ("b", &mut params.b),
                ("w_out", &mut params.w_out),
                ("b_out", &mut params.b_out),
            ],
            &[
                grads.expect(leaves.w_in),
                grads.expect(leaves.w_rec),
                grads.expect(leaves.b),
                grads.expect(leaves.w_out),
                grads.expect(leaves.b_out),
            ],
        )?;
        total_loss += loss_val;
        n_batches += 1;
    }
    Ok(total_loss / n_batches.max(1) as f64)
}

/// Pooled-logit classification accuracy per condition index.
pub fn accuracy_per_condition(
    params: &RnnParams,
    data: &Dataset,
    pool: LogitPool,
) -> Result<Vec<f64>, BackboneError> {
    let n_cond = data.n_conditions();
    let mut correct = vec![0usize; n_cond];
    let mut total = vec![0usize; n_cond];
    for rec in &data.records {
        let trace = forward(params, &rec.stream)?;
        let choice = pooled_choice(&trace, pool);
        total[rec.condition] += 1;
        if choice == rec.label {
            correct[rec.condition] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(&total)
        .map(|(c, t)| *c as f64 / (*t).max(1) as f64)
        .collect())
}

pub fn pooled_choice(trace: &HiddenTrace, pool: LogitPool) -> usize {
    let c = trace.n_classes;
    let pooled: Vec<f32> = match pool {
        LogitPool::Mean => {
            let mut acc = vec![0.0f32; c];
            for t in 0..trace.n_steps {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += trace.logits_at(t)[j];
                }
            }
            acc.iter().map(|a| a / trace.n_steps as f32).collect()
        }
        LogitPool::Final => trace.logits_at(trace.n_steps - 1).to_vec(),
    };
    argmax(&pooled)
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
