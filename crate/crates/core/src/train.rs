//! Optimizers, learning-rate schedules, regularizers and the training loop.

use rand::Rng as _;
use rand_distr::Distribution;

use crate::checkpoint::Checkpoint;
use crate::data::{self, augment, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::model::{
    bind_params, build_forward, init_params, patchify, MixerConfig, MixerParams, Phase,
};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::surgery::{permute_input, PermSpec};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    },
    SgdMomentum {
        momentum: f64,
    },
}

impl Optimizer {
    /// The pre-training recipe: Adam(0.9, 0.999) with decoupled weight decay.
    pub fn adam(weight_decay: f64) -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay,
        }
    }

    /// The fine-tuning recipe: momentum SGD without weight decay.
    pub fn sgd() -> Self {
        Optimizer::SgdMomentum { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    LinearWarmupLinearDecay {
        warmup_steps: u64,
        total_steps: u64,
        peak_lr: f64,
    },
    LinearWarmupCosine {
        warmup_steps: u64,
        total_steps: u64,
        peak_lr: f64,
    },
}

impl Schedule {
    pub fn total_steps(&self) -> u64 {
        match *self {
            Schedule::LinearWarmupLinearDecay { total_steps, .. }
            | Schedule::LinearWarmupCosine { total_steps, .. } => total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, t) = match *self {
            Schedule::LinearWarmupLinearDecay {
                warmup_steps,
                total_steps,
                ..
            }
            | Schedule::LinearWarmupCosine {
                warmup_steps,
                total_steps,
                ..
            } => (warmup_steps, total_steps),
        };
        if w > t {
            return Err(Error::Contract(format!(
                "warmup_steps {w} exceeds total_steps {t}"
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` in `0..=total_steps`: linear ramp from zero over
/// the warmup, then linear or cosine decay to zero.
pub fn lr_at(schedule: &Schedule, step: u64) -> Result<f64> {
    schedule.validate()?;
    let (warmup, total, peak, cosine) = match *schedule {
        Schedule::LinearWarmupLinearDecay {
            warmup_steps,
            total_steps,
            peak_lr,
        } => (warmup_steps, total_steps, peak_lr, false),
        Schedule::LinearWarmupCosine {
            warmup_steps,
            total_steps,
            peak_lr,
        } => (warmup_steps, total_steps, peak_lr, true),
    };
    if step > total {
        return Err(Error::Contract(format!(
            "step {step} out of schedule range 0..={total}"
        )));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let t = if total == warmup {
        0.0
    } else {
        (step - warmup) as f64 / (total - warmup) as f64
    };
    Ok(if cosine {
        0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
    } else {
        peak * (1.0 - t)
    })
}

/// First and second moment estimates, in canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &MixerParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .flatten()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update with bias correction; weight decay is decoupled and
/// applied to the parameters before the moment update.
pub fn adam_step<T: Scalar>(
    params: &mut MixerParams<T>,
    grads: &MixerParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) {
    state.t += 1;
    let corr1 = 1.0 - beta1.powi(state.t as i32);
    let corr2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2) = (T::of_f64(beta1), T::of_f64(beta2));
    let one_m_b1 = T::of_f64(1.0 - beta1);
    let one_m_b2 = T::of_f64(1.0 - beta2);
    let lr_t = T::of_f64(lr);
    let eps = T::of_f64(ADAM_EPS);
    let decay = T::of_f64(1.0 - lr * weight_decay);
    let (c1, c2) = (T::of_f64(corr1), T::of_f64(corr2));

    let gflat = grads.flatten();
    let mut i = 0;
    params.visit_mut(|_, p| {
        let g = gflat[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            if weight_decay != 0.0 {
                *pv = *pv * decay;
            }
            *mv = b1 * *mv + one_m_b1 * gv;
            *vv = b2 * *vv + one_m_b2 * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        i += 1;
    });
}

#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &MixerParams<T>) -> Self {
        SgdState {
            velocity: params
                .flatten()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }
}

/// `v' = mu v + g; p' = p - lr v'`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut MixerParams<T>,
    grads: &MixerParams<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
) {
    let mu = T::of_f64(momentum);
    let lr_t = T::of_f64(lr);
    let gflat = grads.flatten();
    let mut i = 0;
    params.visit_mut(|_, p| {
        let g = gflat[i];
        let v = &mut state.velocity[i];
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            *vv = mu * *vv + gv;
            *pv = *pv - lr_t * *vv;
        }
        i += 1;
    });
}

/// Scale all gradients so the global L2 norm does not exceed `c`; returns the
/// pre-clip norm. Norms within a relative 1e-9 of `c` count as within, which
/// makes the operation exactly idempotent despite rounding.
pub fn clip_global_norm<T: Scalar>(grads: &mut MixerParams<T>, c: f64) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::Contract(format!("clip norm must be > 0, got {c}")));
    }
    let mut sq = 0.0f64;
    grads.visit(|_, t| {
        for v in t.data() {
            let x = v.as_f64();
            sq += x * x;
        }
    });
    let norm = sq.sqrt();
    if norm > c * (1.0 + 1e-9) {
        let s = T::of_f64(c / norm);
        grads.visit_mut(|_, t| {
            for v in t.data_mut() {
                *v = *v * s;
            }
        });
    }
    Ok(norm)
}

/// Gradients arranged like the parameters; leaves that never reached the loss
/// get zeros.
pub fn grads_like<T: Scalar>(
    template: &MixerParams<T>,
    grads: &Gradients<T>,
) -> MixerParams<T> {
    let mut out = template.clone();
    out.visit_mut(|name, t| {
        *t = match grads.by_name(&name) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    });
    out
}

/// Deterministic mixup core: `x' = l x + (1-l) x[perm]`, same for targets.
pub fn mixup_with(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    lambda: f64,
    perm: &[usize],
) -> (Tensor<f32>, Tensor<f32>) {
    let l = lambda as f32;
    let blend = |t: &Tensor<f32>| -> Tensor<f32> {
        let slab = t.numel() / t.shape()[0];
        let mut data = Vec::with_capacity(t.numel());
        for (i, &j) in perm.iter().enumerate() {
            let a = &t.data()[i * slab..(i + 1) * slab];
            let b = &t.data()[j * slab..(j + 1) * slab];
            data.extend(a.iter().zip(b).map(|(&av, &bv)| l * av + (1.0 - l) * bv));
        }
        Tensor::from_vec(t.shape(), data).expect("mixup preserves shape")
    };
    (blend(x), blend(y))
}

/// Batch mixup: one `lambda ~ Beta(p, p)` and one pairing permutation per
/// call; `p = 0` is the exact identity.
pub fn mixup(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    p: f64,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if p < 0.0 {
        return Err(Error::Contract(format!("mixup strength must be >= 0, got {p}")));
    }
    if p == 0.0 {
        return Ok((x.clone(), y.clone()));
    }
    let beta = rand_distr::Beta::new(p, p)
        .map_err(|e| Error::Contract(format!("Beta({p},{p}): {e}")))?;
    let lambda: f64 = beta.sample(rng);
    let perm = rng::permutation(x.shape()[0], rng);
    Ok(mixup_with(x, y, lambda, &perm))
}

/// A complete training specification; together with the datasets this fully
/// determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub clip_norm: f64,
    pub batch: usize,
    pub mixup_p: f64,
    pub drop_rate: f64,
    pub stoch_depth: f64,
    pub seed: u64,
    /// Metrics cadence in steps; defaults to once per epoch.
    pub log_every: Option<u64>,
}

impl TrainPlan {
    /// Desk-scale pre-training defaults: Adam, linear decay, peak 1e-3,
    /// weight decay 0.1, warmup 5% of total steps, clip at global norm 1.
    pub fn pretrain(total_steps: u64, batch: usize, seed: u64) -> Self {
        TrainPlan {
            optimizer: Optimizer::adam(0.1),
            schedule: Schedule::LinearWarmupLinearDecay {
                warmup_steps: total_steps / 20,
                total_steps,
                peak_lr: 1e-3,
            },
            clip_norm: 1.0,
            batch,
            mixup_p: 0.0,
            drop_rate: 0.0,
            stoch_depth: 0.0,
            seed,
            log_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.clip_norm <= 0.0 {
            return Err(Error::Contract("clip_norm must be > 0".into()));
        }
        if self.mixup_p < 0.0 {
            return Err(Error::Contract("mixup_p must be >= 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Contract("batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

pub trait MetricsSink {
    fn row(&mut self, row: &MetricsRow);
}

/// Collects rows in memory (tests, probes).
#[derive(Default)]
pub struct VecSink(pub Vec<MetricsRow>);

impl MetricsSink for VecSink {
    fn row(&mut self, row: &MetricsRow) {
        self.0.push(row.clone());
    }
}

/// Writes the metrics CSV: UTF-8, LF line endings, one fixed header.
pub struct CsvSink<W: std::io::Write> {
    w: W,
}

impl<W: std::io::Write> CsvSink<W> {
    pub fn new(mut w: W) -> Result<Self> {
        w.write_all(b"step,epoch,lr,train_loss,train_acc,val_loss,val_acc\n")?;
        Ok(CsvSink { w })
    }

    pub fn into_inner(self) -> W {
        self.w
    }
}

impl<W: std::io::Write> MetricsSink for CsvSink<W> {
    fn row(&mut self, row: &MetricsRow) {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let line = format!(
            "{},{},{},{},{},{},{}\n",
            row.step,
            row.epoch,
            row.lr,
            row.train_loss,
            row.train_acc,
            opt(row.val_loss),
            opt(row.val_acc)
        );
        let _ = self.w.write_all(line.as_bytes());
    }
}

/// Index of the row maximum; ties break to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode loss and top-1 accuracy over a dataset.
pub fn evaluate(
    config: &MixerConfig,
    params: &MixerParams<f32>,
    ds: &Dataset,
    input_perm: Option<&PermSpec>,
    batch: usize,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut i = 0;
    while i < ds.len() {
        let hi = (i + batch).min(ds.len());
        let indices: Vec<usize> = (i..hi).collect();
        let mut images = ds.batch(&indices);
        if let Some(spec) = input_perm {
            images = permute_input(config, &images, spec)?;
        }
        let images = data::normalize(&images);
        let labels = ds.labels_at(&indices);
        let targets = data::one_hot(&labels, config.num_classes);

        let patches = patchify(config, &images)?;
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params);
        let input = g.input(patches);
        let nodes = build_forward(&mut g, config, &bound, input, Phase::Eval, None)?;
        let loss = g.softmax_xent(nodes.logits, targets)?;
        loss_sum += g.value(loss).item() as f64 * indices.len() as f64;
        let logits = g.value(nodes.logits);
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits.data()[r * config.num_classes..(r + 1) * config.num_classes];
            if argmax(row) == label as usize {
                correct += 1;
            }
        }
        i = hi;
    }
    Ok((loss_sum / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Run the full recipe: shuffle, augment, permute, mixup, forward, loss,
/// backward, clip, schedule, optimizer step. Deterministic in the plan seed.
pub fn train_loop(
    config: &MixerConfig,
    plan: &TrainPlan,
    train: &Dataset,
    val: Option<&Dataset>,
    input_perm: Option<&PermSpec>,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    config.validate()?;
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    if train.len() < plan.batch {
        return Err(Error::Dataset(format!(
            "dataset of {} examples cannot fill a batch of {}",
            train.len(),
            plan.batch
        )));
    }

    let mut cfg = config.clone();
    cfg.drop_rate = plan.drop_rate;
    cfg.stoch_depth = plan.stoch_depth;

    let mut params = init_params::<f32>(&cfg, plan.seed)?;
    let mut adam_state = AdamState::new(&params);
    let mut sgd_state = SgdState::new(&params);

    let mut shuffle_rng = rng::stream(plan.seed, 1);
    let mut augment_rng = rng::stream(plan.seed, 2);
    let mut mixup_rng = rng::stream(plan.seed, 3);
    let mut model_rng = rng::stream(plan.seed, 4);

    let steps_per_epoch = (train.len() / plan.batch) as u64;
    let total_steps = plan.schedule.total_steps();
    let log_every = plan.log_every.unwrap_or(steps_per_epoch).max(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut window_loss = 0.0f64;
    let mut window_acc = 0.0f64;
    let mut window_n = 0u64;

    for step in 0..total_steps {
        let in_epoch = step % steps_per_epoch;
        if in_epoch == 0 {
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        let epoch = step / steps_per_epoch;
        let indices =
            &order[in_epoch as usize * plan.batch..(in_epoch as usize + 1) * plan.batch];

        // input pipeline: augment per image, then the fixed permutation,
        // normalization and mixup
        let (h, w, ch) = train.image_dims();
        let mut batch_data = Vec::with_capacity(plan.batch * h * w * ch);
        for &i in indices {
            let img = augment(&train.image(i), &mut augment_rng);
            batch_data.extend_from_slice(img.data());
        }
        let mut images = Tensor::from_vec(&[plan.batch, h, w, ch], batch_data)?;
        if let Some(spec) = input_perm {
            images = permute_input(&cfg, &images, spec)?;
        }
        let images = data::normalize(&images);
        let targets = data::one_hot(&train.labels_at(indices), cfg.num_classes);
        let (images, targets) = mixup(&images, &targets, plan.mixup_p, &mut mixup_rng)?;

        // forward/backward
        let patches = patchify(&cfg, &images)?;
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params);
        let input = g.input(patches);
        let nodes = build_forward(
            &mut g,
            &cfg,
            &bound,
            input,
            Phase::Train,
            Some(&mut model_rng),
        )?;
        let loss_node = g.softmax_xent(nodes.logits, targets.clone())?;
        let loss = g.value(loss_node).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.backward(loss_node)?;
        let mut grads = grads_like(&params, &grads);
        clip_global_norm(&mut grads, plan.clip_norm)?;

        let lr = lr_at(&plan.schedule, step + 1)?;
        match plan.optimizer {
            Optimizer::Adam {
                beta1,
                beta2,
                weight_decay,
            } => adam_step(
                &mut params,
                &grads,
                &mut adam_state,
                lr,
                beta1,
                beta2,
                weight_decay,
            ),
            Optimizer::SgdMomentum { momentum } => {
                sgd_momentum_step(&mut params, &grads, &mut sgd_state, lr, momentum)
            }
        }

        // batch accuracy against the dominant mixed label
        let logits = g.value(nodes.logits);
        let k = cfg.num_classes;
        let mut correct = 0;
        for r in 0..plan.batch {
            let lrow = &logits.data()[r * k..(r + 1) * k];
            let trow = &targets.data()[r * k..(r + 1) * k];
            if argmax(lrow) == argmax(trow) {
                correct += 1;
            }
        }
        window_loss += loss as f64;
        window_acc += correct as f64 / plan.batch as f64;
        window_n += 1;

        if (step + 1) % log_every == 0 || step + 1 == total_steps {
            let (val_loss, val_acc) = match val {
                Some(vds) => {
                    let (l, a) = evaluate(&cfg, &params, vds, input_perm, plan.batch)?;
                    (Some(l), Some(a))
                }
                None => (None, None),
            };
            sink.row(&MetricsRow {
                step: step + 1,
                epoch: epoch + 1,
                lr,
                train_loss: window_loss / window_n as f64,
                train_acc: window_acc / window_n as f64,
                val_loss,
                val_acc,
            });
            window_loss = 0.0;
            window_acc = 0.0;
            window_n = 0;
        }
    }

    Ok(Checkpoint {
        config: cfg,
        params,
        step: total_steps,
    })
}
