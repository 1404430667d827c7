//! Multitask training: joint-state cross-entropy plus an auxiliary VAD
//! binary cross-entropy, optimized with AdamW; the checkpoint returned is
//! the epoch with the smallest validation loss.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

use crate::corpus::{make_windows, SessionRecord};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, FeatureNormalizer};
use crate::net::layers::Scalar;
use crate::net::{Model, ModelConfig, ModelMetadata, ModelOutput, Network};
use crate::projection::{ProjectionConfig, StateIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the auxiliary VAD loss in the total.
    pub vad_loss_weight: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub gradient_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 3.64e-4,
            weight_decay: 0.001,
            vad_loss_weight: 1.0,
            seed: 0,
            gradient_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("epochs, batch size and learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.vad_loss_weight < 0.0 || self.gradient_clip < 0.0 {
            return Err(Error::Config("negative weight in train config".into()));
        }
        Ok(())
    }
}

/// One 20 s training example in feature space.
#[derive(Debug, Clone)]
pub struct FeaturizedWindow {
    /// Per channel: `frames x mel_bins`.
    pub features: Vec<Array2<f32>>,
    pub labels: Vec<StateIndex>,
    /// `frames x speakers`, 0/1 targets for the VAD head.
    pub vad_targets: Array2<f32>,
    /// Originating session and window start time in seconds.
    pub source: (String, f64),
}

/// Loss components; `total = vap + lambda * vad`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub vap: f64,
    pub vad: f64,
}

impl LossParts {
    fn zero() -> Self {
        Self { total: 0.0, vap: 0.0, vad: 0.0 }
    }

    fn add_weighted(&mut self, other: &LossParts, w: f64) {
        self.total += other.total * w;
        self.vap += other.vap * w;
        self.vad += other.vad * w;
    }
}

/// Mean VAP cross-entropy and VAD binary cross-entropy of one window.
pub fn loss<T: Scalar>(
    output: &ModelOutput<T>,
    labels: &[StateIndex],
    vad_targets: &Array2<T>,
    vad_loss_weight: f64,
) -> Result<LossParts> {
    Ok(loss_and_grad(output, labels, vad_targets, vad_loss_weight, false)?.0)
}

/// Loss plus, optionally, the gradients w.r.t. both logit matrices.
pub fn loss_and_grad<T: Scalar>(
    output: &ModelOutput<T>,
    labels: &[StateIndex],
    vad_targets: &Array2<T>,
    vad_loss_weight: f64,
    want_grad: bool,
) -> Result<(LossParts, Option<(Array2<T>, Array2<T>)>)> {
    let (t_len, states) = output.vap_logits.dim();
    let (vt_len, s_count) = output.vad_logits.dim();
    if labels.len() != t_len || vt_len != t_len || vad_targets.dim() != (t_len, s_count) {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs disagree: {} logit frames, {} labels, vad {:?}",
            t_len,
            labels.len(),
            vad_targets.dim()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| l.0 as usize >= states) {
        return Err(Error::StateOutOfRange(bad.0, states));
    }

    let mut d_vap = want_grad.then(|| Array2::<T>::zeros((t_len, states)));
    let mut d_vad = want_grad.then(|| Array2::<T>::zeros((t_len, s_count)));
    let inv_t = 1.0 / t_len as f64;
    let inv_ts = 1.0 / (t_len * s_count) as f64;

    let mut vap_loss = 0.0f64;
    for t in 0..t_len {
        let row = output.vap_logits.row(t);
        let row = row.to_slice().unwrap();
        let mut max = T::from_f64(f64::NEG_INFINITY);
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp_fast();
        }
        let lse = denom.to_f64().ln() + max.to_f64();
        let label = labels[t].0 as usize;
        vap_loss += lse - row[label].to_f64();
        if let Some(d) = d_vap.as_mut() {
            let inv_denom = T::one() / denom;
            let scale = T::from_f64(inv_t);
            let mut drow = d.row_mut(t);
            let drow = drow.as_slice_mut().unwrap();
            for (j, &v) in row.iter().enumerate() {
                drow[j] = (v - max).exp_fast() * inv_denom * scale;
            }
            drow[label] = drow[label] - scale;
        }
    }
    vap_loss *= inv_t;

    let mut vad_loss = 0.0f64;
    for t in 0..t_len {
        for c in 0..s_count {
            let x = output.vad_logits[[t, c]].to_f64();
            let y = vad_targets[[t, c]].to_f64();
            // Numerically stable BCE with logits.
            vad_loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            if let Some(d) = d_vad.as_mut() {
                let sigma = 1.0 / (1.0 + (-x).exp());
                d[[t, c]] = T::from_f64(vad_loss_weight * (sigma - y) * inv_ts);
            }
        }
    }
    vad_loss *= inv_ts;

    let parts = LossParts {
        total: vap_loss + vad_loss_weight * vad_loss,
        vap: vap_loss,
        vad: vad_loss,
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((parts, d_vap.map(|v| (v, d_vad.unwrap()))))
}

/// Decoupled-weight-decay Adam.
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &Network<T>, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.slice().len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Network<T>, grads: &Network<T>) {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let decay = T::from_f64(self.lr * self.weight_decay);
        let gts = grads.tensors();
        for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let g = gts[i].1.slice();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps) - decay * p[j];
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut Network<T>, clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, t) in grads.tensors() {
        for &v in t.slice() {
            sq += v.to_f64() * v.to_f64();
        }
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let scale = T::from_f64(clip / norm);
        for (_, t) in grads.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossParts,
    pub validation: LossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose validation loss was smallest.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_time_secs: f64,
    pub parameter_count: usize,
    pub train_windows: usize,
    pub val_windows: usize,
}

impl TrainReport {
    /// Structured text form. Every line is deterministic for a fixed seed
    /// and dataset except the trailing wall-time comment.
    pub fn to_text(&self) -> String {
        let mut s = String::from("#train_report v1\n");
        s.push_str(&format!("parameter_count={}\n", self.parameter_count));
        s.push_str(&format!("train_windows={}\n", self.train_windows));
        s.push_str(&format!("val_windows={}\n", self.val_windows));
        s.push_str("#epoch\ttrain_total\ttrain_vap\ttrain_vad\tval_total\tval_vap\tval_vad\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                e.epoch,
                e.train.total,
                e.train.vap,
                e.train.vad,
                e.validation.total,
                e.validation.vap,
                e.validation.vad
            ));
        }
        s.push_str(&format!("best_epoch={}\n", self.best_epoch));
        s.push_str(&format!("best_val_loss={:.6}\n", self.best_val_loss));
        s.push_str(&format!("# wall_time_secs={:.1}\n", self.wall_time_secs));
        s
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Forward+backward of one window; returns its loss and gradients.
fn window_pass(
    net: &Network<f32>,
    window: &FeaturizedWindow,
    vad_loss_weight: f64,
    dropout: f64,
    dropout_seed: u64,
) -> Result<(LossParts, Network<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (out, cache) =
        net.forward(&window.features, 0, usize::MAX, Some((&mut rng, dropout)))?;
    let (parts, grads) =
        loss_and_grad(&out, &window.labels, &window.vad_targets, vad_loss_weight, true)?;
    let (d_vap, d_vad) = grads.unwrap();
    let mut g = Network::zeros(&net.cfg);
    net.backward(&cache.unwrap(), &d_vap, &d_vad, &mut g);
    Ok((parts, g))
}

/// Mean validation loss over windows (no dropout).
pub fn evaluate_loss(
    net: &Network<f32>,
    windows: &[FeaturizedWindow],
    vad_loss_weight: f64,
) -> Result<LossParts> {
    if windows.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let parts: Vec<LossParts> = windows
        .par_iter()
        .map(|w| {
            let (out, _) = net.forward(&w.features, 0, usize::MAX, None)?;
            loss(&out, &w.labels, &w.vad_targets, vad_loss_weight)
        })
        .collect::<Result<_>>()?;
    let mut acc = LossParts::zero();
    let w = 1.0 / parts.len() as f64;
    for p in &parts {
        acc.add_weighted(p, w);
    }
    Ok(acc)
}

/// Train a fresh network and return the best-validation model.
///
/// Deterministic for a fixed seed and dataset (up to the platform's
/// floating-point behavior): initialization, shuffling and dropout all
/// derive from `cfg.seed`, and batch gradients are reduced in window
/// order no matter how the pool schedules them.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model_cfg: &ModelConfig,
    projection: &ProjectionConfig,
    feature_cfg: &FeatureConfig,
    normalizer: FeatureNormalizer,
    train_windows: &[FeaturizedWindow],
    val_windows: &[FeaturizedWindow],
    cfg: &TrainConfig,
    split: (u64, (f64, f64, f64)),
    progress: &mut dyn FnMut(String),
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    model_cfg.validate()?;
    model_cfg.check_projection(projection)?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let start = Instant::now();
    let mut net = Network::<f32>::init(model_cfg.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&net, cfg.learning_rate, cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5155_4646));

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Network<f32>)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut train_acc = LossParts::zero();
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let passes: Vec<Result<(LossParts, Network<f32>)>> = batch
                .par_iter()
                .map(|&wi| {
                    window_pass(
                        &net,
                        &train_windows[wi],
                        cfg.vad_loss_weight,
                        model_cfg.dropout,
                        splitmix64(cfg.seed ^ splitmix64(((step as u64) << 20) | wi as u64)),
                    )
                })
                .collect();
            let mut grads = Network::zeros(model_cfg);
            let inv_batch = 1.0 / batch.len() as f64;
            for pass in passes {
                let (parts, g) = pass?;
                if !parts.total.is_finite() {
                    return Err(Error::Diverged(step));
                }
                train_acc.add_weighted(&parts, 1.0);
                accumulate(&mut grads, &g, inv_batch as f32);
            }
            clip_gradients(&mut grads, cfg.gradient_clip);
            opt.step(&mut net, &grads);
        }
        let scale = 1.0 / train_windows.len() as f64;
        train_acc = LossParts {
            total: train_acc.total * scale,
            vap: train_acc.vap * scale,
            vad: train_acc.vad * scale,
        };
        let validation = evaluate_loss(&net, val_windows, cfg.vad_loss_weight)?;
        if !validation.total.is_finite() {
            return Err(Error::Diverged(step));
        }
        let stats = EpochStats { epoch, train: train_acc, validation };
        progress(format!(
            "epoch {}/{} train {:.4} (vap {:.4} vad {:.4}) val {:.4} (vap {:.4} vad {:.4})",
            epoch,
            cfg.epochs,
            stats.train.total,
            stats.train.vap,
            stats.train.vad,
            validation.total,
            validation.vap,
            validation.vad
        ));
        if best.as_ref().map_or(true, |(_, loss, _)| validation.total < *loss) {
            best = Some((epoch, validation.total, net.clone()));
        }
        epochs.push(stats);
    }

    let (best_epoch, best_val_loss, best_net) = best.expect("at least one epoch ran");
    let report = TrainReport {
        epochs,
        best_epoch,
        best_val_loss,
        wall_time_secs: start.elapsed().as_secs_f64(),
        parameter_count: best_net.parameter_count(),
        train_windows: train_windows.len(),
        val_windows: val_windows.len(),
    };
    let metadata = ModelMetadata {
        epoch: best_epoch,
        validation_loss: best_val_loss,
        seed: cfg.seed,
        split_seed: split.0,
        split_fractions: split.1,
    };
    let model = Model::new(best_net, projection.clone(), feature_cfg.clone(), normalizer, metadata)?;
    Ok((model, report))
}

fn accumulate(into: &mut Network<f32>, from: &Network<f32>, scale: f32) {
    let src = from.tensors();
    for (i, (_, dst)) in into.tensors_mut().into_iter().enumerate() {
        let s = src[i].1.slice();
        for (d, &v) in dst.iter_mut().zip(s) {
            *d += v * scale;
        }
    }
}

/// Turn a session into featurized (unnormalized) training windows.
pub fn featurize_session(
    session: &SessionRecord,
    projection: &ProjectionConfig,
    extractor: &FeatureExtractor,
    hop_secs: f64,
) -> Result<Vec<FeaturizedWindow>> {
    let windows = make_windows(session, projection, hop_secs)?;
    windows
        .into_iter()
        .map(|w| {
            let features = extractor.extract(&w.audio)?;
            let frames = features[0].nrows();
            if frames != w.labels.len() {
                return Err(Error::ShapeMismatch(format!(
                    "window produced {} feature frames but {} labels",
                    frames,
                    w.labels.len()
                )));
            }
            let vad_targets = Array2::from_shape_fn((frames, session.speaker_count()), |(t, s)| {
                w.vad_targets[s][t] as f32
            });
            Ok(FeaturizedWindow {
                features,
                labels: w.labels,
                vad_targets,
                source: w.source,
            })
        })
        .collect()
}

/// Fit normalization statistics on the training split and apply them to
/// every window in place.
pub fn normalize_windows(
    train_windows: &mut [FeaturizedWindow],
    other_windows: &mut [FeaturizedWindow],
    mel_bins: usize,
) -> FeatureNormalizer {
    let normalizer =
        FeatureNormalizer::fit(train_windows.iter().flat_map(|w| w.features.iter()), mel_bins);
    for w in train_windows.iter_mut().chain(other_windows.iter_mut()) {
        for f in &mut w.features {
            normalizer.apply(f);
        }
    }
    normalizer
}
