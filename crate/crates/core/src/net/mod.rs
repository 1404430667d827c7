//! The causal multi-channel projection network.
//!
//! Per channel: linear projection of log-mel features to `d_model`,
//! sinusoidal positional encoding, one causal self-attention layer, then a
//! stack of multi-channel layers (causal self-attention, causal
//! cross-attention over the other channels, feed-forward). All channel
//! weights are shared. The per-frame channel streams feed two output
//! heads: the joint future-activity state logits and per-speaker VAD
//! logits.
//!
//! The output heads are weight-tied per channel: the state logit is the
//! sum over speakers of a shared per-bin-pattern score of that speaker's
//! stream, and the VAD logit applies one shared vector per channel. Tying
//! is what makes the network exactly equivariant to speaker permutations.

pub mod checkpoint;
pub mod incremental;
pub mod layers;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, FeatureNormalizer};
use crate::projection::{speaker_future_probability, ProjectionConfig, StateDistribution};
use layers::{
    visit_cross, visit_cross_mut, visit_encoder, visit_encoder_mut, visit_layernorm,
    visit_layernorm_mut, visit_linear, visit_linear_mut, CrossBlock, CrossChannelCache,
    EncoderBlock, EncoderCache, Linear, LayerNorm, LnCache, NamedTensors, NamedTensorsMut, Scalar,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub speaker_count: usize,
    /// Input feature dimension (mel bins).
    pub input_dim: usize,
    pub d_model: usize,
    pub self_attention_layers: usize,
    pub cross_attention_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub context_frames: usize,
    /// Joint state count; must equal the paired projection config's.
    pub state_count: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            speaker_count: 3,
            input_dim: 40,
            d_model: 64,
            self_attention_layers: 1,
            cross_attention_layers: 3,
            attention_heads: 4,
            ffn_dim: 256,
            context_frames: 1000,
            state_count: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of attention_heads {}",
                self.d_model, self.attention_heads
            )));
        }
        if self.speaker_count < 2 {
            return Err(Error::Config("need at least two speakers".into()));
        }
        if !self.state_count.is_power_of_two() {
            return Err(Error::Config("state_count must be a power of two".into()));
        }
        let bits = self.state_count.trailing_zeros() as usize;
        if bits % self.speaker_count != 0 {
            return Err(Error::Config(format!(
                "state_count {} does not factor into {} speakers",
                self.state_count, self.speaker_count
            )));
        }
        if self.context_frames == 0 || self.input_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Projection bins per speaker implied by the state count.
    pub fn bins_per_speaker(&self) -> usize {
        self.state_count.trailing_zeros() as usize / self.speaker_count
    }

    /// Check consistency with the projection codec.
    pub fn check_projection(&self, proj: &ProjectionConfig) -> Result<()> {
        if proj.speaker_count() != self.speaker_count || proj.state_count() != self.state_count {
            return Err(Error::Config(format!(
                "model expects {} speakers / {} states, projection config has {} / {}",
                self.speaker_count,
                self.state_count,
                proj.speaker_count(),
                proj.state_count()
            )));
        }
        Ok(())
    }

    /// Bin pattern of speaker `c` inside joint state `j`.
    #[inline]
    pub fn pattern(&self, channel: usize, state: usize) -> usize {
        let b = self.bins_per_speaker();
        (state >> (channel * b)) & ((1 << b) - 1)
    }
}

/// Per-frame logits produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    /// `frames x state_count`.
    pub vap_logits: Array2<T>,
    /// `frames x speaker_count`.
    pub vad_logits: Array2<T>,
}

pub struct NetCache<T> {
    features: Vec<Array2<T>>,
    enc: Vec<Vec<EncoderCache<T>>>,
    cross: Vec<Vec<CrossChannelCache<T>>>,
    final_ln: Vec<LnCache<T>>,
    finals: Vec<Array2<T>>,
}

/// The trainable network. Generic over the scalar so the gradient check
/// can run the identical code in f64.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub cfg: ModelConfig,
    pub input_proj: Linear<T>,
    pub enc: Vec<EncoderBlock<T>>,
    pub cross: Vec<CrossBlock<T>>,
    pub final_ln: LayerNorm<T>,
    /// Shared per-pattern scorer: `d_model x 2^bins_per_speaker`.
    pub vap_head: Linear<T>,
    /// Shared per-channel VAD scorer: `d_model x 1`.
    pub vad_head: Linear<T>,
    /// Sinusoidal positional table, `context_frames x d_model`; not a
    /// parameter.
    pe: Array2<T>,
}

fn positional_table<T: Scalar>(frames: usize, d: usize) -> Array2<T> {
    let mut pe = Array2::zeros((frames, d));
    for t in 0..frames {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = t as f64 * rate;
            pe[[t, 2 * i]] = T::from_f64(angle.sin());
            pe[[t, 2 * i + 1]] = T::from_f64(angle.cos());
        }
    }
    pe
}

impl<T: Scalar> Network<T> {
    /// Random trunk (Xavier uniform), zero output heads: the untrained
    /// network predicts the uniform state distribution.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let patterns = 1usize << cfg.bins_per_speaker();
        let input_proj = Linear::init(cfg.input_dim, d, &mut rng);
        let enc = (0..cfg.self_attention_layers)
            .map(|_| EncoderBlock::init(d, cfg.attention_heads, cfg.ffn_dim, &mut rng))
            .collect();
        let cross = (0..cfg.cross_attention_layers)
            .map(|_| CrossBlock::init(d, cfg.attention_heads, cfg.ffn_dim, &mut rng))
            .collect();
        let final_ln = LayerNorm::init(d);
        let vap_head = Linear::zeros(d, patterns);
        let vad_head = Linear::zeros(d, 1);
        let pe = positional_table(cfg.context_frames, d);
        Ok(Self { cfg, input_proj, enc, cross, final_ln, vap_head, vad_head, pe })
    }

    /// All-zero network of the same shape; used as a gradient container.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let patterns = 1usize << cfg.bins_per_speaker();
        Self {
            cfg: cfg.clone(),
            input_proj: Linear::zeros(cfg.input_dim, d),
            enc: (0..cfg.self_attention_layers)
                .map(|_| EncoderBlock::zeros(d, cfg.attention_heads, cfg.ffn_dim))
                .collect(),
            cross: (0..cfg.cross_attention_layers)
                .map(|_| CrossBlock::zeros(d, cfg.attention_heads, cfg.ffn_dim))
                .collect(),
            final_ln: LayerNorm::zeros(d),
            vap_head: Linear::zeros(d, patterns),
            vad_head: Linear::zeros(d, 1),
            pe: Array2::zeros((0, 0)),
        }
    }

    pub fn set_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// Forward pass.
    ///
    /// `features`: one `frames x input_dim` matrix per channel (already
    /// normalized). `start_frame` fixes the positional phase (absolute
    /// frame index of row 0). `band` limits attention lookback; training
    /// uses `usize::MAX` (full causal) and must keep `frames <=
    /// context_frames`, while long-session inference passes
    /// `context_frames` as the band.
    pub fn forward(
        &self,
        features: &[Array2<T>],
        start_frame: usize,
        band: usize,
        mut train: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<(ModelOutput<T>, Option<NetCache<T>>)> {
        let s_count = self.cfg.speaker_count;
        if features.len() != s_count {
            return Err(Error::ShapeMismatch(format!(
                "expected {} channels, got {}",
                s_count,
                features.len()
            )));
        }
        let t_len = features[0].nrows();
        for f in features {
            if f.dim() != (t_len, self.cfg.input_dim) {
                return Err(Error::ShapeMismatch(format!(
                    "feature matrix {:?}, expected ({}, {})",
                    f.dim(),
                    t_len,
                    self.cfg.input_dim
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("input features".into()));
            }
        }
        let want_cache = train.is_some();
        if want_cache && t_len > self.cfg.context_frames {
            return Err(Error::ContextExceeded(t_len, self.cfg.context_frames));
        }
        if t_len == 0 {
            return Err(Error::ShapeMismatch("empty feature window".into()));
        }

        // Embed: shared projection plus positional encoding (positions wrap
        // modulo the context length, matching the 20 s training windows).
        let ctx = self.cfg.context_frames;
        let mut xs: Vec<Array2<T>> = Vec::with_capacity(s_count);
        for f in features {
            let mut x = self.input_proj.forward(f);
            for t in 0..t_len {
                let p = (start_frame + t) % ctx;
                let pe_row = self.pe.row(p);
                let mut row = x.row_mut(t);
                row += &pe_row;
            }
            xs.push(x);
        }

        let mut enc_caches = Vec::new();
        for block in &self.enc {
            let mut layer_caches = Vec::new();
            for x in xs.iter_mut() {
                let tr = train.as_mut().map(|(rng, p)| (&mut **rng, *p));
                let (y, cache) = block.forward(x, band, tr);
                *x = y;
                if let Some(c) = cache {
                    layer_caches.push(c);
                }
            }
            if want_cache {
                enc_caches.push(layer_caches);
            }
        }

        let mut cross_caches = Vec::new();
        for block in &self.cross {
            let tr = train.as_mut().map(|(rng, p)| (&mut **rng, *p));
            let (ys, cache) = block.forward(&xs, band, tr);
            xs = ys;
            if let Some(c) = cache {
                cross_caches.push(c);
            }
        }

        let mut finals = Vec::with_capacity(s_count);
        let mut final_caches = Vec::with_capacity(s_count);
        for x in &xs {
            let (y, c) = self.final_ln.forward(x);
            finals.push(y);
            final_caches.push(c);
        }

        let output = self.heads(&finals, t_len);
        let cache = want_cache.then(|| NetCache {
            features: features.to_vec(),
            enc: enc_caches,
            cross: cross_caches,
            final_ln: final_caches,
            finals,
        });
        Ok((output, cache))
    }

    /// Assemble the tied output heads from the per-channel final streams.
    /// Each state logit sums one per-pattern score per speaker; the three
    /// addends are sorted before summing so any channel permutation
    /// produces bit-identical logits.
    fn heads(&self, finals: &[Array2<T>], t_len: usize) -> ModelOutput<T> {
        let s_count = self.cfg.speaker_count;
        let states = self.cfg.state_count;
        let psis: Vec<Array2<T>> = finals.iter().map(|f| self.vap_head.forward(f)).collect();
        let mut vap_logits = Array2::zeros((t_len, states));
        let mut addends = [T::zero(); 24];
        for t in 0..t_len {
            let mut row = vap_logits.row_mut(t);
            let row = row.as_slice_mut().unwrap();
            for (j, slot) in row.iter_mut().enumerate() {
                for (c, psi) in psis.iter().enumerate() {
                    addends[c] = psi[[t, self.cfg.pattern(c, j)]];
                }
                let terms = &mut addends[..s_count];
                terms.sort_by(|a, b| a.partial_cmp(b).expect("finite logits"));
                let mut acc = T::zero();
                for &v in terms.iter() {
                    acc += v;
                }
                *slot = acc;
            }
        }
        let mut vad_logits = Array2::zeros((t_len, s_count));
        for (c, f) in finals.iter().enumerate() {
            let col = self.vad_head.forward(f);
            for t in 0..t_len {
                vad_logits[[t, c]] = col[[t, 0]];
            }
        }
        ModelOutput { vap_logits, vad_logits }
    }

    /// Backward pass for a cached (training) forward; accumulates into `g`.
    pub fn backward(
        &self,
        cache: &NetCache<T>,
        d_vap: &Array2<T>,
        d_vad: &Array2<T>,
        g: &mut Network<T>,
    ) {
        let s_count = self.cfg.speaker_count;
        let t_len = d_vap.nrows();
        let patterns = 1usize << self.cfg.bins_per_speaker();

        // Head backward: scatter state-logit gradients onto each channel's
        // per-pattern scores.
        let mut dfinals: Vec<Array2<T>> = Vec::with_capacity(s_count);
        for c in 0..s_count {
            let mut dpsi = Array2::<T>::zeros((t_len, patterns));
            for t in 0..t_len {
                let drow = d_vap.row(t);
                let drow = drow.to_slice().unwrap();
                let mut prow = dpsi.row_mut(t);
                let prow = prow.as_slice_mut().unwrap();
                for (j, &dv) in drow.iter().enumerate() {
                    prow[self.cfg.pattern(c, j)] += dv;
                }
            }
            let mut dfinal = self.vap_head.backward(&cache.finals[c], &dpsi, &mut g.vap_head);
            let dvad_col = Array2::from_shape_fn((t_len, 1), |(t, _)| d_vad[[t, c]]);
            dfinal += &self.vad_head.backward(&cache.finals[c], &dvad_col, &mut g.vad_head);
            dfinals.push(dfinal);
        }

        let mut dxs: Vec<Array2<T>> = dfinals
            .iter()
            .enumerate()
            .map(|(c, df)| self.final_ln.backward(&cache.final_ln[c], df, &mut g.final_ln))
            .collect();

        for (li, block) in self.cross.iter().enumerate().rev() {
            dxs = block.backward(&cache.cross[li], &dxs, &mut g.cross[li]);
        }
        for (li, block) in self.enc.iter().enumerate().rev() {
            for (c, dx) in dxs.iter_mut().enumerate() {
                *dx = block.backward(&cache.enc[li][c], dx, &mut g.enc[li]);
            }
        }
        // Positional encoding is constant; what remains is the projection.
        for c in 0..s_count {
            self.input_proj.backward(&cache.features[c], &dxs[c], &mut g.input_proj);
        }
    }

    /// Every named parameter tensor in a fixed order.
    pub fn tensors(&self) -> NamedTensors<'_, T> {
        let mut out = Vec::new();
        visit_linear(&self.input_proj, "input_proj", &mut out);
        for (i, b) in self.enc.iter().enumerate() {
            visit_encoder(b, &format!("enc.{i}"), &mut out);
        }
        for (i, b) in self.cross.iter().enumerate() {
            visit_cross(b, &format!("cross.{i}"), &mut out);
        }
        visit_layernorm(&self.final_ln, "final_ln", &mut out);
        visit_linear(&self.vap_head, "vap_head", &mut out);
        visit_linear(&self.vad_head, "vad_head", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> NamedTensorsMut<'_, T> {
        let mut out = Vec::new();
        visit_linear_mut(&mut self.input_proj, "input_proj", &mut out);
        for (i, b) in self.enc.iter_mut().enumerate() {
            visit_encoder_mut(b, &format!("enc.{i}"), &mut out);
        }
        for (i, b) in self.cross.iter_mut().enumerate() {
            visit_cross_mut(b, &format!("cross.{i}"), &mut out);
        }
        visit_layernorm_mut(&mut self.final_ln, "final_ln", &mut out);
        visit_linear_mut(&mut self.vap_head, "vap_head", &mut out);
        visit_linear_mut(&mut self.vad_head, "vad_head", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.slice().len()).sum()
    }
}

/// A complete inference-ready model: network weights plus the configs and
/// feature statistics it was trained with.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network<f32>,
    pub projection: ProjectionConfig,
    pub features: FeatureConfig,
    pub normalizer: FeatureNormalizer,
    pub metadata: ModelMetadata,
}

/// Training provenance carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetadata {
    pub epoch: usize,
    pub validation_loss: f64,
    pub seed: u64,
    /// Dataset split parameters, kept so evaluation can re-derive the
    /// exact test split.
    pub split_seed: u64,
    pub split_fractions: (f64, f64, f64),
}

impl Default for ModelMetadata {
    fn default() -> Self {
        Self {
            epoch: 0,
            validation_loss: f64::INFINITY,
            seed: 0,
            split_seed: 0,
            split_fractions: (0.8, 0.1, 0.1),
        }
    }
}

/// One frame of model output in probability space.
#[derive(Debug, Clone)]
pub struct PredictionFrame {
    pub frame_index: usize,
    /// Distribution over the joint projection states.
    pub state_probs: Vec<f64>,
    /// Per-speaker probability of upcoming activity within the horizon.
    pub p_future: Vec<f64>,
    /// Per-speaker probability of current activity (VAD).
    pub p_now: Vec<f64>,
}

impl Model {
    pub fn new(
        net: Network<f32>,
        projection: ProjectionConfig,
        features: FeatureConfig,
        normalizer: FeatureNormalizer,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        net.cfg.validate()?;
        net.cfg.check_projection(&projection)?;
        if features.mel_bins != net.cfg.input_dim {
            return Err(Error::Config(format!(
                "feature mel_bins {} != model input_dim {}",
                features.mel_bins, net.cfg.input_dim
            )));
        }
        if (features.frame_rate() - projection.frame_rate()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "feature frame rate {} != projection frame rate {}",
                features.frame_rate(),
                projection.frame_rate()
            )));
        }
        Ok(Self { net, projection, features, normalizer, metadata })
    }

    /// Extract and normalize features for raw audio channels.
    pub fn featurize(&self, audio: &[Vec<i16>]) -> Result<Vec<Array2<f32>>> {
        let extractor = FeatureExtractor::new(self.features.clone())?;
        let mut feats = extractor.extract(audio)?;
        for f in &mut feats {
            self.normalizer.apply(f);
        }
        Ok(feats)
    }

    /// Convert logits into per-frame probability outputs.
    pub fn output_to_frames(&self, out: &ModelOutput<f32>) -> Vec<PredictionFrame> {
        let t_len = out.vap_logits.nrows();
        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            frames.push(self.frame_from_logits(
                t,
                out.vap_logits.row(t).to_slice().unwrap(),
                out.vad_logits.row(t).to_slice().unwrap(),
            ));
        }
        frames
    }

    pub(crate) fn frame_from_logits(
        &self,
        frame_index: usize,
        vap_row: &[f32],
        vad_row: &[f32],
    ) -> PredictionFrame {
        let state_probs = softmax_f64(vap_row);
        let dist = StateDistribution::new(state_probs.clone(), &self.projection)
            .expect("softmax output is a distribution");
        let p_future = speaker_future_probability(&dist, &self.projection);
        let p_now = vad_row.iter().map(|&v| 1.0 / (1.0 + (-(v as f64)).exp())).collect();
        PredictionFrame { frame_index, state_probs, p_future, p_now }
    }

    /// Offline prediction for an audio window of at most `context_frames`
    /// frames (20 s at the defaults).
    pub fn predict(&self, audio: &[Vec<i16>]) -> Result<Vec<PredictionFrame>> {
        let feats = self.featurize(audio)?;
        let t_len = feats[0].nrows();
        if t_len > self.net.cfg.context_frames {
            return Err(Error::ContextExceeded(t_len, self.net.cfg.context_frames));
        }
        let (out, _) = self.net.forward(&feats, 0, self.net.cfg.context_frames, None)?;
        Ok(self.output_to_frames(&out))
    }

    /// Prediction over a whole session of arbitrary length. Attention is
    /// banded to the context length, so every frame sees at most the last
    /// 20 s of stream per layer; for sessions within one context window
    /// this is identical to [`Model::predict`].
    pub fn predict_session(&self, audio: &[Vec<i16>]) -> Result<Vec<PredictionFrame>> {
        let feats = self.featurize(audio)?;
        let (out, _) = self.net.forward(&feats, 0, self.net.cfg.context_frames, None)?;
        Ok(self.output_to_frames(&out))
    }
}

pub(crate) fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            speaker_count: 3,
            input_dim: 4,
            d_model: 8,
            self_attention_layers: 1,
            cross_attention_layers: 1,
            attention_heads: 2,
            ffn_dim: 16,
            context_frames: 32,
            state_count: 64,
            dropout: 0.0,
        }
    }

    fn random_features(t: usize, dim: usize, channels: usize, seed: u64) -> Vec<Array2<f32>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..channels)
            .map(|_| Array2::from_shape_fn((t, dim), |_| rng.gen_range(-1.0f32..1.0)))
            .collect()
    }

    #[test]
    fn forward_output_shapes() {
        let cfg = ModelConfig::default();
        let net = Network::<f32>::init(cfg, 1).unwrap();
        let feats = random_features(50, 40, 3, 2);
        let (out, _) = net.forward(&feats, 0, usize::MAX, None).unwrap();
        assert_eq!(out.vap_logits.dim(), (50, 64));
        assert_eq!(out.vad_logits.dim(), (50, 3));
    }

    #[test]
    fn rejects_context_overflow_and_bad_shapes() {
        let cfg = tiny_config();
        let net = Network::<f32>::init(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = random_features(40, 4, 3, 3);
        assert!(matches!(
            net.forward(&feats, 0, usize::MAX, Some((&mut rng, 0.0))),
            Err(Error::ContextExceeded(40, 32))
        ));
        let feats = random_features(10, 4, 2, 3);
        assert!(net.forward(&feats, 0, usize::MAX, None).is_err());
        let mut feats = random_features(10, 4, 3, 3);
        feats[1][[3, 2]] = f32::NAN;
        assert!(matches!(net.forward(&feats, 0, usize::MAX, None), Err(Error::NonFinite(_))));
    }

    /// Fill the (zero-initialized) heads with deterministic nonzero values
    /// so logits actually respond to the input.
    fn randomize_heads(net: &mut Network<f32>) {
        for (name, t) in net.tensors_mut() {
            if name.starts_with("vap_head") || name.starts_with("vad_head") {
                for (i, v) in t.iter_mut().enumerate() {
                    *v = ((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5;
                }
            }
        }
    }

    #[test]
    fn causality_future_frames_do_not_leak() {
        let mut net = Network::<f32>::init(tiny_config(), 7).unwrap();
        randomize_heads(&mut net);
        let feats = random_features(20, 4, 3, 11);
        let (out, _) = net.forward(&feats, 0, usize::MAX, None).unwrap();
        let mut perturbed = feats.clone();
        for c in 0..3 {
            for t in 12..20 {
                for j in 0..4 {
                    perturbed[c][[t, j]] += (c + t + j) as f32 * 0.37 + 1.0;
                }
            }
        }
        let (out2, _) = net.forward(&perturbed, 0, usize::MAX, None).unwrap();
        for t in 0..12 {
            for j in 0..64 {
                assert_eq!(out.vap_logits[[t, j]], out2.vap_logits[[t, j]], "vap frame {t}");
            }
            for c in 0..3 {
                assert_eq!(out.vad_logits[[t, c]], out2.vad_logits[[t, c]], "vad frame {t}");
            }
        }
        // And the perturbation does reach later frames.
        assert!((12..20).any(|t| out.vap_logits[[t, 0]] != out2.vap_logits[[t, 0]]));
    }

    #[test]
    fn channel_permutation_equivariance_is_exact() {
        use crate::projection::ProjectionConfig;
        let mut net = Network::<f32>::init(tiny_config(), 13).unwrap();
        randomize_heads(&mut net);
        let proj = ProjectionConfig::default_triadic();
        let feats = random_features(24, 4, 3, 5);
        let (base, _) = net.forward(&feats, 0, usize::MAX, None).unwrap();
        for perm in [[1usize, 0, 2], [2, 0, 1], [0, 2, 1], [1, 2, 0], [2, 1, 0]] {
            let permuted: Vec<Array2<f32>> = perm.iter().map(|&p| feats[p].clone()).collect();
            let (out, _) = net.forward(&permuted, 0, usize::MAX, None).unwrap();
            let state_map = proj.state_permutation(&perm).unwrap();
            // The permuted run assigns to the mapped state exactly the
            // logit the base run assigned to the original state.
            for t in 0..24 {
                for j in 0..64 {
                    assert_eq!(
                        base.vap_logits[[t, j]],
                        out.vap_logits[[t, state_map[j] as usize]],
                        "perm {perm:?} state {j} frame {t}"
                    );
                }
                for c in 0..3 {
                    assert_eq!(out.vad_logits[[t, c]], base.vad_logits[[t, perm[c]]]);
                }
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_distribution() {
        let net = Network::<f32>::init(tiny_config(), 3).unwrap();
        let feats = random_features(8, 4, 3, 9);
        let (out, _) = net.forward(&feats, 0, usize::MAX, None).unwrap();
        assert!(out.vap_logits.iter().all(|&v| v == 0.0));
        let probs = softmax_f64(out.vap_logits.row(0).to_slice().unwrap());
        for p in &probs {
            assert!((p - 1.0 / 64.0).abs() < 1e-12);
        }
    }

    #[test]
    fn banded_forward_matches_full_for_short_input() {
        let net = Network::<f32>::init(tiny_config(), 21).unwrap();
        let feats = random_features(30, 4, 3, 17);
        let (full, _) = net.forward(&feats, 0, usize::MAX, None).unwrap();
        let (banded, _) = net.forward(&feats, 0, 32, None).unwrap();
        assert_eq!(full.vap_logits, banded.vap_logits);
        assert_eq!(full.vad_logits, banded.vad_logits);
    }

    #[test]
    fn tensor_names_are_stable_and_unique() {
        let net = Network::<f32>::init(tiny_config(), 0).unwrap();
        let names: Vec<String> = net.tensors().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(names.len(), unique.len());
        assert!(names.contains(&"input_proj.w".to_string()));
        assert!(names.contains(&"cross.0.cross_attn.wq.w".to_string()));
        assert!(names.contains(&"vap_head.w".to_string()));
    }
}
