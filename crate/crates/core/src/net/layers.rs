//! Network building blocks with explicit forward and backward passes.
//!
//! Everything is generic over the scalar so the same code runs in f32 for
//! training and in f64 for finite-difference gradient checks.
//!
//! Attention is causal everywhere. Cross-attention reads two source
//! streams; their contributions are combined with pairwise-symmetric
//! reductions (max, two-term adds) so that swapping the sources produces
//! bit-identical output. That, plus weight sharing across channels, makes
//! the whole network exactly equivariant to speaker permutations.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scalar type the network runs in.
pub trait Scalar: ndarray::NdFloat + std::iter::Sum<Self> {
    /// Fast exponential used in softmax inner loops.
    fn exp_fast(self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn exp_fast(self) -> f32 {
        exp_f32(self)
    }

    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn exp_fast(self) -> f64 {
        self.exp()
    }

    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Polynomial e^x for f32, accurate to ~2 ulp over the clamped range.
/// Softmax feeds it only non-positive arguments, but the full range works.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E).round();
    let r = x - n * LN2_HI - n * LN2_LO;
    // Degree-6 Taylor expansion of e^r on |r| <= ln2/2.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67
                    + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_888_9)))));
    let scale = f32::from_bits((((n as i32) + 127) as u32) << 23);
    p * scale
}

/// Query rows processed per attention block.
const ATTN_BLOCK: usize = 256;

// ---------------------------------------------------------------------------
// Parameter visiting: a fixed, named ordering over every tensor, used by the
// optimizer, gradient clipping, and the checkpoint format.

pub enum TensorView<'a, T> {
    M(&'a Array2<T>),
    V(&'a Array1<T>),
}

impl<'a, T: Scalar> TensorView<'a, T> {
    pub fn slice(&self) -> &'a [T] {
        match self {
            TensorView::M(m) => m.as_slice().expect("standard layout"),
            TensorView::V(v) => v.as_slice().expect("standard layout"),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorView::M(m) => m.shape().to_vec(),
            TensorView::V(v) => v.shape().to_vec(),
        }
    }
}

pub type NamedTensors<'a, T> = Vec<(String, TensorView<'a, T>)>;
pub type NamedTensorsMut<'a, T> = Vec<(String, &'a mut [T])>;

// ---------------------------------------------------------------------------
// Linear

#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `in_dim x out_dim`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((in_dim, out_dim), |_| {
            T::from_f64(rng.gen_range(-limit..limit))
        });
        Self { w, b: Array1::zeros(out_dim) }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: Array2::zeros((in_dim, out_dim)), b: Array1::zeros(out_dim) }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, g: &mut Linear<T>) -> Array2<T> {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(ndarray::Axis(0));
        dy.dot(&self.w.t())
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut NamedTensors<'a, T>) {
        out.push((format!("{prefix}.w"), TensorView::M(&self.w)));
        out.push((format!("{prefix}.b"), TensorView::V(&self.b)));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedTensorsMut<'a, T>) {
        out.push((format!("{prefix}.w"), self.w.as_slice_mut().expect("standard layout")));
        out.push((format!("{prefix}.b"), self.b.as_slice_mut().expect("standard layout")));
    }
}

// ---------------------------------------------------------------------------
// LayerNorm

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub g: Array1<T>,
    pub b: Array1<T>,
}

pub struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn init(dim: usize) -> Self {
        Self { g: Array1::ones(dim), b: Array1::zeros(dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { g: Array1::zeros(dim), b: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LnCache<T>) {
        let (rows, dim) = x.dim();
        let eps = T::from_f64(1e-5);
        let mut xhat = Array2::zeros((rows, dim));
        let mut rstd = Array1::zeros(rows);
        let inv_d = T::from_f64(1.0 / dim as f64);
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_slice().unwrap();
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            let mut out = xhat.row_mut(i);
            let out = out.as_slice_mut().unwrap();
            for (j, &v) in row.iter().enumerate() {
                out[j] = (v - mean) * r;
            }
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            let row = row.as_slice_mut().unwrap();
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.g[j] + self.b[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &Array2<T>, g: &mut LayerNorm<T>) -> Array2<T> {
        let (rows, dim) = dy.dim();
        let inv_d = T::from_f64(1.0 / dim as f64);
        let mut dx = Array2::zeros((rows, dim));
        let gg = g.g.as_slice_mut().unwrap();
        let gb = g.b.as_slice_mut().unwrap();
        for i in 0..rows {
            let dyr = dy.row(i);
            let dyr = dyr.to_slice().unwrap();
            let xh = cache.xhat.row(i);
            let xh = xh.to_slice().unwrap();
            let r = cache.rstd[i];
            let mut sum_a = T::zero(); // sum of g*dy
            let mut sum_b = T::zero(); // sum of g*dy*xhat
            for j in 0..dim {
                let a = self.g[j] * dyr[j];
                sum_a += a;
                sum_b += a * xh[j];
                gg[j] += dyr[j] * xh[j];
                gb[j] += dyr[j];
            }
            sum_a = sum_a * inv_d;
            sum_b = sum_b * inv_d;
            let mut dxr = dx.row_mut(i);
            let dxr = dxr.as_slice_mut().unwrap();
            for j in 0..dim {
                dxr[j] = (self.g[j] * dyr[j] - sum_a - xh[j] * sum_b) * r;
            }
        }
        dx
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut NamedTensors<'a, T>) {
        out.push((format!("{prefix}.g"), TensorView::V(&self.g)));
        out.push((format!("{prefix}.b"), TensorView::V(&self.b)));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedTensorsMut<'a, T>) {
        out.push((format!("{prefix}.g"), self.g.as_slice_mut().expect("standard layout")));
        out.push((format!("{prefix}.b"), self.b.as_slice_mut().expect("standard layout")));
    }
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; mask cached for backward)

pub struct DropMask<T>(Option<Array2<T>>);

pub fn dropout<T: Scalar>(
    x: &mut Array2<T>,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> DropMask<T> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = T::from_f64(1.0 / (1.0 - p));
            let mask = Array2::from_shape_fn(x.dim(), |_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            });
            *x *= &mask;
            DropMask(Some(mask))
        }
        _ => DropMask(None),
    }
}

impl<T: Scalar> DropMask<T> {
    pub fn backward(&self, dy: &mut Array2<T>) {
        if let Some(mask) = &self.0 {
            *dy *= mask;
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-head causal attention over one or more source streams.

#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

pub struct AttnCache<T> {
    xq: Array2<T>,
    srcs: Vec<Array2<T>>,
    q: Array2<T>,
    ks: Vec<Array2<T>>,
    vs: Vec<Array2<T>>,
    /// `probs[src][head]`: query x key probabilities, zero where masked.
    probs: Vec<Vec<Array2<T>>>,
    ctx: Array2<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn init(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Linear::init(d, d, rng),
            wk: Linear::init(d, d, rng),
            wv: Linear::init(d, d, rng),
            wo: Linear::init(d, d, rng),
            heads,
        }
    }

    pub fn zeros(d: usize, heads: usize) -> Self {
        Self {
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            heads,
        }
    }

    /// Causal attention of `xq` over `sources` (each the same length as
    /// `xq`). A query at frame `t` sees source frames `[t+1-band, t]`.
    /// Pass `sources = [xq]` for self-attention.
    pub fn forward(
        &self,
        xq: &Array2<T>,
        sources: &[&Array2<T>],
        band: usize,
        want_cache: bool,
    ) -> (Array2<T>, Option<AttnCache<T>>) {
        let (t_len, d) = xq.dim();
        let heads = self.heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward(xq);
        let ks: Vec<Array2<T>> = sources.iter().map(|s| self.wk.forward(s)).collect();
        let vs: Vec<Array2<T>> = sources.iter().map(|s| self.wv.forward(s)).collect();

        let mut ctx = Array2::<T>::zeros((t_len, d));
        let mut probs: Vec<Vec<Array2<T>>> = if want_cache {
            sources.iter().map(|_| Vec::with_capacity(heads)).collect()
        } else {
            Vec::new()
        };

        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols).to_owned();
            let khs: Vec<Array2<T>> = ks.iter().map(|k| k.slice(cols).to_owned()).collect();
            let vhs: Vec<Array2<T>> = vs.iter().map(|v| v.slice(cols).to_owned()).collect();

            let mut ph: Vec<Array2<T>> = if want_cache {
                sources.iter().map(|_| Array2::zeros((t_len, t_len))).collect()
            } else {
                Vec::new()
            };

            let mut r0 = 0;
            while r0 < t_len {
                let r1 = (r0 + ATTN_BLOCK).min(t_len);
                let c_lo = r0.saturating_sub(band - 1);
                let c_hi = r1;
                let width = c_hi - c_lo;
                // Raw scores per source for this block of query rows.
                let mut scores: Vec<Array2<T>> = khs
                    .iter()
                    .map(|kh| {
                        let mut s_blk =
                            qh.slice(s![r0..r1, ..]).dot(&kh.slice(s![c_lo..c_hi, ..]).t());
                        s_blk *= scale;
                        s_blk
                    })
                    .collect();
                // Row-wise masked softmax across all sources, combined with
                // pairwise-symmetric reductions.
                for t in r0..r1 {
                    let lo = t.saturating_sub(band - 1).max(c_lo) - c_lo;
                    let hi = t + 1 - c_lo;
                    let mut m = T::from_f64(f64::NEG_INFINITY);
                    for s_blk in &scores {
                        let row = s_blk.row(t - r0);
                        let row = row.to_slice().unwrap();
                        let mut local = T::from_f64(f64::NEG_INFINITY);
                        for &v in &row[lo..hi] {
                            if v > local {
                                local = v;
                            }
                        }
                        m = if local > m { local } else { m };
                    }
                    let mut denom = T::zero();
                    for s_blk in scores.iter_mut() {
                        let mut row = s_blk.row_mut(t - r0);
                        let row = row.as_slice_mut().unwrap();
                        let mut part = T::zero();
                        for v in &mut row[lo..hi] {
                            let e = (*v - m).exp_fast();
                            *v = e;
                            part += e;
                        }
                        for v in &mut row[..lo] {
                            *v = T::zero();
                        }
                        for v in &mut row[hi..width] {
                            *v = T::zero();
                        }
                        denom += part;
                    }
                    let inv = T::one() / denom;
                    for s_blk in scores.iter_mut() {
                        let mut row = s_blk.row_mut(t - r0);
                        let row = row.as_slice_mut().unwrap();
                        for v in &mut row[lo..hi] {
                            *v = *v * inv;
                        }
                    }
                }
                // Weighted sum of values, one source at a time (the adds
                // below are two-term and order-independent across a swap).
                let mut ctx_blk = Array2::<T>::zeros((r1 - r0, dh));
                for (si, p_blk) in scores.iter().enumerate() {
                    ctx_blk += &p_blk.dot(&vhs[si].slice(s![c_lo..c_hi, ..]));
                }
                ctx.slice_mut(s![r0..r1, h * dh..(h + 1) * dh]).assign(&ctx_blk);
                if want_cache {
                    for (si, p_blk) in scores.iter().enumerate() {
                        ph[si].slice_mut(s![r0..r1, c_lo..c_hi]).assign(p_blk);
                    }
                }
                r0 = r1;
            }
            if want_cache {
                for (si, p) in ph.into_iter().enumerate() {
                    probs[si].push(p);
                }
            }
        }

        let y = self.wo.forward(&ctx);
        let cache = want_cache.then(|| AttnCache {
            xq: xq.clone(),
            srcs: sources.iter().map(|s| (*s).clone()).collect(),
            q,
            ks,
            vs,
            probs,
            ctx,
        });
        (y, cache)
    }

    /// Backward for a fully causal (band >= T) cached forward. Returns the
    /// gradient w.r.t. `xq` and each source (the caller merges them for
    /// self-attention).
    pub fn backward(
        &self,
        cache: &AttnCache<T>,
        dy: &Array2<T>,
        g: &mut Attention<T>,
    ) -> (Array2<T>, Vec<Array2<T>>) {
        let (t_len, d) = cache.xq.dim();
        let heads = self.heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let n_src = cache.srcs.len();

        let dctx = self.wo.backward(&cache.ctx, dy, &mut g.wo);

        let mut dq = Array2::<T>::zeros((t_len, d));
        let mut dks: Vec<Array2<T>> = (0..n_src).map(|_| Array2::zeros((t_len, d))).collect();
        let mut dvs: Vec<Array2<T>> = (0..n_src).map(|_| Array2::zeros((t_len, d))).collect();

        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = cache.q.slice(cols).to_owned();
            let khs: Vec<Array2<T>> = cache.ks.iter().map(|k| k.slice(cols).to_owned()).collect();
            let vhs: Vec<Array2<T>> = cache.vs.iter().map(|v| v.slice(cols).to_owned()).collect();
            let dctx_h = dctx.slice(cols).to_owned();

            let mut r0 = 0;
            while r0 < t_len {
                let r1 = (r0 + ATTN_BLOCK).min(t_len);
                let c_hi = r1;
                let rows = r1 - r0;
                // dP per source, then the softmax-jacobian row sums across
                // every source (pairwise-symmetric accumulation).
                let dctx_blk = dctx_h.slice(s![r0..r1, ..]);
                let dps: Vec<Array2<T>> = (0..n_src)
                    .map(|si| dctx_blk.dot(&vhs[si].slice(s![..c_hi, ..]).t()))
                    .collect();
                let mut sigma = Array1::<T>::zeros(rows);
                for si in 0..n_src {
                    let p_blk = cache.probs[si][h].slice(s![r0..r1, ..c_hi]);
                    for r in 0..rows {
                        let pr = p_blk.row(r);
                        let pr = pr.to_slice().unwrap();
                        let dr = dps[si].row(r);
                        let dr = dr.to_slice().unwrap();
                        let mut acc = T::zero();
                        for c in 0..c_hi {
                            acc += pr[c] * dr[c];
                        }
                        sigma[r] += acc;
                    }
                }
                for si in 0..n_src {
                    let p_blk = cache.probs[si][h].slice(s![r0..r1, ..c_hi]);
                    let mut ds = dps[si].clone();
                    for r in 0..rows {
                        let pr = p_blk.row(r);
                        let pr = pr.to_slice().unwrap();
                        let mut dsr = ds.row_mut(r);
                        let dsr = dsr.as_slice_mut().unwrap();
                        let sg = sigma[r];
                        for c in 0..c_hi {
                            dsr[c] = pr[c] * (dsr[c] - sg) * scale;
                        }
                    }
                    {
                        let mut dq_blk = dq.slice_mut(s![r0..r1, h * dh..(h + 1) * dh]);
                        dq_blk += &ds.dot(&khs[si].slice(s![..c_hi, ..]));
                    }
                    {
                        let mut dk_blk = dks[si].slice_mut(s![..c_hi, h * dh..(h + 1) * dh]);
                        dk_blk += &ds.t().dot(&qh.slice(s![r0..r1, ..]));
                    }
                    {
                        let mut dv_blk = dvs[si].slice_mut(s![..c_hi, h * dh..(h + 1) * dh]);
                        dv_blk += &p_blk.t().dot(&dctx_blk);
                    }
                }
                r0 = r1;
            }
        }

        let dxq = self.wq.backward(&cache.xq, &dq, &mut g.wq);
        let mut dsrcs = Vec::with_capacity(n_src);
        for si in 0..n_src {
            let mut dsrc = self.wk.backward(&cache.srcs[si], &dks[si], &mut g.wk);
            dsrc += &self.wv.backward(&cache.srcs[si], &dvs[si], &mut g.wv);
            dsrcs.push(dsrc);
        }
        (dxq, dsrcs)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut NamedTensors<'a, T>) {
        self.wq.visit(&format!("{prefix}.wq"), out);
        self.wk.visit(&format!("{prefix}.wk"), out);
        self.wv.visit(&format!("{prefix}.wv"), out);
        self.wo.visit(&format!("{prefix}.wo"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedTensorsMut<'a, T>) {
        self.wq.visit_mut(&format!("{prefix}.wq"), out);
        self.wk.visit_mut(&format!("{prefix}.wk"), out);
        self.wv.visit_mut(&format!("{prefix}.wv"), out);
        self.wo.visit_mut(&format!("{prefix}.wo"), out);
    }
}

// ---------------------------------------------------------------------------
// Feed-forward (two linear layers with ReLU)

#[derive(Debug, Clone)]
pub struct Ffn<T> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
}

pub struct FfnCache<T> {
    x: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> Ffn<T> {
    pub fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { lin1: Linear::init(d, hidden, rng), lin2: Linear::init(hidden, d, rng) }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self { lin1: Linear::zeros(d, hidden), lin2: Linear::zeros(hidden, d) }
    }

    pub fn forward(&self, x: &Array2<T>, want_cache: bool) -> (Array2<T>, Option<FfnCache<T>>) {
        let mut hidden = self.lin1.forward(x);
        hidden.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        let y = self.lin2.forward(&hidden);
        let cache = want_cache.then(|| FfnCache { x: x.clone(), hidden });
        (y, cache)
    }

    pub fn backward(&self, cache: &FfnCache<T>, dy: &Array2<T>, g: &mut Ffn<T>) -> Array2<T> {
        let mut dh = self.lin2.backward(&cache.hidden, dy, &mut g.lin2);
        ndarray::Zip::from(&mut dh).and(&cache.hidden).for_each(|d, &h| {
            if h <= T::zero() {
                *d = T::zero();
            }
        });
        self.lin1.backward(&cache.x, &dh, &mut g.lin1)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut NamedTensors<'a, T>) {
        self.lin1.visit(&format!("{prefix}.lin1"), out);
        self.lin2.visit(&format!("{prefix}.lin2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedTensorsMut<'a, T>) {
        self.lin1.visit_mut(&format!("{prefix}.lin1"), out);
        self.lin2.visit_mut(&format!("{prefix}.lin2"), out);
    }
}

// ---------------------------------------------------------------------------
// Per-channel encoder block (pre-norm self-attention + feed-forward).

#[derive(Debug, Clone)]
pub struct EncoderBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

pub struct EncoderCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    drop_attn: DropMask<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
    drop_ffn: DropMask<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn init(d: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::init(d),
            attn: Attention::init(d, heads, rng),
            ln2: LayerNorm::init(d),
            ffn: Ffn::init(d, ffn_dim, rng),
        }
    }

    pub fn zeros(d: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(d),
            attn: Attention::zeros(d, heads),
            ln2: LayerNorm::zeros(d),
            ffn: Ffn::zeros(d, ffn_dim),
        }
    }

    pub fn forward(
        &self,
        x: &Array2<T>,
        band: usize,
        train: Option<(&mut ChaCha8Rng, f64)>,
    ) -> (Array2<T>, Option<EncoderCache<T>>) {
        let want_cache = train.is_some();
        let (mut rng, p) = match train {
            Some((r, p)) => (Some(r), p),
            None => (None, 0.0),
        };
        let (a_in, ln1c) = self.ln1.forward(x);
        let (mut attn_out, attnc) = self.attn.forward(&a_in, &[&a_in], band, want_cache);
        let drop_attn = dropout(&mut attn_out, p, rng.as_mut().map(|r| &mut **r));
        let x1 = x + &attn_out;
        let (f_in, ln2c) = self.ln2.forward(&x1);
        let (mut ffn_out, ffnc) = self.ffn.forward(&f_in, want_cache);
        let drop_ffn = dropout(&mut ffn_out, p, rng.as_mut().map(|r| &mut **r));
        let y = &x1 + &ffn_out;
        let cache = want_cache.then(|| EncoderCache {
            ln1: ln1c,
            attn: attnc.unwrap(),
            drop_attn,
            ln2: ln2c,
            ffn: ffnc.unwrap(),
            drop_ffn,
        });
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        dy: &Array2<T>,
        g: &mut EncoderBlock<T>,
    ) -> Array2<T> {
        let mut dffn = dy.clone();
        cache.drop_ffn.backward(&mut dffn);
        let df_in = self.ffn.backward(&cache.ffn, &dffn, &mut g.ffn);
        let mut dx1 = dy + &self.ln2.backward(&cache.ln2, &df_in, &mut g.ln2);
        let mut dattn = dx1.clone();
        cache.drop_attn.backward(&mut dattn);
        let (dq, dsrcs) = self.attn.backward(&cache.attn, &dattn, &mut g.attn);
        let mut da_in = dq;
        da_in += &dsrcs[0];
        dx1 += &self.ln1.backward(&cache.ln1, &da_in, &mut g.ln1);
        dx1
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut NamedTensors<'a, T>) {
        self.ln1.visit(&format!("{prefix}.ln1"), out);
        self.attn.visit(&format!("{prefix}.attn"), out);
        self.ln2.visit(&format!("{prefix}.ln2"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedTensorsMut<'a, T>) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), out);
        self.attn.visit_mut(&format!("{prefix}.attn"), out);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), out);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), out);
    }
}

// ---------------------------------------------------------------------------
// Multi-channel block: per-channel self-attention, cross-attention over the
// other channels' streams, then feed-forward. Weights shared across channels.

#[derive(Debug, Clone)]
pub struct CrossBlock<T> {
    pub ln_self: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ln_q: LayerNorm<T>,
    pub ln_kv: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

pub struct CrossChannelCache<T> {
    ln_self: LnCache<T>,
    self_attn: AttnCache<T>,
    drop_self: DropMask<T>,
    ln_q: LnCache<T>,
    ln_kv: LnCache<T>,
    cross_attn: AttnCache<T>,
    drop_cross: DropMask<T>,
    ln_ffn: LnCache<T>,
    ffn: FfnCache<T>,
    drop_ffn: DropMask<T>,
}

impl<T: Scalar> CrossBlock<T> {
    pub fn init(d: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln_self: LayerNorm::init(d),
            self_attn: Attention::init(d, heads, rng),
            ln_q: LayerNorm::init(d),
            ln_kv: LayerNorm::init(d),
            cross_attn: Attention::init(d, heads, rng),
            ln_ffn: LayerNorm::init(d),
            ffn: Ffn::init(d, ffn_dim, rng),
        }
    }

    pub fn zeros(d: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            ln_self: LayerNorm::zeros(d),
            self_attn: Attention::zeros(d, heads),
            ln_q: LayerNorm::zeros(d),
            ln_kv: LayerNorm::zeros(d),
            cross_attn: Attention::zeros(d, heads),
            ln_ffn: LayerNorm::zeros(d),
            ffn: Ffn::zeros(d, ffn_dim),
        }
    }

    /// Joint forward over all channels (cross-attention needs every
    /// channel's post-self-attention stream).
    pub fn forward(
        &self,
        xs: &[Array2<T>],
        band: usize,
        mut train: Option<(&mut ChaCha8Rng, f64)>,
    ) -> (Vec<Array2<T>>, Option<Vec<CrossChannelCache<T>>>) {
        let want_cache = train.is_some();
        let n = xs.len();
        let mut x1 = Vec::with_capacity(n);
        let mut part: Vec<(LnCache<T>, AttnCache<T>, DropMask<T>)> = Vec::new();
        for x in xs {
            let (s_in, lnc) = self.ln_self.forward(x);
            let (mut out, attnc) = self.self_attn.forward(&s_in, &[&s_in], band, want_cache);
            let mask = match &mut train {
                Some((rng, p)) => dropout(&mut out, *p, Some(&mut **rng)),
                None => DropMask(None),
            };
            x1.push(x + &out);
            if want_cache {
                part.push((lnc, attnc.unwrap(), mask));
            }
        }
        // Normalized key/value streams, one per channel, shared by the
        // other channels' queries.
        let mut kv = Vec::with_capacity(n);
        let mut kv_caches = Vec::with_capacity(n);
        for x in &x1 {
            let (k, c) = self.ln_kv.forward(x);
            kv.push(k);
            kv_caches.push(c);
        }
        let mut x2 = Vec::with_capacity(n);
        let mut part2: Vec<(LnCache<T>, AttnCache<T>, DropMask<T>)> = Vec::new();
        for (c, x) in x1.iter().enumerate() {
            let (q_in, lnqc) = self.ln_q.forward(x);
            let others: Vec<&Array2<T>> =
                (0..n).filter(|&o| o != c).map(|o| &kv[o]).collect();
            let (mut out, attnc) = self.cross_attn.forward(&q_in, &others, band, want_cache);
            let mask = match &mut train {
                Some((rng, p)) => dropout(&mut out, *p, Some(&mut **rng)),
                None => DropMask(None),
            };
            x2.push(x + &out);
            if want_cache {
                part2.push((lnqc, attnc.unwrap(), mask));
            }
        }
        let mut y = Vec::with_capacity(n);
        let mut caches = want_cache.then(Vec::new);
        for x in x2.iter() {
            let (f_in, lnfc) = self.ln_ffn.forward(x);
            let (mut out, ffnc) = self.ffn.forward(&f_in, want_cache);
            let mask = match &mut train {
                Some((rng, p)) => dropout(&mut out, *p, Some(&mut **rng)),
                None => DropMask(None),
            };
            y.push(x + &out);
            if let Some(caches) = &mut caches {
                let (ln_self, self_attn, drop_self) = part.remove(0);
                let (ln_q, cross_attn, drop_cross) = part2.remove(0);
                caches.push(CrossChannelCache {
                    ln_self,
                    self_attn,
                    drop_self,
                    ln_q,
                    ln_kv: kv_caches.remove(0),
                    cross_attn,
                    drop_cross,
                    ln_ffn: lnfc,
                    ffn: ffnc.unwrap(),
                    drop_ffn: mask,
                });
            }
        }
        (y, caches)
    }

    pub fn backward(
        &self,
        caches: &[CrossChannelCache<T>],
        dys: &[Array2<T>],
        g: &mut CrossBlock<T>,
    ) -> Vec<Array2<T>> {
        let n = dys.len();
        // FFN stage.
        let mut dx2 = Vec::with_capacity(n);
        for (c, dy) in dys.iter().enumerate() {
            let cache = &caches[c];
            let mut dffn = dy.clone();
            cache.drop_ffn.backward(&mut dffn);
            let df_in = self.ffn.backward(&cache.ffn, &dffn, &mut g.ffn);
            dx2.push(dy + &self.ln_ffn.backward(&cache.ln_ffn, &df_in, &mut g.ln_ffn));
        }
        // Cross-attention stage: gradients flow to the querying channel and
        // into the other channels' kv streams.
        let (t_len, d) = dx2[0].dim();
        let mut dkv: Vec<Array2<T>> = (0..n).map(|_| Array2::zeros((t_len, d))).collect();
        let mut dx1 = dx2.clone();
        for (c, cache) in caches.iter().enumerate() {
            let mut dcross = dx2[c].clone();
            cache.drop_cross.backward(&mut dcross);
            let (dq_in, dsrcs) = self.cross_attn.backward(&cache.cross_attn, &dcross, &mut g.cross_attn);
            dx1[c] += &self.ln_q.backward(&cache.ln_q, &dq_in, &mut g.ln_q);
            for (oi, o) in (0..n).filter(|&o| o != c).enumerate() {
                dkv[o] += &dsrcs[oi];
            }
        }
        for (c, dk) in dkv.into_iter().enumerate() {
            dx1[c] += &self.ln_kv.backward(&caches[c].ln_kv, &dk, &mut g.ln_kv);
        }
        // Self-attention stage.
        let mut dx = Vec::with_capacity(n);
        for (c, cache) in caches.iter().enumerate() {
            let mut dself = dx1[c].clone();
            cache.drop_self.backward(&mut dself);
            let (dq, dsrcs) = self.self_attn.backward(&cache.self_attn, &dself, &mut g.self_attn);
            let mut ds_in = dq;
            ds_in += &dsrcs[0];
            let mut dxc = dx1[c].clone();
            dxc += &self.ln_self.backward(&cache.ln_self, &ds_in, &mut g.ln_self);
            dx.push(dxc);
        }
        dx
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut NamedTensors<'a, T>) {
        self.ln_self.visit(&format!("{prefix}.ln_self"), out);
        self.self_attn.visit(&format!("{prefix}.self_attn"), out);
        self.ln_q.visit(&format!("{prefix}.ln_q"), out);
        self.ln_kv.visit(&format!("{prefix}.ln_kv"), out);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), out);
        self.ln_ffn.visit(&format!("{prefix}.ln_ffn"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedTensorsMut<'a, T>) {
        self.ln_self.visit_mut(&format!("{prefix}.ln_self"), out);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), out);
        self.ln_q.visit_mut(&format!("{prefix}.ln_q"), out);
        self.ln_kv.visit_mut(&format!("{prefix}.ln_kv"), out);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), out);
        self.ln_ffn.visit_mut(&format!("{prefix}.ln_ffn"), out);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), out);
    }
}

// Visiting entry points used by the network container.
pub(crate) fn visit_linear<'a, T: Scalar>(
    l: &'a Linear<T>,
    prefix: &str,
    out: &mut NamedTensors<'a, T>,
) {
    l.visit(prefix, out);
}

pub(crate) fn visit_linear_mut<'a, T: Scalar>(
    l: &'a mut Linear<T>,
    prefix: &str,
    out: &mut NamedTensorsMut<'a, T>,
) {
    l.visit_mut(prefix, out);
}

pub(crate) fn visit_layernorm<'a, T: Scalar>(
    l: &'a LayerNorm<T>,
    prefix: &str,
    out: &mut NamedTensors<'a, T>,
) {
    l.visit(prefix, out);
}

pub(crate) fn visit_layernorm_mut<'a, T: Scalar>(
    l: &'a mut LayerNorm<T>,
    prefix: &str,
    out: &mut NamedTensorsMut<'a, T>,
) {
    l.visit_mut(prefix, out);
}

pub(crate) fn visit_encoder<'a, T: Scalar>(
    b: &'a EncoderBlock<T>,
    prefix: &str,
    out: &mut NamedTensors<'a, T>,
) {
    b.visit(prefix, out);
}

pub(crate) fn visit_encoder_mut<'a, T: Scalar>(
    b: &'a mut EncoderBlock<T>,
    prefix: &str,
    out: &mut NamedTensorsMut<'a, T>,
) {
    b.visit_mut(prefix, out);
}

pub(crate) fn visit_cross<'a, T: Scalar>(
    b: &'a CrossBlock<T>,
    prefix: &str,
    out: &mut NamedTensors<'a, T>,
) {
    b.visit(prefix, out);
}

pub(crate) fn visit_cross_mut<'a, T: Scalar>(
    b: &'a mut CrossBlock<T>,
    prefix: &str,
    out: &mut NamedTensorsMut<'a, T>,
) {
    b.visit_mut(prefix, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_f32_matches_std() {
        let mut x = -87.0f32;
        while x < 5.0 {
            let got = exp_f32(x);
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            assert!(rel < 5e-7, "exp({x}): got {got}, want {want}, rel {rel}");
            x += 0.0137;
        }
        assert_eq!(exp_f32(0.0), 1.0);
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = rand::SeedableRng::seed_from_u64(7);
        let lin = Linear::<f64>::init(3, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| 0.1 * (i as f64) - 0.2 * (j as f64) + 0.05);
        let y = lin.forward(&x);
        // Loss = sum of squares / 2 so dy = y.
        let mut g = Linear::zeros(3, 2);
        let dx = lin.backward(&x, &y, &mut g);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let lp: f64 = lin.forward(&xp).iter().map(|v| v * v / 2.0).sum();
                let lm: f64 = lin.forward(&xm).iter().map(|v| v * v / 2.0).sum();
                let fd = (lp - lm) / (2.0 * eps);
                assert!((dx[[i, j]] - fd).abs() < 1e-6, "dx[{i},{j}]: {} vs {}", dx[[i, j]], fd);
            }
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = rand::SeedableRng::seed_from_u64(3);
        let attn = Attention::<f64>::init(8, 2, &mut rng);
        let x = Array2::from_shape_fn((10, 8), |(i, j)| ((i * 13 + j * 7) % 11) as f64 * 0.1 - 0.5);
        let (y, _) = attn.forward(&x, &[&x], usize::MAX, false);
        let mut x2 = x.clone();
        for j in 0..8 {
            x2[[7, j]] += 10.0;
            x2[[9, j]] -= 3.0;
        }
        let (y2, _) = attn.forward(&x2, &[&x2], usize::MAX, false);
        for t in 0..7 {
            for j in 0..8 {
                assert_eq!(y[[t, j]], y2[[t, j]], "frame {t} changed");
            }
        }
    }

    #[test]
    fn cross_attention_source_swap_is_bit_exact() {
        let mut rng = rand::SeedableRng::seed_from_u64(5);
        let attn = Attention::<f32>::init(8, 2, &mut rng);
        let q = Array2::from_shape_fn((9, 8), |(i, j)| ((i + 2 * j) % 7) as f32 * 0.3 - 0.8);
        let a = Array2::from_shape_fn((9, 8), |(i, j)| ((3 * i + j) % 5) as f32 * 0.2 - 0.4);
        let b = Array2::from_shape_fn((9, 8), |(i, j)| ((i * j + 1) % 9) as f32 * 0.1 - 0.3);
        let (y_ab, _) = attn.forward(&q, &[&a, &b], usize::MAX, false);
        let (y_ba, _) = attn.forward(&q, &[&b, &a], usize::MAX, false);
        assert_eq!(y_ab, y_ba);
    }

    #[test]
    fn banded_attention_limits_lookback() {
        let mut rng = rand::SeedableRng::seed_from_u64(9);
        let attn = Attention::<f64>::init(4, 1, &mut rng);
        let x = Array2::from_shape_fn((12, 4), |(i, j)| (i as f64 * 0.2) - (j as f64 * 0.1));
        let (y, _) = attn.forward(&x, &[&x], 3, false);
        // Changing frame 0 must not affect frame 5 (outside its 3-frame band).
        let mut x2 = x.clone();
        x2[[0, 0]] += 5.0;
        let (y2, _) = attn.forward(&x2, &[&x2], 3, false);
        for j in 0..4 {
            assert_eq!(y[[5, j]], y2[[5, j]]);
        }
        // But it must affect frame 1 (inside the band).
        assert!((0..4).any(|j| y[[1, j]] != y2[[1, j]]));
    }
}
