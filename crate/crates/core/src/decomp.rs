//! Progressive sequence decomposition.
//!
//! Each scale patches its input sequence, encodes it with self-attention,
//! encodes the matching history sequence with a parallel encoder, fuses the
//! two through cross-attention, unfolds back to `L_sta` steps and splits the
//! result into a moving-average trend and a residual. The residual feeds the
//! next scale; the estimate is the mean of all trends.
//!
//! Tensors are laid out as `[batch, channels, time]` for sequences and
//! `[batch, patches, d_model]` for latents. Channel-independent modelling
//! uses `channels = 1` with channels folded into the batch.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per sequence, over the patch axis.
    #[default]
    Instance,
    /// Over batch and patch axes, always using the current batch statistics.
    Batch,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub l_sta: usize,
    pub l_patch: usize,
    pub l_win: usize,
}

impl PatchGeometry {
    pub fn new(l_sta: usize, l_patch: usize, l_win: usize) -> Result<Self> {
        if l_patch == 0 || l_win == 0 {
            return Err(Error::Config("patch length and stride must be ≥ 1".into()));
        }
        if l_patch > l_sta {
            return Err(Error::Config(format!(
                "patch length {l_patch} exceeds stage length {l_sta}"
            )));
        }
        if !(l_sta - l_patch).is_multiple_of(l_win) {
            return Err(Error::Config(format!(
                "({l_sta} - {l_patch}) is not divisible by patch stride {l_win}"
            )));
        }
        Ok(Self {
            l_sta,
            l_patch,
            l_win,
        })
    }

    /// `P = (L_sta − L_patch)/L_win + 1`.
    pub fn num_patches(&self) -> usize {
        (self.l_sta - self.l_patch) / self.l_win + 1
    }

    fn gather_indices(&self) -> Vec<u32> {
        (0..self.num_patches())
            .flat_map(|p| (0..self.l_patch).map(move |j| (p * self.l_win + j) as u32))
            .collect()
    }
}

/// Patch `p` covers `x[p·L_win .. p·L_win + L_patch]`.
pub fn patchify(x: &[f64], geom: &PatchGeometry) -> Result<Vec<Vec<f64>>> {
    if x.len() != geom.l_sta {
        return Err(Error::Shape(format!(
            "sequence of length {} for stage length {}",
            x.len(),
            geom.l_sta
        )));
    }
    Ok((0..geom.num_patches())
        .map(|p| x[p * geom.l_win..p * geom.l_win + geom.l_patch].to_vec())
        .collect())
}

/// `[B, C, L_sta] → [B, P, C·L_patch]`; each token is a channel-major slab.
pub fn patchify_tensor(x: &Tensor, geom: &PatchGeometry) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    if l != geom.l_sta {
        return Err(Error::Shape(format!(
            "sequence length {l}, stage length {}",
            geom.l_sta
        )));
    }
    let p = geom.num_patches();
    let idx = Tensor::new(geom.gather_indices(), x.device())?;
    Ok(x.contiguous()?
        .index_select(&idx, 2)?
        .reshape((b, c, p, geom.l_patch))?
        .permute((0, 2, 1, 3))?
        .contiguous()?
        .reshape((b, p, c * geom.l_patch))?)
}

/// `x^{s,p} = W_p·patch + W_pos`.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub geom: PatchGeometry,
    pub channels: usize,
    pub w_p: Linear,
    /// `[P, d_model]`.
    pub w_pos: Tensor,
}

impl PatchEmbedder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        geom: PatchGeometry,
        channels: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w_p = Linear::new(store, &format!("{name}.w_p"), channels * geom.l_patch, d_model, false, rng)?;
        let w_pos = store.create(
            &format!("{name}.w_pos"),
            &[geom.num_patches(), d_model],
            Init::Normal { std: 0.02 },
            rng,
        )?;
        Ok(Self {
            geom,
            channels,
            w_p,
            w_pos,
        })
    }

    /// Embeds pre-cut patches `[B, P, C·L_patch]`.
    pub fn embed(&self, patches: &Tensor) -> Result<Tensor> {
        let (_, p, width) = patches.dims3()?;
        if p != self.geom.num_patches() || width != self.channels * self.geom.l_patch {
            return Err(Error::Shape(format!(
                "patches [{p}, {width}] for embedder expecting [{}, {}]",
                self.geom.num_patches(),
                self.channels * self.geom.l_patch
            )));
        }
        Ok(self.w_p.forward(patches)?.broadcast_add(&self.w_pos)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.embed(&patchify_tensor(x, &self.geom)?)
    }
}

/// Scaled dot-product attention over the last two axes.
///
/// Returns the output and the row-stochastic weight matrix.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, d_k: usize) -> Result<(Tensor, Tensor)> {
    let (qd, kd) = (q.dims(), k.dims());
    if qd.len() < 2 || qd.len() != kd.len() || qd[qd.len() - 1] != kd[kd.len() - 1] {
        return Err(Error::Shape(format!("query {qd:?} vs key {kd:?}")));
    }
    if v.dims()[..v.rank() - 1] != kd[..kd.len() - 1] {
        return Err(Error::Shape(format!("key {kd:?} vs value {:?}", v.dims())));
    }
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (d_k as f64).sqrt())?;
    let weights = nn::softmax_last(&scores)?;
    Ok((weights.matmul(v)?, weights))
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_k: usize,
    pub d_model: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // Per-head values keep the full model width; heads are concatenated
        // and projected back by `w_o`.
        Ok(Self {
            heads,
            d_k,
            d_model,
            w_q: Linear::new(store, &format!("{name}.w_q"), d_model, heads * d_k, false, rng)?,
            w_k: Linear::new(store, &format!("{name}.w_k"), d_model, heads * d_k, false, rng)?,
            w_v: Linear::new(store, &format!("{name}.w_v"), d_model, heads * d_model, false, rng)?,
            w_o: Linear::new(store, &format!("{name}.w_o"), heads * d_model, d_model, false, rng)?,
        })
    }

    fn split_heads(&self, x: &Tensor, width: usize) -> Result<Tensor> {
        let (b, p, _) = x.dims3()?;
        Ok(x.reshape((b, p, self.heads, width))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Queries from `x_q`, keys/values from `x_kv`; weights are `[B, H, Pq, Pk]`.
    pub fn forward(&self, x_q: &Tensor, x_kv: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, pq, _) = x_q.dims3()?;
        let q = self.split_heads(&self.w_q.forward(x_q)?, self.d_k)?;
        let k = self.split_heads(&self.w_k.forward(x_kv)?, self.d_k)?;
        let v = self.split_heads(&self.w_v.forward(x_kv)?, self.d_model)?;
        let (o, w) = attend(&q, &k, &v, self.d_k)?;
        let o = o
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, pq, self.heads * self.d_model))?;
        Ok((self.w_o.forward(&o)?, w))
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: NormKind,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            kind,
            gamma: store.create(&format!("{name}.gamma"), &[d_model], Init::Ones, rng)?,
            beta: store.create(&format!("{name}.beta"), &[d_model], Init::Zeros, rng)?,
        })
    }

    /// Normalizes `[B, P, d_model]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let stats = |t: &Tensor| -> Result<Tensor> {
            Ok(match self.kind {
                NormKind::Instance => t.mean_keepdim(1)?,
                NormKind::Batch => t.mean_keepdim(1)?.mean_keepdim(0)?,
            })
        };
        let centered = x.broadcast_sub(&stats(x)?)?;
        let var = stats(&centered.sqr()?)?;
        let y = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&nn::gelu(&self.up.forward(x)?)?)
    }
}

/// Hyper-parameters shared by the blocks of one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub norm: NormKind,
}

/// `a = norm(x + MHA(x, x))`, `z = norm(a + FFN(a))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dims: &BlockDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dims.d_model, dims.heads, dims.d_k, rng)?,
            norm1: Norm::new(store, &format!("{name}.norm1"), dims.norm, dims.d_model, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.d_model, dims.d_ff, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dims.norm, dims.d_model, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (attn, w) = self.attn.forward(x, x)?;
        let a = self.norm1.forward(&(x + attn)?)?;
        let z = self.norm2.forward(&(&a + self.ffn.forward(&a)?)?)?;
        Ok((z, w))
    }
}

/// Cross-attention from the current encoding onto the history encoding,
/// followed by a linear unfolding head back to `C × L_sta` steps.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub cross: MultiHeadAttention,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
    pub head: Linear,
    pub channels: usize,
    pub l_sta: usize,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &BlockDims,
        geom: &PatchGeometry,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let flat = geom.num_patches() * dims.d_model;
        Ok(Self {
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), dims.d_model, dims.heads, dims.d_k, rng)?,
            norm1: Norm::new(store, &format!("{name}.norm1"), dims.norm, dims.d_model, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.d_model, dims.d_ff, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dims.norm, dims.d_model, rng)?,
            head: Linear::new(store, &format!("{name}.head"), flat, channels * geom.l_sta, true, rng)?,
            channels,
            l_sta: geom.l_sta,
        })
    }

    /// `z, z_his: [B, P, d_model]` → `[B, C, L_sta]`, plus attention weights.
    pub fn forward(&self, z: &Tensor, z_his: &Tensor) -> Result<(Tensor, Tensor)> {
        if z.dims() != z_his.dims() {
            return Err(Error::Shape(format!(
                "decoder inputs {:?} vs history {:?}",
                z.dims(),
                z_his.dims()
            )));
        }
        let (cross, w) = self.cross.forward(z, z_his)?;
        let a = self.norm1.forward(&(z + cross)?)?;
        let h = self.norm2.forward(&(&a + self.ffn.forward(&a)?)?)?;
        let out = self.unfold(&h)?;
        Ok((out, w))
    }

    /// The linear unfolding head alone.
    pub fn unfold(&self, h: &Tensor) -> Result<Tensor> {
        let (b, p, d) = h.dims3()?;
        let flat = h.reshape((b, p * d))?;
        Ok(self.head.forward(&flat)?.reshape((b, self.channels, self.l_sta))?)
    }
}

/// Centered moving average with replicate padding; returns `(trend, residual)`.
pub fn decompose(x: &[f64], kernel: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_kernel(kernel)?;
    let n = x.len() as isize;
    let half = (kernel / 2) as isize;
    let trend: Vec<f64> = (0..n)
        .map(|t| {
            let sum: f64 = (-half..=half)
                .map(|o| x[(t + o).clamp(0, n - 1) as usize])
                .sum();
            sum / kernel as f64
        })
        .collect();
    let residual = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
    Ok((trend, residual))
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("pool kernel {kernel} must be odd and ≥ 1")));
    }
    Ok(())
}

/// Kernel widths per scale: 25, then halved and rounded up to odd.
pub fn default_pool_kernels(scales: usize) -> Vec<usize> {
    let mut k = 25usize;
    (0..scales)
        .map(|_| {
            let cur = k;
            k = (k / 2).max(1);
            if k.is_multiple_of(2) {
                k += 1;
            }
            cur
        })
        .collect()
}

/// Moving average as a fixed `L × L` linear map.
#[derive(Debug, Clone)]
pub struct MovingAverage {
    pub kernel: usize,
    /// Transposed averaging matrix, so `trend = x · matrix_t`.
    matrix_t: Tensor,
}

impl MovingAverage {
    pub fn new(kernel: usize, len: usize, device: &candle_core::Device) -> Result<Self> {
        check_kernel(kernel)?;
        let half = (kernel / 2) as isize;
        let n = len as isize;
        let mut m = vec![0.0; len * len];
        for t in 0..n {
            for o in -half..=half {
                let j = (t + o).clamp(0, n - 1);
                // row j of the transpose holds the weight of x[j] in trend[t]
                m[j as usize * len + t as usize] += 1.0 / kernel as f64;
            }
        }
        Ok(Self {
            kernel,
            matrix_t: Tensor::from_vec(m, (len, len), device)?,
        })
    }

    /// `[B, C, L]` → `(trend, residual)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let trend = crate::nn::matmul_last(x, &self.matrix_t)?;
        let residual = (x - &trend)?;
        Ok((trend, residual))
    }
}

/// Host copy of one scale's outputs for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLayerOutput {
    pub x_hat_s: Vec<f64>,
    pub trend: Vec<f64>,
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub geom: PatchGeometry,
    /// Channels per token slab: 1 for channel-independent modelling.
    pub channels: usize,
    pub dims: BlockDims,
    pub encoder_layers: usize,
    pub pool_kernels: Vec<usize>,
}

impl StackConfig {
    pub fn scales(&self) -> usize {
        self.pool_kernels.len()
    }
}

/// One decomposition layer (one time scale).
#[derive(Debug, Clone)]
pub struct DecompLayer {
    pub embed: PatchEmbedder,
    pub encoders: Vec<EncoderBlock>,
    pub hist_embed: PatchEmbedder,
    pub hist_encoders: Vec<EncoderBlock>,
    pub decoder: DecoderBlock,
    pub pool: MovingAverage,
}

impl DecompLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &StackConfig, kernel: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dm = cfg.dims.d_model;
        let encoders = (0..cfg.encoder_layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.enc{i}"), &cfg.dims, rng))
            .collect::<Result<_>>()?;
        let hist_encoders = (0..cfg.encoder_layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.hist_enc{i}"), &cfg.dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: PatchEmbedder::new(store, &format!("{name}.embed"), cfg.geom, cfg.channels, dm, rng)?,
            encoders,
            hist_embed: PatchEmbedder::new(store, &format!("{name}.hist_embed"), cfg.geom, cfg.channels, dm, rng)?,
            hist_encoders,
            decoder: DecoderBlock::new(store, &format!("{name}.dec"), &cfg.dims, &cfg.geom, cfg.channels, rng)?,
            pool: MovingAverage::new(kernel, cfg.geom.l_sta, store.device())?,
        })
    }

    /// Encodes `x` (or a history sequence) through an embedder and blocks.
    fn encode(
        embed: &PatchEmbedder,
        blocks: &[EncoderBlock],
        x: &Tensor,
        step: &Tensor,
        attn: &mut Vec<Tensor>,
    ) -> Result<Tensor> {
        let mut z = embed.forward(x)?.broadcast_add(&step.unsqueeze(1)?)?;
        for b in blocks {
            let (nz, w) = b.forward(&z)?;
            attn.push(w);
            z = nz;
        }
        Ok(z)
    }
}

/// Function applied to the decoded sequence before decomposition.
pub type Mixer<'a> = &'a dyn Fn(&Tensor) -> Result<Tensor>;

#[derive(Debug, Clone)]
pub struct StackOutput {
    /// Mean of the per-scale trends, `[B, C, L_sta]`.
    pub estimate: Tensor,
    pub trends: Vec<Tensor>,
    pub decoded: Vec<Tensor>,
    pub residuals: Vec<Tensor>,
    /// Every attention weight tensor computed, in evaluation order.
    pub attention: Vec<Tensor>,
}

impl StackOutput {
    /// Host copies of each scale for sequence `b`, channel `c`.
    pub fn scale_outputs(&self, b: usize, c: usize) -> Result<Vec<ScaleLayerOutput>> {
        let pick = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.get(b)?.get(c)?.to_vec1::<f64>()?) };
        (0..self.trends.len())
            .map(|s| {
                Ok(ScaleLayerOutput {
                    x_hat_s: pick(&self.decoded[s])?,
                    trend: pick(&self.trends[s])?,
                    residual: pick(&self.residuals[s])?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DecompStack {
    pub cfg: StackConfig,
    pub layers: Vec<DecompLayer>,
}

impl DecompStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: StackConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.pool_kernels.is_empty() {
            return Err(Error::Config("decomposition needs at least one scale".into()));
        }
        let layers = cfg
            .pool_kernels
            .iter()
            .enumerate()
            .map(|(s, &k)| DecompLayer::new(store, &format!("{name}.scale{s}"), &cfg, k, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }

    /// Runs every scale on `x: [B, C, L_sta]` with one history per scale.
    ///
    /// `step` is the projected step embedding `[B, d_model]`. The optional
    /// `mixer` is applied to the first scale's decoded sequence.
    pub fn run(
        &self,
        x: &Tensor,
        histories: &[Tensor],
        step: &Tensor,
        mixer: Option<Mixer<'_>>,
    ) -> Result<StackOutput> {
        if histories.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} histories for {} scales",
                histories.len(),
                self.layers.len()
            )));
        }
        let mut input = x.clone();
        let mut out = StackOutput {
            estimate: x.zeros_like()?,
            trends: Vec::new(),
            decoded: Vec::new(),
            residuals: Vec::new(),
            attention: Vec::new(),
        };
        for (s, (layer, hist)) in self.layers.iter().zip(histories).enumerate() {
            if hist.dims() != input.dims() {
                return Err(Error::Shape(format!(
                    "history {:?} for input {:?} at scale {s}",
                    hist.dims(),
                    input.dims()
                )));
            }
            let z = DecompLayer::encode(&layer.embed, &layer.encoders, &input, step, &mut out.attention)?;
            let z_his = DecompLayer::encode(&layer.hist_embed, &layer.hist_encoders, hist, step, &mut out.attention)?;
            let (mut x_hat, w) = layer.decoder.forward(&z, &z_his)?;
            out.attention.push(w);
            if s == 0 {
                if let Some(mix) = mixer {
                    x_hat = mix(&x_hat)?;
                }
            }
            let (trend, residual) = layer.pool.forward(&x_hat)?;
            out.decoded.push(x_hat);
            out.trends.push(trend);
            input = residual.clone();
            out.residuals.push(residual);
        }
        let sum = out
            .trends
            .iter()
            .skip(1)
            .try_fold(out.trends[0].clone(), |acc, t| acc + t)?;
        out.estimate = (sum / self.layers.len() as f64)?;
        Ok(out)
    }
}

/// Max deviation of attention row sums from 1 over the given weight tensors.
pub fn attention_row_error(weights: &[Tensor]) -> Result<f64> {
    let mut worst = 0.0f64;
    for w in weights {
        let sums = w.sum(D::Minus1)?.flatten_all()?.to_vec1::<f64>()?;
        for s in sums {
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(worst)
}
