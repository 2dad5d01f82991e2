//! The assembled stage-wise denoiser, its training loop and generation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use candle_core::Tensor;
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::dataio::{NormStats, WindowSet};
use crate::decomp::{
    default_pool_kernels, BlockDims, DecompStack, NormKind, PatchGeometry, StackConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConv, HistoryBundle};
use crate::nn::{self, Adam, Linear, ParamStore};
use crate::schedule::{self, NoiseSchedule, Parameterization, SampleOptions, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full model.
    #[default]
    None,
    /// One joint multi-channel backbone inside each stage.
    NoCi,
    /// Histories are the raw per-channel trends, no fusion convolution.
    NoCd,
    /// A single global stage plus one multi-channel mixing convolution.
    NoStage,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoCi,
        Ablation::NoCd,
        Ablation::NoStage,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoCi => "no_ci",
            Ablation::NoCd => "no_cd",
            Ablation::NoStage => "no_stage",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm clip; `0` disables.
    pub grad_clip: f64,
    pub log_every: usize,
    /// Checkpoint interval used by callers that persist progress; `0` disables.
    pub save_every: usize,
    /// Validation-loss interval; `0` disables.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 10_000,
            grad_clip: 1.0,
            log_every: 100,
            save_every: 1000,
            val_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageDiffConfig {
    /// Window length `L_ser`.
    pub l_ser: usize,
    /// Stage count `M`.
    pub stages: usize,
    /// Feature count `D`.
    pub dim: usize,
    /// Decomposition scales `S`.
    pub scales: usize,
    pub l_patch: usize,
    pub l_win: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Query/key width per head; defaults to `d_model / heads`.
    pub d_k: Option<usize>,
    /// Feed-forward width; defaults to `2·d_model`.
    pub d_ff: Option<usize>,
    pub encoder_layers: usize,
    pub l_conv: usize,
    /// Moving-average width per scale; defaults to 25, 13, 7, ...
    pub pool_kernels: Option<Vec<usize>>,
    pub norm: NormKind,
    pub ablation: Ablation,
    pub per_channel_weights: bool,
    pub per_stage_weights: bool,
    /// Let gradients flow through histories across stage boundaries.
    pub grad_through_stages: bool,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for StageDiffConfig {
    fn default() -> Self {
        Self {
            l_ser: 64,
            stages: 2,
            dim: 1,
            scales: 3,
            l_patch: 8,
            l_win: 4,
            d_model: 64,
            heads: 4,
            d_k: None,
            d_ff: None,
            encoder_layers: 1,
            l_conv: 5,
            pool_kernels: None,
            norm: NormKind::Instance,
            ablation: Ablation::None,
            per_channel_weights: false,
            per_stage_weights: false,
            grad_through_stages: true,
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl StageDiffConfig {
    /// Stage count after applying the ablation.
    pub fn effective_stages(&self) -> usize {
        if self.ablation == Ablation::NoStage {
            1
        } else {
            self.stages
        }
    }

    pub fn l_sta(&self) -> usize {
        self.l_ser / self.effective_stages().max(1)
    }

    pub fn d_k(&self) -> usize {
        self.d_k.unwrap_or((self.d_model / self.heads.max(1)).max(1))
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.d_model)
    }

    pub fn pool_kernels(&self) -> Vec<usize> {
        self.pool_kernels
            .clone()
            .unwrap_or_else(|| default_pool_kernels(self.scales))
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.l_sta(), self.l_patch, self.l_win)
    }

    pub fn channel_independent(&self) -> bool {
        self.ablation != Ablation::NoCi
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("feature dimension must be ≥ 1".into());
        }
        if self.stages == 0 || !self.l_ser.is_multiple_of(self.stages) {
            return bad(format!(
                "window length {} is not divisible into {} stages",
                self.l_ser, self.stages
            ));
        }
        if self.l_ser < 2 {
            return bad(format!("window length {} < 2", self.l_ser));
        }
        self.geometry()?;
        if self.scales == 0 {
            return bad("scales must be ≥ 1".into());
        }
        let kernels = self.pool_kernels();
        if kernels.len() != self.scales {
            return bad(format!(
                "{} pool kernels for {} scales",
                kernels.len(),
                self.scales
            ));
        }
        if let Some(k) = kernels.iter().find(|k| **k == 0 || **k % 2 == 0) {
            return bad(format!("pool kernel {k} must be odd"));
        }
        if self.l_conv == 0 || self.l_conv.is_multiple_of(2) {
            return bad(format!("fusion kernel width {} must be odd", self.l_conv));
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        if self.heads == 0 || self.encoder_layers == 0 {
            return bad("heads and encoder layers must be ≥ 1".into());
        }
        if self.schedule.steps == 0 {
            return bad("diffusion steps must be ≥ 1".into());
        }
        if self.ablation == Ablation::NoStage && self.per_channel_weights {
            return bad("no_stage mixes channels and cannot use per-channel weights".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch size must be ≥ 1".into());
        }
        Ok(())
    }

    /// JSON of every field that changes the parameter layout or sampling.
    pub fn arch_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("train");
            obj.remove("seed");
        }
        v
    }

    pub fn arch_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.arch_json()).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Field-level differences of the architecture sections.
    pub fn arch_diff(&self, other: &StageDiffConfig) -> Vec<String> {
        let (a, b) = (self.arch_json(), other.arch_json());
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let null = serde_json::Value::Null;
                diff_values(&p, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} != {b}")),
        _ => {}
    }
}

/// Output of one denoiser call with the intermediate state kept.
#[derive(Debug, Clone)]
pub struct DenoiseTrace {
    /// `[B, L_ser, D]`.
    pub output: Tensor,
    /// Per stage, per scale trends `[B, D, L_sta]`.
    pub stage_trends: Vec<Vec<Tensor>>,
    pub attention: Vec<Tensor>,
}

/// The denoiser network `x_θ(X^k, k)`.
#[derive(Debug)]
pub struct StageDiff {
    cfg: StageDiffConfig,
    store: ParamStore,
    schedule: NoiseSchedule,
    step_proj: Linear,
    stacks: Vec<DecompStack>,
    channel_slots: usize,
    fusions: Vec<FusionConv>,
    mixer: Option<FusionConv>,
}

/// Windows per denoiser call during generation.
const GENERATE_CHUNK: usize = 256;

impl StageDiff {
    /// Builds the variant selected by `cfg.ablation` with seeded weights.
    pub fn new(cfg: &StageDiffConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let dm = cfg.d_model;
        let step_proj = Linear::new(&mut store, "step_proj", dm, dm, true, &mut rng)?;

        let ci = cfg.channel_independent();
        let stack_cfg = StackConfig {
            geom: cfg.geometry()?,
            channels: if ci { 1 } else { cfg.dim },
            dims: BlockDims {
                d_model: dm,
                heads: cfg.heads,
                d_k: cfg.d_k(),
                d_ff: cfg.d_ff(),
                norm: cfg.norm,
            },
            encoder_layers: cfg.encoder_layers,
            pool_kernels: cfg.pool_kernels(),
        };
        let stage_slots = if cfg.per_stage_weights {
            cfg.effective_stages()
        } else {
            1
        };
        let channel_slots = if cfg.per_channel_weights && ci { cfg.dim } else { 1 };
        let mut stacks = Vec::with_capacity(stage_slots * channel_slots);
        for m in 0..stage_slots {
            for d in 0..channel_slots {
                stacks.push(DecompStack::new(
                    &mut store,
                    &format!("stack.m{m}.c{d}"),
                    stack_cfg.clone(),
                    &mut rng,
                )?);
            }
        }

        let fusions = if cfg.ablation == Ablation::None || cfg.ablation == Ablation::NoCi {
            (0..cfg.scales)
                .map(|s| {
                    FusionConv::new(&mut store, &format!("fusion.scale{s}"), cfg.dim, cfg.l_conv, &mut rng)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mixer = if cfg.ablation == Ablation::NoStage {
            Some(FusionConv::new(&mut store, "mixer", cfg.dim, cfg.l_conv, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            schedule,
            step_proj,
            stacks,
            channel_slots,
            fusions,
            mixer,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Self::new(&ckpt.config)?;
        model.store.load_host(&ckpt.params)?;
        Ok(model)
    }

    pub fn config(&self) -> &StageDiffConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn fusions(&self) -> &[FusionConv] {
        &self.fusions
    }

    fn stack(&self, stage: usize, channel: usize) -> &DecompStack {
        let m = if self.cfg.per_stage_weights { stage } else { 0 };
        &self.stacks[m * self.channel_slots + channel]
    }

    /// Projected step embeddings `[B, d_model]`, one row per window.
    fn step_features(&self, ks: &[usize]) -> Result<Tensor> {
        let dm = self.cfg.d_model;
        let mut flat = Vec::with_capacity(ks.len() * dm);
        for &k in ks {
            flat.extend(schedule::step_embedding(k, dm)?);
        }
        let raw = Tensor::from_vec(flat, (ks.len(), dm), self.store.device())?;
        self.step_proj.forward(&raw)
    }

    /// `x0_hat = x_θ(x_k, k)` for a batch `[B, L_ser, D]` with one step per window.
    pub fn denoise(&self, x_k: &Tensor, ks: &[usize]) -> Result<Tensor> {
        Ok(self.denoise_traced(x_k, ks)?.output)
    }

    pub fn denoise_traced(&self, x_k: &Tensor, ks: &[usize]) -> Result<DenoiseTrace> {
        let (b, l, d) = x_k.dims3()?;
        if l != self.cfg.l_ser || d != self.cfg.dim || ks.len() != b {
            return Err(Error::Shape(format!(
                "denoiser input [{b}, {l}, {d}] with {} steps, model expects [*, {}, {}]",
                ks.len(),
                self.cfg.l_ser,
                self.cfg.dim
            )));
        }
        for &k in ks {
            if k == 0 || k > self.schedule.steps() {
                return Err(Error::StepOutOfRange {
                    k,
                    t: self.schedule.steps(),
                });
            }
        }
        let step = self.step_features(ks)?;
        let m_count = self.cfg.effective_stages();
        let l_sta = self.cfg.l_sta();
        let x = x_k.transpose(1, 2)?.contiguous()?;
        let mut history =
            fusion::initial_history(self.cfg.scales, b, d, l_sta, self.store.device())?;
        let mut outputs = Vec::with_capacity(m_count);
        let mut trace = DenoiseTrace {
            output: x_k.zeros_like()?,
            stage_trends: Vec::new(),
            attention: Vec::new(),
        };
        for m in 0..m_count {
            let xs = x.narrow(2, m * l_sta, l_sta)?.contiguous()?;
            let (out, trends) = self
                .run_stage(m, &xs, &history, &step, &mut trace.attention)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("stage {m}: {msg}")),
                    other => other,
                })?;
            outputs.push(out);
            if m + 1 < m_count {
                history = if self.fusions.is_empty() {
                    fusion::passthrough_history(&trends)
                } else {
                    fusion::build_history(&trends, &self.fusions)?
                };
                if !self.cfg.grad_through_stages {
                    history = history.detach();
                }
            }
            trace.stage_trends.push(trends);
        }
        let refs: Vec<&Tensor> = outputs.iter().collect();
        trace.output = Tensor::cat(&refs, 2)?.transpose(1, 2)?.contiguous()?;
        Ok(trace)
    }

    /// One stage: `xs` is `[B, D, L_sta]`; returns the stage estimate and
    /// the per-scale trends, both shaped `[B, D, L_sta]`.
    fn run_stage(
        &self,
        m: usize,
        xs: &Tensor,
        history: &HistoryBundle,
        step: &Tensor,
        attention: &mut Vec<Tensor>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, d, l) = xs.dims3()?;
        let mix_fn = self.mixer.as_ref().map(|conv| {
            move |x_hat: &Tensor| -> Result<Tensor> {
                let dims = x_hat.dims().to_vec();
                let joint = x_hat.reshape((b, d, l))?;
                let mixed = (&joint + conv.forward(&joint)?)?;
                Ok(mixed.reshape(dims)?)
            }
        });
        let mixer = mix_fn.as_ref().map(|f| f as &dyn Fn(&Tensor) -> Result<Tensor>);

        if !self.cfg.channel_independent() {
            let out = self.stack(m, 0).run(xs, &history.per_scale, step, mixer)?;
            attention.extend(out.attention);
            return Ok((out.estimate, out.trends));
        }

        if self.channel_slots == 1 {
            let fold = |t: &Tensor| -> Result<Tensor> { Ok(t.contiguous()?.reshape((b * d, 1, l))?) };
            let hist = history.per_scale.iter().map(fold).collect::<Result<Vec<_>>>()?;
            let dm = self.cfg.d_model;
            let step_rep = step
                .unsqueeze(1)?
                .broadcast_as((b, d, dm))?
                .contiguous()?
                .reshape((b * d, dm))?;
            let out = self.stack(m, 0).run(&fold(xs)?, &hist, &step_rep, mixer)?;
            attention.extend(out.attention);
            let unfold = |t: &Tensor| -> Result<Tensor> { Ok(t.reshape((b, d, l))?) };
            let trends = out.trends.iter().map(unfold).collect::<Result<Vec<_>>>()?;
            return Ok((unfold(&out.estimate)?, trends));
        }

        let mut estimates = Vec::with_capacity(d);
        let mut trends: Vec<Vec<Tensor>> = vec![Vec::with_capacity(d); self.cfg.scales];
        for c in 0..d {
            let pick = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(1, c, 1)?.contiguous()?) };
            let hist = history.per_scale.iter().map(pick).collect::<Result<Vec<_>>>()?;
            let out = self.stack(m, c).run(&pick(xs)?, &hist, step, None)?;
            attention.extend(out.attention);
            estimates.push(out.estimate);
            for (s, t) in out.trends.into_iter().enumerate() {
                trends[s].push(t);
            }
        }
        let cat = |ts: &[Tensor]| -> Result<Tensor> {
            let refs: Vec<&Tensor> = ts.iter().collect();
            Ok(Tensor::cat(&refs, 1)?)
        };
        let trends = trends.iter().map(|ts| cat(ts)).collect::<Result<Vec<_>>>()?;
        Ok((cat(&estimates)?, trends))
    }

    /// Host convenience: one shared step `k` for every window.
    pub fn denoise_window(&self, x_k: &Array3<f64>, k: usize) -> Result<Array3<f64>> {
        let t = nn::tensor_from_array3(x_k, self.store.device())?;
        let ks = vec![k; x_k.shape()[0]];
        nn::array3_from_tensor(&self.denoise(&t, &ks)?)
    }

    /// Training objective for a batch with explicit steps and noise.
    ///
    /// Data parameterization regresses `x_0`; noise parameterization
    /// regresses `ε`.
    pub fn loss(&self, x0: &Array3<f64>, ks: &[usize], eps: &Array3<f64>) -> Result<Tensor> {
        if x0.shape() != eps.shape() || ks.len() != x0.shape()[0] {
            return Err(Error::Shape(format!(
                "x0 {:?}, eps {:?}, {} steps",
                x0.shape(),
                eps.shape(),
                ks.len()
            )));
        }
        let mut x_k = Array3::zeros(x0.raw_dim());
        for (i, &k) in ks.iter().enumerate() {
            let noisy = self.schedule.forward_noise(
                &x0.index_axis(Axis(0), i),
                k,
                &eps.index_axis(Axis(0), i),
            )?;
            x_k.index_axis_mut(Axis(0), i).assign(&noisy);
        }
        let dev = self.store.device();
        let pred = self.denoise(&nn::tensor_from_array3(&x_k, dev)?, ks)?;
        let target = match self.cfg.schedule.parameterization {
            Parameterization::Data => x0,
            Parameterization::Noise => eps,
        };
        nn::mse(&pred, &nn::tensor_from_array3(target, dev)?)
    }

    /// Draws `n` normalized windows; window `i` uses RNG stream `i` of `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<WindowSet> {
        let opts = SampleOptions {
            parameterization: self.cfg.schedule.parameterization,
            clip: self.cfg.schedule.clip,
        };
        let dev = self.store.device().clone();
        schedule::sample(
            |x, k| {
                let mut out = Array3::zeros(x.raw_dim());
                let total = x.shape()[0];
                let mut start = 0;
                while start < total {
                    let end = (start + GENERATE_CHUNK).min(total);
                    let chunk = x.slice(ndarray::s![start..end, .., ..]).to_owned();
                    let t = nn::tensor_from_array3(&chunk, &dev)?;
                    let pred = self.denoise(&t, &vec![k; end - start])?;
                    out.slice_mut(ndarray::s![start..end, .., ..])
                        .assign(&nn::array3_from_tensor(&pred)?);
                    start = end;
                }
                Ok(out)
            },
            n,
            (self.cfg.l_ser, self.cfg.dim),
            &self.schedule,
            seed,
            opts,
        )
    }
}

/// Loss history of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// `(global step, loss)` per executed step.
    pub losses: Vec<(usize, f64)>,
    /// Seconds since the run started, per executed step.
    pub elapsed_secs: Vec<f64>,
    pub validation: Vec<(usize, f64)>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Mean of the first `window` losses.
    pub fn initial_smoothed(&self, window: usize) -> Option<f64> {
        mean_of(self.losses.iter().take(window).map(|l| l.1))
    }

    /// Mean of the last `window` losses.
    pub fn final_smoothed(&self, window: usize) -> Option<f64> {
        let skip = self.losses.len().saturating_sub(window);
        mean_of(self.losses.iter().skip(skip).map(|l| l.1))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,elapsed_secs\n");
        for ((step, loss), t) in self.losses.iter().zip(&self.elapsed_secs) {
            s.push_str(&format!("{step},{loss:?},{t:.3}\n"));
        }
        s
    }
}

fn mean_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Optimizer state plus the model; resumable from a [`Checkpoint`].
pub struct Trainer {
    model: StageDiff,
    opt: Adam,
    step: usize,
    pub norm: Option<NormStats>,
    pub feature_names: Option<Vec<String>>,
}

impl Trainer {
    pub fn new(cfg: &StageDiffConfig) -> Result<Self> {
        Ok(Self {
            model: StageDiff::new(cfg)?,
            opt: Adam::new(cfg.train.learning_rate, cfg.train.grad_clip),
            step: 0,
            norm: None,
            feature_names: None,
        })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = StageDiff::from_checkpoint(ckpt)?;
        let train = &ckpt.config.train;
        let mut opt = Adam::new(train.learning_rate, train.grad_clip);
        if let Some(state) = &ckpt.optimizer {
            opt.load_moments(model.params(), state.t, &state.moments)?;
        }
        Ok(Self {
            model,
            opt,
            step: ckpt.train_step,
            norm: ckpt.norm.clone(),
            feature_names: ckpt.feature_names.clone(),
        })
    }

    pub fn model(&self) -> &StageDiff {
        &self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn step_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.cfg.seed ^ 0x5EED_0F_7EA1);
        rng.set_stream(stream);
        rng
    }

    /// Draws `(x0, ks, eps)` for one batch.
    fn draw_batch(&self, windows: &WindowSet, rng: &mut ChaCha8Rng) -> (Array3<f64>, Vec<usize>, Array3<f64>) {
        let n = windows.len();
        let bsz = self.model.cfg.train.batch_size.min(n);
        let idx = rand::seq::index::sample(rng, n, bsz).into_vec();
        let x0 = windows.windows.select(Axis(0), &idx);
        let t = self.model.schedule.steps();
        let ks: Vec<usize> = (0..bsz).map(|_| rng.gen_range(1..=t)).collect();
        let eps = Array3::from_shape_simple_fn(x0.raw_dim(), || StandardNormal.sample(rng));
        (x0, ks, eps)
    }

    fn check_windows(&self, windows: &WindowSet) -> Result<()> {
        let cfg = &self.model.cfg;
        if windows.is_empty() {
            return Err(Error::Shape("no training windows".into()));
        }
        if windows.l_ser() != cfg.l_ser || windows.dim() != cfg.dim {
            return Err(Error::Shape(format!(
                "windows [{}, {}], config expects [{}, {}]",
                windows.l_ser(),
                windows.dim(),
                cfg.l_ser,
                cfg.dim
            )));
        }
        Ok(())
    }

    /// One optimizer update; returns the batch loss.
    pub fn train_step(&mut self, windows: &WindowSet) -> Result<f64> {
        self.check_windows(windows)?;
        let mut rng = self.step_rng(self.step as u64);
        let (x0, ks, eps) = self.draw_batch(windows, &mut rng);
        let loss = self.model.loss(&x0, &ks, &eps)?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}; k histogram {}",
                self.step,
                k_histogram(&ks, self.model.schedule.steps())
            )));
        }
        let grads = loss.backward()?;
        self.opt.step(self.model.params(), &grads).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {}", self.step)),
            other => other,
        })?;
        self.step += 1;
        Ok(value)
    }

    /// Loss on a fixed pseudo-random validation batch, no update.
    pub fn validation_loss(&self, windows: &WindowSet) -> Result<f64> {
        self.check_windows(windows)?;
        let mut rng = self.step_rng(u64::MAX);
        let (x0, ks, eps) = self.draw_batch(windows, &mut rng);
        Ok(self.model.loss(&x0, &ks, &eps)?.to_scalar::<f64>()?)
    }

    /// Runs `steps` updates, calling `after_step(trainer, loss)` after each.
    pub fn run<F>(&mut self, windows: &WindowSet, steps: usize, mut after_step: F) -> Result<TrainTrace>
    where
        F: FnMut(&Trainer, f64) -> Result<()>,
    {
        let started = Instant::now();
        let mut trace = TrainTrace::default();
        let val_every = self.model.cfg.train.val_every;
        for _ in 0..steps {
            let loss = self.train_step(windows)?;
            trace.losses.push((self.step, loss));
            trace.elapsed_secs.push(started.elapsed().as_secs_f64());
            if val_every > 0 && self.step.is_multiple_of(val_every) {
                trace.validation.push((self.step, self.validation_loss(windows)?));
            }
            after_step(self, loss)?;
        }
        Ok(trace)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.model.cfg.clone(),
            norm: self.norm.clone(),
            feature_names: self.feature_names.clone(),
            train_step: self.step,
            params: self.model.params().to_host()?,
            optimizer: Some(OptimizerState {
                t: self.opt.t,
                moments: self.opt.moments_to_host()?,
            }),
        })
    }
}

fn k_histogram(ks: &[usize], t: usize) -> String {
    let bins = 10.min(t);
    let mut counts = vec![0usize; bins];
    for &k in ks {
        counts[((k - 1) * bins / t).min(bins - 1)] += 1;
    }
    format!("{counts:?}")
}

/// Trains for `cfg.train.steps` updates from a fresh initialization.
pub fn train(windows: &WindowSet, cfg: &StageDiffConfig) -> Result<(Checkpoint, TrainTrace)> {
    let mut trainer = Trainer::new(cfg)?;
    let log_every = cfg.train.log_every;
    let trace = trainer.run(windows, cfg.train.steps, |t, loss| {
        if log_every > 0 && t.step() % log_every == 0 {
            log::info!("step {} loss {loss:.6}", t.step());
        }
        Ok(())
    })?;
    Ok((trainer.checkpoint()?, trace))
}

/// Samples `n` normalized windows from a checkpoint.
pub fn generate(ckpt: &Checkpoint, n: usize, seed: u64) -> Result<WindowSet> {
    StageDiff::from_checkpoint(ckpt)?.generate(n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro() -> StageDiffConfig {
        StageDiffConfig {
            l_ser: 16,
            stages: 2,
            dim: 2,
            scales: 2,
            l_patch: 4,
            l_win: 2,
            d_model: 8,
            heads: 2,
            pool_kernels: Some(vec![3, 1]),
            schedule: ScheduleConfig {
                steps: 4,
                ..Default::default()
            },
            train: TrainConfig {
                batch_size: 4,
                steps: 3,
                ..Default::default()
            },
            seed: 3,
            ..Default::default()
        }
    }

    fn noise(b: usize, cfg: &StageDiffConfig, seed: u64) -> Array3<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((b, cfg.l_ser, cfg.dim), || StandardNormal.sample(&mut r))
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("w/o".parse::<Ablation>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(micro().validate().is_ok());
        let mut c = micro();
        c.stages = 3;
        assert!(c.validate().is_err());
        let mut c = micro();
        c.l_win = 3;
        assert!(c.validate().is_err());
        let mut c = micro();
        c.pool_kernels = Some(vec![3, 2]);
        assert!(c.validate().is_err());
        let mut c = micro();
        c.l_conv = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn no_stage_patch_count_is_recomputed() {
        let cfg = StageDiffConfig {
            l_ser: 256,
            stages: 4,
            ablation: Ablation::NoStage,
            ..Default::default()
        };
        assert_eq!(cfg.effective_stages(), 1);
        assert_eq!(cfg.l_sta(), 256);
        assert_eq!(cfg.geometry().unwrap().num_patches(), (256 - 8) / 4 + 1);
    }

    #[test]
    fn output_shapes_for_every_variant() {
        for ab in Ablation::ALL {
            let cfg = StageDiffConfig {
                ablation: ab,
                ..micro()
            };
            let model = StageDiff::new(&cfg).unwrap();
            let x = noise(3, &cfg, 1);
            let out = model.denoise_window(&x, 2).unwrap();
            assert_eq!(out.shape(), &[3, 16, 2], "{ab}");
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn per_channel_and_per_stage_weights() {
        let cfg = StageDiffConfig {
            per_channel_weights: true,
            per_stage_weights: true,
            ..micro()
        };
        let model = StageDiff::new(&cfg).unwrap();
        assert_eq!(model.stacks.len(), 4);
        let out = model.denoise_window(&noise(2, &cfg, 2), 1).unwrap();
        assert_eq!(out.shape(), &[2, 16, 2]);
    }

    #[test]
    fn structural_ablation_checks() {
        let names = |ab| {
            let cfg = StageDiffConfig {
                ablation: ab,
                ..micro()
            };
            StageDiff::new(&cfg)
                .unwrap()
                .params()
                .iter()
                .map(|(k, _)| k.clone())
                .collect::<Vec<_>>()
        };
        assert!(names(Ablation::None).iter().any(|n| n.starts_with("fusion.")));
        assert!(!names(Ablation::NoCd).iter().any(|n| n.starts_with("fusion.")));
        assert!(names(Ablation::NoStage).iter().any(|n| n.starts_with("mixer.")));
        assert!(!names(Ablation::None).iter().any(|n| n.starts_with("mixer.")));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = StageDiff::new(&micro()).unwrap();
        let x = noise(2, &micro(), 0);
        assert!(matches!(model.denoise_window(&x, 0), Err(Error::StepOutOfRange { .. })));
        assert!(model.denoise_window(&x, 5).is_err());
        let wrong = Array3::zeros((2, 15, 2));
        assert!(matches!(model.denoise_window(&wrong, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let cfg = StageDiffConfig {
            train: TrainConfig {
                steps: 0,
                ..micro().train
            },
            ..micro()
        };
        let ws = WindowSet::new(noise(5, &cfg, 4).mapv(|v| v.abs().min(1.0)), 1);
        let (ckpt, trace) = train(&ws, &cfg).unwrap();
        assert!(trace.is_empty());
        let fresh = StageDiff::new(&cfg).unwrap().params().to_host().unwrap();
        assert_eq!(ckpt.params, fresh);
        assert_eq!(ckpt.train_step, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = micro();
        let ws = WindowSet::new(noise(6, &cfg, 5).mapv(|v| v.abs().min(1.0)), 1);
        let (a, ta) = train(&ws, &cfg).unwrap();
        let (b, tb) = train(&ws, &cfg).unwrap();
        assert_eq!(ta.losses, tb.losses);
        assert_eq!(a.params, b.params);
        assert_eq!(ta.len(), 3);
    }

    #[test]
    fn generation_is_reproducible_and_clipped() {
        let model = StageDiff::new(&micro()).unwrap();
        let a = model.generate(3, 9).unwrap();
        let b = model.generate(3, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.windows.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(model.generate(0, 9).unwrap().is_empty());
    }

    #[test]
    fn noise_parameterization_trains() {
        let mut cfg = micro();
        cfg.schedule.parameterization = Parameterization::Noise;
        let ws = WindowSet::new(noise(6, &cfg, 6).mapv(|v| v.abs().min(1.0)), 1);
        let (_, trace) = train(&ws, &cfg).unwrap();
        assert!(trace.losses.iter().all(|l| l.1.is_finite()));
    }

    #[test]
    fn arch_hash_ignores_training_budget() {
        let a = micro();
        let mut b = micro();
        b.train.steps = 999;
        b.seed = 42;
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.dim = 3;
        assert_ne!(a.arch_hash(), b.arch_hash());
        assert_eq!(a.arch_diff(&b), vec!["dim: 2 != 3".to_string()]);
    }

    #[test]
    fn k_histogram_bins() {
        assert_eq!(k_histogram(&[1, 2, 10], 10), "[1, 1, 0, 0, 0, 0, 0, 0, 0, 1]");
        assert_eq!(k_histogram(&[1, 1], 1), "[2]");
    }
}
