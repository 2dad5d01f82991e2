//! Sample-quality metrics: discriminative score, predictive (TSTR) score
//! and a t-SNE embedding of real against synthetic windows.

mod gru;
mod report;
pub mod tsne;

use candle_core::{Device, Tensor};
use ndarray::{Array3, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSet;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, ParamStore};

pub use gru::GruNet;
pub use report::{run_report, MetricsReport, ReportRow, ScoreSummary};
pub use tsne::{tsne_embed, Embedding, TsneConfig};

/// Windows per forward pass when scoring without gradients.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Recurrent width; defaults to `max(8, 4·D)`.
    pub hidden: Option<usize>,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of each class used for training the classifier.
    pub split: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub tsne: TsneConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            layers: 1,
            epochs: 5,
            learning_rate: 5e-3,
            batch_size: 32,
            split: 0.8,
            repetitions: 5,
            seed: 0,
            tsne: TsneConfig::default(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split {} outside (0, 1)", self.split)));
        }
        if self.repetitions == 0 || self.batch_size == 0 || self.layers == 0 {
            return Err(Error::Config(
                "repetitions, batch size and layers must be ≥ 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("metric learning rate must be positive".into()));
        }
        self.tsne.validate()
    }

    pub fn hidden_for(&self, dim: usize) -> usize {
        self.hidden.unwrap_or((4 * dim).max(8))
    }

    /// Independent stream for repetition `rep` of metric `tag`.
    fn rng(&self, tag: u64, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ tag);
        rng.set_stream(rep as u64);
        rng
    }
}

const DISC_TAG: u64 = 0xD15C;
const PRED_TAG: u64 = 0x9BED;

fn check_pair(real: &WindowSet, synth: &WindowSet) -> Result<()> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Metric("real and synthetic sets must be nonempty".into()));
    }
    if real.l_ser() != synth.l_ser() || real.dim() != synth.dim() {
        return Err(Error::Shape(format!(
            "real windows [{}, {}] vs synthetic [{}, {}]",
            real.l_ser(),
            real.dim(),
            synth.l_ser(),
            synth.dim()
        )));
    }
    Ok(())
}

/// Runs `epochs` of shuffled minibatch Adam over `n` examples.
fn fit<F>(store: &ParamStore, n: usize, cfg: &MetricConfig, rng: &mut ChaCha8Rng, mut batch_loss: F) -> Result<()>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut opt = Adam::new(cfg.learning_rate, 0.0);
    let mut order: Vec<u32> = (0..n as u32).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let idx = Tensor::new(chunk, store.device())?;
            let loss = batch_loss(&idx)?;
            let grads = loss.backward()?;
            opt.step(store, &grads)?;
        }
    }
    Ok(())
}

/// Numerically stable `mean(BCE(sigmoid(logit), y))`.
fn bce_with_logits(logits: &Tensor, y: &Tensor) -> Result<Tensor> {
    // max(l, 0) − l·y + log(1 + exp(−|l|))
    let pos = logits.relu()?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - (logits * y)?)? + soft)?.mean_all()?)
}

fn stack_windows(parts: &[(&WindowSet, &[usize])]) -> Array3<f64> {
    let views: Vec<Array3<f64>> = parts
        .iter()
        .map(|(set, idx)| set.windows.select(Axis(0), idx))
        .collect();
    let refs: Vec<_> = views.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &refs).expect("windows share trailing shape")
}

/// One repetition of the real-vs-synthetic classifier; returns `|acc − 0.5|`.
fn discriminative_once(real: &WindowSet, synth: &WindowSet, cfg: &MetricConfig, rep: usize) -> Result<f64> {
    let mut rng = cfg.rng(DISC_TAG, rep);
    let n = real.len().min(synth.len());
    let n_train = ((n as f64) * cfg.split).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Metric(format!(
            "split {} of {n} windows per class leaves an empty train or test set",
            cfg.split
        )));
    }
    let r_idx = index::sample(&mut rng, real.len(), n).into_vec();
    let s_idx = index::sample(&mut rng, synth.len(), n).into_vec();
    let (r_tr, r_te) = r_idx.split_at(n_train);
    let (s_tr, s_te) = s_idx.split_at(n_train);
    let dev = Device::Cpu;
    let x_train = nn::tensor_from_array3(&stack_windows(&[(real, r_tr), (synth, s_tr)]), &dev)?;
    let y_train: Vec<f64> = (0..2 * n_train).map(|i| f64::from(u8::from(i < n_train))).collect();
    let y_train = Tensor::from_vec(y_train, (2 * n_train, 1), &dev)?;

    let mut store = ParamStore::new();
    let net = GruNet::new(&mut store, real.dim(), cfg.hidden_for(real.dim()), cfg.layers, 1, &mut rng)?;
    fit(&store, 2 * n_train, cfg, &mut rng, |idx| {
        let x = x_train.index_select(idx, 0)?;
        let y = y_train.index_select(idx, 0)?;
        bce_with_logits(&net.forward_last(&x)?, &y)
    })?;

    let test = stack_windows(&[(real, r_te), (synth, s_te)]);
    let n_test = r_te.len();
    let mut correct = 0usize;
    for start in (0..2 * n_test).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(2 * n_test);
        let chunk = test.slice(ndarray::s![start..end, .., ..]).to_owned();
        let logits = net
            .forward_last(&nn::tensor_from_array3(&chunk, &dev)?)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        for (i, l) in logits.into_iter().enumerate() {
            let is_real = start + i < n_test;
            correct += usize::from((l > 0.0) == is_real);
        }
    }
    let acc = correct as f64 / (2 * n_test) as f64;
    Ok((acc - 0.5).abs())
}

/// `|held-out accuracy − 0.5|` of a GRU classifier, over `R` fresh splits.
///
/// Classes are balanced by subsampling the larger set.
pub fn discriminative_score(real: &WindowSet, synth: &WindowSet, cfg: &MetricConfig) -> Result<ScoreSummary> {
    cfg.validate()?;
    check_pair(real, synth)?;
    let runs = (0..cfg.repetitions)
        .map(|rep| discriminative_once(real, synth, cfg, rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSummary::from_runs(runs))
}

/// Next-step targets: inputs are steps `0..L−1`, targets `1..L`.
fn shift_pair(w: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let l = w.shape()[1];
    (
        w.slice(ndarray::s![.., ..l - 1, ..]).to_owned(),
        w.slice(ndarray::s![.., 1.., ..]).to_owned(),
    )
}

fn predictive_once(train: &WindowSet, test: &WindowSet, cfg: &MetricConfig, rep: usize) -> Result<f64> {
    let mut rng = cfg.rng(PRED_TAG, rep);
    let dev = Device::Cpu;
    let d = train.dim();
    let (x, y) = shift_pair(&train.windows);
    let (x, y) = (nn::tensor_from_array3(&x, &dev)?, nn::tensor_from_array3(&y, &dev)?);
    let mut store = ParamStore::new();
    let net = GruNet::new(&mut store, d, cfg.hidden_for(d), cfg.layers, d, &mut rng)?;
    fit(&store, train.len(), cfg, &mut rng, |idx| {
        let pred = nn::sigmoid(&net.forward_seq(&x.index_select(idx, 0)?)?)?;
        Ok((pred - y.index_select(idx, 0)?)?.abs()?.mean_all()?)
    })?;

    let (tx, ty) = shift_pair(&test.windows);
    let mut abs_sum = 0.0;
    for start in (0..test.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(test.len());
        let xin = tx.slice(ndarray::s![start..end, .., ..]).to_owned();
        let pred = nn::sigmoid(&net.forward_seq(&nn::tensor_from_array3(&xin, &dev)?)?)?;
        let pred = nn::array3_from_tensor(&pred)?;
        abs_sum += (&pred - &ty.slice(ndarray::s![start..end, .., ..]))
            .mapv(f64::abs)
            .sum();
    }
    Ok(abs_sum / ty.len() as f64)
}

/// Train-on-synthetic, test-on-real MAE of one-step-ahead prediction.
pub fn predictive_score(real: &WindowSet, synth: &WindowSet, cfg: &MetricConfig) -> Result<ScoreSummary> {
    cfg.validate()?;
    check_pair(real, synth)?;
    if real.l_ser() < 2 {
        return Err(Error::Metric("prediction needs windows of length ≥ 2".into()));
    }
    let runs = (0..cfg.repetitions)
        .map(|rep| predictive_once(synth, real, cfg, rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSummary::from_runs(runs))
}

/// Train-on-real, test-on-real reference for [`predictive_score`].
pub fn trtr_baseline(real: &WindowSet, cfg: &MetricConfig) -> Result<ScoreSummary> {
    predictive_score(real, real, cfg)
}
