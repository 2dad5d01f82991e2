//! Closed-form diffusion mathematics and the ancestral sampling loop.
//!
//! Steps are 1-based throughout: `k ∈ 1..=T`, with `ᾱ_0 = 1`.

use ndarray::{Array, Array3, ArrayBase, Data, Dimension, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Per-step noise `1 − α_k` linear from `start` to `end`.
    Linear { start: f64, end: f64 },
    /// Cosine cumulative schedule with offset `s`.
    Cosine { offset: f64 },
    /// Explicit per-step `α_k` values; their count overrides `steps`.
    Explicit { alpha: Vec<f64> },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            start: 1e-4,
            end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `(1−α_k)(1−ᾱ_{k−1})/(1−ᾱ_k)`.
    #[default]
    Posterior,
    /// `(1−α_k)/α_k`.
    AlphaRatio,
}

/// What the denoiser network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Clean data `x̂_0`.
    #[default]
    Data,
    /// The added noise `ε̂`.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub variance: VarianceMode,
    pub parameterization: Parameterization,
    /// Clip final samples to `[0, 1]`.
    pub clip: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            schedule: ScheduleKind::default(),
            variance: VarianceMode::Posterior,
            parameterization: Parameterization::Data,
            clip: true,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::build(self.steps, &self.schedule)?.with_variance(self.variance))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    variance: VarianceMode,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: &ScheduleKind) -> Result<Self> {
        let alpha = match kind {
            ScheduleKind::Explicit { alpha } => alpha.clone(),
            _ if steps == 0 => return Err(Error::Config("diffusion steps must be ≥ 1".into())),
            ScheduleKind::Linear { start, end } => (0..steps)
                .map(|i| {
                    let frac = if steps == 1 {
                        0.0
                    } else {
                        i as f64 / (steps - 1) as f64
                    };
                    1.0 - (start + (end - start) * frac)
                })
                .collect(),
            ScheduleKind::Cosine { offset } => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=steps)
                    .map(|k| (f(k as f64) / f(k as f64 - 1.0)).clamp(1e-3, 1.0 - 1e-9))
                    .collect()
            }
        };
        Self::from_alphas(alpha)
    }

    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Config("diffusion steps must be ≥ 1".into()));
        }
        if let Some((i, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && **a < 1.0))
        {
            return Err(Error::Config(format!("alpha_{} = {a} outside (0, 1)", i + 1)));
        }
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let beta = alpha_bar.iter().map(|ab| 1.0 - ab).collect();
        Ok(Self {
            alpha,
            alpha_bar,
            beta,
            variance: VarianceMode::Posterior,
        })
    }

    pub fn with_variance(mut self, mode: VarianceMode) -> Self {
        self.variance = mode;
        self
    }

    pub fn variance_mode(&self) -> VarianceMode {
        self.variance
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::StepOutOfRange {
                k,
                t: self.steps(),
            });
        }
        Ok(())
    }

    /// Panics unless `1 ≤ k ≤ T`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// `ᾱ_k`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    /// `β_k = 1 − ᾱ_k`.
    pub fn beta(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.beta[k - 1]
        }
    }

    /// Coefficients `(c_x, c_0)` with `μ = c_x·x_k + c_0·x̂_0`.
    pub fn posterior_coefficients(&self, k: usize) -> Result<(f64, f64)> {
        self.check(k)?;
        let (a, ab, ab_prev) = (self.alpha(k), self.alpha_bar(k), self.alpha_bar(k - 1));
        let denom = 1.0 - ab;
        Ok((
            a.sqrt() * (1.0 - ab_prev) / denom,
            ab_prev.sqrt() * (1.0 - a) / denom,
        ))
    }

    /// `X^k = √(1−β_k)·X^0 + √β_k·ε`.
    pub fn forward_noise<S1, S2, D>(
        &self,
        x0: &ArrayBase<S1, D>,
        k: usize,
        eps: &ArrayBase<S2, D>,
    ) -> Result<Array<f64, D>>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        self.check(k)?;
        same_shape(x0.shape(), eps.shape())?;
        let (c0, ce) = ((1.0 - self.beta(k)).sqrt(), self.beta(k).sqrt());
        Ok(Zip::from(x0)
            .and(eps)
            .map_collect(|&x, &e| c0 * x + ce * e))
    }

    /// Posterior mean from a clean-data estimate.
    pub fn posterior_mean_data<S1, S2, D>(
        &self,
        x_k: &ArrayBase<S1, D>,
        x0_hat: &ArrayBase<S2, D>,
        k: usize,
    ) -> Result<Array<f64, D>>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        let (cx, c0) = self.posterior_coefficients(k)?;
        same_shape(x_k.shape(), x0_hat.shape())?;
        Ok(Zip::from(x_k)
            .and(x0_hat)
            .map_collect(|&x, &x0| cx * x + c0 * x0))
    }

    /// Posterior mean from a noise estimate.
    pub fn posterior_mean_noise<S1, S2, D>(
        &self,
        x_k: &ArrayBase<S1, D>,
        eps_hat: &ArrayBase<S2, D>,
        k: usize,
    ) -> Result<Array<f64, D>>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        self.check(k)?;
        same_shape(x_k.shape(), eps_hat.shape())?;
        let a = self.alpha(k);
        let cx = 1.0 / a.sqrt();
        let ce = (1.0 - a) / ((1.0 - self.alpha_bar(k)).sqrt() * a.sqrt());
        Ok(Zip::from(x_k)
            .and(eps_hat)
            .map_collect(|&x, &e| cx * x - ce * e))
    }

    pub fn posterior_variance(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        let a = self.alpha(k);
        Ok(match self.variance {
            VarianceMode::Posterior => {
                (1.0 - a) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))
            }
            VarianceMode::AlphaRatio => (1.0 - a) / a,
        })
    }
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// A noised window with the step and RNG provenance that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyWindow<D: Dimension> {
    pub x_k: Array<f64, D>,
    pub k: usize,
    pub seed_trace: String,
}

/// Mean squared error over every element.
pub fn training_loss<S1, S2, D>(x0: &ArrayBase<S1, D>, x0_hat: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    same_shape(x0.shape(), x0_hat.shape())?;
    if x0.is_empty() {
        return Err(Error::Shape("empty tensors".into()));
    }
    let sum = Zip::from(x0)
        .and(x0_hat)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sum / x0.len() as f64)
}

/// Sinusoidal step embedding: `[sin(k·ω_0), cos(k·ω_0), sin(k·ω_1), ...]`
/// with `ω_i = 10000^(−2i/d)`.
pub fn step_embedding(k: usize, d_emb: usize) -> Result<Vec<f64>> {
    if d_emb == 0 || !d_emb.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "step embedding width {d_emb} must be even and positive"
        )));
    }
    let mut v = Vec::with_capacity(d_emb);
    for i in 0..d_emb / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / d_emb as f64);
        let arg = k as f64 * freq;
        v.push(arg.sin());
        v.push(arg.cos());
    }
    Ok(v)
}

/// Per-window RNG stream derived from a seed.
pub fn window_rng(seed: u64, window: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(window as u64);
    rng
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub parameterization: Parameterization,
    pub clip: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            parameterization: Parameterization::Data,
            clip: true,
        }
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// `denoiser(x_k, k)` receives the whole `n × L × D` batch and returns
/// either `x̂_0` or `ε̂` depending on `opts.parameterization`. Window `i`
/// draws all of its noise from [`window_rng`]`(seed, i)`.
pub fn sample<F>(
    mut denoiser: F,
    n: usize,
    shape: (usize, usize),
    sched: &NoiseSchedule,
    seed: u64,
    opts: SampleOptions,
) -> Result<WindowSet>
where
    F: FnMut(&Array3<f64>, usize) -> Result<Array3<f64>>,
{
    let (l, d) = shape;
    if n == 0 {
        return Ok(WindowSet::empty(l, d));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| window_rng(seed, i)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| {
        let mut z = Array3::<f64>::zeros((n, l, d));
        for (mut w, rng) in z.outer_iter_mut().zip(rngs.iter_mut()) {
            w.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        }
        z
    };

    let mut x = draw(&mut rngs);
    for k in (1..=sched.steps()).rev() {
        let pred = denoiser(&x, k)?;
        if pred.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "denoiser returned {:?} for input {:?} at step {k}",
                pred.shape(),
                x.shape()
            )));
        }
        let mean = match opts.parameterization {
            Parameterization::Data => sched.posterior_mean_data(&x, &pred, k)?,
            Parameterization::Noise => sched.posterior_mean_noise(&x, &pred, k)?,
        };
        let var = sched.posterior_variance(k)?;
        x = if var > 0.0 {
            let z = draw(&mut rngs);
            mean + z * var.sqrt()
        } else {
            mean
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state at step {k}")));
        }
    }
    if opts.clip {
        x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(WindowSet::new(x, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1, Array2};
    use rand::Rng;

    fn toy() -> NoiseSchedule {
        NoiseSchedule::from_alphas(vec![0.9, 0.8]).unwrap()
    }

    #[test]
    fn explicit_alphas() {
        let s = toy();
        assert_eq!(s.alpha_bar(1), 0.9);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.beta(1) - 0.1).abs() < 1e-15);
        assert!((s.beta(2) - 0.28).abs() < 1e-15);
    }

    #[test]
    fn no_noise_limit() {
        let s = NoiseSchedule::from_alphas(vec![1.0 - 1e-12; 5]).unwrap();
        assert!(s.beta(5) < 1e-10);
        assert!((s.alpha_bar(5) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_alpha_outside_unit_interval() {
        assert!(NoiseSchedule::from_alphas(vec![0.5, 1.0]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![0.0]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![]).is_err());
        let bad = ScheduleKind::Linear {
            start: 0.5,
            end: 1.5,
        };
        assert!(NoiseSchedule::build(10, &bad).is_err());
    }

    #[test]
    fn default_linear_schedules_terminal_alpha_bar() {
        // Frozen from an independent log-sum evaluation of Π(1 − b_i).
        let s = NoiseSchedule::build(1000, &ScheduleKind::default()).unwrap();
        assert!((s.alpha_bar(1000) - 4.035829765375687e-05).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 1e-4);
        let s = NoiseSchedule::build(500, &ScheduleKind::default()).unwrap();
        assert!((s.alpha_bar(500) - 0.006352710797015054).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s = NoiseSchedule::build(200, &ScheduleKind::Cosine { offset: 0.008 }).unwrap();
        for k in 2..=200 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
    }

    #[test]
    fn forward_noise_zero_eps() {
        let s = toy();
        let x0 = arr1(&[1.0]);
        let x = s.forward_noise(&x0, 2, &arr1(&[0.0])).unwrap();
        assert!((x[0] - 0.848528137423857).abs() < 1e-12);
        let x0 = Array2::from_shape_fn((4, 3), |(i, j)| i as f64 - j as f64);
        let x = s.forward_noise(&x0, 1, &Array2::zeros((4, 3))).unwrap();
        for (a, b) in x.iter().zip(x0.iter()) {
            assert!((a - 0.9f64.sqrt() * b).abs() < 1e-15);
        }
        assert!(s.forward_noise(&x0, 3, &Array2::zeros((4, 3))).is_err());
        assert!(s.forward_noise(&x0, 1, &Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn posterior_mean_boundary_and_hand_values() {
        let s = toy();
        let xk = arr1(&[3.0, -2.0]);
        let x0 = arr1(&[0.25, 0.5]);
        assert_eq!(s.posterior_mean_data(&xk, &x0, 1).unwrap(), x0);

        let c = arr1(&[1.0, 2.0, -0.5]);
        let xk = &c * 0.72f64.sqrt();
        let mu = s.posterior_mean_data(&xk, &c, 2).unwrap();
        for (m, v) in mu.iter().zip(c.iter()) {
            assert!((m - 0.9486832980505138 * v).abs() < 1e-12);
        }
        let (cx, c0) = s.posterior_coefficients(2).unwrap();
        assert!((cx - 0.3194382824999698).abs() < 1e-12);
        assert!((c0 - 0.6776309271789382).abs() < 1e-12);

        let z = Array1::<f64>::zeros(4);
        assert_eq!(s.posterior_mean_data(&z, &z, 2).unwrap(), z);
        assert!(s.posterior_mean_data(&z, &z, 0).is_err());
    }

    #[test]
    fn posterior_mean_noise_cases() {
        let s = toy();
        let xk = arr1(&[0.3, -1.0]);
        let mu = s.posterior_mean_noise(&xk, &arr1(&[0.0, 0.0]), 2).unwrap();
        assert!((mu[0] - 0.3 / 0.8f64.sqrt()).abs() < 1e-15);

        let v = arr1(&[0.7]);
        let mu = s.posterior_mean_noise(&v, &v, 2).unwrap();
        let coef = 1.0 / 0.8f64.sqrt() - 0.2 / (0.28f64.sqrt() * 0.8f64.sqrt());
        assert!((mu[0] - 0.7 * coef).abs() < 1e-14);
    }

    #[test]
    fn posterior_variance_values() {
        let s = toy();
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        assert!((s.posterior_variance(2).unwrap() - 0.07142857142857144).abs() < 1e-15);
        let p = toy().with_variance(VarianceMode::AlphaRatio);
        assert!((p.posterior_variance(2).unwrap() - 0.25).abs() < 1e-15);
        assert!((p.posterior_variance(1).unwrap() - 0.1 / 0.9).abs() < 1e-15);
    }

    #[test]
    fn loss_cases() {
        let a = Array2::<f64>::zeros((3, 2));
        assert_eq!(training_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(training_loss(&a, &Array2::ones((3, 2))).unwrap(), 1.0);
        assert!(training_loss(&a, &Array2::ones((2, 3))).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..37).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..37).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut sum = 0.0;
        for i in 0..37 {
            sum += (x[i] - y[i]).powi(2);
        }
        let got = training_loss(&arr1(&x), &arr1(&y)).unwrap();
        assert!((got - sum / 37.0).abs() < 1e-12);
    }

    #[test]
    fn step_embedding_values() {
        let e = step_embedding(0, 6).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = step_embedding(1, 4).unwrap();
        let expect = [
            0.8414709848078965,
            0.5403023058681398,
            0.009999833334166664,
            0.9999500004166653,
        ];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(step_embedding(3, 5).is_err());
        assert!(step_embedding(12345, 64)
            .unwrap()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sampler_single_step_returns_denoiser_output() {
        let s = NoiseSchedule::from_alphas(vec![0.7]).unwrap();
        let target = Array3::from_shape_fn((3, 4, 2), |(a, b, c)| 0.1 * (a + b + c) as f64 / 8.0);
        let t2 = target.clone();
        let out = sample(
            |x, k| {
                assert_eq!(k, 1);
                assert_eq!(x.shape(), &[3, 4, 2]);
                Ok(t2.clone())
            },
            3,
            (4, 2),
            &s,
            9,
            SampleOptions {
                clip: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.windows, target);
    }

    #[test]
    fn sampler_constant_denoiser_lands_on_target() {
        let s = NoiseSchedule::build(50, &ScheduleKind::default()).unwrap();
        let out = sample(
            |x, _| Ok(Array3::from_elem(x.raw_dim(), 0.3)),
            5,
            (8, 2),
            &s,
            1,
            SampleOptions::default(),
        )
        .unwrap();
        assert!(out.windows.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn sampler_is_deterministic_and_checks_shapes() {
        let s = NoiseSchedule::build(20, &ScheduleKind::default()).unwrap();
        let den = |x: &Array3<f64>, _k: usize| Ok(x.mapv(|v| 0.5 * v.tanh() + 0.5));
        let a = sample(den, 4, (6, 3), &s, 42, SampleOptions::default()).unwrap();
        let b = sample(den, 4, (6, 3), &s, 42, SampleOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.windows.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let c = sample(den, 4, (6, 3), &s, 43, SampleOptions::default()).unwrap();
        assert_ne!(a, c);

        let bad = sample(
            |_x, _k| Ok(Array3::zeros((1, 1, 1))),
            2,
            (6, 3),
            &s,
            0,
            SampleOptions::default(),
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
        let nan = sample(
            |x, _k| Ok(x.mapv(|_| f64::NAN)),
            2,
            (6, 3),
            &s,
            0,
            SampleOptions::default(),
        );
        assert!(matches!(nan, Err(Error::NonFinite(_))));
        let empty = sample(den, 0, (6, 3), &s, 0, SampleOptions::default()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn window_streams_are_independent_of_batch_size() {
        let s = NoiseSchedule::build(10, &ScheduleKind::default()).unwrap();
        let den = |x: &Array3<f64>, _k: usize| Ok(x.mapv(|v| 0.1 * v));
        let opts = SampleOptions {
            clip: false,
            ..Default::default()
        };
        let small = sample(den, 2, (4, 1), &s, 5, opts).unwrap();
        let big = sample(den, 5, (4, 1), &s, 5, opts).unwrap();
        assert_eq!(small.window(1), big.window(1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn schedule() -> impl Strategy<Value = NoiseSchedule> {
            proptest::collection::vec(0.5f64..0.999, 1..40)
                .prop_map(|a| NoiseSchedule::from_alphas(a).unwrap())
        }

        proptest! {
            #[test]
            fn monotone_and_nonnegative_variance(s in schedule()) {
                for k in 1..=s.steps() {
                    prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
                    prop_assert!(s.beta(k) > s.beta(k - 1));
                    prop_assert!((s.beta(k) - (1.0 - s.alpha_bar(k))).abs() == 0.0);
                    prop_assert!(s.posterior_variance(k).unwrap() >= 0.0);
                }
                prop_assert_eq!(s.alpha_bar(1), s.alpha(1));
            }

            #[test]
            fn zero_noise_posterior_consistency(
                s in schedule(),
                x0 in proptest::collection::vec(-3.0f64..3.0, 1..16),
                pick in 0.0f64..1.0,
            ) {
                let k = 1 + ((s.steps() - 1) as f64 * pick) as usize;
                let x0 = arr1(&x0);
                let xk = &x0 * s.alpha_bar(k).sqrt();
                let mu = s.posterior_mean_data(&xk, &x0, k).unwrap();
                for (m, v) in mu.iter().zip(x0.iter()) {
                    let want = s.alpha_bar(k - 1).sqrt() * v;
                    prop_assert!((m - want).abs() <= 1e-9 * want.abs().max(1e-12) + 1e-15);
                }
            }

            #[test]
            fn parameterizations_agree(
                s in schedule(),
                xk in proptest::collection::vec(-3.0f64..3.0, 8),
                x0 in proptest::collection::vec(-3.0f64..3.0, 8),
                pick in 0.0f64..1.0,
            ) {
                let k = 1 + ((s.steps() - 1) as f64 * pick) as usize;
                let (xk, x0) = (arr1(&xk), arr1(&x0));
                let eps = (&xk - &x0 * s.alpha_bar(k).sqrt()) / (1.0 - s.alpha_bar(k)).sqrt();
                let a = s.posterior_mean_data(&xk, &x0, k).unwrap();
                let b = s.posterior_mean_noise(&xk, &eps, k).unwrap();
                for (u, v) in a.iter().zip(b.iter()) {
                    prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0));
                }
            }
        }
    }
}
