//! Small neural-network toolkit over `candle_core` in `f64`.
//!
//! Parameters are initialized from a seeded ChaCha stream so a model is a
//! pure function of its config and seed. Activations are composed from
//! primitive ops so that reverse-mode gradients are exact.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over the given fan-in / fan-out.
    Xavier { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
}

/// Named, ordered set of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            vars: BTreeMap::new(),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates a variable; names must be unique.
    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal { std } => (0..n)
                .map(|_| { let z: f64 = StandardNormal.sample(rng); std * z })
                .collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flat host copies keyed by name.
    pub fn to_host(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let shape = v.dims().to_vec();
                let data = v.as_tensor().flatten_all()?.to_vec1::<f64>()?;
                Ok((k.clone(), (shape, data)))
            })
            .collect()
    }

    /// Overwrites every variable from host data; names and shapes must match.
    pub fn load_host(&self, host: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        if host.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                host.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, data) = host
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects {:?}",
                    var.dims()
                )));
            }
            var.set(&Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?)?;
        }
        Ok(())
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.create(
            &format!("{name}.weight"),
            &[fan_in, fan_out],
            Init::Xavier { fan_in, fan_out },
            rng,
        )?;
        let bias = if bias {
            Some(store.create(&format!("{name}.bias"), &[fan_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// `[.., n] · [n, m] → [.., m]` as one 2-D product. Much faster than
/// `broadcast_matmul`, which runs a small GEMM per leading index.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let n = *dims.last().ok_or_else(|| Error::Shape("matmul of a scalar".into()))?;
    let rows = x.elem_count() / n.max(1);
    let mut out = dims.to_vec();
    *out.last_mut().expect("nonempty") = w.dim(1)?;
    Ok(x.reshape((rows, n))?.matmul(w)?.reshape(out)?)
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x + ((x.sqr()? * x)? * 0.044715)?)? * c)?;
    Ok(((x * 0.5)? * (inner.tanh()? + 1.0)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Softmax over the last dimension, stabilized by a detached row max.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn tensor_from_array3(a: &Array3<f64>, device: &Device) -> Result<Tensor> {
    let (n, l, d) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (n, l, d), device)?)
}

pub fn array3_from_tensor(t: &Tensor) -> Result<Array3<f64>> {
    let (n, l, d) = t.dims3()?;
    let data = t.flatten_all()?.to_vec1::<f64>()?;
    Array3::from_shape_vec((n, l, d), data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn tensor_from_array2(a: &Array2<f64>, device: &Device) -> Result<Tensor> {
    let (r, c) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), device)?)
}

pub fn zeros(shape: &[usize], device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DType::F64, device)?)
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 clip on the gradient; non-positive disables clipping.
    pub clip_norm: f64,
    pub t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => (
                    (&g * (1.0 - self.beta1))?,
                    (g.sqr()? * (1.0 - self.beta2))?,
                ),
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.moments.insert(name.clone(), (m.detach(), v.detach()));
        }
        Ok(norm)
    }

    /// First/second moments as host data, for checkpointing.
    pub fn moments_to_host(&self) -> Result<BTreeMap<String, (Vec<f64>, Vec<f64>)>> {
        self.moments
            .iter()
            .map(|(k, (m, v))| {
                Ok((
                    k.clone(),
                    (
                        m.flatten_all()?.to_vec1::<f64>()?,
                        v.flatten_all()?.to_vec1::<f64>()?,
                    ),
                ))
            })
            .collect()
    }

    pub fn load_moments(
        &mut self,
        store: &ParamStore,
        t: u64,
        host: &BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    ) -> Result<()> {
        self.t = t;
        self.moments.clear();
        for (name, (m, v)) in host {
            let var = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown `{name}`")))?;
            if m.len() != var.elem_count() || v.len() != var.elem_count() {
                return Err(Error::Checkpoint(format!("optimizer state size for `{name}`")));
            }
            let m = Tensor::from_vec(m.clone(), var.dims(), store.device())?;
            let v = Tensor::from_vec(v.clone(), var.dims(), store.device())?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -5.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s[1][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_formula() {
        let xs = [-3.0, -0.5, 0.0, 0.7, 2.5];
        let t = Tensor::new(&xs, &Device::Cpu).unwrap();
        let g = gelu(&t).unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in xs.iter().zip(g) {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let want = 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh());
            assert!((y - want).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.create("w", &[3], Init::Normal { std: 1.0 }, &mut rng).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let mut opt = Adam::new(0.05, 1.0);
        for _ in 0..600 {
            let loss = mse(&w, &target).unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads).unwrap();
        }
        let got = w.to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-3, "{got:?}");
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            Linear::new(&mut store, "l", 4, 5, true, &mut rng).unwrap();
            store.to_host().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn host_round_trip_rejects_shape_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.create("a", &[2, 2], Init::Ones, &mut rng).unwrap();
        let mut host = store.to_host().unwrap();
        host.get_mut("a").unwrap().1[0] = 7.0;
        store.load_host(&host).unwrap();
        assert_eq!(store.get("a").unwrap().to_vec2::<f64>().unwrap()[0][0], 7.0);
        host.get_mut("a").unwrap().0 = vec![4];
        assert!(store.load_host(&host).is_err());
    }
}
