//! Stacked GRU used by both scoring networks.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{matmul_last, sigmoid, Init, Linear, ParamStore};

#[derive(Debug, Clone)]
struct GruLayer {
    hidden: usize,
    /// `[in, 3H]`, gate order reset, update, candidate.
    w_x: Tensor,
    w_h: Tensor,
    bias: Tensor,
}

impl GruLayer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h3 = 3 * hidden;
        Ok(Self {
            hidden,
            w_x: store.create(
                &format!("{name}.w_x"),
                &[input, h3],
                Init::Xavier { fan_in: input, fan_out: h3 },
                rng,
            )?,
            w_h: store.create(
                &format!("{name}.w_h"),
                &[hidden, h3],
                Init::Xavier { fan_in: hidden, fan_out: h3 },
                rng,
            )?,
            bias: store.create(&format!("{name}.bias"), &[h3], Init::Zeros, rng)?,
        })
    }

    /// `x: [B, L, in]` to hidden states `[B, L, H]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        let h = self.hidden;
        let gx = matmul_last(x, &self.w_x)?.broadcast_add(&self.bias)?;
        let mut state = Tensor::zeros((b, h), x.dtype(), x.device())?;
        let mut states = Vec::with_capacity(l);
        for t in 0..l {
            let gx_t = gx.narrow(1, t, 1)?.squeeze(1)?;
            let gh = state.matmul(&self.w_h)?;
            let r = sigmoid(&(gx_t.narrow(1, 0, h)? + gh.narrow(1, 0, h)?)?)?;
            let z = sigmoid(&(gx_t.narrow(1, h, h)? + gh.narrow(1, h, h)?)?)?;
            let n = (gx_t.narrow(1, 2 * h, h)? + (r * gh.narrow(1, 2 * h, h)?)?)?.tanh()?;
            // h' = (1 - z)·n + z·h
            state = (&n + (z * (&state - &n)?)?)?;
            states.push(state.unsqueeze(1)?);
        }
        let refs: Vec<&Tensor> = states.iter().collect();
        Ok(Tensor::cat(&refs, 1)?)
    }
}

/// GRU stack followed by a linear read-out.
#[derive(Debug, Clone)]
pub struct GruNet {
    layers: Vec<GruLayer>,
    head: Linear,
}

impl GruNet {
    pub fn new(
        store: &mut ParamStore,
        input: usize,
        hidden: usize,
        layers: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..layers.max(1))
            .map(|i| {
                let width = if i == 0 { input } else { hidden };
                GruLayer::new(store, &format!("gru{i}"), width, hidden, rng)
            })
            .collect::<Result<_>>()?;
        let head = Linear::new(store, "head", hidden, output, true, rng)?;
        Ok(Self { layers, head })
    }

    /// Read-out at every step: `[B, L, in]` to `[B, L, out]`.
    pub fn forward_seq(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        self.head.forward(&h)
    }

    /// Read-out of the final step only: `[B, out]`.
    pub fn forward_last(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        let l = h.dim(1)?;
        self.head.forward(&h.narrow(1, l - 1, 1)?.squeeze(1)?)
    }
}
