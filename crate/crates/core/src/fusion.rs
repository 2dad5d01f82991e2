//! Inter-stage multi-channel fusion.
//!
//! For each scale the `D` channel trends of one stage are mixed by a
//! same-length temporal convolution (`D → D` channels, zero padding) and
//! handed to the next stage as per-channel history.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamStore};

/// Full cross-channel temporal convolution, `kernel: [D_out, D_in, L_conv]`.
#[derive(Debug, Clone)]
pub struct FusionConv {
    pub channels: usize,
    pub l_conv: usize,
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl FusionConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        l_conv: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        check_width(l_conv)?;
        let fan = channels * l_conv;
        let kernel = store.create(
            &format!("{name}.kernel"),
            &[channels, channels, l_conv],
            Init::Xavier {
                fan_in: fan,
                fan_out: fan,
            },
            rng,
        )?;
        let bias = store.create(&format!("{name}.bias"), &[channels], Init::Zeros, rng)?;
        Ok(Self {
            channels,
            l_conv,
            kernel,
            bias,
        })
    }

    /// Builds a convolution from fixed tensors (not registered for training).
    pub fn from_tensors(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let (d_out, d_in, l_conv) = kernel.dims3()?;
        if d_out != d_in || bias.dims() != [d_out] {
            return Err(Error::Shape(format!(
                "fusion kernel {:?} with bias {:?}",
                kernel.dims(),
                bias.dims()
            )));
        }
        check_width(l_conv)?;
        Ok(Self {
            channels: d_out,
            l_conv,
            kernel,
            bias,
        })
    }

    /// `[B, D, L] → [B, D, L]`:
    /// `out[d, t] = bias[d] + Σ_{d', τ} kernel[d, d', τ] · pad(x)[d', t + τ]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d, l) = x.dims3()?;
        if d != self.channels {
            return Err(Error::Shape(format!(
                "{d} input channels, fusion expects {}",
                self.channels
            )));
        }
        let half = (self.l_conv - 1) / 2;
        let padded = x.pad_with_zeros(2, half, half)?;
        let idx: Vec<u32> = (0..l)
            .flat_map(|t| (0..self.l_conv).map(move |tau| (t + tau) as u32))
            .collect();
        let idx = Tensor::new(idx, x.device())?;
        let cols = padded
            .contiguous()?
            .index_select(&idx, 2)?
            .reshape((b, d, l, self.l_conv))?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b, l, d * self.l_conv))?;
        let w = self.kernel.reshape((d, d * self.l_conv))?.t()?;
        Ok(crate::nn::matmul_last(&cols, &w)?
            .transpose(1, 2)?
            .broadcast_add(&self.bias.unsqueeze(1)?)?)
    }
}

fn check_width(l_conv: usize) -> Result<()> {
    if l_conv == 0 || l_conv.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "fusion kernel width {l_conv} must be odd"
        )));
    }
    Ok(())
}

/// One scale's fused trends of one stage.
pub fn fuse_scale(trends: &Tensor, conv: &FusionConv) -> Result<Tensor> {
    conv.forward(trends)
}

/// Per-scale histories `[B, D, L_sta]` handed from stage `m` to `m + 1`.
#[derive(Debug, Clone)]
pub struct HistoryBundle {
    pub per_scale: Vec<Tensor>,
}

impl HistoryBundle {
    pub fn scales(&self) -> usize {
        self.per_scale.len()
    }

    /// The single-channel history sequence `H^s_{m,d}`, shape `[B, L_sta]`.
    pub fn channel(&self, scale: usize, d: usize) -> Result<Tensor> {
        Ok(self.per_scale[scale].narrow(1, d, 1)?.squeeze(1)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            per_scale: self.per_scale.iter().map(|t| t.detach()).collect(),
        }
    }
}

/// All-zero history for the first stage.
pub fn initial_history(
    scales: usize,
    batch: usize,
    dim: usize,
    l_sta: usize,
    device: &Device,
) -> Result<HistoryBundle> {
    if scales == 0 || dim == 0 || l_sta == 0 {
        return Err(Error::Config("history dimensions must be positive".into()));
    }
    let per_scale = (0..scales)
        .map(|_| nn::zeros(&[batch, dim, l_sta], device))
        .collect::<Result<_>>()?;
    Ok(HistoryBundle { per_scale })
}

/// Fuses every scale with its own convolution.
pub fn build_history(trends: &[Tensor], convs: &[FusionConv]) -> Result<HistoryBundle> {
    if trends.len() != convs.len() {
        return Err(Error::Shape(format!(
            "{} trend scales, {} fusion convolutions",
            trends.len(),
            convs.len()
        )));
    }
    let per_scale = trends
        .iter()
        .zip(convs)
        .map(|(t, c)| fuse_scale(t, c))
        .collect::<Result<_>>()?;
    Ok(HistoryBundle { per_scale })
}

/// History without cross-channel mixing: the trends themselves.
pub fn passthrough_history(trends: &[Tensor]) -> HistoryBundle {
    HistoryBundle {
        per_scale: trends.to_vec(),
    }
}
