use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{PadMode, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Square-kernel convolution with symmetric padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    /// "Same" convolution for odd `k` (stride 1, zero padding).
    pub fn same<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, c_in, c_out, k, 1, k / 2, rng)
    }

    /// Stride equal to the kernel size: the patch-embedding downsampler.
    pub fn patch<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, c_in, c_out, k, k, 0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = fan_in_bound(c_in * k * k);
        let weight =
            store.register_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], bound, rng);
        let bias = store.register_uniform(format!("{name}.bias"), &[c_out], bound, rng);
        Conv2d {
            weight,
            bias,
            stride,
            pad,
            pad_mode: PadMode::Zero,
        }
    }

    /// Zero weight and bias.
    pub fn zero_init<T: Real>(self, store: &mut ParamStore<T>) -> Self {
        store.get_mut(self.weight).value.data_mut().fill(T::ZERO);
        store.get_mut(self.bias).value.data_mut().fill(T::ZERO);
        self
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let x = tape.pad2d(x, self.pad, self.pad_mode)?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv2d(x, w, Some(b), self.stride)
    }
}

/// Per-channel k×k convolution with zero "same" padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = fan_in_bound(k * k);
        DepthwiseConv2d {
            weight: store.register_uniform(format!("{name}.weight"), &[channels, k, k], bound, rng),
            bias: store.register_uniform(format!("{name}.bias"), &[channels], bound, rng),
            k,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let x = tape.pad2d(x, self.k / 2, PadMode::Zero)?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.depthwise_conv2d(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = fan_in_bound(fan_in);
        Linear {
            weight: store.register_uniform(
                format!("{name}.weight"),
                &[fan_out, fan_in],
                bound,
                rng,
            ),
            bias: store.register_uniform(format!("{name}.bias"), &[fan_out], bound, rng),
        }
    }

    pub fn zeros<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Linear {
            weight: store.register(format!("{name}.weight"), Tensor::zeros(&[fan_out, fan_in])),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Static per-channel affine (the learned scale/shift of a plain norm layer).
#[derive(Clone, Debug)]
pub struct ChannelAffine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ChannelAffine {
    pub fn identity<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        ChannelAffine {
            scale: store.register(format!("{name}.scale"), Tensor::full(&[channels], T::ONE)),
            shift: store.register(format!("{name}.shift"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = tape.param(self.scale);
        let b = tape.param(self.shift);
        tape.channel_affine(x, s, b)
    }
}
