//! ConvNeXt-style residual block with a λ-conditioned affine transform.

use rand::Rng;

use super::config::NormType;
use crate::error::Result;
use crate::nn::layers::{ChannelAffine, Conv2d, DepthwiseConv2d, Linear};
use crate::nn::{ParamStore, Real, Tape, Var};

/// Shape options shared by every residual block of a model.
#[derive(Clone, Copy, Debug)]
pub struct BlockOptions {
    pub kernel: usize,
    pub expansion: usize,
    pub norm: NormType,
    pub group_norm_groups: usize,
    pub affine_position: u8,
    pub embed_dim: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Adaptive affine y = x·(1 + s(e)) + b(e), with s and b from a
/// zero-initialized projection of e_λ.
#[derive(Clone, Debug)]
pub struct AdaptiveAffine {
    proj: Linear,
    channels: usize,
}

impl AdaptiveAffine {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        embed_dim: usize,
        channels: usize,
    ) -> Self {
        AdaptiveAffine {
            proj: Linear::zeros(store, name, embed_dim, 2 * channels),
            channels,
        }
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    /// Per-item (1 + s, b), each [N, C].
    pub fn scale_shift<T: Real>(&self, tape: &mut Tape<'_, T>, e: Var) -> Result<(Var, Var)> {
        let p = self.proj.forward(tape, e)?;
        let s = tape.narrow(p, 0, self.channels)?;
        let s = tape.add_scalar(s, 1.0);
        let b = tape.narrow(p, self.channels, self.channels)?;
        Ok((s, b))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, e: Var) -> Result<Var> {
        let (s, b) = self.scale_shift(tape, e)?;
        tape.channel_affine(x, s, b)
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    depthwise: DepthwiseConv2d,
    norm: NormType,
    groups: usize,
    static_affine: Option<ChannelAffine>,
    pointwise1: Conv2d,
    pointwise2: Conv2d,
    adaptive: AdaptiveAffine,
    position: u8,
}

impl ResBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        opts: &BlockOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = channels * opts.expansion;
        let depthwise =
            DepthwiseConv2d::new(store, &format!("{name}.dw"), channels, opts.kernel, rng);
        let static_affine = (opts.affine_position != 2)
            .then(|| ChannelAffine::identity(store, &format!("{name}.norm"), channels));
        let pointwise1 = Conv2d::same(store, &format!("{name}.pw1"), channels, hidden, 1, rng);
        let pointwise2 =
            Conv2d::same(store, &format!("{name}.pw2"), hidden, channels, 1, rng).zero_init(store);
        let site_channels = if opts.affine_position == 3 {
            hidden
        } else {
            channels
        };
        let adaptive =
            AdaptiveAffine::new(store, &format!("{name}.ada"), opts.embed_dim, site_channels);
        ResBlock {
            depthwise,
            norm: opts.norm,
            groups: gcd(channels, opts.group_norm_groups),
            static_affine,
            pointwise1,
            pointwise2,
            adaptive,
            position: opts.affine_position,
        }
    }

    pub fn adaptive(&self) -> &AdaptiveAffine {
        &self.adaptive
    }

    pub fn position(&self) -> u8 {
        self.position
    }

    fn normalize<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        match self.norm {
            NormType::Layer => tape.layer_norm(x),
            NormType::Group => tape.group_norm(x, self.groups),
            NormType::Instance => tape.instance_norm(x),
        }
    }

    /// x + pw2(GELU(pw1(affine(norm(dw(x)))))), with the adaptive affine at
    /// the configured position.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, e: Var) -> Result<Var> {
        let at = |p: u8| self.position == p;
        let mut h = x;
        if at(0) {
            h = self.adaptive.forward(tape, h, e)?;
        }
        h = self.depthwise.forward(tape, h)?;
        if at(1) {
            h = self.adaptive.forward(tape, h, e)?;
        }
        h = self.normalize(tape, h)?;
        h = match &self.static_affine {
            None => self.adaptive.forward(tape, h, e)?,
            Some(affine) => affine.forward(tape, h)?,
        };
        h = self.pointwise1.forward(tape, h)?;
        h = tape.gelu(h);
        if at(3) {
            h = self.adaptive.forward(tape, h, e)?;
        }
        h = self.pointwise2.forward(tape, h)?;
        if at(4) {
            h = self.adaptive.forward(tape, h, e)?;
        }
        tape.add(x, h)
    }
}
