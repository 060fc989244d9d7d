//! Latent variable block: a light prior branch and a heavier posterior branch.

use rand::Rng;

use super::block::{BlockOptions, ResBlock};
use super::config::BlockConfig;
use crate::error::Result;
use crate::nn::layers::Conv2d;
use crate::nn::{ParamStore, Real, Tape, Var};
use crate::prob::density::{SIGMA_MAX, SIGMA_MIN};

/// Prior parameters of one latent.
#[derive(Clone, Copy, Debug)]
pub struct PriorParams {
    pub mean: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
pub struct LatentBlock {
    pub index: usize,
    pub stage: usize,
    pub latent_channels: usize,
    config: BlockConfig,
    input: ResBlock,
    prior: Conv2d,
    post_enc: ResBlock,
    post_dec: Option<ResBlock>,
    merge: Conv2d,
    post_mid: ResBlock,
    post_out: Conv2d,
    z_proj: Conv2d,
}

impl LatentBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        index: usize,
        stage: usize,
        channels: usize,
        latent_channels: usize,
        config: BlockConfig,
        opts: &BlockOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let name = format!("dec.latent{index}");
        let n = |part: &str| format!("{name}.{part}");
        let input = ResBlock::new(store, &n("input"), channels, opts, rng);
        let prior = Conv2d::same(store, &n("prior"), channels, 2 * latent_channels, 1, rng);
        let post_enc = ResBlock::new(store, &n("post_enc"), channels, opts, rng);
        let post_dec = config
            .bidirectional()
            .then(|| ResBlock::new(store, &n("post_dec"), channels, opts, rng));
        let merge_in = if config.bidirectional() {
            2 * channels
        } else {
            channels
        };
        let merge = Conv2d::same(store, &n("merge"), merge_in, channels, 1, rng);
        let post_mid = ResBlock::new(store, &n("post_mid"), channels, opts, rng);
        let post_out = Conv2d::same(store, &n("post_out"), channels, latent_channels, 3, rng);
        let z_proj = Conv2d::same(store, &n("z_proj"), latent_channels, channels, 1, rng);
        LatentBlock {
            index,
            stage,
            latent_channels,
            config,
            input,
            prior,
            post_enc,
            post_dec,
            merge,
            post_mid,
            post_out,
            z_proj,
        }
    }

    pub fn res_blocks(&self) -> Vec<&ResBlock> {
        let mut out = vec![&self.input, &self.post_enc];
        out.extend(&self.post_dec);
        out.push(&self.post_mid);
        out
    }

    /// Shared trunk applied to the incoming decoder state.
    pub fn features<T: Real>(&self, tape: &mut Tape<'_, T>, state: Var, e: Var) -> Result<Var> {
        self.input.forward(tape, state, e)
    }

    /// Single 1×1 convolution to (μ̂, s); σ̂ = clamp(exp(s)).
    pub fn prior_from_features<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        feat: Var,
    ) -> Result<PriorParams> {
        let out = self.prior.forward(tape, feat)?;
        let mean = tape.narrow(out, 0, self.latent_channels)?;
        let log_sigma = tape.narrow(out, self.latent_channels, self.latent_channels)?;
        let sigma = tape.exp(log_sigma);
        let sigma = tape.clamp(sigma, SIGMA_MIN, SIGMA_MAX);
        Ok(PriorParams { mean, sigma })
    }

    /// μ from encoder features and (for configs B and C) the decoder trunk.
    pub fn posterior_from_features<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        enc: Var,
        feat: Var,
        e: Var,
    ) -> Result<Var> {
        let a = self.post_enc.forward(tape, enc, e)?;
        let fused = match &self.post_dec {
            Some(dec) => {
                let b = dec.forward(tape, feat, e)?;
                tape.concat(a, b)?
            }
            None => a,
        };
        let h = self.merge.forward(tape, fused)?;
        let h = self.post_mid.forward(tape, h, e)?;
        self.post_out.forward(tape, h)
    }

    pub fn prior_params<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        state: Var,
        e: Var,
    ) -> Result<PriorParams> {
        let feat = self.features(tape, state, e)?;
        self.prior_from_features(tape, feat)
    }

    pub fn posterior_mu<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        enc: Var,
        state: Var,
        e: Var,
    ) -> Result<Var> {
        let feat = self.features(tape, state, e)?;
        self.posterior_from_features(tape, enc, feat, e)
    }

    /// New decoder state after sampling z.
    pub fn aggregate<T: Real>(&self, tape: &mut Tape<'_, T>, feat: Var, z: Var) -> Result<Var> {
        let projected = self.z_proj.forward(tape, z)?;
        if self.config.residual() {
            tape.add(feat, projected)
        } else {
            Ok(projected)
        }
    }
}
