//! Encoder pyramid, top-down latent chain, and reconstruction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{BlockOptions, ResBlock};
use super::config::ModelConfig;
use super::embedding::LambdaEmbedding;
use super::latent::{LatentBlock, PriorParams};
use crate::error::{QarvError, Result};
use crate::nn::layers::Conv2d;
use crate::nn::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// What a latent block exposes to whoever chooses z.
pub struct LatentSite<'a> {
    pub block: &'a LatentBlock,
    /// Output of the block's input residual block (decoder trunk).
    pub feat: Var,
    pub prior: PriorParams,
    pub e: Var,
}

/// Chooses z for each latent during the top-down pass: additive noise
/// while training, quantized posterior means when compressing, decoded
/// symbols when decompressing.
pub trait LatentSource<T: Real> {
    fn sample(&mut self, tape: &mut Tape<'_, T>, site: &LatentSite<'_>) -> Result<Var>;
}

#[derive(Clone, Debug)]
struct EncoderStage {
    /// Residual block then patch embedding; absent at the finest stage,
    /// which starts from the stem.
    down: Option<(ResBlock, Conv2d)>,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct Upsample {
    pre: ResBlock,
    conv: Conv2d,
    factor: usize,
    post: ResBlock,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    latents: Vec<LatentBlock>,
    blocks: Vec<ResBlock>,
    up: Option<Upsample>,
}

/// Parameter layout of a model; values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    embedding: LambdaEmbedding,
    stem: Conv2d,
    /// Fine to coarse.
    encoder: Vec<EncoderStage>,
    bias: ParamId,
    /// Coarse to fine.
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl Network {
    pub fn build<T: Real>(
        config: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let opts = BlockOptions {
            kernel: config.kernel,
            expansion: config.mlp_expansion,
            norm: config.norm,
            group_norm_groups: config.group_norm_groups,
            affine_position: config.affine_position,
            embed_dim: config.embed_dim,
        };
        let embedding = LambdaEmbedding::new(
            store,
            config.embed_pairs,
            config.embed_hidden,
            config.embed_dim,
            rng,
        );
        let stages = &config.stages;
        let img = ModelConfig::IMAGE_CHANNELS;
        let finest = stages.len() - 1;

        let stem = Conv2d::patch(
            store,
            "enc.stem",
            img,
            stages[finest].channels,
            stages[finest].divisor,
            rng,
        );
        let mut encoder = Vec::with_capacity(stages.len());
        for s in (0..stages.len()).rev() {
            let down = (s != finest).then(|| {
                let prev = &stages[s + 1];
                let pre = ResBlock::new(
                    store,
                    &format!("enc.s{s}.down_res"),
                    prev.channels,
                    &opts,
                    rng,
                );
                let patch = Conv2d::patch(
                    store,
                    &format!("enc.s{s}.down"),
                    prev.channels,
                    stages[s].channels,
                    stages[s].divisor / prev.divisor,
                    rng,
                );
                (pre, patch)
            });
            let blocks = (0..config.encoder_blocks)
                .map(|b| {
                    ResBlock::new(
                        store,
                        &format!("enc.s{s}.block{b}"),
                        stages[s].channels,
                        &opts,
                        rng,
                    )
                })
                .collect();
            encoder.push(EncoderStage { down, blocks });
        }

        let ref_tile = config.max_downsample / stages[0].divisor;
        let bias = store.register(
            "dec.bias",
            Tensor::zeros(&[1, stages[0].channels, ref_tile, ref_tile]),
        );
        let mut decoder = Vec::with_capacity(stages.len());
        let mut index = 0;
        for (s, stage) in stages.iter().enumerate() {
            let latents = (0..stage.latents)
                .map(|_| {
                    let lb = LatentBlock::new(
                        store,
                        index,
                        s,
                        stage.channels,
                        stage.latent_channels,
                        config.block_config,
                        &opts,
                        rng,
                    );
                    index += 1;
                    lb
                })
                .collect();
            let blocks = (0..config.decoder_blocks)
                .map(|b| {
                    ResBlock::new(
                        store,
                        &format!("dec.s{s}.block{b}"),
                        stage.channels,
                        &opts,
                        rng,
                    )
                })
                .collect();
            let up = stages.get(s + 1).map(|next| {
                let factor = stage.divisor / next.divisor;
                Upsample {
                    pre: ResBlock::new(
                        store,
                        &format!("dec.s{s}.up_pre"),
                        stage.channels,
                        &opts,
                        rng,
                    ),
                    conv: Conv2d::same(
                        store,
                        &format!("dec.s{s}.up"),
                        stage.channels,
                        next.channels * factor * factor,
                        1,
                        rng,
                    ),
                    factor,
                    post: ResBlock::new(
                        store,
                        &format!("dec.s{s}.up_post"),
                        next.channels,
                        &opts,
                        rng,
                    ),
                }
            });
            decoder.push(DecoderStage {
                latents,
                blocks,
                up,
            });
        }
        let f = stages[finest].divisor;
        let head = Conv2d::same(
            store,
            "dec.head",
            stages[finest].channels,
            img * f * f,
            1,
            rng,
        );

        Ok(Network {
            config: config.clone(),
            embedding,
            stem,
            encoder,
            bias,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_blocks(&self) -> impl Iterator<Item = &LatentBlock> {
        self.decoder.iter().flat_map(|s| s.latents.iter())
    }

    /// Every residual block in the model, encoder first.
    pub fn res_blocks(&self) -> Vec<&ResBlock> {
        let mut out = Vec::new();
        for s in &self.encoder {
            if let Some((pre, _)) = &s.down {
                out.push(pre);
            }
            out.extend(&s.blocks);
        }
        for s in &self.decoder {
            out.extend(s.latents.iter().flat_map(|l| l.res_blocks()));
            out.extend(&s.blocks);
            if let Some(up) = &s.up {
                out.push(&up.pre);
                out.push(&up.post);
            }
        }
        out
    }

    pub fn embed<T: Real>(&self, tape: &mut Tape<'_, T>, lambdas: &[f64]) -> Result<Var> {
        self.embedding.forward(tape, lambdas)
    }

    fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.max_downsample;
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(QarvError::InvalidArgument(format!(
                "input {h}x{w} is not a positive multiple of {d}; pad first"
            )));
        }
        Ok(())
    }

    /// Feature per ladder stage, coarse to fine.
    pub fn encode_features<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        e: Var,
    ) -> Result<Vec<Var>> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != ModelConfig::IMAGE_CHANNELS {
            return Err(QarvError::shape(
                "encode_features",
                format!("{c} input channels"),
            ));
        }
        self.check_input_dims(h, w)?;
        let mut h = self.stem.forward(tape, x)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            if let Some((pre, patch)) = &stage.down {
                h = pre.forward(tape, h, e)?;
                h = patch.forward(tape, h)?;
            }
            for b in &stage.blocks {
                h = b.forward(tape, h, e)?;
            }
            feats.push(h);
        }
        feats.reverse();
        Ok(feats)
    }

    /// Top-down pass from the learned bias to the (unclamped) reconstruction.
    /// Encoder features are reachable only through `source`.
    pub fn top_down<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        e: Var,
        n: usize,
        height: usize,
        width: usize,
        source: &mut dyn LatentSource<T>,
    ) -> Result<Var> {
        self.check_input_dims(height, width)?;
        let d = self.config.max_downsample;
        let bias = tape.param(self.bias);
        let mut state = tape.tile(bias, n, height / d, width / d)?;
        for stage in &self.decoder {
            for lb in &stage.latents {
                let feat = lb.features(tape, state, e)?;
                let prior = lb.prior_from_features(tape, feat)?;
                tape.check_finite(
                    prior.mean,
                    &format!("prior mean of latent block {}", lb.index),
                )?;
                tape.check_finite(
                    prior.sigma,
                    &format!("prior scale of latent block {}", lb.index),
                )?;
                let site = LatentSite {
                    block: lb,
                    feat,
                    prior,
                    e,
                };
                let z = source.sample(tape, &site)?;
                state = lb.aggregate(tape, feat, z)?;
            }
            for b in &stage.blocks {
                state = b.forward(tape, state, e)?;
            }
            if let Some(up) = &stage.up {
                state = up.pre.forward(tape, state, e)?;
                state = up.conv.forward(tape, state)?;
                state = tape.pixel_shuffle(state, up.factor)?;
                state = up.post.forward(tape, state, e)?;
            }
        }
        let out = self.head.forward(tape, state)?;
        let out = tape.pixel_shuffle(out, self.config.finest_divisor())?;
        tape.check_finite(out, "reconstruction")?;
        Ok(out)
    }

    /// Training forward pass: z_i = μ_i + u with u ~ U(−½, ½).
    pub fn forward_train<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        lambdas: &[f64],
        rng: &mut impl Rng,
    ) -> Result<TrainOutput> {
        let (n, _, h, w) = tape.value(x).dims4()?;
        if lambdas.len() != n {
            return Err(QarvError::InvalidArgument(format!(
                "{} lambdas for a batch of {n}",
                lambdas.len()
            )));
        }
        let e = self.embed(tape, lambdas)?;
        let features = self.encode_features(tape, x, e)?;
        let mut source = NoisySource {
            features,
            rng: ChaCha8Rng::seed_from_u64(rng.random()),
            out: TrainOutput::default(),
        };
        let x_hat = self.top_down(tape, e, n, h, w, &mut source)?;
        let mut out = source.out;
        out.x_hat = Some(x_hat);
        Ok(out)
    }
}

/// Vars produced by [`Network::forward_train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    x_hat: Option<Var>,
    /// Per-latent rate in nats, shape [N] each.
    pub rates: Vec<Var>,
    pub posterior_means: Vec<Var>,
    pub latents: Vec<Var>,
}

impl TrainOutput {
    pub fn x_hat(&self) -> Var {
        self.x_hat.expect("set by forward_train")
    }
}

struct NoisySource {
    features: Vec<Var>,
    rng: ChaCha8Rng,
    out: TrainOutput,
}

impl<T: Real> LatentSource<T> for NoisySource {
    fn sample(&mut self, tape: &mut Tape<'_, T>, site: &LatentSite<'_>) -> Result<Var> {
        let lb = site.block;
        let mu = lb.posterior_from_features(tape, self.features[lb.stage], site.feat, site.e)?;
        tape.check_finite(mu, &format!("posterior mean of latent block {}", lb.index))?;
        let shape = tape.shape(mu).to_vec();
        let numel = shape.iter().product();
        let noise: Vec<T> = (0..numel)
            .map(|_| T::of(self.rng.random_range(-0.5..0.5)))
            .collect();
        let u = tape.constant(Tensor::new(shape, noise)?);
        let z = tape.add(mu, u)?;
        let rate = tape.rate_nats(z, site.prior.mean, site.prior.sigma)?;
        let rate = tape.sum_per_item(rate)?;
        tape.check_finite(rate, &format!("rate of latent block {}", lb.index))?;
        self.out.rates.push(rate);
        self.out.posterior_means.push(mu);
        self.out.latents.push(z);
        Ok(z)
    }
}
