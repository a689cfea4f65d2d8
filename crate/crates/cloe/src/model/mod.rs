//! The multi-expert segmentation network.
//!
//! Per modality: a small convolutional encoder producing a feature pyramid.
//! One weight-shared expert decoder turns any modality's deepest features
//! into a per-voxel class distribution. A projection head on the averaged
//! shallow features yields a probabilistic region map. Consistency scores
//! derived from expert agreement drive a gating network whose masked-softmax
//! weights fuse the pyramids; a separate fusion decoder (with skip
//! connections) segments the fused features.

mod experts;
mod gating;
mod latent;

pub use gating::{masked_softmax, fuse_pyramids, uniform_weights, FusionWeights, WeightMode};
pub use latent::LatentVars;

use rand_chacha::ChaCha8Rng;

use crate::consistency::{self, ExpertScore};
use crate::data::{AvailabilityMask, MultimodalSample};
use crate::error::{CloeError, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamSet};
use crate::real::Real;

/// Architecture hyperparameters. Stage `l` of every encoder has
/// `base_channels * 2^(l-1)` channels; stages after the first halve each
/// spatial dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub modalities: usize,
    pub classes: usize,
    pub stages: usize,
    pub base_channels: usize,
    pub gate_hidden: usize,
    pub style_dim: usize,
    pub content_channels: usize,
    pub contrast_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: 4,
            classes: 4,
            stages: 3,
            base_channels: 8,
            gate_hidden: 8,
            style_dim: 16,
            content_channels: 4,
            contrast_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities < 2 {
            return Err(CloeError::Config("model needs at least 2 modalities".into()));
        }
        if self.classes < 2 {
            return Err(CloeError::Config("model needs at least 2 classes".into()));
        }
        if self.stages < 2 {
            return Err(CloeError::Config("model needs at least 2 stages".into()));
        }
        if self.base_channels == 0 || self.gate_hidden == 0 {
            return Err(CloeError::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Spatial downsampling factor of the deepest stage.
    pub fn reduction(&self) -> usize {
        1 << (self.stages - 1)
    }
}

#[derive(Clone, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderIds {
    ups: Vec<ConvIds>, // one per upsampling stage, deepest first
    head: ConvIds,
}

#[derive(Clone, Debug)]
struct GateIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct LatentIds {
    content: ConvIds,
    style_w: ParamId,
    style_b: ParamId,
    mu_w: ParamId,
    mu_b: ParamId,
    logvar_w: ParamId,
    logvar_b: ParamId,
    zproj_w: ParamId,
    zproj_b: ParamId,
    recon: ConvIds,
}

/// Parameter handles for the whole network. The data itself lives in a
/// [`ParamSet`] so the optimizer and checkpointing see one flat namespace.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    encoders: Vec<Vec<ConvIds>>, // [modality][stage]
    expert_decoder: DecoderIds,
    fusion_decoder: DecoderIds,
    region: ConvIds,
    gate: GateIds,
    latent: Option<LatentIds>,
}

impl Model {
    /// Builds parameters in a fixed order so a given seed always produces
    /// the same initialization. The gate's output layer starts at zero:
    /// training begins from uniform fusion.
    pub fn build<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Model, ParamSet<T>)> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let k3 = 27;

        let mut encoders = Vec::with_capacity(cfg.modalities);
        for m in 0..cfg.modalities {
            let mut stages = Vec::with_capacity(cfg.stages);
            for l in 1..=cfg.stages {
                let (cin, cout) =
                    if l == 1 { (1, cfg.channels(1)) } else { (cfg.channels(l - 1), cfg.channels(l)) };
                let w = params.add_uniform(
                    &format!("enc{m}.s{l}.w"),
                    &[cout, cin, 3, 3, 3],
                    cin * k3,
                    rng,
                )?;
                let b = params.add_zeros(&format!("enc{m}.s{l}.b"), &[cout])?;
                stages.push(ConvIds { w, b });
            }
            encoders.push(stages);
        }

        let mut build_decoder = |params: &mut ParamSet<T>,
                                 rng: &mut ChaCha8Rng,
                                 name: &str,
                                 with_skips: bool|
         -> Result<DecoderIds> {
            let mut ups = Vec::new();
            for l in (1..cfg.stages).rev() {
                // upsampled deeper features (+ fused skip at this level)
                let cin = cfg.channels(l + 1) + if with_skips { cfg.channels(l) } else { 0 };
                let cout = cfg.channels(l);
                let w = params.add_uniform(
                    &format!("{name}.u{l}.w"),
                    &[cout, cin, 3, 3, 3],
                    cin * k3,
                    rng,
                )?;
                let b = params.add_zeros(&format!("{name}.u{l}.b"), &[cout])?;
                ups.push(ConvIds { w, b });
            }
            let c1 = cfg.channels(1);
            let w = params.add_uniform(
                &format!("{name}.head.w"),
                &[cfg.classes, c1, 1, 1, 1],
                c1,
                rng,
            )?;
            let b = params.add_zeros(&format!("{name}.head.b"), &[cfg.classes])?;
            Ok(DecoderIds { ups, head: ConvIds { w, b } })
        };

        let expert_decoder = build_decoder(&mut params, rng, "dsep", false)?;
        let fusion_decoder = build_decoder(&mut params, rng, "dfuse", true)?;

        let c1 = cfg.channels(1);
        let region = ConvIds {
            w: params.add_uniform("region.w", &[1, c1, 1, 1, 1], c1, rng)?,
            b: params.add_zeros("region.b", &[1])?,
        };

        let gate = GateIds {
            w1: params.add_uniform("gate.w1", &[cfg.gate_hidden, 2], 2, rng)?,
            b1: params.add_zeros("gate.b1", &[cfg.gate_hidden])?,
            w2: params.add_zeros("gate.w2", &[1, cfg.gate_hidden])?,
            b2: params.add_zeros("gate.b2", &[1])?,
        };

        let latent = if cfg.contrast_enabled {
            let cl = cfg.channels(cfg.stages);
            let ca = cfg.content_channels;
            let sd = cfg.style_dim;
            Some(LatentIds {
                content: ConvIds {
                    w: params.add_uniform("latent.content.w", &[ca, cl, 1, 1, 1], cl, rng)?,
                    b: params.add_zeros("latent.content.b", &[ca])?,
                },
                style_w: params.add_uniform("latent.style.w", &[sd, cl], cl, rng)?,
                style_b: params.add_zeros("latent.style.b", &[sd])?,
                mu_w: params.add_uniform("latent.mu.w", &[sd, sd], sd, rng)?,
                mu_b: params.add_zeros("latent.mu.b", &[sd])?,
                logvar_w: params.add_uniform("latent.logvar.w", &[sd, sd], sd, rng)?,
                logvar_b: params.add_zeros("latent.logvar.b", &[sd])?,
                zproj_w: params.add_uniform("latent.zproj.w", &[ca, sd], sd, rng)?,
                zproj_b: params.add_zeros("latent.zproj.b", &[ca])?,
                recon: ConvIds {
                    w: params.add_uniform("latent.recon.w", &[1, ca, 1, 1, 1], ca, rng)?,
                    b: params.add_zeros("latent.recon.b", &[1])?,
                },
            })
        } else {
            None
        };

        Ok((
            Model { cfg: cfg.clone(), encoders, expert_decoder, fusion_decoder, region, gate, latent },
            params,
        ))
    }
}

/// Everything one sample's forward pass produces. Consistency losses and
/// fusion weights are graph nodes; scores are detached numeric values
/// (the gate learns from the segmentation loss, not by reshaping its own
/// input signal).
pub struct ForwardOutput {
    /// Per available modality `(m, p^m)`.
    pub expert_preds: Vec<(usize, Var)>,
    pub region: Var,
    pub fused_pred: Var,
    pub mec: Var,
    pub rec: Var,
    /// True when fewer than two modalities were available, making the
    /// consistency terms vacuously zero.
    pub vacuous: bool,
    pub scores: Vec<ExpertScore>,
    pub weights: FusionWeights,
    /// Per available modality, when the contrastive branch is enabled.
    pub latents: Vec<LatentVars>,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub weight_mode: WeightMode,
    pub contrast: bool,
    /// Seed for the reparameterization noise of the latent branch.
    pub latent_seed: u64,
    pub cosine_eps: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            weight_mode: WeightMode::Gated,
            contrast: true,
            latent_seed: 0,
            cosine_eps: consistency::DEFAULT_EPS,
        }
    }
}

impl Model {
    /// Full pipeline for one masked sample: encoders for every modality,
    /// expert decodes and consistency measurement over the available set,
    /// gating, fusion, and the fused decode.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        sample: &MultimodalSample<T>,
        mask: &AvailabilityMask,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        if sample.modalities() != self.cfg.modalities {
            return Err(CloeError::Shape(format!(
                "sample has {} modalities, model expects {}",
                sample.modalities(),
                self.cfg.modalities
            )));
        }
        if mask.len() != self.cfg.modalities {
            return Err(CloeError::Shape("mask length != modality count".into()));
        }
        let masked = sample.apply_mask(mask)?;
        let avail = mask.available();

        // Encoders run for every modality, present or not; downstream paths
        // only consume the available ones.
        let mut pyramids = Vec::with_capacity(self.cfg.modalities);
        for m in 0..self.cfg.modalities {
            pyramids.push(self.encode(g, params, m, masked.volume(m))?);
        }

        let mut expert_preds = Vec::with_capacity(avail.len());
        for &m in &avail {
            let p = self.expert_decode(g, params, *pyramids[m].last().expect("stages >= 2"))?;
            expert_preds.push((m, p));
        }

        let shallow: Vec<Var> = avail.iter().map(|&m| pyramids[m][0]).collect();
        let region = self.region_head(g, params, &shallow)?;

        let measure = consistency::measure(g, &expert_preds, region, opts.cosine_eps)?;

        let weights = match opts.weight_mode {
            WeightMode::Gated => {
                let logits: Vec<(usize, Var)> = measure
                    .scores
                    .iter()
                    .map(|s| Ok((s.modality, self.gate_logit(g, params, s.u, s.v)?)))
                    .collect::<Result<_>>()?;
                masked_softmax(g, &logits, self.cfg.modalities)?
            }
            WeightMode::RawScores => {
                let logits: Vec<(usize, Var)> = measure
                    .scores
                    .iter()
                    .map(|s| (s.modality, g.scalar(s.u + s.v)))
                    .collect();
                masked_softmax(g, &logits, self.cfg.modalities)?
            }
            WeightMode::Uniform => uniform_weights(g, &avail, self.cfg.modalities)?,
        };

        let avail_pyramids: Vec<&[Var]> =
            avail.iter().map(|&m| pyramids[m].as_slice()).collect();
        let fused = fuse_pyramids(g, &avail_pyramids, &avail, &weights)?;
        let fused_pred = self.fusion_decode(g, params, &fused)?;

        let latents = if opts.contrast && self.latent.is_some() {
            let mut out = Vec::with_capacity(avail.len());
            for &m in &avail {
                out.push(self.latent_codes(
                    g,
                    params,
                    m,
                    *pyramids[m].last().expect("stages >= 2"),
                    opts.latent_seed,
                )?);
            }
            out
        } else {
            Vec::new()
        };

        Ok(ForwardOutput {
            expert_preds,
            region,
            fused_pred,
            mec: measure.mec,
            rec: measure.rec,
            vacuous: measure.vacuous,
            scores: measure.scores,
            weights,
            latents,
        })
    }
}

#[cfg(test)]
mod tests;
