//! Latent heads for the contrastive representation branch: per modality an
//! anatomical content code, a style vector with a sampled latent, and a
//! cheap reconstruction of the input volume.

use rand::Rng;

use super::Model;
use crate::error::{CloeError, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamSet;
use crate::real::Real;
use crate::rng::{stream, STREAM_LATENT};
use crate::tensor::Tensor;

/// Graph handles for one modality's latent codes.
#[derive(Clone, Debug)]
pub struct LatentVars {
    pub modality: usize,
    /// Spatial content code at the deepest resolution, values in (0, 1).
    pub content: Var,
    /// Style vector.
    pub style: Var,
    pub mu: Var,
    pub logvar: Var,
    /// Reparameterized sample `mu + exp(logvar/2) * eps`.
    pub z: Var,
    /// Reconstruction of the modality's input volume, `[1,D,H,W]` in (0, 1).
    pub recon: Var,
}

impl Model {
    /// Latent codes from one modality's deepest features. The
    /// reparameterization noise is drawn from `(latent_seed, modality)` so a
    /// fixed seed makes the whole loss deterministic.
    pub fn latent_codes<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        modality: usize,
        f_deepest: Var,
        latent_seed: u64,
    ) -> Result<LatentVars> {
        let ids = self
            .latent
            .as_ref()
            .ok_or_else(|| CloeError::Config("latent heads disabled".into()))?;

        let cw = g.leaf(params, ids.content.w);
        let cb = g.leaf(params, ids.content.b);
        let pre = g.conv3(f_deepest, cw, 1, 0)?;
        let pre = g.add_channel_bias(pre, cb)?;
        let content = g.sigmoid(pre);

        let pooled = g.reduce_mean(f_deepest, &[1, 2, 3])?;
        let sw = g.leaf(params, ids.style_w);
        let sb = g.leaf(params, ids.style_b);
        let style = g.linear(pooled, sw, sb)?;

        let mw = g.leaf(params, ids.mu_w);
        let mb = g.leaf(params, ids.mu_b);
        let mu = g.linear(style, mw, mb)?;
        let lw = g.leaf(params, ids.logvar_w);
        let lb = g.leaf(params, ids.logvar_b);
        let logvar = g.linear(style, lw, lb)?;

        let mut eps_rng = stream(latent_seed ^ modality as u64, STREAM_LATENT);
        let eps: Vec<f64> = (0..self.cfg.style_dim).map(|_| standard_normal(&mut eps_rng)).collect();
        let eps_node = g.constant(Tensor::from_f64_slice(&[self.cfg.style_dim], &eps)?);
        let half_logvar = g.scale(logvar, 0.5);
        let sigma = g.exp(half_logvar);
        let noise = g.mul(sigma, eps_node)?;
        let z = g.add(mu, noise)?;

        // Inject z as a channel bias on the content code, then upsample back
        // to full resolution and project to one channel.
        let zw = g.leaf(params, ids.zproj_w);
        let zb = g.leaf(params, ids.zproj_b);
        let zc = g.linear(z, zw, zb)?;
        let mut h = g.add_channel_bias(content, zc)?;
        for _ in 1..self.cfg.stages {
            h = g.upsample_nearest2(h)?;
        }
        let rw = g.leaf(params, ids.recon.w);
        let rb = g.leaf(params, ids.recon.b);
        let pre = g.conv3(h, rw, 1, 0)?;
        let pre = g.add_channel_bias(pre, rb)?;
        let recon = g.sigmoid(pre);

        Ok(LatentVars { modality, content, style, mu, logvar, z, recon })
    }
}

/// Box–Muller, deterministic for a fixed RNG stream.
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
