//! Encoder, expert decoder, region head and fusion decoder forward passes.

use super::{Model, ConvIds, DecoderIds};
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

impl Model {
    fn conv_block<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        ids: &ConvIds,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = g.leaf(params, ids.w);
        let b = g.leaf(params, ids.b);
        let y = g.conv3(x, w, stride, pad)?;
        g.add_channel_bias(y, b)
    }

    /// Feature pyramid for one modality: `f_1` at input resolution, each
    /// later stage stride-2 downsampled.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        modality: usize,
        volume: &Tensor<T>,
    ) -> Result<Vec<Var>> {
        let shape = volume.shape();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(shape_err(format!("encode: expected [1,D,H,W], got {shape:?}")));
        }
        let red = self.cfg.reduction();
        if shape[1..].iter().any(|&d| d % red != 0) {
            return Err(shape_err(format!(
                "encode: spatial dims {:?} not divisible by {red}",
                &shape[1..]
            )));
        }
        let stages = &self.encoders[modality];
        let mut x = g.constant(volume.clone());
        let mut pyramid = Vec::with_capacity(self.cfg.stages);
        for (l, ids) in stages.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            let y = self.conv_block(g, params, ids, x, stride, 1)?;
            x = g.relu(y);
            pyramid.push(x);
        }
        Ok(pyramid)
    }

    fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        ids: &DecoderIds,
        deepest: Var,
        skips: Option<&[Var]>,
    ) -> Result<Var> {
        let mut h = deepest;
        for (i, up) in ids.ups.iter().enumerate() {
            let level = self.cfg.stages - 1 - i; // target pyramid level, 1-based
            let u = g.upsample_nearest2(h)?;
            let x = match skips {
                Some(pyr) => g.concat_channels(u, pyr[level - 1])?,
                None => u,
            };
            let y = self.conv_block(g, params, up, x, 1, 1)?;
            h = g.relu(y);
        }
        let logits = self.conv_block(g, params, &ids.head, h, 1, 0)?;
        g.channel_softmax(logits)
    }

    /// Weight-shared expert decoder: deepest features of any one modality to
    /// a `[C,D,H,W]` class distribution. No skip connections — the expert
    /// path sees only `f_L`.
    pub fn expert_decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        f_deepest: Var,
    ) -> Result<Var> {
        self.decode(g, params, &self.expert_decoder, f_deepest, None)
    }

    /// Fusion decoder over the fused pyramid, with skip connections at every
    /// intermediate scale. Separate parameters from the expert decoder.
    pub fn fusion_decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        fused: &[Var],
    ) -> Result<Var> {
        if fused.len() != self.cfg.stages {
            return Err(shape_err(format!(
                "fusion_decode: {} pyramid levels for {} stages",
                fused.len(),
                self.cfg.stages
            )));
        }
        self.decode(g, params, &self.fusion_decoder, fused[self.cfg.stages - 1], Some(fused))
    }

    /// Probabilistic region map: sigmoid of a 1x1x1 projection of the mean
    /// shallow features of the available experts. Permutation-invariant in
    /// the expert order.
    pub fn region_head<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        shallow: &[Var],
    ) -> Result<Var> {
        if shallow.is_empty() {
            return Err(crate::error::CloeError::EmptyMask);
        }
        let mut acc = shallow[0];
        for &f in &shallow[1..] {
            acc = g.add(acc, f)?;
        }
        let mean = g.scale(acc, 1.0 / shallow.len() as f64);
        let proj = self.conv_block(g, params, &self.region, mean, 1, 0)?;
        Ok(g.sigmoid(proj))
    }
}
