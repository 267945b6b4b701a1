//! Small convolutional noise predictor with cross-attention conditioning.
//!
//! Feature maps are channels-last `[batch * h * w, c]`. Resolutions for the
//! default 32-pixel input:
//!
//! ```text
//! stem 32 -> D1 16 -> D2 8 -> mid 8 -> U1 8 -> U2 16 -> U3 32 -> out 32
//! ```
//!
//! Each up block exposes a tap, average-pooled to the 8x8 token grid.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numerics::nn::{LayerNorm, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Sampler, SpatialDims, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Input planes are the image average-pooled to this side length.
    pub resolution: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub cond_dim: usize,
    pub temb_dim: usize,
    pub vocab: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            c1: 16,
            c2: 32,
            c3: 48,
            cond_dim: 32,
            temb_dim: 32,
            vocab: 36,
        }
    }
}

impl UNetConfig {
    pub fn grid(&self) -> usize {
        self.resolution / 4
    }

    /// Channel count of each tap, `tap_block` in `1..=3`.
    pub fn tap_channels(&self, tap_block: usize) -> Result<usize> {
        match tap_block {
            1 => Ok(self.c3),
            2 => Ok(self.c2),
            3 => Ok(self.c1),
            other => Err(Error::Config(format!("encoder.tap_block={other}: the U-Net has up blocks 1..=3"))),
        }
    }
}

#[derive(Clone, Debug)]
struct Conv {
    lin: Linear,
    k: usize,
    stride: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut Sampler) -> Self {
        Self {
            lin: Linear::new(store, name, 9 * c_in, c_out, true, rng),
            k: 3,
            stride,
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, dims: SpatialDims) -> Result<(Var, SpatialDims)> {
        let cols = g.im2col(x, dims, self.k, self.stride, 1)?;
        let y = self.lin.forward(g, cols)?;
        let out = SpatialDims {
            batch: dims.batch,
            height: (dims.height + 2 - self.k) / self.stride + 1,
            width: (dims.width + 2 - self.k) / self.stride + 1,
            channels: self.lin.d_out,
        };
        Ok((y, out))
    }
}

#[derive(Clone, Debug)]
struct CrossAttn {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttn {
    fn new(store: &mut ParamStore, name: &str, c: usize, cond: usize, rng: &mut Sampler) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            q: Linear::new(store, &format!("{name}.q"), c, c, false, rng),
            k: Linear::new(store, &format!("{name}.k"), cond, c, false, rng),
            v: Linear::new(store, &format!("{name}.v"), cond, c, false, rng),
            o: Linear::new(store, &format!("{name}.o"), c, c, true, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Var, batch: usize) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, cond)?;
        let v = self.v.forward(g, cond)?;
        let a = g.attention(q, k, v, 1, batch, false)?;
        let a = self.o.forward(g, a)?;
        g.add(x, a)
    }
}

/// conv -> + time bias -> silu -> cross-attention, optionally followed by a residual conv.
#[derive(Clone, Debug)]
struct Block {
    conv: Conv,
    temb: Linear,
    xattn: CrossAttn,
    conv2: Option<Conv>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        second: bool,
        cfg: &UNetConfig,
        rng: &mut Sampler,
    ) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), c_in, c_out, stride, rng),
            temb: Linear::new(store, &format!("{name}.temb"), cfg.temb_dim, c_out, true, rng),
            xattn: CrossAttn::new(store, &format!("{name}.xattn"), c_out, cfg.cond_dim, rng),
            conv2: second.then(|| Conv::new(store, &format!("{name}.conv2"), c_out, c_out, 1, rng)),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, dims: SpatialDims, temb: Var, cond: Var) -> Result<(Var, SpatialDims)> {
        let (h, d) = self.conv.forward(g, x, dims)?;
        let tb = self.temb.forward(g, temb)?;
        let h = g.add_group_bias(h, tb, d.pixels())?;
        let h = g.silu(h)?;
        let mut h = self.xattn.forward(g, h, cond, d.batch)?;
        if let Some(c2) = &self.conv2 {
            let a = g.silu(h)?;
            let (r, _) = c2.forward(g, a, d)?;
            h = g.add(h, r)?;
        }
        Ok((h, d))
    }
}

#[derive(Clone, Debug)]
pub struct UNetToy {
    pub config: UNetConfig,
    /// `[vocab + 1, cond_dim]`; the last row is the null conditioning token.
    pub cond_embed: ParamId,
    time1: Linear,
    time2: Linear,
    stem: Conv,
    d1: Block,
    d2: Block,
    mid: Block,
    u1: Block,
    u2: Block,
    u3: Block,
    out_norm: LayerNorm,
    out: Conv,
}

pub struct UNetOutput {
    /// Noise prediction `[batch * r * r, 3]`, absent when the pass stopped at a tap.
    pub eps: Option<Var>,
    /// Taps of the up blocks reached so far, pooled to `[batch * grid * grid, c]`.
    pub taps: Vec<Var>,
}

fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

impl UNetToy {
    pub const PREFIX: &'static str = "unet.";

    pub fn new(store: &mut ParamStore, config: UNetConfig, rng: &mut Sampler) -> Self {
        let c = &config;
        let p = |s: &str| format!("unet.{s}");
        let cond_embed = store.add(p("cond_embed"), rng.gaussian_tensor(&[c.vocab + 1, c.cond_dim], 1.0));
        let time1 = Linear::new(store, &p("time1"), c.temb_dim, c.temb_dim, true, rng);
        let time2 = Linear::new(store, &p("time2"), c.temb_dim, c.temb_dim, true, rng);
        let stem = Conv::new(store, &p("stem"), 3, c.c1, 1, rng);
        let d1 = Block::new(store, &p("d1"), c.c1, c.c2, 2, true, c, rng);
        let d2 = Block::new(store, &p("d2"), c.c2, c.c3, 2, true, c, rng);
        let mid = Block::new(store, &p("mid"), c.c3, c.c3, 1, false, c, rng);
        let u1 = Block::new(store, &p("u1"), 2 * c.c3, c.c3, 1, false, c, rng);
        let u2 = Block::new(store, &p("u2"), c.c3 + c.c2, c.c2, 1, true, c, rng);
        let u3 = Block::new(store, &p("u3"), c.c2 + c.c1, c.c1, 1, false, c, rng);
        let out_norm = LayerNorm::new(store, &p("out_norm"), c.c1);
        let out = Conv::new(store, &p("out"), c.c1, 3, 1, rng);
        Self {
            config,
            cond_embed,
            time1,
            time2,
            stem,
            d1,
            d2,
            mid,
            u1,
            u2,
            u3,
            out_norm,
            out,
        }
    }

    pub fn null_token(&self) -> usize {
        self.config.vocab
    }

    /// Conditioning tokens from ids, `ids.len() = batch * len`.
    pub fn embed_condition(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.cond_embed);
        g.embedding(table, ids)
    }

    /// Forward pass on noised planes `x_t` (`[batch * r * r, 3]`). With `stop_after_tap`
    /// the pass ends once that up block has been computed.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x_t: Var,
        timesteps: &[usize],
        cond: Var,
        stop_after_tap: Option<usize>,
    ) -> Result<UNetOutput> {
        let c = &self.config;
        let batch = timesteps.len();
        if let Some(t) = stop_after_tap {
            c.tap_channels(t)?;
        }
        let mut temb = Vec::with_capacity(batch * c.temb_dim);
        for &t in timesteps {
            temb.extend(sinusoidal(t, c.temb_dim));
        }
        let temb = g.constant(Tensor::new(vec![batch, c.temb_dim], temb)?);
        let temb = self.time1.forward(g, temb)?;
        let temb = g.silu(temb)?;
        let temb = self.time2.forward(g, temb)?;

        let r = c.resolution;
        let d0 = SpatialDims {
            batch,
            height: r,
            width: r,
            channels: 3,
        };
        let (s0, ds0) = self.stem.forward(g, x_t, d0)?;
        let (s1, ds1) = self.d1.forward(g, s0, ds0, temb, cond)?;
        let (s2, ds2) = self.d2.forward(g, s1, ds1, temb, cond)?;
        let (m, dm) = self.mid.forward(g, s2, ds2, temb, cond)?;
        let cat = g.concat_cols(&[m, s2])?;
        let (h1, dh1) = self.u1.forward(g, cat, SpatialDims { channels: 2 * c.c3, ..dm }, temb, cond)?;
        let mut taps = vec![h1];
        if stop_after_tap == Some(1) {
            return Ok(UNetOutput { eps: None, taps });
        }
        let up = g.upsample2(h1, dh1)?;
        let cat = g.concat_cols(&[up, s1])?;
        let (h2, dh2) = self.u2.forward(g, cat, SpatialDims { channels: c.c3 + c.c2, ..ds1 }, temb, cond)?;
        taps.push(g.avg_pool(h2, dh2, 2)?);
        if stop_after_tap == Some(2) {
            return Ok(UNetOutput { eps: None, taps });
        }
        let up = g.upsample2(h2, dh2)?;
        let cat = g.concat_cols(&[up, s0])?;
        let (h3, dh3) = self.u3.forward(g, cat, SpatialDims { channels: c.c2 + c.c1, ..ds0 }, temb, cond)?;
        taps.push(g.avg_pool(h3, dh3, 4)?);
        if stop_after_tap == Some(3) {
            return Ok(UNetOutput { eps: None, taps });
        }
        let h = self.out_norm.forward(g, h3)?;
        let h = g.silu(h)?;
        let (eps, _) = self.out.forward(g, h, dh3)?;
        Ok(UNetOutput { eps: Some(eps), taps })
    }
}

/// Image planes for the U-Net: average-pooled to `resolution` and mapped to `[-1, 1]`.
pub fn unet_planes(image: &Image, resolution: usize) -> Result<Vec<f64>> {
    let (h, w) = (image.height(), image.width());
    if h != w || h % resolution != 0 {
        return Err(Error::Dimension {
            op: "unet_planes",
            left: vec![h, w],
            right: vec![resolution],
        });
    }
    let f = h / resolution;
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; resolution * resolution * 3];
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(y, x);
            let o = ((y / f) * resolution + x / f) * 3;
            for ch in 0..3 {
                out[o + ch] += p[ch] * inv;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    Ok(out)
}
