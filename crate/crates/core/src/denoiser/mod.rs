//! Conditional noise-prediction network.
//!
//! A small U-Net that takes the noisy image and the degraded conditioning
//! image stacked along channels (six input channels), plus the step index
//! through a sinusoidal embedding, and predicts the noise component. Three
//! encoder levels halve the resolution each; a bottleneck with linear
//! attention sits underneath; the decoder mirrors the encoder with skip
//! concatenation. The final projection starts at zero so an untrained
//! network predicts zero noise.
//!
//! Everything is generic over the float type: training runs in `f32`, the
//! gradient checks run the same code in `f64` against finite differences.

mod feat;
mod layers;

pub use feat::FeatureMap;

use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{sub_rng, Rng};
use crate::tensor::{ImageTensor, Range};
use crate::{Error, Result};
use layers::{
    silu_map, silu_map_backward, silu_vec, silu_vec_backward, time_embedding, Conv2d, Conv2dCache,
    GroupNorm, GroupNormCache, Linear, LinearAttention, LinearAttentionCache, LinearCache,
    ResBlock, ResBlockCache,
};

/// Number of resolution-halving stages; inputs must be divisible by
/// 2^DOWN_LEVELS in both dimensions.
pub const DOWN_LEVELS: usize = 3;

/// Spatial divisibility the network requires of its inputs.
pub const SIZE_MULTIPLE: usize = 1 << DOWN_LEVELS;

/// Places where a linear-attention block can be inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSite {
    /// Full-resolution encoder/decoder level.
    Level1,
    /// Half-resolution level.
    Level2,
    /// Quarter-resolution level.
    Level3,
    /// The block between encoder and decoder.
    Bottleneck,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channel count at full resolution.
    pub base_channels: usize,
    /// Per-level multipliers on `base_channels`.
    pub channel_multipliers: [usize; 3],
    /// Width of the sinusoidal step embedding and its MLP.
    pub time_embed_dim: usize,
    /// Where to insert attention blocks.
    pub attention_sites: Vec<AttentionSite>,
    /// Group count for every group normalization.
    pub groups_per_norm: usize,
}

impl DenoiserConfig {
    /// Workstation-scale network used by the CLI presets.
    pub fn desk() -> Self {
        DenoiserConfig {
            base_channels: 16,
            channel_multipliers: [1, 2, 4],
            time_embed_dim: 64,
            attention_sites: vec![AttentionSite::Level3, AttentionSite::Bottleneck],
            groups_per_norm: 8,
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// gradient checks.
    pub fn minimal() -> Self {
        DenoiserConfig {
            base_channels: 2,
            channel_multipliers: [1, 2, 4],
            time_embed_dim: 8,
            attention_sites: vec![AttentionSite::Level3, AttentionSite::Bottleneck],
            groups_per_norm: 2,
        }
    }

    /// Channel width at each of the three levels.
    pub fn level_channels(&self) -> [usize; 3] {
        [
            self.base_channels * self.channel_multipliers[0],
            self.base_channels * self.channel_multipliers[1],
            self.base_channels * self.channel_multipliers[2],
        ]
    }

    fn has_attention(&self, site: AttentionSite) -> bool {
        self.attention_sites.contains(&site)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be positive".into()));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::InvalidConfig("channel multipliers must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig("time_embed_dim must be even and >= 2".into()));
        }
        if self.groups_per_norm == 0 {
            return Err(Error::InvalidConfig("groups_per_norm must be positive".into()));
        }
        for c in self.level_channels() {
            if c % self.groups_per_norm != 0 {
                return Err(Error::InvalidConfig(format!(
                    "level width {c} is not divisible by groups_per_norm {}",
                    self.groups_per_norm
                )));
            }
        }
        Ok(())
    }
}

struct EncLevel<F> {
    res1: ResBlock<F>,
    res2: ResBlock<F>,
    attn: Option<LinearAttention<F>>,
    down: Conv2d<F>,
}

struct DecLevel<F> {
    /// 3x3 conv applied after nearest-neighbor upsampling.
    up_conv: Conv2d<F>,
    /// First block sees [upsampled, skip] concatenated.
    res1: ResBlock<F>,
    res2: ResBlock<F>,
    attn: Option<LinearAttention<F>>,
}

impl<F: Clone> Clone for EncLevel<F> {
    fn clone(&self) -> Self {
        EncLevel {
            res1: self.res1.clone(),
            res2: self.res2.clone(),
            attn: self.attn.clone(),
            down: self.down.clone(),
        }
    }
}

impl<F: Clone> Clone for DecLevel<F> {
    fn clone(&self) -> Self {
        DecLevel {
            up_conv: self.up_conv.clone(),
            res1: self.res1.clone(),
            res2: self.res2.clone(),
            attn: self.attn.clone(),
        }
    }
}

/// The noise-prediction U-Net.
#[derive(Clone)]
pub struct Denoiser<F> {
    config: DenoiserConfig,
    init_conv: Conv2d<F>,
    time_l1: Linear<F>,
    time_l2: Linear<F>,
    downs: Vec<EncLevel<F>>,
    mid_res1: ResBlock<F>,
    mid_attn: Option<LinearAttention<F>>,
    mid_res2: ResBlock<F>,
    ups: Vec<DecLevel<F>>,
    head_norm: GroupNorm<F>,
    head_conv: Conv2d<F>,
}

/// Everything the backward pass needs from one forward pass.
pub struct NetCache<F> {
    temb_raw: Vec<F>,
    l1_cache: LinearCache<F>,
    l1_out: Vec<F>,
    l2_cache: LinearCache<F>,
    temb: Vec<F>,
    init_conv: Conv2dCache<F>,
    downs: Vec<EncLevelCache<F>>,
    mid_res1: ResBlockCache<F>,
    mid_attn: Option<LinearAttentionCache<F>>,
    mid_res2: ResBlockCache<F>,
    ups: Vec<DecLevelCache<F>>,
    head_norm: GroupNormCache<F>,
    head_silu_in: FeatureMap<F>,
    head_conv: Conv2dCache<F>,
}

struct EncLevelCache<F> {
    res1: ResBlockCache<F>,
    res2: ResBlockCache<F>,
    attn: Option<LinearAttentionCache<F>>,
    down: Conv2dCache<F>,
}

struct DecLevelCache<F> {
    up_conv: Conv2dCache<F>,
    /// Channel count of the upsampled branch, for splitting the concat
    /// gradient.
    up_channels: usize,
    res1: ResBlockCache<F>,
    res2: ResBlockCache<F>,
    attn: Option<LinearAttentionCache<F>>,
}

impl<F: Float> Denoiser<F> {
    /// Initializes all parameters from `rng`; the output projection starts
    /// at zero so that a fresh network predicts zero noise.
    pub fn init(config: &DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let [d1, d2, d3] = config.level_channels();
        let ted = config.time_embed_dim;
        let g = config.groups_per_norm;

        let init_conv = Conv2d::init(6, d1, 3, 1, 1, true, rng);
        let time_l1 = Linear::init(ted, ted, rng);
        let time_l2 = Linear::init(ted, ted, rng);

        let level_dims = [d1, d2, d3];
        let down_out = [d2, d3, d3];
        let sites = [AttentionSite::Level1, AttentionSite::Level2, AttentionSite::Level3];
        let mut downs = Vec::with_capacity(DOWN_LEVELS);
        for i in 0..DOWN_LEVELS {
            let c = level_dims[i];
            downs.push(EncLevel {
                res1: ResBlock::init(c, c, ted, g, rng),
                res2: ResBlock::init(c, c, ted, g, rng),
                attn: config.has_attention(sites[i]).then(|| LinearAttention::init(c, rng)),
                down: Conv2d::init(c, down_out[i], 3, 2, 1, true, rng),
            });
        }

        let mid_res1 = ResBlock::init(d3, d3, ted, g, rng);
        let mid_attn = config
            .has_attention(AttentionSite::Bottleneck)
            .then(|| LinearAttention::init(d3, rng));
        let mid_res2 = ResBlock::init(d3, d3, ted, g, rng);

        // Decoder in execution order: deepest level first.
        let up_in = [d3, d3, d2];
        let up_out = [d3, d2, d1];
        let up_sites = [AttentionSite::Level3, AttentionSite::Level2, AttentionSite::Level1];
        let mut ups = Vec::with_capacity(DOWN_LEVELS);
        for i in 0..DOWN_LEVELS {
            let c = up_out[i];
            ups.push(DecLevel {
                up_conv: Conv2d::init(up_in[i], c, 3, 1, 1, true, rng),
                res1: ResBlock::init(2 * c, c, ted, g, rng),
                res2: ResBlock::init(c, c, ted, g, rng),
                attn: config.has_attention(up_sites[i]).then(|| LinearAttention::init(c, rng)),
            });
        }

        let head_norm = GroupNorm::init(g, d1);
        let mut head_conv = Conv2d::init(d1, 3, 3, 1, 1, true, rng);
        head_conv.zero_params();

        Ok(Denoiser {
            config: config.clone(),
            init_conv,
            time_l1,
            time_l2,
            downs,
            mid_res1,
            mid_attn,
            mid_res2,
            ups,
            head_norm,
            head_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// A same-architecture copy with every parameter zero, used as a
    /// gradient accumulator.
    pub fn zeroed(&self) -> Self {
        Denoiser {
            config: self.config.clone(),
            init_conv: self.init_conv.zeroed(),
            time_l1: self.time_l1.zeroed(),
            time_l2: self.time_l2.zeroed(),
            downs: self
                .downs
                .iter()
                .map(|l| EncLevel {
                    res1: l.res1.zeroed(),
                    res2: l.res2.zeroed(),
                    attn: l.attn.as_ref().map(|a| a.zeroed()),
                    down: l.down.zeroed(),
                })
                .collect(),
            mid_res1: self.mid_res1.zeroed(),
            mid_attn: self.mid_attn.as_ref().map(|a| a.zeroed()),
            mid_res2: self.mid_res2.zeroed(),
            ups: self
                .ups
                .iter()
                .map(|l| DecLevel {
                    up_conv: l.up_conv.zeroed(),
                    res1: l.res1.zeroed(),
                    res2: l.res2.zeroed(),
                    attn: l.attn.as_ref().map(|a| a.zeroed()),
                })
                .collect(),
            head_norm: self.head_norm.zeroed(),
            head_conv: self.head_conv.zeroed(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_arrays(&mut |_, _, a| n += a.len());
        n
    }

    /// Predicts the noise component of `y_t` given the conditioning image,
    /// keeping the intermediates needed for the backward pass.
    pub fn forward_traced(
        &self,
        y_t: &FeatureMap<F>,
        cond: &FeatureMap<F>,
        t: usize,
    ) -> (FeatureMap<F>, NetCache<F>) {
        assert_eq!(y_t.channels, 3, "noisy input must have 3 channels");
        assert_eq!(cond.channels, 3, "conditioning input must have 3 channels");
        assert!(
            y_t.height == cond.height && y_t.width == cond.width,
            "noisy and conditioning inputs must share a shape"
        );
        assert!(
            y_t.height % SIZE_MULTIPLE == 0 && y_t.width % SIZE_MULTIPLE == 0,
            "input size {}x{} is not divisible by {SIZE_MULTIPLE}",
            y_t.height,
            y_t.width,
        );
        assert!(t >= 1, "step index is 1-based");

        // Step embedding: sinusoid -> linear -> SiLU -> linear, then one
        // shared SiLU consumed by every residual block.
        let temb_raw: Vec<F> = time_embedding(t, self.config.time_embed_dim);
        let (l1_out, l1_cache) = self.time_l1.forward(&temb_raw);
        let l1_act = silu_vec(&l1_out);
        let (temb, l2_cache) = self.time_l2.forward(&l1_act);
        let silu_t = silu_vec(&temb);

        let x = FeatureMap::concat(&[y_t, cond]);
        let (mut h, init_cache) = self.init_conv.forward(&x);

        let mut skips: Vec<FeatureMap<F>> = Vec::with_capacity(DOWN_LEVELS);
        let mut down_caches = Vec::with_capacity(DOWN_LEVELS);
        for level in &self.downs {
            let (h1, c1) = level.res1.forward(&h, &silu_t);
            let (h2, c2) = level.res2.forward(&h1, &silu_t);
            let (hs, ca) = match &level.attn {
                Some(attn) => {
                    let (ha, ca) = attn.forward(&h2);
                    (ha, Some(ca))
                }
                None => (h2, None),
            };
            skips.push(hs.clone());
            let (hd, cd) = level.down.forward(&hs);
            h = hd;
            down_caches.push(EncLevelCache { res1: c1, res2: c2, attn: ca, down: cd });
        }

        let (hm, mid1_cache) = self.mid_res1.forward(&h, &silu_t);
        let (hm, mid_attn_cache) = match &self.mid_attn {
            Some(attn) => {
                let (ha, ca) = attn.forward(&hm);
                (ha, Some(ca))
            }
            None => (hm, None),
        };
        let (mut h, mid2_cache) = self.mid_res2.forward(&hm, &silu_t);

        let mut up_caches = Vec::with_capacity(DOWN_LEVELS);
        for level in &self.ups {
            let up = h.upsample_nearest2();
            let (u, cu) = level.up_conv.forward(&up);
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = FeatureMap::concat(&[&u, &skip]);
            let (h1, c1) = level.res1.forward(&cat, &silu_t);
            let (h2, c2) = level.res2.forward(&h1, &silu_t);
            let (hn, ca) = match &level.attn {
                Some(attn) => {
                    let (ha, ca) = attn.forward(&h2);
                    (ha, Some(ca))
                }
                None => (h2, None),
            };
            h = hn;
            up_caches.push(DecLevelCache {
                up_conv: cu,
                up_channels: u.channels,
                res1: c1,
                res2: c2,
                attn: ca,
            });
        }

        let (hn, head_norm_cache) = self.head_norm.forward(&h);
        let hs = silu_map(&hn);
        let (out, head_conv_cache) = self.head_conv.forward(&hs);

        (
            out,
            NetCache {
                temb_raw,
                l1_cache,
                l1_out,
                l2_cache,
                temb,
                init_conv: init_cache,
                downs: down_caches,
                mid_res1: mid1_cache,
                mid_attn: mid_attn_cache,
                mid_res2: mid2_cache,
                ups: up_caches,
                head_norm: head_norm_cache,
                head_silu_in: hn,
                head_conv: head_conv_cache,
            },
        )
    }

    pub fn forward(&self, y_t: &FeatureMap<F>, cond: &FeatureMap<F>, t: usize) -> FeatureMap<F> {
        self.forward_traced(y_t, cond, t).0
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the six-channel network input.
    pub fn backward(
        &self,
        cache: &NetCache<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut Denoiser<F>,
    ) -> FeatureMap<F> {
        let ted = self.config.time_embed_dim;
        let mut d_silu_t = vec![F::zero(); ted];
        let acc_t = |d: Vec<F>, acc: &mut Vec<F>| {
            for (a, v) in acc.iter_mut().zip(d) {
                *a = *a + v;
            }
        };

        let d_hs = self.head_conv.backward(&cache.head_conv, grad_out, &mut grads.head_conv);
        let d_hn = silu_map_backward(&cache.head_silu_in, &d_hs);
        let mut d = self.head_norm.backward(&cache.head_norm, &d_hn, &mut grads.head_norm);

        // Decoder levels, reverse execution order.
        let mut d_skips: Vec<FeatureMap<F>> = Vec::with_capacity(DOWN_LEVELS);
        for (i, level) in self.ups.iter().enumerate().rev() {
            let lc = &cache.ups[i];
            let gl = &mut grads.ups[i];
            if let (Some(attn), Some(ca)) = (&level.attn, &lc.attn) {
                d = attn.backward(ca, &d, gl.attn.as_mut().unwrap());
            }
            let (d2, dt) = level.res2.backward(&lc.res2, &d, &mut gl.res2);
            acc_t(dt, &mut d_silu_t);
            let (d_cat, dt) = level.res1.backward(&lc.res1, &d2, &mut gl.res1);
            acc_t(dt, &mut d_silu_t);
            let (d_u, d_skip) = d_cat.split(lc.up_channels);
            d_skips.push(d_skip);
            let d_up = level.up_conv.backward(&lc.up_conv, &d_u, &mut gl.up_conv);
            d = FeatureMap::upsample_nearest2_backward(&d_up);
        }
        // d_skips now holds gradients for decoder levels 1, 2, 3 in that
        // order (reverse of decoder execution), i.e. encoder level order.

        let (dm, dt) = self.mid_res2.backward(&cache.mid_res2, &d, &mut grads.mid_res2);
        acc_t(dt, &mut d_silu_t);
        let dm = match (&self.mid_attn, &cache.mid_attn) {
            (Some(attn), Some(ca)) => attn.backward(ca, &dm, grads.mid_attn.as_mut().unwrap()),
            _ => dm,
        };
        let (mut d, dt) = self.mid_res1.backward(&cache.mid_res1, &dm, &mut grads.mid_res1);
        acc_t(dt, &mut d_silu_t);

        // Encoder levels, reverse execution order.
        for (i, level) in self.downs.iter().enumerate().rev() {
            let lc = &cache.downs[i];
            let gl = &mut grads.downs[i];
            let mut d_s = level.down.backward(&lc.down, &d, &mut gl.down);
            d_s.add_assign(&d_skips[i]); // skip branch into the decoder
            let d_a = match (&level.attn, &lc.attn) {
                (Some(attn), Some(ca)) => attn.backward(ca, &d_s, gl.attn.as_mut().unwrap()),
                _ => d_s,
            };
            let (d2, dt) = level.res2.backward(&lc.res2, &d_a, &mut gl.res2);
            acc_t(dt, &mut d_silu_t);
            let (d1, dt) = level.res1.backward(&lc.res1, &d2, &mut gl.res1);
            acc_t(dt, &mut d_silu_t);
            d = d1;
        }

        let d_input = self.init_conv.backward(&cache.init_conv, &d, &mut grads.init_conv);

        // Step-embedding pipeline.
        let d_temb = silu_vec_backward(&cache.temb, &d_silu_t);
        let d_l1_act = self.time_l2.backward(&cache.l2_cache, &d_temb, &mut grads.time_l2);
        let d_l1 = silu_vec_backward(&cache.l1_out, &d_l1_act);
        let _ = self.time_l1.backward(&cache.l1_cache, &d_l1, &mut grads.time_l1);
        let _ = &cache.temb_raw; // parameter-free embedding: gradient ends here

        d_input
    }

    /// Calls `f` for every parameter array in a fixed order shared with
    /// [`visit_arrays_mut`](Self::visit_arrays_mut).
    pub fn visit_arrays(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        visit::conv("init_conv", &self.init_conv, f);
        visit::linear("time.l1", &self.time_l1, f);
        visit::linear("time.l2", &self.time_l2, f);
        for (i, level) in self.downs.iter().enumerate() {
            let p = format!("down{}", i + 1);
            visit::res(&format!("{p}.res1"), &level.res1, f);
            visit::res(&format!("{p}.res2"), &level.res2, f);
            if let Some(attn) = &level.attn {
                visit::attn(&format!("{p}.attn"), attn, f);
            }
            visit::conv(&format!("{p}.down"), &level.down, f);
        }
        visit::res("mid.res1", &self.mid_res1, f);
        if let Some(attn) = &self.mid_attn {
            visit::attn("mid.attn", attn, f);
        }
        visit::res("mid.res2", &self.mid_res2, f);
        for (i, level) in self.ups.iter().enumerate() {
            let p = format!("up{}", DOWN_LEVELS - i);
            visit::conv(&format!("{p}.conv"), &level.up_conv, f);
            visit::res(&format!("{p}.res1"), &level.res1, f);
            visit::res(&format!("{p}.res2"), &level.res2, f);
            if let Some(attn) = &level.attn {
                visit::attn(&format!("{p}.attn"), attn, f);
            }
        }
        visit::gn("head.norm", &self.head_norm, f);
        visit::conv("head.conv", &self.head_conv, f);
    }

    /// Mutable twin of [`visit_arrays`](Self::visit_arrays); identical
    /// order and names.
    pub fn visit_arrays_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        visit::conv_mut("init_conv", &mut self.init_conv, f);
        visit::linear_mut("time.l1", &mut self.time_l1, f);
        visit::linear_mut("time.l2", &mut self.time_l2, f);
        for (i, level) in self.downs.iter_mut().enumerate() {
            let p = format!("down{}", i + 1);
            visit::res_mut(&format!("{p}.res1"), &mut level.res1, f);
            visit::res_mut(&format!("{p}.res2"), &mut level.res2, f);
            if let Some(attn) = &mut level.attn {
                visit::attn_mut(&format!("{p}.attn"), attn, f);
            }
            visit::conv_mut(&format!("{p}.down"), &mut level.down, f);
        }
        visit::res_mut("mid.res1", &mut self.mid_res1, f);
        if let Some(attn) = &mut self.mid_attn {
            visit::attn_mut("mid.attn", attn, f);
        }
        visit::res_mut("mid.res2", &mut self.mid_res2, f);
        for (i, level) in self.ups.iter_mut().enumerate() {
            let p = format!("up{}", DOWN_LEVELS - i);
            visit::conv_mut(&format!("{p}.conv"), &mut level.up_conv, f);
            visit::res_mut(&format!("{p}.res1"), &mut level.res1, f);
            visit::res_mut(&format!("{p}.res2"), &mut level.res2, f);
            if let Some(attn) = &mut level.attn {
                visit::attn_mut(&format!("{p}.attn"), attn, f);
            }
        }
        visit::gn_mut("head.norm", &mut self.head_norm, f);
        visit::conv_mut("head.conv", &mut self.head_conv, f);
    }
}

impl Denoiser<f32> {
    /// Image-level forward pass: checks shapes and the size-multiple
    /// requirement, then predicts the noise component.
    pub fn forward_images(
        &self,
        y_t: &ImageTensor,
        cond: &ImageTensor,
        t: usize,
    ) -> Result<ImageTensor> {
        if y_t.shape() != cond.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", y_t.shape()),
                got: format!("{:?}", cond.shape()),
            });
        }
        if y_t.channels() != 3 {
            return Err(Error::InvalidArg(format!(
                "denoiser expects 3-channel images, got {}",
                y_t.channels()
            )));
        }
        if y_t.height() % SIZE_MULTIPLE != 0 || y_t.width() % SIZE_MULTIPLE != 0 {
            return Err(Error::InvalidArg(format!(
                "image size {}x{} is not divisible by {SIZE_MULTIPLE}",
                y_t.height(),
                y_t.width()
            )));
        }
        if t == 0 {
            return Err(Error::StepOutOfRange { t: 0, t_max: usize::MAX });
        }
        let ym = FeatureMap::from_images(&[y_t])?;
        let cm = FeatureMap::from_images(&[cond])?;
        Ok(self.forward(&ym, &cm, t).to_image(Range::Unbounded))
    }
}

mod visit {
    //! Per-layer visitor plumbing: one immutable and one mutable walker per
    //! layer type, emitting `(name, shape, values)` in a fixed order.

    use super::layers::{Conv2d, GroupNorm, Linear, LinearAttention, ResBlock};

    pub fn conv<F>(name: &str, c: &Conv2d<F>, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(&format!("{name}.w"), &[c.out_c, c.in_c, c.k, c.k], &c.w);
        if !c.b.is_empty() {
            f(&format!("{name}.b"), &[c.out_c], &c.b);
        }
    }

    pub fn conv_mut<F>(name: &str, c: &mut Conv2d<F>, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        f(&format!("{name}.w"), &[c.out_c, c.in_c, c.k, c.k], &mut c.w);
        if !c.b.is_empty() {
            f(&format!("{name}.b"), &[c.out_c], &mut c.b);
        }
    }

    pub fn gn<F>(name: &str, n: &GroupNorm<F>, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(&format!("{name}.gamma"), &[n.c], &n.gamma);
        f(&format!("{name}.beta"), &[n.c], &n.beta);
    }

    pub fn gn_mut<F>(name: &str, n: &mut GroupNorm<F>, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        f(&format!("{name}.gamma"), &[n.c], &mut n.gamma);
        f(&format!("{name}.beta"), &[n.c], &mut n.beta);
    }

    pub fn linear<F>(name: &str, l: &Linear<F>, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(&format!("{name}.w"), &[l.out_f, l.in_f], &l.w);
        f(&format!("{name}.b"), &[l.out_f], &l.b);
    }

    pub fn linear_mut<F>(name: &str, l: &mut Linear<F>, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        f(&format!("{name}.w"), &[l.out_f, l.in_f], &mut l.w);
        f(&format!("{name}.b"), &[l.out_f], &mut l.b);
    }

    pub fn res<F>(name: &str, r: &ResBlock<F>, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        gn(&format!("{name}.norm1"), &r.norm1, f);
        conv(&format!("{name}.conv1"), &r.conv1, f);
        linear(&format!("{name}.time_proj"), &r.time_proj, f);
        gn(&format!("{name}.norm2"), &r.norm2, f);
        conv(&format!("{name}.conv2"), &r.conv2, f);
        if let Some(s) = &r.skip {
            conv(&format!("{name}.skip"), s, f);
        }
    }

    pub fn res_mut<F>(name: &str, r: &mut ResBlock<F>, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        gn_mut(&format!("{name}.norm1"), &mut r.norm1, f);
        conv_mut(&format!("{name}.conv1"), &mut r.conv1, f);
        linear_mut(&format!("{name}.time_proj"), &mut r.time_proj, f);
        gn_mut(&format!("{name}.norm2"), &mut r.norm2, f);
        conv_mut(&format!("{name}.conv2"), &mut r.conv2, f);
        if let Some(s) = &mut r.skip {
            conv_mut(&format!("{name}.skip"), s, f);
        }
    }

    pub fn attn<F>(name: &str, a: &LinearAttention<F>, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        gn(&format!("{name}.norm"), &a.norm, f);
        conv(&format!("{name}.qkv"), &a.qkv, f);
        conv(&format!("{name}.out"), &a.out, f);
    }

    pub fn attn_mut<F>(
        name: &str,
        a: &mut LinearAttention<F>,
        f: &mut dyn FnMut(&str, &[usize], &mut [F]),
    ) {
        gn_mut(&format!("{name}.norm"), &mut a.norm, f);
        conv_mut(&format!("{name}.qkv"), &mut a.qkv, f);
        conv_mut(&format!("{name}.out"), &mut a.out, f);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Absolute tolerance floor for the gradient check.
pub const GRADCHECK_ATOL: f64 = 1e-7;
/// Relative tolerance for the gradient check.
pub const GRADCHECK_RTOL: f64 = 1e-3;

/// Outcome of comparing reverse-mode gradients against central finite
/// differences over the training loss.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params_checked: usize,
    /// Max over checked parameters of
    /// `|ad - fd| / (atol + rtol * max(|ad|, |fd|))`; at most 1 on pass.
    pub worst_ratio: f64,
    pub worst_param: String,
    pub worst_ad: f64,
    pub worst_fd: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Checks every `stride`-th parameter of an f64 network against central
/// finite differences of the mean-squared noise-prediction loss.
///
/// Parameters are first perturbed uniformly in ±0.05 so the zero-initialized
/// head does not mask upstream gradients. `stride = 1` checks every slot.
pub fn finite_difference_check(
    config: &DenoiserConfig,
    height: usize,
    width: usize,
    seed: u64,
    stride: usize,
) -> Result<GradCheckReport> {
    assert!(stride >= 1);
    let mut rng = sub_rng(seed, "gradcheck-init");
    let mut net: Denoiser<f64> = Denoiser::init(config, &mut rng)?;
    net.visit_arrays_mut(&mut |_, _, a| {
        for v in a {
            *v += rng.random_range(-0.05..0.05);
        }
    });

    let fill = |label: &str, c: usize| {
        let mut r = sub_rng(seed, label);
        let mut m = FeatureMap::zeros(c, height, width);
        for v in &mut m.data {
            *v = r.random_range(-1.0..1.0);
        }
        m
    };
    let y_t = fill("gradcheck-y", 3);
    let cond = fill("gradcheck-cond", 3);
    let target = fill("gradcheck-eps", 3);
    let t = 3;

    let loss_of = |net: &Denoiser<f64>| -> f64 {
        let out = net.forward(&y_t, &cond, t);
        let n = out.data.len() as f64;
        out.data
            .iter()
            .zip(target.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    };

    // Reverse-mode gradients in one pass.
    let (out, cache) = net.forward_traced(&y_t, &cond, t);
    let n = out.data.len() as f64;
    let mut g_out = FeatureMap::zeros(out.channels, out.height, out.width);
    for (g, (&a, &b)) in g_out.data.iter_mut().zip(out.data.iter().zip(target.data.iter())) {
        *g = 2.0 * (a - b) / n;
    }
    let mut grads = net.zeroed();
    net.backward(&cache, &g_out, &mut grads);

    let mut ad_flat: Vec<(String, f64)> = Vec::new();
    grads.visit_arrays(&mut |name, _, a| {
        for (i, &v) in a.iter().enumerate() {
            ad_flat.push((format!("{name}[{i}]"), v));
        }
    });

    let mut report = GradCheckReport {
        params_checked: 0,
        worst_ratio: 0.0,
        worst_param: String::new(),
        worst_ad: 0.0,
        worst_fd: 0.0,
    };
    let h = 1e-4;
    let mut probe = net.clone();
    // visit_arrays_mut walks the same fixed order as visit_arrays, so a flat
    // slot index addresses the same parameter in both.
    let nudge = |probe: &mut Denoiser<f64>, slot: usize, delta: f64| {
        let mut k = 0usize;
        probe.visit_arrays_mut(&mut |_, _, a| {
            if slot >= k && slot < k + a.len() {
                a[slot - k] += delta;
            }
            k += a.len();
        });
    };
    for slot in (0..ad_flat.len()).step_by(stride) {
        let (ref name, ad) = ad_flat[slot];
        nudge(&mut probe, slot, h);
        let plus = loss_of(&probe);
        nudge(&mut probe, slot, -2.0 * h);
        let minus = loss_of(&probe);
        nudge(&mut probe, slot, h); // restore
        let fd = (plus - minus) / (2.0 * h);
        let ratio = (ad - fd).abs() / (GRADCHECK_ATOL + GRADCHECK_RTOL * ad.abs().max(fd.abs()));
        report.params_checked += 1;
        if ratio > report.worst_ratio {
            report.worst_ratio = ratio;
            report.worst_param = name.clone();
            report.worst_ad = ad;
            report.worst_fd = fd;
        }
    }
    Ok(report)
}
