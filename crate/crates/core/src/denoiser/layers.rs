//! Network building blocks with explicit reverse-mode gradients.
//!
//! Every layer exposes `forward` returning the output plus a cache of the
//! intermediates its backward pass needs, and `backward` mapping the output
//! gradient to the input gradient while accumulating parameter gradients
//! into a same-shaped mirror of the layer. Running the whole stack in `f64`
//! (the types are generic over float width) gives the reference values the
//! finite-difference tests compare against.

use num_traits::Float;

use super::feat::FeatureMap;
use crate::rng::Rng;
use rand::Rng as _;

/// Numerical floor added to group-norm variances.
const NORM_EPS: f64 = 1e-5;

fn f<F: Float>(x: f64) -> F {
    F::from(x).unwrap()
}

/// Uniform init in ±1/sqrt(fan_in), matching common conv/linear defaults.
fn fan_in_uniform<F: Float>(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| f(rng.random_range(-bound..bound))).collect()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Zero-padded copy of every channel plane; returns the buffer and the
/// padded width (height is implied by the plane length).
fn pad_planes<F: Float>(m: &FeatureMap<F>, pad: usize) -> (Vec<F>, usize) {
    let (c, h, w) = (m.channels, m.height, m.width);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut buf = vec![F::zero(); c * ph * pw];
    for i in 0..c {
        for y in 0..h {
            let dst = i * ph * pw + (y + pad) * pw + pad;
            buf[dst..dst + w].copy_from_slice(m.row(i, y));
        }
    }
    (buf, pw)
}

/// Adds one kernel row's contribution to an output row:
/// `acc[j] += sum_kx taps[kx] * row[j + kx]`. The three-tap case is frequent
/// enough to unroll by hand; per element the taps still apply in index
/// order, so both branches sum in the same order.
#[inline]
fn accumulate_row<F: Float>(acc: &mut [F], row: &[F], taps: &[F]) {
    let n = acc.len();
    if let [w0, w1, w2] = *taps {
        let s0 = &row[0..n];
        let s1 = &row[1..n + 1];
        let s2 = &row[2..n + 2];
        for j in 0..n {
            acc[j] = acc[j] + w0 * s0[j] + w1 * s1[j] + w2 * s2[j];
        }
    } else {
        for (kx, &wv) in taps.iter().enumerate() {
            let src = &row[kx..kx + n];
            for (a, &x) in acc.iter_mut().zip(src) {
                *a = *a + wv * x;
            }
        }
    }
}

/// Dot product accumulated in eight parallel lanes so the loop vectorizes.
/// The fold order of the lanes is fixed, keeping the result deterministic
/// for a given length.
#[inline]
fn dot_lanes<F: Float>(a: &[F], b: &[F]) -> F {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let mut lanes = [F::zero(); LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let av = &a[c * LANES..(c + 1) * LANES];
        let bv = &b[c * LANES..(c + 1) * LANES];
        for j in 0..LANES {
            lanes[j] = lanes[j] + av[j] * bv[j];
        }
    }
    let mut tail = F::zero();
    for i in chunks * LANES..n {
        tail = tail + a[i] * b[i];
    }
    // Fixed pairwise fold, deterministic for a given length.
    let mut width = LANES / 2;
    while width > 0 {
        for j in 0..width {
            lanes[j] = lanes[j] + lanes[j + width];
        }
        width /= 2;
    }
    lanes[0] + tail
}

/// Precomputed sizes for the stride-2 parity decomposition: the padded
/// input splits into four subplanes (even/odd rows x even/odd columns), on
/// which every kernel tap becomes a unit-stride access. Constructed only
/// when all windows provably fit, otherwise the caller falls back to the
/// generic strided loop.
struct Stride2Geometry {
    oh: usize,
    ow: usize,
    /// Subplane height and width (ceil of half the padded size).
    sph: usize,
    spw: usize,
    /// Row/column pad for the output-gradient planes in the input-gradient
    /// pass: one less than the widest per-parity tap count.
    q: usize,
}

impl Stride2Geometry {
    fn check<F: Float>(conv: &Conv2d<F>, ih: usize, iw: usize) -> Option<Self> {
        if conv.stride != 2 || conv.pad >= conv.k {
            return None;
        }
        let (oh, ow) = conv.out_size(ih, iw);
        let ph = ih + 2 * conv.pad;
        let pw = iw + 2 * conv.pad;
        // Parity splitting needs even padded sides so both halves line up.
        if ph % 2 != 0 || pw % 2 != 0 || oh == 0 || ow == 0 {
            return None;
        }
        let sph = ph / 2;
        let spw = pw / 2;
        let q = conv.k.div_ceil(2) - 1;
        // Forward / weight-gradient windows stay inside a subplane...
        let fits = oh - 1 + (conv.k - 1) / 2 < sph && ow + q <= spw;
        // ...and input-gradient windows stay inside the padded gradient.
        let fits = fits && sph <= oh + q && spw <= ow + q;
        fits.then_some(Stride2Geometry { oh, ow, sph, spw, q })
    }
}

/// Splits each channel of `m`, zero-padded by `pad`, into four parity
/// subplanes of `sph` x `spw`, ordered (even,even), (even,odd),
/// (odd,even), (odd,odd) by (row, column) parity of the padded plane.
fn deinterleave_padded<F: Float>(
    m: &FeatureMap<F>,
    pad: usize,
    sph: usize,
    spw: usize,
) -> Vec<F> {
    let sub_len = sph * spw;
    let mut subs = vec![F::zero(); m.channels * 4 * sub_len];
    for i in 0..m.channels {
        for y in 0..m.height {
            let py = y + pad;
            let (ry, sy) = (py % 2, py / 2);
            let row = m.row(i, y);
            for rx in 0..2usize {
                let x0 = (rx + 2 - pad % 2) % 2;
                if x0 >= m.width {
                    continue;
                }
                let dst = (i * 4 + ry * 2 + rx) * sub_len + sy * spw + (x0 + pad) / 2;
                for (j, &v) in row[x0..].iter().step_by(2).enumerate() {
                    subs[dst + j] = v;
                }
            }
        }
    }
    subs
}

/// 2-D convolution with square kernel, zero padding, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub w: Vec<F>,
    /// Empty when the layer has no bias.
    pub b: Vec<F>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dCache<F> {
    input: FeatureMap<F>,
}

impl<F: Float> Conv2d<F> {
    pub fn init(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            w: fan_in_uniform(rng, fan_in, out_c * fan_in),
            b: if bias { fan_in_uniform(rng, fan_in, out_c) } else { Vec::new() },
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    /// Same-shape init with all weights and biases zero.
    pub fn zeroed(&self) -> Self {
        Conv2d {
            w: vec![F::zero(); self.w.len()],
            b: vec![F::zero(); self.b.len()],
            ..*self
        }
    }

    pub fn zero_params(&mut self) {
        self.w.iter_mut().for_each(|v| *v = F::zero());
        self.b.iter_mut().for_each(|v| *v = F::zero());
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_c + i) * self.k + ky) * self.k + kx
    }

    /// Output range `[lo, hi]` (inclusive) such that the sampled input index
    /// `o*stride + koff - pad` stays within `[0, n)`; empty when `lo > hi`.
    #[inline]
    fn valid_range(&self, n: usize, out_n: usize, koff: usize) -> (usize, usize) {
        let lo = if self.pad > koff { (self.pad - koff).div_ceil(self.stride) } else { 0 };
        if n + self.pad < koff + 1 {
            return (1, 0);
        }
        let hi = ((n - 1 + self.pad - koff) / self.stride).min(out_n - 1);
        (lo, hi)
    }

    pub fn forward(&self, input: &FeatureMap<F>) -> (FeatureMap<F>, Conv2dCache<F>) {
        assert_eq!(input.channels, self.in_c, "conv input channel mismatch");
        let (oh, ow) = self.out_size(input.height, input.width);
        let mut out = FeatureMap::zeros(self.out_c, oh, ow);
        if self.stride == 1 && self.pad < self.k {
            self.forward_unit_stride(input, &mut out);
        } else if let Some(geo) = Stride2Geometry::check(self, input.height, input.width) {
            self.forward_stride2(input, &mut out, &geo);
        } else {
            self.forward_strided(input, &mut out);
        }
        (out, Conv2dCache { input: input.clone() })
    }

    /// Stride-1 path: pad once, then accumulate whole planes at a time.
    /// Because consecutive output rows sit `pw` apart in the padded input,
    /// one output plane is a sum of k whole-plane passes (one per kernel
    /// row), each a fused k-tap multiply-add over a single long window.
    /// The accumulator is laid out at the padded width, so the k-1 columns
    /// between rows compute values that are simply never copied out.
    fn forward_unit_stride(&self, input: &FeatureMap<F>, out: &mut FeatureMap<F>) {
        let (planes, pw) = pad_planes(input, self.pad);
        let plane_len = (input.height + 2 * self.pad) * pw;
        let (oh, ow) = (out.height, out.width);
        let flat = (oh - 1) * pw + ow;
        let mut acc = vec![F::zero(); flat];
        for o in 0..self.out_c {
            let bias = self.b.get(o).copied().unwrap_or_else(F::zero);
            acc.iter_mut().for_each(|v| *v = bias);
            for i in 0..self.in_c {
                let plane = &planes[i * plane_len..(i + 1) * plane_len];
                for ky in 0..self.k {
                    let base = ky * pw;
                    let wbase = self.widx(o, i, ky, 0);
                    accumulate_row(
                        &mut acc,
                        &plane[base..base + flat + self.k - 1],
                        &self.w[wbase..wbase + self.k],
                    );
                }
            }
            for oy in 0..oh {
                out.row_mut(o, oy).copy_from_slice(&acc[oy * pw..oy * pw + ow]);
            }
        }
    }

    /// Stride-2 path over the parity subplanes: tap (ky, kx) of the kernel
    /// reads subplane (ky%2, kx%2) at unit stride, so the whole-plane fused
    /// kernels from the stride-1 path apply unchanged.
    fn forward_stride2(
        &self,
        input: &FeatureMap<F>,
        out: &mut FeatureMap<F>,
        g: &Stride2Geometry,
    ) {
        let sub_len = g.sph * g.spw;
        let subs = deinterleave_padded(input, self.pad, g.sph, g.spw);
        let flat = (g.oh - 1) * g.spw + g.ow;
        let mut acc = vec![F::zero(); flat];
        let mut taps: Vec<F> = Vec::with_capacity(self.k.div_ceil(2));
        for o in 0..self.out_c {
            let bias = self.b.get(o).copied().unwrap_or_else(F::zero);
            acc.iter_mut().for_each(|v| *v = bias);
            for i in 0..self.in_c {
                for ky in 0..self.k {
                    let (ry, m) = (ky % 2, ky / 2);
                    for rx in 0..2usize {
                        taps.clear();
                        let mut kx = rx;
                        while kx < self.k {
                            taps.push(self.w[self.widx(o, i, ky, kx)]);
                            kx += 2;
                        }
                        if taps.is_empty() {
                            continue;
                        }
                        let sub = &subs[(i * 4 + ry * 2 + rx) * sub_len..][..sub_len];
                        let base = m * g.spw;
                        accumulate_row(
                            &mut acc,
                            &sub[base..base + flat + taps.len() - 1],
                            &taps,
                        );
                    }
                }
            }
            for oy in 0..g.oh {
                out.row_mut(o, oy).copy_from_slice(&acc[oy * g.spw..oy * g.spw + g.ow]);
            }
        }
    }

    fn forward_strided(&self, input: &FeatureMap<F>, out: &mut FeatureMap<F>) {
        let (oh, ow) = (out.height, out.width);
        if !self.b.is_empty() {
            for o in 0..self.out_c {
                let bias = self.b[o];
                for y in 0..oh {
                    out.row_mut(o, y).iter_mut().for_each(|v| *v = bias);
                }
            }
        }
        for o in 0..self.out_c {
            for i in 0..self.in_c {
                for ky in 0..self.k {
                    let (oy_lo, oy_hi) = self.valid_range(input.height, oh, ky);
                    if oy_lo > oy_hi {
                        continue;
                    }
                    for kx in 0..self.k {
                        let (ox_lo, ox_hi) = self.valid_range(input.width, ow, kx);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let wgt = self.w[self.widx(o, i, ky, kx)];
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let irow = input.row(i, iy);
                            let orow = out.row_mut(o, oy);
                            for ox in ox_lo..=ox_hi {
                                let ix = ox * self.stride + kx - self.pad;
                                orow[ox] = orow[ox] + wgt * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulate parameter gradients into `grads` and return the input
    /// gradient.
    pub fn backward(
        &self,
        cache: &Conv2dCache<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut Conv2d<F>,
    ) -> FeatureMap<F> {
        if !self.b.is_empty() {
            for o in 0..self.out_c {
                let mut acc = F::zero();
                for y in 0..grad_out.height {
                    for &g in grad_out.row(o, y) {
                        acc = acc + g;
                    }
                }
                grads.b[o] = grads.b[o] + acc;
            }
        }
        if self.stride == 1 && self.pad < self.k {
            self.backward_unit_stride(&cache.input, grad_out, grads)
        } else if let Some(geo) =
            Stride2Geometry::check(self, cache.input.height, cache.input.width)
        {
            self.backward_stride2(&cache.input, grad_out, grads, &geo)
        } else {
            self.backward_strided(&cache.input, grad_out, grads)
        }
    }

    /// Stride-1 path, using the same whole-plane windows as the forward
    /// pass. Each weight gradient is one long dot of the padded input
    /// against the output gradient re-laid at the padded row stride (the
    /// gap columns stay zero, so they add nothing). The input gradient is
    /// the correlation of the zero-extended output gradient with the
    /// spatially flipped kernel.
    fn backward_unit_stride(
        &self,
        input: &FeatureMap<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut Conv2d<F>,
    ) -> FeatureMap<F> {
        let k = self.k;
        let (oh, ow) = (grad_out.height, grad_out.width);
        let (planes, ipw) = pad_planes(input, self.pad);
        let iplane = (input.height + 2 * self.pad) * ipw;
        let gflat = (oh - 1) * ipw + ow;
        let mut goutp = vec![F::zero(); gflat];
        for o in 0..self.out_c {
            for oy in 0..oh {
                goutp[oy * ipw..oy * ipw + ow].copy_from_slice(grad_out.row(o, oy));
            }
            for i in 0..self.in_c {
                let plane = &planes[i * iplane..(i + 1) * iplane];
                for ky in 0..k {
                    for kx in 0..k {
                        let base = ky * ipw + kx;
                        let acc = dot_lanes(&goutp, &plane[base..base + gflat]);
                        let wi = self.widx(o, i, ky, kx);
                        grads.w[wi] = grads.w[wi] + acc;
                    }
                }
            }
        }

        let q = k - 1 - self.pad;
        let (gplanes, gpw) = pad_planes(grad_out, q);
        let gplane = (oh + 2 * q) * gpw;
        let (ih, iw) = (input.height, input.width);
        let mut din = FeatureMap::zeros(self.in_c, ih, iw);
        let flat = (ih - 1) * gpw + iw;
        let mut acc = vec![F::zero(); flat];
        let mut taps = vec![F::zero(); k];
        for i in 0..self.in_c {
            acc.iter_mut().for_each(|v| *v = F::zero());
            for o in 0..self.out_c {
                let plane = &gplanes[o * gplane..(o + 1) * gplane];
                for kyr in 0..k {
                    for (kxr, t) in taps.iter_mut().enumerate() {
                        *t = self.w[self.widx(o, i, k - 1 - kyr, k - 1 - kxr)];
                    }
                    let base = kyr * gpw;
                    accumulate_row(&mut acc, &plane[base..base + flat + k - 1], &taps);
                }
            }
            for iy in 0..ih {
                din.row_mut(i, iy).copy_from_slice(&acc[iy * gpw..iy * gpw + iw]);
            }
        }
        din
    }

    /// Stride-2 twin of [`backward_unit_stride`](Self::backward_unit_stride)
    /// on the parity subplanes. Weight gradients are flat dots of the
    /// gap-zeroed output gradient against a subplane window. The input
    /// gradient is accumulated per parity class — kernel rows/columns of
    /// one parity only ever touch padded-input positions of that parity —
    /// and the four class planes are re-interleaved at the end.
    fn backward_stride2(
        &self,
        input: &FeatureMap<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut Conv2d<F>,
        g: &Stride2Geometry,
    ) -> FeatureMap<F> {
        let k = self.k;
        let sub_len = g.sph * g.spw;
        let subs = deinterleave_padded(input, self.pad, g.sph, g.spw);
        let gflat = (g.oh - 1) * g.spw + g.ow;
        let mut goutp = vec![F::zero(); gflat];
        for o in 0..self.out_c {
            for oy in 0..g.oh {
                goutp[oy * g.spw..oy * g.spw + g.ow].copy_from_slice(grad_out.row(o, oy));
            }
            for i in 0..self.in_c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sub = &subs[(i * 4 + (ky % 2) * 2 + kx % 2) * sub_len..][..sub_len];
                        let base = (ky / 2) * g.spw + kx / 2;
                        let wi = self.widx(o, i, ky, kx);
                        grads.w[wi] = grads.w[wi] + dot_lanes(&goutp, &sub[base..base + gflat]);
                    }
                }
            }
        }

        let q = g.q;
        let (gplanes, gpw) = pad_planes(grad_out, q);
        let gplane_len = (g.oh + 2 * q) * gpw;
        let flat = (g.sph - 1) * gpw + g.spw;
        let mut class_acc = vec![vec![F::zero(); flat]; 4];
        let mut taps = vec![F::zero(); q + 1];
        let mut din = FeatureMap::zeros(self.in_c, input.height, input.width);
        for i in 0..self.in_c {
            for acc in class_acc.iter_mut() {
                acc.iter_mut().for_each(|v| *v = F::zero());
            }
            for o in 0..self.out_c {
                let plane = &gplanes[o * gplane_len..][..gplane_len];
                for ry in 0..2usize {
                    let m_count = (k + 1).saturating_sub(ry) / 2;
                    for rx in 0..2usize {
                        let n_count = (k + 1).saturating_sub(rx) / 2;
                        if m_count == 0 || n_count == 0 {
                            continue;
                        }
                        let acc = &mut class_acc[ry * 2 + rx];
                        for m in 0..m_count {
                            for (t, tap) in taps[..n_count].iter_mut().enumerate() {
                                let n = n_count - 1 - t;
                                *tap = self.w[self.widx(o, i, ry + 2 * m, rx + 2 * n)];
                            }
                            let base = (q - m) * gpw + (q + 1 - n_count);
                            accumulate_row(
                                acc,
                                &plane[base..base + flat + n_count - 1],
                                &taps[..n_count],
                            );
                        }
                    }
                }
            }
            for y in 0..input.height {
                let py = y + self.pad;
                let (ry, sy) = (py % 2, py / 2);
                let drow = din.row_mut(i, y);
                for rx in 0..2usize {
                    let x0 = (rx + 2 - self.pad % 2) % 2;
                    if x0 >= drow.len() {
                        continue;
                    }
                    let acc = &class_acc[ry * 2 + rx];
                    let src = sy * gpw + (x0 + self.pad) / 2;
                    for (j, v) in drow[x0..].iter_mut().step_by(2).enumerate() {
                        *v = acc[src + j];
                    }
                }
            }
        }
        din
    }

    fn backward_strided(
        &self,
        input: &FeatureMap<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut Conv2d<F>,
    ) -> FeatureMap<F> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let mut din = FeatureMap::zeros(self.in_c, input.height, input.width);
        for o in 0..self.out_c {
            for i in 0..self.in_c {
                for ky in 0..self.k {
                    let (oy_lo, oy_hi) = self.valid_range(input.height, oh, ky);
                    if oy_lo > oy_hi {
                        continue;
                    }
                    for kx in 0..self.k {
                        let (ox_lo, ox_hi) = self.valid_range(input.width, ow, kx);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let wgt = self.w[self.widx(o, i, ky, kx)];
                        let mut dw = F::zero();
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let grow = grad_out.row(o, oy);
                            let irow = input.row(i, iy);
                            let drow = din.row_mut(i, iy);
                            for ox in ox_lo..=ox_hi {
                                let ix = ox * self.stride + kx - self.pad;
                                dw = dw + grow[ox] * irow[ix];
                                drow[ix] = drow[ix] + wgt * grow[ox];
                            }
                        }
                        let wi = self.widx(o, i, ky, kx);
                        grads.w[wi] = grads.w[wi] + dw;
                    }
                }
            }
        }
        din
    }
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

/// Group normalization over (channels-in-group × H × W), per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub groups: usize,
    pub c: usize,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache<F> {
    xhat: FeatureMap<F>,
    inv_std: Vec<F>,
}

impl<F: Float> GroupNorm<F> {
    pub fn init(groups: usize, c: usize) -> Self {
        assert!(groups >= 1 && c % groups == 0, "channels {c} not divisible by {groups} groups");
        GroupNorm { gamma: vec![F::one(); c], beta: vec![F::zero(); c], groups, c }
    }

    pub fn zeroed(&self) -> Self {
        GroupNorm {
            gamma: vec![F::zero(); self.c],
            beta: vec![F::zero(); self.c],
            groups: self.groups,
            c: self.c,
        }
    }

    pub fn forward(&self, input: &FeatureMap<F>) -> (FeatureMap<F>, GroupNormCache<F>) {
        assert_eq!(input.channels, self.c);
        let spatial = input.spatial();
        let cpg = self.c / self.groups;
        let n = f::<F>((cpg * spatial) as f64);
        let mut out = FeatureMap::zeros(self.c, input.height, input.width);
        let mut xhat = FeatureMap::zeros(self.c, input.height, input.width);
        let mut inv_stds = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let range = g * cpg * spatial..(g + 1) * cpg * spatial;
            let mut mean = F::zero();
            for &v in &input.data[range.clone()] {
                mean = mean + v;
            }
            mean = mean / n;
            let mut var = F::zero();
            for &v in &input.data[range.clone()] {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / n;
            let inv_std = F::one() / (var + f(NORM_EPS)).sqrt();
            inv_stds.push(inv_std);
            for ch in g * cpg..(g + 1) * cpg {
                let (gamma, beta) = (self.gamma[ch], self.beta[ch]);
                let span = ch * spatial..(ch + 1) * spatial;
                let src = &input.data[span.clone()];
                let hs = &mut xhat.data[span.clone()];
                let os = &mut out.data[span];
                for ((&v, h), ov) in src.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                    let hv = (v - mean) * inv_std;
                    *h = hv;
                    *ov = gamma * hv + beta;
                }
            }
        }
        (out, GroupNormCache { xhat, inv_std: inv_stds })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut GroupNorm<F>,
    ) -> FeatureMap<F> {
        let spatial = grad_out.spatial();
        let cpg = self.c / self.groups;
        let n = f::<F>((cpg * spatial) as f64);
        let mut din = FeatureMap::zeros(self.c, grad_out.height, grad_out.width);
        for ch in 0..self.c {
            let mut dg = F::zero();
            let mut db = F::zero();
            for idx in ch * spatial..(ch + 1) * spatial {
                dg = dg + grad_out.data[idx] * cache.xhat.data[idx];
                db = db + grad_out.data[idx];
            }
            grads.gamma[ch] = grads.gamma[ch] + dg;
            grads.beta[ch] = grads.beta[ch] + db;
        }
        for g in 0..self.groups {
            let inv_std = cache.inv_std[g];
            // ghat is the gradient w.r.t. the normalized values.
            let mut sum_g = F::zero();
            let mut sum_gx = F::zero();
            for ch in g * cpg..(g + 1) * cpg {
                let gamma = self.gamma[ch];
                let span = ch * spatial..(ch + 1) * spatial;
                for (&go, &xh) in grad_out.data[span.clone()].iter().zip(&cache.xhat.data[span]) {
                    let ghat = go * gamma;
                    sum_g = sum_g + ghat;
                    sum_gx = sum_gx + ghat * xh;
                }
            }
            let mean_g = sum_g / n;
            let mean_gx = sum_gx / n;
            for ch in g * cpg..(g + 1) * cpg {
                let gamma = self.gamma[ch];
                let span = ch * spatial..(ch + 1) * spatial;
                let gos = &grad_out.data[span.clone()];
                let xhs = &cache.xhat.data[span.clone()];
                let ds = &mut din.data[span];
                for ((&go, &xh), dv) in gos.iter().zip(xhs).zip(ds.iter_mut()) {
                    let ghat = go * gamma;
                    *dv = inv_std * (ghat - mean_g - xh * mean_gx);
                }
            }
        }
        din
    }
}

// ---------------------------------------------------------------------------
// SiLU nonlinearity
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// x * sigmoid(x), elementwise; the cache is the input itself.
pub fn silu_map<F: Float>(input: &FeatureMap<F>) -> FeatureMap<F> {
    FeatureMap {
        channels: input.channels,
        height: input.height,
        width: input.width,
        data: input.data.iter().map(|&x| x * sigmoid(x)).collect(),
    }
}

pub fn silu_map_backward<F: Float>(
    input: &FeatureMap<F>,
    grad_out: &FeatureMap<F>,
) -> FeatureMap<F> {
    FeatureMap {
        channels: input.channels,
        height: input.height,
        width: input.width,
        data: input
            .data
            .iter()
            .zip(grad_out.data.iter())
            .map(|(&x, &g)| {
                let s = sigmoid(x);
                g * s * (F::one() + x * (F::one() - s))
            })
            .collect(),
    }
}

pub fn silu_vec<F: Float>(input: &[F]) -> Vec<F> {
    input.iter().map(|&x| x * sigmoid(x)).collect()
}

pub fn silu_vec_backward<F: Float>(input: &[F], grad_out: &[F]) -> Vec<F> {
    input
        .iter()
        .zip(grad_out.iter())
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (F::one() + x * (F::one() - s))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fully connected layer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub w: Vec<F>,
    pub b: Vec<F>,
    pub in_f: usize,
    pub out_f: usize,
}

#[derive(Clone, Debug)]
pub struct LinearCache<F> {
    input: Vec<F>,
}

impl<F: Float> Linear<F> {
    pub fn init(in_f: usize, out_f: usize, rng: &mut Rng) -> Self {
        Linear {
            w: fan_in_uniform(rng, in_f, out_f * in_f),
            b: fan_in_uniform(rng, in_f, out_f),
            in_f,
            out_f,
        }
    }

    pub fn zeroed(&self) -> Self {
        Linear {
            w: vec![F::zero(); self.w.len()],
            b: vec![F::zero(); self.b.len()],
            in_f: self.in_f,
            out_f: self.out_f,
        }
    }

    pub fn forward(&self, input: &[F]) -> (Vec<F>, LinearCache<F>) {
        assert_eq!(input.len(), self.in_f);
        let mut out = self.b.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_f..(o + 1) * self.in_f];
            let mut acc = F::zero();
            for (wv, xv) in row.iter().zip(input.iter()) {
                acc = acc + *wv * *xv;
            }
            *out_v = *out_v + acc;
        }
        (out, LinearCache { input: input.to_vec() })
    }

    pub fn backward(&self, cache: &LinearCache<F>, grad_out: &[F], grads: &mut Linear<F>) -> Vec<F> {
        let mut din = vec![F::zero(); self.in_f];
        for o in 0..self.out_f {
            let g = grad_out[o];
            grads.b[o] = grads.b[o] + g;
            let wrow = &self.w[o * self.in_f..(o + 1) * self.in_f];
            let grow = &mut grads.w[o * self.in_f..(o + 1) * self.in_f];
            for i in 0..self.in_f {
                grow[i] = grow[i] + g * cache.input[i];
                din[i] = din[i] + wrow[i] * g;
            }
        }
        din
    }
}

// ---------------------------------------------------------------------------
// Linear self-attention
// ---------------------------------------------------------------------------

/// Attention with cost linear in pixel count: queries are softmax-normalized
/// over channels, keys over spatial positions, and values aggregate through
/// the (channels × channels) key-value product. Wrapped as
/// `x + out(attend(norm(x)))`.
#[derive(Clone, Debug)]
pub struct LinearAttention<F> {
    pub norm: GroupNorm<F>,
    /// 1x1 conv producing q, k, v stacked along channels (no bias).
    pub qkv: Conv2d<F>,
    /// 1x1 output projection.
    pub out: Conv2d<F>,
    pub c: usize,
}

#[derive(Clone, Debug)]
pub struct LinearAttentionCache<F> {
    norm: GroupNormCache<F>,
    qkv: Conv2dCache<F>,
    out: Conv2dCache<F>,
    /// Channel-softmaxed queries, [c, n].
    q_s: Vec<F>,
    /// Spatially-softmaxed keys, [c, n].
    k_s: Vec<F>,
    /// Raw values, [c, n].
    v: Vec<F>,
    /// Key-value aggregate, [c, c] indexed [d][e].
    context: Vec<F>,
}

impl<F: Float> LinearAttention<F> {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        LinearAttention {
            norm: GroupNorm::init(1, c),
            qkv: Conv2d::init(c, 3 * c, 1, 1, 0, false, rng),
            out: Conv2d::init(c, c, 1, 1, 0, true, rng),
            c,
        }
    }

    pub fn zeroed(&self) -> Self {
        LinearAttention {
            norm: self.norm.zeroed(),
            qkv: self.qkv.zeroed(),
            out: self.out.zeroed(),
            c: self.c,
        }
    }

    fn scale(&self) -> F {
        f::<F>(1.0) / f::<F>(self.c as f64).sqrt()
    }

    /// The attention core on an already-normalized input: qkv projection,
    /// dual softmax, aggregation, output projection. No residual. Exposed
    /// for the single-location linearity check.
    #[cfg(test)]
    pub fn attend(&self, xn: &FeatureMap<F>) -> FeatureMap<F> {
        self.attend_traced(xn).0
    }

    fn attend_traced(
        &self,
        xn: &FeatureMap<F>,
    ) -> (FeatureMap<F>, (Conv2dCache<F>, Conv2dCache<F>, Vec<F>, Vec<F>, Vec<F>, Vec<F>)) {
        let c = self.c;
        let n = xn.spatial();
        let (qkv_out, qkv_cache) = self.qkv.forward(xn);
        let q_raw = &qkv_out.data[0..c * n];
        let k_raw = &qkv_out.data[c * n..2 * c * n];
        let v = qkv_out.data[2 * c * n..3 * c * n].to_vec();

        // Softmax over channels for each spatial position.
        let mut q_s = vec![F::zero(); c * n];
        for pos in 0..n {
            let mut maxv = F::neg_infinity();
            for d in 0..c {
                maxv = maxv.max(q_raw[d * n + pos]);
            }
            let mut total = F::zero();
            for d in 0..c {
                let e = (q_raw[d * n + pos] - maxv).exp();
                q_s[d * n + pos] = e;
                total = total + e;
            }
            for d in 0..c {
                q_s[d * n + pos] = q_s[d * n + pos] / total;
            }
        }
        // Softmax over spatial positions for each channel.
        let mut k_s = vec![F::zero(); c * n];
        for d in 0..c {
            let row = &k_raw[d * n..(d + 1) * n];
            let maxv = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut total = F::zero();
            for pos in 0..n {
                let e = (row[pos] - maxv).exp();
                k_s[d * n + pos] = e;
                total = total + e;
            }
            for pos in 0..n {
                k_s[d * n + pos] = k_s[d * n + pos] / total;
            }
        }

        // context[d][e] = sum_pos k_s[d, pos] * v[e, pos]
        let mut context = vec![F::zero(); c * c];
        for d in 0..c {
            let krow = &k_s[d * n..(d + 1) * n];
            for e in 0..c {
                context[d * c + e] = dot_lanes(krow, &v[e * n..(e + 1) * n]);
            }
        }
        // core[e, pos] = scale * sum_d context[d][e] * q_s[d, pos]
        let scale = self.scale();
        let mut core = FeatureMap::zeros(c, xn.height, xn.width);
        for e in 0..c {
            for d in 0..c {
                let cv = context[d * c + e] * scale;
                let qrow = &q_s[d * n..(d + 1) * n];
                let orow = &mut core.data[e * n..(e + 1) * n];
                for pos in 0..n {
                    orow[pos] = orow[pos] + cv * qrow[pos];
                }
            }
        }
        let (y, out_cache) = self.out.forward(&core);
        (y, (qkv_cache, out_cache, q_s, k_s, v, context))
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, LinearAttentionCache<F>) {
        let (xn, norm_cache) = self.norm.forward(x);
        let (y, (qkv, out, q_s, k_s, v, context)) = self.attend_traced(&xn);
        let mut res = x.clone();
        res.add_assign(&y);
        (res, LinearAttentionCache { norm: norm_cache, qkv, out, q_s, k_s, v, context })
    }

    pub fn backward(
        &self,
        cache: &LinearAttentionCache<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut LinearAttention<F>,
    ) -> FeatureMap<F> {
        let c = self.c;
        let n = grad_out.spatial();
        let scale = self.scale();

        let d_core = self.out.backward(&cache.out, grad_out, &mut grads.out);

        // core[e, pos] = scale * sum_d context[d][e] q_s[d, pos]
        let mut d_context = vec![F::zero(); c * c];
        let mut d_qs = vec![F::zero(); c * n];
        for d in 0..c {
            let qrow = &cache.q_s[d * n..(d + 1) * n];
            for e in 0..c {
                let grow = &d_core.data[e * n..(e + 1) * n];
                d_context[d * c + e] = dot_lanes(grow, qrow) * scale;
            }
        }
        for d in 0..c {
            let dq = &mut d_qs[d * n..(d + 1) * n];
            for e in 0..c {
                let cv = cache.context[d * c + e] * scale;
                let grow = &d_core.data[e * n..(e + 1) * n];
                for pos in 0..n {
                    dq[pos] = dq[pos] + cv * grow[pos];
                }
            }
        }
        // context[d][e] = sum_pos k_s[d, pos] v[e, pos]
        let mut d_ks = vec![F::zero(); c * n];
        let mut d_v = vec![F::zero(); c * n];
        for d in 0..c {
            let krow = &cache.k_s[d * n..(d + 1) * n];
            let dks = &mut d_ks[d * n..(d + 1) * n];
            for e in 0..c {
                let dc = d_context[d * c + e];
                for (a, &vv) in dks.iter_mut().zip(&cache.v[e * n..(e + 1) * n]) {
                    *a = *a + dc * vv;
                }
            }
            for e in 0..c {
                let dc = d_context[d * c + e];
                for (a, &kv) in d_v[e * n..(e + 1) * n].iter_mut().zip(krow) {
                    *a = *a + dc * kv;
                }
            }
        }
        // Softmax backward: channel-wise for q, spatial for k.
        let mut d_qraw = vec![F::zero(); c * n];
        for pos in 0..n {
            let mut dot = F::zero();
            for d in 0..c {
                dot = dot + cache.q_s[d * n + pos] * d_qs[d * n + pos];
            }
            for d in 0..c {
                let i = d * n + pos;
                d_qraw[i] = cache.q_s[i] * (d_qs[i] - dot);
            }
        }
        let mut d_kraw = vec![F::zero(); c * n];
        for d in 0..c {
            let mut dot = F::zero();
            for pos in 0..n {
                dot = dot + cache.k_s[d * n + pos] * d_ks[d * n + pos];
            }
            for pos in 0..n {
                let i = d * n + pos;
                d_kraw[i] = cache.k_s[i] * (d_ks[i] - dot);
            }
        }

        let mut d_qkv = FeatureMap::zeros(3 * c, grad_out.height, grad_out.width);
        d_qkv.data[0..c * n].copy_from_slice(&d_qraw);
        d_qkv.data[c * n..2 * c * n].copy_from_slice(&d_kraw);
        d_qkv.data[2 * c * n..3 * c * n].copy_from_slice(&d_v);

        let d_xn = self.qkv.backward(&cache.qkv, &d_qkv, &mut grads.qkv);
        let mut din = self.norm.backward(&cache.norm, &d_xn, &mut grads.norm);
        din.add_assign(grad_out); // residual path
        din
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

/// norm -> SiLU -> conv3x3, add a per-channel time projection, then
/// norm -> SiLU -> conv3x3, plus an identity (or 1x1 conv) skip.
#[derive(Clone, Debug)]
pub struct ResBlock<F> {
    pub norm1: GroupNorm<F>,
    pub conv1: Conv2d<F>,
    pub time_proj: Linear<F>,
    pub norm2: GroupNorm<F>,
    pub conv2: Conv2d<F>,
    /// 1x1 projection when in/out channel counts differ.
    pub skip: Option<Conv2d<F>>,
}

#[derive(Clone, Debug)]
pub struct ResBlockCache<F> {
    norm1: GroupNormCache<F>,
    silu1_in: FeatureMap<F>,
    conv1: Conv2dCache<F>,
    time_proj: LinearCache<F>,
    norm2: GroupNormCache<F>,
    silu2_in: FeatureMap<F>,
    conv2: Conv2dCache<F>,
    skip: Option<Conv2dCache<F>>,
}

impl<F: Float> ResBlock<F> {
    pub fn init(in_c: usize, out_c: usize, time_dim: usize, groups: usize, rng: &mut Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::init(groups, in_c),
            conv1: Conv2d::init(in_c, out_c, 3, 1, 1, true, rng),
            time_proj: Linear::init(time_dim, out_c, rng),
            norm2: GroupNorm::init(groups, out_c),
            conv2: Conv2d::init(out_c, out_c, 3, 1, 1, true, rng),
            skip: if in_c == out_c {
                None
            } else {
                Some(Conv2d::init(in_c, out_c, 1, 1, 0, true, rng))
            },
        }
    }

    pub fn zeroed(&self) -> Self {
        ResBlock {
            norm1: self.norm1.zeroed(),
            conv1: self.conv1.zeroed(),
            time_proj: self.time_proj.zeroed(),
            norm2: self.norm2.zeroed(),
            conv2: self.conv2.zeroed(),
            skip: self.skip.as_ref().map(|s| s.zeroed()),
        }
    }

    /// `silu_t` is the already-activated time embedding shared by all
    /// blocks.
    pub fn forward(&self, x: &FeatureMap<F>, silu_t: &[F]) -> (FeatureMap<F>, ResBlockCache<F>) {
        let (n1, norm1_cache) = self.norm1.forward(x);
        let s1 = silu_map(&n1);
        let (c1, conv1_cache) = self.conv1.forward(&s1);
        let (tvec, time_cache) = self.time_proj.forward(silu_t);
        let mut h = c1;
        let spatial = h.spatial();
        for ch in 0..h.channels {
            let add = tvec[ch];
            let base = ch * spatial;
            for v in &mut h.data[base..base + spatial] {
                *v = *v + add;
            }
        }
        let (n2, norm2_cache) = self.norm2.forward(&h);
        let s2 = silu_map(&n2);
        let (c2, conv2_cache) = self.conv2.forward(&s2);
        let (mut out, skip_cache) = match &self.skip {
            Some(conv) => {
                let (sk, cache) = conv.forward(x);
                (sk, Some(cache))
            }
            None => (x.clone(), None),
        };
        out.add_assign(&c2);
        (
            out,
            ResBlockCache {
                norm1: norm1_cache,
                silu1_in: n1,
                conv1: conv1_cache,
                time_proj: time_cache,
                norm2: norm2_cache,
                silu2_in: n2,
                conv2: conv2_cache,
                skip: skip_cache,
            },
        )
    }

    /// Returns (input gradient, gradient w.r.t. the shared activated time
    /// embedding).
    pub fn backward(
        &self,
        cache: &ResBlockCache<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut ResBlock<F>,
    ) -> (FeatureMap<F>, Vec<F>) {
        let d_s2 = self.conv2.backward(&cache.conv2, grad_out, &mut grads.conv2);
        let d_n2 = silu_map_backward(&cache.silu2_in, &d_s2);
        let d_h = self.norm2.backward(&cache.norm2, &d_n2, &mut grads.norm2);

        // The time projection broadcast over space: its gradient is the
        // spatial sum per channel.
        let mut d_tvec = vec![F::zero(); d_h.channels];
        for ch in 0..d_h.channels {
            let base = ch * d_h.spatial();
            let mut acc = F::zero();
            for &g in &d_h.data[base..base + d_h.spatial()] {
                acc = acc + g;
            }
            d_tvec[ch] = acc;
        }
        let d_silu_t = self.time_proj.backward(&cache.time_proj, &d_tvec, &mut grads.time_proj);

        let d_s1 = self.conv1.backward(&cache.conv1, &d_h, &mut grads.conv1);
        let d_n1 = silu_map_backward(&cache.silu1_in, &d_s1);
        let mut din = self.norm1.backward(&cache.norm1, &d_n1, &mut grads.norm1);

        match (&self.skip, &cache.skip) {
            (Some(conv), Some(sk_cache)) => {
                let d_skip = conv.backward(sk_cache, grad_out, grads.skip.as_mut().unwrap());
                din.add_assign(&d_skip);
            }
            _ => din.add_assign(grad_out),
        }
        (din, d_silu_t)
    }
}

// ---------------------------------------------------------------------------
// Sinusoidal time embedding (parameter-free)
// ---------------------------------------------------------------------------

/// Sinusoidal embedding of the (1-based) step index: half sines, half
/// cosines with log-spaced frequencies.
pub fn time_embedding<F: Float>(t: usize, dim: usize) -> Vec<F> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let arg = t as f64 * freq;
        out[i] = f(arg.sin());
        out[half + i] = f(arg.cos());
    }
    out
}
