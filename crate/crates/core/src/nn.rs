//! Minimal convolutional layers with hand-written backward passes, and the
//! encoder-decoder used by the denoiser.
//!
//! Tensors are single samples laid out channel-major, then azimuth, then
//! elevation: element `(c, i, j)` sits at `(c * w + i) * h + j`. All
//! trainable weights of a network live in one flat [`ParamStore`] so the
//! optimizer and checkpoint code see a single vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, w: usize, h: usize) -> Self {
        Tensor {
            c,
            w,
            h,
            data: vec![0.0; c * w * h],
        }
    }

    pub fn from_vec(c: usize, w: usize, h: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * w * h {
            return Err(Error::InvalidInput(format!(
                "tensor payload {} does not match {c}x{w}x{h}",
                data.len()
            )));
        }
        Ok(Tensor { c, w, h, data })
    }

    pub fn plane(&self) -> usize {
        self.w * self.h
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    fn same_shape(&self, o: &Tensor) -> bool {
        self.c == o.c && self.w == o.w && self.h == o.h
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Reflect,
    Cyclic,
    Zero,
}

impl Padding {
    /// Source index for padded coordinate `x` in `0..n`, or `None` for a
    /// zero pad.
    fn source(self, x: i64, n: usize) -> Option<usize> {
        let n = n as i64;
        if (0..n).contains(&x) {
            return Some(x as usize);
        }
        match self {
            Padding::Zero => None,
            Padding::Cyclic => Some(x.rem_euclid(n) as usize),
            Padding::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let period = 2 * (n - 1);
                let m = x.rem_euclid(period);
                Some(if m < n { m } else { period - m } as usize)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector with named tensor slices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub data: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.entries.push(ParamEntry {
            name,
            shape,
            offset,
            len,
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// 3×3 convolution, padding 1, stride 1 or 2.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
    w_off: usize,
    b_off: usize,
}

pub struct ConvCache {
    cols: Vec<f64>,
    index: Vec<u32>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

const NO_SOURCE: u32 = u32::MAX;

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, padding: Padding) -> Self {
        let w_off = store.alloc(format!("{name}.weight"), vec![cout, cin, 3, 3]);
        let b_off = store.alloc(format!("{name}.bias"), vec![cout]);
        Conv2d {
            cin,
            cout,
            stride,
            padding,
            w_off,
            b_off,
        }
    }

    fn k(&self) -> usize {
        self.cin * 9
    }

    /// He-normal weights, zero bias.
    pub fn init(&self, params: &mut [f64], seed: u64, tag: u64) {
        let std = (2.0 / self.k() as f64).sqrt();
        let mut r = rng::stream(seed, Domain::Init, tag);
        for v in &mut params[self.w_off..self.w_off + self.cout * self.k()] {
            *v = std * rng::normal(&mut r);
        }
        params[self.b_off..self.b_off + self.cout].fill(0.0);
    }

    pub fn zero(&self, params: &mut [f64]) {
        params[self.w_off..self.w_off + self.cout * self.k()].fill(0.0);
        params[self.b_off..self.b_off + self.cout].fill(0.0);
    }

    fn out_hw(&self, w: usize, h: usize) -> (usize, usize) {
        if self.stride == 1 {
            (w, h)
        } else {
            (w.div_ceil(self.stride), h.div_ceil(self.stride))
        }
    }

    /// For each kernel tap and output position, the flat in-plane index of
    /// the input it reads.
    fn index_table(&self, w: usize, h: usize) -> (Vec<u32>, usize, usize) {
        let (wo, ho) = self.out_hw(w, h);
        let p = wo * ho;
        let mut idx = vec![NO_SOURCE; 9 * p];
        for ki in 0..3 {
            for kj in 0..3 {
                let tap = ki * 3 + kj;
                for oi in 0..wo {
                    let si = self.padding.source((oi * self.stride + ki) as i64 - 1, w);
                    for oj in 0..ho {
                        let sj = self.padding.source((oj * self.stride + kj) as i64 - 1, h);
                        if let (Some(si), Some(sj)) = (si, sj) {
                            idx[tap * p + oi * ho + oj] = (si * h + sj) as u32;
                        }
                    }
                }
            }
        }
        (idx, wo, ho)
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Result<(Tensor, ConvCache)> {
        if x.c != self.cin {
            return Err(Error::InvalidInput(format!(
                "conv expects {} channels, got {}",
                self.cin, x.c
            )));
        }
        let (index, wo, ho) = self.index_table(x.w, x.h);
        let p = wo * ho;
        let k = self.k();
        let mut cols = vec![0.0; k * p];
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for tap in 0..9 {
                let row = &mut cols[(ci * 9 + tap) * p..(ci * 9 + tap + 1) * p];
                let ix = &index[tap * p..(tap + 1) * p];
                for (dst, &s) in row.iter_mut().zip(ix) {
                    if s != NO_SOURCE {
                        *dst = src[s as usize];
                    }
                }
            }
        }
        let mut y = Tensor::zeros(self.cout, wo, ho);
        for (o, b) in params[self.b_off..self.b_off + self.cout].iter().enumerate() {
            y.channel_mut(o).fill(*b);
        }
        let wt = &params[self.w_off..self.w_off + self.cout * k];
        unsafe {
            matrixmultiply::dgemm(
                self.cout, k, p, 1.0,
                wt.as_ptr(), k as isize, 1,
                cols.as_ptr(), p as isize, 1,
                1.0,
                y.data.as_mut_ptr(), p as isize, 1,
            );
        }
        Ok((
            y,
            ConvCache {
                cols,
                index,
                in_shape: (x.c, x.w, x.h),
                out_hw: (wo, ho),
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, params: &[f64], cache: &ConvCache, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let (c, w, h) = cache.in_shape;
        let p = cache.out_hw.0 * cache.out_hw.1;
        let k = self.k();
        debug_assert_eq!(dy.data.len(), self.cout * p);
        {
            let gw = &mut grads[self.w_off..self.w_off + self.cout * k];
            unsafe {
                matrixmultiply::dgemm(
                    self.cout, p, k, 1.0,
                    dy.data.as_ptr(), p as isize, 1,
                    cache.cols.as_ptr(), 1, p as isize,
                    1.0,
                    gw.as_mut_ptr(), k as isize, 1,
                );
            }
        }
        for o in 0..self.cout {
            grads[self.b_off + o] += dy.channel(o).iter().sum::<f64>();
        }
        let wt = &params[self.w_off..self.w_off + self.cout * k];
        let mut dcols = vec![0.0; k * p];
        unsafe {
            matrixmultiply::dgemm(
                k, self.cout, p, 1.0,
                wt.as_ptr(), 1, k as isize,
                dy.data.as_ptr(), p as isize, 1,
                0.0,
                dcols.as_mut_ptr(), p as isize, 1,
            );
        }
        let mut dx = Tensor::zeros(c, w, h);
        for ci in 0..c {
            let dst = dx.channel_mut(ci);
            for tap in 0..9 {
                let row = &dcols[(ci * 9 + tap) * p..(ci * 9 + tap + 1) * p];
                let ix = &cache.index[tap * p..(tap + 1) * p];
                for (g, &s) in row.iter().zip(ix) {
                    if s != NO_SOURCE {
                        dst[s as usize] += g;
                    }
                }
            }
        }
        dx
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    g_off: usize,
    b_off: usize,
}

pub struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(c).max(1);
        if c % groups != 0 {
            return Err(Error::Config(format!("{c} channels do not split into {groups} groups")));
        }
        let g_off = store.alloc(format!("{name}.gamma"), vec![c]);
        let b_off = store.alloc(format!("{name}.beta"), vec![c]);
        Ok(GroupNorm {
            c,
            groups,
            g_off,
            b_off,
        })
    }

    pub fn init(&self, params: &mut [f64]) {
        params[self.g_off..self.g_off + self.c].fill(1.0);
        params[self.b_off..self.b_off + self.c].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, NormCache) {
        let cpg = self.c / self.groups;
        let p = x.plane();
        let n = (cpg * p) as f64;
        let mut xhat = x.clone();
        let mut y = Tensor::zeros(x.c, x.w, x.h);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = g * cpg * p..(g + 1) * cpg * p;
            let seg = &x.data[span.clone()];
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + GN_EPS).sqrt();
            inv_std.push(is);
            for v in &mut xhat.data[span] {
                *v = (*v - mean) * is;
            }
        }
        for ch in 0..self.c {
            let (ga, be) = (params[self.g_off + ch], params[self.b_off + ch]);
            for (o, v) in y.channel_mut(ch).iter_mut().zip(xhat.channel(ch)) {
                *o = ga * v + be;
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, params: &[f64], cache: &NormCache, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let cpg = self.c / self.groups;
        let p = dy.plane();
        let n = (cpg * p) as f64;
        let mut dxhat = Tensor::zeros(dy.c, dy.w, dy.h);
        for ch in 0..self.c {
            let ga = params[self.g_off + ch];
            let mut sg = 0.0;
            let mut sb = 0.0;
            for ((d, xh), out) in dy
                .channel(ch)
                .iter()
                .zip(cache.xhat.channel(ch))
                .zip(dxhat.channel_mut(ch).iter_mut())
            {
                sg += d * xh;
                sb += d;
                *out = d * ga;
            }
            grads[self.g_off + ch] += sg;
            grads[self.b_off + ch] += sb;
        }
        let mut dx = dxhat.clone();
        for g in 0..self.groups {
            let span = g * cpg * p..(g + 1) * cpg * p;
            let dh = &dxhat.data[span.clone()];
            let xh = &cache.xhat.data[span.clone()];
            let s1: f64 = dh.iter().sum();
            let s2: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
            let is = cache.inv_std[g];
            for ((o, a), b) in dx.data[span].iter_mut().zip(dh).zip(xh) {
                *o = is / n * (n * a - s1 - b * s2);
            }
        }
        dx
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_forward(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|v| v * sigmoid(*v)).collect(),
        ..*x
    }
}

/// Backward of SiLU given its input `x`.
pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(v, d)| {
                let s = sigmoid(*v);
                d * (s + v * s * (1.0 - s))
            })
            .collect(),
        ..*x
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_forward(x: &Tensor) -> Tensor {
    let (w2, h2) = (2 * x.w, 2 * x.h);
    let mut y = Tensor::zeros(x.c, w2, h2);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for i in 0..w2 {
            for j in 0..h2 {
                dst[i * h2 + j] = src[(i / 2) * x.h + j / 2];
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &Tensor) -> Tensor {
    let (w, h) = (dy.w / 2, dy.h / 2);
    let mut dx = Tensor::zeros(dy.c, w, h);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..dy.w {
            for j in 0..dy.h {
                dst[(i / 2) * h + j / 2] += src[i * dy.h + j];
            }
        }
    }
    dx
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.w == b.w && a.h == b.h);
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        w: a.w,
        h: a.h,
        data,
    }
}

pub fn split(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let cut = ca * x.plane();
    (
        Tensor {
            c: ca,
            w: x.w,
            h: x.h,
            data: x.data[..cut].to_vec(),
        },
        Tensor {
            c: x.c - ca,
            w: x.w,
            h: x.h,
            data: x.data[cut..].to_vec(),
        },
    )
}

/// Conv, group norm, SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

pub struct BlockCache {
    conv: ConvCache,
    norm: NormCache,
    pre_act: Tensor,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
        padding: Padding,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, stride, padding),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout, groups)?,
        })
    }

    fn init(&self, params: &mut [f64], seed: u64, tag: u64) {
        self.conv.init(params, seed, tag);
        self.norm.init(params);
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (c, conv) = self.conv.forward(params, x)?;
        let (n, norm) = self.norm.forward(params, &c);
        let y = silu_forward(&n);
        Ok((
            y,
            BlockCache {
                conv,
                norm,
                pre_act: n,
            },
        ))
    }

    pub fn backward(&self, params: &[f64], cache: &BlockCache, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let dn = silu_backward(&cache.pre_act, dy);
        let dc = self.norm.backward(params, &cache.norm, &dn, grads);
        self.conv.backward(params, &cache.conv, &dc, grads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub groups: usize,
    pub padding: Padding,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 12,
            widths: [32, 64, 128],
            groups: 8,
            padding: Padding::Reflect,
        }
    }
}

/// Three-level encoder-decoder with skip connections and a single-channel
/// linear head.
#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    enc1a: ConvBlock,
    enc1b: ConvBlock,
    down1: ConvBlock,
    enc2: ConvBlock,
    down2: ConvBlock,
    mid: ConvBlock,
    up2: ConvBlock,
    dec2: ConvBlock,
    up1: ConvBlock,
    dec1: ConvBlock,
    head: Conv2d,
}

pub struct UNetCache {
    enc1a: BlockCache,
    enc1b: BlockCache,
    down1: BlockCache,
    enc2: BlockCache,
    down2: BlockCache,
    mid: BlockCache,
    up2: BlockCache,
    dec2: BlockCache,
    up1: BlockCache,
    dec1: BlockCache,
    head: ConvCache,
}

impl UNet {
    /// Build the layer graph and its parameter layout (all zeros).
    pub fn new(cfg: UNetConfig) -> Result<(Self, ParamStore)> {
        let [c1, c2, c3] = cfg.widths;
        if cfg.in_channels == 0 || c1 == 0 || c2 == 0 || c3 == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        let g = cfg.groups;
        let pd = cfg.padding;
        let mut s = ParamStore::default();
        let net = UNet {
            enc1a: ConvBlock::new(&mut s, "enc1a", cfg.in_channels, c1, 1, g, pd)?,
            enc1b: ConvBlock::new(&mut s, "enc1b", c1, c1, 1, g, pd)?,
            down1: ConvBlock::new(&mut s, "down1", c1, c2, 2, g, pd)?,
            enc2: ConvBlock::new(&mut s, "enc2", c2, c2, 1, g, pd)?,
            down2: ConvBlock::new(&mut s, "down2", c2, c3, 2, g, pd)?,
            mid: ConvBlock::new(&mut s, "mid", c3, c3, 1, g, pd)?,
            up2: ConvBlock::new(&mut s, "up2", c3, c2, 1, g, pd)?,
            dec2: ConvBlock::new(&mut s, "dec2", 2 * c2, c2, 1, g, pd)?,
            up1: ConvBlock::new(&mut s, "up1", c2, c1, 1, g, pd)?,
            dec1: ConvBlock::new(&mut s, "dec1", 2 * c1, c1, 1, g, pd)?,
            head: Conv2d::new(&mut s, "head", c1, 1, 1, pd),
            cfg,
        };
        Ok((net, s))
    }

    fn blocks(&self) -> [&ConvBlock; 10] {
        [
            &self.enc1a, &self.enc1b, &self.down1, &self.enc2, &self.down2, &self.mid,
            &self.up2, &self.dec2, &self.up1, &self.dec1,
        ]
    }

    /// Seeded initialization; the head starts at zero so the network output
    /// is identically 0.
    pub fn init(&self, params: &mut [f64], seed: u64) {
        for (k, b) in self.blocks().iter().enumerate() {
            b.init(params, seed, k as u64);
        }
        self.head.zero(params);
    }

    /// Random head, for tests that need a non-trivial output.
    pub fn init_head(&self, params: &mut [f64], seed: u64) {
        self.head.init(params, seed, 99);
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.cfg.in_channels {
            return Err(Error::InvalidInput(format!(
                "network expects {} input channels, got {}",
                self.cfg.in_channels, x.c
            )));
        }
        if x.w % 4 != 0 || x.h % 4 != 0 || x.w == 0 || x.h == 0 {
            return Err(Error::InvalidInput(format!(
                "grid {}x{} must have both sides divisible by 4",
                x.w, x.h
            )));
        }
        Ok(())
    }

    pub fn forward(&self, p: &[f64], x: &Tensor) -> Result<(Tensor, UNetCache)> {
        self.check_input(x)?;
        let (a, enc1a) = self.enc1a.forward(p, x)?;
        let (s1, enc1b) = self.enc1b.forward(p, &a)?;
        let (b, down1) = self.down1.forward(p, &s1)?;
        let (s2, enc2) = self.enc2.forward(p, &b)?;
        let (c, down2) = self.down2.forward(p, &s2)?;
        let (m, mid) = self.mid.forward(p, &c)?;
        let (u2, up2) = self.up2.forward(p, &upsample_forward(&m))?;
        let (d2, dec2) = self.dec2.forward(p, &concat(&u2, &s2))?;
        let (u1, up1) = self.up1.forward(p, &upsample_forward(&d2))?;
        let (d1, dec1) = self.dec1.forward(p, &concat(&u1, &s1))?;
        let (y, head) = self.head.forward(p, &d1)?;
        Ok((
            y,
            UNetCache {
                enc1a,
                enc1b,
                down1,
                enc2,
                down2,
                mid,
                up2,
                dec2,
                up1,
                dec1,
                head,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], cache: &UNetCache, dy: &Tensor, g: &mut [f64]) -> Tensor {
        let c1 = self.cfg.widths[0];
        let c2 = self.cfg.widths[1];
        let dd1 = self.head.backward(p, &cache.head, dy, g);
        let dcat1 = self.dec1.backward(p, &cache.dec1, &dd1, g);
        let (du1, mut ds1) = split(&dcat1, c1);
        let dup1 = self.up1.backward(p, &cache.up1, &du1, g);
        let dd2 = upsample_backward(&dup1);
        let dcat2 = self.dec2.backward(p, &cache.dec2, &dd2, g);
        let (du2, mut ds2) = split(&dcat2, c2);
        let dup2 = self.up2.backward(p, &cache.up2, &du2, g);
        let dm = upsample_backward(&dup2);
        let dc = self.mid.backward(p, &cache.mid, &dm, g);
        let db2 = self.down2.backward(p, &cache.down2, &dc, g);
        add_into(&mut ds2, &db2);
        let db = self.enc2.backward(p, &cache.enc2, &ds2, g);
        let ds1b = self.down1.backward(p, &cache.down1, &db, g);
        add_into(&mut ds1, &ds1b);
        let da = self.enc1b.backward(p, &cache.enc1b, &ds1, g);
        self.enc1a.backward(p, &cache.enc1a, &da, g)
    }
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    debug_assert!(a.same_shape(b));
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

/// Fixed multi-scale feature stack: three stride-2 convolutions with SiLU,
/// seeded random weights that never change.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    convs: Vec<Conv2d>,
    params: ParamStore,
    pub seed: u64,
}

pub struct FeatureCache {
    convs: Vec<ConvCache>,
    pre_act: Vec<Tensor>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, channels: [usize; 3], padding: Padding) -> Self {
        let mut params = ParamStore::default();
        let mut convs = Vec::new();
        let mut cin = 1;
        for (k, &c) in channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("feat{k}"), cin, c, 2, padding));
            cin = c;
        }
        for (k, c) in convs.iter().enumerate() {
            c.init(&mut params.data, rng::mix(&[seed, 0xfea7]), k as u64);
        }
        FeatureExtractor {
            convs,
            params,
            seed,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params.data
    }

    /// Outputs of the three stages.
    pub fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, FeatureCache)> {
        let mut outs = Vec::with_capacity(3);
        let mut cache = FeatureCache {
            convs: Vec::new(),
            pre_act: Vec::new(),
        };
        let mut cur = x.clone();
        for c in &self.convs {
            let (z, cc) = c.forward(&self.params.data, &cur)?;
            cur = silu_forward(&z);
            outs.push(cur.clone());
            cache.convs.push(cc);
            cache.pre_act.push(z);
        }
        Ok((outs, cache))
    }

    /// Gradient w.r.t. the input given gradients w.r.t. every stage output.
    pub fn backward(&self, cache: &FeatureCache, douts: &[Tensor]) -> Tensor {
        let mut scratch = vec![0.0; self.params.len()];
        let mut carry: Option<Tensor> = None;
        for s in (0..self.convs.len()).rev() {
            let mut d = douts[s].clone();
            if let Some(c) = carry.take() {
                add_into(&mut d, &c);
            }
            let dz = silu_backward(&cache.pre_act[s], &d);
            carry = Some(self.convs[s].backward(&self.params.data, &cache.convs[s], &dz, &mut scratch));
        }
        carry.expect("extractor has at least one stage")
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn random_tensor(c: usize, w: usize, h: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Domain::Training, 0);
        Tensor {
            c,
            w,
            h,
            data: (0..c * w * h).map(|_| rng::normal(&mut r)).collect(),
        }
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Checks `dL/dx` and `dL/dparams` of `L = <f(x; p), r>` against
    /// central differences on a subset of coordinates.
    pub fn check_layer(
        params: &[f64],
        x: &Tensor,
        f: &dyn Fn(&[f64], &Tensor) -> Tensor,
        b: &dyn Fn(&[f64], &Tensor, &mut [f64]) -> Tensor,
        seed: u64,
    ) -> f64 {
        let y = f(params, x);
        let r = random_tensor(y.c, y.w, y.h, seed);
        let mut g = vec![0.0; params.len()];
        let dx = b(params, &r, &mut g);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        let step = (x.data.len() / 17).max(1);
        for k in (0..x.data.len()).step_by(step) {
            let mut xp = x.clone();
            xp.data[k] += eps;
            let mut xm = x.clone();
            xm.data[k] -= eps;
            let fd = (dot(&f(params, &xp), &r) - dot(&f(params, &xm), &r)) / (2.0 * eps);
            worst = worst.max(rel_err(fd, dx.data[k]));
        }
        let step = (params.len() / 23).max(1);
        for k in (0..params.len()).step_by(step) {
            let mut pp = params.to_vec();
            pp[k] += eps;
            let mut pm = params.to_vec();
            pm[k] -= eps;
            let fd = (dot(&f(&pp, x), &r) - dot(&f(&pm, x), &r)) / (2.0 * eps);
            worst = worst.max(rel_err(fd, g[k]));
        }
        worst
    }

    fn conv_fixture(stride: usize, padding: Padding) -> (Conv2d, Vec<f64>) {
        let mut s = ParamStore::default();
        let c = Conv2d::new(&mut s, "c", 3, 4, stride, padding);
        c.init(&mut s.data, 7, 0);
        for (k, v) in s.data.iter_mut().enumerate().skip(c.b_off) {
            *v = 0.1 * k as f64;
        }
        (c, s.data)
    }

    #[test]
    fn padding_sources() {
        assert_eq!(Padding::Reflect.source(-1, 5), Some(1));
        assert_eq!(Padding::Reflect.source(5, 5), Some(3));
        assert_eq!(Padding::Cyclic.source(-1, 5), Some(4));
        assert_eq!(Padding::Cyclic.source(5, 5), Some(0));
        assert_eq!(Padding::Zero.source(-1, 5), None);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (c, p) = conv_fixture(1, Padding::Zero);
        let x = random_tensor(3, 5, 4, 1);
        let (y, _) = c.forward(&p, &x).unwrap();
        for o in 0..4 {
            for i in 0..5 {
                for j in 0..4 {
                    let mut acc = p[c.b_off + o];
                    for ci in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (si, sj) = (i as i64 + ki as i64 - 1, j as i64 + kj as i64 - 1);
                                if si < 0 || sj < 0 || si >= 5 || sj >= 4 {
                                    continue;
                                }
                                acc += p[c.w_off + ((o * 3 + ci) * 3 + ki) * 3 + kj]
                                    * x.data[(ci * 5 + si as usize) * 4 + sj as usize];
                            }
                        }
                    }
                    assert!((y.data[(o * 5 + i) * 4 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (stride, pad) in [
            (1, Padding::Reflect),
            (2, Padding::Reflect),
            (1, Padding::Cyclic),
            (2, Padding::Zero),
        ] {
            let (c, p) = conv_fixture(stride, pad);
            let x = random_tensor(3, 8, 8, 2);
            let err = check_layer(
                &p,
                &x,
                &|p, x| c.forward(p, x).unwrap().0,
                &|p, dy, g| {
                    let (_, cache) = c.forward(p, &x).unwrap();
                    c.backward(p, &cache, dy, g)
                },
                3,
            );
            assert!(err <= 1e-4, "stride {stride} {pad:?}: {err}");
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut s = ParamStore::default();
        let gn = GroupNorm::new(&mut s, "gn", 4, 2).unwrap();
        for (k, v) in s.data.iter_mut().enumerate() {
            *v = 0.5 + 0.1 * k as f64;
        }
        let x = random_tensor(4, 8, 8, 4);
        let err = check_layer(
            &s.data,
            &x,
            &|p, x| gn.forward(p, x).0,
            &|p, dy, g| {
                let (_, cache) = gn.forward(p, &x);
                gn.backward(p, &cache, dy, g)
            },
            5,
        );
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn group_norm_normalizes() {
        let mut s = ParamStore::default();
        let gn = GroupNorm::new(&mut s, "gn", 4, 2).unwrap();
        gn.init(&mut s.data);
        let x = random_tensor(4, 6, 6, 9);
        let (y, _) = gn.forward(&s.data, &x);
        let seg = &y.data[..72];
        let mean = seg.iter().sum::<f64>() / 72.0;
        let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 72.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn silu_upsample_concat_gradients() {
        let x = random_tensor(2, 8, 8, 6);
        let none: Vec<f64> = Vec::new();
        let err = check_layer(&none, &x, &|_, x| silu_forward(x), &|_, dy, _| silu_backward(&x, dy), 7);
        assert!(err <= 1e-4, "silu {err}");
        let err = check_layer(&none, &x, &|_, x| upsample_forward(x), &|_, dy, _| upsample_backward(dy), 8);
        assert!(err <= 1e-4, "upsample {err}");
        let other = random_tensor(3, 8, 8, 10);
        let err = check_layer(
            &none,
            &x,
            &|_, x| concat(x, &other),
            &|_, dy, _| split(dy, 2).0,
            11,
        );
        assert!(err <= 1e-4, "concat {err}");
    }

    fn small_net() -> (UNet, Vec<f64>) {
        let (net, mut s) = UNet::new(UNetConfig {
            in_channels: 3,
            widths: [4, 8, 8],
            groups: 2,
            padding: Padding::Reflect,
        })
        .unwrap();
        net.init(&mut s.data, 1);
        net.init_head(&mut s.data, 2);
        (net, s.data)
    }

    #[test]
    fn unet_gradients() {
        let (net, p) = small_net();
        let x = random_tensor(3, 8, 8, 12);
        let err = check_layer(
            &p,
            &x,
            &|p, x| net.forward(p, x).unwrap().0,
            &|p, dy, g| {
                let (_, cache) = net.forward(p, &x).unwrap();
                net.backward(p, &cache, dy, g)
            },
            13,
        );
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn unet_zero_head_outputs_zero() {
        let (net, mut s) = UNet::new(UNetConfig {
            in_channels: 3,
            widths: [4, 8, 8],
            groups: 2,
            padding: Padding::Reflect,
        })
        .unwrap();
        net.init(&mut s.data, 1);
        let (y, _) = net.forward(&s.data, &random_tensor(3, 8, 8, 1)).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unet_rejects_bad_shapes() {
        let (net, p) = small_net();
        assert!(net.forward(&p, &random_tensor(2, 8, 8, 0)).is_err());
        assert!(net.forward(&p, &random_tensor(3, 6, 8, 0)).is_err());
    }

    #[test]
    fn default_parameter_budget() {
        let (_, s) = UNet::new(UNetConfig::default()).unwrap();
        assert!(s.len() <= 500_000, "{}", s.len());
    }

    #[test]
    fn cyclic_net_is_shift_equivariant() {
        let (net, mut s) = UNet::new(UNetConfig {
            in_channels: 2,
            widths: [4, 8, 8],
            groups: 2,
            padding: Padding::Cyclic,
        })
        .unwrap();
        net.init(&mut s.data, 3);
        net.init_head(&mut s.data, 4);
        let x = random_tensor(2, 8, 8, 5);
        // shift by 4 cells so both stride-2 stages stay aligned
        let shift = |t: &Tensor, di: usize| {
            let mut o = t.clone();
            for c in 0..t.c {
                for i in 0..t.w {
                    for j in 0..t.h {
                        o.data[(c * t.w + (i + di) % t.w) * t.h + j] = t.data[(c * t.w + i) * t.h + j];
                    }
                }
            }
            o
        };
        let (y, _) = net.forward(&s.data, &x).unwrap();
        let (ys, _) = net.forward(&s.data, &shift(&x, 4)).unwrap();
        let want = shift(&y, 4);
        for (a, b) in ys.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn extractor_is_fixed_and_differentiable() {
        let f = FeatureExtractor::new(5, [4, 6, 8], Padding::Reflect);
        let g = FeatureExtractor::new(5, [4, 6, 8], Padding::Reflect);
        assert_eq!(f.params(), g.params());
        let x = random_tensor(1, 16, 16, 3);
        let (outs, _) = f.forward(&x).unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!((outs[2].c, outs[2].w, outs[2].h), (8, 2, 2));
        let rs: Vec<Tensor> = outs
            .iter()
            .enumerate()
            .map(|(k, o)| random_tensor(o.c, o.w, o.h, 40 + k as u64))
            .collect();
        let loss = |x: &Tensor| {
            let (o, _) = f.forward(x).unwrap();
            o.iter().zip(&rs).map(|(a, b)| dot(a, b)).sum::<f64>()
        };
        let (_, cache) = f.forward(&x).unwrap();
        let dx = f.backward(&cache, &rs);
        for k in (0..x.data.len()).step_by(13) {
            let mut xp = x.clone();
            xp.data[k] += 1e-6;
            let mut xm = x.clone();
            xm.data[k] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!(rel_err(fd, dx.data[k]) <= 1e-4);
        }
    }
}
