//! Timestep-conditioned U-shaped convolutional denoiser with a hand-written
//! reverse pass.
//!
//! Layout per level `l` with `c_l` channels:
//!
//! * encoder: conv (stride 2 except at level 0), plus a projection of the
//!   time embedding, SiLU, conv, SiLU. The result is kept as a skip.
//! * bottleneck: conv, SiLU at the coarsest level.
//! * decoder (every level but the coarsest): conv down to `c_l` channels at
//!   the coarse resolution, nearest x2 upsampling, plus skip and time
//!   projection, SiLU, conv, SiLU.
//! * output: conv to one channel.
//!
//! The time embedding is sinusoidal, followed by one dense layer and SiLU.

mod adam;
mod gradcheck;
pub(crate) mod layers;

use rand::Rng;
use rayon::prelude::*;

use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::imgrid::Image2D;
use crate::rng::RngState;

pub use adam::AdamState;
pub use gradcheck::{check_gradients, gradient_check, GradCheckReport};
pub use layers::Scalar;

use layers::{
    add_channel_bias, channel_sums, conv_backward, conv_forward, matvec, silu, silu_back,
    silu_grad, silu_map, upsample2, upsample2_back, ConvGeom, Fmap,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    /// Channels per resolution level, finest first.
    pub channels: Vec<usize>,
    /// Odd square kernel size.
    pub kernel: usize,
    pub t_embed_dim: usize,
    pub time_hidden: usize,
    pub width: usize,
    pub height: usize,
}

impl Arch {
    /// Default network for `width x height` inputs: 3 levels of (16, 32, 64).
    pub fn desk(width: usize, height: usize) -> Self {
        Self {
            channels: vec![16, 32, 64],
            kernel: 3,
            t_embed_dim: 32,
            time_hidden: 64,
            width,
            height,
        }
    }

    /// Two levels of two channels on 8x8 inputs; small enough for exhaustive
    /// finite differences.
    pub fn tiny() -> Self {
        Self {
            channels: vec![2, 2],
            kernel: 3,
            t_embed_dim: 8,
            time_hidden: 4,
            width: 8,
            height: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid(format!(
                "channels must be nonempty and positive, got {:?}",
                self.channels
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.t_embed_dim < 2 || !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "t_embed_dim must be even and >= 2, got {}",
                self.t_embed_dim
            )));
        }
        if self.time_hidden == 0 {
            return Err(Error::invalid("time_hidden must be > 0"));
        }
        let unit = 1usize << (self.levels() - 1);
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(unit) || !self.height.is_multiple_of(unit) {
            return Err(Error::invalid(format!(
                "input {}x{} must be a positive multiple of {unit} for {} levels",
                self.width,
                self.height,
                self.levels()
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let conv = |cin: usize, cout: usize| k2 * cin * cout + cout;
        let dt = self.time_hidden;
        let c = &self.channels;
        let last = c.len() - 1;
        let mut n = self.t_embed_dim * dt + dt;
        for l in 0..c.len() {
            let cin = if l == 0 { 1 } else { c[l - 1] };
            n += conv(cin, c[l]) + c[l] * dt + conv(c[l], c[l]);
        }
        n += conv(c[last], c[last]);
        for l in 0..last {
            n += conv(c[l + 1], c[l]) + c[l] * dt + conv(c[l], c[l]);
        }
        n + conv(c[0], 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    w: usize,
    b: usize,
    geom: ConvGeom,
}

#[derive(Clone, Debug)]
struct Block {
    first: ConvSlot,
    temb: usize,
    second: ConvSlot,
}

/// Tensor indices for every layer, derived from an [`Arch`].
#[derive(Clone, Debug)]
struct Plan {
    arch: Arch,
    specs: Vec<ParamSpec>,
    time_w: usize,
    time_b: usize,
    enc: Vec<Block>,
    mid: ConvSlot,
    /// indexed by level; the coarsest level has no decoder block
    dec: Vec<Block>,
    out: ConvSlot,
}

impl Plan {
    fn new(arch: &Arch) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel;
        let dt = arch.time_hidden;
        let mut reg = Registry { specs: Vec::new(), kernel: k };
        let time_w = reg.dense("time.w", vec![dt, arch.t_embed_dim], arch.t_embed_dim);
        let time_b = reg.bias("time.b", dt, arch.t_embed_dim);
        let c = &arch.channels;
        let last = c.len() - 1;
        let mut enc = Vec::with_capacity(c.len());
        for l in 0..c.len() {
            let (cin, stride) = if l == 0 { (1, 1) } else { (c[l - 1], 2) };
            enc.push(Block {
                first: reg.conv(&format!("enc{l}.in"), cin, c[l], stride),
                temb: reg.dense(&format!("enc{l}.temb"), vec![c[l], dt], dt),
                second: reg.conv(&format!("enc{l}.mid"), c[l], c[l], 1),
            });
        }
        let mid = reg.conv("mid", c[last], c[last], 1);
        let mut dec = Vec::with_capacity(last);
        for l in 0..last {
            dec.push(Block {
                first: reg.conv(&format!("dec{l}.up"), c[l + 1], c[l], 1),
                temb: reg.dense(&format!("dec{l}.temb"), vec![c[l], dt], dt),
                second: reg.conv(&format!("dec{l}.mid"), c[l], c[l], 1),
            });
        }
        let out = reg.conv("out", c[0], 1, 1);
        Ok(Self {
            arch: arch.clone(),
            specs: reg.specs,
            time_w,
            time_b,
            enc,
            mid,
            dec,
            out,
        })
    }

    fn zeros<S: Scalar>(&self) -> Vec<Vec<S>> {
        self.specs.iter().map(|s| vec![S::ZERO; s.numel()]).collect()
    }
}

struct Registry {
    specs: Vec<ParamSpec>,
    kernel: usize,
}

impl Registry {
    fn push(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, is_bias: bool) -> usize {
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape,
            fan_in,
            is_bias,
        });
        self.specs.len() - 1
    }

    fn dense(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        self.push(name, shape, fan_in, false)
    }

    fn bias(&mut self, name: &str, n: usize, fan_in: usize) -> usize {
        self.push(name, vec![n], fan_in, true)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ConvSlot {
        let k = self.kernel;
        let fan_in = k * k * cin;
        let w = self.push(&format!("{name}.w"), vec![k, k, cin, cout], fan_in, false);
        let b = self.bias(&format!("{name}.b"), cout, fan_in);
        ConvSlot {
            w,
            b,
            geom: ConvGeom {
                cin,
                cout,
                kernel: k,
                stride,
            },
        }
    }
}

/// Sinusoidal embedding of an integer timestep: `dim / 2` sines followed by
/// the matching cosines, frequencies geometric from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

struct BlockCache<S> {
    in_dims: (usize, usize),
    col_first: Vec<S>,
    /// pre-activation after the first conv, skip and time terms
    a: Fmap<S>,
    sig_a: Vec<S>,
    col_second: Vec<S>,
    /// pre-activation after the second conv
    b: Fmap<S>,
    sig_b: Vec<S>,
}

struct Cache<S> {
    emb: Vec<S>,
    tpre: Vec<S>,
    temb: Vec<S>,
    enc: Vec<BlockCache<S>>,
    mid_in: (usize, usize),
    col_mid: Vec<S>,
    m: Fmap<S>,
    sig_m: Vec<S>,
    dec: Vec<Option<BlockCache<S>>>,
    col_out: Vec<S>,
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

fn conv_back_slot<S: Scalar>(
    slot: &ConvSlot,
    params: &[Vec<S>],
    grads: &mut [Vec<S>],
    dy: &Fmap<S>,
    col: &[S],
    in_dims: (usize, usize),
    need_input: bool,
) -> Option<Fmap<S>> {
    let (gw, gb) = two_mut(grads, slot.w, slot.b);
    conv_backward(
        dy,
        col,
        in_dims.0,
        in_dims.1,
        &slot.geom,
        &params[slot.w],
        gw,
        gb,
        need_input,
    )
}

/// Gradient of a per-channel time projection added to every pixel.
fn temb_back<S: Scalar>(
    dx: &Fmap<S>,
    proj: &[S],
    gproj: &mut [S],
    dtemb: &mut [S],
    temb: &[S],
) {
    let sums = channel_sums(dx);
    let dt = temb.len();
    for (c, &s) in sums.iter().enumerate() {
        for k in 0..dt {
            gproj[c * dt + k] += s * temb[k];
            dtemb[k] += proj[c * dt + k] * s;
        }
    }
}

fn forward_pass<S: Scalar>(plan: &Plan, p: &[Vec<S>], x: &[S], t: usize) -> (Vec<S>, Cache<S>) {
    let arch = &plan.arch;
    let emb: Vec<S> = timestep_embedding(t, arch.t_embed_dim)
        .into_iter()
        .map(S::from_f64)
        .collect();
    let mut tpre = matvec(&p[plan.time_w], &emb);
    for (v, &b) in tpre.iter_mut().zip(&p[plan.time_b]) {
        *v += b;
    }
    let temb: Vec<S> = tpre.iter().map(|&v| silu(v)).collect();

    let mut cur = Fmap {
        h: arch.height,
        w: arch.width,
        c: 1,
        data: x.to_vec(),
    };
    let mut enc = Vec::with_capacity(plan.enc.len());
    let mut skips = Vec::with_capacity(plan.enc.len());
    for blk in &plan.enc {
        let in_dims = (cur.h, cur.w);
        let (mut a, col_first) = conv_forward(&cur, &blk.first.geom, &p[blk.first.w], &p[blk.first.b]);
        add_channel_bias(&mut a, &matvec(&p[blk.temb], &temb));
        let (act, sig_a) = silu_map(&a);
        let (b, col_second) = conv_forward(&act, &blk.second.geom, &p[blk.second.w], &p[blk.second.b]);
        let (out, sig_b) = silu_map(&b);
        cur = out;
        skips.push(cur.clone());
        enc.push(BlockCache {
            in_dims,
            col_first,
            a,
            sig_a,
            col_second,
            b,
            sig_b,
        });
    }

    let mid_in = (cur.h, cur.w);
    let (m, col_mid) = conv_forward(&cur, &plan.mid.geom, &p[plan.mid.w], &p[plan.mid.b]);
    let (out, sig_m) = silu_map(&m);
    cur = out;

    let mut dec: Vec<Option<BlockCache<S>>> = (0..plan.dec.len()).map(|_| None).collect();
    for l in (0..plan.dec.len()).rev() {
        let blk = &plan.dec[l];
        let in_dims = (cur.h, cur.w);
        let (low, col_first) = conv_forward(&cur, &blk.first.geom, &p[blk.first.w], &p[blk.first.b]);
        let mut a = upsample2(&low);
        for (v, &s) in a.data.iter_mut().zip(&skips[l].data) {
            *v += s;
        }
        add_channel_bias(&mut a, &matvec(&p[blk.temb], &temb));
        let (act, sig_a) = silu_map(&a);
        let (b, col_second) = conv_forward(&act, &blk.second.geom, &p[blk.second.w], &p[blk.second.b]);
        let (out, sig_b) = silu_map(&b);
        cur = out;
        dec[l] = Some(BlockCache {
            in_dims,
            col_first,
            a,
            sig_a,
            col_second,
            b,
            sig_b,
        });
    }

    let (y, col_out) = conv_forward(&cur, &plan.out.geom, &p[plan.out.w], &p[plan.out.b]);
    (
        y.data,
        Cache {
            emb,
            tpre,
            temb,
            enc,
            mid_in,
            col_mid,
            m,
            sig_m,
            dec,
            col_out,
        },
    )
}

fn backward_pass<S: Scalar>(plan: &Plan, p: &[Vec<S>], cache: &Cache<S>, dy: Vec<S>) -> Vec<Vec<S>> {
    let arch = &plan.arch;
    let mut g = plan.zeros::<S>();
    let mut dtemb = vec![S::ZERO; arch.time_hidden];
    let dy = Fmap {
        h: arch.height,
        w: arch.width,
        c: 1,
        data: dy,
    };
    let full = (arch.height, arch.width);
    let mut dcur = conv_back_slot(&plan.out, p, &mut g, &dy, &cache.col_out, full, true)
        .expect("input gradient requested");

    let mut dskips: Vec<Option<Fmap<S>>> = (0..plan.enc.len()).map(|_| None).collect();
    for (l, blk) in plan.dec.iter().enumerate() {
        let bc = cache.dec[l].as_ref().expect("decoder cache filled in forward");
        let db = silu_back(&dcur, &bc.b, &bc.sig_b);
        let ds = conv_back_slot(&blk.second, p, &mut g, &db, &bc.col_second, (bc.a.h, bc.a.w), true)
            .expect("input gradient requested");
        let da = silu_back(&ds, &bc.a, &bc.sig_a);
        temb_back(&da, &p[blk.temb], &mut g[blk.temb], &mut dtemb, &cache.temb);
        let dlow = upsample2_back(&da);
        dskips[l] = Some(da);
        dcur = conv_back_slot(&blk.first, p, &mut g, &dlow, &bc.col_first, bc.in_dims, true)
            .expect("input gradient requested");
    }

    let dm = silu_back(&dcur, &cache.m, &cache.sig_m);
    dcur = conv_back_slot(&plan.mid, p, &mut g, &dm, &cache.col_mid, cache.mid_in, true)
        .expect("input gradient requested");

    for l in (0..plan.enc.len()).rev() {
        let blk = &plan.enc[l];
        let bc = &cache.enc[l];
        if let Some(skip) = dskips[l].take() {
            for (v, s) in dcur.data.iter_mut().zip(skip.data) {
                *v += s;
            }
        }
        let db = silu_back(&dcur, &bc.b, &bc.sig_b);
        let ds = conv_back_slot(&blk.second, p, &mut g, &db, &bc.col_second, (bc.a.h, bc.a.w), true)
            .expect("input gradient requested");
        let da = silu_back(&ds, &bc.a, &bc.sig_a);
        temb_back(&da, &p[blk.temb], &mut g[blk.temb], &mut dtemb, &cache.temb);
        match conv_back_slot(&blk.first, p, &mut g, &da, &bc.col_first, bc.in_dims, l > 0) {
            Some(dx) => dcur = dx,
            None => break,
        }
    }

    let e = cache.emb.len();
    for (i, (&d, &pre)) in dtemb.iter().zip(&cache.tpre).enumerate() {
        let dpre = d * silu_grad(pre);
        g[plan.time_b][i] += dpre;
        for j in 0..e {
            g[plan.time_w][i * e + j] += dpre * cache.emb[j];
        }
    }
    g
}

/// Squared-error sum for one example and the gradient of
/// `scale * sum (pred - eps)^2`.
fn example_grad<S: Scalar>(
    plan: &Plan,
    p: &[Vec<S>],
    x: &[S],
    t: usize,
    eps: &[S],
    scale: f64,
) -> (f64, Vec<Vec<S>>) {
    let (pred, cache) = forward_pass(plan, p, x, t);
    let mut sse = 0.0;
    let dy: Vec<S> = pred
        .iter()
        .zip(eps)
        .map(|(&a, &b)| {
            let r = (a - b).to_f64();
            sse += r * r;
            S::from_f64(2.0 * scale * r)
        })
        .collect();
    let grads = backward_pass(plan, p, &cache, dy);
    (sse, grads)
}

/// Mean squared error over the batch and its gradient; per-example work runs
/// in parallel and is reduced in batch order.
fn batch_loss_grad<S: Scalar>(
    plan: &Plan,
    p: &[Vec<S>],
    batch: &[(Vec<S>, usize, Vec<S>)],
) -> (f64, Vec<Vec<S>>) {
    let n = (batch.len() * plan.arch.width * plan.arch.height) as f64;
    let parts: Vec<(f64, Vec<Vec<S>>)> = batch
        .par_iter()
        .map(|(x, t, eps)| example_grad(plan, p, x, *t, eps, 1.0 / n))
        .collect();
    let mut total = plan.zeros::<S>();
    let mut sse = 0.0;
    for (s, g) in parts {
        sse += s;
        for (acc, part) in total.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    (sse / n, total)
}

/// One training example: noised input, its timestep, and the corruption the
/// network should predict.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub x_t: Image2D,
    pub t: usize,
    pub eps: Image2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn tensors(&self) -> &[Vec<f32>] {
        &self.tensors
    }

    pub fn max_abs(&self) -> f32 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    plan: Plan,
    params: Vec<Vec<f32>>,
}

impl PartialEq for DenoiserModel {
    fn eq(&self, other: &Self) -> bool {
        self.plan.arch == other.plan.arch && self.params == other.params
    }
}

/// Weights uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`, biases zero.
pub fn init_model(arch: &Arch, seed: u64) -> Result<DenoiserModel> {
    let plan = Plan::new(arch)?;
    let mut rng = RngState::new(seed);
    let params = plan
        .specs
        .iter()
        .map(|s| {
            if s.is_bias {
                vec![0.0; s.numel()]
            } else {
                let bound = (6.0 / s.fan_in as f64).sqrt();
                (0..s.numel())
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect()
            }
        })
        .collect();
    Ok(DenoiserModel { plan, params })
}

impl DenoiserModel {
    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_tensors(arch: &Arch, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let plan = Plan::new(arch)?;
        if tensors.len() != plan.specs.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                plan.specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in plan.specs.iter().zip(&tensors) {
            if t.len() != spec.numel() {
                return Err(Error::invalid(format!(
                    "tensor {} has {} values, expected {}",
                    spec.name,
                    t.len(),
                    spec.numel()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter tensor {}", spec.name)));
            }
        }
        Ok(Self { plan, params: tensors })
    }

    pub fn arch(&self) -> &Arch {
        &self.plan.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.plan.specs
    }

    pub fn tensors(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn check_input(&self, img: &Image2D) -> Result<()> {
        let arch = &self.plan.arch;
        if img.dims() != (arch.width, arch.height) {
            return Err(Error::DimensionMismatch {
                expected: (arch.width, arch.height),
                got: img.dims(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x_t: &Image2D, t: usize) -> Result<Image2D> {
        self.check_input(x_t)?;
        let (out, _) = forward_pass(&self.plan, &self.params, x_t.data(), t);
        Image2D::new(self.plan.arch.width, self.plan.arch.height, out)
    }

    /// Mean over batch and pixels of `(eps - eps_theta(x_t, t))^2`, and its
    /// exact gradient.
    pub fn loss_and_grad(&self, batch: &[TrainingExample]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::invalid("loss_and_grad needs a nonempty batch"));
        }
        for ex in batch {
            self.check_input(&ex.x_t)?;
            self.check_input(&ex.eps)?;
        }
        let prepared: Vec<(Vec<f32>, usize, Vec<f32>)> = batch
            .iter()
            .map(|ex| (ex.x_t.data().to_vec(), ex.t, ex.eps.data().to_vec()))
            .collect();
        let (loss, tensors) = batch_loss_grad(&self.plan, &self.params, &prepared);
        Ok((loss, Gradients { tensors }))
    }

    pub fn adam_update(&mut self, grads: &Gradients, state: &mut AdamState) -> Result<()> {
        state.apply(&mut self.params, &grads.tensors)?;
        for (spec, t) in self.plan.specs.iter().zip(&self.params) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter tensor {} after step {}",
                    spec.name,
                    state.step_count()
                )));
            }
        }
        Ok(())
    }

    pub fn new_adam(&self, lr: f64) -> AdamState {
        AdamState::new(&self.params, lr)
    }

    fn params_f64(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|t| t.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

impl EpsModel for DenoiserModel {
    fn predict_eps(&self, x_t: &Image2D, t: usize) -> Result<Image2D> {
        self.forward(x_t, t)
    }
}
