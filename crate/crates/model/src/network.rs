//! The conditioned residual network, its loss and its reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{check_lead, ModelConfig, INITIAL_FOLD, LEAD_ROWS};
use crate::error::{ModelError, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    conv_backward, conv_forward, crop, crop_backward, depth_to_space, relu, relu_backward, softmax, space_to_depth,
    upsample, upsample_backward, Tensor,
};

/// Name, shape and position of one parameter tensor in the flat store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    FanIn(usize),
    Normal(f64),
}

#[derive(Default)]
struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    inits: Vec<Init>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let info = TensorInfo { name, shape, offset };
        self.total += info.len();
        self.tensors.push(info);
        self.inits.push(init);
        offset
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Conv {
        let fan_in = k * k * cin;
        let w = self.add(format!("{name}.weight"), vec![k, k, cin, cout], Init::FanIn(fan_in));
        let b = self.add(format!("{name}.bias"), vec![cout], Init::Zeros);
        Conv { w, b, k, cin, cout }
    }

    fn film(&mut self, name: &str, c: usize, e: usize) -> Film {
        let proj = 0.01;
        let wg = self.add(format!("{name}.scale.weight"), vec![c, e], Init::Normal(proj));
        let bg = self.add(format!("{name}.scale.bias"), vec![c], Init::Ones);
        let wb = self.add(format!("{name}.shift.weight"), vec![c, e], Init::Normal(proj));
        let bb = self.add(format!("{name}.shift.bias"), vec![c], Init::Zeros);
        Film { wg, bg, wb, bb, c, e }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    k: usize,
    cin: usize,
    cout: usize,
}

impl Conv {
    fn wlen(&self) -> usize {
        self.k * self.k * self.cin * self.cout
    }

    fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        conv_forward(x, self.k, self.cout, &p[self.w..self.w + self.wlen()], &p[self.b..self.b + self.cout])
    }

    fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], d: &Tensor<T>, cols: &[T], need: bool) -> Option<Tensor<T>> {
        let (gw, gb) = split_two(g, self.w, self.wlen(), self.b, self.cout);
        conv_backward(d, cols, self.k, self.cin, &p[self.w..self.w + self.wlen()], gw, gb, need)
    }
}

/// Two disjoint mutable windows of the gradient store.
fn split_two<T>(g: &mut [T], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [T], &mut [T]) {
    if a < b {
        let (lo, hi) = g.split_at_mut(b);
        (&mut lo[a..a + alen], &mut hi[..blen])
    } else {
        let (lo, hi) = g.split_at_mut(a);
        (&mut hi[..alen], &mut lo[b..b + blen])
    }
}

/// Per-channel scale and shift projected from the lead embedding.
#[derive(Clone, Copy, Debug)]
struct Film {
    wg: usize,
    bg: usize,
    wb: usize,
    bb: usize,
    c: usize,
    e: usize,
}

impl Film {
    fn coefficients<T: Scalar>(&self, p: &[T], emb: &[T]) -> (Vec<T>, Vec<T>) {
        let proj = |w: usize, b: usize| -> Vec<T> {
            (0..self.c)
                .map(|ch| {
                    let row = &p[w + ch * self.e..w + (ch + 1) * self.e];
                    row.iter().zip(emb).fold(p[b + ch], |a, (&x, &y)| a + x * y)
                })
                .collect()
        };
        (proj(self.wg, self.bg), proj(self.wb, self.bb))
    }

    fn forward<T: Scalar>(&self, p: &[T], emb: &[T], x: &Tensor<T>) -> Tensor<T> {
        let (gamma, beta) = self.coefficients(p, emb);
        apply_film(x, &gamma, &beta)
    }

    /// Accumulates parameter and embedding gradients; returns the input
    /// gradient.
    fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], emb: &[T], demb: &mut [T], x: &Tensor<T>, d: &Tensor<T>) -> Tensor<T> {
        let (gamma, _) = self.coefficients(p, emb);
        let mut dgamma = vec![T::zero(); self.c];
        let mut dbeta = vec![T::zero(); self.c];
        let mut dx = d.clone();
        for (i, (gx, &xv)) in dx.data.iter_mut().zip(&x.data).enumerate() {
            let ch = i % self.c;
            let go = *gx;
            dgamma[ch] = dgamma[ch] + go * xv;
            dbeta[ch] = dbeta[ch] + go;
            *gx = go * gamma[ch];
        }
        for (w, b, dv) in [(self.wg, self.bg, &dgamma), (self.wb, self.bb, &dbeta)] {
            for ch in 0..self.c {
                g[b + ch] = g[b + ch] + dv[ch];
                for j in 0..self.e {
                    let idx = w + ch * self.e + j;
                    g[idx] = g[idx] + dv[ch] * emb[j];
                    demb[j] = demb[j] + dv[ch] * p[idx];
                }
            }
        }
        dx
    }
}

/// `gamma ⊙ x + beta`, broadcast over space.
pub fn apply_film<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    for px in out.data.chunks_exact_mut(x.c) {
        for ((v, &g), &b) in px.iter_mut().zip(gamma).zip(beta) {
            *v = g * *v + b;
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    film: Film,
    conv2: Conv,
    proj: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Head {
    conv: Conv,
    upsample: usize,
}

/// Parameter layout and wiring of a network for one [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    tensors: Vec<TensorInfo>,
    inits: Vec<Init>,
    total: usize,
    embed: usize,
    film_in: Film,
    stages: Vec<Vec<Block>>,
    film_out: Film,
    heads: Vec<Head>,
}

struct BlockCache<T> {
    input: Tensor<T>,
    cols1: Vec<T>,
    a1: Tensor<T>,
    r1: Tensor<T>,
    cols2: Vec<T>,
    cols_proj: Option<Vec<T>>,
}

struct HeadCache<T> {
    cols: Vec<T>,
}

/// Intermediate values kept for the reverse pass.
pub struct Trace<T> {
    row: usize,
    input: Tensor<T>,
    blocks: Vec<Vec<BlockCache<T>>>,
    trunk: Tensor<T>,
    trunk_act: Tensor<T>,
    shared: Tensor<T>,
    heads: Vec<HeadCache<T>>,
    /// Per-head softmax outputs.
    pub probs: Vec<Tensor<T>>,
}

/// Target class per pixel with a validity mask, for one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadTarget<'a> {
    pub classes: &'a [u8],
    pub mask: &'a [bool],
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Network> {
        config.validate()?;
        let mut b = LayoutBuilder::default();
        let e = config.embed_dim;
        let embed = b.add("lead_embedding".into(), vec![LEAD_ROWS, e], Init::Normal(0.1));
        let film_in = b.film("input_film", config.input_channels, e);
        let mut cin = config.input_channels * INITIAL_FOLD * INITIAL_FOLD;
        let mut stages = Vec::new();
        for (s, &cout) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for k in 0..config.blocks_per_stage {
                let name = format!("stage{s}.block{k}");
                let conv1 = b.conv(&format!("{name}.conv1"), config.kernel, cin, cout);
                let film = b.film(&format!("{name}.film"), cout, e);
                let conv2 = b.conv(&format!("{name}.conv2"), config.kernel, cout, cout);
                let proj = (cin != cout).then(|| b.conv(&format!("{name}.skip"), 1, cin, cout));
                blocks.push(Block { conv1, film, conv2, proj });
                cin = cout;
            }
            stages.push(blocks);
        }
        let film_out = b.film("output_film", cin, e);
        let heads = config
            .heads
            .iter()
            .map(|h| Head { conv: b.conv(&format!("head.{}", h.name), config.head_kernel, cin, h.bins), upsample: h.upsample })
            .collect();
        Ok(Network {
            config: config.clone(),
            tensors: b.tensors,
            inits: b.inits,
            total: b.total,
            embed,
            film_in,
            stages,
            film_out,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Seeded initial parameters.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::with_capacity(self.total);
        for (info, init) in self.tensors.iter().zip(&self.inits) {
            let n = info.len();
            match *init {
                Init::Zeros => p.extend(std::iter::repeat(T::zero()).take(n)),
                Init::Ones => p.extend(std::iter::repeat(T::one()).take(n)),
                Init::FanIn(fan_in) => {
                    let a = (3.0 / fan_in as f64).sqrt();
                    p.extend((0..n).map(|_| T::of(rng.gen_range(-a..a))));
                }
                Init::Normal(sd) => {
                    let d = Normal::new(0.0, sd).expect("positive std");
                    p.extend((0..n).map(|_| T::of(d.sample(&mut rng))));
                }
            }
        }
        p
    }

    pub fn embed_lead<'a, T: Scalar>(&self, params: &'a [T], minutes: u32) -> Result<&'a [T]> {
        let row = check_lead(minutes)?;
        let e = self.config.embed_dim;
        Ok(&params[self.embed + row * e..self.embed + (row + 1) * e])
    }

    fn check_input<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Result<()> {
        if params.len() != self.total {
            return Err(ModelError::shape("parameters", format!("{} values, layout needs {}", params.len(), self.total)));
        }
        let c = &self.config;
        if x.shape() != (c.input_height, c.input_width, c.input_channels) {
            return Err(ModelError::shape(
                "input",
                format!(
                    "got {:?}, expected ({}, {}, {})",
                    x.shape(),
                    c.input_height,
                    c.input_width,
                    c.input_channels
                ),
            ));
        }
        Ok(())
    }

    /// Per-head bin probabilities for one input and lead.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>, lead_min: u32) -> Result<Vec<Tensor<T>>> {
        Ok(self.trace(params, x, lead_min)?.probs)
    }

    /// Forward pass that keeps what [`Network::backward`] needs.
    pub fn trace<T: Scalar>(&self, params: &[T], x: &Tensor<T>, lead_min: u32) -> Result<Trace<T>> {
        self.check_input(params, x)?;
        let p = params;
        let emb = self.embed_lead(p, lead_min)?;
        let row = lead_min as usize;
        let mut h = space_to_depth(&self.film_in.forward(p, emb, x), INITIAL_FOLD);
        let mut block_caches = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            let mut caches = Vec::with_capacity(blocks.len());
            for blk in blocks {
                let (a1, cols1) = blk.conv1.forward(p, &h);
                let r1 = relu(&blk.film.forward(p, emb, &a1));
                let (mut out, cols2) = blk.conv2.forward(p, &r1);
                let cols_proj = match &blk.proj {
                    Some(pr) => {
                        let (s, cols) = pr.forward(p, &h);
                        out.add_assign(&s);
                        Some(cols)
                    }
                    None => {
                        out.add_assign(&h);
                        None
                    }
                };
                caches.push(BlockCache { input: h, cols1, a1, r1, cols2, cols_proj });
                h = out;
            }
            block_caches.push(caches);
            h = crop(&h, self.config.crop_per_stage);
        }
        let trunk_act = relu(&self.film_out.forward(p, emb, &h));
        let shared = upsample(&trunk_act, INITIAL_FOLD);
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut probs = Vec::with_capacity(self.heads.len());
        for hd in &self.heads {
            let (logits, cols) = hd.conv.forward(p, &upsample(&shared, hd.upsample));
            probs.push(softmax(&logits));
            heads.push(HeadCache { cols });
        }
        Ok(Trace { row, input: x.clone(), blocks: block_caches, trunk: h, trunk_act, shared, heads, probs })
    }

    /// Weighted sum over heads of the mean negative log-likelihood of the
    /// target class on valid pixels. Heads without a target, or with no
    /// valid pixel, contribute nothing.
    pub fn loss<T: Scalar>(&self, trace: &Trace<T>, targets: &[Option<HeadTarget<'_>>], weights: &[f64]) -> Result<f64> {
        self.check_targets(trace, targets, weights)?;
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let pr = &trace.probs[i];
            let n = t.mask.iter().filter(|&&m| m).count();
            if n == 0 {
                continue;
            }
            let mut s = 0.0;
            for (px, (&cls, &m)) in t.classes.iter().zip(t.mask).enumerate() {
                if m {
                    s -= pr.data[px * pr.c + cls as usize].f64().max(f64::MIN_POSITIVE).ln();
                }
            }
            total += weights[i] * s / n as f64;
        }
        Ok(total)
    }

    fn check_targets<T: Scalar>(&self, trace: &Trace<T>, targets: &[Option<HeadTarget<'_>>], weights: &[f64]) -> Result<()> {
        if targets.len() != self.heads.len() || weights.len() != self.heads.len() {
            return Err(ModelError::shape("loss", "one target slot and weight per head required"));
        }
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let pr = &trace.probs[i];
            let name = &self.config.heads[i].name;
            if t.classes.len() != pr.pixels() || t.mask.len() != pr.pixels() {
                return Err(ModelError::shape(
                    format!("head {name}"),
                    format!("target has {} pixels, output has {}", t.classes.len(), pr.pixels()),
                ));
            }
            if let Some(&bad) = t.classes.iter().zip(t.mask).find(|(&c, &m)| m && c as usize >= pr.c).map(|(c, _)| c) {
                return Err(ModelError::shape(format!("head {name}"), format!("class {bad} ≥ {} bins", pr.c)));
            }
        }
        Ok(())
    }

    /// Accumulates `scale ·` the gradient of [`Network::loss`] into `grad`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        trace: &Trace<T>,
        targets: &[Option<HeadTarget<'_>>],
        weights: &[f64],
        scale: f64,
        grad: &mut [T],
    ) -> Result<()> {
        self.check_targets(trace, targets, weights)?;
        if grad.len() != self.total {
            return Err(ModelError::shape("gradient", format!("{} values, layout needs {}", grad.len(), self.total)));
        }
        let p = params;
        let e = self.config.embed_dim;
        let emb: Vec<T> = p[self.embed + trace.row * e..self.embed + (trace.row + 1) * e].to_vec();
        let mut demb = vec![T::zero(); e];

        let mut dshared = Tensor::zeros(trace.shared.h, trace.shared.w, trace.shared.c);
        let mut any = false;
        for (i, hd) in self.heads.iter().enumerate() {
            let Some(t) = targets[i] else { continue };
            let n = t.mask.iter().filter(|&&m| m).count();
            if n == 0 {
                continue;
            }
            any = true;
            let pr = &trace.probs[i];
            let k = T::of(weights[i] * scale / n as f64);
            let mut dlogits = Tensor::zeros(pr.h, pr.w, pr.c);
            for (px, (&cls, &m)) in t.classes.iter().zip(t.mask).enumerate() {
                if !m {
                    continue;
                }
                let base = px * pr.c;
                for b in 0..pr.c {
                    dlogits.data[base + b] = pr.data[base + b] * k;
                }
                dlogits.data[base + cls as usize] = dlogits.data[base + cls as usize] - k;
            }
            let dup = hd.conv.backward(p, grad, &dlogits, &trace.heads[i].cols, true).expect("input grad");
            dshared.add_assign(&upsample_backward(&dup, hd.upsample));
        }
        if !any {
            return Ok(());
        }

        let mut d = upsample_backward(&dshared, INITIAL_FOLD);
        relu_backward(&mut d, &trace.trunk_act);
        let mut d = self.film_out.backward(p, grad, &emb, &mut demb, &trace.trunk, &d);
        for (blocks, caches) in self.stages.iter().zip(&trace.blocks).rev() {
            d = crop_backward(&d, self.config.crop_per_stage);
            for (blk, c) in blocks.iter().zip(caches).rev() {
                let mut dr1 = blk.conv2.backward(p, grad, &d, &c.cols2, true).expect("input grad");
                relu_backward(&mut dr1, &c.r1);
                let da1 = blk.film.backward(p, grad, &emb, &mut demb, &c.a1, &dr1);
                let mut din = blk.conv1.backward(p, grad, &da1, &c.cols1, true).expect("input grad");
                match (&blk.proj, &c.cols_proj) {
                    (Some(pr), Some(cols)) => din.add_assign(&pr.backward(p, grad, &d, cols, true).expect("input grad")),
                    _ => din.add_assign(&d),
                }
                debug_assert_eq!(din.shape(), c.input.shape());
                d = din;
            }
        }
        let dfilm = depth_to_space(&d, INITIAL_FOLD);
        self.film_in.backward(p, grad, &emb, &mut demb, &trace.input, &dfilm);
        let base = self.embed + trace.row * e;
        for j in 0..e {
            grad[base + j] = grad[base + j] + demb[j];
        }
        Ok(())
    }

    /// Loss of one example and its gradient scaled by `scale`.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        lead_min: u32,
        targets: &[Option<HeadTarget<'_>>],
        weights: &[f64],
        scale: f64,
        grad: &mut [T],
    ) -> Result<f64> {
        let trace = self.trace(params, x, lead_min)?;
        let loss = self.loss(&trace, targets, weights)?;
        self.backward(params, &trace, targets, weights, scale, grad)?;
        Ok(loss)
    }
}
