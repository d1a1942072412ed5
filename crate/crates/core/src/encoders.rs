//! Frozen toy stand-ins for the visual and text backbones.
//!
//! Both encoders share one layer form over a token matrix `X` (N×D):
//! `X ← X + tanh((X + mean_rows(X)) W + b)`, where the mean-row term is the
//! only token mixing. Weights are seeded and enter every recording as
//! constants, so no gradient can reach them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds;
use crate::worldgen::Observation;

/// Per-layer transform applied after a frozen layer.
pub trait TokenHook {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualConfig {
    pub layers: usize,
    pub width: usize,
    pub patch: usize,
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 32,
            patch: 4,
            grid: (16, 16),
            feature_dim: 8,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub layers: usize,
    pub width: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            width: 32,
            vocab: 4096,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    w: Tensor,
    b: Tensor,
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn make_layers<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Layer> {
    (0..n)
        .map(|_| Layer {
            w: normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()),
            b: normal_tensor(rng, &[d], 0.1),
        })
        .collect()
}

/// Sinusoidal position code, `n` rows of width `d`.
pub fn position_code(n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for p in 0..n {
        for k in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            out[p * d + k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn run_layers(
    g: &mut Graph,
    layers: &[Layer],
    mut x: Var,
    hooks: &[&dyn TokenHook],
) -> Result<Vec<Var>> {
    if hooks.len() > layers.len() {
        return Err(Error::TooManyHooks {
            got: hooks.len(),
            max: layers.len(),
        });
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let m = g.mean_rows(x)?;
        let h = g.add(x, m)?;
        let w = g.constant(layer.w.clone())?;
        let b = g.constant(layer.b.clone())?;
        let p = g.matmul(h, w)?;
        let p = g.add(p, b)?;
        let t = g.tanh(p)?;
        x = g.add(x, t)?;
        if let Some(hook) = hooks.get(i) {
            x = hook.apply(g, x)?;
        }
        per_layer.push(x);
    }
    Ok(per_layer)
}

fn hash_layers(h: &mut Sha256, layers: &[Layer]) {
    for l in layers {
        for v in l.w.data().iter().chain(l.b.data()) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub config: VisualConfig,
    embed_w: Tensor,
    embed_b: Tensor,
    cls: Vec<f64>,
    pos: Vec<f64>,
    layers: Vec<Layer>,
}

/// Output of a visual pass.
#[derive(Clone, Debug)]
pub struct VisualOutput {
    pub tokens_per_layer: Vec<Var>,
    pub cls: Var,
    pub patches: Var,
}

impl VisualEncoder {
    pub fn new(config: VisualConfig) -> Result<Self> {
        let (h, w) = config.grid;
        let p = config.patch;
        if config.layers == 0 || config.width == 0 || p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::InvalidSpec(format!(
                "visual encoder needs layers, width > 0 and a grid divisible by patch {p}"
            )));
        }
        let d = config.width;
        let fan_in = p * p * config.feature_dim;
        let mut rng = seeds::rng(config.seed, &[seeds::tag("visual")]);
        let embed_w = normal_tensor(&mut rng, &[fan_in, d], 1.0 / (fan_in as f64).sqrt());
        let embed_b = normal_tensor(&mut rng, &[d], 0.1);
        let cls = normal_tensor(&mut rng, &[d], 1.0).into_data();
        let layers = make_layers(&mut rng, config.layers, d);
        let pos = position_code(1 + (h / p) * (w / p), d);
        Ok(Self {
            config,
            embed_w,
            embed_b,
            cls,
            pos,
            layers,
        })
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        let (h, w) = self.config.grid;
        (h / self.config.patch, w / self.config.patch)
    }

    /// Token count including the class token.
    pub fn n_tokens(&self) -> usize {
        let (gh, gw) = self.patch_grid();
        1 + gh * gw
    }

    /// Frozen input tokens (class token + embedded patches, plus positions).
    pub fn input_tokens(&self, view: &Tensor) -> Result<Tensor> {
        let (h, w) = self.config.grid;
        let f = self.config.feature_dim;
        if view.shape() != [h, w, f] {
            return Err(Error::BranchMismatch(format!(
                "view shape {:?} does not match encoder grid {:?}",
                view.shape(),
                [h, w, f]
            )));
        }
        let p = self.config.patch;
        let d = self.config.width;
        let (gh, gw) = self.patch_grid();
        let n = self.n_tokens();
        let fan_in = p * p * f;
        let mut out = vec![0.0; n * d];
        for k in 0..d {
            out[k] = self.cls[k] + self.pos[k];
        }
        let x = view.data();
        let ew = self.embed_w.data();
        let mut patch = vec![0.0; fan_in];
        for pi in 0..gh {
            for pj in 0..gw {
                let mut idx = 0;
                for di in 0..p {
                    for dj in 0..p {
                        let cell = ((pi * p + di) * w + (pj * p + dj)) * f;
                        patch[idx..idx + f].copy_from_slice(&x[cell..cell + f]);
                        idx += f;
                    }
                }
                let t = 1 + pi * gw + pj;
                let row = &mut out[t * d..(t + 1) * d];
                row.copy_from_slice(self.embed_b.data());
                for (q, &v) in patch.iter().enumerate() {
                    if v != 0.0 {
                        for (r, e) in row.iter_mut().zip(&ew[q * d..(q + 1) * d]) {
                            *r += v * e;
                        }
                    }
                }
                for (r, pv) in row.iter_mut().zip(&self.pos[t * d..(t + 1) * d]) {
                    *r += pv;
                }
            }
        }
        Ok(Tensor::new(vec![n, d], out)?)
    }

    /// Runs the frozen stack with `hooks[i]` applied after layer `i + 1`.
    pub fn encode(
        &self,
        g: &mut Graph,
        view: &Tensor,
        hooks: &[&dyn TokenHook],
    ) -> Result<VisualOutput> {
        self.encode_tokens(g, self.input_tokens(view)?, hooks)
    }

    /// Same as [`encode`](Self::encode) on precomputed input tokens.
    pub fn encode_tokens(
        &self,
        g: &mut Graph,
        tokens: Tensor,
        hooks: &[&dyn TokenHook],
    ) -> Result<VisualOutput> {
        let x0 = g.constant(tokens)?;
        let tokens_per_layer = run_layers(g, &self.layers, x0, hooks)?;
        let last = *tokens_per_layer.last().expect("at least one layer");
        let cls = g.row(last, 0)?;
        let patches = g.rows(last, 1, self.n_tokens())?;
        Ok(VisualOutput {
            tokens_per_layer,
            cls,
            patches,
        })
    }

    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self
            .embed_w
            .data()
            .iter()
            .chain(self.embed_b.data())
            .chain(&self.cls)
        {
            h.update(v.to_bits().to_le_bytes());
        }
        hash_layers(&mut h, &self.layers);
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    embedding: Tensor,
    layers: Vec<Layer>,
}

/// Lower-cased whitespace tokens hashed into the vocabulary.
pub fn tokenize(text: &str, vocab: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| (seeds::tag(&w.to_lowercase()) % vocab as u64) as usize)
        .collect()
}

impl TextEncoder {
    pub fn new(config: TextConfig) -> Result<Self> {
        if config.layers == 0 || config.width == 0 || config.vocab == 0 {
            return Err(Error::InvalidSpec(
                "text encoder sizes must be positive".into(),
            ));
        }
        let mut rng = seeds::rng(config.seed, &[seeds::tag("text")]);
        let embedding = normal_tensor(&mut rng, &[config.vocab, config.width], 1.0);
        let layers = make_layers(&mut rng, config.layers, config.width);
        Ok(Self {
            config,
            embedding,
            layers,
        })
    }

    pub fn input_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::EmptyTokens);
        }
        let d = self.config.width;
        let pos = position_code(ids.len(), d);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (t, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab,
                });
            }
            out.extend(
                self.embedding
                    .row(id)
                    .iter()
                    .zip(&pos[t * d..(t + 1) * d])
                    .map(|(e, p)| e + p),
            );
        }
        Ok(Tensor::new(vec![ids.len(), d], out)?)
    }

    /// Unit-norm mean-pooled embedding with `hooks[i]` after layer `i + 1`.
    pub fn encode(&self, g: &mut Graph, ids: &[usize], hooks: &[&dyn TokenHook]) -> Result<Var> {
        let x0 = g.constant(self.input_tokens(ids)?)?;
        let per_layer = run_layers(g, &self.layers, x0, hooks)?;
        let pooled = g.mean_rows(*per_layer.last().expect("at least one layer"))?;
        Ok(g.l2_normalize(pooled)?)
    }

    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.embedding.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hash_layers(&mut h, &self.layers);
        hex::encode(h.finalize())
    }
}

/// Subject, context and global views of one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTriple {
    pub subject: Tensor,
    pub context: Tensor,
    pub global: Tensor,
}

/// `x_s = m ⊙ x`, `x_c = (1 − m) ⊙ x`, `x_g = x`.
pub fn make_views(obs: &Observation) -> Result<ViewTriple> {
    views_from_mask(&obs.x, &obs.mask)
}

pub fn views_from_mask(x: &Tensor, mask: &[bool]) -> Result<ViewTriple> {
    if x.rank() != 3 || mask.len() != x.shape()[0] * x.shape()[1] {
        return Err(Error::InvalidMask(format!(
            "mask of {} cells for grid {:?}",
            mask.len(),
            x.shape()
        )));
    }
    let fg = mask.iter().filter(|&&m| m).count();
    if fg == 0 || fg == mask.len() {
        return Err(Error::InvalidMask(
            "mask needs at least one foreground and one background cell".into(),
        ));
    }
    let f = x.shape()[2];
    let mut subject = x.clone();
    let mut context = x.clone();
    for (cell, &m) in mask.iter().enumerate() {
        let target = if m { &mut context } else { &mut subject };
        target.data_mut()[cell * f..(cell + 1) * f].fill(0.0);
    }
    Ok(ViewTriple {
        subject,
        context,
        global: x.clone(),
    })
}
