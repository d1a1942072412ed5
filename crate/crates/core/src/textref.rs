//! Prompt templating, gated refinement of the text pathway, and the
//! text-space losses over the normal/anomalous embedding pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csr::{gate_value, init_gated_block, BoundBlock};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::encoders::{tokenize, TextEncoder, TokenHook};
use crate::error::{Error, Result};

pub const NORMAL_TEMPLATES: [&str; 4] = [
    "a photo of {cls} in a normal place",
    "a {cls} in a typical environment",
    "a {cls} in a safe context",
    "a usual photo of {cls}",
];

pub const ANOMALOUS_TEMPLATES: [&str; 4] = [
    "a {cls} in an unusual place",
    "a {cls} in an abnormal environment",
    "a {cls} in an unsafe context",
    "an unusual photo of {cls}",
];

pub const FORMATTING_TEMPLATES: [&str; 3] = ["{cls}.", "a photo of {cls}.", "an image of {cls}."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub class_name: String,
    pub normal: Vec<String>,
    pub anomalous: Vec<String>,
    pub formatting: Vec<String>,
}

impl PromptSet {
    pub fn standard(class_name: &str) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            class_name: class_name.to_string(),
            normal: own(&NORMAL_TEMPLATES),
            anomalous: own(&ANOMALOUS_TEMPLATES),
            formatting: own(&FORMATTING_TEMPLATES),
        }
    }

    /// Token ids for every instantiated template of each state.
    pub fn tokenized(&self, vocab: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        if self.normal.is_empty() {
            return Err(Error::EmptyTemplates("normal"));
        }
        if self.anomalous.is_empty() {
            return Err(Error::EmptyTemplates("anomalous"));
        }
        let cls = self.class_name.replace('_', " ");
        let tok = |ts: &[String]| -> Result<Vec<Vec<usize>>> {
            ts.iter()
                .map(|t| Ok(tokenize(&instantiate(t, &cls)?, vocab)))
                .collect()
        };
        Ok((tok(&self.normal)?, tok(&self.anomalous)?))
    }
}

/// Replaces `{cls}`; any other brace group, or a missing placeholder, is an error.
pub fn instantiate(template: &str, cls: &str) -> Result<String> {
    if !template.contains("{cls}") {
        return Err(Error::BadTemplate(template.to_string()));
    }
    let out = template.replace("{cls}", cls);
    if out.contains('{') || out.contains('}') {
        return Err(Error::BadTemplate(template.to_string()));
    }
    Ok(out)
}

/// Gated residual blocks on text layers `1..=layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextAdapter {
    pub layers: usize,
}

impl TextAdapter {
    pub fn layer_prefix(layer: usize) -> String {
        format!("tr.{layer}")
    }

    pub fn init<R: Rng>(
        encoder: &TextEncoder,
        layers: usize,
        rho_init: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let l = layers.min(encoder.config.layers);
        let d = encoder.config.width;
        for i in 1..=l {
            init_gated_block(store, &Self::layer_prefix(i), d, d, rho_init, rng)?;
        }
        Ok(Self { layers: l })
    }

    pub fn hooks<'a>(&self, store: &'a ParamStore) -> Vec<BoundBlock<'a>> {
        (1..=self.layers)
            .map(|i| BoundBlock {
                store,
                prefix: Self::layer_prefix(i),
            })
            .collect()
    }

    pub fn gates(&self, store: &ParamStore) -> Result<Vec<f64>> {
        (1..=self.layers)
            .map(|i| gate_value(store, &Self::layer_prefix(i)))
            .collect()
    }
}

/// Refined pair for one class, as recorded values.
#[derive(Clone, Copy, Debug)]
pub struct TextPair {
    pub t0: Var,
    pub t1: Var,
}

impl TextPair {
    /// `(t0 + t1) / 2`, rebuilt on every call.
    pub fn prototype(&self, g: &mut Graph) -> Result<Var> {
        let s = g.add(self.t0, self.t1)?;
        Ok(g.scale(s, 0.5)?)
    }
}

fn state_embedding(
    g: &mut Graph,
    encoder: &TextEncoder,
    templates: &[Vec<usize>],
    hooks: &[&dyn TokenHook],
) -> Result<Var> {
    let mut embs = Vec::with_capacity(templates.len());
    for ids in templates {
        embs.push(encoder.encode(g, ids, hooks)?);
    }
    let s = g.add_all(&embs)?;
    let m = g.scale(s, 1.0 / embs.len() as f64)?;
    Ok(g.l2_normalize(m)?)
}

/// `t̃k` = unit-normalized mean of the state's unit template embeddings.
pub fn build_text_pair(
    g: &mut Graph,
    prompts: &PromptSet,
    encoder: &TextEncoder,
    store: &ParamStore,
    adapter: Option<&TextAdapter>,
) -> Result<TextPair> {
    let (normal, anomalous) = prompts.tokenized(encoder.config.vocab)?;
    let bound = adapter.map(|a| a.hooks(store)).unwrap_or_default();
    let hooks: Vec<&dyn TokenHook> = bound.iter().map(|h| h as &dyn TokenHook).collect();
    let t0 = state_embedding(g, encoder, &normal, &hooks)?;
    let t1 = state_embedding(g, encoder, &anomalous, &hooks)?;
    Ok(TextPair { t0, t1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextLossWeights {
    pub ortho: f64,
    pub cons: f64,
    pub ground: f64,
    pub calib: f64,
    pub margin: f64,
    /// Fraction of stage-1 progress over which `ortho` warms up from 0.
    pub anneal_fraction: f64,
}

impl Default for TextLossWeights {
    fn default() -> Self {
        Self {
            ortho: 0.10,
            cons: 0.10,
            ground: 0.05,
            calib: 0.0,
            margin: 0.2,
            anneal_fraction: 0.4,
        }
    }
}

impl TextLossWeights {
    pub fn effective_ortho(&self, progress: f64) -> f64 {
        if self.anneal_fraction <= 0.0 {
            return self.ortho;
        }
        self.ortho * (progress / self.anneal_fraction).clamp(0.0, 1.0)
    }
}

/// `⟨t0, t1⟩²`
pub fn loss_ortho(g: &mut Graph, pair: &TextPair) -> Result<Var> {
    let d = g.dot(pair.t0, pair.t1)?;
    Ok(g.mul(d, d)?)
}

/// `½(‖t0 − tμ‖² + ‖t1 − tμ‖²)`
pub fn loss_cons(g: &mut Graph, pair: &TextPair) -> Result<Var> {
    let mu = pair.prototype(g)?;
    let a = g.sq_l2_dist(pair.t0, mu)?;
    let b = g.sq_l2_dist(pair.t1, mu)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5)?)
}

/// `1 − sim(tμ, v)`; a zero prototype (t0 = −t1) is an error.
pub fn loss_ground(g: &mut Graph, pair: &TextPair, v_cls: Var) -> Result<Var> {
    let mu = pair.prototype(g)?;
    let s = g.cosine_sim(mu, v_cls)?;
    Ok(g.affine(s, -1.0, 1.0)?)
}

/// `[m − ⟨v, t1⟩ + ⟨v, t0⟩]₊`
pub fn loss_calib(g: &mut Graph, pair: &TextPair, v: Var, margin: f64) -> Result<Var> {
    let a = g.dot(v, pair.t1)?;
    let b = g.dot(v, pair.t0)?;
    let d = g.sub(b, a)?;
    let d = g.affine(d, 1.0, margin)?;
    Ok(g.hinge(d)?)
}

/// Weighted text terms; absent terms carry zero weight.
#[derive(Clone, Debug)]
pub struct TextTerms {
    pub ortho: Option<Var>,
    pub cons: Option<Var>,
    pub ground: Option<Var>,
    pub calib: Option<Var>,
    pub total: Var,
}

/// Weighted text loss at stage-1 `progress` in [0, 1]. `calib_v` is the
/// image embedding the calibration hinge uses, when one applies.
pub fn text_terms(
    g: &mut Graph,
    pair: &TextPair,
    v_cls: Var,
    calib_v: Option<Var>,
    weights: &TextLossWeights,
    progress: f64,
) -> Result<TextTerms> {
    let mut weighted = Vec::with_capacity(4);
    let mut term = |g: &mut Graph, w: f64, l: Var| -> Result<Option<Var>> {
        weighted.push(g.scale(l, w)?);
        Ok(Some(l))
    };
    let ortho = match weights.effective_ortho(progress) {
        0.0 => None,
        w => {
            let l = loss_ortho(g, pair)?;
            term(g, w, l)?
        }
    };
    let cons = match weights.cons {
        0.0 => None,
        w => {
            let l = loss_cons(g, pair)?;
            term(g, w, l)?
        }
    };
    let ground = match weights.ground {
        0.0 => None,
        w => {
            let l = loss_ground(g, pair, v_cls)?;
            term(g, w, l)?
        }
    };
    let calib = match (weights.calib, calib_v) {
        (0.0, _) | (_, None) => None,
        (w, Some(v)) => {
            let l = loss_calib(g, pair, v, weights.margin)?;
            term(g, w, l)?
        }
    };
    let total = if weighted.is_empty() {
        g.constant(Tensor::scalar(0.0))?
    } else {
        g.add_all(&weighted)?
    };
    Ok(TextTerms {
        ortho,
        cons,
        ground,
        calib,
        total,
    })
}

pub fn loss_text_total(
    g: &mut Graph,
    pair: &TextPair,
    v_cls: Var,
    calib_v: Option<Var>,
    weights: &TextLossWeights,
    progress: f64,
) -> Result<Var> {
    Ok(text_terms(g, pair, v_cls, calib_v, weights, progress)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(g: &mut Graph, a: &[f64], b: &[f64]) -> TextPair {
        TextPair {
            t0: g.constant(Tensor::vector(a.to_vec())).unwrap(),
            t1: g.constant(Tensor::vector(b.to_vec())).unwrap(),
        }
    }

    #[test]
    fn ortho_examples() {
        let mut g = Graph::new();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (a, b, want) in [
            ([1.0, 0.0], [0.0, 1.0], 0.0),
            ([1.0, 0.0], [1.0, 0.0], 1.0),
            ([1.0, 0.0], [h, h], 0.5),
        ] {
            let p = pair(&mut g, &a, &b);
            let l = loss_ortho(&mut g, &p).unwrap();
            assert!((g.scalar(l) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn cons_examples() {
        let mut g = Graph::new();
        let p = pair(&mut g, &[1.0, 0.0], &[1.0, 0.0]);
        let l = loss_cons(&mut g, &p).unwrap();
        assert!(g.scalar(l).abs() < 1e-9);
        let p = pair(&mut g, &[1.0, 0.0], &[0.0, 1.0]);
        let l = loss_cons(&mut g, &p).unwrap();
        assert!((g.scalar(l) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ground_examples_and_degenerate_prototype() {
        let mut g = Graph::new();
        let p = pair(&mut g, &[1.0, 0.0], &[0.0, 1.0]);
        for (v, want) in [([1.0, 1.0], 0.0), ([1.0, -1.0], 1.0), ([-1.0, -1.0], 2.0)] {
            let vv = g.constant(Tensor::vector(v.to_vec())).unwrap();
            let l = loss_ground(&mut g, &p, vv).unwrap();
            assert!((g.scalar(l) - want).abs() < 1e-9);
        }
        let p = pair(&mut g, &[1.0, 0.0], &[-1.0, 0.0]);
        let vv = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(loss_ground(&mut g, &p, vv).is_err());
    }

    #[test]
    fn calib_examples() {
        // v = e0, t1 = (0.9, ·), t0 = (0.1, ·) gives ⟨v,t1⟩ = 0.9, ⟨v,t0⟩ = 0.1
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let p = pair(&mut g, &[0.1, 0.0], &[0.9, 0.0]);
        let l = loss_calib(&mut g, &p, v, 0.2).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let p = pair(&mut g, &[0.4, 0.0], &[0.3, 0.0]);
        let l = loss_calib(&mut g, &p, v, 0.2).unwrap();
        assert!((g.scalar(l) - 0.3).abs() < 1e-9);
        let p = pair(&mut g, &[0.6, 0.8], &[0.6, 0.8]);
        let l = loss_calib(&mut g, &p, v, 0.0).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn total_with_zero_weights_and_warmup_start() {
        let mut g = Graph::new();
        let p = pair(&mut g, &[1.0, 0.0], &[1.0, 0.0]);
        let v = g.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        let w = TextLossWeights {
            ortho: 0.0,
            cons: 0.0,
            ground: 0.0,
            calib: 0.0,
            ..TextLossWeights::default()
        };
        let l = loss_text_total(&mut g, &p, v, None, &w, 0.5).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert_eq!(TextLossWeights::default().effective_ortho(0.0), 0.0);
        assert!((TextLossWeights::default().effective_ortho(0.2) - 0.05).abs() < 1e-15);
        assert_eq!(TextLossWeights::default().effective_ortho(0.9), 0.10);
    }

    #[test]
    fn templates_need_the_class_placeholder() {
        assert_eq!(instantiate("a {cls}.", "boat").unwrap(), "a boat.");
        assert!(instantiate("a photo", "boat").is_err());
        assert!(instantiate("a {cls} in {place}", "boat").is_err());
    }
}
