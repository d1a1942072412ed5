//! Branch-specific gated residual adapters on the visual encoder, and the
//! three-branch refinement pass.
//!
//! Each adapted layer applies `X ← (1 − λ) X + λ MLP(X)` with
//! `MLP(X) = tanh(X W1 + b1) W2 + b2` and `λ = sigmoid(ρ)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::encoders::{views_from_mask, TokenHook, VisualEncoder};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Subject,
    Context,
    Global,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Subject, Branch::Context, Branch::Global];

    pub fn short(self) -> &'static str {
        match self {
            Branch::Subject => "s",
            Branch::Context => "c",
            Branch::Global => "g",
        }
    }

    pub fn parse(s: &str) -> Option<Branch> {
        match s {
            "s" | "subject" => Some(Branch::Subject),
            "c" | "context" => Some(Branch::Context),
            "g" | "global" => Some(Branch::Global),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Adapted layers; clipped to the encoder depth.
    pub k: usize,
    /// MLP hidden width; 0 means "same as the encoder width".
    pub hidden: usize,
    pub rho_init: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            k: 6,
            hidden: 0,
            rho_init: -2.0,
        }
    }
}

/// Registers `{prefix}.w1/.b1/.w2/.b2/.rho`. The output layer starts at
/// zero, so the block initially computes `(1 − λ) X`.
pub fn init_gated_block<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    hidden: usize,
    rho_init: f64,
    rng: &mut R,
) -> Result<()> {
    let std = 1.0 / (width as f64).sqrt();
    let w1 = (0..width * hidden)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    store.insert(
        format!("{prefix}.w1"),
        Tensor::new(vec![width, hidden], w1)?,
    )?;
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?;
    store.insert(format!("{prefix}.w2"), Tensor::zeros(&[hidden, width]))?;
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[width]))?;
    store.insert(format!("{prefix}.rho"), Tensor::vector(vec![rho_init]))?;
    Ok(())
}

/// `(1 − λ) X + λ MLP(X)` for the block registered under `prefix`.
pub fn apply_gated_block(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = store.var(g, &format!("{prefix}.w1"))?;
    let b1 = store.var(g, &format!("{prefix}.b1"))?;
    let w2 = store.var(g, &format!("{prefix}.w2"))?;
    let b2 = store.var(g, &format!("{prefix}.b2"))?;
    let rho = store.var(g, &format!("{prefix}.rho"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.tanh(h)?;
    let m = g.matmul(h, w2)?;
    let m = g.add(m, b2)?;
    let lam = g.sigmoid(rho)?;
    let diff = g.sub(m, x)?;
    let step = g.scale_by(diff, lam)?;
    Ok(g.add(x, step)?)
}

/// Gate value `sigmoid(ρ)` of a registered block.
pub fn gate_value(store: &ParamStore, prefix: &str) -> Result<f64> {
    let rho = store.require(&format!("{prefix}.rho"))?.data()[0];
    Ok(1.0 / (1.0 + (-rho).exp()))
}

/// A registered block bound to its parameter table.
pub struct BoundBlock<'a> {
    pub store: &'a ParamStore,
    pub prefix: String,
}

impl TokenHook for BoundBlock<'_> {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        apply_gated_block(g, self.store, &self.prefix, x)
    }
}

/// Adapter stack for one branch, covering layers `1..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrAdapter {
    pub branch: Branch,
    pub k: usize,
}

impl CsrAdapter {
    pub fn layer_prefix(&self, layer: usize) -> String {
        format!("csr.{}.{layer}", self.branch.short())
    }

    pub fn param_prefix(&self) -> String {
        format!("csr.{}.", self.branch.short())
    }

    pub fn init<R: Rng>(
        branch: Branch,
        encoder_layers: usize,
        width: usize,
        cfg: &AdapterConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let k = cfg.k.min(encoder_layers);
        let hidden = if cfg.hidden == 0 { width } else { cfg.hidden };
        let a = Self { branch, k };
        for i in 1..=k {
            init_gated_block(store, &a.layer_prefix(i), width, hidden, cfg.rho_init, rng)?;
        }
        Ok(a)
    }

    pub fn hooks<'a>(&self, store: &'a ParamStore) -> Vec<BoundBlock<'a>> {
        (1..=self.k)
            .map(|i| BoundBlock {
                store,
                prefix: self.layer_prefix(i),
            })
            .collect()
    }

    pub fn gates(&self, store: &ParamStore) -> Result<Vec<f64>> {
        (1..=self.k)
            .map(|i| gate_value(store, &self.layer_prefix(i)))
            .collect()
    }
}

/// One adapted layer update; `layer` is 1-based.
pub fn csr_layer_update(
    g: &mut Graph,
    store: &ParamStore,
    adapter: &CsrAdapter,
    x: Var,
    layer: usize,
) -> Result<Var> {
    if layer == 0 || layer > adapter.k {
        return Err(Error::LayerOutOfRange {
            layer,
            k: adapter.k,
        });
    }
    apply_gated_block(g, store, &adapter.layer_prefix(layer), x)
}

/// Whether branch views come from the mask or all branches see the full grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Masked,
    Unmasked,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchOut {
    pub branch: Branch,
    pub cls: Var,
    pub patches: Var,
}

/// Per-branch refined class token and patch tokens for one input.
#[derive(Clone, Debug)]
pub struct BranchBundle {
    pub branches: Vec<BranchOut>,
}

impl BranchBundle {
    pub fn get(&self, b: Branch) -> Option<&BranchOut> {
        self.branches.iter().find(|o| o.branch == b)
    }
}

/// Frozen input tokens per branch, reusable across training steps.
#[derive(Clone, Debug)]
pub struct BranchInputs {
    pub tokens: Vec<(Branch, Tensor)>,
}

pub fn branch_inputs(
    encoder: &VisualEncoder,
    x: &Tensor,
    mask: Option<&[bool]>,
    mode: ViewMode,
    branches: &[Branch],
) -> Result<BranchInputs> {
    let views = match mode {
        ViewMode::Masked => Some(views_from_mask(x, mask.ok_or(Error::MissingMask)?)?),
        ViewMode::Unmasked => None,
    };
    let mut tokens = Vec::with_capacity(branches.len());
    for &b in branches {
        let view = match (&views, b) {
            (Some(v), Branch::Subject) => &v.subject,
            (Some(v), Branch::Context) => &v.context,
            _ => x,
        };
        tokens.push((b, encoder.input_tokens(view)?));
    }
    Ok(BranchInputs { tokens })
}

/// Runs every requested branch through the frozen encoder with its adapter.
/// `adapters` may be empty (no adaptation) or must cover every branch.
pub fn refine_branches(
    g: &mut Graph,
    encoder: &VisualEncoder,
    store: &ParamStore,
    inputs: &BranchInputs,
    adapters: &[CsrAdapter],
) -> Result<BranchBundle> {
    let mut branches = Vec::with_capacity(inputs.tokens.len());
    for (b, tokens) in &inputs.tokens {
        let bound;
        let hooks: Vec<&dyn TokenHook> = if adapters.is_empty() {
            Vec::new()
        } else {
            let a = adapters
                .iter()
                .find(|a| a.branch == *b)
                .ok_or(Error::MissingAdapter(b.short()))?;
            bound = a.hooks(store);
            bound.iter().map(|h| h as &dyn TokenHook).collect()
        };
        let out = encoder.encode_tokens(g, tokens.clone(), &hooks)?;
        branches.push(BranchOut {
            branch: *b,
            cls: out.cls,
            patches: out.patches,
        });
    }
    Ok(BranchBundle { branches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::VisualConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(rho: f64) -> (ParamStore, CsrAdapter) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AdapterConfig {
            rho_init: rho,
            ..AdapterConfig::default()
        };
        let a = CsrAdapter::init(Branch::Global, 4, 4, &cfg, &mut store, &mut rng).unwrap();
        (store, a)
    }

    fn randomize_output_layer(store: &mut ParamStore, prefix: &str) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in store.get_mut(&format!("{prefix}.w2")).unwrap().data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }

    #[test]
    fn k_is_clipped_to_depth() {
        let (_, a) = setup(-2.0);
        assert_eq!(a.k, 4);
    }

    #[test]
    fn gate_limits() {
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.1, 0.5, 1.0, -0.7, 0.2, 0.0, 0.4]).unwrap();
        for (rho, expect_identity) in [(-20.0, true), (20.0, false)] {
            let (mut store, a) = setup(rho);
            randomize_output_layer(&mut store, &a.layer_prefix(1));
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let out = csr_layer_update(&mut g, &store, &a, xv, 1).unwrap();
            let out = g.value(out).clone();
            let target = if expect_identity {
                x.clone()
            } else {
                let mut g2 = Graph::new();
                let xv = g2.constant(x.clone()).unwrap();
                let p = &a.layer_prefix(1);
                let w1 = store.var(&mut g2, &format!("{p}.w1")).unwrap();
                let w2 = store.var(&mut g2, &format!("{p}.w2")).unwrap();
                let h = g2.matmul(xv, w1).unwrap();
                let h = g2.tanh(h).unwrap();
                let m = g2.matmul(h, w2).unwrap();
                g2.value(m).clone()
            };
            for (o, t) in out.data().iter().zip(target.data()) {
                assert!((o - t).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn out_of_range_layer_is_rejected() {
        let (store, a) = setup(-2.0);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(csr_layer_update(&mut g, &store, &a, xv, 5).is_err());
        assert!(csr_layer_update(&mut g, &store, &a, xv, 0).is_err());
    }

    #[test]
    fn branch_parameter_names_are_disjoint() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AdapterConfig::default();
        let adapters: Vec<CsrAdapter> = Branch::ALL
            .iter()
            .map(|&b| CsrAdapter::init(b, 4, 8, &cfg, &mut store, &mut rng).unwrap())
            .collect();
        for a in &adapters {
            for b in &adapters {
                if a.branch != b.branch {
                    let pa = a.param_prefix();
                    let pb = b.param_prefix();
                    assert!(!store
                        .names()
                        .any(|n| n.starts_with(&pa) && n.starts_with(&pb)));
                }
            }
        }
        assert_eq!(store.len(), 3 * 4 * 5);
    }

    #[test]
    fn unmasked_mode_feeds_full_grid_to_every_branch() {
        let enc = VisualEncoder::new(VisualConfig::default()).unwrap();
        let x = Tensor::full(&[16, 16, 8], 0.5);
        let mask: Vec<bool> = (0..256).map(|i| i < 100).collect();
        let masked = branch_inputs(&enc, &x, Some(&mask), ViewMode::Masked, &Branch::ALL).unwrap();
        let plain = branch_inputs(&enc, &x, None, ViewMode::Unmasked, &Branch::ALL).unwrap();
        assert!(!masked.tokens[0].1.bit_eq(&plain.tokens[0].1));
        assert!(masked.tokens[2].1.bit_eq(&plain.tokens[2].1));
        assert!(matches!(
            branch_inputs(&enc, &x, None, ViewMode::Masked, &Branch::ALL),
            Err(Error::MissingMask)
        ));
    }
}
