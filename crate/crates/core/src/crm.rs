//! Text-conditioned single-head attention over branch embeddings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::csr::{Branch, BranchBundle};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::textref::TextPair;

pub const WQ: &str = "crm.wq";
pub const WK: &str = "crm.wk";

/// Which text embedding forms the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryText {
    Anomalous,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrmConfig {
    pub attn_dim: usize,
    pub query: QueryText,
    /// Normalize branch embeddings before the key projection.
    pub normalize_keys: bool,
}

impl Default for CrmConfig {
    fn default() -> Self {
        Self {
            attn_dim: 32,
            query: QueryText::Anomalous,
            normalize_keys: true,
        }
    }
}

/// Inserts `crm.wq` and `crm.wk`, both stored as `[D, D_a]` so that
/// `q = t · W_q` (the transpose of the column-vector convention).
pub fn init_crm<R: Rng>(
    store: &mut ParamStore,
    width: usize,
    cfg: &CrmConfig,
    rng: &mut R,
) -> Result<()> {
    if cfg.attn_dim == 0 {
        return Err(Error::InvalidSpec(
            "attention width must be positive".into(),
        ));
    }
    let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("finite std");
    for name in [WQ, WK] {
        let data = (0..width * cfg.attn_dim)
            .map(|_| normal.sample(rng))
            .collect();
        store.insert(name, Tensor::matrix(width, cfg.attn_dim, data)?)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FusionResult {
    pub active: Vec<Branch>,
    /// Fusion weights over `active`; `None` when the fusion has no weights.
    pub alpha: Option<Var>,
    /// Normalized branch embeddings, in `active` order.
    pub branch_embeddings: Vec<Var>,
    pub fused: Var,
    pub branch_logits: Vec<Var>,
    pub fused_logits: Var,
}

impl FusionResult {
    pub fn alpha_values(&self, g: &Graph) -> Option<Vec<f64>> {
        self.alpha.map(|a| g.value(a).data().to_vec())
    }
}

/// `[sim(z, t0), sim(z, t1)]`
pub fn logits(g: &mut Graph, z: Var, pair: &TextPair) -> Result<Var> {
    let s0 = g.cosine_sim(z, pair.t0)?;
    let s1 = g.cosine_sim(z, pair.t1)?;
    Ok(g.concat(&[s0, s1])?)
}

pub(crate) fn check_unit(g: &Graph, v: Var) -> Result<()> {
    let n = g.value(v).norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized(n));
    }
    Ok(())
}

/// Normalized embeddings of the active branches, in the order given.
pub fn active_embeddings(
    g: &mut Graph,
    bundle: &BranchBundle,
    active: &[Branch],
) -> Result<Vec<Var>> {
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    active
        .iter()
        .map(|&b| {
            let out = bundle.get(b).ok_or_else(|| {
                Error::BranchMismatch(format!("branch {} not in bundle", b.short()))
            })?;
            Ok(g.l2_normalize(out.cls)?)
        })
        .collect()
}

/// Assembles a fusion result from weights `alpha` over normalized embeddings.
pub fn weighted_fusion(
    g: &mut Graph,
    active: &[Branch],
    embeddings: Vec<Var>,
    alpha: Var,
    pair: &TextPair,
) -> Result<FusionResult> {
    let z = g.stack(&embeddings)?;
    let fused = g.matmul(alpha, z)?;
    finish(g, active, embeddings, Some(alpha), fused, pair)
}

pub(crate) fn finish(
    g: &mut Graph,
    active: &[Branch],
    embeddings: Vec<Var>,
    alpha: Option<Var>,
    fused: Var,
    pair: &TextPair,
) -> Result<FusionResult> {
    let branch_logits = embeddings
        .iter()
        .map(|&z| logits(g, z, pair))
        .collect::<Result<Vec<_>>>()?;
    let fused_logits = logits(g, fused, pair)?;
    Ok(FusionResult {
        active: active.to_vec(),
        alpha,
        branch_embeddings: embeddings,
        fused,
        branch_logits,
        fused_logits,
    })
}

/// `α = softmax(qᵀK / √D_a)` over the active branches and `z̃ = Σ α_b z̃_b`.
pub fn fuse(
    g: &mut Graph,
    bundle: &BranchBundle,
    pair: &TextPair,
    store: &ParamStore,
    cfg: &CrmConfig,
    active: &[Branch],
) -> Result<FusionResult> {
    check_unit(g, pair.t0)?;
    check_unit(g, pair.t1)?;
    let embeddings = active_embeddings(g, bundle, active)?;
    if active.len() == 1 {
        let alpha = g.constant(Tensor::vector(vec![1.0]))?;
        return weighted_fusion(g, active, embeddings, alpha, pair);
    }
    let wq = store.var(g, WQ)?;
    let wk = store.var(g, WK)?;
    let t = match cfg.query {
        QueryText::Anomalous => pair.t1,
        QueryText::Normal => pair.t0,
    };
    let q = g.matmul(t, wq)?;
    let key_src = if cfg.normalize_keys {
        g.stack(&embeddings)?
    } else {
        let raw = active
            .iter()
            .map(|&b| bundle.get(b).map(|o| o.cls).expect("checked above"))
            .collect::<Vec<_>>();
        g.stack(&raw)?
    };
    let keys = g.matmul(key_src, wk)?;
    let mut scores = Vec::with_capacity(active.len());
    for i in 0..active.len() {
        let k = g.row(keys, i)?;
        scores.push(g.dot(q, k)?);
    }
    let s = g.concat(&scores)?;
    let s = g.scale(s, 1.0 / (cfg.attn_dim as f64).sqrt())?;
    let alpha = g.softmax(s)?;
    weighted_fusion(g, active, embeddings, alpha, pair)
}

/// `m_j = Σ_b α_b m_{b,j}`.
pub fn fuse_patches(margins: &[Vec<f64>], alpha: &[f64]) -> Result<Vec<f64>> {
    if margins.len() != alpha.len() || margins.is_empty() {
        return Err(Error::BranchMismatch(format!(
            "{} weights for {} branches",
            alpha.len(),
            margins.len()
        )));
    }
    let n = margins[0].len();
    if margins.iter().any(|m| m.len() != n) {
        return Err(Error::BranchMismatch(
            "patch counts differ across branches".into(),
        ));
    }
    let mut out = vec![0.0; n];
    for (m, &a) in margins.iter().zip(alpha) {
        for (o, &v) in out.iter_mut().zip(m) {
            *o += a * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csr::BranchOut;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn bundle(g: &mut Graph, embs: &[Vec<f64>]) -> BranchBundle {
        let branches = Branch::ALL
            .iter()
            .zip(embs)
            .map(|(&b, e)| {
                let cls = g.constant(Tensor::vector(e.clone())).unwrap();
                BranchOut {
                    branch: b,
                    cls,
                    patches: cls,
                }
            })
            .collect();
        BranchBundle { branches }
    }

    fn text(g: &mut Graph) -> TextPair {
        TextPair {
            t0: g.constant(Tensor::vector(unit(&[1.0, 0.2, 0.0]))).unwrap(),
            t1: g.constant(Tensor::vector(unit(&[0.1, 1.0, -0.3]))).unwrap(),
        }
    }

    fn store(d: usize, da: usize) -> ParamStore {
        let mut s = ParamStore::new();
        let cfg = CrmConfig {
            attn_dim: da,
            ..CrmConfig::default()
        };
        init_crm(&mut s, d, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        s
    }

    #[test]
    fn identical_branches_get_uniform_weights() {
        let mut g = Graph::new();
        let e = unit(&[0.3, -0.4, 0.9]);
        let b = bundle(&mut g, &[e.clone(), e.clone(), e]);
        let p = text(&mut g);
        let s = store(3, 4);
        let cfg = CrmConfig {
            attn_dim: 4,
            ..CrmConfig::default()
        };
        let f = fuse(&mut g, &b, &p, &s, &cfg, &Branch::ALL).unwrap();
        for a in f.alpha_values(&g).unwrap() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_branch_collapses() {
        let mut g = Graph::new();
        let b = bundle(
            &mut g,
            &[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 2.0],
            ],
        );
        let p = text(&mut g);
        let f = fuse(
            &mut g,
            &b,
            &p,
            &ParamStore::new(),
            &CrmConfig::default(),
            &[Branch::Global],
        )
        .unwrap();
        assert_eq!(f.alpha_values(&g).unwrap(), vec![1.0]);
        assert_eq!(g.value(f.fused).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_active_set_and_unnormalized_text_rejected() {
        let mut g = Graph::new();
        let b = bundle(&mut g, &[vec![1.0, 0.0, 0.0]]);
        let p = text(&mut g);
        let s = store(3, 4);
        assert!(matches!(
            fuse(&mut g, &b, &p, &s, &CrmConfig::default(), &[]),
            Err(Error::EmptyActiveSet)
        ));
        let bad = TextPair {
            t0: p.t0,
            t1: g.constant(Tensor::vector(vec![2.0, 0.0, 0.0])).unwrap(),
        };
        assert!(matches!(
            fuse(
                &mut g,
                &b,
                &bad,
                &s,
                &CrmConfig::default(),
                &[Branch::Subject]
            ),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn fuse_patches_examples() {
        let m = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(fuse_patches(&m, &[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let same = vec![vec![0.7; 4]; 3];
        for v in fuse_patches(&same, &[0.2, 0.5, 0.3]).unwrap() {
            assert!((v - 0.7).abs() < 1e-15);
        }
        assert!(fuse_patches(&m, &[0.5, 0.5]).is_err());
    }
}
