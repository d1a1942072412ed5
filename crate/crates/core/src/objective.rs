//! Image-space supervision, fusion baselines, the model container and the
//! two-stage training loop.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::crm::{self, CrmConfig, FusionResult};
use crate::csr::{
    branch_inputs, refine_branches, AdapterConfig, Branch, BranchBundle, BranchInputs, CsrAdapter,
    ViewMode,
};
use crate::diffcore::{
    grad_check_sampled, Adam, GradCheckReport, Graph, OptimConfig, ParamStore, Schedule, Tensor,
    Var,
};
use crate::encoders::{TextConfig, TextEncoder, VisualConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::seeds;
use crate::textref::{
    build_text_pair, text_terms, PromptSet, TextAdapter, TextLossWeights, TextPair,
};
use crate::worldgen::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Crm,
    Average,
    StaticWeights,
    ConcatLinear,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Average,
        FusionKind::StaticWeights,
        FusionKind::ConcatLinear,
        FusionKind::Crm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Crm => "crm",
            FusionKind::Average => "average",
            FusionKind::StaticWeights => "static",
            FusionKind::ConcatLinear => "concat_linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "crm" => Ok(FusionKind::Crm),
            "average" => Ok(FusionKind::Average),
            "static" | "static_weights" => Ok(FusionKind::StaticWeights),
            "concat_linear" | "concat+linear" => Ok(FusionKind::ConcatLinear),
            _ => Err(Error::Unknown {
                what: "fusion kind",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImgLossWeights {
    /// Weight on each per-branch cross-entropy.
    pub branch_ce: f64,
    pub fuse_img: f64,
    pub fuse_cons: f64,
    pub fuse_ent: f64,
}

impl Default for ImgLossWeights {
    fn default() -> Self {
        Self {
            branch_ce: 1.0,
            fuse_img: 1.0,
            fuse_cons: 0.5,
            fuse_ent: 0.05,
        }
    }
}

fn ce(g: &mut Graph, logits: Var, y: u8) -> Result<Var> {
    Ok(g.cross_entropy_2class(logits, y as usize)?)
}

/// Cross-entropy of each branch's `[sim(z, t0), sim(z, t1)]` against `y`.
pub fn loss_branch_ce(g: &mut Graph, fusion: &FusionResult, y: u8) -> Result<Vec<Var>> {
    fusion.branch_logits.iter().map(|&l| ce(g, l, y)).collect()
}

#[derive(Clone, Debug)]
pub struct ImgTerms {
    pub branch_ce: Vec<Var>,
    pub fused_ce: Var,
    pub cons: Var,
    /// `−H(α)`; absent when the fusion has no weights.
    pub neg_entropy: Option<Var>,
    pub total: Var,
}

pub fn img_terms(
    g: &mut Graph,
    fusion: &FusionResult,
    y: u8,
    weights: &ImgLossWeights,
) -> Result<ImgTerms> {
    let branch_ce = loss_branch_ce(g, fusion, y)?;
    let fused_ce = ce(g, fusion.fused_logits, y)?;
    let n = fusion.branch_logits.len() as f64;
    let s = g.add_all(&fusion.branch_logits)?;
    let mean = g.scale(s, 1.0 / n)?;
    let cons = g.sq_l2_dist(fusion.fused_logits, mean)?;
    let neg_entropy = match fusion.alpha {
        Some(a) => {
            let h = g.entropy(a)?;
            Some(g.scale(h, -1.0)?)
        }
        None => None,
    };
    let mut parts = Vec::with_capacity(branch_ce.len() + 3);
    for &b in &branch_ce {
        parts.push(g.scale(b, weights.branch_ce)?);
    }
    parts.push(g.scale(fused_ce, weights.fuse_img)?);
    parts.push(g.scale(cons, weights.fuse_cons)?);
    if let Some(e) = neg_entropy {
        parts.push(g.scale(e, weights.fuse_ent)?);
    }
    let total = g.add_all(&parts)?;
    Ok(ImgTerms {
        branch_ce,
        fused_ce,
        cons,
        neg_entropy,
        total,
    })
}

pub fn loss_img_total(
    g: &mut Graph,
    fusion: &FusionResult,
    y: u8,
    weights: &ImgLossWeights,
) -> Result<Var> {
    Ok(img_terms(g, fusion, y, weights)?.total)
}

pub fn loss_total(g: &mut Graph, img: Var, text: Var) -> Result<Var> {
    Ok(g.add(img, text)?)
}

pub const STATIC_PREFIX: &str = "static.";
pub const CONCAT_W: &str = "concat.w";

fn static_name(b: Branch) -> String {
    format!("{STATIC_PREFIX}{}", b.short())
}

fn init_fusion_params(
    store: &mut ParamStore,
    kind: FusionKind,
    active: &[Branch],
    width: usize,
    crm_cfg: &CrmConfig,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    match kind {
        FusionKind::Crm if active.len() > 1 => crm::init_crm(store, width, crm_cfg, rng),
        FusionKind::StaticWeights => {
            for &b in active {
                store.insert(static_name(b), Tensor::vector(vec![0.0]))?;
            }
            Ok(())
        }
        FusionKind::ConcatLinear => {
            // stacked I/n blocks: the average of the branch embeddings
            let n = active.len();
            let mut w = vec![0.0; n * width * width];
            for blk in 0..n {
                for i in 0..width {
                    w[(blk * width + i) * width + i] = 1.0 / n as f64;
                }
            }
            store.insert(CONCAT_W, Tensor::matrix(n * width, width, w)?)?;
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Fusion by one of the comparison strategies.
pub fn fuse_baseline(
    g: &mut Graph,
    kind: FusionKind,
    bundle: &BranchBundle,
    pair: &TextPair,
    store: &ParamStore,
    active: &[Branch],
) -> Result<FusionResult> {
    crm::check_unit(g, pair.t0)?;
    crm::check_unit(g, pair.t1)?;
    let embeddings = crm::active_embeddings(g, bundle, active)?;
    let n = active.len();
    match kind {
        FusionKind::Average => {
            let a = g.constant(Tensor::vector(vec![1.0 / n as f64; n]))?;
            crm::weighted_fusion(g, active, embeddings, a, pair)
        }
        FusionKind::StaticWeights => {
            let logits = active
                .iter()
                .map(|&b| store.var(g, &static_name(b)))
                .collect::<Result<Vec<_>, _>>()?;
            let l = g.concat(&logits)?;
            let a = g.softmax(l)?;
            crm::weighted_fusion(g, active, embeddings, a, pair)
        }
        FusionKind::ConcatLinear => {
            let w = store.var(g, CONCAT_W)?;
            let d = g.value(embeddings[0]).len();
            if g.value(w).shape() != [n * d, d] {
                return Err(Error::BranchMismatch(format!(
                    "concat weights {:?} for {n} branches of width {d}",
                    g.value(w).shape()
                )));
            }
            let c = g.concat(&embeddings)?;
            let fused = g.matmul(c, w)?;
            crm::finish(g, active, embeddings, None, fused, pair)
        }
        FusionKind::Crm => Err(Error::Unknown {
            what: "baseline fusion",
            name: "crm".into(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub text: TextConfig,
    pub adapter: AdapterConfig,
    pub text_layers: usize,
    pub text_rho_init: f64,
    /// Branch adapters on the visual pathway.
    pub csr: bool,
    /// Gated text adapters and the stage-1 text objective.
    pub text_refinement: bool,
    pub fusion: FusionKind,
    pub crm: CrmConfig,
    pub branches: Vec<Branch>,
    pub train_views: ViewMode,
    pub eval_views: ViewMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual: VisualConfig::default(),
            text: TextConfig::default(),
            adapter: AdapterConfig::default(),
            text_layers: 3,
            text_rho_init: -2.0,
            csr: true,
            text_refinement: true,
            fusion: FusionKind::Crm,
            crm: CrmConfig::default(),
            branches: Branch::ALL.to_vec(),
            train_views: ViewMode::Masked,
            eval_views: ViewMode::Unmasked,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow model for finite-difference checks. Gates start half open so
    /// adapter gradients stay well above difference roundoff.
    pub fn gradcheck(seed: u64) -> Self {
        Self {
            visual: VisualConfig {
                layers: 2,
                width: 8,
                ..VisualConfig::default()
            },
            text: TextConfig {
                layers: 2,
                width: 8,
                ..TextConfig::default()
            },
            adapter: AdapterConfig {
                k: 2,
                hidden: 6,
                rho_init: 0.0,
            },
            text_layers: 2,
            text_rho_init: 0.0,
            crm: CrmConfig {
                attn_dim: 4,
                ..CrmConfig::default()
            },
            seed,
            ..Self::default()
        }
    }
}

/// Rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    None,
    Csr,
    CsrText,
    Full,
}

impl Components {
    pub const ALL: [Components; 4] = [
        Components::None,
        Components::Csr,
        Components::CsrText,
        Components::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Components::None => "none",
            Components::Csr => "CSR",
            Components::CsrText => "CSR+Text",
            Components::Full => "CSR+Text+CRM",
        }
    }

    /// The frozen row uses the global branch only, untrained.
    pub fn apply(self, mut cfg: ModelConfig) -> ModelConfig {
        match self {
            Components::None => {
                cfg.csr = false;
                cfg.text_refinement = false;
                cfg.branches = vec![Branch::Global];
                cfg.fusion = FusionKind::Average;
            }
            Components::Csr => {
                cfg.text_refinement = false;
                cfg.fusion = FusionKind::Average;
            }
            Components::CsrText => cfg.fusion = FusionKind::Average,
            Components::Full => cfg.fusion = FusionKind::Crm,
        }
        cfg
    }
}

/// Frozen parts of a model: encoders, adapter layout, prompts.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub csr: Vec<CsrAdapter>,
    pub tr: Option<TextAdapter>,
    pub prompts: Vec<PromptSet>,
    pub active: Vec<Branch>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
}

impl Model {
    /// Without contextual structure only the global branch is active.
    pub fn new(config: ModelConfig, class_names: &[String], contextual: bool) -> Result<Self> {
        let visual = VisualEncoder::new(config.visual.clone())?;
        let text = TextEncoder::new(config.text.clone())?;
        let active: Vec<Branch> = if contextual {
            Branch::ALL
                .into_iter()
                .filter(|b| config.branches.contains(b))
                .collect()
        } else {
            vec![Branch::Global]
        };
        if active.is_empty() {
            return Err(Error::EmptyActiveSet);
        }
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(config.seed, &[seeds::tag("params")]);
        let mut csr = Vec::new();
        if config.csr {
            for &b in &active {
                csr.push(CsrAdapter::init(
                    b,
                    visual.config.layers,
                    visual.config.width,
                    &config.adapter,
                    &mut store,
                    &mut rng,
                )?);
            }
        }
        let tr = if config.text_refinement {
            Some(TextAdapter::init(
                &text,
                config.text_layers,
                config.text_rho_init,
                &mut store,
                &mut rng,
            )?)
        } else {
            None
        };
        init_fusion_params(
            &mut store,
            config.fusion,
            &active,
            visual.config.width,
            &config.crm,
            &mut rng,
        )?;
        let prompts = class_names.iter().map(|c| PromptSet::standard(c)).collect();
        Ok(Self {
            arch: Architecture {
                config,
                visual,
                text,
                csr,
                tr,
                prompts,
                active,
            },
            store,
        })
    }

    pub fn encoder_hashes(&self) -> (String, String) {
        (
            self.arch.visual.weights_hash(),
            self.arch.text.weights_hash(),
        )
    }
}

impl Architecture {
    pub fn text_pair(&self, g: &mut Graph, store: &ParamStore, class: usize) -> Result<TextPair> {
        let prompts = self.prompts.get(class).ok_or_else(|| Error::Unknown {
            what: "class index",
            name: class.to_string(),
        })?;
        build_text_pair(g, prompts, &self.text, store, self.tr.as_ref())
    }

    /// Current text pair values for every class.
    pub fn text_pair_values(&self, store: &ParamStore) -> Result<Vec<(Tensor, Tensor)>> {
        (0..self.prompts.len())
            .map(|c| {
                let mut g = Graph::new();
                let p = self.text_pair(&mut g, store, c)?;
                Ok((g.value(p.t0).clone(), g.value(p.t1).clone()))
            })
            .collect()
    }

    pub fn inputs(
        &self,
        x: &Tensor,
        mask: Option<&[bool]>,
        mode: ViewMode,
    ) -> Result<BranchInputs> {
        branch_inputs(&self.visual, x, mask, mode, &self.active)
    }

    pub fn refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &BranchInputs,
    ) -> Result<BranchBundle> {
        refine_branches(g, &self.visual, store, inputs, &self.csr)
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bundle: &BranchBundle,
        pair: &TextPair,
    ) -> Result<FusionResult> {
        match self.config.fusion {
            FusionKind::Crm => crm::fuse(g, bundle, pair, store, &self.config.crm, &self.active),
            k => fuse_baseline(g, k, bundle, pair, store, &self.active),
        }
    }

    /// Unit global class token of the adapted global pathway.
    pub fn global_embedding(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let inputs = branch_inputs(&self.visual, x, None, ViewMode::Unmasked, &[Branch::Global])?;
        let adapters: Vec<CsrAdapter> = self
            .csr
            .iter()
            .filter(|a| a.branch == Branch::Global)
            .cloned()
            .collect();
        let mut g = Graph::new();
        let b = refine_branches(&mut g, &self.visual, store, &inputs, &adapters)?;
        let cls = g.value(b.branches[0].cls);
        let n = cls.norm();
        Ok(cls.map(|v| v / n))
    }
}

/// One support observation with its frozen branch inputs.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub inputs: BranchInputs,
    pub x: Tensor,
    pub class: usize,
    pub label: u8,
}

pub fn prepare_samples(arch: &Architecture, support: &[&Observation]) -> Result<Vec<TrainSample>> {
    support
        .iter()
        .map(|o| {
            Ok(TrainSample {
                inputs: arch.inputs(&o.x, Some(&o.mask), arch.config.train_views)?,
                x: o.x.clone(),
                class: o.subject_id,
                label: o.label,
            })
        })
        .collect()
}

/// Which objective groups a batch loss includes, and their fixed inputs.
#[derive(Clone, Debug)]
pub struct ObjectiveCtx<'a> {
    pub text: bool,
    pub img: bool,
    pub text_weights: &'a TextLossWeights,
    pub img_weights: &'a ImgLossWeights,
    pub progress: f64,
    /// Grounding target per class, unit-normalized.
    pub v_cls: &'a [Option<Tensor>],
    /// Calibration embedding per sample.
    pub v_img: &'a [Option<Tensor>],
    /// Text pair values to use as constants instead of running the text pathway.
    pub frozen_text: Option<&'a [(Tensor, Tensor)]>,
}

/// Term values of one evaluated batch loss.
#[derive(Clone, Debug, Default)]
pub struct TermSums {
    pub sums: BTreeMap<&'static str, f64>,
    pub alphas: Vec<Vec<f64>>,
}

impl TermSums {
    fn add(&mut self, key: &'static str, v: f64) {
        *self.sums.entry(key).or_insert(0.0) += v;
    }
}

/// Batch-mean objective over `batch` (indices into `samples`).
pub fn batch_objective(
    g: &mut Graph,
    arch: &Architecture,
    store: &ParamStore,
    samples: &[TrainSample],
    batch: &[usize],
    ctx: &ObjectiveCtx,
) -> Result<(Var, TermSums)> {
    let mut pairs: HashMap<usize, TextPair> = HashMap::new();
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut sums = TermSums::default();
    for &i in batch {
        let s = &samples[i];
        let pair = match pairs.get(&s.class) {
            Some(p) => *p,
            None => {
                let p = match ctx.frozen_text {
                    Some(v) => TextPair {
                        t0: g.constant(v[s.class].0.clone())?,
                        t1: g.constant(v[s.class].1.clone())?,
                    },
                    None => arch.text_pair(g, store, s.class)?,
                };
                pairs.insert(s.class, p);
                p
            }
        };
        let mut parts = Vec::with_capacity(2);
        if ctx.text {
            let v_cls = ctx.v_cls[s.class]
                .as_ref()
                .ok_or_else(|| Error::EmptyClass(arch.prompts[s.class].class_name.clone()))?;
            let v_cls = g.constant(v_cls.clone())?;
            let calib_v = match (&ctx.v_img[i], s.label) {
                (Some(v), 1) => Some(g.constant(v.clone())?),
                _ => None,
            };
            let t = text_terms(g, &pair, v_cls, calib_v, ctx.text_weights, ctx.progress)?;
            for (k, v) in [
                ("ortho", t.ortho),
                ("cons", t.cons),
                ("ground", t.ground),
                ("calib", t.calib),
            ] {
                if let Some(v) = v {
                    sums.add(k, g.scalar(v));
                }
            }
            sums.add("text", g.scalar(t.total));
            parts.push(t.total);
        }
        if ctx.img {
            let bundle = arch.refine(g, store, &s.inputs)?;
            let fusion = arch.fuse(g, store, &bundle, &pair)?;
            let t = img_terms(g, &fusion, s.label, ctx.img_weights)?;
            let ce_sum: f64 = t.branch_ce.iter().map(|&v| g.scalar(v)).sum();
            sums.add("branch_ce", ce_sum);
            sums.add("fused_ce", g.scalar(t.fused_ce));
            sums.add("fuse_cons", g.scalar(t.cons));
            if let Some(e) = t.neg_entropy {
                sums.add("neg_entropy", g.scalar(e));
            }
            sums.add("img", g.scalar(t.total));
            if let Some(a) = fusion.alpha_values(g) {
                sums.alphas.push(a);
            }
            parts.push(t.total);
        }
        per_sample.push(match parts.len() {
            1 => parts[0],
            _ => g.add_all(&parts)?,
        });
    }
    let s = g.add_all(&per_sample)?;
    let loss = g.scale(s, 1.0 / batch.len() as f64)?;
    Ok((loss, sums))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub schedule: Schedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Tabulated defaults: text lr 2e-5, image lr 3e-4 with step decay.
    Table7,
    /// Stage-2 lr 5e-5 with cosine decay.
    B1Protocol,
    /// Longer, faster schedule for the small synthetic world.
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table7" | "default" => Ok(Preset::Table7),
            "b1-protocol" => Ok(Preset::B1Protocol),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Unknown {
                what: "preset",
                name: s.to_string(),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table7 => "table7",
            Preset::B1Protocol => "b1-protocol",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage1: StagePlan,
    pub stage2: StagePlan,
    pub text_weights: TextLossWeights,
    pub img_weights: ImgLossWeights,
    /// Keep the text objective and text adapters live during stage 2.
    pub joint: bool,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self::preset(Preset::Table7)
    }
}

impl TrainPlan {
    pub fn preset(p: Preset) -> Self {
        let step = Schedule::PiecewiseStep {
            milestones: vec![16_000, 32_000],
            factor: 0.5,
        };
        let (stage1, stage2) = match p {
            Preset::Table7 => (
                StagePlan {
                    epochs: 5,
                    lr: 2e-5,
                    batch: 16,
                    schedule: Schedule::Constant,
                },
                StagePlan {
                    epochs: 20,
                    lr: 3e-4,
                    batch: 8,
                    schedule: step,
                },
            ),
            Preset::B1Protocol => (
                StagePlan {
                    epochs: 5,
                    lr: 2e-5,
                    batch: 16,
                    schedule: Schedule::Constant,
                },
                StagePlan {
                    epochs: 20,
                    lr: 5e-5,
                    batch: 8,
                    schedule: Schedule::Cosine,
                },
            ),
            Preset::Desk => (
                StagePlan {
                    epochs: 20,
                    lr: 2e-3,
                    batch: 16,
                    schedule: Schedule::Constant,
                },
                StagePlan {
                    epochs: 20,
                    lr: 3e-2,
                    batch: 8,
                    schedule: Schedule::Cosine,
                },
            ),
        };
        Self {
            stage1,
            stage2,
            text_weights: TextLossWeights::default(),
            img_weights: ImgLossWeights::default(),
            joint: false,
            seed: 0,
        }
    }

    pub fn with_epochs(mut self, stage1: usize, stage2: usize) -> Self {
        self.stage1.epochs = stage1;
        self.stage2.epochs = stage2;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Per-sample means of every recorded loss term.
    pub losses: BTreeMap<String, f64>,
    pub alpha_mean: Option<Vec<f64>>,
    pub alpha_std: Option<Vec<f64>>,
    pub gates: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn stage(&self, stage: &str) -> impl Iterator<Item = &EpochRecord> {
        let stage = stage.to_string();
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

pub fn is_text_param(name: &str) -> bool {
    name.starts_with("tr.")
}

pub fn is_visual_param(name: &str) -> bool {
    name.starts_with("csr.")
        || name.starts_with("crm.")
        || name.starts_with(STATIC_PREFIX)
        || name.starts_with("concat.")
}

pub fn alpha_stats(alphas: &[Vec<f64>]) -> Option<(Vec<f64>, Vec<f64>)> {
    let first = alphas.first()?;
    let n = alphas.len() as f64;
    let k = first.len();
    let mean: Vec<f64> = (0..k)
        .map(|j| alphas.iter().map(|a| a[j]).sum::<f64>() / n)
        .collect();
    let std = (0..k)
        .map(|j| (alphas.iter().map(|a| (a[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Some((mean, std))
}

fn gate_snapshot(arch: &Architecture, store: &ParamStore) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for a in &arch.csr {
        out.insert(format!("csr.{}", a.branch.short()), a.gates(store)?);
    }
    if let Some(tr) = &arch.tr {
        out.insert("tr".into(), tr.gates(store)?);
    }
    Ok(out)
}

/// Grounding targets from the normal support images, and per-sample
/// calibration embeddings, under the current parameters.
fn visual_targets(
    arch: &Architecture,
    store: &ParamStore,
    samples: &[TrainSample],
) -> Result<(Vec<Option<Tensor>>, Vec<Option<Tensor>>)> {
    let n_cls = arch.prompts.len();
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; n_cls];
    let mut v_img = Vec::with_capacity(samples.len());
    for s in samples {
        let v = arch.global_embedding(store, &s.x)?;
        if s.label == 0 {
            let slot = acc[s.class].get_or_insert_with(|| vec![0.0; v.len()]);
            for (a, b) in slot.iter_mut().zip(v.data()) {
                *a += b;
            }
        }
        v_img.push(Some(v));
    }
    let v_cls = acc
        .into_iter()
        .map(|a| {
            a.map(|v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                Tensor::vector(v.into_iter().map(|x| x / n).collect())
            })
        })
        .collect();
    Ok((v_cls, v_img))
}

struct StageRun<'a> {
    name: &'static str,
    plan: &'a StagePlan,
    trainable: &'a dyn Fn(&str) -> bool,
    text: bool,
    img: bool,
    frozen_text: bool,
}

fn run_stage(
    model: &mut Model,
    run: &StageRun,
    train: &TrainPlan,
    samples: &[TrainSample],
    history: &mut History,
) -> Result<()> {
    let steps_per_epoch = samples.len().div_ceil(run.plan.batch.max(1));
    let total_steps = (run.plan.epochs * steps_per_epoch) as u64;
    if total_steps == 0 || !model.store.names().any(|n| (run.trainable)(n)) {
        return Ok(());
    }
    let mut adam = Adam::new(OptimConfig {
        learning_rate: run.plan.lr,
        schedule: run.plan.schedule.clone(),
        total_steps,
        ..OptimConfig::default()
    })?;
    let mut rng = seeds::rng(train.seed, &[seeds::tag(run.name)]);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0u64;
    for epoch in 0..run.plan.epochs {
        let (v_cls, v_img) = if run.text {
            visual_targets(&model.arch, &model.store, samples)?
        } else {
            (Vec::new(), Vec::new())
        };
        let frozen = if run.frozen_text {
            Some(model.arch.text_pair_values(&model.store)?)
        } else {
            None
        };
        order.shuffle(&mut rng);
        let mut sums = TermSums::default();
        let lr = adam.current_lr();
        for batch in order.chunks(run.plan.batch.max(1)) {
            let progress = step as f64 / total_steps as f64;
            let ctx = ObjectiveCtx {
                text: run.text,
                img: run.img,
                text_weights: &train.text_weights,
                img_weights: &train.img_weights,
                progress,
                v_cls: &v_cls,
                v_img: &v_img,
                frozen_text: frozen.as_deref(),
            };
            let mut g = Graph::new();
            let (loss, s) =
                batch_objective(&mut g, &model.arch, &model.store, samples, batch, &ctx)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: run.name,
                    step,
                    reason: format!("loss is {value}"),
                });
            }
            let grads = g.backward(loss)?;
            adam.step(&mut model.store, &grads, |n| {
                (run.trainable)(n) && grads.get(n).is_some()
            })
            .map_err(|e| Error::Divergence {
                stage: run.name,
                step,
                reason: e.to_string(),
            })?;
            for (k, v) in s.sums {
                sums.add(k, v);
            }
            sums.alphas.extend(s.alphas);
            step += 1;
        }
        let n = samples.len() as f64;
        let stats = alpha_stats(&sums.alphas);
        history.records.push(EpochRecord {
            stage: run.name.into(),
            epoch,
            step,
            lr,
            losses: sums
                .sums
                .into_iter()
                .map(|(k, v)| (k.to_string(), v / n))
                .collect(),
            alpha_mean: stats.as_ref().map(|s| s.0.clone()),
            alpha_std: stats.map(|s| s.1),
            gates: gate_snapshot(&model.arch, &model.store)?,
        });
    }
    Ok(())
}

/// Objective group covered by [`objective_gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPart {
    Text,
    Img,
    Total,
}

impl LossPart {
    pub const ALL: [LossPart; 3] = [LossPart::Text, LossPart::Img, LossPart::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossPart::Text => "L_text",
            LossPart::Img => "L_img",
            LossPart::Total => "L_total",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Std of the Gaussian jitter added to every parameter before checking,
    /// so that zero-initialized layers get informative gradients.
    pub jitter: f64,
    /// Entries probed per parameter tensor.
    pub max_per_param: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            jitter: 0.3,
            max_per_param: 6,
            epsilon: 1e-5,
            seed: 0,
        }
    }
}

/// Finite-difference check of one objective group on a batch of `support`
/// against every parameter of `model`.
pub fn objective_gradcheck(
    model: &Model,
    support: &[&Observation],
    part: LossPart,
    weights: (&TextLossWeights, &ImgLossWeights),
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (jitter, seed) = (cfg.jitter, cfg.seed);
    let samples = prepare_samples(&model.arch, support)?;
    let mut store = model.store.clone();
    if jitter > 0.0 {
        let mut rng = seeds::rng(seed, &[seeds::tag("jitter")]);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            for v in store.get_mut(&n).expect("listed").data_mut() {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                *v += jitter * z;
            }
        }
    }
    let (v_cls, v_img) = visual_targets(&model.arch, &store, &samples)?;
    let batch: Vec<usize> = (0..samples.len()).collect();
    let ctx = ObjectiveCtx {
        text: part != LossPart::Img,
        img: part != LossPart::Text,
        text_weights: weights.0,
        img_weights: weights.1,
        progress: 0.5,
        v_cls: &v_cls,
        v_img: &v_img,
        frozen_text: None,
    };
    let arch = &model.arch;
    grad_check_sampled(
        |g: &mut Graph, p: &ParamStore| -> Result<Var> {
            Ok(batch_objective(g, arch, p, &samples, &batch, &ctx)?.0)
        },
        &store,
        cfg.epsilon,
        cfg.max_per_param,
    )
}

/// Stage 1 fits the text adapters to the text objective with everything
/// visual frozen; stage 2 fits the visual adapters and fusion to the image
/// objective with the text adapters frozen (unless `joint`).
pub fn train(model: &mut Model, plan: &TrainPlan, support: &[&Observation]) -> Result<History> {
    let mut history = History::default();
    if support.is_empty() {
        return Ok(history);
    }
    let samples = prepare_samples(&model.arch, support)?;
    let has_text = model.arch.tr.is_some();
    if has_text {
        run_stage(
            model,
            &StageRun {
                name: "stage1",
                plan: &plan.stage1,
                trainable: &is_text_param,
                text: true,
                img: false,
                frozen_text: false,
            },
            plan,
            &samples,
            &mut history,
        )?;
    }
    let joint = plan.joint && has_text;
    let stage2_trainable = move |n: &str| is_visual_param(n) || (joint && is_text_param(n));
    run_stage(
        model,
        &StageRun {
            name: "stage2",
            plan: &plan.stage2,
            trainable: &stage2_trainable,
            text: joint,
            img: true,
            frozen_text: !joint,
        },
        plan,
        &samples,
        &mut history,
    )?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csr::BranchOut;

    fn unit(v: &[f64]) -> Tensor {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::vector(v.iter().map(|x| x / n).collect())
    }

    fn setup(g: &mut Graph, embs: &[&[f64]]) -> (BranchBundle, TextPair) {
        let branches = Branch::ALL
            .iter()
            .zip(embs)
            .map(|(&b, e)| {
                let cls = g.constant(Tensor::vector(e.to_vec())).unwrap();
                BranchOut {
                    branch: b,
                    cls,
                    patches: cls,
                }
            })
            .collect();
        let pair = TextPair {
            t0: g.constant(unit(&[1.0, 0.0])).unwrap(),
            t1: g.constant(unit(&[0.0, 1.0])).unwrap(),
        };
        (BranchBundle { branches }, pair)
    }

    #[test]
    fn branch_ce_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::vector(vec![0.5, 0.5])).unwrap();
        let v = ce(&mut g, l, 0).unwrap();
        assert!((g.scalar(v) - std::f64::consts::LN_2).abs() < 1e-12);
        let l = g.constant(Tensor::vector(vec![-1.0, 1.0])).unwrap();
        let v = ce(&mut g, l, 1).unwrap();
        assert!((g.scalar(v) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_total_is_a_sum() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.5)).unwrap();
        let b = g.constant(Tensor::scalar(0.25)).unwrap();
        let t = loss_total(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(t), 1.75);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let t = loss_total(&mut g, z, z).unwrap();
        assert_eq!(g.scalar(t), 0.0);
    }

    #[test]
    fn uniform_alpha_entropy_term() {
        let mut g = Graph::new();
        let e: &[f64] = &[0.6, 0.8];
        let (b, p) = setup(&mut g, &[e, e, e]);
        let f = fuse_baseline(
            &mut g,
            FusionKind::Average,
            &b,
            &p,
            &ParamStore::new(),
            &Branch::ALL,
        )
        .unwrap();
        let t = img_terms(&mut g, &f, 0, &ImgLossWeights::default()).unwrap();
        assert!((g.scalar(t.neg_entropy.unwrap()) + 3f64.ln()).abs() < 1e-12);
        assert!(g.scalar(t.cons).abs() < 1e-20);
    }

    #[test]
    fn static_weights_start_at_average() {
        let mut g = Graph::new();
        let (b, p) = setup(&mut g, &[&[1.0, 0.2], &[0.3, -1.0], &[0.5, 0.5]]);
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(0, &[]);
        init_fusion_params(
            &mut store,
            FusionKind::StaticWeights,
            &Branch::ALL,
            2,
            &CrmConfig::default(),
            &mut rng,
        )
        .unwrap();
        let avg = fuse_baseline(&mut g, FusionKind::Average, &b, &p, &store, &Branch::ALL).unwrap();
        let st = fuse_baseline(
            &mut g,
            FusionKind::StaticWeights,
            &b,
            &p,
            &store,
            &Branch::ALL,
        )
        .unwrap();
        assert!(g.value(avg.fused).bit_eq(g.value(st.fused)));
    }

    #[test]
    fn crm_is_not_a_baseline() {
        let mut g = Graph::new();
        let e: &[f64] = &[0.6, 0.8];
        let (b, p) = setup(&mut g, &[e, e, e]);
        assert!(fuse_baseline(
            &mut g,
            FusionKind::Crm,
            &b,
            &p,
            &ParamStore::new(),
            &Branch::ALL
        )
        .is_err());
        assert!(FusionKind::parse("attention").is_err());
    }
}
