//! Image and pixel scoring, ranking metrics and the evaluation protocols.

use serde::{Deserialize, Serialize};

use crate::csr::Branch;
use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::objective::{train, Architecture, History, Model, ModelConfig, TrainPlan};
use crate::textref::TextPair;
use crate::worldgen::{sample_fewshot, Dataset, Observation, ShotMode, SplitTag};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ(sim1 − sim0)`.
pub fn score_from_sims(sim0: f64, sim1: f64) -> f64 {
    sigmoid(sim1 - sim0)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `m = sim(p, t1) − sim(p, t0)` per row of `patches`.
pub fn patch_margins(patches: &Tensor, t0: &[f64], t1: &[f64]) -> Vec<f64> {
    (0..patches.shape()[0])
        .map(|j| {
            let p = patches.row(j);
            cos(p, t1) - cos(p, t0)
        })
        .collect()
}

/// Bilinear resize of a row-major `src` grid, half-pixel centers with
/// edge clamping.
pub fn bilinear_upsample(
    src: &[f64],
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Vec<f64>> {
    if src.len() != from.0 * from.1 || from.0 == 0 || from.1 == 0 {
        return Err(Error::BranchMismatch(format!(
            "{} values for a {}x{} patch grid",
            src.len(),
            from.0,
            from.1
        )));
    }
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(to.0 * to.1);
    for r in 0..to.0 {
        let (r0, r1, fr) = coord(r, from.0, to.0);
        for c in 0..to.1 {
            let (c0, c1, fc) = coord(c, from.1, to.1);
            let at = |i: usize, j: usize| src[i * from.1 + j];
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bot = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    Ok(out)
}

/// Fused patch margins reshaped to the patch grid and upsampled to `out`.
pub fn score_pixels(
    margins: &[Vec<f64>],
    alpha: &[f64],
    patch_grid: (usize, usize),
    out: (usize, usize),
) -> Result<Vec<f64>> {
    let fused = crate::crm::fuse_patches(margins, alpha)?;
    bilinear_upsample(&fused, patch_grid, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub score: f64,
    pub alpha: Option<Vec<f64>>,
    /// Row-major `H × W` anomaly map.
    pub pixel_map: Vec<f64>,
    pub label: u8,
    pub subject: usize,
    pub context: usize,
}

/// Scores one observation with frozen text pair values per class.
pub fn score_observation(
    arch: &Architecture,
    store: &ParamStore,
    pairs: &[(Tensor, Tensor)],
    obs: &Observation,
) -> Result<SampleScore> {
    let (t0v, t1v) = pairs.get(obs.subject_id).ok_or_else(|| Error::Unknown {
        what: "class index",
        name: obs.subject_id.to_string(),
    })?;
    let mut g = Graph::new();
    let pair = TextPair {
        t0: g.constant(t0v.clone())?,
        t1: g.constant(t1v.clone())?,
    };
    let inputs = arch.inputs(&obs.x, Some(&obs.mask), arch.config.eval_views)?;
    let bundle = arch.refine(&mut g, store, &inputs)?;
    let fusion = arch.fuse(&mut g, store, &bundle, &pair)?;
    let fl = g.value(fusion.fused_logits).data();
    let score = score_from_sims(fl[0], fl[1]);
    let alpha = fusion.alpha_values(&g);
    let n = arch.active.len();
    let weights = alpha.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
    let margins: Vec<Vec<f64>> = arch
        .active
        .iter()
        .map(|&b| {
            let out = bundle.get(b).expect("active branch refined");
            patch_margins(g.value(out.patches), t0v.data(), t1v.data())
        })
        .collect();
    let pixel_map = score_pixels(&margins, &weights, arch.visual.patch_grid(), obs.grid())?;
    Ok(SampleScore {
        score,
        alpha,
        pixel_map,
        label: obs.label,
        subject: obs.subject_id,
        context: obs.context_id,
    })
}

fn split_labels(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::MetricUndefined(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::MetricUndefined("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` by a sort; ties are counted in half units so
/// the result matches a pairwise count exactly.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = split_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * neg_below + q);
        neg_below += q;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Step-wise average precision: `Σ (R_k − R_{k−1}) P_k` over descending
/// distinct thresholds.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = split_labels(scores, labels)?;
    if pos == 0 {
        return Err(Error::MetricUndefined(
            "AUPR needs a positive sample".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let v = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == v {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// 4-connected components of `mask` as a per-cell label (`usize::MAX` off).
pub fn components(mask: &[bool], grid: (usize, usize)) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = grid;
    let mut label = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        label[start] = id;
        stack.push(start);
        while let Some(cell) = stack.pop() {
            size += 1;
            let (r, c) = (cell / w, cell % w);
            let mut visit = |n: usize| {
                if mask[n] && label[n] == usize::MAX {
                    label[n] = id;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(cell - w);
            }
            if r + 1 < h {
                visit(cell + w);
            }
            if c > 0 {
                visit(cell - 1);
            }
            if c + 1 < w {
                visit(cell + 1);
            }
        }
        sizes.push(size);
    }
    (label, sizes)
}

/// Per-region overlap integrated over FPR ∈ [0, cap] and divided by `cap`.
/// Predictions are `M > t` for every distinct map value `t`; the curve
/// starts at the empty prediction and is held flat past its last point.
pub fn pro(
    maps: &[Vec<f64>],
    masks: &[Vec<bool>],
    grid: (usize, usize),
    fpr_cap: f64,
) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::MetricUndefined(format!(
            "{} maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::MetricUndefined(format!(
            "fpr cap {fpr_cap} outside (0, 1]"
        )));
    }
    let cells = grid.0 * grid.1;
    // (value, component id or None for a negative pixel)
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::with_capacity(maps.len() * cells);
    let mut comp_sizes = Vec::new();
    let mut negatives = 0usize;
    for (m, mask) in maps.iter().zip(masks) {
        if m.len() != cells || mask.len() != cells {
            return Err(Error::MetricUndefined(
                "map or mask size differs from grid".into(),
            ));
        }
        let (label, sizes) = components(mask, grid);
        let base = comp_sizes.len();
        comp_sizes.extend(sizes);
        for (cell, &v) in m.iter().enumerate() {
            if v.is_nan() {
                return Err(Error::MetricUndefined("NaN in anomaly map".into()));
            }
            let comp = (label[cell] != usize::MAX).then(|| base + label[cell]);
            negatives += comp.is_none() as usize;
            pixels.push((v, comp));
        }
    }
    if comp_sizes.is_empty() {
        return Err(Error::MetricUndefined("no anomalous pixels".into()));
    }
    if negatives == 0 {
        return Err(Error::MetricUndefined("no normal pixels".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_comp = comp_sizes.len() as f64;
    let mut covered = vec![0usize; comp_sizes.len()];
    let mut overlap_sum = 0.0;
    let mut fp = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pixels.len() {
        // the threshold at this distinct value predicts everything above it
        let v = pixels[i].0;
        curve.push((fp as f64 / negatives as f64, overlap_sum / n_comp));
        while i < pixels.len() && pixels[i].0 == v {
            match pixels[i].1 {
                Some(c) => {
                    covered[c] += 1;
                    overlap_sum += 1.0 / comp_sizes[c] as f64;
                }
                None => fp += 1,
            }
            i += 1;
        }
    }
    let mut area = 0.0;
    let mut last = (0.0, 0.0);
    for &(x, y) in &curve[1..] {
        if x >= fpr_cap {
            let t = if x > last.0 {
                (fpr_cap - last.0) / (x - last.0)
            } else {
                0.0
            };
            let y_cap = last.1 + t * (y - last.1);
            area += (fpr_cap - last.0) * (last.1 + y_cap) / 2.0;
            return Ok(area / fpr_cap);
        }
        area += (x - last.0) * (last.1 + y) / 2.0;
        last = (x, y);
    }
    area += (fpr_cap - last.0) * last.1;
    Ok(area / fpr_cap)
}

/// Pixel ground truth: the subject mask for anomalous samples, zeros otherwise.
pub fn pixel_truth(obs: &Observation) -> Vec<bool> {
    if obs.is_anomalous() {
        obs.mask.clone()
    } else {
        vec![false; obs.mask.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub n: usize,
    pub i_auroc: Option<f64>,
    pub i_aupr: Option<f64>,
    pub p_auroc: Option<f64>,
    pub alpha_mean: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub split: String,
    pub n: usize,
    pub i_auroc: f64,
    pub i_aupr: f64,
    pub p_auroc: Option<f64>,
    pub pro: Option<f64>,
    /// Mean fusion weight per active branch.
    pub alpha_mean: Option<Vec<f64>>,
    pub branches: Vec<String>,
    pub per_class: Vec<ClassRow>,
}

impl MetricResult {
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = format!(
            "{:<24} {:>5} {:>8} {:>8} {:>8}  alpha({})\n",
            "class",
            "n",
            "I-AUROC",
            "I-AUPR",
            "P-AUROC",
            self.branches.join(",")
        );
        let alpha = |a: &Option<Vec<f64>>| {
            a.as_ref().map_or("-".to_string(), |v| {
                v.iter()
                    .map(|x| format!("{x:.3}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
        };
        for r in &self.per_class {
            out.push_str(&format!(
                "{:<24} {:>5} {:>8} {:>8} {:>8}  {}\n",
                r.class,
                r.n,
                pct(r.i_auroc),
                pct(r.i_aupr),
                pct(r.p_auroc),
                alpha(&r.alpha_mean)
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>5} {:>8} {:>8} {:>8}  {}\n",
            "mean",
            self.n,
            pct(Some(self.i_auroc)),
            pct(Some(self.i_aupr)),
            pct(self.p_auroc),
            alpha(&self.alpha_mean)
        ));
        if let Some(p) = self.pro {
            out.push_str(&format!("PRO@0.3 {:.1}\n", 100.0 * p));
        }
        out
    }
}

fn mean_vec(vs: &[&Vec<f64>]) -> Option<Vec<f64>> {
    let first = vs.first()?;
    Some(
        (0..first.len())
            .map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / vs.len() as f64)
            .collect(),
    )
}

/// Metrics over scored observations; pixel metrics when `pixels` is set.
pub fn metrics(
    split: &str,
    class_names: &[String],
    branches: &[Branch],
    obs: &[&Observation],
    scores: &[SampleScore],
    pixels: bool,
) -> Result<MetricResult> {
    let s: Vec<f64> = scores.iter().map(|x| x.score).collect();
    let y: Vec<u8> = scores.iter().map(|x| x.label).collect();
    let i_auroc = auroc(&s, &y)?;
    let i_aupr = aupr(&s, &y)?;
    let (p_auroc, pro_v) = if pixels {
        let truth: Vec<Vec<bool>> = obs.iter().map(|o| pixel_truth(o)).collect();
        let flat_s: Vec<f64> = scores
            .iter()
            .flat_map(|x| x.pixel_map.iter().copied())
            .collect();
        let flat_y: Vec<u8> = truth.iter().flatten().map(|&b| b as u8).collect();
        let maps: Vec<Vec<f64>> = scores.iter().map(|x| x.pixel_map.clone()).collect();
        let grid = obs.first().map(|o| o.grid()).unwrap_or((0, 0));
        (
            Some(auroc(&flat_s, &flat_y)?),
            Some(pro(&maps, &truth, grid, 0.3)?),
        )
    } else {
        (None, None)
    };
    let mut per_class = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let idx: Vec<usize> = (0..scores.len())
            .filter(|&i| scores[i].subject == c)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let cs: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let cy: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
        let p_auroc = if pixels {
            let fs: Vec<f64> = idx
                .iter()
                .flat_map(|&i| scores[i].pixel_map.iter().copied())
                .collect();
            let fy: Vec<u8> = idx
                .iter()
                .flat_map(|&i| pixel_truth(obs[i]).into_iter().map(|b| b as u8))
                .collect();
            auroc(&fs, &fy).ok()
        } else {
            None
        };
        let alphas: Vec<&Vec<f64>> = idx
            .iter()
            .filter_map(|&i| scores[i].alpha.as_ref())
            .collect();
        per_class.push(ClassRow {
            class: name.clone(),
            n: idx.len(),
            i_auroc: auroc(&cs, &cy).ok(),
            i_aupr: aupr(&cs, &cy).ok(),
            p_auroc,
            alpha_mean: mean_vec(&alphas),
        });
    }
    let alphas: Vec<&Vec<f64>> = scores.iter().filter_map(|x| x.alpha.as_ref()).collect();
    Ok(MetricResult {
        split: split.to_string(),
        n: scores.len(),
        i_auroc,
        i_aupr,
        p_auroc,
        pro: pro_v,
        alpha_mean: mean_vec(&alphas),
        branches: branches.iter().map(|b| b.short().to_string()).collect(),
        per_class,
    })
}

/// Scores every observation of `split` and reduces to metrics.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: SplitTag,
    pixels: bool,
) -> Result<(MetricResult, Vec<SampleScore>)> {
    if !dataset.has_split(split) {
        return Err(Error::Protocol(format!(
            "dataset has no {} split",
            split.name()
        )));
    }
    let pairs = model.arch.text_pair_values(&model.store)?;
    let obs: Vec<&Observation> = dataset.split(split).collect();
    let scores = obs
        .iter()
        .map(|o| score_observation(&model.arch, &model.store, &pairs, o))
        .collect::<Result<Vec<_>>>()?;
    let m = metrics(
        split.name(),
        &dataset.spec.class_names,
        &model.arch.active,
        &obs,
        &scores,
        pixels,
    )?;
    Ok((m, scores))
}

/// Scores that read the true label; a sanity ceiling for the harness.
pub fn oracle_metrics(dataset: &Dataset, split: SplitTag) -> Result<MetricResult> {
    let obs: Vec<&Observation> = dataset.split(split).collect();
    let scores: Vec<SampleScore> = obs
        .iter()
        .map(|o| SampleScore {
            score: dataset.spec.label(o.subject_id, o.context_id) as f64,
            alpha: None,
            pixel_map: pixel_truth(o).into_iter().map(|b| b as u8 as f64).collect(),
            label: o.label,
            subject: o.subject_id,
            context: o.context_id,
        })
        .collect();
    metrics(
        split.name(),
        &dataset.spec.class_names,
        &[],
        &obs,
        &scores,
        true,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Balanced N-shot support from the train split, evaluated cross-context.
    FewshotCc,
    /// N normal shots per class, evaluated cross-context.
    NormalOnlyCc,
    /// Balanced N-shot support, evaluated on the same-context validation split.
    InDistribution,
}

impl ProtocolKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fewshot_cc" | "fewshot-cc" => Ok(ProtocolKind::FewshotCc),
            "normal_only_cc" | "normal-only-cc" => Ok(ProtocolKind::NormalOnlyCc),
            "in_distribution" | "in-distribution" => Ok(ProtocolKind::InDistribution),
            _ => Err(Error::Unknown {
                what: "protocol",
                name: s.to_string(),
            }),
        }
    }

    pub fn shot_mode(self) -> ShotMode {
        match self {
            ProtocolKind::NormalOnlyCc => ShotMode::NormalOnly,
            _ => ShotMode::Balanced,
        }
    }

    pub fn eval_split(self) -> SplitTag {
        match self {
            ProtocolKind::InDistribution => SplitTag::Val,
            _ => SplitTag::CrossContext,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub shots: usize,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    /// Skip training and evaluate the initialized model.
    pub untrained: bool,
    pub pixels: bool,
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub metrics: MetricResult,
    pub history: History,
    pub model: Model,
    pub scores: Vec<SampleScore>,
}

pub fn run_protocol(cfg: &ProtocolConfig, dataset: &Dataset) -> Result<ProtocolOutcome> {
    for tag in [SplitTag::Train, cfg.kind.eval_split()] {
        if !dataset.has_split(tag) {
            return Err(Error::Protocol(format!(
                "protocol needs the {} split",
                tag.name()
            )));
        }
    }
    let mut model = Model::new(
        cfg.model.clone(),
        &dataset.spec.class_names,
        dataset.contextual,
    )?;
    let history = if cfg.untrained {
        History::default()
    } else {
        let support = sample_fewshot(dataset, cfg.shots, cfg.kind.shot_mode(), cfg.plan.seed)?;
        let refs: Vec<&Observation> = support.iter().collect();
        train(&mut model, &cfg.plan, &refs)?
    };
    let (metrics, scores) = evaluate(&model, dataset, cfg.kind.eval_split(), cfg.pixels)?;
    Ok(ProtocolOutcome {
        metrics,
        history,
        model,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut twice = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            p += 1;
            for (j, &lj) in labels.iter().enumerate() {
                if lj == 1 {
                    continue;
                }
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        n += labels.iter().filter(|&&l| l != 1).count() as u64;
        twice as f64 / (2.0 * p as f64 * n as f64)
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 1, 0, 1];
        assert_eq!(auroc(&s, &y).unwrap(), pairwise(&s, &y));
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_from_sims(0.3, 0.3), 0.5);
        assert!((score_from_sims(-1.0, 1.0) - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!(score_from_sims(0.1, 0.5) < score_from_sims(0.1, 0.6));
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(aupr(&[0.1, 0.2, 0.9], &[0, 0, 1]).unwrap(), 1.0);
        assert!(aupr(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn bilinear_keeps_constants_and_shape() {
        let m = bilinear_upsample(&[0.25; 16], (4, 4), (16, 16)).unwrap();
        assert_eq!(m.len(), 256);
        assert!(m.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pro_examples() {
        let mask: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let exact: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
        assert!((pro(&[exact], &[mask.clone()], (4, 4), 0.3).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pro(&[vec![0.0; 16]], &[mask], (4, 4), 0.3).unwrap(), 0.0);
        assert!(pro(&[vec![0.0; 16]], &[vec![false; 16]], (4, 4), 0.3).is_err());
    }

    #[test]
    fn components_are_four_connected() {
        // diagonal neighbours stay separate
        let mask = [true, false, false, true];
        let (_, sizes) = components(&mask, (2, 2));
        assert_eq!(sizes, vec![1, 1]);
    }
}
