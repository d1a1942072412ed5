use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Observation, World, WorldSpec};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    CrossContext,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::CrossContext => "cross_context",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub cc: usize,
}

impl Default for SplitCounts {
    /// 2095 same-context samples split 80/20, plus 905 cross-context.
    fn default() -> Self {
        Self {
            train: 1676,
            val: 419,
            cc: 905,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Target per-class Jaccard band between same-context and cross-context
    /// context sets.
    pub jaccard: (f64, f64),
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            jaccard: (0.07, 0.27),
            seed: 0,
        }
    }
}

/// Realized context assignment for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub ss_normal: Vec<usize>,
    pub ss_anomalous: Vec<usize>,
    pub cc_normal: Vec<usize>,
    pub cc_anomalous: Vec<usize>,
}

impl ClassSplit {
    pub fn ss_contexts(&self) -> BTreeSet<usize> {
        self.ss_normal
            .iter()
            .chain(&self.ss_anomalous)
            .copied()
            .collect()
    }

    pub fn cc_contexts(&self) -> BTreeSet<usize> {
        self.cc_normal
            .iter()
            .chain(&self.cc_anomalous)
            .copied()
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub plan: SplitPlan,
    pub counts: SplitCounts,
    pub assignments: Vec<ClassSplit>,
    pub samples: Vec<Observation>,
    /// Whether samples carry subject/context structure (tri-branch fusion).
    pub contextual: bool,
}

impl Dataset {
    pub fn split(&self, tag: SplitTag) -> impl Iterator<Item = &Observation> {
        self.samples.iter().filter(move |o| o.split == tag)
    }

    pub fn class_name(&self, subject: usize) -> &str {
        &self.spec.class_names[subject]
    }

    pub fn has_split(&self, tag: SplitTag) -> bool {
        self.samples.iter().any(|o| o.split == tag)
    }

    /// SHA-256 over the world spec, the split plan and every sample bit.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let header = serde_json::to_vec(&(
            &self.spec,
            &self.plan,
            &self.counts,
            &self.assignments,
            self.contextual,
        ))
        .expect("serializable");
        h.update(&header);
        for o in &self.samples {
            for v in [
                o.subject_id as u64,
                o.context_id as u64,
                o.label as u64,
                o.instance_seed,
            ] {
                h.update(v.to_le_bytes());
            }
            h.update(o.split.name().as_bytes());
            for d in o.x.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in o.x.data() {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(o.mask.iter().map(|&m| m as u8).collect::<Vec<_>>());
        }
        hex::encode(h.finalize())
    }
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Clone, Copy, Debug)]
struct Config {
    ss: (usize, usize),
    cc: (usize, usize),
    overlap: (usize, usize),
}

impl Config {
    fn jaccard(&self) -> f64 {
        let o = self.overlap.0 + self.overlap.1;
        let union = self.ss.0 + self.ss.1 + self.cc.0 + self.cc.1 - o;
        o as f64 / union as f64
    }

    /// Prefer splits where both the same-context pool and the unseen part of
    /// the cross-context pool are large for each label. Remaining ties are
    /// broken at random, which spreads the realized overlap across the band.
    fn score(&self) -> (usize, usize) {
        let fresh = (self.cc.0 - self.overlap.0, self.cc.1 - self.overlap.1);
        let floor = self.ss.0.min(self.ss.1).min(fresh.0).min(fresh.1);
        (floor, self.ss.0 + self.ss.1)
    }
}

fn configs(n_p: usize, n_q: usize) -> Vec<Config> {
    let per_label = |n: usize| {
        let mut v = Vec::new();
        for ss in 1..=n {
            for cc in 1..=n {
                let lo = (ss + cc).saturating_sub(n);
                for o in lo..=ss.min(cc) {
                    v.push((ss, cc, o));
                }
            }
        }
        v
    };
    let mut out = Vec::new();
    for &(sp, cp, op) in &per_label(n_p) {
        for &(sq, cq, oq) in &per_label(n_q) {
            out.push(Config {
                ss: (sp, sq),
                cc: (cp, cq),
                overlap: (op, oq),
            });
        }
    }
    out
}

fn assign_class<R: rand::Rng>(
    row: &[bool],
    class: &str,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<ClassSplit> {
    let mut normal: Vec<usize> = (0..row.len()).filter(|&c| row[c]).collect();
    let mut anomalous: Vec<usize> = (0..row.len()).filter(|&c| !row[c]).collect();
    let all = configs(normal.len(), anomalous.len());
    let tol = 1e-12;
    let feasible: Vec<&Config> = all
        .iter()
        .filter(|c| c.jaccard() >= lo - tol && c.jaccard() <= hi + tol)
        .collect();
    let best = feasible.iter().map(|c| c.score()).max().ok_or_else(|| {
        let mut achievable: Vec<f64> = all.iter().map(Config::jaccard).collect();
        achievable.sort_by(f64::total_cmp);
        achievable.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        Error::InfeasibleSplit {
            class: class.to_string(),
            lo,
            hi,
            achievable,
        }
    })?;
    let top: Vec<&&Config> = feasible.iter().filter(|c| c.score() == best).collect();
    let cfg = **top.choose(rng).expect("non-empty");
    normal.shuffle(rng);
    anomalous.shuffle(rng);
    let take = |pool: &[usize], ss: usize, cc: usize, o: usize| {
        let ss_set = pool[..ss].to_vec();
        let mut cc_set = pool[..o].to_vec();
        cc_set.extend_from_slice(&pool[ss..ss + cc - o]);
        (ss_set, cc_set)
    };
    let (ss_normal, cc_normal) = take(&normal, cfg.ss.0, cfg.cc.0, cfg.overlap.0);
    let (ss_anomalous, cc_anomalous) = take(&anomalous, cfg.ss.1, cfg.cc.1, cfg.overlap.1);
    Ok(ClassSplit {
        ss_normal,
        ss_anomalous,
        cc_normal,
        cc_anomalous,
    })
}

/// Builds same-context (train/val) and cross-context splits. Samples are
/// dealt round-robin over classes with alternating labels, and round-robin
/// over the contexts assigned to each (class, label).
pub fn make_splits(world: &World, plan: &SplitPlan, counts: SplitCounts) -> Result<Dataset> {
    let (lo, hi) = plan.jaccard;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::InvalidSpec(format!(
            "Jaccard band [{lo}, {hi}] is not within [0, 1]"
        )));
    }
    let spec = &world.spec;
    let mut rng = seeds::rng(plan.seed, &[seeds::tag("split-plan")]);
    let assignments = spec
        .compat
        .iter()
        .zip(&spec.class_names)
        .map(|(row, name)| assign_class(row, name, lo, hi, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::with_capacity(counts.train + counts.val + counts.cc);
    let n_s = spec.n_subjects;
    for (tag, n) in [
        (SplitTag::Train, counts.train),
        (SplitTag::Val, counts.val),
        (SplitTag::CrossContext, counts.cc),
    ] {
        for i in 0..n {
            let a = i % n_s;
            let k = i / n_s;
            let label = (k % 2) as u8;
            let slot = k / 2;
            let asg = &assignments[a];
            let pool = match (tag, label) {
                (SplitTag::CrossContext, 0) => &asg.cc_normal,
                (SplitTag::CrossContext, _) => &asg.cc_anomalous,
                (_, 0) => &asg.ss_normal,
                (_, _) => &asg.ss_anomalous,
            };
            let c = pool[slot % pool.len()];
            let inst = seeds::derive(plan.seed ^ spec.seed, &[seeds::tag(tag.name()), i as u64]);
            let obs = world.render(a, c, inst, tag);
            debug_assert_eq!(obs.label, label);
            samples.push(obs);
        }
    }
    let d = Dataset {
        spec: spec.clone(),
        plan: plan.clone(),
        counts,
        assignments,
        samples,
        contextual: true,
    };
    for (a, asg) in d.assignments.iter().enumerate() {
        let seen = |tag: SplitTag| -> BTreeSet<usize> {
            d.samples
                .iter()
                .filter(|o| {
                    o.subject_id == a
                        && (o.split == tag || (tag == SplitTag::Train && o.split == SplitTag::Val))
                })
                .map(|o| o.context_id)
                .collect()
        };
        if seen(SplitTag::Train) != asg.ss_contexts()
            || seen(SplitTag::CrossContext) != asg.cc_contexts()
        {
            return Err(Error::InvalidSpec(format!(
                "split counts too small to cover every assigned context of class `{}`",
                d.class_name(a)
            )));
        }
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotMode {
    Balanced,
    NormalOnly,
}

/// N normal (+ N anomalous when balanced) train samples per class, uniform
/// without replacement.
pub fn sample_fewshot(
    dataset: &Dataset,
    n_shots: usize,
    mode: ShotMode,
    seed: u64,
) -> Result<Vec<Observation>> {
    if n_shots == 0 {
        return Err(Error::InvalidSpec("n_shots must be positive".into()));
    }
    let mut rng = seeds::rng(seed, &[seeds::tag("fewshot")]);
    let mut out = Vec::new();
    for a in 0..dataset.spec.n_subjects {
        let labels: &[u8] = match mode {
            ShotMode::Balanced => &[0, 1],
            ShotMode::NormalOnly => &[0],
        };
        for &label in labels {
            let pool: Vec<&Observation> = dataset
                .split(SplitTag::Train)
                .filter(|o| o.subject_id == a && o.label == label)
                .collect();
            if pool.len() < n_shots {
                return Err(Error::InsufficientSamples {
                    class: dataset.class_name(a).to_string(),
                    label: if label == 0 { "normal" } else { "anomalous" },
                    needed: n_shots,
                    available: pool.len(),
                });
            }
            out.extend(
                pool.choose_multiple(&mut rng, n_shots)
                    .map(|o| (*o).clone()),
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardRow {
    pub class: String,
    pub jaccard: f64,
    pub ss_contexts: Vec<usize>,
    pub cc_contexts: Vec<usize>,
    /// (normal, anomalous) per split: train, val, cross_context
    pub counts: [(usize, usize); 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub rows: Vec<JaccardRow>,
}

impl JaccardReport {
    pub fn min(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.jaccard)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.jaccard)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>7} {:>11} {:>11} {:>11}\n",
            "class", "jaccard", "train n/a", "val n/a", "cc n/a"
        );
        for r in &self.rows {
            let c = |i: usize| format!("{}/{}", r.counts[i].0, r.counts[i].1);
            s += &format!(
                "{:<22} {:>7.3} {:>11} {:>11} {:>11}\n",
                r.class,
                r.jaccard,
                c(0),
                c(1),
                c(2)
            );
        }
        s
    }
}

/// Per-class Jaccard overlap between the context sets observed in the
/// same-context splits and in the cross-context split, with label counts.
pub fn jaccard_report(dataset: &Dataset) -> Result<JaccardReport> {
    let splits = [SplitTag::Train, SplitTag::Val, SplitTag::CrossContext];
    let present = splits.iter().filter(|&&t| dataset.has_split(t)).count();
    if present < 2 {
        return Err(Error::Protocol(
            "Jaccard report needs at least two splits".into(),
        ));
    }
    let mut rows = Vec::new();
    for a in 0..dataset.spec.n_subjects {
        let mut ss = BTreeSet::new();
        let mut cc = BTreeSet::new();
        let mut counts = [(0usize, 0usize); 3];
        for o in dataset.samples.iter().filter(|o| o.subject_id == a) {
            let idx = splits
                .iter()
                .position(|&t| t == o.split)
                .expect("known split");
            if o.split == SplitTag::CrossContext {
                cc.insert(o.context_id);
            } else {
                ss.insert(o.context_id);
            }
            if o.label == 0 {
                counts[idx].0 += 1;
            } else {
                counts[idx].1 += 1;
            }
        }
        if ss.is_empty() && cc.is_empty() {
            return Err(Error::EmptyClass(dataset.class_name(a).to_string()));
        }
        rows.push(JaccardRow {
            class: dataset.class_name(a).to_string(),
            jaccard: jaccard(&ss, &cc),
            ss_contexts: ss.into_iter().collect(),
            cc_contexts: cc.into_iter().collect(),
            counts,
        });
    }
    Ok(JaccardReport { rows })
}
