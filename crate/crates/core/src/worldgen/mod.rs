//! Synthetic subject/context world: compatibility table, renderer, splits,
//! few-shot sampling, collision pairs and split-diversity analytics.

mod export;
mod splits;

pub use export::{export_dataset, import_dataset, MANIFEST_SCHEMA_VERSION};
pub use splits::{
    jaccard, jaccard_report, make_splits, sample_fewshot, ClassSplit, Dataset, JaccardReport,
    JaccardRow, ShotMode, SplitCounts, SplitPlan, SplitTag,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seeds;

pub const DEFAULT_CLASS_NAMES: [&str; 15] = [
    "Aeroplane",
    "Boat",
    "Car_parked",
    "Motorbike",
    "Sofa",
    "Shopping_cart",
    "Camping_tent",
    "Animal",
    "Person_running",
    "Person_cycling",
    "Person_riding_horse",
    "Person_skateboarding",
    "Person_with_umbrella",
    "Child_playing",
    "Fire",
];

/// Appearance knobs of the renderer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Std of the per-id constant motif vector.
    pub motif_scale: f64,
    /// Std of the per-id tiled texture.
    pub texture_scale: f64,
    /// Side of the square texture tile.
    pub tile: usize,
    /// Std of the per-instance pixel noise.
    pub noise_std: f64,
    /// Allowed subject-rectangle area as a fraction of the grid.
    pub mask_area: (f64, f64),
    /// Share of motif variance explained by the latent factors, when the
    /// table came from [`sample_latent`].
    #[serde(default)]
    pub semantic: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            motif_scale: 1.0,
            texture_scale: 0.5,
            tile: 4,
            noise_std: 0.5,
            mask_area: (0.25, 0.6),
            semantic: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_subjects: usize,
    pub n_contexts: usize,
    /// (H, W)
    pub grid: (usize, usize),
    pub feature_dim: usize,
    /// `compat[a][c]` true when subject `a` is normal in context `c`.
    pub compat: Vec<Vec<bool>>,
    pub class_names: Vec<String>,
    pub render: RenderParams,
    /// Factors the table was drawn from; absent for explicit tables.
    #[serde(default)]
    pub latent: Option<LatentFactors>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    pub subject: Vec<Vec<f64>>,
    pub context: Vec<Vec<f64>>,
}

impl WorldSpec {
    /// World with an explicit compatibility table and default rendering.
    pub fn with_table(compat: Vec<Vec<bool>>, seed: u64) -> Result<Self> {
        let n_subjects = compat.len();
        let n_contexts = compat.first().map_or(0, Vec::len);
        let spec = Self {
            n_subjects,
            n_contexts,
            grid: (16, 16),
            feature_dim: 8,
            compat,
            class_names: default_class_names(n_subjects),
            render: RenderParams::default(),
            latent: None,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// World whose table is drawn from a rank-`rank` latent affinity.
    pub fn generated(n_subjects: usize, n_contexts: usize, rank: usize, seed: u64) -> Result<Self> {
        let (compat, latent) = sample_latent(n_subjects, n_contexts, rank, seed)?;
        let mut spec = Self::with_table(compat, seed)?;
        spec.latent = Some(latent);
        Ok(spec)
    }

    /// 15 subjects, 12 contexts.
    pub fn default_world(seed: u64) -> Result<Self> {
        Self::generated(15, 12, 2, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_subjects == 0 || self.n_contexts == 0 {
            return bad("world needs at least one subject and one context".into());
        }
        if self.compat.len() != self.n_subjects
            || self.compat.iter().any(|r| r.len() != self.n_contexts)
        {
            return bad(format!(
                "compat table must be {}x{}",
                self.n_subjects, self.n_contexts
            ));
        }
        for (a, row) in self.compat.iter().enumerate() {
            if !row.iter().any(|&v| v) || row.iter().all(|&v| v) {
                return bad(format!(
                    "subject {a} needs at least one compatible and one incompatible context"
                ));
            }
        }
        if self.class_names.len() != self.n_subjects {
            return bad("one class name per subject required".into());
        }
        let (h, w) = self.grid;
        if h < 2 || w < 2 || self.feature_dim == 0 {
            return bad("grid must be at least 2x2 with one feature channel".into());
        }
        let (lo, hi) = self.render.mask_area;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad("mask_area must satisfy 0 < lo <= hi < 1".into());
        }
        if self.render.tile == 0 {
            return bad("tile must be positive".into());
        }
        Ok(())
    }

    pub fn is_compatible(&self, subject: usize, context: usize) -> bool {
        self.compat[subject][context]
    }

    /// 0 = normal, 1 = anomalous.
    pub fn label(&self, subject: usize, context: usize) -> u8 {
        u8::from(!self.compat[subject][context])
    }
}

pub fn default_class_names(n: usize) -> Vec<String> {
    if n == DEFAULT_CLASS_NAMES.len() {
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("subject_{i}")).collect()
    }
}

/// Balanced table from a low-rank affinity `s_a · e_c`: each subject is
/// compatible with the upper half of its affinities, and draws are rejected
/// until every context is anomalous for about half of the subjects.
pub fn sample_compat(
    n_subjects: usize,
    n_contexts: usize,
    rank: usize,
    seed: u64,
) -> Result<Vec<Vec<bool>>> {
    Ok(sample_latent(n_subjects, n_contexts, rank, seed)?.0)
}

/// [`sample_compat`] together with the factors it was drawn from.
pub fn sample_latent(
    n_subjects: usize,
    n_contexts: usize,
    rank: usize,
    seed: u64,
) -> Result<(Vec<Vec<bool>>, LatentFactors)> {
    if n_contexts < 2 {
        return Err(Error::InvalidSpec(
            "a generated table needs at least two contexts".into(),
        ));
    }
    if rank == 0 {
        return Err(Error::InvalidSpec("latent rank must be positive".into()));
    }
    let mut rng = seeds::rng(seed, &[seeds::tag("compat")]);
    let n_compat = n_contexts / 2;
    let mut tolerance = 0usize;
    let mut attempts = 0usize;
    loop {
        let s: Vec<Vec<f64>> = (0..n_subjects)
            .map(|_| gaussian(&mut rng, rank, 1.0))
            .collect();
        let e: Vec<Vec<f64>> = (0..n_contexts)
            .map(|_| gaussian(&mut rng, rank, 1.0))
            .collect();
        let table: Vec<Vec<bool>> = s
            .iter()
            .map(|sa| {
                let aff: Vec<f64> = e.iter().map(|ec| dot(sa, ec)).collect();
                let mut order: Vec<usize> = (0..n_contexts).collect();
                order.sort_by(|&i, &j| aff[j].total_cmp(&aff[i]));
                let mut row = vec![false; n_contexts];
                for &c in &order[..n_compat.max(1)] {
                    row[c] = true;
                }
                row
            })
            .collect();
        let half_lo = n_subjects / 2;
        let half_hi = n_subjects.div_ceil(2);
        let balanced = n_subjects < 2
            || (0..n_contexts).all(|c| {
                let anomalous = table.iter().filter(|r| !r[c]).count();
                anomalous + tolerance >= half_lo && anomalous <= half_hi + tolerance
            });
        if balanced {
            return Ok((
                table,
                LatentFactors {
                    subject: s,
                    context: e,
                },
            ));
        }
        attempts += 1;
        if attempts.is_multiple_of(2000) {
            tolerance += 1;
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// H×W×F feature grid.
    pub x: Tensor,
    /// Row-major H×W, true on subject cells.
    pub mask: Vec<bool>,
    pub subject_id: usize,
    pub context_id: usize,
    pub label: u8,
    pub split: SplitTag,
    pub instance_seed: u64,
}

impl Observation {
    pub fn grid(&self) -> (usize, usize) {
        (self.x.shape()[0], self.x.shape()[1])
    }

    pub fn is_anomalous(&self) -> bool {
        self.label == 1
    }
}

/// Immutable world: spec plus the per-id motifs derived from its seed.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    subject_motif: Vec<Vec<f64>>,
    subject_texture: Vec<Vec<f64>>,
    context_motif: Vec<Vec<f64>>,
    context_texture: Vec<Vec<f64>>,
}

pub fn build_world(spec: WorldSpec) -> Result<World> {
    spec.validate()?;
    let f = spec.feature_dim;
    let r = &spec.render;
    let tex_len = r.tile * r.tile * f;
    let mut rng = seeds::rng(spec.seed, &[seeds::tag("subject-motifs")]);
    let mut subject_motif: Vec<Vec<f64>> = (0..spec.n_subjects)
        .map(|_| gaussian(&mut rng, f, r.motif_scale))
        .collect();
    let subject_texture = (0..spec.n_subjects)
        .map(|_| gaussian(&mut rng, tex_len, r.texture_scale))
        .collect();
    let mut rng = seeds::rng(spec.seed, &[seeds::tag("context-motifs")]);
    let mut context_motif: Vec<Vec<f64>> = (0..spec.n_contexts)
        .map(|_| gaussian(&mut rng, f, r.motif_scale))
        .collect();
    let context_texture = (0..spec.n_contexts)
        .map(|_| gaussian(&mut rng, tex_len, r.texture_scale))
        .collect();
    if let (Some(lat), true) = (&spec.latent, r.semantic > 0.0) {
        let mut rng = seeds::rng(spec.seed, &[seeds::tag("semantic")]);
        mix_latent(&mut subject_motif, &lat.subject, r, &mut rng);
        mix_latent(&mut context_motif, &lat.context, r, &mut rng);
    }
    Ok(World {
        spec,
        subject_motif,
        subject_texture,
        context_motif,
        context_texture,
    })
}

/// `m ← √(1−β)·m + √β·s·P·z/√k` with a fresh Gaussian projection `P`.
fn mix_latent<R: Rng>(
    motifs: &mut [Vec<f64>],
    factors: &[Vec<f64>],
    r: &RenderParams,
    rng: &mut R,
) {
    let Some(k) = factors.first().map(Vec::len) else {
        return;
    };
    let f = motifs.first().map_or(0, Vec::len);
    let proj = gaussian(rng, f * k, 1.0);
    let beta = r.semantic.clamp(0.0, 1.0);
    let (keep, add) = (
        (1.0 - beta).sqrt(),
        beta.sqrt() * r.motif_scale / (k as f64).sqrt(),
    );
    for (m, z) in motifs.iter_mut().zip(factors) {
        for (i, v) in m.iter_mut().enumerate() {
            *v = keep * *v + add * dot(&proj[i * k..(i + 1) * k], z);
        }
    }
}

impl World {
    /// x = g(a, c). The mask and the pixel noise depend only on
    /// `instance_seed`, so two renders that differ only in context share
    /// their subject cells bit for bit.
    pub fn render(
        &self,
        subject: usize,
        context: usize,
        instance_seed: u64,
        split: SplitTag,
    ) -> Observation {
        let (h, w) = self.spec.grid;
        let f = self.spec.feature_dim;
        let r = &self.spec.render;
        let mut rng = seeds::rng(instance_seed, &[seeds::tag("instance")]);

        let (lo, hi) = r.mask_area;
        let area = rng.random_range(lo..=hi) * (h * w) as f64;
        let aspect: f64 = rng.random_range(0.5f64..2.0).sqrt();
        let mut rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let mut rw = ((area / rh as f64).round() as usize).clamp(1, w);
        if rh * rw >= h * w {
            // keep at least one background cell
            if rh > 1 {
                rh -= 1;
            } else {
                rw -= 1;
            }
        }
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        let noise = gaussian(&mut rng, h * w * f, r.noise_std);

        let mut mask = vec![false; h * w];
        let mut x = vec![0.0; h * w * f];
        let t = r.tile;
        for i in 0..h {
            for j in 0..w {
                let inside = i >= top && i < top + rh && j >= left && j < left + rw;
                mask[i * w + j] = inside;
                let (motif, tex, ti, tj) = if inside {
                    (
                        &self.subject_motif[subject],
                        &self.subject_texture[subject],
                        (i - top) % t,
                        (j - left) % t,
                    )
                } else {
                    (
                        &self.context_motif[context],
                        &self.context_texture[context],
                        i % t,
                        j % t,
                    )
                };
                let base = (i * w + j) * f;
                let tbase = (ti * t + tj) * f;
                for k in 0..f {
                    x[base + k] = motif[k] + tex[tbase + k] + noise[base + k];
                }
            }
        }
        Observation {
            x: Tensor::new(vec![h, w, f], x).expect("shape matches buffer"),
            mask,
            subject_id: subject,
            context_id: context,
            label: self.spec.label(subject, context),
            split,
            instance_seed,
        }
    }

    /// Every (subject, context) pair once, as the minimal enumerations of the world.
    pub fn families(&self) -> Vec<(usize, usize, u8)> {
        (0..self.spec.n_subjects)
            .flat_map(|a| (0..self.spec.n_contexts).map(move |c| (a, c)))
            .map(|(a, c)| (a, c, self.spec.label(a, c)))
            .collect()
    }

    /// Fraction of anomalous contexts for each subject.
    pub fn anomalous_fraction(&self) -> Vec<f64> {
        self.spec
            .compat
            .iter()
            .map(|row| row.iter().filter(|&&v| !v).count() as f64 / row.len() as f64)
            .collect()
    }
}

/// Two renders of one subject instance in a compatible and an incompatible context.
#[derive(Clone, Debug)]
pub struct CollisionPair {
    pub normal: Observation,
    pub anomalous: Observation,
}

/// Intrinsic projection: the subject-region cells in row-major order.
pub fn intrinsic_view(obs: &Observation) -> Vec<f64> {
    let f = obs.x.shape()[2];
    obs.mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(|(cell, _)| obs.x.data()[cell * f..(cell + 1) * f].iter().copied())
        .collect()
}

/// Global projection: the full grid.
pub fn global_view(obs: &Observation) -> Vec<f64> {
    obs.x.data().to_vec()
}

/// Collision pair drawn with `seed`. When `allowed` is given, only
/// (subject, context) combinations it accepts are used.
pub fn collision_pair(
    world: &World,
    seed: u64,
    allowed: Option<&dyn Fn(usize, usize) -> bool>,
) -> Result<CollisionPair> {
    let ok = |a: usize, c: usize| allowed.is_none_or(|f| f(a, c));
    let spec = &world.spec;
    let candidates: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..spec.n_subjects)
        .filter_map(|a| {
            let normal: Vec<usize> = (0..spec.n_contexts)
                .filter(|&c| spec.compat[a][c] && ok(a, c))
                .collect();
            let anomalous: Vec<usize> = (0..spec.n_contexts)
                .filter(|&c| !spec.compat[a][c] && ok(a, c))
                .collect();
            (!normal.is_empty() && !anomalous.is_empty()).then_some((a, normal, anomalous))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoCollision);
    }
    let mut rng = seeds::rng(seed, &[seeds::tag("collision")]);
    let (a, normal, anomalous) = &candidates[rng.random_range(0..candidates.len())];
    let c = normal[rng.random_range(0..normal.len())];
    let c2 = anomalous[rng.random_range(0..anomalous.len())];
    let instance = rng.random::<u64>();
    Ok(CollisionPair {
        normal: world.render(*a, c, instance, SplitTag::CrossContext),
        anomalous: world.render(*a, c2, instance, SplitTag::CrossContext),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_world_has_two_families() {
        let w = build_world(WorldSpec::with_table(vec![vec![true, false]], 3).unwrap()).unwrap();
        let fam = w.families();
        assert_eq!(fam, vec![(0, 0, 0), (0, 1, 1)]);
    }

    #[test]
    fn degenerate_rows_rejected() {
        assert!(WorldSpec::with_table(vec![vec![true, true]], 0).is_err());
        assert!(WorldSpec::with_table(vec![vec![false, false]], 0).is_err());
    }

    #[test]
    fn render_is_deterministic_and_masks_are_proper() {
        let w = build_world(WorldSpec::default_world(11).unwrap()).unwrap();
        for s in 0..50u64 {
            let a = w.render(3, 5, s, SplitTag::Train);
            let b = w.render(3, 5, s, SplitTag::Train);
            assert!(a.x.bit_eq(&b.x));
            let fg = a.mask.iter().filter(|&&m| m).count();
            assert!(fg >= 1 && fg < a.mask.len());
            let frac = fg as f64 / a.mask.len() as f64;
            assert!((0.15..=0.7).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn default_table_is_balanced_per_subject_and_context() {
        let spec = WorldSpec::default_world(5).unwrap();
        for row in &spec.compat {
            assert_eq!(row.iter().filter(|&&v| v).count(), 6);
        }
        for c in 0..spec.n_contexts {
            let anomalous = spec.compat.iter().filter(|r| !r[c]).count();
            assert!((7..=8).contains(&anomalous));
        }
    }

    #[test]
    fn collision_pair_shares_subject_cells() {
        let w = build_world(WorldSpec::default_world(2).unwrap()).unwrap();
        let p = collision_pair(&w, 9, None).unwrap();
        assert_eq!(p.normal.mask, p.anomalous.mask);
        let (u, v) = (intrinsic_view(&p.normal), intrinsic_view(&p.anomalous));
        assert!(u.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_ne!(p.normal.label, p.anomalous.label);
        assert_ne!(global_view(&p.normal), global_view(&p.anomalous));
    }
}
