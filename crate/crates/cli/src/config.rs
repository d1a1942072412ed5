//! Run configuration, layered as defaults ← file ← flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ctxcompat::objective::{ModelConfig, Preset, TrainPlan};
use ctxcompat::scoring::ProtocolKind;
use ctxcompat::worldgen::{RenderParams, SplitCounts, SplitPlan, WorldSpec};

use crate::Failure;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CTXCOMPAT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub n_contexts: usize,
    /// Rank of the latent subject/context affinity behind the table.
    pub rank: usize,
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub render: RenderParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_subjects: 15,
            n_contexts: 12,
            rank: 2,
            grid: (16, 16),
            feature_dim: 8,
            render: RenderParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub jaccard: (f64, f64),
    pub counts: SplitCounts,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            jaccard: SplitPlan::default().jaccard,
            counts: SplitCounts::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSection {
    pub kind: ProtocolKind,
    pub shots: usize,
    /// Compute pixel AUROC and PRO.
    pub pixels: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::FewshotCc,
            shots: 4,
            pixels: true,
        }
    }
}

/// Everything a command needs. `seed` drives the world, the split, the
/// parameter init and the few-shot draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub protocol: ProtocolSection,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        Self {
            seed: 0,
            preset,
            world: WorldConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainPlan::preset(preset),
            protocol: ProtocolSection::default(),
            out: None,
        }
    }

    /// Reads `file` (TOML, or a JSON run manifest whose `config` is reused)
    /// over the defaults of the chosen preset. A preset given as a flag
    /// replaces both stage plans after the file is applied.
    pub fn load(file: Option<&Path>, preset_flag: Option<Preset>) -> Result<Self, Failure> {
        let overlay = match file {
            Some(p) => read_overlay(p)?,
            None => Value::Object(Default::default()),
        };
        let file_preset = match overlay.get("preset") {
            Some(v) => Some(
                serde_json::from_value::<Preset>(v.clone())
                    .map_err(|e| Failure::config(format!("preset: {e}")))?,
            ),
            None => None,
        };
        let base_preset = file_preset.unwrap_or(Preset::Table7);
        let mut merged =
            serde_json::to_value(Self::with_preset(base_preset)).expect("serializable");
        merge(&mut merged, overlay);
        let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| {
            let src = file.map_or("defaults".into(), |p| p.display().to_string());
            Failure::config(format!("{src}: {e}"))
        })?;
        if let Some(p) = preset_flag {
            let plan = TrainPlan::preset(p);
            cfg.preset = p;
            cfg.train.stage1 = plan.stage1;
            cfg.train.stage2 = plan.stage2;
        }
        Ok(cfg)
    }

    pub fn world_spec(&self) -> Result<WorldSpec, Failure> {
        let w = &self.world;
        let mut spec = WorldSpec::generated(w.n_subjects, w.n_contexts, w.rank, self.seed)?;
        spec.grid = w.grid;
        spec.feature_dim = w.feature_dim;
        spec.render = w.render.clone();
        spec.validate()?;
        Ok(spec)
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            jaccard: self.split.jaccard,
            seed: self.seed,
        }
    }

    /// Model config with the run seed applied.
    pub fn seeded_model(&self, seed: u64) -> ModelConfig {
        let mut m = self.model.clone();
        m.seed = seed;
        m
    }

    pub fn seeded_plan(&self, seed: u64) -> TrainPlan {
        let mut p = self.train.clone();
        p.seed = seed;
        p
    }

    /// Explicit `--out`, then the file's `out`, then `$CTXCOMPAT_OUT/<default>`.
    pub fn out_dir(&self, flag: Option<&Path>, default_name: &str) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.out {
            return p.clone();
        }
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(default_name)
    }
}

fn read_overlay(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let v: Value = if is_json {
        serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    };
    // a run manifest carries its config under `config`
    match v {
        Value::Object(mut m) if m.contains_key("artifact_version") => {
            Ok(m.remove("config").unwrap_or(Value::Null))
        }
        Value::Object(_) => Ok(v),
        _ => Err(Failure::config(format!(
            "{} is not a table",
            path.display()
        ))),
    }
}

/// Recursive object merge; non-object values in `top` replace `base`.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `lo:hi`.
pub fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{lo}: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{hi}: {e}"))?;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(format!("band {lo}:{hi} must satisfy 0 <= lo <= hi <= 1"));
    }
    Ok((lo, hi))
}
