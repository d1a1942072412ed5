//! Command implementations.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use ctxcompat::csr::Branch;
use ctxcompat::diffcore::ParamStore;
use ctxcompat::objective::{
    objective_gradcheck, train as fit, Components, FusionKind, GradCheckConfig, History,
    ImgLossWeights, LossPart, Model, ModelConfig,
};
use ctxcompat::scoring::{
    evaluate, oracle_metrics, run_protocol, MetricResult, ProtocolConfig, ProtocolKind,
};
use ctxcompat::textref::TextLossWeights;
use ctxcompat::worldgen::{
    build_world, export_dataset, import_dataset, jaccard_report, make_splits, sample_fewshot,
    Dataset, Observation, ShotMode,
};

use crate::config::RunConfig;
use crate::manifest::{read_checkpoint, write_atomic, write_checkpoint, RunManifest};
use crate::{
    AblateArgs, Common, EvalArgs, Failure, GenArgs, GradcheckArgs, Suite, TrainArgs, TrainFlags,
};

fn configure(common: &Common, flags: Option<&TrainFlags>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref(), common.preset)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.model.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    let Some(f) = flags else { return Ok(cfg) };
    if let Some(n) = f.shots {
        cfg.protocol.shots = n;
    }
    if let Some(e) = f.epochs {
        cfg.train.stage1.epochs = e;
        cfg.train.stage2.epochs = e;
    }
    if let Some(e) = f.epochs_stage1 {
        cfg.train.stage1.epochs = e;
    }
    if let Some(e) = f.epochs_stage2 {
        cfg.train.stage2.epochs = e;
    }
    if let Some(k) = f.fusion {
        cfg.model.fusion = k;
    }
    if let Some(p) = f.protocol {
        cfg.protocol.kind = p;
    }
    if f.joint {
        cfg.train.joint = true;
    }
    if f.no_pixels {
        cfg.protocol.pixels = false;
    }
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::config(format!(
            "{} has no dataset manifest",
            dir.display()
        )));
    }
    import_dataset(dir).map_err(|e| match e {
        ctxcompat::Error::Format(_) | ctxcompat::Error::Json(_) | ctxcompat::Error::Io(_) => {
            Failure::integrity(format!("{}: {e}", dir.display()))
        }
        e => e.into(),
    })
}

/// Visual input geometry follows the dataset.
fn align(cfg: &mut RunConfig, d: &Dataset) {
    cfg.model.visual.grid = d.spec.grid;
    cfg.model.visual.feature_dim = d.spec.feature_dim;
}

fn protocol(cfg: &RunConfig, seed: u64, untrained: bool) -> ProtocolConfig {
    ProtocolConfig {
        kind: cfg.protocol.kind,
        shots: cfg.protocol.shots,
        model: cfg.seeded_model(seed),
        plan: cfg.seeded_plan(seed),
        untrained,
        pixels: cfg.protocol.pixels,
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }

    fn pct(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RowSummary {
    pub name: String,
    pub i_auroc: Summary,
    pub i_aupr: Summary,
    pub p_auroc: Option<Summary>,
    pub pro: Option<Summary>,
    pub alpha_mean: Option<Vec<f64>>,
}

impl RowSummary {
    fn of(name: &str, runs: &[MetricResult]) -> Self {
        let opt = |f: &dyn Fn(&MetricResult) -> Option<f64>| {
            runs.iter()
                .map(f)
                .collect::<Option<Vec<f64>>>()
                .map(Summary::of)
        };
        let alphas: Option<Vec<&Vec<f64>>> = runs.iter().map(|m| m.alpha_mean.as_ref()).collect();
        let alpha_mean = alphas.map(|a| {
            (0..a[0].len())
                .map(|j| a.iter().map(|v| v[j]).sum::<f64>() / a.len() as f64)
                .collect()
        });
        Self {
            name: name.to_string(),
            i_auroc: Summary::of(runs.iter().map(|m| m.i_auroc).collect()),
            i_aupr: Summary::of(runs.iter().map(|m| m.i_aupr).collect()),
            p_auroc: opt(&|m| m.p_auroc),
            pro: opt(&|m| m.pro),
            alpha_mean,
        }
    }
}

fn rows_table(rows: &[RowSummary]) -> String {
    let mut s = format!(
        "{:<22} {:>13} {:>13} {:>13} {:>13}  alpha\n",
        "row", "I-AUROC", "I-AUPR", "P-AUROC", "PRO"
    );
    let dash = || "-".to_string();
    for r in rows {
        let alpha = r.alpha_mean.as_ref().map_or_else(dash, |a| {
            a.iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        });
        let _ = writeln!(
            s,
            "{:<22} {:>13} {:>13} {:>13} {:>13}  {alpha}",
            r.name,
            r.i_auroc.pct(),
            r.i_aupr.pct(),
            r.p_auroc.as_ref().map_or_else(dash, Summary::pct),
            r.pro.as_ref().map_or_else(dash, Summary::pct),
        );
    }
    s
}

// ---------------------------------------------------------------- gen

pub fn gen(a: &GenArgs) -> Result<(), Failure> {
    let mut cfg = configure(&a.common, None)?;
    if let Some(b) = a.jaccard {
        cfg.split.jaccard = b;
    }
    let out = cfg.out_dir(a.common.out.as_deref(), &format!("gen-s{}", cfg.seed));
    let world = build_world(cfg.world_spec()?)?;
    let dataset = make_splits(&world, &cfg.split_plan(), cfg.split.counts)?;
    let hash = export_dataset(&dataset, &out)?;
    let report = jaccard_report(&dataset)?;
    let table = report.to_table();
    write_atomic(&out.join("jaccard_report.txt"), table.as_bytes())?;
    write_atomic(
        &out.join("jaccard_report.json"),
        &serde_json::to_vec_pretty(&report).expect("serializable"),
    )?;
    let mut m = RunManifest::new("gen", &cfg);
    m.dataset_dir = Some(out.clone());
    m.dataset_hash = Some(hash.clone());
    m.metrics = json!({ "jaccard_min": report.min(), "jaccard_max": report.max() });
    m.write(&out)?;
    print!("{table}");
    println!(
        "jaccard range [{:.3}, {:.3}], {} samples",
        report.min(),
        report.max(),
        dataset.samples.len()
    );
    println!("dataset {hash}");
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

fn train_one(cfg: &RunConfig, d: &Dataset, seed: u64) -> Result<(Model, History), Failure> {
    let mut model = Model::new(cfg.seeded_model(seed), &d.spec.class_names, d.contextual)?;
    let support = sample_fewshot(d, cfg.protocol.shots, cfg.protocol.kind.shot_mode(), seed)?;
    let refs: Vec<&Observation> = support.iter().collect();
    let history = fit(&mut model, &cfg.seeded_plan(seed), &refs)?;
    Ok((model, history))
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = configure(&a.common, Some(&a.flags))?;
    let d = load_dataset(&a.data)?;
    align(&mut cfg, &d);
    let out = cfg.out_dir(
        a.common.out.as_deref(),
        &format!("train-s{}-{}", cfg.seed, cfg.preset.name()),
    );
    let (model, history) = train_one(&cfg, &d, cfg.seed)?;
    let ckpt = write_checkpoint(&out, cfg.seed, &model.store)?;
    write_atomic(&out.join("history.jsonl"), history.to_jsonl()?.as_bytes())?;
    let mut final_losses = serde_json::Map::new();
    for stage in ["stage1", "stage2"] {
        if let Some(r) = history.stage(stage).last() {
            final_losses.insert(stage.into(), to_json(&r.losses));
            let terms: Vec<String> = r
                .losses
                .iter()
                .map(|(k, v)| format!("{k} {v:.5}"))
                .collect();
            println!("{stage} epoch {}: {}", r.epoch, terms.join(", "));
        }
    }
    let mut m = RunManifest::new("train", &cfg);
    m.dataset_dir = Some(a.data.clone());
    m.dataset_hash = Some(d.hash());
    m.encoder_hashes = Some(model.encoder_hashes());
    m.checkpoints.push(ckpt);
    m.metrics = json!({ "final_losses": final_losses });
    m.write(&out)?;
    println!(
        "stage lrs {:e} / {:e}, {} parameters",
        cfg.train.stage1.lr,
        cfg.train.stage2.lr,
        model.store.num_scalars()
    );
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

fn fits(init: &ParamStore, loaded: &ParamStore) -> bool {
    init.len() == loaded.len()
        && init
            .iter()
            .zip(loaded.iter())
            .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
}

fn eval_run(
    a: &EvalArgs,
    d: &Dataset,
    run: &Path,
) -> Result<(RunConfig, Vec<MetricResult>), Failure> {
    let m = RunManifest::read(run)?;
    let mut cfg = m.config.clone();
    if let Some(p) = a.flags.protocol {
        cfg.protocol.kind = p;
    }
    if a.flags.no_pixels {
        cfg.protocol.pixels = false;
    }
    let hash = d.hash();
    if m.dataset_hash.as_deref() != Some(hash.as_str()) {
        return Err(Failure::integrity(format!(
            "dataset {} does not match the run's dataset {}",
            hash,
            m.dataset_hash.as_deref().unwrap_or("(none)")
        )));
    }
    if (cfg.model.visual.grid, cfg.model.visual.feature_dim) != (d.spec.grid, d.spec.feature_dim) {
        return Err(Failure::config(format!(
            "run expects grid {:?} x {} features, dataset has {:?} x {}",
            cfg.model.visual.grid, cfg.model.visual.feature_dim, d.spec.grid, d.spec.feature_dim
        )));
    }
    if m.checkpoints.is_empty() {
        return Err(Failure::config(format!(
            "{} records no checkpoints",
            run.display()
        )));
    }
    let mut results = Vec::new();
    for c in &m.checkpoints {
        let mut model = Model::new(cfg.seeded_model(c.seed), &d.spec.class_names, d.contextual)?;
        let store = read_checkpoint(run, c)?;
        if !fits(&model.store, &store) {
            return Err(Failure::config(format!(
                "{} does not fit the configured model",
                c.file
            )));
        }
        model.store = store;
        let (metrics, _) = evaluate(
            &model,
            d,
            cfg.protocol.kind.eval_split(),
            cfg.protocol.pixels,
        )?;
        results.push(metrics);
    }
    Ok((cfg, results))
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let d = load_dataset(&a.data)?;
    let (cfg, mode, results) = if let Some(run) = &a.run {
        let (cfg, r) = eval_run(a, &d, run)?;
        (cfg, "checkpoint", r)
    } else {
        let mut cfg = configure(&a.common, Some(&a.flags))?;
        align(&mut cfg, &d);
        if a.oracle {
            let split = cfg.protocol.kind.eval_split();
            if !d.has_split(split) {
                return Err(Failure::config(format!(
                    "dataset has no {} split",
                    split.name()
                )));
            }
            (cfg.clone(), "oracle", vec![oracle_metrics(&d, split)?])
        } else {
            if a.seeds == 0 {
                return Err(Failure::config("--seeds must be positive"));
            }
            let mut r = Vec::new();
            for seed in cfg.seed..cfg.seed + a.seeds {
                r.push(run_protocol(&protocol(&cfg, seed, a.untrained), &d)?.metrics);
            }
            (cfg, if a.untrained { "untrained" } else { "trained" }, r)
        }
    };
    let out = match (&a.common.out, &a.run) {
        (Some(p), _) => p.clone(),
        (None, Some(run)) => run.join("eval"),
        (None, None) => cfg.out_dir(None, &format!("eval-{mode}-s{}", cfg.seed)),
    };
    for (i, r) in results.iter().enumerate() {
        println!("{mode} {} [{}]", i + 1, r.split);
        print!("{}", r.to_table());
    }
    let summary = RowSummary::of(mode, &results);
    println!(
        "{} I-AUROC {} over {} run(s)",
        cfg.protocol.kind.eval_split().name(),
        summary.i_auroc.pct(),
        results.len()
    );
    let metrics = json!({ "mode": mode, "runs": to_json(&results), "summary": to_json(&summary) });
    write_atomic(
        &out.join("metrics.json"),
        &serde_json::to_vec_pretty(&metrics).expect("serializable"),
    )?;
    let mut m = RunManifest::new("eval", &cfg);
    m.dataset_dir = Some(a.data.clone());
    m.dataset_hash = Some(d.hash());
    m.metrics = metrics;
    m.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- ablate

struct Cell {
    name: String,
    cfg: RunConfig,
    untrained: bool,
}

fn cell(name: impl Into<String>, base: &RunConfig, f: impl FnOnce(&mut RunConfig)) -> Cell {
    let mut cfg = base.clone();
    f(&mut cfg);
    Cell {
        name: name.into(),
        cfg,
        untrained: false,
    }
}

type WeightSetter = fn(&mut TextLossWeights, &mut ImgLossWeights, f64);

const LOSS_WEIGHTS: [(&str, WeightSetter); 9] = [
    ("ortho", |t, _, v| t.ortho = v),
    ("text_cons", |t, _, v| t.cons = v),
    ("ground", |t, _, v| t.ground = v),
    ("calib", |t, _, v| t.calib = v),
    ("margin", |t, _, v| t.margin = v),
    ("branch_ce", |_, i, v| i.branch_ce = v),
    ("fuse_img", |_, i, v| i.fuse_img = v),
    ("fuse_cons", |_, i, v| i.fuse_cons = v),
    ("fuse_ent", |_, i, v| i.fuse_ent = v),
];

fn suite_cells(suite: Suite, base: &RunConfig, grid: &[f64]) -> Vec<Cell> {
    match suite {
        Suite::Components => Components::ALL
            .iter()
            .map(|&c| {
                let mut x = cell(c.name(), base, |r| r.model = c.apply(r.model.clone()));
                x.untrained = c == Components::None;
                x
            })
            .collect(),
        Suite::Branches => [
            ("g", vec![Branch::Global]),
            ("s", vec![Branch::Subject]),
            ("c", vec![Branch::Context]),
            ("g+s+c", Branch::ALL.to_vec()),
        ]
        .into_iter()
        .map(|(n, b)| cell(n, base, |r| r.model.branches = b))
        .collect(),
        Suite::Fusion => [
            ("average", FusionKind::Average),
            ("static", FusionKind::StaticWeights),
            ("concat+linear", FusionKind::ConcatLinear),
            ("CRM", FusionKind::Crm),
        ]
        .into_iter()
        .map(|(n, k)| cell(n, base, |r| r.model.fusion = k))
        .collect(),
        Suite::NormalOnly => [
            ("normal+anomalous", ProtocolKind::FewshotCc),
            ("normal-only", ProtocolKind::NormalOnlyCc),
        ]
        .into_iter()
        .map(|(n, k)| cell(n, base, |r| r.protocol.kind = k))
        .collect(),
        Suite::LossWeights => {
            let mut cells = vec![cell("defaults", base, |_| {})];
            for (name, set) in LOSS_WEIGHTS {
                for &v in grid {
                    cells.push(cell(format!("{name}={v}"), base, |r| {
                        set(&mut r.train.text_weights, &mut r.train.img_weights, v)
                    }));
                }
            }
            cells
        }
    }
}

pub fn ablate(a: &AblateArgs) -> Result<(), Failure> {
    let d = load_dataset(&a.data)?;
    let mut base = configure(&a.common, Some(&a.flags))?;
    align(&mut base, &d);
    if a.seeds == 0 {
        return Err(Failure::config("--seeds must be positive"));
    }
    let suite = a.suite.name();
    let out = base.out_dir(
        a.common.out.as_deref(),
        &format!("ablate-{suite}-s{}", base.seed),
    );
    let mut rows = Vec::new();
    for c in suite_cells(a.suite, &base, &a.grid) {
        let mut runs = Vec::new();
        for seed in base.seed..base.seed + a.seeds {
            runs.push(run_protocol(&protocol(&c.cfg, seed, c.untrained), &d)?.metrics);
        }
        let row = RowSummary::of(&c.name, &runs);
        eprintln!("  {:<22} I-AUROC {}", row.name, row.i_auroc.pct());
        rows.push(row);
    }
    let table = rows_table(&rows);
    print!("{table}");
    write_atomic(&out.join(format!("{suite}.txt")), table.as_bytes())?;
    if a.suite == Suite::LossWeights {
        let mut csv = String::from("weight,value,i_auroc_mean,i_auroc_std\n");
        for r in &rows[1..] {
            let (w, v) = r.name.split_once('=').expect("weight=value");
            let _ = writeln!(csv, "{w},{v},{},{}", r.i_auroc.mean, r.i_auroc.std);
        }
        write_atomic(&out.join("loss_weights.csv"), csv.as_bytes())?;
    }
    let mut m = RunManifest::new("ablate", &base);
    m.dataset_dir = Some(a.data.clone());
    m.dataset_hash = Some(d.hash());
    m.metrics = json!({ "suite": suite, "seeds": a.seeds, "rows": to_json(&rows) });
    m.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

/// Zero weights are raised to 0.1 so every term is exercised.
fn live_weights(t: &TextLossWeights, i: &ImgLossWeights) -> (TextLossWeights, ImgLossWeights) {
    let lift = |v: f64| if v == 0.0 { 0.1 } else { v };
    (
        TextLossWeights {
            ortho: lift(t.ortho),
            cons: lift(t.cons),
            ground: lift(t.ground),
            calib: lift(t.calib),
            margin: lift(t.margin),
            ..t.clone()
        },
        ImgLossWeights {
            branch_ce: lift(i.branch_ce),
            fuse_img: lift(i.fuse_img),
            fuse_cons: lift(i.fuse_cons),
            fuse_ent: lift(i.fuse_ent),
        },
    )
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let cfg = configure(&a.common, None)?;
    let d = match &a.data {
        Some(dir) => load_dataset(dir)?,
        None => {
            let world = build_world(cfg.world_spec()?)?;
            make_splits(&world, &cfg.split_plan(), cfg.split.counts)?
        }
    };
    let (text_w, img_w) = live_weights(&cfg.train.text_weights, &cfg.train.img_weights);
    let mut worst: Vec<(LossPart, f64, String)> = LossPart::ALL
        .iter()
        .map(|&p| (p, 0.0, String::new()))
        .collect();
    let mut checked = 0;
    for seed in cfg.seed..cfg.seed + a.seeds {
        let mut mc = ModelConfig::gradcheck(seed);
        mc.visual.grid = d.spec.grid;
        mc.visual.feature_dim = d.spec.feature_dim;
        let model = Model::new(mc, &d.spec.class_names, d.contextual)?;
        let support = sample_fewshot(&d, 1, ShotMode::Balanced, seed)?;
        let c = (seed as usize) % d.spec.n_subjects;
        let batch = [&support[2 * c], &support[2 * c + 1]];
        for (part, max, at) in worst.iter_mut() {
            let gc = GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            };
            let r = objective_gradcheck(&model, &batch, *part, (&text_w, &img_w), &gc)?;
            checked += r.entries_checked;
            if r.max_rel_error > *max {
                *max = r.max_rel_error;
                *at = format!("seed {seed} {}[{}]", r.worst_param, r.worst_index);
            }
        }
    }
    let mut ok = true;
    for (part, max, at) in &worst {
        let pass = *max < a.tolerance;
        ok &= pass;
        println!(
            "{:<8} max rel err {max:.2e} {}  worst at {at}",
            part.name(),
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!("{checked} entries over {} seeds", a.seeds);
    if !ok {
        return Err(Failure::integrity(format!(
            "gradient check exceeded tolerance {:e}",
            a.tolerance
        )));
    }
    Ok(())
}
