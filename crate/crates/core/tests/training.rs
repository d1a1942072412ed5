use ctxcompat::objective::*;
use ctxcompat::scoring::{oracle_metrics, run_protocol, ProtocolConfig, ProtocolKind};
use ctxcompat::worldgen::*;

fn small_counts() -> SplitCounts {
    SplitCounts {
        train: 180,
        val: 45,
        cc: 210,
    }
}

fn small_dataset(seed: u64) -> Dataset {
    let w = build_world(WorldSpec::default_world(seed).unwrap()).unwrap();
    let plan = SplitPlan {
        seed,
        ..SplitPlan::default()
    };
    make_splits(&w, &plan, small_counts()).unwrap()
}

fn support(d: &Dataset, shots: usize) -> Vec<Observation> {
    sample_fewshot(d, shots, ShotMode::Balanced, 0).unwrap()
}

fn trained(d: &Dataset, plan: &TrainPlan, cfg: ModelConfig) -> (Model, History) {
    let mut m = Model::new(cfg, &d.spec.class_names, d.contextual).unwrap();
    let s = support(d, 1);
    let refs: Vec<&Observation> = s.iter().collect();
    let h = train(&mut m, plan, &refs).unwrap();
    (m, h)
}

#[test]
fn zero_epoch_plan_changes_nothing() {
    let d = small_dataset(1);
    let init = Model::new(ModelConfig::default(), &d.spec.class_names, true).unwrap();
    let (m, h) = trained(
        &d,
        &TrainPlan::default().with_epochs(0, 0),
        ModelConfig::default(),
    );
    assert!(m.store.bit_eq(&init.store));
    assert!(h.records.is_empty());
}

#[test]
fn stages_touch_only_their_parameters() {
    let d = small_dataset(2);
    let plan = TrainPlan::preset(Preset::Desk);
    let init = Model::new(ModelConfig::default(), &d.spec.class_names, true).unwrap();
    let (s1, _) = trained(&d, &plan.clone().with_epochs(2, 0), ModelConfig::default());
    assert_ne!(
        s1.store.hash_where(is_text_param),
        init.store.hash_where(is_text_param)
    );
    assert_eq!(
        s1.store.hash_where(is_visual_param),
        init.store.hash_where(is_visual_param)
    );

    let (both, h) = trained(&d, &plan.clone().with_epochs(2, 2), ModelConfig::default());
    assert_eq!(
        both.store.hash_where(is_text_param),
        s1.store.hash_where(is_text_param)
    );
    assert_ne!(
        both.store.hash_where(is_visual_param),
        init.store.hash_where(is_visual_param)
    );
    assert!(h.stage("stage2").all(|r| !r.losses.contains_key("text")));
    assert_eq!(both.encoder_hashes(), init.encoder_hashes());

    let joint = TrainPlan {
        joint: true,
        ..plan.with_epochs(2, 2)
    };
    let (j, _) = trained(&d, &joint, ModelConfig::default());
    assert_ne!(
        j.store.hash_where(is_text_param),
        s1.store.hash_where(is_text_param)
    );
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let d = small_dataset(3);
    let plan = TrainPlan::preset(Preset::Desk).with_epochs(1, 1);
    let (a, ha) = trained(&d, &plan, ModelConfig::default());
    let (b, hb) = trained(&d, &plan, ModelConfig::default());
    assert!(a.store.bit_eq(&b.store));
    assert_eq!(ha, hb);
}

#[test]
fn default_training_lowers_the_fused_cross_entropy() {
    let w = build_world(WorldSpec::default_world(0).unwrap()).unwrap();
    let d = make_splits(&w, &SplitPlan::default(), SplitCounts::default()).unwrap();
    let mut m = Model::new(ModelConfig::default(), &d.spec.class_names, true).unwrap();
    let s = support(&d, 4);
    assert_eq!(s.len(), 120);
    let refs: Vec<&Observation> = s.iter().collect();
    let h = train(&mut m, &TrainPlan::default(), &refs).unwrap();
    let ce: Vec<f64> = h.stage("stage2").map(|r| r.losses["fused_ce"]).collect();
    assert!(ce.last().unwrap() < ce.first().unwrap(), "{ce:?}");
}

#[test]
fn untrained_models_sit_at_chance() {
    for seed in 0..10 {
        let w = build_world(WorldSpec::default_world(seed).unwrap()).unwrap();
        let plan = SplitPlan {
            seed,
            ..SplitPlan::default()
        };
        let d = make_splits(&w, &plan, SplitCounts::default()).unwrap();
        let cfg = ProtocolConfig {
            kind: ProtocolKind::FewshotCc,
            shots: 1,
            model: ModelConfig {
                seed,
                ..ModelConfig::default()
            },
            plan: TrainPlan::default(),
            untrained: true,
            pixels: false,
        };
        let v = run_protocol(&cfg, &d).unwrap().metrics.i_auroc;
        assert!((v - 0.5).abs() <= 0.1, "world {seed}: {v}");
    }
}

#[test]
fn oracle_scores_are_perfect() {
    let d = small_dataset(4);
    for split in [SplitTag::Val, SplitTag::CrossContext] {
        let m = oracle_metrics(&d, split).unwrap();
        assert_eq!((m.i_auroc, m.i_aupr), (1.0, 1.0));
        assert_eq!(m.p_auroc, Some(1.0));
    }
}

/// Balanced accuracy of a logistic probe on one-hot identities, fitted by
/// gradient descent over every (subject, context) family.
fn probe(ids: &[usize], labels: &[u8], n_ids: usize) -> f64 {
    let mut w = vec![0.0f64; n_ids];
    let mut b = 0.0f64;
    for _ in 0..2000 {
        let mut gw = vec![0.0; n_ids];
        let mut gb = 0.0;
        for (&i, &y) in ids.iter().zip(labels) {
            let p = 1.0 / (1.0 + (-(w[i] + b)).exp());
            gw[i] += p - y as f64;
            gb += p - y as f64;
        }
        let n = ids.len() as f64;
        for k in 0..n_ids {
            w[k] -= 2.0 * gw[k] / n * n_ids as f64;
        }
        b -= 2.0 * gb / n;
    }
    let (mut tp, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for (&i, &y) in ids.iter().zip(labels) {
        let hit = (w[i] + b > 0.0) == (y == 1);
        if y == 1 {
            pos += 1.0;
            tp += hit as u8 as f64;
        } else {
            neg += 1.0;
            tn += hit as u8 as f64;
        }
    }
    0.5 * (tp / pos + tn / neg)
}

#[test]
fn neither_component_alone_predicts_the_label() {
    for seed in 0..3 {
        let spec = WorldSpec::default_world(seed).unwrap();
        let mut subj = Vec::new();
        let mut ctx = Vec::new();
        let mut y = Vec::new();
        for a in 0..spec.n_subjects {
            for c in 0..spec.n_contexts {
                subj.push(a);
                ctx.push(c);
                y.push(spec.label(a, c));
            }
        }
        let bs = probe(&subj, &y, spec.n_subjects);
        let bc = probe(&ctx, &y, spec.n_contexts);
        assert!(
            bs <= 0.55 && bc <= 0.55,
            "world {seed}: subject {bs:.3}, context {bc:.3}"
        );
    }
}
