//! Derived examples checked against independent computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxcompat::crm::{self, CrmConfig, WK, WQ};
use ctxcompat::csr::{apply_gated_block, init_gated_block, Branch, BranchBundle, BranchOut};
use ctxcompat::diffcore::{Graph, ParamStore, Tensor};
use ctxcompat::encoders::{views_from_mask, TextConfig, TextEncoder};
use ctxcompat::objective::{
    fuse_baseline, img_terms, FusionKind, ImgLossWeights, Model, ModelConfig, CONCAT_W,
};
use ctxcompat::scoring::{aupr, bilinear_upsample};
use ctxcompat::textref::{build_text_pair, PromptSet, TextPair};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn random_unit(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit(
        &(0..d)
            .map(|_| r.random_range(-1.0..1.0))
            .collect::<Vec<_>>(),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bundle(g: &mut Graph, embs: &[Vec<f64>]) -> BranchBundle {
    BranchBundle {
        branches: Branch::ALL
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
            .collect(),
    }
}

fn pair(g: &mut Graph, a: &[f64], b: &[f64]) -> TextPair {
    TextPair {
        t0: g.constant(Tensor::vector(a.to_vec())).unwrap(),
        t1: g.constant(Tensor::vector(b.to_vec())).unwrap(),
    }
}

#[test]
fn aupr_of_random_scores_is_the_prevalence() {
    let mut r = rng(11);
    let n = 2000;
    let s: Vec<f64> = (0..n).map(|_| r.random()).collect();
    let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let v = aupr(&s, &y).unwrap();
    assert!((v - 0.5).abs() < 0.05, "{v}");
}

/// Half-pixel-center bilinear interpolation written from the definition.
fn bilinear_at(src: &[f64], n: usize, scale: usize, r: usize, c: usize) -> f64 {
    let pos = |d: usize| (((d as f64 + 0.5) / scale as f64) - 0.5).clamp(0.0, (n - 1) as f64);
    let (y, x) = (pos(r), pos(c));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |i: usize, j: usize| src[i * n + j];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
        + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

#[test]
fn hot_patch_upsampling_matches_direct_bilinear() {
    for hot in [0usize, 5, 10, 15] {
        let mut src = vec![0.0; 16];
        src[hot] = 1.0;
        let m = bilinear_upsample(&src, (4, 4), (16, 16)).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert!((m[r * 16 + c] - bilinear_at(&src, 4, 4, r, c)).abs() < 1e-12);
            }
        }
        let max = m.iter().copied().fold(f64::MIN, f64::max);
        let (pr, pc) = (hot / 4, hot % 4);
        let argmax = m.iter().position(|&v| v == max).unwrap();
        assert_eq!((argmax / 16 / 4, argmax % 16 / 4), (pr, pc));
    }
}

#[test]
fn checkerboard_views_match_elementwise_products() {
    let mut r = rng(2);
    let (h, w, f) = (6, 6, 4);
    let x: Vec<f64> = (0..h * w * f).map(|_| r.random_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..h * w).map(|i| (i / w + i % w) % 2 == 0).collect();
    let v = views_from_mask(&Tensor::new(vec![h, w, f], x.clone()).unwrap(), &mask).unwrap();
    for cell in 0..h * w {
        let m = if mask[cell] { 1.0 } else { 0.0 };
        for k in 0..f {
            let i = cell * f + k;
            assert_eq!(v.subject.data()[i], m * x[i]);
            assert_eq!(v.context.data()[i], (1.0 - m) * x[i]);
        }
    }
}

#[test]
fn crm_weights_match_the_direct_softmax() {
    let (d, da) = (5, 3);
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let wq: Vec<f64> = (0..d * da).map(|_| r.random_range(-1.0..1.0)).collect();
    let wk: Vec<f64> = (0..d * da).map(|_| r.random_range(-1.0..1.0)).collect();
    store
        .insert(WQ, Tensor::matrix(d, da, wq.clone()).unwrap())
        .unwrap();
    store
        .insert(WK, Tensor::matrix(d, da, wk.clone()).unwrap())
        .unwrap();
    let embs: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut r, d)).collect();
    let (t0, t1) = (random_unit(&mut r, d), random_unit(&mut r, d));
    let mut g = Graph::new();
    let b = bundle(&mut g, &embs);
    let p = pair(&mut g, &t0, &t1);
    let cfg = CrmConfig {
        attn_dim: da,
        ..CrmConfig::default()
    };
    let f = crm::fuse(&mut g, &b, &p, &store, &cfg, &Branch::ALL).unwrap();
    let alpha = f.alpha_values(&g).unwrap();

    let proj = |v: &[f64], w: &[f64]| -> Vec<f64> {
        (0..da)
            .map(|j| (0..d).map(|i| v[i] * w[i * da + j]).sum())
            .collect()
    };
    let q = proj(&t1, &wq);
    let s: Vec<f64> = embs
        .iter()
        .map(|e| dot(&q, &proj(e, &wk)) / (da as f64).sqrt())
        .collect();
    let mx = s.iter().copied().fold(f64::MIN, f64::max);
    let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
    for (a, sv) in alpha.iter().zip(&s) {
        assert!((a - (sv - mx).exp() / z).abs() < 1e-12);
    }
    let fused = g.value(f.fused).data();
    for k in 0..d {
        let direct: f64 = (0..3).map(|b| alpha[b] * embs[b][k]).sum();
        assert!((fused[k] - direct).abs() < 1e-12);
    }

    // shifting every raw key by one vector adds the same score to each branch
    let cfg_raw = CrmConfig {
        normalize_keys: false,
        ..cfg
    };
    let shift = [0.3, -0.2, 0.1, 0.4, -0.5];
    let moved: Vec<Vec<f64>> = embs
        .iter()
        .map(|e| e.iter().zip(&shift).map(|(a, b)| a + b).collect())
        .collect();
    let raw = |embs: &[Vec<f64>]| {
        let mut g = Graph::new();
        let b = bundle(&mut g, embs);
        let p = pair(&mut g, &t0, &t1);
        let f = crm::fuse(&mut g, &b, &p, &store, &cfg_raw, &Branch::ALL).unwrap();
        f.alpha_values(&g).unwrap()
    };
    for (a, b) in raw(&embs).iter().zip(raw(&moved)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn average_and_crm_agree_on_identical_branches() {
    let mut r = rng(9);
    let e = random_unit(&mut r, 4);
    let (t0, t1) = (random_unit(&mut r, 4), random_unit(&mut r, 4));
    let mut store = ParamStore::new();
    let cfg = CrmConfig {
        attn_dim: 3,
        ..CrmConfig::default()
    };
    crm::init_crm(&mut store, 4, &cfg, &mut r).unwrap();
    let mut g = Graph::new();
    let b = bundle(&mut g, &[e.clone(), e.clone(), e]);
    let p = pair(&mut g, &t0, &t1);
    let a = fuse_baseline(&mut g, FusionKind::Average, &b, &p, &store, &Branch::ALL).unwrap();
    let c = crm::fuse(&mut g, &b, &p, &store, &cfg, &Branch::ALL).unwrap();
    assert!(g
        .value(a.fused)
        .data()
        .iter()
        .zip(g.value(c.fused).data())
        .all(|(x, y)| (x - y).abs() < 1e-15));
}

#[test]
fn concat_identity_block_reproduces_one_branch() {
    let d = 4;
    let mut r = rng(3);
    let embs: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut r, d)).collect();
    for pick in 0..3 {
        let mut w = vec![0.0; 3 * d * d];
        for i in 0..d {
            w[(pick * d + i) * d + i] = 1.0;
        }
        let mut store = ParamStore::new();
        store
            .insert(CONCAT_W, Tensor::matrix(3 * d, d, w).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let b = bundle(&mut g, &embs);
        let p = pair(&mut g, &[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]);
        let f = fuse_baseline(
            &mut g,
            FusionKind::ConcatLinear,
            &b,
            &p,
            &store,
            &Branch::ALL,
        )
        .unwrap();
        // branch embeddings are renormalized on the way in
        for (a, b) in g.value(f.fused).data().iter().zip(&embs[pick]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn half_open_gate_mixes_input_and_mlp() {
    let (n, d, hdim) = (3, 4, 5);
    let mut r = rng(8);
    let mut store = ParamStore::new();
    init_gated_block(&mut store, "blk", d, hdim, 0.0, &mut r).unwrap();
    let w2: Vec<f64> = (0..hdim * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let b2: Vec<f64> = (0..d).map(|_| r.random_range(-0.5..0.5)).collect();
    *store.get_mut("blk.w2").unwrap() = Tensor::matrix(hdim, d, w2.clone()).unwrap();
    *store.get_mut("blk.b2").unwrap() = Tensor::vector(b2.clone());
    let x: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let xv = g
        .constant(Tensor::matrix(n, d, x.clone()).unwrap())
        .unwrap();
    let out = apply_gated_block(&mut g, &store, "blk", xv).unwrap();
    let w1 = store.get("blk.w1").unwrap().data().to_vec();
    for row in 0..n {
        let xr = &x[row * d..(row + 1) * d];
        let h: Vec<f64> = (0..hdim)
            .map(|j| (0..d).map(|i| xr[i] * w1[i * hdim + j]).sum::<f64>().tanh())
            .collect();
        for k in 0..d {
            let mlp = (0..hdim).map(|j| h[j] * w2[j * d + k]).sum::<f64>() + b2[k];
            let expect = 0.5 * xr[k] + 0.5 * mlp;
            assert!((g.value(out).data()[row * d + k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn gates_of_unused_branches_get_no_gradient() {
    let d = ctxcompat::worldgen::build_world(
        ctxcompat::worldgen::WorldSpec::with_table(vec![vec![true, false]], 1).unwrap(),
    )
    .unwrap();
    let obs = d.render(0, 1, 5, ctxcompat::worldgen::SplitTag::Train);
    let mut cfg = ModelConfig::gradcheck(0);
    cfg.fusion = FusionKind::Average;
    let model = Model::new(cfg, &d.spec.class_names, true).unwrap();
    let arch = &model.arch;
    let inputs = arch
        .inputs(&obs.x, Some(&obs.mask), arch.config.train_views)
        .unwrap();
    let mut g = Graph::new();
    let bundle = arch.refine(&mut g, &model.store, &inputs).unwrap();
    let cls = bundle.get(Branch::Global).unwrap().cls;
    let loss = g.sum(cls).unwrap();
    let grads = g.backward(loss).unwrap();
    for i in 1..=2 {
        let gr = grads.get(&format!("csr.g.{i}.rho")).unwrap().data()[0];
        assert!(gr != 0.0, "layer {i}");
        for b in ["s", "c"] {
            if let Some(t) = grads.get(&format!("csr.{b}.{i}.rho")) {
                assert_eq!(t.data()[0], 0.0);
            }
        }
    }
}

fn text_pair_values(prompts: &PromptSet, enc: &TextEncoder) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let p = build_text_pair(&mut g, prompts, enc, &ParamStore::new(), None).unwrap();
    (g.value(p.t0).data().to_vec(), g.value(p.t1).data().to_vec())
}

fn template_embedding(enc: &TextEncoder, text: &str) -> Vec<f64> {
    let mut g = Graph::new();
    let ids = ctxcompat::encoders::tokenize(text, enc.config.vocab);
    let v = enc.encode(&mut g, &ids, &[]).unwrap();
    g.value(v).data().to_vec()
}

#[test]
fn prompt_pairs_are_normalized_template_means() {
    let enc = TextEncoder::new(TextConfig::default()).unwrap();
    let set = |normal: &[&str]| PromptSet {
        class_name: "Bottle".into(),
        normal: normal.iter().map(|s| s.to_string()).collect(),
        anomalous: vec!["broken {cls}".into()],
        formatting: vec![],
    };
    let one = text_pair_values(&set(&["flawless {cls}"]), &enc).0;
    let direct = template_embedding(&enc, "flawless Bottle");
    assert!(one.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-12));
    let dup = text_pair_values(&set(&["flawless {cls}", "flawless {cls}"]), &enc).0;
    assert!(one.iter().zip(&dup).all(|(a, b)| (a - b).abs() < 1e-12));
    let two = text_pair_values(&set(&["flawless {cls}", "perfect {cls}"]), &enc).0;
    let other = template_embedding(&enc, "perfect Bottle");
    let mean: Vec<f64> = unit(
        &direct
            .iter()
            .zip(&other)
            .map(|(a, b)| a + b)
            .collect::<Vec<_>>(),
    );
    assert!(two.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn standard_templates_embed_distinctly() {
    let enc = TextEncoder::new(TextConfig::default()).unwrap();
    let p = PromptSet::standard("Bottle");
    let texts: Vec<String> = p
        .normal
        .iter()
        .chain(&p.anomalous)
        .map(|t| ctxcompat::textref::instantiate(t, "Bottle").unwrap())
        .collect();
    let embs: Vec<Vec<f64>> = texts.iter().map(|t| template_embedding(&enc, t)).collect();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let dist: f64 = embs[i]
                .iter()
                .zip(&embs[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            assert!(dist > 0.0, "{} / {}", texts[i], texts[j]);
        }
    }
}

fn lse_ce(l: &[f64], y: usize) -> f64 {
    let m = l[0].max(l[1]);
    m + ((l[0] - m).exp() + (l[1] - m).exp()).ln() - l[y]
}

#[test]
fn image_objective_matches_term_sums() {
    let mut r = rng(21);
    let d = 4;
    let embs: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut r, d)).collect();
    let (t0, t1) = (random_unit(&mut r, d), random_unit(&mut r, d));
    let w = ImgLossWeights {
        branch_ce: 0.7,
        fuse_img: 1.3,
        fuse_cons: 0.5,
        fuse_ent: 0.05,
    };
    let mut store = ParamStore::new();
    store.insert("static.s", Tensor::vector(vec![0.4])).unwrap();
    store
        .insert("static.c", Tensor::vector(vec![-0.2]))
        .unwrap();
    store.insert("static.g", Tensor::vector(vec![0.1])).unwrap();
    for y in [0u8, 1] {
        let mut g = Graph::new();
        let b = bundle(&mut g, &embs);
        let p = pair(&mut g, &t0, &t1);
        let f = fuse_baseline(
            &mut g,
            FusionKind::StaticWeights,
            &b,
            &p,
            &store,
            &Branch::ALL,
        )
        .unwrap();
        let t = img_terms(&mut g, &f, y, &w).unwrap();

        let z: f64 = [0.4f64, -0.2, 0.1].iter().map(|v| v.exp()).sum();
        let alpha: Vec<f64> = [0.4f64, -0.2, 0.1].iter().map(|v| v.exp() / z).collect();
        let fused: Vec<f64> = (0..d)
            .map(|k| (0..3).map(|i| alpha[i] * embs[i][k]).sum())
            .collect();
        let fused = unit(&fused);
        let logits = |v: &[f64]| [dot(v, &t0), dot(v, &t1)];
        let bl: Vec<[f64; 2]> = embs.iter().map(|e| logits(e)).collect();
        let fl = logits(&fused);
        let mean = [
            bl.iter().map(|l| l[0]).sum::<f64>() / 3.0,
            bl.iter().map(|l| l[1]).sum::<f64>() / 3.0,
        ];
        let cons = (fl[0] - mean[0]).powi(2) + (fl[1] - mean[1]).powi(2);
        let ent = -alpha.iter().map(|a| a * a.ln()).sum::<f64>();
        let expect = w.branch_ce * bl.iter().map(|l| lse_ce(l, y as usize)).sum::<f64>()
            + w.fuse_img * lse_ce(&fl, y as usize)
            + w.fuse_cons * cons
            - w.fuse_ent * ent;
        assert!((g.scalar(t.fused_ce) - lse_ce(&fl, y as usize)).abs() < 1e-12);
        assert!(
            (g.scalar(t.total) - expect).abs() < 1e-12,
            "{} vs {expect}",
            g.scalar(t.total)
        );
    }
}
