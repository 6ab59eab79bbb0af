//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,3` runs a subset.

mod common;

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use pathmask_core::corpus::{prepare, words, Record};
use pathmask_core::datagen::{corpus_stats, generate, SynthSpec};
use pathmask_core::eval::{evaluate, inconsistency_rate, macro_f1, micro_f1, EvalReport};
use pathmask_core::labelseq::{parse_sequence, TargetFormat};
use pathmask_core::pamm::{off_path_mass, PammRows, PathAdaptiveMask};
use pathmask_core::train::{backward, pamm_loss, teacher_forcing, total_loss, train, write_log, TrainConfig};
use pathmask_core::{bfs_flatten, build_mask, LabelHierarchy, LabelSet, Model, ModelConfig, Vocabulary};

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const WORKED_EDGES: &str = "ROOT\tl1\nROOT\tl3\nl1\tl2\nl3\tl4\nl2\tl5\n";

fn mask_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = vec![(
        WORKED_EDGES.to_string(),
        [("l1", None), ("l3", None), ("l2", Some("l1")), ("l4", Some("l3")), ("l5", Some("l2"))]
            .into_iter()
            .map(|(c, p)| (c.to_string(), p.map(str::to_string)))
            .collect(),
        None,
    )];
    for _ in 0..200 {
        let t = random_tree(&mut rng, 12, 4);
        cases.push((t.edges, t.parent, Some(())));
    }
    let mut cells = 0usize;
    let mut bad = 0usize;
    for (edges, parent, random) in &cases {
        let h = LabelHierarchy::parse(edges).map_err(|e| e.to_string())?;
        let set = match random {
            None => h.label_set(["l1", "l2", "l3", "l4", "l5"]).unwrap(),
            Some(()) => random_consistent_set(&mut rng, &h),
        };
        let ml = bfs_flatten(&h, &set).map_err(|e| e.to_string())?;
        let mask = build_mask(&h, &ml).map_err(|e| e.to_string())?;
        let tokens = ml.to_strings(&h);
        let expect = oracle_mask(parent, &tokens);
        let got = mask.to_dense();
        for (i, row) in expect.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                cells += 1;
                if got[[i, j]] != v {
                    bad += 1;
                }
            }
        }
    }
    check(bad == 0, || format!("{bad} of {cells} cells differ"))?;
    Ok(format!("{} instances, {cells} cells, 0 mismatched", cases.len()))
}

fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 0..500 {
        let t = random_tree(&mut rng, 12, 4);
        let h = LabelHierarchy::parse(&t.edges).map_err(|e| e.to_string())?;
        let set = random_consistent_set(&mut rng, &h);
        let ml = bfs_flatten(&h, &set).map_err(|e| e.to_string())?;
        let (back, diag) = parse_sequence(&h, &ml.to_strings(&h), TargetFormat::Hierarchical);
        check(back == set && diag.is_clean(), || {
            format!("case {n}: {:?} -> {:?} ({diag:?})", h.names_of(&set), h.names_of(&back))
        })?;
    }
    Ok("500 random sets, all clean".into())
}

fn micro_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        blocks: 1,
        d_ff: 8,
        vocab_size: vocab.len(),
        out_size: vocab.decoder_size(),
        max_src_len: 8,
        max_tgt_len: 8,
        dropout: 0.0,
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
const GRAD_FLOOR: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = LabelHierarchy::parse("ROOT\tA\nROOT\tB\nA\tA1\nA\tA2\nB\tB1\n").unwrap();
    let sets: [&[&str]; 6] = [
        &["A"],
        &["A", "A1"],
        &["A", "B"],
        &["A", "B", "A1"],
        &["B", "B1"],
        &["A", "A2", "B"],
    ];
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let instances = 24;
    for k in 0..instances {
        let rho = [0.0, 1.0, 100.0][k % 3];
        let recs: Vec<Record> = (0..2)
            .map(|_| {
                let labels = sets[rng.random_range(0..sets.len())];
                let text: Vec<&str> = (0..rng.random_range(1..=5)).map(|_| ["x", "y", "z"][rng.random_range(0..3)]).collect();
                Record {
                    text: text.join(" "),
                    labels: labels.iter().map(|s| s.to_string()).collect(),
                }
            })
            .collect();
        let vocab = Vocabulary::build(&h, ["x", "y", "z"]);
        let batch = prepare(&recs, &h, &vocab, TargetFormat::Hierarchical, 8, 0).map_err(|e| e.to_string())?;
        if batch.iter().any(|e| e.target.len() > 6) {
            return Err("instance longer than 6 tokens".into());
        }
        let mut model = Model::new(micro_config(&vocab), k as u64).map_err(|e| e.to_string())?;
        // sharpen attention so the mask term has real curvature
        for id in model.params().ids().collect::<Vec<_>>() {
            let name = model.params().name(id).to_string();
            if name.contains(".q.") || name.contains(".k.") {
                model.params_mut().get_mut(id).mapv_inplace(|v| v * 3.0);
            }
        }
        let cfg = TrainConfig {
            rho,
            jobs: 1,
            ..Default::default()
        };
        let (_, grads) = backward(&model, &batch, &cfg, None).map_err(|e| e.to_string())?;
        let eps = 1e-5;
        for id in model.params().ids().collect::<Vec<_>>() {
            let shape = model.params().get(id).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = model.params().get(id)[[r, c]];
                    model.params_mut().get_mut(id)[[r, c]] = orig + eps;
                    let up = total_loss(&model, &batch, &cfg).unwrap().total;
                    model.params_mut().get_mut(id)[[r, c]] = orig - eps;
                    let down = total_loss(&model, &batch, &cfg).unwrap().total;
                    model.params_mut().get_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let analytic = grads.get(id)[[r, c]];
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
                    checked += 1;
                    if rel > worst {
                        worst = rel;
                    }
                }
            }
        }
    }
    check(worst <= GRAD_TOL, || format!("max relative error {worst:.3e} > {GRAD_TOL:e}"))?;
    Ok(format!("{instances} models, {checked} partials, max relative error {worst:.2e}"))
}

fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = LabelHierarchy::parse(WORKED_EDGES).unwrap();
    let vocab = Vocabulary::build(&h, ["p", "q", "r", "s"]);
    let mut rows = 0usize;
    for k in 0..20 {
        let cfg = ModelConfig {
            d_model: 16,
            heads: 4,
            blocks: 2,
            d_ff: 16,
            dropout: 0.0,
            max_src_len: 12,
            max_tgt_len: 16,
            ..ModelConfig::new(vocab.len(), vocab.decoder_size())
        };
        let model = Model::new(cfg, 100 + k).unwrap();
        let set = random_consistent_set(&mut rng, &h);
        let ml = bfs_flatten(&h, &set).unwrap();
        let mask = build_mask(&h, &ml).unwrap();
        let (input, _) = teacher_forcing(&ml.to_ids(), 16);
        let src: Vec<usize> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0..vocab.len())).collect();
        let trace = model.forward_trace(&src, &input).unwrap();
        for blk in &trace.self_scores {
            for s in blk {
                for (i, row) in s.rows().into_iter().enumerate() {
                    rows += 1;
                    let sum: f64 = row.iter().sum();
                    check((sum - 1.0).abs() <= 1e-6, || format!("row sum {sum}"))?;
                    check(row.iter().skip(i + 1).all(|&v| v == 0.0), || "future attention".into())?;
                }
                let full = off_path_mass(s.view(), &PathAdaptiveMask::full(s.nrows())).unwrap();
                check(full.iter().all(|v| v.abs() <= 1e-6), || format!("full mask mass {full:?}"))?;
            }
        }
        for policy in [PammRows::All, PammRows::Labels] {
            let l = pamm_loss(&trace.self_scores, &mask, policy).unwrap();
            check(l >= 0.0, || format!("negative pamm loss {l}"))?;
        }
        // scores with no mass on BOS and a mask covering every causal column
        let n = input.len() - 1;
        let mut synthetic = Array2::zeros((n + 1, n + 1));
        synthetic[[0, 0]] = 1.0;
        for i in 1..=n {
            let w: Vec<f64> = (0..i).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = w.iter().sum();
            for (j, v) in w.iter().enumerate() {
                synthetic[[i, j + 1]] = v / z;
            }
        }
        let l = pamm_loss(&[vec![synthetic.clone(), synthetic]], &PathAdaptiveMask::full(n), PammRows::All).unwrap();
        check(l.abs() <= 1e-6, || format!("covered pamm loss {l}"))?;

        let recs = vec![Record {
            text: "p q r".into(),
            labels: h.names_of(&set).into_iter().map(String::from).collect(),
        }];
        let batch = prepare(&recs, &h, &vocab, TargetFormat::Hierarchical, 12, 0).unwrap();
        for rho in [0.0, 1.0, 100.0] {
            let tc = TrainConfig {
                rho,
                ..Default::default()
            };
            let b = total_loss(&model, &batch, &tc).unwrap();
            let diff = (b.total - (b.loss_hia + rho * b.loss_pamm)).abs();
            check(diff <= 1e-9, || format!("total off by {diff:e} at rho {rho}"))?;
            check(b.loss_pamm >= 0.0, || "negative batch pamm".into())?;
        }
    }
    Ok(format!("20 models, {rows} score rows"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_tree(&mut rng, 12, 4);
    let h = LabelHierarchy::parse(&t.edges).unwrap();
    let k = h.len();
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for _ in 0..500 {
        gold.push(random_set(&mut rng, k));
        pred.push(if rng.random_bool(0.5) {
            random_consistent_set(&mut rng, &h)
        } else {
            random_set(&mut rng, k)
        });
    }
    for n in [1, 7, 100, 500] {
        let (g, p) = (&gold[..n], &pred[..n]);
        let mi = micro_f1(g, p).unwrap();
        let ma = macro_f1(g, p, &h).unwrap();
        let inc = inconsistency_rate(p, &h);
        check(mi == oracle_micro(g, p, k), || format!("micro {mi} vs {}", oracle_micro(g, p, k)))?;
        check(ma == oracle_macro(g, p, k), || format!("macro {ma} vs {}", oracle_macro(g, p, k)))?;
        check(inc == oracle_inconsistency(p, &h), || format!("inconsistency {inc}"))?;
    }
    let id = |i| pathmask_core::LabelId(i);
    let g: Vec<LabelSet> = vec![[id(0), id(1), id(2)].into()];
    let p: Vec<LabelSet> = vec![[id(0), id(1), id(3)].into()];
    let two_thirds = micro_f1(&g, &p).unwrap();
    check((two_thirds - 2.0 / 3.0).abs() < 1e-15, || format!("hand case gave {two_thirds}"))?;
    Ok("500 random pairs exact; TP=2/FP=1/FN=1 gives 2/3".into())
}

struct Arm {
    name: &'static str,
    format: TargetFormat,
    rho: f64,
}

const ARMS: [Arm; 3] = [
    Arm {
        name: "flat",
        format: TargetFormat::Flat,
        rho: 0.0,
    },
    Arm {
        name: "hia",
        format: TargetFormat::Hierarchical,
        rho: 0.0,
    },
    Arm {
        name: "pamm",
        format: TargetFormat::Hierarchical,
        rho: 100.0,
    },
];

/// Shared by every arm of the ablation.
const ABLATION_EPOCHS: usize = 10;
const ABLATION_LR: f64 = 1e-3;
const SEEDS: [u64; 3] = [0, 1, 2];

fn run_arm(data: &pathmask_core::datagen::SynthData, arm: &Arm, seed: u64) -> Result<EvalReport, String> {
    let h = &data.hierarchy;
    let vocab = Vocabulary::build(h, words(&data.train));
    let mcfg = ModelConfig::new(vocab.len(), vocab.decoder_size());
    let prep = |r: &[Record]| prepare(r, h, &vocab, arm.format, mcfg.max_src_len, seed).map_err(|e| e.to_string());
    let (tr, va, te) = (prep(&data.train)?, prep(&data.val)?, prep(&data.test)?);
    let tcfg = TrainConfig {
        rho: arm.rho,
        lr: ABLATION_LR,
        epochs: ABLATION_EPOCHS,
        seed,
        ..Default::default()
    };
    let model = Model::new(mcfg, seed).map_err(|e| e.to_string())?;
    let out = train(model, &tr, &va, h, arm.format, &tcfg, |_| {}).map_err(|e| e.to_string())?;
    let (report, _) = evaluate(&out.model, h, &te, arm.format, out.model.config().max_tgt_len).map_err(|e| e.to_string())?;
    Ok(report)
}

fn ablation() -> Outcome {
    let mut sums = [(0.0, 0.0, 0.0); 3];
    for &seed in &SEEDS {
        let spec = SynthSpec {
            seed,
            ..Default::default()
        };
        let data = generate(&spec).map_err(|e| e.to_string())?;
        let stats = corpus_stats(&data.train, &data.hierarchy).map_err(|e| e.to_string())?;
        check(stats.multi_path * 10 >= 3 * stats.samples, || format!("only {} multi-path samples", stats.multi_path))?;
        for (a, arm) in ARMS.iter().enumerate() {
            let r = run_arm(&data, arm, seed)?;
            eprintln!(
                "  seed {seed} {:<5} micro {:.4} macro {:.4} inconsistency {:.4}",
                arm.name, r.micro_f1, r.macro_f1, r.inconsistency_rate
            );
            sums[a].0 += r.micro_f1;
            sums[a].1 += r.macro_f1;
            sums[a].2 += r.inconsistency_rate;
        }
    }
    let n = SEEDS.len() as f64;
    let [flat, hia, full] = sums.map(|(a, b, c)| (a / n, b / n, c / n));
    let summary = format!(
        "macro flat {:.4} hia {:.4} pamm {:.4}; micro hia {:.4} pamm {:.4}; inconsistency flat {:.4} pamm {:.4}",
        flat.1, hia.1, full.1, hia.0, full.0, flat.2, full.2
    );
    let mut failed = Vec::new();
    if hia.1 - flat.1 < 0.02 {
        failed.push("(a) hia does not beat flat by 2 macro points");
    }
    if full.1 - hia.1 < 0.01 {
        failed.push("(b) rho=100 does not beat rho=0 by 1 macro point");
    }
    if hia.0 - full.0 > 0.005 {
        failed.push("(b) rho=100 loses more than 0.5 micro points");
    }
    if full.2 > 0.02 || full.2 > flat.2 {
        failed.push("(c) inconsistency above 2% or above flat");
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failed.join(", ")))
    }
}

fn memorization() -> Outcome {
    let data = generate(&SynthSpec {
        branching: vec![2, 2],
        vocab_size: 60,
        truncation_rate: 0.0,
        train: 10,
        val: 0,
        test: 0,
        seed: 7,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let h = &data.hierarchy;
    let seen = corpus_stats(&data.train, h).map_err(|e| e.to_string())?.distinct_per_level;
    check(seen == [2, 4], || format!("corpus does not cover every label: {seen:?}"))?;
    let vocab = Vocabulary::build(h, words(&data.train));
    let mcfg = ModelConfig::new(vocab.len(), vocab.decoder_size());
    let set = prepare(&data.train, h, &vocab, TargetFormat::Hierarchical, 300, 0).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig {
        epochs: 200,
        lr: 1e-3,
        ..Default::default()
    };
    let out = train(Model::new(mcfg, 0).unwrap(), &set, &set, h, TargetFormat::Hierarchical, &tcfg, |_| {})
        .map_err(|e| e.to_string())?;
    let (r, preds) = evaluate(&out.model, h, &set, TargetFormat::Hierarchical, 60).map_err(|e| e.to_string())?;
    let exact = set.iter().zip(&preds).filter(|(e, p)| e.target == p.tokens).count();
    check(exact == set.len() && r.micro_f1 == 1.0 && r.macro_f1 == 1.0 && r.inconsistency_rate == 0.0, || {
        format!(
            "{exact}/10 exact, micro {:.4}, macro {:.4}, inconsistency {:.4}",
            r.micro_f1, r.macro_f1, r.inconsistency_rate
        )
    })?;
    Ok(format!("10/10 sequences reproduced after {} epochs", tcfg.epochs))
}

fn pipeline_bytes(dir: &std::path::Path) -> Result<Vec<Vec<u8>>, String> {
    let spec = SynthSpec {
        train: 60,
        val: 10,
        test: 20,
        seed: 11,
        ..Default::default()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    data.write_to(dir).map_err(|e| e.to_string())?;
    let h = &data.hierarchy;
    let vocab = Vocabulary::build(h, words(&data.train));
    let mut mcfg = ModelConfig::new(vocab.len(), vocab.decoder_size());
    mcfg.d_model = 16;
    mcfg.d_ff = 32;
    let prep = |r: &[Record]| prepare(r, h, &vocab, TargetFormat::Hierarchical, 300, 11).unwrap();
    let tcfg = TrainConfig {
        epochs: 2,
        jobs: 1,
        seed: 11,
        ..Default::default()
    };
    let out = train(Model::new(mcfg, 11).unwrap(), &prep(&data.train), &prep(&data.val), h, TargetFormat::Hierarchical, &tcfg, |_| {})
        .map_err(|e| e.to_string())?;
    let mut log = Vec::new();
    write_log(&out.log, &mut log).unwrap();
    let (report, _) = evaluate(&out.model, h, &prep(&data.test), TargetFormat::Hierarchical, 60).map_err(|e| e.to_string())?;
    let mut csv = Vec::new();
    report.write_label_csv(&mut csv).unwrap();
    let mut files = Vec::new();
    for f in ["hierarchy.tsv", "train.jsonl", "val.jsonl", "test.jsonl"] {
        files.push(std::fs::read(dir.join(f)).map_err(|e| e.to_string())?);
    }
    files.extend([log, report.to_kv().into_bytes(), csv]);
    Ok(files)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = pipeline_bytes(a.path())?;
    let y = pipeline_bytes(b.path())?;
    let names = ["hierarchy", "train", "val", "test", "loss log", "report", "label csv"];
    for (i, (p, q)) in x.iter().zip(&y).enumerate() {
        check(p == q, || format!("{} differs", names[i]))?;
    }
    Ok("corpus, loss log and report byte-identical".into())
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (1, "mask oracle equivalence", mask_oracle),
        (2, "flatten/parse round trip", round_trip),
        (3, "gradient check", gradient_check),
        (4, "attention and loss invariants", invariants),
        (5, "metric oracles", metric_oracles),
        (6, "ablation direction", ablation),
        (7, "memorization", memorization),
        (8, "determinism", determinism),
    ];
    let mut failures = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} {name}: FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
