//! One-seed feasibility probe for the ablation experiments. Temporary.

use std::collections::HashSet;
use std::time::Instant;

use dclp_core::augment::{AugmentMethod, AugmentationSpec};
use dclp_core::cellgraph::{CellFormat, CellGraph};
use dclp_core::curriculum::{CurriculumConfig, SelectionMode};
use dclp_core::evalkit::{kendall_tau, percentile_rank};
use dclp_core::neuralcore::Encoder;
use dclp_core::predictor::{finetune, FinetuneConfig, LabeledSample, LossKind};
use dclp_core::pretrain::{pretrain, ContrastiveConfig};
use dclp_core::search::{run_search, SearchConfig, SearchStrategy};
use dclp_core::spaces::{
    BenchmarkTable, GroundTruth, SampleSource, SearchSpaceSpec, SyntheticOracle, TableRecord,
    Topology,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn l2norm(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn the_space() -> SearchSpaceSpec {
    SearchSpaceSpec {
        format: CellFormat::Oon,
        topology: Topology::Free,
        max_nodes: 5,
        max_edges: 10,
        ops: ["conv1x1", "conv3x3", "maxpool", "skip"].into_iter().map(String::from).collect(),
    }
}

fn main() {
    let t0 = Instant::now();
    let space = the_space();
    let all = space.enumerate(None).unwrap();
    println!("enumerated {} distinct cells in {:?}", all.len(), t0.elapsed());

    // Seeded 4,096-cell subset.
    let mut cells = all;
    use rand::seq::SliceRandom;
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    cells.truncate(4096);

    let mut oracle = SyntheticOracle::from_seed(&space, 7, 0.01);
    let pair_scale: f64 =
        std::env::var("PAIRW").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    oracle.pair_weights.iter_mut().for_each(|w| *w *= pair_scale);
    println!(
        "oracle weights: ops {:?} path {:.3} edge {:.3}",
        oracle.op_weights, oracle.path_weight, oracle.edge_weight
    );
    let scores: Vec<f64> = cells.iter().map(|g| oracle.score(g).unwrap()).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
    println!("oracle scores: mean {mean:.4} std {:.4} range [{lo:.4}, {hi:.4}]", var.sqrt());

    let seed: u64 = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(101);
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unlabeled: Vec<CellGraph> = order[..200].iter().map(|&i| cells[i].clone()).collect();
    let labeled_idx: HashSet<usize> = order[200..300].iter().copied().collect();
    let labeled: Vec<LabeledSample> = order[200..300]
        .iter()
        .map(|&i| LabeledSample { graph: cells[i].clone(), accuracy: scores[i] })
        .collect();
    let eval: Vec<&CellGraph> = (0..cells.len())
        .filter(|i| !labeled_idx.contains(i))
        .map(|i| &cells[i])
        .collect();
    let truths: Vec<f64> = (0..cells.len())
        .filter(|i| !labeled_idx.contains(i))
        .map(|i| scores[i])
        .collect();
    println!("eval set: {} cells", eval.len());

    let init = Encoder::<f64>::new(
        space.vocabulary(),
        128,
        3,
        &mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + 1),
    );
    let cand: usize = std::env::var("CAND").ok().and_then(|s| s.parse().ok()).unwrap_or(8);
    let aug = AugmentationSpec { method: AugmentMethod::Mixed, ratio: None, candidates: cand };
    let lr: f64 = std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(0.03);
    let contrastive =
        ContrastiveConfig { lr, candidates: cand, ..ContrastiveConfig::desk_scale() };

    let dclp_cur = CurriculumConfig::default();
    let anti_cur = CurriculumConfig { tau_start: 3.0, tau_end: -1.0, ..Default::default() };
    let nocur = CurriculumConfig {
        tau_start: 0.0,
        tau_end: 0.0,
        selection_mode: SelectionMode::Stochastic,
        ..Default::default()
    };

    let tau_of = |enc: Encoder<f64>, loss: LossKind, tag: &str| -> f64 {
        let t = Instant::now();
        let holdout: f64 =
            std::env::var("HOLDOUT").ok().and_then(|s| s.parse().ok()).unwrap_or(0.0);
        let cfg = FinetuneConfig {
            loss,
            holdout_fraction: holdout,
            freeze_encoder: std::env::var("FREEZE").is_ok(),
            ..Default::default()
        };
        let out = finetune(
            enc,
            &labeled,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + 7),
        )
        .unwrap();
        let eval_owned: Vec<CellGraph> = eval.iter().map(|g| (*g).clone()).collect();
        let preds = out.predictor.predict(&eval_owned).unwrap();
        let tau = kendall_tau(&preds, &truths).unwrap();
        println!(
            "  finetune[{tag}] epochs {} best {} tau {tau:.4} in {:?}",
            out.epoch_losses.len(),
            out.best_epoch,
            t.elapsed()
        );
        tau
    };

    // Alignment diagnostic: mean cosine distance of 1-edit pairs over mean
    // distance of random pairs — lower means edit-neighbours sit closer.
    let alignment = |enc: &Encoder<f64>| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe: Vec<&CellGraph> = eval.iter().take(200).copied().collect();
        let mut edit_d = 0.0;
        let mut rand_d = 0.0;
        let mut n = 0.0;
        for (i, g) in probe.iter().enumerate() {
            let m = match space.mutate(g, &mut rng) {
                Ok(m) => m,
                Err(_) => continue,
            };
            let a = l2norm(&enc.embed(g).unwrap());
            let b = l2norm(&enc.embed(&m).unwrap());
            let r = l2norm(&enc.embed(probe[(i + 97) % probe.len()]).unwrap());
            edit_d += 1.0 - dot(&a, &b);
            rand_d += 1.0 - dot(&a, &r);
            n += 1.0;
        }
        (edit_d / n) / (rand_d / n)
    };

    if std::env::var("SWEEP").is_ok() {
        println!("alignment[init] {:.4}", alignment(&init));
        tau_of(init.clone(), LossKind::ListMle, "random-init");
        let grid: &[(f64, f64, f64, f64)] = &[
            (0.1, 2.0, 0.2, 0.9),
            (0.1, 4.0, 0.2, 0.9),
            (0.1, 1.0, 0.5, 0.9),
            (0.03, 1.0, 0.2, 0.97),
            (0.05, 2.0, 0.2, 0.95),
        ];
        for &(lr, sigma, temp, mom) in grid {
            let t = Instant::now();
            let cfg = ContrastiveConfig {
                lr,
                rbf_sigma: sigma,
                temperature: temp,
                momentum: mom,
                ..ContrastiveConfig::desk_scale()
            };
            let out = pretrain(
                &unlabeled,
                init.clone(),
                &dclp_cur,
                &cfg,
                &aug,
                &mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + 3),
            )
            .unwrap();
            let tag = format!("lr={lr} sig={sigma} tmp={temp} mom={mom}");
            println!(
                "pretrain[{tag}]: loss {:.4} -> {:.4} align {:.4} in {:?}",
                out.epoch_losses.first().unwrap(),
                out.epoch_losses.last().unwrap(),
                alignment(&out.encoder),
                t.elapsed()
            );
            tau_of(out.encoder, LossKind::ListMle, &tag);
        }
        return;
    }

    let mut arms = Vec::new();
    for (tag, cur) in [("dclp", &dclp_cur), ("anti", &anti_cur), ("nocur", &nocur)] {
        let t = Instant::now();
        let out = pretrain(
            &unlabeled,
            init.clone(),
            cur,
            &contrastive,
            &aug,
            &mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + 3),
        )
        .unwrap();
        println!(
            "pretrain[{tag}]: loss {:.4} -> {:.4}, sigma {:.4}, {:?}",
            out.epoch_losses.first().unwrap(),
            out.epoch_losses.last().unwrap(),
            out.sigma_used,
            t.elapsed()
        );
        let tau = tau_of(out.encoder.clone(), LossKind::ListMle, tag);
        arms.push((tag, tau, out.encoder));
    }

    let tau_random = tau_of(init.clone(), LossKind::ListMle, "random-init");

    println!("\nmargins:");
    println!("  dclp {:.4}  anti {:.4}  nocur {:.4}", arms[0].1, arms[1].1, arms[2].1);
    println!("  dclp - anti  = {:.4}", arms[0].1 - arms[1].1);
    println!("  dclp - nocur = {:.4}", arms[0].1 - arms[2].1);
    println!("  dclp - random-init = {:.4}", arms[0].1 - tau_random);
    if std::env::var("ARMS_ONLY").is_ok() {
        return;
    }
    let dclp_enc = arms[0].2.clone();
    let tau_mse = tau_of(dclp_enc.clone(), LossKind::Mse, "mse");
    let tau_msenorm = tau_of(dclp_enc.clone(), LossKind::MseNorm, "mse_norm");
    println!("  listmle {:.4} mse {:.4} mse_norm {:.4}", arms[0].1, tau_mse, tau_msenorm);

    // Search with the trained predictor.
    let t = Instant::now();
    let cfg = FinetuneConfig::default();
    let out = finetune(
        dclp_enc,
        &labeled,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + 7),
    )
    .unwrap();
    let search_cfg = SearchConfig {
        strategy: SearchStrategy::Random,
        seed: seed.wrapping_mul(1000) + 9,
        ..Default::default()
    };
    let mut table = BenchmarkTable::new(space.clone());
    for (g, s) in cells.iter().zip(&scores) {
        table
            .insert(TableRecord { graph: g.clone(), accuracy: *s, metrics: Default::default() })
            .unwrap();
    }
    let source = SampleSource::Table(&table);
    let evaluator = GroundTruth::Table(&table);
    let found = run_search(&source, &out.predictor, &evaluator, &search_cfg).unwrap();
    let best = found.best.unwrap();
    let pct = percentile_rank(&scores, best.true_score).unwrap();
    println!(
        "search: best true {:.4} percentile {pct:.3} queries {} in {:?}",
        best.true_score, found.queries, t.elapsed()
    );
    println!("total {:?}", t0.elapsed());
}
