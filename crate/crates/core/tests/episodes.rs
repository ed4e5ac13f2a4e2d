use std::collections::HashSet;

use afr::episodes_io::{
    mean_ci95, run_protocol, sample_episode, synth_benchmark, synth_generate, BasePrototypes, EpisodeSpec,
    RunReport, SynthConfig,
};
use afr::numerics::Rng;
use afr::semantics::{cosine_relation, select_related, SemanticTable};
use afr::trainer::{Ablation, TrainConfig};
use afr::AfrError;
use proptest::prelude::*;

fn random_table(rng: &mut Rng, classes: usize, dim: usize) -> SemanticTable {
    let mut t = SemanticTable::new(dim).unwrap();
    for c in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        // occasional exact duplicates exercise the name tie-break
        if c > 0 && rng.below(5) == 0 {
            v = t.get(&format!("c{:02}", rng.below(c))).unwrap().to_vec();
        }
        t.insert(format!("c{c:02}"), v).unwrap();
    }
    t
}

fn brute_force(novel: &str, table: &SemanticTable, base: &[String], beta: usize) -> Vec<String> {
    let q = table.get(novel).unwrap();
    let mut all: Vec<(f64, String)> = base
        .iter()
        .filter(|b| b.as_str() != novel)
        .map(|b| {
            let v = table.get(b).unwrap();
            let dot: f64 = q.iter().zip(v).map(|(x, y)| x * y).sum();
            let n = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
            ((dot / (n(q) * n(v))).clamp(-1.0, 1.0), b.clone())
        })
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(beta).map(|(_, n)| n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn selection_matches_brute_force(seed in any::<u64>(), classes in 2usize..=64, dim in 1usize..12) {
        let mut rng = Rng::new(seed, 0);
        let table = random_table(&mut rng, classes, dim);
        let names: Vec<String> = table.class_names().map(String::from).collect();
        let novel = names[rng.below(classes)].clone();
        let base: Vec<String> = names.iter().filter(|_| rng.below(4) != 0).cloned().collect();
        let candidates = base.iter().filter(|b| **b != novel).count();
        prop_assume!(candidates > 0);
        let beta = 1 + rng.below(candidates);
        let sel = select_related(&novel, &table, &base, beta).unwrap();
        let got: Vec<String> = sel.class_names().into_iter().map(String::from).collect();
        prop_assert_eq!(got, brute_force(&novel, &table, &base, beta));
        for r in &sel.ranked {
            prop_assert!((-1.0..=1.0).contains(&r.score));
        }
        prop_assert!(sel.ranked.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn episodes_never_share_records(seed in any::<u64>(), k in 1usize..6, q in 1usize..10) {
        let cfg = SynthConfig { classes: 14, per_class: 16, ..Default::default() };
        let (base, novel, table) = synth_benchmark(&cfg, 7, 2).unwrap();
        let bp = BasePrototypes::from_store(&base).unwrap();
        let spec = EpisodeSpec { k_shot: k, queries_per_class: q, ..Default::default() };
        let ep = sample_episode(&novel, &spec, Some(&table), &bp, 0, &mut Rng::new(seed, 0)).unwrap();
        let support: HashSet<_> = ep.support_records.iter().collect();
        prop_assert_eq!(support.len(), 5 * k);
        prop_assert!(ep.query_records.iter().all(|r| !support.contains(r)));
        prop_assert_eq!(ep.query_records.iter().collect::<HashSet<_>>().len(), 5 * q);
        for sel in &ep.selections {
            prop_assert!(sel.ranked.iter().all(|r| base.contains_class(&r.name)));
        }
    }
}

#[test]
fn selection_errors() {
    let mut t = SemanticTable::new(2).unwrap();
    t.insert("a", vec![1.0, 0.0]).unwrap();
    t.insert("b", vec![0.0, 1.0]).unwrap();
    assert!(matches!(select_related("zzz", &t, &["a"], 1), Err(AfrError::Lookup(_))));
    assert!(matches!(select_related("a", &t, &["a", "b"], 2), Err(AfrError::Config(_))));
    assert!(matches!(select_related("a", &t, &["b", "c"], 1), Err(AfrError::Lookup(_))));
    assert!(t.insert("c", vec![0.0, 0.0]).is_err());
    assert!(cosine_relation(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn embedding_json_round_trip_and_rejections() {
    let t = SemanticTable::from_json_str(r#"{"dim": 2, "embeddings": {"x": [1, 0], "y": [0.5, 0.5]}}"#).unwrap();
    let back = SemanticTable::from_json_str(&t.to_json_string()).unwrap();
    assert_eq!(back.class_names().collect::<Vec<_>>(), vec!["x", "y"]);
    let dup = t.to_json_string().replacen("\"y\"", "\"x\"", 1);
    assert!(SemanticTable::from_json_str(&dup).is_err());
    assert!(SemanticTable::from_json_str("{").is_err());
    assert!(SemanticTable::from_json_str(r#"{"dim": 3, "embeddings": {"x": [1, 0]}}"#).is_err());
    assert!(SemanticTable::from_json_str(r#"{"dim": 2, "embeddings": {}, "extra": 1}"#).is_err());
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Semantic and feature-mean cosines for every class pair.
fn alignment(cfg: &SynthConfig, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (store, table) = synth_generate(cfg, &mut Rng::new(seed, 0)).unwrap();
    let names = store.class_names();
    let means: Vec<Vec<f64>> = names.iter().map(|c| store.class_matrix(c).unwrap().row_mean()).collect();
    let sem = names
        .iter()
        .map(|a| names.iter().map(|b| cosine_relation(table.get(a).unwrap(), table.get(b).unwrap()).unwrap()).collect())
        .collect();
    let feat = means
        .iter()
        .map(|a| means.iter().map(|b| cosine_relation(a, b).unwrap()).collect())
        .collect();
    (sem, feat)
}

#[test]
fn generator_semantic_feature_correlation() {
    for seed in 0..5 {
        let (sem, feat) = alignment(&SynthConfig::default(), seed);
        let (mut xs, mut ys) = (vec![], vec![]);
        for i in 0..sem.len() {
            for j in i + 1..sem.len() {
                xs.push(sem[i][j]);
                ys.push(feat[i][j]);
            }
        }
        let r = pearson(&xs, &ys);
        assert!(r > 0.9, "seed {seed}: correlation {r}");
    }
}

#[test]
fn generator_top3_neighbours_agree() {
    let top3 = |row: &[f64], me: usize| {
        let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != me).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        idx.truncate(3);
        idx.into_iter().collect::<HashSet<_>>()
    };
    let cfg = SynthConfig { classes: 20, sem_dim: 16, noise: 0.3, ..Default::default() };
    for seed in 0..5 {
        let (sem, feat) = alignment(&cfg, seed);
        let agree = (0..20).filter(|&i| top3(&sem[i], i) == top3(&feat[i], i)).count();
        assert!(agree >= 16, "seed {seed}: {agree}/20 classes agree");
    }
}

#[test]
fn generator_partition_and_noise_free_classes() {
    let cfg = SynthConfig { noise: 0.0, per_class: 4, ..Default::default() };
    let (base, novel, table) = synth_benchmark(&cfg, 10, 3).unwrap();
    assert_eq!((base.num_classes(), novel.num_classes()), (20, 10));
    assert!(novel.class_names().iter().all(|c| !base.contains_class(c)));
    assert_eq!(table.len(), 30);
    for c in novel.class_names() {
        let m = novel.class_matrix(c).unwrap();
        assert!(m.iter_rows().all(|r| r == m.row(0)));
    }
    assert!(synth_benchmark(&cfg, 30, 3).is_err());
    assert!(synth_generate(&SynthConfig { classes: 0, ..cfg }, &mut Rng::new(0, 0)).is_err());
}

fn quick_train() -> TrainConfig {
    TrainConfig { epochs: 15, ..Default::default() }
}

#[test]
fn protocol_report_shape_and_statistics() {
    let (base, novel, table) = synth_benchmark(&SynthConfig::default(), 10, 8).unwrap();
    for k in [1, 5] {
        let spec = EpisodeSpec { k_shot: k, episodes: 40, ..Default::default() };
        let report = run_protocol(&base, &novel, Some(&table), &spec, &quick_train(), 1).unwrap();
        assert_eq!(report.per_episode.len() + report.failures, 40);
        assert!(report.per_episode.iter().all(|a| (0.0..=1.0).contains(a)));
        let (m, c) = mean_ci95(&report.per_episode);
        assert!((100.0 * m - report.mean).abs() < 1e-12);
        assert!((100.0 * c - report.ci95).abs() < 1e-12);
        assert_eq!(report.summary, format!("{:.2} ± {:.2}%", report.mean, report.ci95));
        let json = report.to_json();
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        for field in ["\"beta\"", "\"mu1\"", "\"mu2\"", "\"tau\"", "\"seed\"", "\"ablation\"", "\"n_way\""] {
            assert!(json.contains(field), "{field} missing");
        }
    }
}

#[test]
fn protocol_ignores_worker_count() {
    let (base, novel, table) = synth_benchmark(&SynthConfig::default(), 10, 9).unwrap();
    let spec = EpisodeSpec { episodes: 12, ..Default::default() };
    let one = run_protocol(&base, &novel, Some(&table), &spec, &quick_train(), 1).unwrap();
    let four = run_protocol(&base, &novel, Some(&table), &spec, &quick_train(), 4).unwrap();
    assert_eq!(one.to_json(), four.to_json());
}

#[test]
fn protocol_rejects_inconsistent_inputs() {
    let (base, novel, table) = synth_benchmark(&SynthConfig::default(), 10, 9).unwrap();
    let spec = EpisodeSpec { episodes: 2, ..Default::default() };
    let other = synth_benchmark(&SynthConfig { feat_dim: 16, ..Default::default() }, 10, 9).unwrap();
    assert!(matches!(
        run_protocol(&other.0, &novel, Some(&table), &spec, &quick_train(), 1),
        Err(AfrError::Data(_))
    ));
    assert!(run_protocol(&base, &novel, None, &spec, &quick_train(), 1).is_err());
    let baseline = TrainConfig { ablation: Ablation::NONE, ..quick_train() };
    let spec0 = EpisodeSpec { beta: 0, ..spec };
    assert!(run_protocol(&base, &novel, None, &spec0, &baseline, 1).is_ok());
}
