use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use afr::episodes_io::{
    load_feature_store, paired_difference, run_protocol, save_feature_store, synth_benchmark,
    FeatureStore, RunReport, SynthConfig,
};
use afr::gradcheck::run_gradcheck;
use afr::semantics::SemanticTable;
use afr::trainer::{Ablation, BaselineRegularizer};
use afr::AfrError;
use serde::Serialize;
use serde_json::json;

use crate::args::{AblateArgs, DataArgs, GradcheckArgs, InspectArgs, ProtocolArgs, RunArgs, SynthArgs};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_FAILURES: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

/// Novel classes held out by `--synth`.
const SYNTH_NOVEL_CLASSES: usize = 10;

pub enum Outcome {
    Success,
    Exit(u8, String),
}

pub type CmdResult = Result<Outcome, AfrError>;

pub fn exit_code(e: &AfrError) -> u8 {
    match e {
        AfrError::Config(_) => EXIT_CONFIG,
        AfrError::Divergence { .. } => EXIT_FAILURES,
        _ => EXIT_DATA,
    }
}

struct Data {
    base: FeatureStore,
    novel: FeatureStore,
    semantics: Option<SemanticTable>,
}

fn load_data(args: &DataArgs, seed: u64, beta: usize) -> Result<Data, AfrError> {
    if args.synth {
        let (base, novel, table) = synth_benchmark(&SynthConfig::default(), SYNTH_NOVEL_CLASSES, seed)?;
        return Ok(Data {
            base,
            novel,
            semantics: Some(table),
        });
    }
    let (Some(base), Some(novel)) = (&args.base_features, &args.novel_features) else {
        return Err(AfrError::Config(
            "--base-features and --novel-features are required without --synth".into(),
        ));
    };
    if beta > 0 && args.embeddings.is_none() {
        return Err(AfrError::Config(format!(
            "--beta {beta} needs --embeddings (use --beta 0 to run without them)"
        )));
    }
    let semantics = args.embeddings.as_ref().map(SemanticTable::load).transpose()?;
    Ok(Data {
        base: load_feature_store(base)?,
        novel: load_feature_store(novel)?,
        semantics,
    })
}

/// Writes one stdout line; a closed pipe (e.g. `| head`) is not an error.
fn out(line: &str) {
    let _ = writeln!(io::stdout().lock(), "{line}");
}

fn emit_json<T: Serialize>(value: &T) {
    out(&serde_json::to_string_pretty(value).expect("serializable"));
}

fn failure_outcome(reports: &[&RunReport]) -> Outcome {
    match reports.iter().find(|r| r.too_many_failures()) {
        Some(r) => Outcome::Exit(
            EXIT_FAILURES,
            format!(
                "{} of {} episodes diverged (limit 1%): {:?}",
                r.failures,
                r.failures + r.per_episode.len(),
                r.failed_episodes
            ),
        ),
        None => Outcome::Success,
    }
}

pub fn run(args: &RunArgs) -> CmdResult {
    let p = &args.protocol;
    let spec = p.episode_spec(args.k_shot, p.beta);
    let train = p.train_config(args.ablation(), args.baseline());
    spec.validate()?;
    train.validate()?;
    let data = load_data(&args.data, p.seed, p.beta)?;
    let report = run_protocol(&data.base, &data.novel, data.semantics.as_ref(), &spec, &train, p.workers)?;

    let json = report.to_json();
    if let Some(path) = &args.out {
        fs::write(path, format!("{json}\n"))?;
    }
    if p.pretty {
        out("| setting | accuracy | episodes | failures |");
        out("|---|---|---|---|");
        out(&format!(
            "| {}-way {}-shot | {} | {} | {} |",
            spec.n_way,
            spec.k_shot,
            report.summary,
            report.per_episode.len(),
            report.failures
        ));
    } else {
        out(&json);
    }
    Ok(failure_outcome(&[&report]))
}

#[derive(Debug, Serialize)]
struct GridCell {
    k_shot: usize,
    mean: f64,
    ci95: f64,
    summary: String,
    failures: usize,
    /// Paired difference to the baseline row, in percentage points.
    delta_vs_baseline: f64,
    delta_ci95: f64,
}

#[derive(Debug, Serialize)]
struct GridRow {
    instance_attention: bool,
    channel_attention: bool,
    sc_loss: bool,
    mse_loss: bool,
    beta: usize,
    results: Vec<GridCell>,
}

#[derive(Debug, Serialize)]
struct AblationTable {
    n_way: usize,
    episodes: usize,
    seed: u64,
    k_shots: Vec<usize>,
    attention: Vec<GridRow>,
    loss: Vec<GridRow>,
}

/// `(ablation, beta)` for the attention grid then the loss grid.
fn grid(beta: usize) -> (Vec<(Ablation, usize)>, Vec<(Ablation, usize)>) {
    let ce_only = |instance, channel| Ablation {
        instance_attention: instance,
        channel_attention: channel,
        sc_loss: false,
        mse_loss: false,
    };
    let attention = vec![
        (Ablation::NONE, 0),
        (ce_only(true, false), beta),
        (ce_only(false, true), beta),
        (ce_only(true, true), beta),
    ];
    let losses = [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(sc, mse)| {
            (
                Ablation {
                    sc_loss: sc,
                    mse_loss: mse,
                    ..Ablation::FULL
                },
                beta,
            )
        })
        .collect();
    (attention, losses)
}

pub fn ablate(args: &AblateArgs) -> CmdResult {
    let p: &ProtocolArgs = &args.protocol;
    if args.k_shots.is_empty() {
        return Err(AfrError::Config("--k-shots needs at least one value".into()));
    }
    if p.beta == 0 {
        return Err(AfrError::Config("ablation grids need --beta >= 1".into()));
    }
    let (attention, losses) = grid(p.beta);
    for &(ablation, beta) in attention.iter().chain(&losses) {
        for &k in &args.k_shots {
            p.episode_spec(k, beta).validate()?;
        }
        p.train_config(ablation, BaselineRegularizer::None).validate()?;
    }
    let data = load_data(&args.data, p.seed, p.beta)?;

    // Identical configurations (e.g. attention row 4 and loss row 1) run once.
    let mut cache: BTreeMap<(usize, usize, [bool; 4]), RunReport> = BTreeMap::new();
    let key = |k: usize, beta: usize, a: &Ablation| {
        (k, beta, [a.instance_attention, a.channel_attention, a.sc_loss, a.mse_loss])
    };
    for &k in &args.k_shots {
        for &(ablation, beta) in attention.iter().chain(&losses) {
            let id = key(k, beta, &ablation);
            if cache.contains_key(&id) {
                continue;
            }
            eprintln!(
                "afr: {k}-shot, beta {beta}, instance {} channel {} sc {} mse {}",
                ablation.instance_attention, ablation.channel_attention, ablation.sc_loss, ablation.mse_loss
            );
            let spec = p.episode_spec(k, beta);
            let train = p.train_config(ablation, BaselineRegularizer::None);
            let report = run_protocol(&data.base, &data.novel, data.semantics.as_ref(), &spec, &train, p.workers)?;
            cache.insert(id, report);
        }
    }

    let baseline = attention[0];
    let rows = |grid: &[(Ablation, usize)]| -> Vec<GridRow> {
        grid.iter()
            .map(|&(a, beta)| GridRow {
                instance_attention: a.instance_attention,
                channel_attention: a.channel_attention,
                sc_loss: a.sc_loss,
                mse_loss: a.mse_loss,
                beta,
                results: args
                    .k_shots
                    .iter()
                    .map(|&k| {
                        let r = &cache[&key(k, beta, &a)];
                        let b = &cache[&key(k, baseline.1, &baseline.0)];
                        let (delta, delta_ci) = paired_difference(r, b);
                        GridCell {
                            k_shot: k,
                            mean: r.mean,
                            ci95: r.ci95,
                            summary: r.summary.clone(),
                            failures: r.failures,
                            delta_vs_baseline: delta,
                            delta_ci95: delta_ci,
                        }
                    })
                    .collect(),
            })
            .collect()
    };
    let table = AblationTable {
        n_way: p.n_way,
        episodes: p.episodes,
        seed: p.seed,
        k_shots: args.k_shots.clone(),
        attention: rows(&attention),
        loss: rows(&losses),
    };

    if p.pretty {
        out(markdown(&table).trim_end());
    } else {
        emit_json(&table);
    }
    let reports: Vec<&RunReport> = cache.values().collect();
    Ok(failure_outcome(&reports))
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        " "
    }
}

fn markdown(t: &AblationTable) -> String {
    let shots: Vec<String> = t.k_shots.iter().map(|k| format!("{}-way {k}-shot", t.n_way)).collect();
    let sep = "|---".repeat(2 + shots.len()) + "|\n";
    let mut out = String::new();
    for (title, head, rows, cols) in [
        ("Attention ablation", ["Instance att.", "Channel att."], &t.attention, [0, 1]),
        ("Loss ablation", ["L_SC", "L_MSE"], &t.loss, [2, 3]),
    ] {
        out += &format!("### {title}\n\n| {} | {} | {} |\n{sep}", head[0], head[1], shots.join(" | "));
        for row in rows {
            let flags = [row.instance_attention, row.channel_attention, row.sc_loss, row.mse_loss];
            let cells: Vec<&str> = row.results.iter().map(|c| c.summary.as_str()).collect();
            out += &format!("| {} | {} | {} |\n", mark(flags[cols[0]]), mark(flags[cols[1]]), cells.join(" | "));
        }
        out += "\n";
    }
    out
}

pub fn gradcheck(args: &GradcheckArgs) -> CmdResult {
    let report = run_gradcheck(&args.config())?;
    for b in &report.blocks {
        eprintln!(
            "{:<10} {:>5} params  max rel err {:.3e}  {}",
            b.block,
            b.params,
            b.max_relative_error,
            if b.passed { "ok" } else { "FAIL" }
        );
    }
    emit_json(&report);
    if report.passed {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::Exit(
            EXIT_GRADCHECK,
            format!("gradient check failed for block(s): {}", report.failing_blocks().join(", ")),
        ))
    }
}

pub fn synth(args: &SynthArgs) -> CmdResult {
    let cfg = args.config();
    if args.novel_classes == 0 || args.novel_classes >= cfg.classes {
        return Err(AfrError::Config(format!(
            "--novel-classes must be in 1..{} (got {})",
            cfg.classes, args.novel_classes
        )));
    }
    let (base, novel, table) = synth_benchmark(&cfg, args.novel_classes, args.seed)?;
    fs::create_dir_all(&args.out_dir)?;
    let base_path = args.out_dir.join("base.afrf");
    let novel_path = args.out_dir.join("novel.afrf");
    let emb_path = args.out_dir.join("embeddings.json");
    save_feature_store(&base, &base_path)?;
    save_feature_store(&novel, &novel_path)?;
    table.save(&emb_path)?;
    emit_json(&json!({
        "base_features": base_path,
        "novel_features": novel_path,
        "embeddings": emb_path,
        "base_classes": base.num_classes(),
        "novel_classes": novel.num_classes(),
        "per_class": cfg.per_class,
        "feat_dim": cfg.feat_dim,
        "sem_dim": cfg.sem_dim,
        "seed": args.seed,
    }));
    Ok(Outcome::Success)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub fn inspect(args: &InspectArgs) -> CmdResult {
    if is_json(&args.path) {
        let table = SemanticTable::load(&args.path)?;
        emit_json(&json!({
            "kind": "embeddings",
            "dim": table.dim(),
            "classes": table.len(),
            "class_names": table.class_names().collect::<Vec<_>>(),
        }));
        return Ok(Outcome::Success);
    }
    let store = load_feature_store(&args.path)?;
    let counts: BTreeMap<&str, usize> = store
        .class_names()
        .into_iter()
        .map(|c| (c, store.indices_of(c).map(<[usize]>::len).unwrap_or(0)))
        .collect();
    emit_json(&json!({
        "kind": "features",
        "dim": store.dim(),
        "records": store.len(),
        "classes": store.num_classes(),
        "min_per_class": counts.values().min(),
        "max_per_class": counts.values().max(),
        "per_class": counts,
    }));
    Ok(Outcome::Success)
}
