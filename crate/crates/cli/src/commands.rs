use std::path::Path;
use std::process::ExitCode;
use std::sync::Mutex;

use coc_core::config::ExperimentConfig;
use coc_core::corpus::{chronological_split, generate_synthetic, load_jsonl, write_jsonl, CaseDocument, Splits};
use coc_core::metrics::{self, read_table_csv, table_csv, table_text, ReportPair, TableRow};
use coc_core::network::{ModelParams, NetworkConfig};
use coc_core::training::{
    self, grid_search, probe_grad_check, run_ablation, AblationCondition, GridSpec, TrainConfig,
};
use coc_core::{Error, Result};

use crate::manifest::Manifest;
use crate::Format;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-2;
pub const WORKERS_ENV: &str = "COC_WORKERS";

pub fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Numeric(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn load_cases(path: &Path) -> Result<Vec<CaseDocument>> {
    let loaded = load_jsonl(path)?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(loaded.cases)
}

fn split(cases: Vec<CaseDocument>, cfg: &ExperimentConfig) -> Result<Splits> {
    chronological_split(cases, cfg.split.train_fraction, cfg.split.dev_fraction)
}

fn check_corpus_shape(cases: &[CaseDocument], net: &NetworkConfig, source: &str) -> Result<()> {
    if let Some(c) = cases.first() {
        if c.k() != net.k || c.embedding_width() != net.d_e {
            return Err(Error::Config(format!(
                "data has k = {} and d_e = {} but {source} expects k = {} and d_e = {}",
                c.k(),
                c.embedding_width(),
                net.k,
                net.d_e
            )));
        }
    }
    Ok(())
}

pub fn gen_data(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(config)?;
    let cases = generate_synthetic(&cfg.synthetic)?;
    write_jsonl(&cases, out)?;
    let mut manifest = Manifest::new("gen-data", Some(&cfg))
        .input("config", config)
        .output("data", out);
    manifest.seed = Some(cfg.synthetic.seed);
    manifest.write(out)?;
    println!("wrote {} cases to {}", cases.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(data: &Path, config: &Path, out_checkpoint: &Path, history: &Path, grid: bool) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(config)?;
    let cases = load_cases(data)?;
    check_corpus_shape(&cases, &cfg.network, "the config")?;
    let splits = split(cases, &cfg)?;
    let mut manifest = Manifest::new("train", Some(&cfg))
        .input("config", config)
        .input("data", data)
        .output("checkpoint", out_checkpoint)
        .output("history", history);

    let outcome = if grid {
        let result = grid_search(&splits, &cfg.network, &cfg.train, &GridSpec::from_config(&cfg.train))?;
        for (i, c) in result.cells.iter().enumerate() {
            let mark = if i == result.best { "*" } else { " " };
            println!(
                "{mark} lr {:<8} tau_a {:<5} tau_c {:<5} dev {:.4}",
                c.learning_rate, c.tau_a, c.tau_c, c.dev_score
            );
        }
        let mut chosen = cfg.clone();
        chosen.train = result.config.clone();
        manifest.config = Some(chosen);
        result.outcome
    } else {
        training::train(&splits, &cfg.network, &cfg.train)?
    };
    outcome.params.save(out_checkpoint)?;
    outcome.history.write_csv(history)?;
    manifest = manifest.output("checkpoint_config", &ModelParams::config_sidecar(out_checkpoint));
    manifest.write(out_checkpoint)?;
    let best = outcome.history.best();
    println!(
        "best epoch {} of {}: dev selection {:.4} (task B m-F1 {:.4}, task A m-F1 {:.4})",
        outcome.history.best_epoch,
        outcome.history.epochs.len(),
        best.selection,
        best.dev_b_macro_f1,
        best.dev_a_macro_f1
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(checkpoint: &Path, data: &Path, report: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let params = ModelParams::load(checkpoint)?;
    let mut cases = load_cases(data)?;
    check_corpus_shape(&cases, params.config(), "the checkpoint")?;
    let mut manifest = Manifest::new("eval", None)
        .input("checkpoint", checkpoint)
        .input("data", data)
        .output("report", report);
    if let Some(path) = config {
        let cfg = ExperimentConfig::load(path)?;
        cases = split(cases, &cfg)?.test;
        manifest = manifest.input("config", path);
    }
    let pair = training::evaluate(&params, &cases)?;
    let text = serde_json::to_string_pretty(&pair)?;
    std::fs::write(report, text + "\n").map_err(|e| Error::Io {
        path: report.to_path_buf(),
        source: e,
    })?;
    manifest.write(report)?;
    print!("{}", table_text(&[row_for_report(checkpoint, &pair)]));
    Ok(ExitCode::SUCCESS)
}

fn row_for_report(path: &Path, pair: &ReportPair) -> TableRow {
    let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    TableRow::from_reports(&name, Some(&pair.task_a), Some(&pair.task_b))
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn ablate(data: &Path, config: &Path, out_table: &Path, only: &[String]) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(config)?;
    let conditions: Vec<AblationCondition> = if only.is_empty() {
        AblationCondition::ALL.to_vec()
    } else {
        only.iter().map(|s| s.trim().parse()).collect::<Result<_>>()?
    };
    let cases = load_cases(data)?;
    check_corpus_shape(&cases, &cfg.network, "the config")?;
    let splits = split(cases, &cfg)?;

    let rows = run_conditions(&splits, &conditions, &cfg.network, &cfg.train, worker_count())?;
    std::fs::write(out_table, table_csv(&rows)?).map_err(|e| Error::Io {
        path: out_table.to_path_buf(),
        source: e,
    })?;
    Manifest::new("ablate", Some(&cfg))
        .input("config", config)
        .input("data", data)
        .output("table", out_table)
        .write(out_table)?;
    print!("{}", table_text(&rows));
    Ok(ExitCode::SUCCESS)
}

/// Runs each condition, fanning out over `workers` threads; rows keep the input order.
fn run_conditions(
    splits: &Splits,
    conditions: &[AblationCondition],
    net: &NetworkConfig,
    train: &TrainConfig,
    workers: usize,
) -> Result<Vec<TableRow>> {
    let slots: Vec<Mutex<Option<Result<TableRow>>>> = conditions.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(conditions.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&condition) = conditions.get(i) else {
                    break;
                };
                log::info!("running {condition}");
                let row = run_ablation(splits, condition, net, train).map(|o| o.row);
                *slots[i].lock().expect("slot lock") = Some(row);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every condition ran"))
        .collect()
}

pub fn gradcheck(config: Option<&Path>, seed: u64) -> Result<ExitCode> {
    let (net, train) = match config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            (cfg.network, cfg.train)
        }
        None => (tiny_network(), TrainConfig::default()),
    };
    let report = probe_grad_check(&net, &train, 2, seed, GRADCHECK_STEP)?;
    println!(
        "max relative gradient error: {:.3e} over {} entries",
        report.max_relative_error, report.entries_checked
    );
    if report.max_relative_error > GRADCHECK_TOLERANCE {
        eprintln!("gradient check failed: tolerance {GRADCHECK_TOLERANCE:e}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        k: 3,
        d_e: 8,
        d_att_tok: 4,
        d_gru: 3,
        d_att_sent: 4,
        heads: 2,
        d_cls: 4,
        dropout: 0.0,
        ..NetworkConfig::default()
    }
}

pub fn report(inputs: &[std::path::PathBuf], format: Format, out: Option<&Path>) -> Result<ExitCode> {
    let mut rows = Vec::new();
    for path in inputs {
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let pair: ReportPair = serde_json::from_str(&text)?;
            rows.push(row_for_report(path, &pair));
        } else {
            rows.extend(read_table_csv(path)?);
        }
    }
    let text = match format {
        Format::Csv => metrics::table_csv(&rows)?,
        Format::Text => table_text(&rows),
    };
    match out {
        Some(path) => {
            std::fs::write(path, &text).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let manifest = inputs
                .iter()
                .enumerate()
                .fold(Manifest::new("report", None), |m, (i, p)| m.input(format!("input_{i}"), p))
                .output("report", path);
            manifest.write(path)?;
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
