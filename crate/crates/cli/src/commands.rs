use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use adaeval::data::{self, DatasetInfo, SplitSizes, SyntheticSpec};
use adaeval::evalkit::{self, CostModel, EvalResult, ResultsFile};
use adaeval::model::{self, GatePolicy, ModelConfig, ModelParams, SyncMode};
use adaeval::train::{self, EpochLog};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::{AblateArgs, AblationKind, Cli, Command, CostModeArg, EvalArgs, EvalMode, GenDataArgs, ReportArgs, TrainArgs};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RESULTS: &str = "results.json";
pub const CURVES: &str = "curves.csv";
const RESULTS_VERSION: u32 = 1;
/// Fine hidden size used by the hidden sweep unless `--hf` is given.
pub const HIDDEN_SWEEP_HF: usize = 64;

pub fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a, cli.jobs),
        Command::Report(a) => report(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct Resolved<'a, A, C> {
    command: &'a str,
    version: &'a str,
    args: A,
    resolved: C,
}

fn write_resolved<A: Serialize, C: Serialize>(path: &Path, command: &str, args: A, resolved: C) -> Result<()> {
    write_json(
        path,
        &Resolved {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args,
            resolved,
        },
    )
}

fn cost_model(mode: CostModeArg) -> CostModel {
    match mode {
        CostModeArg::Paper => CostModel::paper(),
        CostModeArg::Full => CostModel::full(),
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => SyntheticSpec::from_json_file(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    for (name, n) in [("train", args.train), ("val", args.val)] {
        if n == 0 {
            return Err(CliError::Usage(format!("--{name} 0: the {name} split must not be empty")));
        }
    }
    let sizes = SplitSizes {
        train: args.train,
        val: args.val,
        test: args.test,
    };
    let dataset = data::generate_synthetic(&spec, sizes)?;
    let manifest = data::write_dataset(&args.out, &dataset)?;
    #[derive(Serialize)]
    struct Gen<'a> {
        spec: &'a SyntheticSpec,
        sizes: SplitSizes,
    }
    write_resolved(&args.out.join(RESOLVED_CONFIG), "gen-data", args, Gen { spec: &spec, sizes })?;
    let info = &manifest.info;
    let counts: Vec<String> = manifest.splits.iter().map(|(k, v)| format!("{k}={}", v.len())).collect();
    println!(
        "dataset {}: {} classes, T={}, Dc={}, Df={}, {}, checksum {}",
        args.out.display(),
        info.num_classes,
        info.seq_len,
        info.coarse_dim,
        info.fine_dim,
        counts.join(" "),
        manifest.checksum
    );
    Ok(())
}

fn train_config(info: &DatasetInfo, args: &TrainArgs) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::for_dataset(info);
    args.model.apply(&mut cfg);
    cfg.gate = args.gate();
    cfg.sync = args.sync();
    if cfg.gate != GatePolicy::Learned && args.model.lambda.is_none() {
        // the usage term is constant when the gate is forced
        cfg.lambda = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains `cfg` and writes checkpoint, epoch log and resolved config into
/// `out`. Progress goes to stderr when `verbose`.
fn train_into(
    out: &Path,
    cfg: &ModelConfig,
    train_set: &[data::VideoSample],
    val_set: &[data::VideoSample],
    label: &str,
    verbose: bool,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    create_dir(out)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log_file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut write_err = None;
    let mut params = ModelParams::init(cfg)?;
    let log = train::train(&mut params, cfg, train_set, val_set, |e| {
        let line = serde_json::to_string(e).expect("log entry serializes");
        if let Err(err) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(err);
        }
        if verbose {
            eprintln!(
                "{label}epoch {:>3} tau {:.3} loss {:.4} usage {:.3} val_top1 {:.4} val_usage {:.3}",
                e.epoch, e.tau, e.train_loss, e.train_usage, e.val_top1, e.val_usage
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    model::save_checkpoint(&params, cfg, out)?;
    Ok((params, log))
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let reader = data::read_dataset(&args.data)?;
    let cfg = train_config(&reader.manifest.info, args)?;
    let train_set = reader.load_split("train")?;
    let val_set = reader.load_split("val")?;
    create_dir(&args.out)?;
    write_resolved(&args.out.join(RESOLVED_CONFIG), "train", args, &cfg)?;
    let (_, log) = train_into(&args.out, &cfg, &train_set, &val_set, "", true)?;
    let last = log.last().ok_or_else(|| CliError::Usage("--epochs 0: nothing was trained".into()))?;
    println!(
        "{}: val_usage {:.4} val_top1 {:.4} ({} epochs)",
        evalkit::method_name(&cfg),
        last.val_usage,
        last.val_top1,
        log.len()
    );
    Ok(())
}

fn check_compatible(cfg: &ModelConfig, info: &DatasetInfo) -> Result<()> {
    let pairs = [
        ("T", cfg.seq_len, info.seq_len),
        ("Dc_feat", cfg.coarse_feat_dim, info.coarse_dim),
        ("Df_feat", cfg.fine_feat_dim, info.fine_dim),
        ("num_classes", cfg.num_classes, info.num_classes),
    ];
    for (name, model, data) in pairs {
        if model != data {
            return Err(CliError::Mismatch(format!("{name}: checkpoint has {model}, dataset has {data}")));
        }
    }
    Ok(())
}

fn load_model(dir: &Path, info: &DatasetInfo) -> Result<(ModelParams, ModelConfig)> {
    let (params, cfg) = model::load_checkpoint(dir)?;
    check_compatible(&cfg, info)?;
    Ok((params, cfg))
}

/// Online rows for each budget; Uniform-K and Seq-K rows follow each
/// finite nonzero budget when a fine-always model is given.
fn online_rows(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[data::VideoSample],
    budgets: &[Option<usize>],
    cost: &CostModel,
    baseline: Option<&(ModelParams, ModelConfig)>,
) -> Result<Vec<EvalResult>> {
    let method = format!("{}_online", evalkit::method_name(cfg));
    let traces = model::infer_traces(params, cfg, samples)?;
    let frame_traces = match baseline {
        Some((bp, bcfg)) => Some(model::infer_traces(bp, bcfg, samples)?),
        None => None,
    };
    let mut rows = Vec::new();
    for &k in budgets {
        let mut r = match k {
            None => evalkit::offline_from_traces(&traces, cfg, cost, &method)?,
            Some(0) => evalkit::eval_online(params, cfg, samples, Some(0), cost)?,
            Some(k) => evalkit::online_from_traces(&traces, k, cfg, cost, &method)?,
        };
        r.method = method.clone();
        let stops = r.stop_steps();
        rows.push(r);
        if let (Some(frames), Some((_, bcfg)), Some(k)) = (&frame_traces, baseline, k) {
            if k > 0 {
                rows.push(evalkit::baseline_uniform_k(frames, k, &stops, bcfg, cost)?);
                rows.push(evalkit::baseline_seq_k(frames, k, bcfg, cost)?);
            }
        }
    }
    Ok(rows)
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let reader = data::read_dataset(&args.data)?;
    let (params, cfg) = load_model(&args.ckpt, &reader.manifest.info)?;
    let baseline = match &args.baseline_ckpt {
        Some(dir) => {
            let (bp, bcfg) = load_model(dir, &reader.manifest.info)?;
            if bcfg.gate != GatePolicy::AlwaysFine {
                return Err(CliError::Usage(format!(
                    "--baseline-ckpt {} must be an always-fine model (train --force-fine)",
                    dir.display()
                )));
            }
            Some((bp, bcfg))
        }
        None => None,
    };
    if baseline.is_some() && args.mode == EvalMode::Offline {
        return Err(CliError::Usage("--baseline-ckpt needs --mode online".into()));
    }
    let samples = reader.load_split(&args.split)?;
    let cost = cost_model(args.cost_mode);
    create_dir(&args.out)?;
    write_resolved(&args.out.join(RESOLVED_CONFIG), "eval", args, &cfg)?;
    let (mode, results) = match args.mode {
        EvalMode::Offline => ("offline", vec![evalkit::eval_offline(&params, &cfg, &samples, &cost)?]),
        EvalMode::Online => {
            let budgets: Vec<Option<usize>> = args.budgets.iter().map(|b| b.0).collect();
            ("online", online_rows(&params, &cfg, &samples, &budgets, &cost, baseline.as_ref())?)
        }
    };
    let file = ResultsFile {
        version: RESULTS_VERSION,
        mode: mode.into(),
        cost_model: cost,
        config: cfg,
        results,
    };
    evalkit::write_results_json(&args.out.join(RESULTS), &file)?;
    evalkit::write_curves_csv(&args.out.join(CURVES), &file.results)?;
    evalkit::format_table(&file.results, std::io::stdout().lock()).map_err(|e| CliError::io("<stdout>", e))?;
    Ok(())
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
fn run_jobs<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

struct Variant {
    name: String,
    config: ModelConfig,
}

#[derive(Debug, Serialize)]
struct AblationRow {
    run: String,
    method: String,
    gamma: f64,
    #[serde(rename = "Hc")]
    coarse_hidden: usize,
    #[serde(rename = "Hf")]
    fine_hidden: usize,
    sync: bool,
    top1: f64,
    #[serde(rename = "mAP")]
    map: f64,
    mean_gflops: f64,
    usage: f64,
}

fn variants(args: &AblateArgs, base: &ModelConfig) -> Result<Vec<Variant>> {
    let values = |default: &[f64]| args.values.clone().unwrap_or_else(|| default.to_vec());
    let v = match args.what {
        AblationKind::Sync => [("sync", SyncMode::Copy), ("no_sync", SyncMode::Keep)]
            .into_iter()
            .map(|(name, sync)| Variant {
                name: name.into(),
                config: ModelConfig { sync, ..base.clone() },
            })
            .collect(),
        AblationKind::Gamma => values(&[0.05, 0.2, 0.5])
            .into_iter()
            .map(|gamma| Variant {
                name: format!("gamma_{gamma}"),
                config: ModelConfig { gamma, ..base.clone() },
            })
            .collect(),
        AblationKind::Hidden => {
            // with Hc = Hf the sync copy overwrites the whole fine state
            let fine_hidden = args.model.hf.unwrap_or(HIDDEN_SWEEP_HF);
            let mut out = Vec::new();
            for h in values(&[2.0, 8.0, 32.0]) {
                if h < 1.0 || h.fract() != 0.0 {
                    return Err(CliError::Usage(format!("--values: hidden size must be a positive integer, got {h}")));
                }
                out.push(Variant {
                    name: format!("hc_{h}"),
                    config: ModelConfig {
                        coarse_hidden: h as usize,
                        fine_hidden,
                        ..base.clone()
                    },
                });
            }
            out
        }
    };
    for Variant { name, config } in &v {
        config
            .validate()
            .map_err(|e| CliError::Usage(format!("variant {name}: {e}")))?;
    }
    Ok(v)
}

fn ablate(args: &AblateArgs, jobs: usize) -> Result<()> {
    let reader = data::read_dataset(&args.data)?;
    let mut base = ModelConfig::for_dataset(&reader.manifest.info);
    args.model.apply(&mut base);
    base.validate()?;
    let runs = variants(args, &base)?;
    let train_set = reader.load_split("train")?;
    let val_set = reader.load_split("val")?;
    let eval_set = if args.split == "val" {
        val_set.clone()
    } else {
        reader.load_split(&args.split)?
    };
    let cost = cost_model(args.cost_mode);
    create_dir(&args.out)?;
    let configs: Vec<(&str, &ModelConfig)> = runs.iter().map(|v| (v.name.as_str(), &v.config)).collect();
    write_resolved(&args.out.join(RESOLVED_CONFIG), "ablate", args, serde_json::json!({ "runs": configs }))?;

    let outcomes = run_jobs(jobs, &runs, |v| -> Result<AblationRow> {
        let dir = args.out.join(&v.name);
        create_dir(&dir)?;
        write_resolved(&dir.join(RESOLVED_CONFIG), "ablate", args, &v.config)?;
        let label = format!("[{}] ", v.name);
        let (params, _) = train_into(&dir, &v.config, &train_set, &val_set, &label, jobs == 1)?;
        let result = evalkit::eval_offline(&params, &v.config, &eval_set, &cost)?;
        let row = AblationRow {
            run: v.name.clone(),
            method: result.method.clone(),
            gamma: v.config.gamma,
            coarse_hidden: v.config.coarse_hidden,
            fine_hidden: v.config.fine_hidden,
            sync: v.config.sync == SyncMode::Copy,
            top1: result.top1,
            map: result.map,
            mean_gflops: result.mean_gflops,
            usage: result.usage(v.config.seq_len),
        };
        let file = ResultsFile {
            version: RESULTS_VERSION,
            mode: "offline".into(),
            cost_model: cost,
            config: v.config.clone(),
            results: vec![result],
        };
        evalkit::write_results_json(&dir.join(RESULTS), &file)?;
        Ok(row)
    });

    let mut rows = Vec::new();
    let mut failed = 0;
    for (v, outcome) in runs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => rows.push(r),
            Err(e) => {
                failed += 1;
                let line = serde_json::json!({"error": {"kind": e.kind(), "run": v.name, "message": e.to_string()}});
                eprintln!("{line}");
            }
        }
    }
    let table = args.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| CliError::Csv {
        path: table.clone(),
        source: e,
    })?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Csv {
            path: table.clone(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| CliError::io(&table, e))?;
    println!(
        "{:<14} {:<18} {:>6} {:>4} {:>4} {:>5} {:>8} {:>8} {:>10} {:>7}",
        "run", "method", "gamma", "Hc", "Hf", "sync", "top1", "mAP", "gflops", "usage"
    );
    for r in &rows {
        println!(
            "{:<14} {:<18} {:>6} {:>4} {:>4} {:>5} {:>8.4} {:>8.4} {:>10.3} {:>7.3}",
            r.run, r.method, r.gamma, r.coarse_hidden, r.fine_hidden, r.sync, r.top1, r.map, r.mean_gflops, r.usage
        );
    }
    if failed > 0 {
        return Err(CliError::Runs {
            failed,
            total: runs.len(),
        });
    }
    Ok(())
}

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_results(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RESULTS) {
            out.push(p);
        }
    }
    Ok(())
}

/// Formats a number exactly as serde_json writes it in results.json.
fn json_number(x: f64) -> String {
    serde_json::to_string(&x).expect("finite numbers serialize")
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "run",
    "mode",
    "method",
    "budget_K",
    "num_videos",
    "top1",
    "mAP",
    "mean_gflops",
    "mean_fine_reads",
];

fn report(args: &ReportArgs) -> Result<()> {
    let mut files = Vec::new();
    find_results(&args.runs, &mut files)?;
    if files.is_empty() {
        return Err(CliError::Report(format!("no {RESULTS} under {}", args.runs.display())));
    }
    let csv_err = |e: csv::Error| CliError::Csv {
        path: args.out.clone(),
        source: e,
    };
    let mut w = csv::Writer::from_path(&args.out).map_err(csv_err)?;
    w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    let (mut ok, mut rows) = (0, 0);
    for path in &files {
        let file = match evalkit::read_results_json(path) {
            Ok(f) => f,
            Err(e) => {
                let line = serde_json::json!({"warning": {"kind": "skipped", "path": path, "message": e.to_string()}});
                eprintln!("{line}");
                continue;
            }
        };
        ok += 1;
        let run = path
            .parent()
            .and_then(|p| p.strip_prefix(&args.runs).ok())
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        for r in &file.results {
            let budget = r.budget_k.map_or_else(|| "inf".to_string(), |k| k.to_string());
            w.write_record([
                run.clone(),
                file.mode.clone(),
                r.method.clone(),
                budget,
                r.num_videos.to_string(),
                json_number(r.top1),
                json_number(r.map),
                json_number(r.mean_gflops),
                json_number(r.mean_fine_reads),
            ])
            .map_err(csv_err)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| CliError::io(&args.out, e))?;
    if ok == 0 {
        return Err(CliError::Report(format!("all {} result files were malformed", files.len())));
    }
    let resolved = args.out.with_extension("resolved_config.json");
    #[derive(Serialize)]
    struct Rep<'a> {
        out: &'a Path,
        sources: &'a [PathBuf],
    }
    write_resolved(
        &resolved,
        "report",
        args,
        Rep {
            out: &args.out,
            sources: &files,
        },
    )?;
    println!("{rows} rows from {ok} of {} result files -> {}", files.len(), args.out.display());
    Ok(())
}
