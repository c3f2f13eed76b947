use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use moon::config::RunConfig;
use moon::datamodel::{write_volume, Grade};
use moon::gradcam::{gradcam_map, localization_score, write_pgm_slices};
use moon::harness::{
    ablation_variants, evaluate_model, fusion_variants, run_crossval, run_grid, run_variant, train, Checkpoint,
    Dataset, Protocol, Variant,
};
use moon::metrics::{AblationFlags, MetricsReport, ReportRow};
use moon::synth::synthesize_dataset;
use moon::{MoonError, Result};

#[derive(Parser)]
#[command(name = "moon", version, about = "Multi-organ esophageal varices grading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    /// Dotted-key override, e.g. `train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "moon_out")]
    out: PathBuf,
    /// Seed for data, model, training and splits.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set data.manifest=PATH`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Shorthand for `--set data.test_manifest=PATH`.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Shorthand for `--set data.checkpoint=PATH`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synthesize(Common),
    /// Train one model on the manifest; the test manifest, if any, serves
    /// as validation set.
    Train(Common),
    /// Evaluate a checkpoint, or train on the manifest and evaluate on the
    /// test manifest.
    Evaluate(Common),
    /// k-fold cross-validation of the configured model.
    Crossval(Common),
    /// The fusion-strategy grid, with and without ORI+HFE.
    CompareFusion(Common),
    /// All on/off combinations of ORI, HFE and CCA.
    Ablate(Common),
    /// Grad-CAM heat volumes for a checkpoint.
    Gradcam(Common),
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = if c.config == "default" {
        RunConfig::default()
    } else {
        RunConfig::load(Path::new(&c.config))?
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    cfg = cfg.with_overrides(&c.overrides)?;
    if c.manifest.is_some() {
        cfg.data.manifest = c.manifest.clone();
    }
    if c.test_manifest.is_some() {
        cfg.data.test_manifest = c.test_manifest.clone();
    }
    if c.checkpoint.is_some() {
        cfg.data.checkpoint = c.checkpoint.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| MoonError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn prepare_out(c: &Common, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&c.out).map_err(|source| MoonError::Io {
        path: c.out.clone(),
        source,
    })?;
    write(&c.out.join("resolved_config.json"), &cfg.to_json()?)
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<()> {
    write(&out.join("metrics.json"), &report.to_json()?)?;
    let table = report.to_table();
    write(&out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn required(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone()
        .ok_or_else(|| MoonError::Config(format!("`{key}` is required for this command")))
}

/// The training dataset and an optional independent test set.
fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let train = Dataset::load(&required(&cfg.data.manifest, "data.manifest")?)?;
    let test = cfg.data.test_manifest.as_deref().map(Dataset::load).transpose()?;
    Ok((train, test))
}

fn protocol<'a>(cfg: &RunConfig, train: &'a Dataset, test: &'a Option<Dataset>) -> Protocol<'a> {
    match test {
        Some(test) => Protocol::Holdout { train, test },
        None => Protocol::CrossVal {
            data: train,
            k: cfg.eval.k_folds,
        },
    }
}

fn base_variant(cfg: &RunConfig) -> Variant {
    Variant::new(cfg.model.label(), cfg.model.clone(), cfg.train.use_cca)
}

fn cmd_synthesize(c: &Common, cfg: &RunConfig) -> Result<()> {
    let manifest = synthesize_dataset(&cfg.synth, &c.out)?;
    let summary = json!({ "cases": manifest.len(), "grade_counts": manifest.grade_counts() });
    write(&c.out.join("metrics.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{} cases written to {}", manifest.len(), c.out.display());
    Ok(())
}

fn cmd_train(c: &Common, cfg: &RunConfig) -> Result<()> {
    let (mut data, test) = load_data(cfg)?;
    let train_idx: Vec<usize> = (0..data.len()).collect();
    if let Some(test) = test {
        data.cases.extend(test.cases);
    }
    let val_idx: Vec<usize> = (train_idx.len()..data.len()).collect();
    let outcome = train(&cfg.model, &cfg.train, &data, &train_idx, &val_idx, Some(&c.out))?;
    let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let m = evaluate_model(&outcome.model, &data, eval_idx)?;
    let v = base_variant(cfg);
    let what = if val_idx.is_empty() { "training set" } else { "validation set" };
    let report = MetricsReport {
        protocol: format!("final model on the {what} (n={})", eval_idx.len()),
        rows: vec![ReportRow::new(v.label.clone(), None, v.flags(), vec![m])?],
    };
    write_report(&c.out, &report)
}

fn cmd_evaluate(c: &Common, cfg: &RunConfig) -> Result<()> {
    let report = if let Some(ckpt) = &cfg.data.checkpoint {
        let ck = Checkpoint::load(ckpt)?;
        let model = ck.to_model()?;
        let path = cfg
            .data
            .test_manifest
            .clone()
            .or(cfg.data.manifest.clone())
            .ok_or_else(|| MoonError::Config("`data.test_manifest` or `data.manifest` is required".into()))?;
        let data = Dataset::load(&path)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let m = evaluate_model(&model, &data, &idx)?;
        let flags = AblationFlags {
            ori: ck.model.ori_active(),
            hfe: ck.model.hfe_active(),
            cca: ck.train.as_ref().is_some_and(|t| t.use_cca) && ck.model.single_organ.is_none(),
        };
        MetricsReport {
            protocol: format!("checkpoint {} on {} (n={})", ckpt.display(), path.display(), data.len()),
            rows: vec![ReportRow::new(ck.model.label(), None, flags, vec![m])?],
        }
    } else {
        let (train, test) = load_data(cfg)?;
        let test = test.ok_or_else(|| {
            MoonError::Config("`data.test_manifest` (or `data.checkpoint`) is required for evaluate".into())
        })?;
        let p = Protocol::Holdout { train: &train, test: &test };
        let row = run_variant(&base_variant(cfg), &cfg.train, p, &cfg.eval.seeds, Some(&c.out), &mut |_, _| {})?;
        MetricsReport {
            protocol: p.describe(&cfg.eval.seeds),
            rows: vec![row],
        }
    };
    write_report(&c.out, &report)
}

fn cmd_crossval(c: &Common, cfg: &RunConfig) -> Result<()> {
    let (data, _) = load_data(cfg)?;
    let v = base_variant(cfg);
    let mut runs = Vec::new();
    let mut splits = Vec::new();
    for &seed in &cfg.eval.seeds {
        let mut model = cfg.model.clone();
        model.seed = seed;
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let dir = c.out.join(format!("seed{seed}"));
        let res = run_crossval(&model, &tc, &data, cfg.eval.k_folds, seed, Some(&dir))?;
        splits.push(json!({ "seed": seed, "split": res.split, "folds": res.folds }));
        runs.extend(res.folds);
    }
    write(&c.out.join("folds.json"), &serde_json::to_string_pretty(&splits)?)?;
    let report = MetricsReport {
        protocol: Protocol::CrossVal {
            data: &data,
            k: cfg.eval.k_folds,
        }
        .describe(&cfg.eval.seeds),
        rows: vec![ReportRow::new(v.label.clone(), Some(cfg.model.fusion.to_string()), v.flags(), runs)?],
    };
    write_report(&c.out, &report)
}

fn cmd_grid(c: &Common, cfg: &RunConfig, variants: &[Variant]) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let p = protocol(cfg, &train, &test);
    let report = run_grid(variants, &cfg.train, p, &cfg.eval.seeds, Some(&c.out))?;
    write_report(&c.out, &report)
}

fn cmd_gradcam(c: &Common, cfg: &RunConfig) -> Result<()> {
    let ckpt = required(&cfg.data.checkpoint, "data.checkpoint")?;
    let model = Checkpoint::load(&ckpt)?.to_model()?;
    let data = Dataset::load(&required(&cfg.data.manifest, "data.manifest")?)?;
    let gc = &cfg.eval.gradcam;
    let cases: Vec<usize> = if gc.cases.is_empty() {
        (0..data.len()).filter(|&i| data.cases[i].grade == Grade::G3).collect()
    } else {
        data.indices_of(&gc.cases)?
    };
    let mut scores = Vec::new();
    for &i in &cases {
        let case = &data.cases[i];
        let heat = gradcam_map(&model, &case.inputs(), gc.organ, gc.task)?;
        write_volume(&heat.volume, &c.out.join(format!("{}_{}_heat.vol", case.id, gc.organ)))?;
        if gc.write_pgm {
            write_pgm_slices(&heat.volume, &c.out.join("pgm"), &format!("{}_{}", case.id, gc.organ))?;
        }
        let score = match (&case.lesion_mask, gc.organ) {
            (Some(mask), moon::datamodel::Organ::Esophagus) => Some(localization_score(&heat.volume, mask, gc.top_frac)?),
            _ => None,
        };
        scores.push(json!({ "id": case.id, "grade": case.grade, "localization": score }));
    }
    let vals: Vec<f64> = scores.iter().filter_map(|s| s["localization"].as_f64()).collect();
    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let report = json!({
        "checkpoint": ckpt,
        "organ": gc.organ,
        "task": gc.task,
        "top_frac": gc.top_frac,
        "cases": scores,
        "mean_localization": mean,
    });
    write(&c.out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    let line = match mean {
        Some(m) => format!("{} heat volumes, mean localization {m:.4}\n", cases.len()),
        None => format!("{} heat volumes\n", cases.len()),
    };
    write(&c.out.join("metrics.txt"), &line)?;
    print!("{line}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Synthesize(c)
    | Command::Train(c)
    | Command::Evaluate(c)
    | Command::Crossval(c)
    | Command::CompareFusion(c)
    | Command::Ablate(c)
    | Command::Gradcam(c)) = &cli.command;
    let cfg = resolve(c)?;
    prepare_out(c, &cfg)?;
    match &cli.command {
        Command::Synthesize(_) => cmd_synthesize(c, &cfg),
        Command::Train(_) => cmd_train(c, &cfg),
        Command::Evaluate(_) => cmd_evaluate(c, &cfg),
        Command::Crossval(_) => cmd_crossval(c, &cfg),
        Command::CompareFusion(_) => cmd_grid(c, &cfg, &fusion_variants(&cfg.model, cfg.train.use_cca)),
        Command::Ablate(_) => cmd_grid(c, &cfg, &ablation_variants(&cfg.model)),
        Command::Gradcam(_) => cmd_gradcam(c, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind, detail) = match &e {
                MoonError::UnknownKey(k) => (2, "unknown_key", json!(k)),
                MoonError::MissingFile(p) => (3, "missing_file", json!(p)),
                MoonError::Config(_) => (1, "config", json!(null)),
                _ => (1, "error", json!(null)),
            };
            let msg = json!({ "error": kind, "detail": detail, "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
