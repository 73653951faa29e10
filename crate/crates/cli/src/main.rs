//! Command-line entry point: dataset generation, training, evaluation,
//! attention-map export, gradient checking, and the ablation sweep.
//!
//! Results go to files under --out; diagnostics go to stderr. Exit codes:
//! 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use config::RunConfig;
use fanet_core::eval::{evaluate_model, export_attention_maps, EvalReport};
use fanet_core::gradcheck::run_op_suite;
use fanet_core::model::{AblationConfig, ModelParams, TalVariant};
use fanet_core::synth::{generate_dataset, DatasetSpec, Manifest, ManifestRow, Split};
use fanet_core::train::{label_maps, train_loop};
use fanet_core::{checkpoint, Error};

const USAGE: &str = "usage: fanet <command> [--key value]...

commands:
  gen          render a synthetic benchmark      (needs --out)
  train        train a model on a dataset        (needs --data, --out)
  eval         evaluate a checkpoint             (needs --data, --checkpoint, --out)
  export-maps  write attention maps as PGM files (needs --data, --checkpoint, --out)
  grad-check   finite-difference gradient suite
  ablate       train and evaluate every ablation row (needs --data, --out)

every config key is also a flag (e.g. --persons 32, --seed 7); --config FILE
loads a key = value file first; FANET_SEED overrides the seed.";

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(args: &[String]) -> Result<(), CliError> {
    let command = args.first().ok_or_else(|| usage("missing command"))?.as_str();
    let mut cfg = RunConfig::default();
    let mut i = 1;
    while i < args.len() {
        let flag = args[i]
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("expected --key, got `{}`", args[i])))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| usage(format!("flag --{flag} needs a value")))?;
        if flag == "config" {
            let text = std::fs::read_to_string(value).map_err(|e| {
                usage(format!("cannot read config file `{value}`: {e}"))
            })?;
            cfg.apply_file(&text).map_err(|e| usage(e.to_string()))?;
        } else {
            cfg.set(flag, value).map_err(|e| usage(e.to_string()))?;
        }
        i += 2;
    }
    cfg.apply_env().map_err(|e| usage(e.to_string()))?;

    match command {
        "gen" => cmd_gen(cfg),
        "train" => cmd_train(cfg),
        "eval" => cmd_eval(cfg),
        "export-maps" => cmd_export_maps(cfg),
        "grad-check" => cmd_grad_check(cfg),
        "ablate" => cmd_ablate(cfg),
        other => Err(usage(format!("unknown command `{other}`"))),
    }
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.clone().ok_or_else(|| usage(format!("--{what} is required")))
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    std::fs::write(dir.join("resolved.cfg"), cfg.resolved()).map_err(Error::from)?;
    Ok(())
}

fn cmd_gen(cfg: RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.out, "out")?;
    let spec = cfg.dataset_spec();
    let manifest = generate_dataset(&spec, &out)?;
    write_resolved(&cfg, &out)?;
    eprintln!(
        "generated {} images under {} ({} persons x {} cameras x {} images)",
        manifest.rows.len(),
        out.display(),
        spec.n_persons,
        spec.n_cameras,
        spec.images_per_pair
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<(Manifest, DatasetSpec), CliError> {
    let data = require(&cfg.data, "data")?;
    let manifest = Manifest::load(&data)?;
    let spec = DatasetSpec::load(&data)?;
    Ok((manifest, spec))
}

fn build_model(
    cfg: &RunConfig,
    manifest: &Manifest,
    dspec: &DatasetSpec,
) -> Result<ModelParams, CliError> {
    let (pmap, cmap) = label_maps(manifest);
    if pmap.is_empty() {
        return Err(CliError::Runtime(Error::Config(
            "dataset has no train split".into(),
        )));
    }
    let mc = cfg.model_config(dspec.height, dspec.width, pmap.len(), cmap.len());
    Ok(ModelParams::init(mc, cfg.init_seed())?)
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    std::fs::write(dir.join("eval_report.tsv"), report.to_tsv()).map_err(Error::from)?;
    std::fs::write(dir.join("eval_report.txt"), report.to_text()).map_err(Error::from)?;
    Ok(())
}

fn cmd_train(cfg: RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.out, "out")?;
    let (manifest, dspec) = load_dataset(&cfg)?;
    let params = build_model(&cfg, &manifest, &dspec)?;
    let train_cfg = cfg.train_config(Some(out.clone()))?;
    write_resolved(&cfg, &out)?;

    let total = train_cfg.schedule.total_epochs;
    let eval_every = cfg.eval_every;
    let mask_threshold = cfg.mask_threshold;
    let result = train_loop(&manifest, &params, &train_cfg, |epoch, params| {
        eprintln!("epoch {}/{total} done", epoch + 1);
        if eval_every != 0 && (epoch + 1) % eval_every == 0 && epoch + 1 != total {
            let report = evaluate_model(&manifest, params, mask_threshold)?;
            eprintln!("  interim: {}", report.to_text().replace('\n', "; "));
        }
        Ok(())
    })?;
    if let Some(last) = result.trace.last() {
        eprintln!(
            "finished after {} iterations: L {:.4} (Lf {:.4}, Lb {:.4}, Lt {:.4})",
            result.trace.len(),
            last.total,
            last.fg,
            last.bg,
            last.tal
        );
    }

    let report = evaluate_model(&manifest, &params, cfg.mask_threshold)?;
    write_report(&report, &out)?;
    eprint!("{}", report.to_text());
    Ok(())
}

fn load_checkpointed_model(cfg: &RunConfig) -> Result<(Manifest, ModelParams), CliError> {
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let (manifest, dspec) = load_dataset(cfg)?;
    let params = build_model(cfg, &manifest, &dspec)?;
    checkpoint::load_into(&params.param_set(), &ckpt)?;
    Ok((manifest, params))
}

fn cmd_eval(cfg: RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.out, "out")?;
    let (manifest, params) = load_checkpointed_model(&cfg)?;
    let report = evaluate_model(&manifest, &params, cfg.mask_threshold)?;
    write_report(&report, &out)?;
    write_resolved(&cfg, &out)?;
    eprint!("{}", report.to_text());
    Ok(())
}

fn cmd_export_maps(cfg: RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.out, "out")?;
    let (manifest, params) = load_checkpointed_model(&cfg)?;
    let rows: Vec<&ManifestRow> = manifest
        .rows
        .iter()
        .filter(|r| r.split != Split::Train)
        .collect();
    export_attention_maps(&manifest, &rows, &params, &out)?;
    write_resolved(&cfg, &out)?;
    eprintln!("wrote {} attention map pairs to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_grad_check(cfg: RunConfig) -> Result<(), CliError> {
    let outcomes = run_op_suite(cfg.seed, 20)?;
    let mut failures = 0;
    let mut tsv = String::from("check\tmax_rel_err\ttolerance\tstatus\n");
    for o in &outcomes {
        let status = if o.passed() { "pass" } else { "FAIL" };
        eprintln!("{:28} {:>12.3e}  (tol {:.0e})  {status}", o.name, o.max_rel_err, o.tolerance);
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{status}\n",
            o.name, o.max_rel_err, o.tolerance
        ));
        if !o.passed() {
            failures += 1;
        }
    }
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out).map_err(Error::from)?;
        std::fs::write(out.join("gradcheck_report.tsv"), tsv).map_err(Error::from)?;
    }
    if failures > 0 {
        return Err(CliError::Runtime(Error::Contract(format!(
            "{failures} gradient checks failed"
        ))));
    }
    eprintln!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

/// The ablation rows in architecture order.
fn ablation_rows() -> Vec<(&'static str, &'static str, AblationConfig)> {
    let baseline = AblationConfig::baseline();
    let mut tem = baseline.clone();
    tem.enable_tem = true;
    let mut bg = tem.clone();
    bg.enable_background_branch = true;
    let mut ia = bg.clone();
    ia.enable_interaction = true;
    let mut tal = ia.clone();
    tal.tal_variant = TalVariant::Full;
    let mut full = tal.clone();
    full.enable_hpp = true;
    vec![
        ("Baseline", "baseline", baseline),
        ("B/L+TEM", "tem", tem),
        ("B/L+TEM+BG", "tem_bg", bg),
        ("B/L+TEM+BG+IA", "tem_bg_ia", ia),
        ("B/L+TEM+BG+IA+TAL", "tem_bg_ia_tal", tal),
        ("FA-Net (B/L+TEM+BG+IA+TAL+HPP)", "fanet", full),
    ]
}

fn cmd_ablate(cfg: RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.out, "out")?;
    let (manifest, dspec) = load_dataset(&cfg)?;
    std::fs::create_dir_all(&out).map_err(Error::from)?;

    let mut table = String::from("method\trank1\trank5\trank10\tmAP\tcamera_accuracy\tmask_iou\n");
    let mut text = String::new();
    for (label, slug, ablation) in ablation_rows() {
        eprintln!("=== {label} ===");
        let mut row_cfg = cfg.clone();
        row_cfg.set_ablation(&ablation);
        row_cfg.out = Some(out.join(slug));
        let row_out = row_cfg.out.clone().expect("set above");
        let params = build_model(&row_cfg, &manifest, &dspec)?;
        let train_cfg = row_cfg.train_config(Some(row_out.clone()))?;
        write_resolved(&row_cfg, &row_out)?;
        let total = train_cfg.schedule.total_epochs;
        train_loop(&manifest, &params, &train_cfg, |epoch, _| {
            if (epoch + 1) % 10 == 0 || epoch + 1 == total {
                eprintln!("  epoch {}/{total}", epoch + 1);
            }
            Ok(())
        })?;
        let report = evaluate_model(&manifest, &params, row_cfg.mask_threshold)?;
        write_report(&report, &row_out)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        table.push_str(&format!(
            "{label}\t{}\t{}\t{}\t{:.4}\t{}\t{}\n",
            fmt(report.rank(1)),
            fmt(report.rank(5)),
            fmt(report.rank(10)),
            report.map,
            fmt(report.camera_accuracy),
            fmt(report.mean_mask_iou),
        ));
        text.push_str(&format!("{label}\n{}\n", report.to_text()));
        eprint!("{}", report.to_text());
    }
    std::fs::write(out.join("comparison.tsv"), &table).map_err(Error::from)?;
    std::fs::write(out.join("comparison.txt"), &text).map_err(Error::from)?;
    eprintln!("comparison table written to {}", out.join("comparison.tsv").display());
    Ok(())
}
