//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use fedcmd_core::datakit::PartitionPlan;
use fedcmd_core::nn::Model;
use fedcmd_core::orchestrator::{
    self, cumulative_bytes, resolve_model, CommForecast, RunConfig, RunError, RunOptions,
    RunReport, Strategy,
};

use crate::{PartitionArgs, ReportArgs, RunArgs};

/// Errors carrying their process exit code: 2 for configuration and
/// validation problems, 3 for numeric failures.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn io(context: &str, path: &Path, err: std::io::Error) -> Self {
        CliError::Config(format!("{context} {}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl From<RunError> for CliError {
    fn from(err: RunError) -> Self {
        if err.is_numeric() {
            CliError::Numeric(err.to_string())
        } else {
            CliError::Config(err.to_string())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io("cannot read config", path, e))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io("cannot create", parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io("cannot write", path, e))
}

pub fn partition(args: PartitionArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds.data = seed;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let dataset = orchestrator::load_dataset(&cfg.dataset, cfg.seeds.data)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let plan = orchestrator::default_plan(&cfg, &dataset)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let out_dir = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    let plan_path = out_dir.join("plan.json");
    let mut json = serde_json::to_string_pretty(&plan).expect("plan serializes");
    json.push('\n');
    write_file(&plan_path, &json)?;

    println!("wrote {}", plan_path.display());
    println!("per-client class histograms (rows: client, cols: class):");
    for (client, hist) in plan.class_histograms(&dataset).iter().enumerate() {
        let cells: Vec<String> = hist.iter().map(|c| c.to_string()).collect();
        println!("  client {client:>3} | {}", cells.join(" "));
    }
    Ok(())
}

fn load_plan(path: &Path) -> Result<PartitionPlan, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io("cannot read plan", path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid plan {}: {e}", path.display())))
}

/// Communication forecast printed by `--dry-run`. The personalized layer
/// is only known after the selection phase, so fedcmd lists every
/// candidate head.
fn print_forecast(cfg: &RunConfig, model: &Model<f32>) {
    let theta = model.param_count();
    let m = cfg.sampled_per_round() as u64;
    let k = cfg.rounds as u64;
    println!("model `{}`: {theta} parameters, 4 bytes each", cfg.model);
    println!("sampled clients per round: {m}");
    match cfg.strategy {
        Strategy::FedAvg => {
            let f = CommForecast::new(theta, 0, m, k, k);
            println!("predicted total bytes: {}", f.formula);
        }
        Strategy::LocalOnly => println!("predicted total bytes: 0 (no communication)"),
        Strategy::FixedHead => {
            let head = model.eligible_layers().last().cloned().expect("model has layers");
            let head_params = model.param_vec(&head).unwrap().len() as u64;
            let f = CommForecast::new(theta, head_params, m, k, 0);
            println!("head `{head}` ({head_params} params) stays local");
            println!("predicted total bytes: {}", f.formula);
        }
        Strategy::FedCmd => {
            let kp = cfg.selection_rounds() as u64;
            println!("selection rounds: {kp} of {k}");
            println!("per candidate personalized layer:");
            for layer in model.eligible_layers() {
                let head_params = model.param_vec(&layer).unwrap().len() as u64;
                let f = CommForecast::new(theta, head_params, m, k, kp);
                println!("  {layer:>12} ({head_params:>8} params): {}", f.formula);
            }
        }
    }
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(strategy) = &args.strategy {
        cfg.strategy = strategy
            .parse()
            .map_err(|e: orchestrator::ConfigError| CliError::Config(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.seeds.master = seed;
    }
    if let Some(every) = args.eval_every {
        cfg.eval_every = every;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let dataset = orchestrator::load_dataset(&cfg.dataset, cfg.seeds.data)
        .map_err(|e| CliError::Config(e.to_string()))?;

    if args.dry_run {
        let spec = resolve_model(&cfg.model, dataset.sample_shape(), dataset.num_classes)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let model = Model::<f32>::build(&spec, 0).map_err(|e| CliError::Config(e.to_string()))?;
        println!("config ok: strategy={}, rounds={}", cfg.strategy, cfg.rounds);
        print_forecast(&cfg, &model);
        return Ok(());
    }

    let plan = match &args.plan {
        Some(path) => {
            let plan = load_plan(path)?;
            plan.validate_for(&dataset)
                .map_err(|e| CliError::Config(format!("plan {}: {e}", path.display())))?;
            plan
        }
        None => orchestrator::default_plan(&cfg, &dataset)
            .map_err(|e| CliError::Config(e.to_string()))?,
    };

    let dir = cfg.output.dir.clone();
    let opts = RunOptions {
        threads: args.threads,
        dump_similarity_csv: args.dump_similarity,
        checkpoint: args
            .checkpoint_every
            .map(|every| (every, dir.join("checkpoints"))),
        ..RunOptions::default()
    };
    let output = orchestrator::run(&cfg, &dataset, &plan, &opts)?;
    let report = &output.report;

    write_file(&dir.join("report.json"), &report.to_json())?;
    write_file(&dir.join("rounds.csv"), &report.rounds_csv())?;
    if let Some(dumps) = &output.similarity_csv {
        for (round, csv) in dumps {
            write_file(&dir.join(format!("similarity/round-{round:04}.csv")), csv)?;
        }
    }

    println!(
        "{}: {} rounds, final accuracy {:.4} ± {:.4}",
        cfg.strategy,
        report.rounds.len(),
        report.final_mean_accuracy,
        report.final_std_accuracy
    );
    if let Some(layer) = &report.selected_layer {
        println!("personalized layer: {layer}");
    }
    println!(
        "communication: measured {} bytes, predicted {}",
        report.communication.measured_total_bytes, report.communication.forecast.formula
    );
    println!("wrote {}", dir.join("report.json").display());
    Ok(())
}

fn load_report(path: &Path) -> Result<RunReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io("cannot read report", path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid report {}: {e}", path.display())))
}

pub fn report(args: ReportArgs) -> Result<(), CliError> {
    let reports: Vec<(PathBuf, RunReport)> = args
        .reports
        .iter()
        .map(|p| load_report(p).map(|r| (p.clone(), r)))
        .collect::<Result<_, _>>()?;

    let descriptor = reports[0].1.config.dataset.descriptor();
    for (path, r) in &reports {
        let d = r.config.dataset.descriptor();
        if d != descriptor {
            return Err(CliError::Config(format!(
                "cannot compare runs on different datasets: {} has `{d}`, {} has `{descriptor}`",
                path.display(),
                reports[0].0.display()
            )));
        }
    }

    let mut table = String::from(
        "| strategy | final accuracy (mean ± std) | personalized layer | total bytes |\n\
         |---|---|---|---|\n",
    );
    for (_, r) in &reports {
        table.push_str(&format!(
            "| {} | {:.4} ± {:.4} | {} | {} |\n",
            r.config.strategy,
            r.final_mean_accuracy,
            r.final_std_accuracy,
            r.selected_layer.as_deref().unwrap_or("-"),
            r.communication.measured_total_bytes,
        ));
    }

    let mut acc_csv = String::from("strategy,round,mean_accuracy,std_accuracy\n");
    let mut bytes_csv = String::from("strategy,round,cumulative_bytes\n");
    let mut class_csv = String::from("strategy,class,correct,total,accuracy\n");
    for (_, r) in &reports {
        let name = r.config.strategy.name();
        for round in &r.rounds {
            if let (Some(mean), Some(std)) = (round.mean_accuracy, round.std_accuracy) {
                acc_csv.push_str(&format!("{name},{},{mean},{std}\n", round.round));
            }
        }
        for (round, cum) in r.rounds.iter().zip(cumulative_bytes(&r.rounds)) {
            bytes_csv.push_str(&format!("{name},{},{cum}\n", round.round));
        }
        for c in &r.per_class_accuracy {
            class_csv.push_str(&format!(
                "{name},{},{},{},{}\n",
                c.class, c.correct, c.total, c.accuracy
            ));
        }
    }

    write_file(&args.out.join("comparison.md"), &table)?;
    write_file(&args.out.join("accuracy_vs_round.csv"), &acc_csv)?;
    write_file(&args.out.join("bytes_vs_round.csv"), &bytes_csv)?;
    write_file(&args.out.join("per_class_accuracy.csv"), &class_csv)?;
    print!("{table}");
    println!("wrote comparison artifacts to {}", args.out.display());
    Ok(())
}
