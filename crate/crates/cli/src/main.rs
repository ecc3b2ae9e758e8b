//! `qpeft`: run experiments, check gradients, count parameters and inspect
//! rank heatmaps.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use qformer_peft::experiment::{load_heatmap, run_experiment, sweep_grid, verify_run, ExperimentConfig};
use qformer_peft::gradcheck;
use qformer_peft::qformer::{odd_layers, QFormerConfig};
use qformer_peft::report::{render_svg, ParamBudgetReport};

#[derive(Parser)]
#[command(name = "qpeft", version, about = "LoRA / AdaLoRA fine-tuning of a miniature Q-Former")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to a TOML experiment config
    Run {
        config: PathBuf,
        /// Run the rank x target-preset grid instead of the single config
        #[arg(long)]
        sweep: bool,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        /// hidden,heads,layers,queries,ffn
        #[arg(long, value_delimiter = ',', default_values_t = [8, 2, 2, 3, 16])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the trainable-parameter budget of a config
    Paramcount { config: PathBuf },
    /// Print the rank heatmap of a finished run
    Heatmap {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write to a file instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Replay a run's prune log and check it against the written reports
    Verify { run_dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    config.apply_env_overrides()?;
    Ok(config)
}

fn run(path: PathBuf, sweep: bool) -> Result<()> {
    let config = load_config(&path)?;
    let configs = if sweep { sweep_grid(&config) } else { vec![config] };
    for c in &configs {
        info!("running {} into {}", c.name, c.output_dir.display());
        for out in run_experiment(c)? {
            let s = &out.summary;
            println!(
                "{} seed={} best_epoch={} val={:.4} test={} rank={}",
                s.name,
                s.seed,
                s.best_epoch,
                s.best_val_accuracy,
                s.test_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                s.final_active_rank.map_or("-".into(), |r| r.to_string())
            );
        }
    }
    Ok(())
}

fn gradcheck_cmd(dims: &[usize], rank: usize, seed: u64) -> Result<()> {
    let &[hidden, heads, layers, queries, ffn] = dims else {
        bail!("--dims takes hidden,heads,layers,queries,ffn");
    };
    let config = QFormerConfig {
        num_layers: layers,
        hidden_dim: hidden,
        num_heads: heads,
        num_queries: queries,
        image_dim: hidden,
        ffn_dim: ffn,
        cross_attention_layers: odd_layers(layers),
        max_text_len: 2,
        vocab_size: 5,
        num_classes: 3,
        ..QFormerConfig::default()
    };
    config.validate()?;
    let mut ok = true;
    for (kind, report) in gradcheck::suite(&config, rank, seed)? {
        let worst = report.worst().context("nothing to check")?;
        println!(
            "{:<8} {} tensors, worst {} rel err {:.3e} ({})",
            kind.as_str(),
            report.params.len(),
            worst.name,
            worst.max_rel_err,
            if report.passed() { "ok" } else { "FAIL" }
        );
        ok &= report.passed();
    }
    if !ok {
        bail!("gradient check exceeded tolerance {:e}", gradcheck::TOLERANCE);
    }
    Ok(())
}

fn paramcount(path: PathBuf) -> Result<()> {
    let config = load_config(&path)?;
    let report = match config.adapter.plan()? {
        Some(plan) => ParamBudgetReport::new(&config.model, &plan)?,
        None => ParamBudgetReport::full_finetune(&config.model),
    };
    print!("{report}");
    Ok(())
}

fn heatmap(dir: PathBuf, format: Format, output: Option<PathBuf>) -> Result<()> {
    let rows = load_heatmap(&dir)?;
    let text = match format {
        Format::Csv => fs::read_to_string(dir.join("rank_report.csv"))?,
        Format::Svg => render_svg(&rows),
    };
    match output {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, sweep } => run(config, sweep),
        Command::Gradcheck { dims, rank, seed } => gradcheck_cmd(&dims, rank, seed),
        Command::Paramcount { config } => paramcount(config),
        Command::Heatmap {
            run_dir,
            format,
            output,
        } => heatmap(run_dir, format, output),
        Command::Verify { run_dir } => verify_run(&run_dir).map_err(Into::into).map(|v| {
            println!(
                "ok: {} prune events over {} adapters replay to the written {}-layer heatmap",
                v.events, v.adapters, v.layers
            );
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
