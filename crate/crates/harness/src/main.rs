// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use desksteer::corpus::{gen_steering_pairs, SegmentedPrompt, Vocab};
use desksteer::debias::DebiasMode;
use desksteer::explain::{explain, render_report, RenderFormat};
use desksteer::steering::{as_hooks, make_steering_hooks, ControlConfig, ControlOperator};
use desksteer_harness::checkpoint::write_atomic;
use desksteer_harness::config::PipelineConfig;
use desksteer_harness::dump::dump_representations;
use desksteer_harness::eval::continue_prompt;
use desksteer_harness::pipeline::{Pipeline, Stage, StageReport};
use desksteer_harness::{HarnessError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "desksteer",
    version,
    about = "Debiased activation steering on a tiny language model"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Steering strength.
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<f32>,
    /// projection, addition or product.
    #[arg(long, global = true)]
    operator: Option<ControlOperator>,
    /// residual or replace.
    #[arg(long, global = true)]
    mode: Option<DebiasMode>,
    /// Intervene on the middle layers instead of the most probe-accurate ones.
    #[arg(long, global = true)]
    middle: bool,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    Pretrain,
    AuditBias,
    SelectLayers,
    TrainDebias,
    Extract,
    Eval,
    /// Every stage in order.
    Run,
    /// Greedy continuation of a prompt, unsteered and steered.
    Generate(PromptArgs),
    /// Token alignment of a steered continuation.
    Explain {
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long)]
        html: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Lowest-alignment tokens to list.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Score prompt tokens as well as generated ones.
        #[arg(long)]
        include_prompt: bool,
    },
    /// Pooled per-prompt states of steered prompts as CSV.
    DumpReps {
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        /// Number of positive/negative prompt pairs.
        #[arg(long, default_value_t = 64)]
        n_pairs: usize,
    },
}

#[derive(Args, Debug)]
struct PromptArgs {
    /// Space-separated vocabulary words, e.g. "topic0_1 w3 topic0_2 <sep>".
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 8)]
    max_new: usize,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(beta) = common.beta {
        cfg.eval.beta = beta;
    }
    if let Some(op) = common.operator {
        cfg.eval.operator = op;
    }
    if let Some(mode) = common.mode {
        cfg.debias.train.mode = mode;
    }
    if common.middle {
        cfg.select.middle = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(reports: &[StageReport]) {
    for r in reports {
        let state = if r.computed { "computed" } else { "cached" };
        println!("{:<14} {:<9} {}", r.stage.name(), state, r.artifact.display());
    }
}

fn tokenize(vocab: &Vocab, text: &str) -> Result<SegmentedPrompt> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(HarnessError::data("empty prompt"));
    }
    Ok(SegmentedPrompt::neutral(vocab.tokenize(&words)?))
}

fn words(vocab: &Vocab, ids: &[usize]) -> String {
    ids.iter()
        .map(|&t| vocab.word(t).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let mut pipeline = Pipeline::new(cfg, &cli.common.out_dir)?;
    pipeline.verbose = cli.common.verbose;
    let stage = |s: Stage| -> Result<()> {
        print_reports(&pipeline.ensure(s)?);
        Ok(())
    };
    match cli.command {
        Command::Pretrain => stage(Stage::Pretrain),
        Command::AuditBias => {
            stage(Stage::AuditBias)?;
            let text = std::fs::read_to_string(pipeline.artifact_path(Stage::AuditBias))?;
            let audit: desksteer_harness::pipeline::AuditArtifact = serde_json::from_str(&text)?;
            for l in &audit.layers {
                println!(
                    "layer {:>2}  probe {:.3}  positive {:.3}  agreement {:.3}",
                    l.layer, l.probe_accuracy, l.report.positive, l.agreement
                );
            }
            Ok(())
        }
        Command::SelectLayers => {
            stage(Stage::SelectLayers)?;
            println!("layers {:?}", pipeline.load_layers()?.selection.layers);
            Ok(())
        }
        Command::TrainDebias => stage(Stage::TrainDebias),
        Command::Extract => stage(Stage::Extract),
        Command::Eval => {
            stage(Stage::Eval)?;
            print!("{}", std::fs::read_to_string(pipeline.artifact_path(Stage::Eval))?);
            Ok(())
        }
        Command::Run => {
            print_reports(&pipeline.run_all()?);
            Ok(())
        }
        Command::Generate(args) => {
            pipeline.ensure(Stage::Extract).map(|_| ())?;
            let model = pipeline.load_model()?;
            let rep = pipeline.load_steering()?;
            let vocab = Vocab::new(&pipeline.cfg.corpus.spec)?;
            let prompt = tokenize(&vocab, &args.prompt)?.tokens();
            let control = ControlConfig {
                beta: pipeline.cfg.eval.beta,
                operator: pipeline.cfg.eval.operator,
                layers: None,
            };
            let hooks = make_steering_hooks(&rep, &control, &model)?;
            let plain = continue_prompt(&model, &prompt, &[], args.max_new)?;
            let steered = continue_prompt(&model, &prompt, &as_hooks(&hooks), args.max_new)?;
            println!("unsteered: {}", words(&vocab, &plain));
            println!("steered:   {}", words(&vocab, &steered));
            Ok(())
        }
        Command::Explain {
            prompt,
            html,
            json,
            k,
            include_prompt,
        } => {
            pipeline.ensure(Stage::Extract).map(|_| ())?;
            let model = pipeline.load_model()?;
            let rep = pipeline.load_steering()?;
            let vocab = Vocab::new(&pipeline.cfg.corpus.spec)?;
            let tokens = tokenize(&vocab, &prompt.prompt)?.tokens();
            let control = ControlConfig {
                beta: pipeline.cfg.eval.beta,
                operator: pipeline.cfg.eval.operator,
                layers: None,
            };
            let hooks = make_steering_hooks(&rep, &control, &model)?;
            let hooks = as_hooks(&hooks);
            let generated = continue_prompt(&model, &tokens, &hooks, prompt.max_new)?;
            if generated.is_empty() && !include_prompt {
                return Err(HarnessError::data("nothing was generated to explain"));
            }
            let mut seq = tokens.clone();
            seq.extend_from_slice(&generated);
            let from = if include_prompt { 0 } else { tokens.len() };
            let report = explain(&model, &rep, &hooks, &seq, from, k, |t| {
                vocab.word(t).unwrap_or("?").to_string()
            })?;
            println!("{}", render_report(&report, RenderFormat::Ansi)?);
            println!(
                "lowest: {}",
                words(
                    &vocab,
                    &report.lowest.iter().map(|&i| report.tokens[i]).collect::<Vec<_>>()
                )
            );
            if let Some(path) = html {
                write_atomic(&path, render_report(&report, RenderFormat::Html)?.as_bytes())?;
            }
            if let Some(path) = json {
                write_atomic(&path, render_report(&report, RenderFormat::Json)?.as_bytes())?;
            }
            Ok(())
        }
        Command::DumpReps { layer, out, n_pairs } => {
            pipeline.ensure(Stage::Pretrain).map(|_| ())?;
            let model = pipeline.load_model()?;
            let pairs = if n_pairs == 0 {
                Vec::new()
            } else {
                gen_steering_pairs(&pipeline.cfg.corpus.spec, n_pairs, pipeline.cfg.seed)?
            };
            let prompts: Vec<(String, SegmentedPrompt)> = pairs
                .into_iter()
                .flat_map(|p| {
                    [
                        ("positive".to_string(), p.positive),
                        ("negative".to_string(), p.negative),
                    ]
                })
                .collect();
            let mut buf = Vec::new();
            dump_representations(&model, &prompts, layer, &mut buf)?;
            write_atomic(&out, &buf)?;
            println!("{} rows -> {}", prompts.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
