use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use graphground::config::{Config, Toggles};
use graphground::eval::{calibrate, infer_all, score_inferences, to_csv, AblationRunner, EvalReport};
use graphground::gradcheck::{check_op, OPS};
use graphground::langgraph::ParseRequest;
use graphground::model::{Model, Prediction};
use graphground::synth::{self, Record, Split};
use graphground::train::train_two_stage;
use graphground::weights;

#[derive(Parser)]
#[command(name = "graphground", version, about = "Multi-phrase visual grounding by cross-modal graph matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the language scene graph of a parsed sentence.
    ParseGraph {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate train, val and test JSONL files.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both stages and save the weights.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@1 of saved weights on a JSONL file.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// A number, or `auto` for the weight stored with the model.
        #[arg(long, default_value = "auto")]
        beta: String,
    },
    /// Ground the phrases of one record.
    Ground {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        no_sp: bool,
        #[arg(long)]
        no_vogn: bool,
        #[arg(long)]
        no_pgn: bool,
        #[arg(long)]
        no_pp: bool,
    },
    /// Train and evaluate every ablation configuration and write a CSV report.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the relation-feature rows and the K sweep.
        #[arg(long)]
        main_only: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Operation name, or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn write_json<T: Serialize>(value: &T, out: &Path) -> Result<()> {
    fs::write(out, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", out.display()))
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(synth::from_jsonl(&text)?)
}

fn resolve_beta(arg: &str, stored: Option<f64>) -> Result<Option<f64>> {
    if arg == "auto" {
        return Ok(stored);
    }
    let beta: f64 = arg.parse().with_context(|| format!("--beta expects a number or `auto`, got {arg:?}"))?;
    if !(0.0..=1.0).contains(&beta) {
        bail!("--beta must lie in [0, 1]");
    }
    Ok(Some(beta))
}

fn print_report(report: &EvalReport) {
    println!("recall@1 {:.2} ({}/{})", report.recall_at_1, report.correct, report.total);
    for c in &report.per_category {
        println!("  {:<12} {:>6.2} ({}/{})", c.category.name(), c.accuracy(), c.correct, c.total);
    }
}

fn train(config: &Config, out: &Path) -> Result<()> {
    let train = synth::examples(&synth::load_split(config, Split::Train)?)?;
    let val = synth::examples(&synth::load_split(config, Split::Val)?)?;
    let toggles = config.model.toggles;
    let mut model = Model::new(config.model.clone(), synth::vocabulary())?;
    eprintln!("training [{}] on {} scenes", toggles.label(), train.len());
    let report = train_two_stage(&mut model, &train, &toggles, &config.loss, &config.optimizer, config.eval.label_threshold)?;
    let last = |l: &[f64]| l.last().copied().unwrap_or(f64::NAN);
    eprintln!("stage one final loss {:.4}", last(&report.stage_one.losses));
    if let Some(s) = &report.stage_two {
        eprintln!("stage two final loss {:.4}", last(&s.losses));
    }
    let infs = infer_all(&model, &val, &toggles)?;
    let beta = if toggles.sp {
        let search = calibrate(&infs, &val, config.eval.beta_step, config.eval.iou_threshold)?;
        eprintln!("calibrated beta {:.2} on {} val scenes", search.best, val.len());
        Some(search.best)
    } else {
        None
    };
    let report = score_inferences(&infs, &val, beta.unwrap_or(0.0), config.eval.iou_threshold);
    println!("val recall@1 {:.2}", report.recall_at_1);
    weights::save(&model, beta, out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct GroundOutput {
    beta: f64,
    toggles: String,
    #[serde(flatten)]
    prediction: Prediction,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ParseGraph { input, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let request: ParseRequest = serde_json::from_str(&text)?;
            write_json(&request.build()?, &out)
        }
        Command::Gen { config, out } => {
            let config = load_config(config.as_deref())?;
            fs::create_dir_all(&out)?;
            for (split, name, count) in [
                (Split::Train, "train", config.data.train),
                (Split::Val, "val", config.data.val),
                (Split::Test, "test", config.data.test),
            ] {
                let records = synth::generate_split(config.data.seed, split, count, &config.world)?;
                let path = out.join(format!("{name}.jsonl"));
                fs::write(&path, synth::to_jsonl(&records)?)?;
                eprintln!("wrote {} scenes to {}", records.len(), path.display());
            }
            Ok(())
        }
        Command::Train { config, out } => train(&load_config(config.as_deref())?, &out),
        Command::Eval { weights: path, data, beta } => {
            let ckpt = weights::load(&path)?;
            let beta = resolve_beta(&beta, ckpt.beta)?;
            let examples = synth::examples(&read_records(&data)?)?;
            let toggles = ckpt.model.config.toggles;
            let infs = infer_all(&ckpt.model, &examples, &toggles)?;
            let beta = beta.unwrap_or(0.0);
            println!("beta {beta:.2}");
            print_report(&score_inferences(&infs, &examples, beta, 0.5));
            Ok(())
        }
        Command::Ground { weights: path, scene, beta, no_sp, no_vogn, no_pgn, no_pp } => {
            let ckpt = weights::load(&path)?;
            let text = fs::read_to_string(&scene).with_context(|| format!("reading {}", scene.display()))?;
            // a single JSON object, or the first line of a JSONL file
            let record: Record = match serde_json::from_str(text.trim()) {
                Ok(r) => r,
                Err(_) => synth::from_jsonl(&text)?.into_iter().next().context("scene file holds no record")?,
            };
            let base = ckpt.model.config.toggles;
            let toggles = Toggles {
                sp: base.sp && !no_sp,
                vogn: base.vogn && !no_vogn,
                pgn: base.pgn && !no_pgn,
                pp: base.pp && !no_pp,
                ..base
            };
            let beta = beta.or(ckpt.beta).unwrap_or(0.0);
            let inference = ckpt.model.infer(&record.sample.to_input(record.scene.canvas)?, &toggles)?;
            let output = GroundOutput { beta, toggles: toggles.label(), prediction: inference.decode(beta) };
            println!("{}", serde_json::to_string_pretty(&output)?);
            Ok(())
        }
        Command::Ablate { config, out, main_only } => {
            let config = load_config(config.as_deref())?;
            let train = synth::examples(&synth::load_split(&config, Split::Train)?)?;
            let val = synth::examples(&synth::load_split(&config, Split::Val)?)?;
            let start = std::time::Instant::now();
            let mut runner = AblationRunner::new(config, &train, &val)?
                .with_log(|m| eprintln!("[{:>7.1}s] {m}", start.elapsed().as_secs_f64()));
            let (mut rows, _) = runner.main_rows()?;
            if !main_only {
                rows.extend(runner.relation_rows()?);
                rows.extend(runner.k_sweep()?);
            }
            let csv = to_csv(&rows);
            fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            print!("{csv}");
            Ok(())
        }
        Command::Gradcheck { op, seed } => {
            let ops: Vec<&str> = if op == "all" { OPS.to_vec() } else { vec![op.as_str()] };
            for name in ops {
                let report = check_op(name, seed)?;
                println!("{name} (seed {seed}): max relative error {:.3e}", report.max_rel_error());
                for t in &report.tensors {
                    println!("  {:<24} {:>6} entries  rel {:.3e}  abs {:.3e}", t.name, t.entries, t.max_rel_error, t.max_abs_error);
                }
            }
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
