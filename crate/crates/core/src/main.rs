use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lengen::datagen::{make_split, SplitSpec};
use lengen::harness::{
    eval_checkpoint, final_checkpoint, plot_files, run, summarize, sweep, ExperimentConfig, PlotKind, RunOptions,
};

#[derive(Parser)]
#[command(name = "lengen", version, about = "Length generalization experiments on decimal addition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; unspecified keys take desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set pe.variant=rope`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sets both the weight and the data seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {s:?}");
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let seeds = [
            ("train.weight_seed", self.weight_seed.or(self.seed)),
            ("train.data_seed", self.data_seed.or(self.seed)),
        ];
        for (k, v) in seeds {
            if let Some(v) = v {
                out.push((k.to_string(), v.to_string()));
            }
        }
        Ok(out)
    }

    fn load_onto(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        cfg.apply_overrides(&self.overrides()?)?;
        Ok(cfg)
    }

    fn load(&self) -> Result<ExperimentConfig> {
        self.load_onto(ExperimentConfig::desk())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the training, validation and test splits with manifests.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate data, train and evaluate into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many updates without changing the schedule.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint of an existing run.
    Eval {
        /// Run directory; its config.txt is the base configuration.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the newest checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<run>/eval_<checkpoint name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train every weight-seed × data-seed cell and summarize. Completed
    /// cells with the same configuration are reused.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Only rebuild summary.csv from existing member runs.
        #[arg(long)]
        summarize_only: bool,
    },
    /// Draw an SVG from run or sweep CSV files.
    Plot {
        /// em-length, loss, em-step or seeds.
        #[arg(long)]
        kind: String,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Series labels, in input order.
        #[arg(long)]
        label: Vec<String>,
        /// Lengths to draw for em-step (all by default).
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let cfg = cfg.resolved()?;
    let d = &cfg.data;
    let train = SplitSpec::Train {
        count: d.train_count,
        max_len: d.max_train_len,
    };
    let f = make_split(&train, &d.format, d.gen_seed, out, "train")?;
    println!("{} lines -> {}", f.lines, f.data.display());
    if d.valid_count > 0 {
        let valid = SplitSpec::Train {
            count: d.valid_count,
            max_len: d.max_train_len,
        };
        let f = make_split(&valid, &d.format, d.gen_seed ^ 0x5A5A_5A5A_5A5A_5A5A, out, "valid")?;
        println!("{} lines -> {}", f.lines, f.data.display());
    }
    let test = SplitSpec::Test {
        lengths: cfg.eval.lengths.clone(),
        n_per_length: cfg.eval.n_per_length,
    };
    let f = make_split(&test, &cfg.eval_format(), cfg.eval.seed, out, "test")?;
    println!("{} lines -> {}", f.lines, f.data.display());
    Ok(())
}

fn print_em(rows: impl IntoIterator<Item = (usize, f64)>) {
    for (len, em) in rows {
        println!("length {len:>3}: EM {:6.2}%", 100.0 * em);
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Config { cfg } => print!("{}", cfg.load()?.resolved()?.to_text()),
        Command::Gen { cfg, out } => gen(&cfg.load()?, &out)?,
        Command::Train {
            cfg,
            out,
            resume,
            stop_after,
        } => {
            let cfg = cfg.load()?;
            let outcome = run(&cfg, &out, &RunOptions { resume, stop_after })?;
            print_em(outcome.report.per_length.iter().map(|r| (r.length, r.em_accuracy())));
            println!("run written to {}", outcome.dir.display());
        }
        Command::Eval {
            run: dir,
            checkpoint,
            out,
            set,
        } => {
            let text = fs::read_to_string(dir.join("config.txt"))
                .with_context(|| format!("reading {}/config.txt", dir.display()))?;
            let args = ConfigArgs {
                config: None,
                set,
                seed: None,
                weight_seed: None,
                data_seed: None,
            };
            let cfg = args.load_onto(ExperimentConfig::parse(&text)?)?;
            let ck = match checkpoint {
                Some(p) => p,
                None => final_checkpoint(&dir)?,
            };
            let stem = ck.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
            let out = out.unwrap_or_else(|| dir.join(format!("eval_{stem}")));
            let report = eval_checkpoint(&cfg, &ck, &out)?;
            print_em(report.per_length.iter().map(|r| (r.length, r.em_accuracy())));
            println!("report written to {}", out.display());
        }
        Command::Sweep {
            cfg,
            out,
            summarize_only,
        } => {
            let summary = if summarize_only {
                summarize(&out)?
            } else {
                sweep(&cfg.load()?, &out)?
            };
            for r in &summary.rows {
                println!(
                    "length {:>3}: best {:6.2}%  median {:6.2}%  min {:6.2}%  ({} runs)",
                    r.length,
                    100.0 * r.best,
                    100.0 * r.median,
                    100.0 * r.min,
                    r.n_runs
                );
            }
            for (w, d, e) in &summary.failures {
                eprintln!("cell w{w}_d{d} failed: {e}");
            }
        }
        Command::Plot {
            kind,
            input,
            label,
            lengths,
            out,
        } => {
            let kind: PlotKind = kind.parse()?;
            let inputs: Vec<&Path> = input.iter().map(PathBuf::as_path).collect();
            let svg = plot_files(kind, &inputs, &label, &lengths)?;
            fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("plot written to {}", out.display());
        }
    }
    Ok(())
}
