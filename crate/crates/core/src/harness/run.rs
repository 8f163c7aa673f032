use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use crate::datagen::{generate_split, DataLine, SplitSpec};
use crate::error::{Error, Result};
use crate::evalkit::{eval_lines, EvalMeta, EvalReport, Transformer};
use crate::numerics::ParamStore;
use crate::trainer::{load_checkpoint, train, Checkpoint, TrainExample, TrainOptions};

pub const THREADS_ENV: &str = "LENGEN_THREADS";
pub const EM_BY_STEP_HEADER: &str = "step,length,n,em";
pub const SELECTION_HEADER: &str = "length,final_em,max_over_steps_em,best_step";

/// Worker threads requested through `LENGEN_THREADS` (default 1).
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Configuration(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// One row of `eval/em_by_step.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepEm {
    pub step: u64,
    pub length: usize,
    pub n: usize,
    pub em: f64,
}

impl StepEm {
    fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.length, self.n, self.em)
    }
}

pub fn read_em_by_step(path: &Path) -> Result<Vec<StepEm>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(EM_BY_STEP_HEADER) {
        return Err(Error::Parse(format!("{}: missing header {EM_BY_STEP_HEADER:?}", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Parse(format!("{}: bad row {l:?}", path.display()));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(StepEm {
                step: f[0].parse().map_err(|_| bad())?,
                length: f[1].parse().map_err(|_| bad())?,
                n: f[2].parse().map_err(|_| bad())?,
                em: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Final and best-over-training EM for one length.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub length: usize,
    pub final_em: f64,
    pub max_over_steps_em: f64,
    pub best_step: u64,
}

/// Pairs the final report with the per-step curve. Lengths missing from
/// the curve fall back to the final value.
pub fn selections(report: &EvalReport, curve: &[StepEm], final_step: u64) -> Vec<Selection> {
    report
        .per_length
        .iter()
        .map(|r| {
            let final_em = r.em_accuracy();
            let mut best = (final_em, final_step);
            for p in curve.iter().filter(|p| p.length == r.length) {
                if p.em > best.0 || (p.em == best.0 && p.step < best.1) {
                    best = (p.em, p.step);
                }
            }
            Selection {
                length: r.length,
                final_em,
                max_over_steps_em: best.0,
                best_step: best.1,
            }
        })
        .collect()
}

pub fn selection_csv(rows: &[Selection]) -> String {
    let mut s = format!("{SELECTION_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.length, r.final_em, r.max_over_steps_em, r.best_step);
    }
    s
}

pub fn read_selection_csv(path: &Path) -> Result<Vec<Selection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SELECTION_HEADER) {
        return Err(Error::Parse(format!("{}: missing header {SELECTION_HEADER:?}", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Parse(format!("{}: bad row {l:?}", path.display()));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(Selection {
                length: f[0].parse().map_err(|_| bad())?,
                final_em: f[1].parse().map_err(|_| bad())?,
                max_over_steps_em: f[2].parse().map_err(|_| bad())?,
                best_step: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in `ckpt/` if there is one.
    pub resume: bool,
    /// Stop training after this many updates (the schedule is unchanged).
    pub stop_after: Option<u64>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub params: ParamStore<f32>,
    pub report: EvalReport,
    pub curve: Vec<StepEm>,
    pub selection: Vec<Selection>,
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let ck = dir.join("ckpt");
    if !ck.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(&ck)
        .map_err(|e| Error::io(&ck, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    Ok(found.pop())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn to_examples(lines: &[DataLine]) -> Vec<TrainExample> {
    lines.iter().map(|l| TrainExample::from(&l.rendered)).collect()
}

/// Test lines for the configured evaluation lengths.
pub fn test_lines(cfg: &ExperimentConfig) -> Result<Vec<DataLine>> {
    let spec = SplitSpec::Test {
        lengths: cfg.eval.lengths.clone(),
        n_per_length: cfg.eval.n_per_length,
    };
    generate_split(&spec, &cfg.eval_format(), cfg.eval.seed)
}

/// Training and validation lines. Validation comes from a different
/// generator seed than the training set.
pub fn train_lines(cfg: &ExperimentConfig) -> Result<(Vec<DataLine>, Vec<DataLine>)> {
    let d = &cfg.data;
    let train = generate_split(
        &SplitSpec::Train {
            count: d.train_count,
            max_len: d.max_train_len,
        },
        &d.format,
        d.gen_seed,
    )?;
    let valid = if d.valid_count == 0 {
        Vec::new()
    } else {
        generate_split(
            &SplitSpec::Train {
                count: d.valid_count,
                max_len: d.max_train_len,
            },
            &d.format,
            d.gen_seed ^ 0x5A5A_5A5A_5A5A_5A5A,
        )?
    };
    Ok((train, valid))
}

/// Decodes the test set with `params` and fills in the report metadata.
pub fn evaluate(cfg: &ExperimentConfig, params: &ParamStore<f32>, lines: &[DataLine], checkpoint: &str) -> Result<EvalReport> {
    let model = Transformer {
        params,
        config: &cfg.model,
        position_seed: cfg.eval.seed,
    };
    let mut report = eval_lines(&model, lines, &cfg.eval_format())?;
    report.meta = EvalMeta {
        checkpoint: checkpoint.to_string(),
        weight_seed: cfg.train.weight_seed,
        data_seed: cfg.train.data_seed,
        pe: cfg.model.pe.variant.as_str().to_string(),
    };
    Ok(report)
}

/// Generates data, trains and evaluates into `dir`:
/// `config.txt`, `env.txt`, `metrics.csv`, `ckpt/` and `eval/` (the
/// evaluation report plus `em_by_step.csv` and `selection.csv`).
pub fn run(config: &ExperimentConfig, dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let cfg = config.resolved()?;
    cfg.validate()?;
    let threads = thread_count()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_text = cfg.to_text();
    let config_path = dir.join("config.txt");
    let resume = if opts.resume {
        match latest_checkpoint(dir)? {
            Some(p) => {
                let ck = load_checkpoint(&p)?;
                if ck.config_text != config_text {
                    return Err(Error::Configuration(format!(
                        "{} was written by a different configuration",
                        p.display()
                    )));
                }
                Some(ck)
            }
            None => None,
        }
    } else {
        None
    };
    write(&config_path, &config_text)?;
    write(&dir.join("env.txt"), &format!("{THREADS_ENV}: {threads}\n"))?;

    let (train_set, valid_set) = train_lines(&cfg)?;
    let train_examples = to_examples(&train_set);
    let valid_examples = to_examples(&valid_set);
    let tests = test_lines(&cfg)?;

    let eval_dir = dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let curve_path = eval_dir.join("em_by_step.csv");
    let selection_path = eval_dir.join("selection.csv");
    if selection_path.exists() {
        fs::remove_file(&selection_path).map_err(|e| Error::io(&selection_path, e))?;
    }
    let start = resume.as_ref().map_or(0, |c: &Checkpoint| c.state.step);
    let mut curve: Vec<StepEm> = if start > 0 && curve_path.exists() {
        read_em_by_step(&curve_path)?.into_iter().filter(|p| p.step <= start).collect()
    } else {
        Vec::new()
    };
    let save_curve = |curve: &[StepEm]| -> Result<()> {
        let mut s = format!("{EM_BY_STEP_HEADER}\n");
        for p in curve {
            s.push_str(&p.to_csv());
            s.push('\n');
        }
        write(&curve_path, &s)
    };
    save_curve(&curve)?;

    let mut last_report: Option<(u64, EvalReport)> = None;
    let steps = cfg.train.steps;
    let mut hook = |step: u64, params: &ParamStore<f32>| -> Result<()> {
        if !cfg.eval.track_steps && step != steps {
            return Ok(());
        }
        let report = evaluate(&cfg, params, &tests, &format!("step_{step:06}"))?;
        for r in &report.per_length {
            curve.push(StepEm {
                step,
                length: r.length,
                n: r.n_examples,
                em: r.em_accuracy(),
            });
        }
        save_curve(&curve)?;
        last_report = Some((step, report));
        Ok(())
    };
    let outcome = train(
        &cfg.model,
        &cfg.train,
        &train_examples,
        TrainOptions {
            out_dir: Some(dir),
            config_text,
            validation: Some(&valid_examples),
            resume,
            on_eval: Some(&mut hook),
            stop_after: opts.stop_after,
        },
    )?;
    let done = outcome.state.step;
    let report = match last_report.take() {
        Some((step, r)) if step == done => r,
        _ => {
            let r = evaluate(&cfg, &outcome.params, &tests, &format!("step_{done:06}"))?;
            if cfg.eval.track_steps {
                curve.extend(r.per_length.iter().map(|l| StepEm {
                    step: done,
                    length: l.length,
                    n: l.n_examples,
                    em: l.em_accuracy(),
                }));
                save_curve(&curve)?;
            }
            r
        }
    };
    report.write(&eval_dir)?;
    let selection = selections(&report, &curve, done);
    write(&selection_path, &selection_csv(&selection))?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        config: cfg,
        params: outcome.params,
        report,
        curve,
        selection,
    })
}

/// Evaluates a checkpoint on the lengths of `cfg` and writes the report
/// into `out`.
pub fn eval_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let cfg = cfg.resolved()?;
    let ck = load_checkpoint(checkpoint)?;
    let tests = test_lines(&cfg)?;
    let report = evaluate(&cfg, &ck.params, &tests, &checkpoint.display().to_string())?;
    report.write(out)?;
    Ok(report)
}

/// Newest checkpoint of a run directory.
pub fn final_checkpoint(dir: &Path) -> Result<PathBuf> {
    latest_checkpoint(dir)?.ok_or_else(|| Error::EmptyData(format!("no checkpoint under {}", dir.join("ckpt").display())))
}

