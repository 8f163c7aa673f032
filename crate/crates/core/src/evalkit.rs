//! Greedy decoding, exact-match scoring by operand length and digit-level
//! error analysis (carry vs no carry, wrong positions, error counts).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datagen::{
    generate_split, parse_answer, AdditionExample, DataLine, FormatSpec, SplitSpec, TokenId, EOS, EQUALS, FILLER, PAD,
};
use crate::error::{Error, Result};
use crate::model::{greedy_decode_batch, DecodeRequest, ModelConfig};
use crate::numerics::{ParamStore, RngStream};

/// Anything that can answer addition questions.
pub trait AnswerModel {
    /// Answers for `questions` (each ending with `=`), at most `max_new`
    /// tokens each, without the terminating `<eos>`.
    fn answer_batch(&self, questions: &[&[TokenId]], max_new: usize) -> Result<Vec<Vec<TokenId>>>;
}

/// A trained transformer decoded greedily.
pub struct Transformer<'a> {
    pub params: &'a ParamStore<f32>,
    pub config: &'a ModelConfig,
    /// Seed for evaluation-time random positions, used only when the
    /// config asks for them.
    pub position_seed: u64,
}

const STREAM_EVAL_POSITIONS: u64 = 0xE7A1;

impl AnswerModel for Transformer<'_> {
    fn answer_batch(&self, questions: &[&[TokenId]], max_new: usize) -> Result<Vec<Vec<TokenId>>> {
        let pe = &self.config.pe;
        let root = RngStream::new(self.position_seed, STREAM_EVAL_POSITIONS);
        let requests = questions
            .iter()
            .enumerate()
            .map(|(i, q)| {
                if q.last() != Some(&EQUALS) {
                    return Err(Error::Argument("question must end with '='".into()));
                }
                let posmap = if pe.randomized && pe.randomize_eval {
                    let mut rng = root.fork(i as u64);
                    Some(pe.positions(q.len() + max_new, Some(&mut rng))?)
                } else {
                    None
                };
                Ok(DecodeRequest {
                    prompt: q.to_vec(),
                    posmap,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        greedy_decode_batch(self.params, self.config, &requests, max_new, EOS)
    }
}

/// Greedy answer to one question.
pub fn greedy_decode(
    params: &ParamStore<f32>,
    config: &ModelConfig,
    question: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    let m = Transformer {
        params,
        config,
        position_seed: 0,
    };
    Ok(m.answer_batch(&[question], max_new)?.remove(0))
}

fn normalize(ids: &[TokenId]) -> impl Iterator<Item = &TokenId> {
    ids.iter().filter(|&&t| t != FILLER && t != PAD)
}

/// Token-sequence equality after dropping filler and padding.
pub fn exact_match(pred: &[TokenId], gold: &[TokenId]) -> bool {
    normalize(pred).eq(normalize(gold))
}

/// Digit-level comparison of an aligned prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DigitErrors {
    pub carry_flag: bool,
    /// Significance indices where prediction and gold differ.
    pub wrong_positions: Vec<usize>,
    pub digit_diff_count: usize,
}

/// Compares predicted digits (by significance) with the zero-padded gold sum.
pub fn classify_digits(ex: &AdditionExample, width: usize, pred: &[u8]) -> Result<DigitErrors> {
    if pred.len() != width {
        return Err(Error::Argument(format!("{} predicted digits for width {width}", pred.len())));
    }
    let wrong_positions: Vec<usize> = (0..width)
        .filter(|&k| pred[k] != ex.sum_digits.get(k).copied().unwrap_or(0))
        .collect();
    Ok(DigitErrors {
        carry_flag: ex.carry_flag(),
        digit_diff_count: wrong_positions.len(),
        wrong_positions,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Prediction aligned digit for digit with the gold answer.
    Digit(DigitErrors),
    /// Wrong length, misplaced hints or a non-digit where a digit belongs.
    Structural { carry_flag: bool, reason: String },
}

impl ErrorKind {
    pub fn carry_flag(&self) -> bool {
        match self {
            ErrorKind::Digit(d) => d.carry_flag,
            ErrorKind::Structural { carry_flag, .. } => *carry_flag,
        }
    }
}

/// Classifies a predicted answer span, aligning digits through the hint
/// symbols when the format has them.
pub fn classify_error(ex: &AdditionExample, pred: &[TokenId], fmt: &FormatSpec, hint_offset: usize) -> ErrorKind {
    let width = fmt.answer_width(ex);
    match parse_answer(pred, fmt, hint_offset, width).and_then(|d| classify_digits(ex, width, &d)) {
        Ok(d) => ErrorKind::Digit(d),
        Err(e) => ErrorKind::Structural {
            carry_flag: ex.carry_flag(),
            reason: e.to_string(),
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRecord {
    pub length: usize,
    pub example_index: usize,
    pub example: AdditionExample,
    pub predicted: Vec<TokenId>,
    pub gold: Vec<TokenId>,
    pub kind: ErrorKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthResult {
    pub length: usize,
    pub n_examples: usize,
    pub n_correct: usize,
    pub n_carry: usize,
    pub n_carry_correct: usize,
}

impl LengthResult {
    pub fn em_accuracy(&self) -> f64 {
        self.n_correct as f64 / self.n_examples.max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMeta {
    pub checkpoint: String,
    pub weight_seed: u64,
    pub data_seed: u64,
    pub pe: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub per_length: Vec<LengthResult>,
    pub errors: Vec<ErrorRecord>,
    pub meta: EvalMeta,
}

pub const EM_HEADER: &str = "length,n,em";
pub const ERRORS_HEADER: &str = "length,example_index,carry_flag,digit_diff_count,wrong_positions,kind";

impl EvalReport {
    pub fn em(&self, length: usize) -> Option<f64> {
        self.per_length.iter().find(|r| r.length == length).map(LengthResult::em_accuracy)
    }

    pub fn total_examples(&self) -> usize {
        self.per_length.iter().map(|r| r.n_examples).sum()
    }

    pub fn em_csv(&self) -> String {
        let mut s = format!("{EM_HEADER}\n");
        for r in &self.per_length {
            let _ = writeln!(s, "{},{},{}", r.length, r.n_examples, r.em_accuracy());
        }
        s
    }

    pub fn errors_csv(&self) -> String {
        let mut s = format!("{ERRORS_HEADER}\n");
        for e in &self.errors {
            let (count, positions, kind) = match &e.kind {
                ErrorKind::Digit(d) => (
                    d.digit_diff_count.to_string(),
                    d.wrong_positions.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"),
                    "digit",
                ),
                ErrorKind::Structural { .. } => (String::new(), String::new(), "structural"),
            };
            let _ = writeln!(
                s,
                "{},{},{},{count},{positions},{kind}",
                e.length,
                e.example_index,
                e.kind.carry_flag()
            );
        }
        s
    }

    /// Aligned errors per wrong significance index.
    pub fn position_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for e in &self.errors {
            if let ErrorKind::Digit(d) = &e.kind {
                for &p in &d.wrong_positions {
                    *h.entry(p).or_default() += 1;
                }
            }
        }
        h
    }

    /// Aligned errors by number of wrong digits.
    pub fn diff_count_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for e in &self.errors {
            if let ErrorKind::Digit(d) = &e.kind {
                *h.entry(d.digit_diff_count).or_default() += 1;
            }
        }
        h
    }

    pub fn structural_errors(&self) -> usize {
        self.errors.iter().filter(|e| matches!(e.kind, ErrorKind::Structural { .. })).count()
    }

    /// Per-length EM split into questions with and without a carry.
    pub fn carry_csv(&self) -> String {
        let mut s = String::from("length,carry,n,em\n");
        for r in &self.per_length {
            let no_carry = r.n_examples - r.n_carry;
            let no_carry_correct = r.n_correct - r.n_carry_correct;
            for (carry, n, c) in [(false, no_carry, no_carry_correct), (true, r.n_carry, r.n_carry_correct)] {
                let em = if n == 0 { 0.0 } else { c as f64 / n as f64 };
                let _ = writeln!(s, "{},{carry},{n},{em}", r.length);
            }
        }
        s
    }

    fn histogram_csv(header: &str, h: &BTreeMap<usize, usize>) -> String {
        let mut s = format!("{header},count\n");
        for (k, v) in h {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// Writes `em.csv`, `errors.csv`, `carry.csv`, the two histograms and
    /// `meta.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = format!(
            "checkpoint: {}\nweight_seed: {}\ndata_seed: {}\npe: {}\n",
            self.meta.checkpoint, self.meta.weight_seed, self.meta.data_seed, self.meta.pe
        );
        let files = [
            ("em.csv", self.em_csv()),
            ("errors.csv", self.errors_csv()),
            ("carry.csv", self.carry_csv()),
            ("error_positions.csv", Self::histogram_csv("position", &self.position_histogram())),
            ("error_digit_counts.csv", Self::histogram_csv("digit_diff_count", &self.diff_count_histogram())),
            ("meta.txt", meta),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Parses an `em.csv` back into `(length, n, em)` rows.
pub fn read_em_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(EM_HEADER) {
        return Err(Error::Parse(format!("{}: missing em header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Parse(format!("{}: bad row {l:?}", path.display()));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

const DECODE_CHUNK: usize = 256;

/// Scores `model` on already generated examples, grouped by operand length
/// in order of first appearance.
pub fn eval_lines(model: &dyn AnswerModel, lines: &[DataLine], fmt: &FormatSpec) -> Result<EvalReport> {
    let mut per_length: Vec<LengthResult> = Vec::new();
    let mut index_in_length: BTreeMap<usize, usize> = BTreeMap::new();
    let mut errors = Vec::new();
    for chunk in lines.chunks(DECODE_CHUNK) {
        let questions: Vec<&[TokenId]> = chunk.iter().map(|l| l.rendered.question()).collect();
        let max_new = chunk.iter().map(|l| l.rendered.answer().len()).max().unwrap_or(0) + 1;
        let answers = model.answer_batch(&questions, max_new)?;
        if answers.len() != chunk.len() {
            return Err(Error::Argument("model returned the wrong number of answers".into()));
        }
        for (line, pred) in chunk.iter().zip(answers) {
            let length = line.example.operand_len();
            let idx = index_in_length.entry(length).or_default();
            let example_index = *idx;
            *idx += 1;
            let slot = match per_length.iter().position(|r| r.length == length) {
                Some(i) => i,
                None => {
                    per_length.push(LengthResult {
                        length,
                        n_examples: 0,
                        n_correct: 0,
                        n_carry: 0,
                        n_carry_correct: 0,
                    });
                    per_length.len() - 1
                }
            };
            let r = &mut per_length[slot];
            let carry = line.example.carry_flag();
            let ok = exact_match(&pred, line.rendered.answer());
            r.n_examples += 1;
            r.n_correct += ok as usize;
            r.n_carry += carry as usize;
            r.n_carry_correct += (carry && ok) as usize;
            if !ok {
                errors.push(ErrorRecord {
                    length,
                    example_index,
                    example: line.example.clone(),
                    kind: classify_error(&line.example, &pred, fmt, line.hint_offset),
                    predicted: pred,
                    gold: line.rendered.answer().to_vec(),
                });
            }
        }
    }
    Ok(EvalReport {
        per_length,
        errors,
        meta: EvalMeta::default(),
    })
}

/// Samples `n_per_length` fresh questions at every length (with the
/// training-time hint sampling), decodes and scores them.
pub fn eval_lengths(
    model: &dyn AnswerModel,
    lengths: &[usize],
    n_per_length: usize,
    fmt: &FormatSpec,
    seed: u64,
) -> Result<EvalReport> {
    let spec = SplitSpec::Test {
        lengths: lengths.to_vec(),
        n_per_length,
    };
    let lines = generate_split(&spec, fmt, seed)?;
    eval_lines(model, &lines, fmt)
}
