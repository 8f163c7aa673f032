//! Addition examples: sampling, rendering (standard/reversed, index hints,
//! filler augmentation), parsing, tokenization and dataset files.
//!
//! Digits are stored little-endian everywhere: index `k` holds the digit of
//! significance `10^k`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub type TokenId = u32;

/// Number of distinct index-hint symbols.
pub const HINT_ALPHABET: usize = 102;

pub const PLUS: TokenId = 10;
pub const EQUALS: TokenId = 11;
pub const HINT_BASE: TokenId = 12;
pub const FILLER: TokenId = HINT_BASE + HINT_ALPHABET as TokenId;
pub const EOS: TokenId = FILLER + 1;
pub const PAD: TokenId = FILLER + 2;
pub const VOCAB_SIZE: usize = PAD as usize + 1;

pub const FILLER_SYMBOL: &str = "_";

pub fn digit_token(d: u8) -> TokenId {
    debug_assert!(d < 10);
    d as TokenId
}

pub fn hint_token(k: usize) -> TokenId {
    debug_assert!(k < HINT_ALPHABET);
    HINT_BASE + k as TokenId
}

pub fn token_digit(id: TokenId) -> Option<u8> {
    (id < 10).then_some(id as u8)
}

pub fn token_hint(id: TokenId) -> Option<usize> {
    (HINT_BASE..FILLER).contains(&id).then(|| (id - HINT_BASE) as usize)
}

/// Fixed symbol table: digits, `+`, `=`, hints `h00`..`h101`, filler,
/// `<eos>`, `<pad>`.
#[derive(Debug)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn get() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut symbols: Vec<String> = (0..10).map(|d| d.to_string()).collect();
            symbols.push("+".into());
            symbols.push("=".into());
            symbols.extend((0..HINT_ALPHABET).map(|k| format!("h{k:02}")));
            symbols.push(FILLER_SYMBOL.into());
            symbols.push("<eos>".into());
            symbols.push("<pad>".into());
            let index = symbols
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i as TokenId))
                .collect();
            Vocab { symbols, index }
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: TokenId) -> Result<&str> {
        self.symbols
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("#{id}")))
    }

    pub fn id(&self, symbol: &str) -> Result<TokenId> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::Vocabulary(symbol.to_string()))
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Space-separated symbols to ids.
pub fn tokenize(text: &str) -> Result<Vec<TokenId>> {
    let vocab = Vocab::get();
    text.split_whitespace().map(|s| vocab.id(s)).collect()
}

pub fn detokenize(ids: &[TokenId]) -> Result<String> {
    let vocab = Vocab::get();
    let syms = ids.iter().map(|&i| vocab.symbol(i)).collect::<Result<Vec<_>>>()?;
    Ok(syms.join(" "))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AdditionExample {
    pub a_digits: Vec<u8>,
    pub b_digits: Vec<u8>,
    pub sum_digits: Vec<u8>,
}

impl AdditionExample {
    /// Builds an example from little-endian operands, computing the sum
    /// column by column.
    pub fn new(a_digits: Vec<u8>, b_digits: Vec<u8>) -> Result<Self> {
        for d in a_digits.iter().chain(&b_digits) {
            if *d > 9 {
                return Err(Error::Argument(format!("digit {d} out of range")));
            }
        }
        if a_digits.is_empty() || b_digits.is_empty() {
            return Err(Error::Argument("operands need at least one digit".into()));
        }
        let sum_digits = add_digits(&a_digits, &b_digits);
        Ok(Self {
            a_digits,
            b_digits,
            sum_digits,
        })
    }

    /// From most-significant-first decimal strings such as `"42"`.
    pub fn from_decimal(a: &str, b: &str) -> Result<Self> {
        let parse = |s: &str| -> Result<Vec<u8>> {
            s.bytes()
                .rev()
                .map(|c| {
                    c.is_ascii_digit()
                        .then_some(c - b'0')
                        .ok_or_else(|| Error::Argument(format!("not a decimal number: {s:?}")))
                })
                .collect()
        };
        Self::new(parse(a)?, parse(b)?)
    }

    pub fn operand_len(&self) -> usize {
        self.a_digits.len().max(self.b_digits.len())
    }

    /// True iff some column sum, including the incoming carry, reaches 10.
    pub fn carry_flag(&self) -> bool {
        // A carry can only enter a column after some earlier column overflowed.
        (0..self.operand_len())
            .any(|k| self.a_digits.get(k).copied().unwrap_or(0) + self.b_digits.get(k).copied().unwrap_or(0) >= 10)
    }

    /// Checks the stored sum against arbitrary-precision arithmetic.
    pub fn validate(&self) -> Result<()> {
        let a = digits_to_big(&self.a_digits);
        let b = digits_to_big(&self.b_digits);
        let s = digits_to_big(&self.sum_digits);
        if a.clone() + b.clone() != s {
            return Err(Error::Argument(format!("{a} + {b} != {s}")));
        }
        for (name, d) in [("a", &self.a_digits), ("b", &self.b_digits), ("sum", &self.sum_digits)] {
            if d.len() > 1 && d.last() == Some(&0) {
                return Err(Error::Argument(format!("operand {name} has a leading zero")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for AdditionExample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |d: &[u8]| d.iter().rev().map(|x| char::from(b'0' + x)).collect::<String>();
        write!(f, "{}+{}={}", s(&self.a_digits), s(&self.b_digits), s(&self.sum_digits))
    }
}

fn digits_to_big(d: &[u8]) -> BigUint {
    let s: String = d.iter().rev().map(|x| char::from(b'0' + x)).collect();
    BigUint::parse_bytes(s.as_bytes(), 10).unwrap_or_default()
}

fn add_digits(a: &[u8], b: &[u8]) -> Vec<u8> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n + 1);
    let mut carry = 0;
    for k in 0..n {
        let s = a.get(k).copied().unwrap_or(0) + b.get(k).copied().unwrap_or(0) + carry;
        out.push(s % 10);
        carry = s / 10;
    }
    if carry > 0 {
        out.push(carry);
    }
    strip_high_zeros(&mut out);
    out
}

fn strip_high_zeros(d: &mut Vec<u8>) {
    while d.len() > 1 && d.last() == Some(&0) {
        d.pop();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Most significant digit first.
    Standard,
    /// Least significant digit first.
    Reversed,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Standard => "standard",
            Orientation::Reversed => "reversed",
        }
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Orientation::Standard),
            "reversed" => Ok(Orientation::Reversed),
            _ => Err(Error::Configuration(format!("unknown orientation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FormatSpec {
    pub orientation: Orientation,
    pub index_hints: bool,
    pub space_augment: bool,
    pub space_prob: f64,
    pub space_max_run: usize,
    /// Render the answer with one digit more than the longer operand.
    pub pad_answer: bool,
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self {
            orientation: Orientation::Reversed,
            index_hints: true,
            space_augment: false,
            space_prob: 0.1,
            space_max_run: 3,
            pad_answer: true,
        }
    }
}

impl FormatSpec {
    pub fn hint_alphabet_size(&self) -> usize {
        HINT_ALPHABET
    }

    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.space_prob) {
            return Err(Error::Configuration(format!(
                "space_prob {} outside [0, 1]",
                self.space_prob
            )));
        }
        if self.space_max_run == 0 {
            return Err(Error::Configuration("space_max_run must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of answer digits (and hint symbols) used for `ex`.
    pub fn answer_width(&self, ex: &AdditionExample) -> usize {
        if self.pad_answer {
            ex.operand_len() + 1
        } else {
            ex.operand_len().max(ex.sum_digits.len())
        }
    }

    fn hint_for(&self, sig: usize, offset: usize, width: usize) -> usize {
        match self.orientation {
            Orientation::Reversed => offset + sig,
            Orientation::Standard => offset + width - 1 - sig,
        }
    }

    fn sig_for(&self, hint: usize, offset: usize, width: usize) -> Option<usize> {
        let rel = hint.checked_sub(offset)?;
        if rel >= width {
            return None;
        }
        Some(match self.orientation {
            Orientation::Reversed => rel,
            Orientation::Standard => width - 1 - rel,
        })
    }
}

/// A rendered example; `tokens[answer_start..]` is the answer span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<TokenId>,
    pub answer_start: usize,
}

impl Rendered {
    pub fn question(&self) -> &[TokenId] {
        &self.tokens[..self.answer_start]
    }

    pub fn answer(&self) -> &[TokenId] {
        &self.tokens[self.answer_start..]
    }

    /// Training sequence: rendered tokens followed by `<eos>`.
    pub fn with_eos(&self) -> Vec<TokenId> {
        let mut t = self.tokens.clone();
        t.push(EOS);
        t
    }

    pub fn text(&self) -> String {
        detokenize(&self.tokens).expect("rendered tokens are in the vocabulary")
    }
}

fn emit_number(out: &mut Vec<TokenId>, digits: &[u8], fmt: &FormatSpec, offset: usize, width: usize) {
    let order: Vec<usize> = match fmt.orientation {
        Orientation::Reversed => (0..digits.len()).collect(),
        Orientation::Standard => (0..digits.len()).rev().collect(),
    };
    for sig in order {
        if fmt.index_hints {
            out.push(hint_token(fmt.hint_for(sig, offset, width)));
        }
        out.push(digit_token(digits[sig]));
    }
}

/// Renders `a + b = sum` under `fmt`. With index hints, significance `k`
/// carries the same hint symbol in both operands and the answer; the hints
/// used are the consecutive window starting at `hint_offset`.
pub fn render(ex: &AdditionExample, fmt: &FormatSpec, hint_offset: usize) -> Result<Rendered> {
    let width = fmt.answer_width(ex);
    if fmt.index_hints && hint_offset + width > HINT_ALPHABET {
        return Err(Error::Capacity(format!(
            "hint window {hint_offset}..{} exceeds the {HINT_ALPHABET}-symbol alphabet",
            hint_offset + width
        )));
    }
    let mut tokens = Vec::with_capacity(4 * width + 2);
    emit_number(&mut tokens, &ex.a_digits, fmt, hint_offset, width);
    tokens.push(PLUS);
    emit_number(&mut tokens, &ex.b_digits, fmt, hint_offset, width);
    tokens.push(EQUALS);
    let answer_start = tokens.len();
    let mut answer = ex.sum_digits.clone();
    answer.resize(width.max(answer.len()), 0);
    emit_number(&mut tokens, &answer, fmt, hint_offset, width);
    Ok(Rendered {
        tokens,
        answer_start,
    })
}

/// Uniform start of a `width`-long hint window.
pub fn sample_hint_offset(width: usize, rng: &mut RngStream) -> Result<usize> {
    if width > HINT_ALPHABET {
        return Err(Error::Capacity(format!(
            "{width} hinted digits exceed the {HINT_ALPHABET}-symbol alphabet"
        )));
    }
    Ok(rng.range_inclusive(0, HINT_ALPHABET - width))
}

/// Inserts filler runs into question gaps: each gap independently with
/// probability `space_prob`, run length truncated-geometric(1/2) capped at
/// `space_max_run`. The answer span and the gap before it are untouched.
pub fn augment_spaces(r: &Rendered, fmt: &FormatSpec, rng: &mut RngStream) -> Rendered {
    if !fmt.space_augment || fmt.space_prob <= 0.0 {
        return r.clone();
    }
    let q = r.question();
    let mut tokens = Vec::with_capacity(r.tokens.len() * 2);
    for (i, &t) in q.iter().enumerate() {
        tokens.push(t);
        if i + 1 < q.len() && rng.bernoulli(fmt.space_prob) {
            let mut run = 1;
            while run < fmt.space_max_run && rng.bernoulli(0.5) {
                run += 1;
            }
            tokens.extend(std::iter::repeat_n(FILLER, run));
        }
    }
    let answer_start = tokens.len();
    tokens.extend_from_slice(r.answer());
    Rendered {
        tokens,
        answer_start,
    }
}

/// Random hint window plus augmentation, as used for training and evaluation.
pub fn render_sampled(ex: &AdditionExample, fmt: &FormatSpec, rng: &mut RngStream) -> Result<(Rendered, usize)> {
    let offset = if fmt.index_hints {
        sample_hint_offset(fmt.answer_width(ex), rng)?
    } else {
        0
    };
    let r = render(ex, fmt, offset)?;
    Ok((augment_spaces(&r, fmt, rng), offset))
}

fn uniform_number(len: usize, rng: &mut RngStream) -> Vec<u8> {
    let mut d: Vec<u8> = (0..len).map(|_| rng.below(10) as u8).collect();
    if len > 1 {
        d[len - 1] = 1 + rng.below(9) as u8;
    }
    d
}

/// Two `len`-digit operands with uniform digits and a nonzero leading digit.
pub fn sample_example_of_len(len: usize, rng: &mut RngStream) -> AdditionExample {
    let a = uniform_number(len, rng);
    let b = uniform_number(len, rng);
    AdditionExample::new(a, b).expect("sampled digits are valid")
}

/// Length uniform on `1..=max_len`, then both operands at that length.
pub fn sample_example(max_len: usize, rng: &mut RngStream) -> AdditionExample {
    assert!(max_len >= 1, "max_len must be at least 1");
    let len = rng.range_inclusive(1, max_len);
    sample_example_of_len(len, rng)
}

/// Result of parsing a rendered example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub example: AdditionExample,
    pub hint_offset: Option<usize>,
}

fn split_pairs(seg: &[TokenId], what: &str) -> Result<Vec<(usize, u8)>> {
    if seg.is_empty() || !seg.len().is_multiple_of(2) {
        return Err(Error::Parse(format!("{what}: expected hint/digit pairs")));
    }
    seg.chunks(2)
        .map(|c| match (token_hint(c[0]), token_digit(c[1])) {
            (Some(h), Some(d)) => Ok((h, d)),
            _ => Err(Error::Parse(format!("{what}: malformed hint/digit pair"))),
        })
        .collect()
}

/// Digits of one rendered number, indexed by significance.
fn number_digits(
    seg: &[TokenId],
    fmt: &FormatSpec,
    window: Option<(usize, usize)>,
    what: &str,
) -> Result<Vec<u8>> {
    let in_order: Vec<(Option<usize>, u8)> = if fmt.index_hints {
        split_pairs(seg, what)?.into_iter().map(|(h, d)| (Some(h), d)).collect()
    } else {
        seg.iter()
            .map(|&t| {
                token_digit(t)
                    .map(|d| (None, d))
                    .ok_or_else(|| Error::Parse(format!("{what}: non-digit token")))
            })
            .collect::<Result<_>>()?
    };
    if in_order.is_empty() {
        return Err(Error::Parse(format!("{what}: empty number")));
    }
    let len = in_order.len();
    let mut digits = vec![0u8; len];
    for (i, (hint, d)) in in_order.into_iter().enumerate() {
        let sig = match fmt.orientation {
            Orientation::Reversed => i,
            Orientation::Standard => len - 1 - i,
        };
        if let (Some(h), Some((offset, width))) = (hint, window) {
            if fmt.sig_for(h, offset, width) != Some(sig) {
                return Err(Error::Parse(format!("{what}: hint h{h:02} does not mark significance {sig}")));
            }
        }
        digits[sig] = d;
    }
    Ok(digits)
}

/// Hint window `(offset, width)` implied by an answer span.
fn answer_window(answer: &[TokenId], fmt: &FormatSpec) -> Result<Option<(usize, usize)>> {
    if !fmt.index_hints {
        return Ok(None);
    }
    let pairs = split_pairs(answer, "answer")?;
    let width = pairs.len();
    // The lowest hint marks significance 0 in reversed order and the top
    // significance in standard order; either way it is written first.
    let offset = pairs[0].0;
    if offset + width > HINT_ALPHABET {
        return Err(Error::Parse("answer hints leave the alphabet".into()));
    }
    Ok(Some((offset, width)))
}

fn strip_trailer(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut t: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != FILLER).collect();
    while matches!(t.last(), Some(&PAD) | Some(&EOS)) {
        t.pop();
    }
    t
}

/// Inverse of [`render`] (filler and trailing `<eos>`/`<pad>` are ignored).
/// The recovered sum is whatever the answer span says; use
/// [`AdditionExample::validate`] to check it.
pub fn parse(tokens: &[TokenId], fmt: &FormatSpec) -> Result<Parsed> {
    let t = strip_trailer(tokens);
    let plus: Vec<usize> = t.iter().enumerate().filter(|(_, &x)| x == PLUS).map(|(i, _)| i).collect();
    let eq: Vec<usize> = t.iter().enumerate().filter(|(_, &x)| x == EQUALS).map(|(i, _)| i).collect();
    let (&[p], &[e]) = (plus.as_slice(), eq.as_slice()) else {
        return Err(Error::Parse("expected exactly one '+' and one '='".into()));
    };
    if p > e {
        return Err(Error::Parse("'+' must precede '='".into()));
    }
    let answer = &t[e + 1..];
    let window = answer_window(answer, fmt)?;
    let a = number_digits(&t[..p], fmt, window, "operand a")?;
    let b = number_digits(&t[p + 1..e], fmt, window, "operand b")?;
    let mut sum = number_digits(answer, fmt, window, "answer")?;
    let operand_len = a.len().max(b.len());
    if fmt.pad_answer && sum.len() != operand_len + 1 {
        return Err(Error::Parse(format!(
            "padded answer has {} digits for {operand_len}-digit operands",
            sum.len()
        )));
    }
    strip_high_zeros(&mut sum);
    Ok(Parsed {
        example: AdditionExample {
            a_digits: a,
            b_digits: b,
            sum_digits: sum,
        },
        hint_offset: window.map(|w| w.0),
    })
}

/// Digits (by significance) of a predicted answer span, aligned through the
/// hint symbols of the gold window when hints are on. Anything that cannot
/// be aligned digit-for-digit is a parse error.
pub fn parse_answer(pred: &[TokenId], fmt: &FormatSpec, hint_offset: usize, width: usize) -> Result<Vec<u8>> {
    let t = strip_trailer(pred);
    if fmt.index_hints {
        let pairs = split_pairs(&t, "prediction")?;
        if pairs.len() != width {
            return Err(Error::Parse(format!("{} hinted digits, expected {width}", pairs.len())));
        }
        let mut digits = vec![None; width];
        for (h, d) in pairs {
            let sig = fmt
                .sig_for(h, hint_offset, width)
                .ok_or_else(|| Error::Parse(format!("hint h{h:02} outside the question's window")))?;
            if digits[sig].replace(d).is_some() {
                return Err(Error::Parse(format!("hint h{h:02} repeated")));
            }
        }
        Ok(digits.into_iter().map(|d| d.expect("every slot filled")).collect())
    } else {
        if t.len() != width {
            return Err(Error::Parse(format!("{} digits, expected {width}", t.len())));
        }
        number_digits(&t, fmt, None, "prediction")
    }
}

/// Which examples a split contains.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// `count` examples with lengths uniform on `1..=max_len`.
    Train { count: usize, max_len: usize },
    /// Exactly `n_per_length` examples at each listed length.
    Test { lengths: Vec<usize>, n_per_length: usize },
}

/// One generated example with its rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct DataLine {
    pub example: AdditionExample,
    pub rendered: Rendered,
    pub hint_offset: usize,
}

/// Generates a split. Example `i` draws from its own child stream, so the
/// output does not depend on how generation is sharded.
pub fn generate_split(spec: &SplitSpec, fmt: &FormatSpec, seed: u64) -> Result<Vec<DataLine>> {
    fmt.check()?;
    let root = RngStream::new(seed, STREAM_DATA);
    let line = |i: usize, len: Option<usize>, max_len: usize| -> Result<DataLine> {
        let mut rng = root.fork(i as u64);
        let example = match len {
            Some(l) => sample_example_of_len(l, &mut rng),
            None => sample_example(max_len, &mut rng),
        };
        let (rendered, hint_offset) = render_sampled(&example, fmt, &mut rng)?;
        Ok(DataLine {
            example,
            rendered,
            hint_offset,
        })
    };
    match spec {
        SplitSpec::Train { count, max_len } => {
            if *count == 0 || *max_len == 0 {
                return Err(Error::Argument("train split needs count >= 1 and max_len >= 1".into()));
            }
            (0..*count).map(|i| line(i, None, *max_len)).collect()
        }
        SplitSpec::Test { lengths, n_per_length } => {
            if lengths.is_empty() || *n_per_length == 0 || lengths.contains(&0) {
                return Err(Error::Argument("test split needs lengths >= 1 and n_per_length >= 1".into()));
            }
            let mut out = Vec::with_capacity(lengths.len() * n_per_length);
            for &l in lengths {
                for k in 0..*n_per_length {
                    out.push(line(out.len(), Some(l), l).map_err(|e| {
                        Error::Argument(format!("length {l}, example {k}: {e}"))
                    })?);
                }
            }
            Ok(out)
        }
    }
}

const STREAM_DATA: u64 = 0xDA7A;

/// Flat `key: value` description of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn describe(spec: &SplitSpec, fmt: &FormatSpec, seed: u64, lines: usize) -> Self {
        let mut e: Vec<(String, String)> = vec![
            ("seed".into(), seed.to_string()),
            ("orientation".into(), fmt.orientation.as_str().into()),
            ("index_hints".into(), fmt.index_hints.to_string()),
            ("hint_alphabet_size".into(), HINT_ALPHABET.to_string()),
            ("space_augment".into(), fmt.space_augment.to_string()),
            ("space_prob".into(), fmt.space_prob.to_string()),
            ("space_max_run".into(), fmt.space_max_run.to_string()),
            ("pad_answer".into(), fmt.pad_answer.to_string()),
        ];
        match spec {
            SplitSpec::Train { count, max_len } => {
                e.push(("split".into(), "train".into()));
                e.push(("count".into(), count.to_string()));
                e.push(("max_len".into(), max_len.to_string()));
            }
            SplitSpec::Test { lengths, n_per_length } => {
                e.push(("split".into(), "test".into()));
                e.push(("lengths".into(), join_list(lengths)));
                e.push(("n_per_length".into(), n_per_length.to_string()));
                e.push((
                    "max_len".into(),
                    lengths.iter().max().copied().unwrap_or(0).to_string(),
                ));
            }
        }
        e.push(("lines".into(), lines.to_string()));
        Self { entries: e }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once(':')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Parse(format!("manifest line without ':': {l:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

pub(crate) fn join_list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Paths written by [`make_split`].
#[derive(Clone, Debug)]
pub struct SplitFiles {
    pub data: PathBuf,
    pub manifest: PathBuf,
    pub lines: usize,
}

/// Writes `<dir>/<name>.txt` (one rendered example per line) and
/// `<dir>/<name>.manifest`.
pub fn make_split(spec: &SplitSpec, fmt: &FormatSpec, seed: u64, dir: &Path, name: &str) -> Result<SplitFiles> {
    let lines = generate_split(spec, fmt, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = dir.join(format!("{name}.txt"));
    let manifest = dir.join(format!("{name}.manifest"));
    let mut text = String::new();
    for l in &lines {
        text.push_str(&l.rendered.text());
        text.push('\n');
    }
    fs::write(&data, text).map_err(|e| Error::io(&data, e))?;
    let m = Manifest::describe(spec, fmt, seed, lines.len());
    fs::write(&manifest, m.to_text()).map_err(|e| Error::io(&manifest, e))?;
    Ok(SplitFiles {
        data,
        manifest,
        lines: lines.len(),
    })
}

/// Reads a dataset file back into rendered examples.
pub fn read_dataset(path: &Path) -> Result<Vec<Rendered>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let tokens = tokenize(l)?;
            let eq = tokens
                .iter()
                .position(|&t| t == EQUALS)
                .ok_or_else(|| Error::Parse(format!("{}:{}: no '='", path.display(), i + 1)))?;
            Ok(Rendered {
                tokens,
                answer_start: eq + 1,
            })
        })
        .collect()
}
