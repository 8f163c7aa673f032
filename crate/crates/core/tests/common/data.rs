//! Independent oracle over generated data: decimal strings are rebuilt from
//! the raw token stream and checked with big-integer arithmetic, then the
//! library's parser and tokenizer must agree.

use num_bigint::BigUint;

use lengen::datagen::{
    detokenize, generate_split, parse, render, token_digit, token_hint, tokenize, FormatSpec, Orientation,
    SplitSpec, EQUALS, FILLER, PLUS,
};

/// Every combination of orientation, hints and augmentation.
pub fn formats() -> Vec<FormatSpec> {
    let mut out = Vec::new();
    for orientation in [Orientation::Reversed, Orientation::Standard] {
        for index_hints in [true, false] {
            for space_augment in [false, true] {
                out.push(FormatSpec {
                    orientation,
                    index_hints,
                    space_augment,
                    space_prob: 0.3,
                    ..FormatSpec::default()
                });
            }
        }
    }
    out
}

fn big(msd_first: &str) -> BigUint {
    BigUint::parse_bytes(msd_first.as_bytes(), 10).expect("decimal digits")
}

/// Reads one number as a most-significant-first string plus its hints,
/// listed by significance.
fn read_number(seg: &[u32], fmt: &FormatSpec) -> Result<(String, Vec<usize>), String> {
    let mut digits = Vec::new();
    let mut hints = Vec::new();
    let mut pending = None;
    for &t in seg {
        if let Some(h) = token_hint(t) {
            if !fmt.index_hints || pending.replace(h).is_some() {
                return Err("unexpected hint".into());
            }
        } else if let Some(d) = token_digit(t) {
            if fmt.index_hints {
                hints.push(pending.take().ok_or("digit without hint")?);
            }
            digits.push(char::from(b'0' + d));
        } else {
            return Err(format!("token {t} inside a number"));
        }
    }
    if pending.is_some() || digits.is_empty() {
        return Err("malformed number".into());
    }
    if fmt.orientation == Orientation::Reversed {
        digits.reverse();
        hints.reverse();
    }
    // Both lists are now most significant first; flip hints to significance order.
    hints.reverse();
    Ok((digits.into_iter().collect(), hints))
}

fn check_line(tokens: &[u32], answer_start: usize, fmt: &FormatSpec) -> Result<(), String> {
    if tokens[answer_start..].contains(&FILLER) {
        return Err("filler inside the answer".into());
    }
    let plain: Vec<u32> = tokens.iter().copied().filter(|&t| t != FILLER).collect();
    let p = plain.iter().position(|&t| t == PLUS).ok_or("no '+'")?;
    let e = plain.iter().position(|&t| t == EQUALS).ok_or("no '='")?;
    let (a, ha) = read_number(&plain[..p], fmt)?;
    let (b, hb) = read_number(&plain[p + 1..e], fmt)?;
    let (s, hs) = read_number(&plain[e + 1..], fmt)?;
    if big(&a) + big(&b) != big(&s) {
        return Err(format!("{a} + {b} != {s}"));
    }
    if a.len() != b.len() || s.len() != a.len() + 1 {
        return Err(format!("widths {} {} {}", a.len(), b.len(), s.len()));
    }
    for n in [&a, &b] {
        if n.len() > 1 && n.starts_with('0') {
            return Err(format!("operand {n} has a leading zero"));
        }
    }
    if fmt.index_hints {
        if ha[..] != hs[..ha.len()] || hb[..] != hs[..hb.len()] {
            return Err("hint symbols differ across numbers".into());
        }
        let mut sorted = hs.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err("hints are not a consecutive window".into());
        }
    }
    Ok(())
}

/// Generates `total` examples spread over every format and checks each one.
/// Returns (examples checked, failure messages).
pub fn oracle(total: usize, seed: u64) -> (usize, Vec<String>) {
    let fmts = formats();
    let per = total / fmts.len();
    let mut failures = Vec::new();
    let mut checked = 0;
    for (i, fmt) in fmts.iter().enumerate() {
        let lines = generate_split(&SplitSpec::Train { count: per, max_len: 30 }, fmt, seed + i as u64)
            .expect("generation succeeds");
        for (k, line) in lines.iter().enumerate() {
            checked += 1;
            let r = &line.rendered;
            let mut fail = |what: String| failures.push(format!("format {i} line {k}: {what}"));
            if let Err(e) = check_line(&r.tokens, r.answer_start, fmt) {
                fail(e);
                continue;
            }
            if let Err(e) = line.example.validate() {
                fail(e.to_string());
            }
            match parse(&r.tokens, fmt) {
                Ok(p) if p.example == line.example => {}
                Ok(p) => fail(format!("parsed {} instead of {}", p.example, line.example)),
                Err(e) => fail(format!("parse: {e}")),
            }
            let stripped: Vec<u32> = r.tokens.iter().copied().filter(|&t| t != FILLER).collect();
            match render(&line.example, fmt, line.hint_offset) {
                Ok(plain) if plain.tokens == stripped => {}
                _ => fail("stripping filler does not give the plain rendering".into()),
            }
            match detokenize(&r.tokens).and_then(|s| tokenize(&s)) {
                Ok(t) if t == r.tokens => {}
                _ => fail("text round trip changed the tokens".into()),
            }
        }
    }
    (checked, failures)
}
