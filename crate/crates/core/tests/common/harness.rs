//! Small experiment configs and readers for run artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lengen::harness::ExperimentConfig;

/// A run that trains in a few seconds: width 32, 2-digit training data,
/// evaluation on lengths 1..=3.
pub fn tiny_config(steps: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    let m = &mut c.model;
    m.d_model = 32;
    m.n_heads = 2;
    m.d_ff = 64;
    m.max_seq_len = 64;
    let t = &mut c.train;
    t.steps = steps;
    t.batch_size = 8;
    t.warmup_steps = steps / 10;
    t.lr_peak = 3e-3;
    t.eval_every = steps / 4;
    t.checkpoint_every = steps / 2;
    c.data.max_train_len = 2;
    c.data.train_count = 200;
    c.data.valid_count = 16;
    c.eval.lengths = vec![1, 2, 3];
    c.eval.n_per_length = 10;
    c
}

/// Parses `header` CSV text into rows of named fields.
pub fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

/// Attribute `name` of the first tag in `s` that contains it.
pub fn attr<'a>(s: &'a str, name: &str) -> &'a str {
    let key = format!("{name}=\"");
    let start = s.find(&key).unwrap_or_else(|| panic!("no {name}")) + key.len();
    &s[start..start + s[start..].find('"').unwrap()]
}

pub fn num(s: &str, name: &str) -> f64 {
    attr(s, name).parse().unwrap()
}

/// Series of a line plot mapped back from pixels to data coordinates.
pub fn read_back_series(svg: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let area = &svg[svg.find("class=\"plot-area\"").unwrap()..];
    let area = &area[..area.find("/>").unwrap()];
    let (x0, y0, w, h) = (num(area, "x"), num(area, "y"), num(area, "width"), num(area, "height"));
    let (xmin, xmax) = (num(area, "data-x-min"), num(area, "data-x-max"));
    let (ymin, ymax) = (num(area, "data-y-min"), num(area, "data-y-max"));
    svg.split("<polyline class=\"series\"")
        .skip(1)
        .map(|tag| {
            let tag = &tag[..tag.find("/>").unwrap()];
            let points = attr(tag, "points")
                .split_whitespace()
                .map(|p| {
                    let (px, py) = p.split_once(',').unwrap();
                    let (px, py): (f64, f64) = (px.parse().unwrap(), py.parse().unwrap());
                    (
                        xmin + (px - x0) / w * (xmax - xmin),
                        ymin + (y0 + h - py) / h * (ymax - ymin),
                    )
                })
                .collect();
            (attr(tag, "data-label").to_string(), points)
        })
        .collect()
}
