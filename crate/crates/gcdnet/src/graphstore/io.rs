//! Graph file ingestion and export.
//!
//! Text format (one file):
//!
//! ```text
//! nodes=<n> dim=<d> relations=<R>
//! features
//! <d space-separated decimals, one line per node>
//! labels
//! <0|1|-1, one line per node>
//! edges r=0
//! <src> <dst>
//! ...
//! edges r=<R-1>
//! ...
//! ```
//!
//! CSV form (a directory): `features.csv`, `labels.csv`, and one
//! `edges_r<k>.csv` per relation, all header-less.

use super::{Csr, GraphError, Label, MultiRelationGraph};
use crate::numkernel::Tensor;
use std::fmt::Write as _;
use std::path::Path;

/// Loads a graph from the text format, or from the CSV form when `path` is a
/// directory. Directed input edges are mirrored; duplicates are dropped.
pub fn load_graph(path: &Path) -> Result<MultiRelationGraph, GraphError> {
    if path.is_dir() {
        load_csv_dir(path)
    } else {
        let text = std::fs::read_to_string(path)?;
        parse_text(&text)
    }
}

/// Writes the text format. Floats use the shortest representation that
/// round-trips, so load(save(g)) reproduces the graph exactly.
pub fn save_graph(g: &MultiRelationGraph, path: &Path) -> Result<(), GraphError> {
    let n = g.n_nodes();
    let d = g.feature_dim();
    let mut out = String::new();
    let _ = writeln!(out, "nodes={} dim={} relations={}", n, d, g.n_relations());
    let _ = writeln!(out, "features");
    let data = g.features().data();
    for i in 0..n {
        let row: Vec<String> = (0..d).map(|j| format!("{}", data[i * d + j])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    let _ = writeln!(out, "labels");
    for l in g.labels() {
        let _ = writeln!(out, "{}", l.code());
    }
    for r in 0..g.n_relations() {
        let _ = writeln!(out, "edges r={}", r);
        // each undirected edge written once, as src <= dst
        for i in 0..n {
            for &j in g.neighbors(i, r) {
                if i <= j {
                    let _ = writeln!(out, "{} {}", i, j);
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { inner: text.lines().enumerate() }
    }

    /// Next non-empty line with its 1-based number.
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            let t = line.trim();
            if !t.is_empty() {
                return Some((i + 1, t));
            }
        }
        None
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse { line, msg: msg.into() }
}

fn parse_text(text: &str) -> Result<MultiRelationGraph, GraphError> {
    let mut lines = Lines::new(text);

    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut n = None;
    let mut d = None;
    let mut r = None;
    for part in header.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| parse_err(hline, format!("expected key=value, got '{part}'")))?;
        let value: usize = value
            .parse()
            .map_err(|_| parse_err(hline, format!("invalid {key} value '{value}'")))?;
        match key {
            "nodes" => n = Some(value),
            "dim" => d = Some(value),
            "relations" => r = Some(value),
            _ => return Err(parse_err(hline, format!("unknown header key '{key}'"))),
        }
    }
    let n = n.ok_or_else(|| parse_err(hline, "header missing nodes="))?;
    let d = d.ok_or_else(|| parse_err(hline, "header missing dim="))?;
    let n_rel = r.ok_or_else(|| parse_err(hline, "header missing relations="))?;
    if n_rel == 0 {
        return Err(parse_err(hline, "relations must be >= 1"));
    }

    let (l, section) = lines.next().ok_or_else(|| parse_err(hline, "missing features section"))?;
    if section != "features" {
        return Err(parse_err(l, format!("expected 'features', got '{section}'")));
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let (l, row) = lines.next().ok_or_else(|| parse_err(0, "unexpected end of features"))?;
        let vals: Result<Vec<f64>, _> = row.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| parse_err(l, format!("invalid feature value: {e}")))?;
        if vals.len() != d {
            return Err(parse_err(l, format!("expected {d} features, got {}", vals.len())));
        }
        data.extend(vals);
    }

    let (l, section) = lines.next().ok_or_else(|| parse_err(0, "missing labels section"))?;
    if section != "labels" {
        return Err(parse_err(l, format!("expected 'labels', got '{section}'")));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (l, row) = lines.next().ok_or_else(|| parse_err(0, "unexpected end of labels"))?;
        let code: i64 = row
            .parse()
            .map_err(|_| parse_err(l, format!("invalid label '{row}'")))?;
        let label = Label::from_code(code)
            .ok_or_else(|| parse_err(l, format!("label must be -1, 0 or 1, got {code}")))?;
        labels.push(label);
    }

    let mut adjacency = Vec::with_capacity(n_rel);
    let mut pending = lines.next();
    for rel in 0..n_rel {
        let (l, section) =
            pending.ok_or_else(|| parse_err(0, format!("missing 'edges r={rel}' section")))?;
        let want = format!("edges r={rel}");
        if section != want {
            return Err(parse_err(l, format!("expected '{want}', got '{section}'")));
        }
        let mut edges = Vec::new();
        loop {
            pending = lines.next();
            let Some((l, row)) = pending else { break };
            if row.starts_with("edges ") {
                break;
            }
            let mut it = row.split_whitespace();
            let (Some(src), Some(dst), None) = (it.next(), it.next(), it.next()) else {
                return Err(parse_err(l, format!("expected 'src dst', got '{row}'")));
            };
            let src: usize =
                src.parse().map_err(|_| parse_err(l, format!("invalid node id '{src}'")))?;
            let dst: usize =
                dst.parse().map_err(|_| parse_err(l, format!("invalid node id '{dst}'")))?;
            if src >= n || dst >= n {
                return Err(GraphError::Validation(format!(
                    "line {l}: edge ({src}, {dst}) references a node >= {n}"
                )));
            }
            edges.push((src, dst));
        }
        adjacency.push(Csr::from_edges(n, &edges));
    }
    if let Some((l, extra)) = pending {
        return Err(parse_err(l, format!("unexpected trailing content '{extra}'")));
    }

    MultiRelationGraph::new(Tensor::from_vec(vec![n, d], data), labels, adjacency)
}

fn load_csv_dir(dir: &Path) -> Result<MultiRelationGraph, GraphError> {
    let features_path = dir.join("features.csv");
    let text = std::fs::read_to_string(&features_path)?;
    let mut data = Vec::new();
    let mut d = None;
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse()).collect();
        let vals = vals.map_err(|e| parse_err(i + 1, format!("features.csv: {e}")))?;
        match d {
            None => d = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(parse_err(
                    i + 1,
                    format!("features.csv: expected {d} columns, got {}", vals.len()),
                ))
            }
            _ => {}
        }
        data.extend(vals);
        n += 1;
    }
    let d = d.ok_or_else(|| parse_err(1, "features.csv is empty"))?;

    let labels_text = std::fs::read_to_string(dir.join("labels.csv"))?;
    let mut labels = Vec::with_capacity(n);
    for (i, line) in labels_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let code: i64 =
            line.parse().map_err(|_| parse_err(i + 1, format!("labels.csv: invalid '{line}'")))?;
        let label = Label::from_code(code)
            .ok_or_else(|| parse_err(i + 1, format!("labels.csv: label must be -1, 0 or 1")))?;
        labels.push(label);
    }

    let mut adjacency = Vec::new();
    for rel in 0.. {
        let path = dir.join(format!("edges_r{rel}.csv"));
        if !path.exists() {
            break;
        }
        let text = std::fs::read_to_string(&path)?;
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (src, dst) = line
                .split_once(',')
                .ok_or_else(|| parse_err(i + 1, format!("edges_r{rel}.csv: expected 'src,dst'")))?;
            let src: usize = src
                .trim()
                .parse()
                .map_err(|_| parse_err(i + 1, format!("edges_r{rel}.csv: invalid id '{src}'")))?;
            let dst: usize = dst
                .trim()
                .parse()
                .map_err(|_| parse_err(i + 1, format!("edges_r{rel}.csv: invalid id '{dst}'")))?;
            if src >= n || dst >= n {
                return Err(GraphError::Validation(format!(
                    "edges_r{rel}.csv line {}: edge ({src}, {dst}) references a node >= {n}",
                    i + 1
                )));
            }
            edges.push((src, dst));
        }
        adjacency.push(Csr::from_edges(n, &edges));
    }
    if adjacency.is_empty() {
        return Err(GraphError::Validation(format!(
            "no edges_r0.csv found in {}",
            dir.display()
        )));
    }

    MultiRelationGraph::new(Tensor::from_vec(vec![n, d], data), labels, adjacency)
}
