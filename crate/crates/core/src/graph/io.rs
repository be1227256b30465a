//! Plain-text dataset formats.
//!
//! WebKB text: node lines `id<TAB>f1,f2,...,fk<TAB>label`, edge lines
//! `src<TAB>dst`. Node ids must be exactly `0..n` in any order. An optional
//! header line (first line whose id field is not an integer) is skipped.
//!
//! CSV: headerless. Features one row per node in id order, labels one
//! integer per row, edges `src,dst`.
//!
//! Edges are read as undirected and symmetrised; self-loops are added on
//! construction (see [`Graph::from_undirected`]).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{CsaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Webkb,
    Csv,
}

/// JSON manifest pointing at a dataset's files.
///
/// `paths` keys are `nodes` / `edges` for WebKB text and `features` /
/// `labels` / `edges` for CSV. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub format: DatasetFormat,
    pub paths: std::collections::BTreeMap<String, PathBuf>,
    pub class_count: usize,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CsaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn path(&self, base: &Path, key: &str) -> Result<PathBuf> {
        let p = self
            .paths
            .get(key)
            .ok_or_else(|| CsaError::invalid(format!("manifest `{}` has no `{key}` path", self.name)))?;
        Ok(if p.is_absolute() { p.clone() } else { base.join(p) })
    }

    /// Loads the dataset, resolving relative paths against `base`.
    pub fn load(&self, base: &Path) -> Result<Graph> {
        let g = match self.format {
            DatasetFormat::Webkb => load_webkb_text(&self.path(base, "nodes")?, &self.path(base, "edges")?)?,
            DatasetFormat::Csv => load_edgelist_csv(
                &self.path(base, "features")?,
                &self.path(base, "labels")?,
                &self.path(base, "edges")?,
            )?,
        };
        if g.class_count() > self.class_count {
            return Err(CsaError::invalid(format!(
                "dataset `{}` has labels up to {} but manifest declares {} classes",
                self.name,
                g.class_count() - 1,
                self.class_count
            )));
        }
        Graph::from_undirected(
            self.name.clone(),
            g.features().clone(),
            g.labels().to_vec(),
            self.class_count,
            &g.undirected_pairs(),
        )
    }
}

/// Reads a manifest and loads the dataset it describes.
pub fn load_manifest(path: &Path) -> Result<Graph> {
    let manifest = DatasetManifest::read(path)?;
    manifest.load(path.parent().unwrap_or(Path::new(".")))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CsaError::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CsaError {
    CsaError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-empty lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_floats(path: &Path, line: usize, field: &str, sep: char) -> Result<Vec<f64>> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(sep)
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("bad feature value `{tok}`")))
        })
        .collect()
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_edge_lines(path: &Path, text: &str, n: usize, sep: char, allow_header: bool) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (k, (line_no, line)) in lines(text).enumerate() {
        let mut fields = line.split(sep).map(str::trim);
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            return Err(parse_err(path, line_no, "expected two node ids"));
        };
        let (s, d) = match (a.parse::<usize>(), b.parse::<usize>()) {
            (Ok(s), Ok(d)) => (s, d),
            _ if allow_header && k == 0 => continue,
            _ => return Err(parse_err(path, line_no, format!("bad node ids `{a}`, `{b}`"))),
        };
        for id in [s, d] {
            if id >= n {
                return Err(parse_err(path, line_no, format!("unknown node id {id}")));
            }
        }
        pairs.push((s, d));
    }
    Ok(pairs)
}

pub fn load_webkb_text(node_file: &Path, edge_file: &Path) -> Result<Graph> {
    let text = read(node_file)?;
    let mut rows: Vec<Option<(Vec<f64>, usize)>> = Vec::new();
    let mut width: Option<usize> = None;
    for (k, (line_no, line)) in lines(&text).enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                node_file,
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id = match fields[0].trim().parse::<usize>() {
            Ok(id) => id,
            Err(_) if k == 0 => continue,
            Err(_) => return Err(parse_err(node_file, line_no, format!("bad node id `{}`", fields[0]))),
        };
        let feats = parse_floats(node_file, line_no, fields[1], ',')?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(parse_err(
                    node_file,
                    line_no,
                    format!("ragged feature row: {} values, expected {w}", feats.len()),
                ))
            }
            Some(_) => {}
        }
        let label = fields[2]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(node_file, line_no, format!("unparsable label `{}`", fields[2])))?;
        if id >= rows.len() {
            rows.resize(id + 1, None);
        }
        if rows[id].is_some() {
            return Err(parse_err(node_file, line_no, format!("duplicate node id {id}")));
        }
        rows[id] = Some((feats, label));
    }
    if let Some(missing) = rows.iter().position(Option::is_none) {
        return Err(parse_err(
            node_file,
            0,
            format!("node ids are not contiguous: {missing} missing"),
        ));
    }
    let n = rows.len();
    let width = width.unwrap_or(0);
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for (feats, label) in rows.into_iter().flatten() {
        data.extend(feats);
        labels.push(label);
    }
    let pairs = parse_edge_lines(edge_file, &read(edge_file)?, n, '\t', true)?;
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Graph::from_undirected(
        stem(node_file),
        Tensor::new(vec![n, width], data)?,
        labels,
        class_count,
        &pairs,
    )
}

pub fn load_edgelist_csv(features_csv: &Path, labels_csv: &Path, edges_csv: &Path) -> Result<Graph> {
    let text = read(features_csv)?;
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    let mut n = 0;
    for (line_no, line) in lines(&text) {
        let feats = parse_floats(features_csv, line_no, line, ',')?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(parse_err(
                    features_csv,
                    line_no,
                    format!("ragged feature row: {} values, expected {w}", feats.len()),
                ))
            }
            Some(_) => {}
        }
        data.extend(feats);
        n += 1;
    }
    let text = read(labels_csv)?;
    let mut labels = Vec::with_capacity(n);
    for (line_no, line) in lines(&text) {
        let label = line
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(labels_csv, line_no, format!("unparsable label `{line}`")))?;
        labels.push(label);
    }
    if labels.len() != n {
        return Err(parse_err(
            labels_csv,
            labels.len(),
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    let pairs = parse_edge_lines(edges_csv, &read(edges_csv)?, n, ',', false)?;
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Graph::from_undirected(
        stem(features_csv),
        Tensor::new(vec![n, width.unwrap_or(0)], data)?,
        labels,
        class_count,
        &pairs,
    )
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CsaError::io(path, e))
}

fn join_row(row: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("writing to a String");
    }
    s
}

/// Writes the WebKB text format. Each undirected edge is written once.
pub fn write_webkb_text(g: &Graph, node_file: &Path, edge_file: &Path) -> Result<()> {
    let mut nodes = String::new();
    for v in 0..g.num_nodes() {
        writeln!(nodes, "{v}\t{}\t{}", join_row(g.features().row(v)), g.labels()[v]).expect("writing to a String");
    }
    write(node_file, &nodes)?;
    let mut edges = String::new();
    for (u, v) in g.undirected_pairs() {
        writeln!(edges, "{u}\t{v}").expect("writing to a String");
    }
    write(edge_file, &edges)
}

pub fn write_edgelist_csv(g: &Graph, features_csv: &Path, labels_csv: &Path, edges_csv: &Path) -> Result<()> {
    let mut feats = String::new();
    let mut labels = String::new();
    for v in 0..g.num_nodes() {
        writeln!(feats, "{}", join_row(g.features().row(v))).expect("writing to a String");
        writeln!(labels, "{}", g.labels()[v]).expect("writing to a String");
    }
    write(features_csv, &feats)?;
    write(labels_csv, &labels)?;
    let mut edges = String::new();
    for (u, v) in g.undirected_pairs() {
        writeln!(edges, "{u},{v}").expect("writing to a String");
    }
    write(edges_csv, &edges)
}
