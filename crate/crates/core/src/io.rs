//! Tab-separated inputs and CSV outputs.
//!
//! Inputs skip blank lines and lines starting with `#`. Every CSV written
//! here starts with a `# seed=<n>` comment followed by a header row.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;

fn records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| (i + 1, l.split('\t').map(|f| f.trim().to_string()).collect()))
        .collect())
}

fn field<'a>(path: &Path, line: usize, fields: &'a [String], i: usize) -> Result<&'a str> {
    fields.get(i).map(String::as_str).ok_or_else(|| {
        Error::format(
            path,
            format!("line {line}: expected at least {} fields", i + 1),
        )
    })
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(path, format!("line {line}: invalid {what} {s:?}")))
}

/// Edge list `node_a<TAB>node_b`. Nodes are registered in order of first
/// appearance; duplicate edges collapse.
pub fn read_edge_list(path: &Path) -> Result<Graph> {
    let mut pairs = Vec::new();
    for (line, f) in records(path)? {
        let a = field(path, line, &f, 0)?.to_string();
        let b = field(path, line, &f, 1)?.to_string();
        if a == b {
            return Err(Error::format(
                path,
                format!("line {line}: self-loop on {a:?}"),
            ));
        }
        pairs.push((a, b));
    }
    Graph::from_labeled_pairs(&pairs).map_err(|e| Error::format(path, e.to_string()))
}

/// Edge list with a node registry fixed in advance; isolated nodes are kept.
pub fn read_edge_list_with_nodes(path: &Path, nodes: &[String]) -> Result<Graph> {
    let index: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut g = Graph::new(nodes.to_vec());
    for (line, f) in records(path)? {
        let mut ends = [0usize; 2];
        for (k, end) in ends.iter_mut().enumerate() {
            let label = field(path, line, &f, k)?;
            *end = *index.get(label).ok_or_else(|| {
                Error::format(path, format!("line {line}: unknown node {label:?}"))
            })?;
        }
        g.add_edge(ends[0], ends[1])
            .map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
    }
    Ok(g)
}

pub fn write_edge_list(g: &Graph, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (a, b) in g.edges() {
        out.push_str(&format!("{}\t{}\n", g.labels()[a], g.labels()[b]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `node<TAB>group` lines mapped onto the graph's node order. Groups are
/// non-negative integers; every node must be assigned.
pub fn read_partition(path: &Path, g: &Graph) -> Result<Vec<usize>> {
    let mut groups = vec![None; g.node_count()];
    for (line, f) in records(path)? {
        let label = field(path, line, &f, 0)?;
        let group: usize = parse(path, line, field(path, line, &f, 1)?, "group")?;
        let i = g
            .node_index(label)
            .ok_or_else(|| Error::format(path, format!("line {line}: unknown node {label:?}")))?;
        groups[i] = Some(group);
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, g_)| {
            g_.ok_or_else(|| Error::format(path, format!("node {:?} has no group", g.labels()[i])))
        })
        .collect()
}

pub fn write_partition(labels: &[String], groups: &[usize], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (l, g) in labels.iter().zip(groups) {
        out.push_str(&format!("{l}\t{g}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `node<TAB>0|1` binary labels for a subset of nodes, in file order.
pub fn read_node_labels(path: &Path, g: &Graph) -> Result<Vec<(usize, bool)>> {
    let mut out = Vec::new();
    for (line, f) in records(path)? {
        let label = field(path, line, &f, 0)?;
        let i = g
            .node_index(label)
            .ok_or_else(|| Error::format(path, format!("line {line}: unknown node {label:?}")))?;
        let v = match field(path, line, &f, 1)? {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::format(
                    path,
                    format!("line {line}: label must be 0 or 1, got {other:?}"),
                ))
            }
        };
        out.push((i, v));
    }
    Ok(out)
}

/// One line of an antonym-pair file.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisRecord {
    pub pair_id: u64,
    pub word_p: String,
    pub word_q: String,
    pub freq_p: u64,
    pub freq_q: u64,
}

/// `pair_id<TAB>word_p<TAB>word_q<TAB>freq_p<TAB>freq_q`.
pub fn read_axis_pairs(path: &Path) -> Result<Vec<AxisRecord>> {
    records(path)?
        .into_iter()
        .map(|(line, f)| {
            Ok(AxisRecord {
                pair_id: parse(path, line, field(path, line, &f, 0)?, "pair id")?,
                word_p: field(path, line, &f, 1)?.to_string(),
                word_q: field(path, line, &f, 2)?.to_string(),
                freq_p: parse(path, line, field(path, line, &f, 3)?, "frequency")?,
                freq_q: parse(path, line, field(path, line, &f, 4)?, "frequency")?,
            })
        })
        .collect()
}

/// `word<TAB>rating`.
pub fn read_ratings(path: &Path) -> Result<HashMap<String, f64>> {
    let mut out = HashMap::new();
    for (line, f) in records(path)? {
        let word = field(path, line, &f, 0)?.to_string();
        let r: f64 = parse(path, line, field(path, line, &f, 1)?, "rating")?;
        if !r.is_finite() {
            return Err(Error::format(
                path,
                format!("line {line}: non-finite rating"),
            ));
        }
        out.insert(word, r);
    }
    Ok(out)
}

/// Buffered CSV text with a seed comment and a fixed header.
pub struct CsvWriter {
    columns: usize,
    text: String,
}

impl CsvWriter {
    pub fn new(seed: u64, header: &[&str]) -> Self {
        CsvWriter {
            columns: header.len(),
            text: format!("# seed={seed}\n{}\n", header.join(",")),
        }
    }

    /// Appends a row; panics on a column-count mismatch, which is a
    /// programming error.
    pub fn row(&mut self, fields: &[&dyn Display]) {
        assert_eq!(fields.len(), self.columns, "csv row width");
        let cells: Vec<String> = fields.iter().map(|f| escape(&f.to_string())).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    /// Adds a trailing comment line.
    pub fn comment(&mut self, text: &str) {
        self.text.push_str("# ");
        self.text.push_str(text);
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.text).map_err(|e| Error::io(path, e))
    }
}

fn escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parses a CSV written by [`CsvWriter`] into its header and rows.
/// Quoted fields are not supported.
pub fn read_simple_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}
