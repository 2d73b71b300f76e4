//! Per-concept node embedding tensors and their on-disk format.
//!
//! A table is stored as a TOML header plus a raw data file of little-endian
//! `f64`, concept-major then row-major (`concepts × nodes × d` values).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FORMAT_NAME: &str = "biaxis-embeddings";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    d: usize,
    nodes: Vec<String>,
    concepts: Vec<String>,
    matrices: Vec<Matrix>,
    concept_index: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d: usize,
    nodes: Vec<String>,
    concepts: Vec<String>,
    data: String,
}

fn unique(labels: &[String], what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate {what} label {l:?}")));
        }
    }
    Ok(())
}

impl EmbeddingTable {
    pub fn new(
        d: usize,
        nodes: Vec<String>,
        concepts: Vec<String>,
        matrices: Vec<Matrix>,
    ) -> Result<Self> {
        unique(&nodes, "node")?;
        unique(&concepts, "concept")?;
        if matrices.len() != concepts.len() {
            return Err(Error::Dimension(format!(
                "{} matrices for {} concepts",
                matrices.len(),
                concepts.len()
            )));
        }
        for (c, m) in concepts.iter().zip(&matrices) {
            if m.shape() != (nodes.len(), d) {
                return Err(Error::Dimension(format!(
                    "concept {c:?} has a {}x{} matrix, expected {}x{d}",
                    m.rows(),
                    m.cols(),
                    nodes.len()
                )));
            }
        }
        let concept_index = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Ok(EmbeddingTable {
            d,
            nodes,
            concepts,
            matrices,
            concept_index,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn matrix(&self, concept: usize) -> &Matrix {
        &self.matrices[concept]
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn concept_index(&self, label: &str) -> Option<usize> {
        self.concept_index.get(label).copied()
    }

    /// Matrix for a concept label, or an error naming the concept.
    pub fn get(&self, label: &str) -> Result<&Matrix> {
        self.concept_index(label)
            .map(|i| &self.matrices[i])
            .ok_or_else(|| Error::InvalidInput(format!("no embeddings for concept {label:?}")))
    }

    /// Node-averaged vector of a concept.
    pub fn mean_vector(&self, concept: usize) -> Vec<f64> {
        let m = &self.matrices[concept];
        let n = m.rows().max(1) as f64;
        m.column_sums().into_iter().map(|s| s / n).collect()
    }

    /// Reorders the rows of every matrix so that row `i` belongs to
    /// `order[i]`, a permutation of the node labels.
    pub fn align_nodes(&self, order: &[String]) -> Result<EmbeddingTable> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        if order.len() != self.nodes.len() {
            return Err(Error::InvalidInput(format!(
                "graph has {} nodes, embedding table has {}",
                order.len(),
                self.nodes.len()
            )));
        }
        let rows = order
            .iter()
            .map(|l| {
                index.get(l.as_str()).copied().ok_or_else(|| {
                    Error::InvalidInput(format!("node {l:?} missing from embedding table"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingTable::new(
            self.d,
            order.to_vec(),
            self.concepts.clone(),
            self.matrices.iter().map(|m| m.select_rows(&rows)).collect(),
        )
    }

    /// Writes the header to `header_path` and the data next to it
    /// (same stem, `.bin` extension).
    pub fn save(&self, header_path: &Path) -> Result<()> {
        let data_path = header_path.with_extension("bin");
        let data_name = data_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::format(header_path, "header path has no file name"))?;
        let header = Header {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            d: self.d,
            nodes: self.nodes.clone(),
            concepts: self.concepts.clone(),
            data: data_name,
        };
        let text =
            toml::to_string(&header).map_err(|e| Error::format(header_path, e.to_string()))?;
        std::fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;

        let mut bytes = Vec::with_capacity(8 * self.d * self.nodes.len() * self.concepts.len());
        for m in &self.matrices {
            for v in m.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
        let header: Header =
            toml::from_str(&text).map_err(|e| Error::format(header_path, e.to_string()))?;
        if header.format != FORMAT_NAME {
            return Err(Error::format(
                header_path,
                format!("unknown format {:?}", header.format),
            ));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::format(
                header_path,
                format!("unsupported version {}", header.version),
            ));
        }
        let data_path: PathBuf = header_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&header.data);
        let bytes = std::fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let per_concept = header.nodes.len() * header.d;
        let expected = 8 * per_concept * header.concepts.len();
        if bytes.len() != expected {
            return Err(Error::format(
                &data_path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                &data_path,
                format!("non-finite value {} at position {i}", values[i]),
            ));
        }
        let matrices = values
            .chunks(per_concept.max(1))
            .take(header.concepts.len())
            .map(|c| Matrix::from_vec(header.nodes.len(), header.d, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let matrices = if per_concept == 0 {
            vec![Matrix::zeros(header.nodes.len(), header.d); header.concepts.len()]
        } else {
            matrices
        };
        EmbeddingTable::new(header.d, header.nodes, header.concepts, matrices)
            .map_err(|e| Error::format(header_path, e.to_string()))
    }
}
