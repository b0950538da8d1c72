//! Class word vectors in the common `name v1 v2 ...` text layout.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

/// Semantic vector per class id, all of length `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTable {
    pub dim: usize,
    pub vectors: BTreeMap<u32, Vec<f64>>,
}

impl SemanticTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class: u32, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dataset(format!(
                "class {class}: vector has {} dims, table has {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("class {class}: non-finite semantic vector")));
        }
        self.vectors.insert(class, vector);
        Ok(())
    }

    pub fn get(&self, class: u32) -> Option<&[f64]> {
        self.vectors.get(&class).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Renders one `name v1 ... vd` line per class in id order.
    pub fn to_text(&self, class_names: &BTreeMap<u32, String>) -> Result<String> {
        let mut out = String::new();
        for (class, vector) in &self.vectors {
            let name = class_names
                .get(class)
                .ok_or_else(|| Error::Dataset(format!("class {class} has no name")))?;
            out.push_str(name);
            for v in vector {
                write!(out, " {v}").expect("writing to String");
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Parses word vectors keyed by name. Later duplicates replace earlier ones.
pub fn parse_word_vectors(text: &str) -> Result<(usize, HashMap<String, Vec<f64>>)> {
    let mut dim = None;
    let mut table = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(name) = fields.next() else { continue };
        let vector = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::Dataset(format!("semantic line {}: bad number {f:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(Error::Dataset(format!(
                    "semantic line {}: {} values, expected {d}",
                    lineno + 1,
                    vector.len()
                )))
            }
            _ => {}
        }
        if vector.is_empty() {
            return Err(Error::Dataset(format!("semantic line {}: no values", lineno + 1)));
        }
        if table.insert(name.to_string(), vector).is_some() {
            warn!("duplicate semantic vector for {name:?}; keeping the last one");
        }
    }
    Ok((dim.unwrap_or(0), table))
}

/// Parses `missing<TAB>substitute` lines.
pub fn parse_synonyms(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (missing, substitute) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("synonym line {}: expected name<TAB>substitute", lineno + 1))
        })?;
        map.insert(missing.trim().to_string(), substitute.trim().to_string());
    }
    Ok(map)
}

/// Resolves every class name against the word vectors, consulting the
/// synonym map for names absent from the vocabulary.
pub fn resolve_semantics(
    text: &str,
    class_names: &BTreeMap<u32, String>,
    synonyms: &HashMap<String, String>,
) -> Result<SemanticTable> {
    let (dim, vectors) = parse_word_vectors(text)?;
    let mut table = SemanticTable::new(dim);
    let mut missing = Vec::new();
    for (&class, name) in class_names {
        let hit = vectors
            .get(name)
            .or_else(|| synonyms.get(name).and_then(|alt| vectors.get(alt)));
        match hit {
            Some(v) => table.insert(class, v.clone())?,
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "no semantic vector for classes: {}",
            missing.join(", ")
        )));
    }
    Ok(table)
}

pub fn load_semantics(
    path: impl AsRef<Path>,
    class_names: &BTreeMap<u32, String>,
    synonyms: Option<&Path>,
) -> Result<SemanticTable> {
    let text = std::fs::read_to_string(path)?;
    let synonyms = match synonyms {
        Some(p) => parse_synonyms(&std::fs::read_to_string(p)?)?,
        None => HashMap::new(),
    };
    resolve_semantics(&text, class_names, &synonyms)
}

pub fn write_semantics(
    path: impl AsRef<Path>,
    table: &SemanticTable,
    class_names: &BTreeMap<u32, String>,
) -> Result<()> {
    std::fs::write(path, table.to_text(class_names)?)?;
    Ok(())
}
