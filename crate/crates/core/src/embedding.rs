//! Item embedding providers and the frozen embedding table.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusIndex;
use crate::error::{RarError, Result};
use crate::exec::Exec;
use crate::generator::http::{HttpClient, HttpSettings};
use crate::seed::fnv1a;

pub const DEFAULT_DIM: usize = 256;

/// Maps text to a fixed-width vector. Implementations must be stateless so
/// builds can fan out across entries.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn tag(&self) -> String;
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

/// Signed feature hashing of lowercase word unigrams and bigrams.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(RarError::invalid("embedding dim must be positive"));
        }
        Ok(HashEmbedder { dim })
    }

    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(feature.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign * weight;
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("hash-ngram-v1:{}", self.dim)
    }

    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            self.add(&mut v, t, 1.0);
        }
        for w in tokens.windows(2) {
            self.add(&mut v, &format!("{} {}", w[0], w[1]), 0.5);
        }
        Ok(v)
    }
}

/// OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbedder {
    client: HttpClient,
    model: String,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(settings: HttpSettings, model: impl Into<String>, dim: usize) -> Result<Self> {
        Ok(HttpEmbedder {
            client: HttpClient::new(settings)?,
            model: model.into(),
            dim,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("http:{}", self.model)
    }

    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let body = serde_json::json!({ "model": self.model, "input": text });
        let (resp, _) = self.client.post_json("embeddings", &body).map_err(|e| e.to_string())?;
        resp.pointer("/data/0/embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| "response lacks data[0].embedding".to_string())?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| "non-numeric embedding value".to_string()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    provider_tag: String,
    ids: Vec<String>,
    rows: Array2<f64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    provider: String,
}

#[derive(Serialize, Deserialize)]
struct Row {
    id: String,
    vec: Vec<f64>,
}

fn l2_normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

impl EmbeddingTable {
    /// Builds a table from (id, vector) rows, sorted by id. Vectors are
    /// stored as given; use [`build_embeddings`] for normalized builds.
    pub fn from_rows(dim: usize, provider_tag: impl Into<String>, mut rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(RarError::invalid("embedding dim must be positive"));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut ids = Vec::with_capacity(rows.len());
        let mut index = HashMap::with_capacity(rows.len());
        for (id, v) in rows {
            if v.len() != dim {
                return Err(RarError::Dimension {
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RarError::NonFinite(format!("embedding for {id}")));
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(RarError::invalid(format!("duplicate embedding id {id}")));
            }
            data.extend_from_slice(&v);
            ids.push(id);
        }
        let rows = Array2::from_shape_vec((ids.len(), dim), data).expect("shape matches data");
        Ok(EmbeddingTable {
            dim,
            provider_tag: provider_tag.into(),
            ids,
            rows,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids in row order (ascending).
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn vector(&self, id: &str) -> Option<ArrayView1<'_, f64>> {
        self.row_of(id).map(|r| self.rows.row(r))
    }

    pub fn row(&self, r: usize) -> ArrayView1<'_, f64> {
        self.rows.row(r)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.rows
    }

    /// Looks up a sequence of ids, failing on the first unknown one.
    pub fn sequence(&self, ids: &[String]) -> Result<Vec<Array1<f64>>> {
        ids.iter()
            .map(|id| {
                self.vector(id)
                    .map(|v| v.to_owned())
                    .ok_or_else(|| RarError::UnknownId(id.clone()))
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| RarError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| RarError::io(path, e);
        let header = Header {
            dim: self.dim,
            provider: self.provider_tag.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header")).map_err(io)?;
        for (i, id) in self.ids.iter().enumerate() {
            let row = Row {
                id: id.clone(),
                vec: self.rows.row(i).to_vec(),
            };
            writeln!(w, "{}", serde_json::to_string(&row).expect("row")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| RarError::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let parse_err = |line: usize, e: serde_json::Error| RarError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        };
        let header: Header = match lines.next() {
            Some((_, l)) => serde_json::from_str(&l.map_err(|e| RarError::io(path, e))?).map_err(|e| parse_err(1, e))?,
            None => {
                return Err(RarError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        let mut rows = Vec::new();
        for (i, l) in lines {
            let l = l.map_err(|e| RarError::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&l).map_err(|e| parse_err(i + 1, e))?;
            rows.push((row.id, row.vec));
        }
        EmbeddingTable::from_rows(header.dim, header.provider, rows)
    }
}

/// Embeds every corpus entry's key-value serialization and L2-normalizes it.
pub fn build_embeddings(index: &CorpusIndex, provider: &dyn EmbeddingProvider, exec: Exec) -> Result<EmbeddingTable> {
    let dim = provider.dim();
    let entries: Vec<_> = index.entries().collect();
    let rows = exec.try_map(&entries, |e| {
        let mut v = provider.embed(&e.serialize_kv()).map_err(|message| RarError::Provider {
            id: e.id.clone(),
            message,
        })?;
        if v.len() != dim {
            return Err(RarError::Dimension {
                expected: dim,
                got: v.len(),
            });
        }
        if !l2_normalize(&mut v) {
            return Err(RarError::Provider {
                id: e.id.clone(),
                message: "zero or non-finite vector".into(),
            });
        }
        Ok((e.id.clone(), v))
    })?;
    EmbeddingTable::from_rows(dim, provider.tag(), rows)
}

/// Embeds free text with the same normalization as corpus vectors.
pub fn embed_normalized(provider: &dyn EmbeddingProvider, text: &str) -> Result<Array1<f64>> {
    let mut v = provider.embed(text).map_err(|message| RarError::Provider {
        id: "<text>".into(),
        message,
    })?;
    if !l2_normalize(&mut v) {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(Array1::from(v))
}
