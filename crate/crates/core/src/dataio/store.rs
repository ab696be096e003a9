use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::embed::{embed_text_hash, fnv1a, l2_normalize};
use super::DataError;

/// Precomputed text embeddings, keyed by a hash of the text.
///
/// On disk: a `dim <D>` header, then one `<id>\t<text>\t<v1,v2,...>` line
/// per entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: HashMap<u64, StoreEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub id: String,
    pub text: String,
    pub vector: Vec<f64>,
}

pub fn text_key(text: &str) -> u64 {
    fnv1a(text.as_bytes())
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(
        &mut self,
        id: impl Into<String>,
        text: impl Into<String>,
        mut vector: Vec<f64>,
    ) -> Result<(), DataError> {
        if vector.len() != self.dim {
            return Err(DataError::Format(format!(
                "vector of length {} in a store of dimension {}",
                vector.len(),
                self.dim
            )));
        }
        l2_normalize(&mut vector);
        let text = text.into();
        self.entries.insert(
            text_key(&text),
            StoreEntry {
                id: id.into(),
                text,
                vector,
            },
        );
        Ok(())
    }

    pub fn get(&self, text: &str) -> Option<&[f64]> {
        self.entries
            .get(&text_key(text))
            .map(|e| e.vector.as_slice())
    }

    /// Stored vector, or the hash featurizer's output on a miss.
    pub fn lookup_or_hash(&self, text: &str) -> Option<Vec<f64>> {
        match self.get(text) {
            Some(v) => Some(v.to_vec()),
            None => {
                log::warn!("embedding store miss for {text:?}; using hash featurizer");
                embed_text_hash(text, self.dim)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let raw = fs::read_to_string(path)?;
        Self::parse(&raw)
    }

    pub fn parse(raw: &str) -> Result<Self, DataError> {
        let mut lines = raw.lines();
        let header = lines
            .next()
            .ok_or_else(|| DataError::Format("empty embedding store".into()))?;
        let dim: usize = header
            .strip_prefix("dim ")
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| DataError::Format(format!("bad header {header:?}")))?;
        let mut store = Self::new(dim);
        for (no, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (id, text, vals) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(DataError::Format(format!(
                        "line {}: expected id<TAB>text<TAB>vector",
                        no + 2
                    )))
                }
            };
            let vector = vals
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| DataError::Format(format!("line {}: {e}", no + 2)))?;
            if vector.len() != dim {
                return Err(DataError::Format(format!(
                    "line {}: header declares dim {dim} but row has {} values",
                    no + 2,
                    vector.len()
                )));
            }
            store.insert(id, text, vector)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "dim {}", self.dim)?;
        let mut entries: Vec<&StoreEntry> = self.entries.values().collect();
        entries.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.text.cmp(&b.text)));
        for e in entries {
            let vals: Vec<String> = e.vector.iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "{}\t{}\t{}", e.id, e.text, vals.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let mut s = EmbeddingStore::new(16);
        s.insert("a", "hello world", embed_text_hash("hello world", 16).unwrap())
            .unwrap();
        s.insert("b", "steady", (0..16).map(|i| i as f64 * 0.1 - 0.3).collect())
            .unwrap();
        s.save(&path).unwrap();
        let back = EmbeddingStore::load(&path).unwrap();
        for text in ["hello world", "steady"] {
            let (x, y) = (s.get(text).unwrap(), back.get(text).unwrap());
            assert!(x.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn dimension_mismatch_is_format_error() {
        let row: Vec<String> = (0..383).map(|_| "0.1".to_string()).collect();
        let raw = format!("dim 384\nx\tsome text\t{}\n", row.join(","));
        assert!(matches!(
            EmbeddingStore::parse(&raw),
            Err(DataError::Format(_))
        ));
        assert!(EmbeddingStore::parse("dim x\n").is_err());
        assert!(EmbeddingStore::parse("dim 16\nonly-id\n").is_err());
    }

    #[test]
    fn miss_falls_back_to_hash() {
        let s = EmbeddingStore::new(32);
        assert_eq!(
            s.lookup_or_hash("unseen text"),
            embed_text_hash("unseen text", 32)
        );
    }

    #[test]
    fn vectors_renormalized_on_load() {
        let raw = "dim 16\nid\tt\t3,4,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n";
        let s = EmbeddingStore::parse(raw).unwrap();
        assert_eq!(&s.get("t").unwrap()[..2], &[0.6, 0.8]);
    }
}
