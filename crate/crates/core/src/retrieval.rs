//! BM25 search over a local document corpus.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub doc_id: String,
    pub score: f64,
    pub snippet: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Snippet length in tokens.
    pub snippet_len: usize,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75, snippet_len: 64 }
    }
}

/// Inverted index over title and body tokens.
#[derive(Debug)]
pub struct Index {
    params: Bm25Params,
    docs: Vec<Document>,
    doc_len: Vec<usize>,
    avg_len: f64,
    /// term -> (doc index, term frequency), ascending doc index.
    postings: HashMap<String, Vec<(usize, u32)>>,
    by_id: HashMap<String, usize>,
    searches: AtomicUsize,
}

impl Index {
    pub fn build(docs: Vec<Document>, params: Bm25Params) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::invalid("document.id", format!("duplicate {}", d.id)));
            }
            if d.body.trim().is_empty() {
                return Err(Error::invalid("document.body", format!("empty body for {}", d.id)));
            }
            let toks = doc_terms(d);
            doc_len.push(toks.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((i, n));
            }
        }
        let avg_len = if docs.is_empty() { 0.0 } else { doc_len.iter().sum::<usize>() as f64 / docs.len() as f64 };
        Ok(Index { params, docs, doc_len, avg_len, postings, by_id, searches: AtomicUsize::new(0) })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// Number of documents containing `term`.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Number of `search` calls served so far.
    pub fn search_count(&self) -> usize {
        self.searches.load(Ordering::Relaxed)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_freq(term) as f64;
        let total = self.docs.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// Top-`k` documents by BM25 over the distinct query terms. Documents
    /// sharing no term with the query are never returned.
    pub fn search(&self, query: &str, k: usize) -> Vec<SearchResult> {
        self.searches.fetch_add(1, Ordering::Relaxed);
        let terms: HashSet<String> = tokenize(query).into_iter().collect();
        let Bm25Params { k1, b, .. } = self.params;
        let mut scores: HashMap<usize, f64> = HashMap::new();
        let mut sorted_terms: Vec<&String> = terms.iter().collect();
        // Fixed summation order keeps scores bit-identical across runs.
        sorted_terms.sort();
        for t in sorted_terms {
            let Some(list) = self.postings.get(t) else { continue };
            let idf = self.idf(t);
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = k1 * (1.0 - b + b * self.doc_len[d] as f64 / self.avg_len);
                *scores.entry(d).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.docs[a.0].id.cmp(&self.docs[b.0].id)));
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|(d, score)| SearchResult { doc_id: self.docs[d].id.clone(), score, snippet: self.snippet(d) })
            .collect()
    }

    /// A zero-score result for a known document, for rebuilding model inputs
    /// from logged retrieval ids.
    pub fn result(&self, id: &str) -> Option<SearchResult> {
        self.by_id.get(id).map(|&d| SearchResult { doc_id: id.to_string(), score: 0.0, snippet: self.snippet(d) })
    }

    fn snippet(&self, d: usize) -> String {
        let toks = tokenize(&self.docs[d].body);
        toks[..toks.len().min(self.params.snippet_len)].join(" ")
    }
}

fn doc_terms(d: &Document) -> Vec<String> {
    let mut t = tokenize(&d.title);
    t.extend(tokenize(&d.body));
    t
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(docs)
}

pub fn save_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
