//! Independent reference implementations used by the property suites and
//! the acceptance harness. Each one is written the slow, obvious way and
//! shares no code with the library beyond plain data types.

#![allow(dead_code)]

use std::collections::BTreeMap;

use carecontext_core::corpus::{Chunk, ChunkingConfig};

/// Checks coverage, overlap, size and reassembly for one chunking result.
pub fn check_chunks(body: &str, config: &ChunkingConfig, chunks: &[Chunk]) -> Result<(), String> {
    let chars: Vec<char> = body.chars().collect();
    let total = chars.len();
    if total == 0 {
        return if chunks.is_empty() { Ok(()) } else { Err("empty body produced chunks".into()) };
    }
    let first = chunks.first().ok_or("non-empty body produced no chunks")?;
    let last = chunks.last().unwrap();
    if first.start_offset != 0 {
        return Err(format!("first chunk starts at {}", first.start_offset));
    }
    if last.end_offset != total {
        return Err(format!("last chunk ends at {} of {total}", last.end_offset));
    }
    for (i, c) in chunks.iter().enumerate() {
        if c.sequence != i {
            return Err(format!("chunk {i} has sequence {}", c.sequence));
        }
        if c.end_offset <= c.start_offset || c.end_offset - c.start_offset > config.chunk_size {
            return Err(format!("chunk {i} spans {}..{}", c.start_offset, c.end_offset));
        }
        if c.end_offset - c.start_offset != config.chunk_size.min(total) {
            return Err(format!("chunk {i} is not full-sized"));
        }
        let expected: String = chars[c.start_offset..c.end_offset].iter().collect();
        if c.text != expected {
            return Err(format!("chunk {i} text does not match its offsets"));
        }
    }
    for (i, w) in chunks.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        if b.start_offset <= a.start_offset {
            return Err(format!("chunk {} does not advance", i + 1));
        }
        if a.end_offset < b.start_offset + config.overlap {
            return Err(format!("chunks {i} and {} overlap by less than {}", i + 1, config.overlap));
        }
        let is_last = i + 2 == chunks.len();
        if !is_last && b.start_offset != a.start_offset + config.stride() {
            return Err(format!("chunk {} does not start one stride after its predecessor", i + 1));
        }
    }
    if reassemble(chunks) != body {
        return Err("reassembled chunks differ from the body".into());
    }
    Ok(())
}

/// Concatenates chunks, skipping the characters each one shares with the
/// previous chunk.
pub fn reassemble(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    let mut covered = 0usize;
    for c in chunks {
        let skip = covered.saturating_sub(c.start_offset);
        out.extend(c.text.chars().skip(skip));
        covered = c.end_offset;
    }
    out
}

/// One stored vector for the search oracle.
#[derive(Debug, Clone)]
pub struct OracleEntry {
    pub id: String,
    pub insertion: u64,
    pub vector: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine against every entry, sorted by descending score then ascending
/// insertion order; the first `k` ids.
pub fn brute_force_search(entries: &[OracleEntry], query: &[f64], k: usize) -> Vec<String> {
    let qn = norm(query);
    let mut all: Vec<(f64, u64, &str)> = Vec::new();
    for e in entries {
        let cos = (dot(&e.vector, query) / (norm(&e.vector) * qn)).clamp(-1.0, 1.0);
        all.push((cos, e.insertion, &e.id));
    }
    // insertion sort, explicitly comparing score then insertion index
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (&all[j - 1], &all[j]);
            let out_of_order = b.0 > a.0 || (b.0 == a.0 && b.1 < a.1);
            if !out_of_order {
                break;
            }
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    all.into_iter().take(k).map(|(_, _, id)| id.to_string()).collect()
}

/// Fleiss' kappa and its null-hypothesis standard error computed by
/// expanding each item into its individual ratings and counting agreeing
/// rater pairs one by one.
pub fn kappa_oracle(counts: &[Vec<u64>]) -> (f64, f64) {
    let big_n = counts.len();
    let q = counts[0].len();
    let mut ratings_per_item = Vec::new();
    for row in counts {
        let mut labels = Vec::new();
        for (j, &c) in row.iter().enumerate() {
            for _ in 0..c {
                labels.push(j);
            }
        }
        ratings_per_item.push(labels);
    }
    let n = ratings_per_item[0].len();

    let mut p_i_sum = 0.0;
    for labels in &ratings_per_item {
        let mut agreeing_pairs = 0usize;
        for a in 0..n {
            for b in 0..n {
                if a != b && labels[a] == labels[b] {
                    agreeing_pairs += 1;
                }
            }
        }
        p_i_sum += agreeing_pairs as f64 / (n * (n - 1)) as f64;
    }
    let p_bar = p_i_sum / big_n as f64;

    let mut per_category: BTreeMap<usize, usize> = BTreeMap::new();
    for labels in &ratings_per_item {
        for &l in labels {
            *per_category.entry(l).or_default() += 1;
        }
    }
    let p: Vec<f64> = (0..q).map(|j| *per_category.get(&j).unwrap_or(&0) as f64 / (big_n * n) as f64).collect();
    let p_e: f64 = p.iter().map(|x| x * x).sum();
    let kappa = (p_bar - p_e) / (1.0 - p_e);

    let mut spq = 0.0;
    let mut spq_qp = 0.0;
    for &pj in &p {
        let qj = 1.0 - pj;
        spq += pj * qj;
        spq_qp += pj * qj * (qj - pj);
    }
    let se = (2.0f64).sqrt() / (spq * ((big_n * n * (n - 1)) as f64).sqrt()) * (spq * spq - spq_qp).sqrt();
    (kappa, se)
}

/// Correctness from claim counts, written out from the definitions.
pub fn correctness_oracle(tp: usize, fp: usize, fn_: usize, similarity: f64, weight: f64) -> f64 {
    let f1 = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp as f64 + (fp as f64 + fn_ as f64) / 2.0) };
    weight * f1 + (1.0 - weight) * similarity
}
