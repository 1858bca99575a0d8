//! Reference implementations written independently of the library, used
//! to cross-check it.

use std::collections::BTreeMap;

/// Character-trigram hashing embedder (FNV-1a 64, counts, L2 norm).
pub fn trigram_embed(text: &str, dim: usize) -> Vec<f64> {
    let lower = text.to_lowercase();
    let words: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    let padded = if words.is_empty() {
        format!(" {lower} ")
    } else {
        format!(" {} ", words.join(" "))
    };
    let chars: Vec<char> = padded.chars().collect();
    let mut v = vec![0.0; dim];
    for w in chars.windows(3) {
        let gram: String = w.iter().collect();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in gram.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        v[(h % dim as u64) as usize] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Closed-form cosine: a.b / (|a| |b|).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// One scored item for the accuracy oracle.
#[derive(Debug, Clone)]
pub struct Scored {
    pub group: String,
    pub priority: u8,
    pub correct: bool,
}

/// Weighted accuracy from raw priorities. Each group of size m with raw
/// priorities q contributes m * sum(q * correct) / sum(q); the total is
/// divided by the number of items.
pub fn brute_force_weighted_accuracy(items: &[Scored]) -> f64 {
    let mut groups: BTreeMap<&str, (u64, u64, u64)> = BTreeMap::new();
    for it in items {
        let g = groups.entry(it.group.as_str()).or_default();
        g.0 += 1;
        g.1 += u64::from(it.priority);
        if it.correct {
            g.2 += u64::from(it.priority);
        }
    }
    let total: f64 = groups
        .values()
        .map(|&(m, sum_q, hit_q)| m as f64 * hit_q as f64 / sum_q as f64)
        .sum();
    total / items.len() as f64
}
