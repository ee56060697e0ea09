//! Identity similarity statistics over embedding sets.
//!
//! Every result embedding is compared with every profile embedding and the
//! whole result x profile multiset of cosine similarities is summarised as
//! min / max / median / mean.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::tensor::{read_tensor, Tensor};

/// `a.b / (|a| |b|)`, or 0 when either vector has zero norm.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return dim_err(format!("cosine_sim of lengths {} and {}", a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub label: String,
    vectors: Vec<Vec<f32>>,
}

impl EmbeddingSet {
    pub fn new(label: impl Into<String>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return arg_err("embedding set needs at least one vector");
        };
        let d = first.len();
        if d == 0 {
            return dim_err("embedding vectors must be nonempty");
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != d) {
            return dim_err(format!("embedding lengths differ: {d} vs {}", v.len()));
        }
        Ok(Self { label: label.into(), vectors })
    }

    /// Rows of a `[N, D]` tensor.
    pub fn from_tensor(label: impl Into<String>, t: &Tensor) -> Result<Self> {
        let &[n, d] = t.dims() else {
            return dim_err(format!("embeddings must be [N, D], got {:?}", t.dims()));
        };
        if n == 0 || d == 0 {
            return dim_err("embedding tensor is empty");
        }
        Self::new(label, t.data().chunks_exact(d).map(<[f32]>::to_vec).collect())
    }

    pub fn read(label: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(label, &read_tensor(path)?)
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimStats {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
}

/// Compensated (Neumaier) sum.
fn stable_sum(xs: &[f64]) -> f64 {
    let (mut s, mut comp) = (0f64, 0f64);
    for &x in xs {
        let t = s + x;
        comp += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + comp
}

pub fn summarize(values: &[f64]) -> Result<SimStats> {
    if values.is_empty() {
        return arg_err("no similarities to summarise");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    Ok(SimStats { min: v[0], max: v[n - 1], median, mean: stable_sum(&v) / n as f64 })
}

/// All result x profile similarities, results-major.
pub fn pairwise_sims(results: &EmbeddingSet, profiles: &EmbeddingSet) -> Result<Vec<f64>> {
    if results.dim() != profiles.dim() {
        return dim_err(format!("result dim {} vs profile dim {}", results.dim(), profiles.dim()));
    }
    let mut out = Vec::with_capacity(results.vectors.len() * profiles.vectors.len());
    for r in &results.vectors {
        for p in &profiles.vectors {
            out.push(cosine_sim(r, p)?);
        }
    }
    Ok(out)
}

pub fn sim_stats(results: &EmbeddingSet, profiles: &EmbeddingSet) -> Result<SimStats> {
    summarize(&pairwise_sims(results, profiles)?)
}

pub const STATS_HEADER: &str = "Method,Min,Max,Median,Mean";

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub method: String,
    pub stats: SimStats,
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for r in rows {
        let s = r.stats;
        let _ = writeln!(out, "{},{:.3},{:.3},{:.3},{:.3}", r.method, s.min, s.max, s.median, s.mean);
    }
    out
}

pub fn parse_stats_csv(text: &str) -> Result<Vec<StatsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(STATS_HEADER) {
        return Err(Error::Format(format!("stats CSV must start with '{STATS_HEADER}'")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("expected 5 fields in '{l}'")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad number '{s}': {e}")));
            Ok(StatsRow {
                method: f[0].to_string(),
                stats: SimStats { min: num(f[1])?, max: num(f[2])?, median: num(f[3])?, mean: num(f[4])? },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_sets() -> (EmbeddingSet, EmbeddingSet) {
        // unit result against norm-5 profiles: dot products 1..4 give 0.2..0.8 exactly
        let r = EmbeddingSet::new("result", vec![vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let p = EmbeddingSet::new(
            "profiles",
            vec![vec![1.0, 2.0, 2.0, 4.0], vec![2.0, 4.0, 2.0, 1.0], vec![3.0, 4.0, 0.0, 0.0], vec![4.0, 3.0, 0.0, 0.0]],
        )
        .unwrap();
        (r, p)
    }

    #[test]
    fn cosine_cases() {
        let a = [0.3f32, -1.2, 2.0];
        assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((cosine_sim(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hand_enumerated_stats() {
        let (r, p) = fixture_sets();
        assert_eq!(pairwise_sims(&r, &p).unwrap(), vec![0.2, 0.4, 0.6, 0.8]);
        assert_eq!(sim_stats(&r, &p).unwrap(), SimStats { min: 0.2, max: 0.8, median: 0.5, mean: 0.5 });
        let one = EmbeddingSet::new("x", vec![vec![1.0, 2.0]]).unwrap();
        let s = sim_stats(&one, &one).unwrap();
        assert!([s.min, s.max, s.median, s.mean].iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn odd_median_and_errors() {
        assert_eq!(summarize(&[3.0, 1.0, 2.0]).unwrap().median, 2.0);
        assert!(summarize(&[]).is_err());
        assert!(EmbeddingSet::new("e", vec![]).is_err());
        assert!(EmbeddingSet::new("e", vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let a = EmbeddingSet::new("a", vec![vec![1.0]]).unwrap();
        let b = EmbeddingSet::new("b", vec![vec![1.0, 2.0]]).unwrap();
        assert!(sim_stats(&a, &b).is_err());
        assert!(EmbeddingSet::from_tensor("t", &Tensor::zeros(vec![2, 2, 1]).unwrap()).is_err());
    }

    #[test]
    fn embeddings_from_tensor() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let e = EmbeddingSet::from_tensor("t", &t).unwrap();
        assert_eq!(e.vectors(), &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![StatsRow { method: "Ours".into(), stats: SimStats { min: 0.479, max: 0.674, median: 0.562, mean: 0.565 } }];
        let text = stats_csv(&rows);
        assert_eq!(text, "Method,Min,Max,Median,Mean\nOurs,0.479,0.674,0.562,0.565\n");
        assert_eq!(parse_stats_csv(&text).unwrap(), rows);
        assert!(parse_stats_csv("a,b\n").is_err());
        assert!(parse_stats_csv("Method,Min,Max,Median,Mean\nx,1,2\n").is_err());
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 4), 1..n)
    }

    proptest! {
        #[test]
        fn orderings_hold(r in vecs(6), p in vecs(6)) {
            let s = sim_stats(&EmbeddingSet::new("r", r).unwrap(), &EmbeddingSet::new("p", p).unwrap()).unwrap();
            prop_assert!(s.min <= s.median && s.median <= s.max);
            prop_assert!(s.min <= s.mean && s.mean <= s.max);
        }

        #[test]
        fn scale_invariant(r in vecs(5), p in vecs(5), k in 0.01f32..100.0) {
            let a = sim_stats(&EmbeddingSet::new("r", r.clone()).unwrap(), &EmbeddingSet::new("p", p.clone()).unwrap()).unwrap();
            let scale = |v: Vec<Vec<f32>>| v.into_iter().map(|x| x.into_iter().map(|y| y * k).collect()).collect();
            let b = sim_stats(&EmbeddingSet::new("r", scale(r)).unwrap(), &EmbeddingSet::new("p", scale(p)).unwrap()).unwrap();
            for (x, y) in [(a.min, b.min), (a.max, b.max), (a.median, b.median), (a.mean, b.mean)] {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn permutation_invariant(r in vecs(5), mut p in vecs(6), rot in 0usize..6) {
            let a = sim_stats(&EmbeddingSet::new("r", r.clone()).unwrap(), &EmbeddingSet::new("p", p.clone()).unwrap()).unwrap();
            let n = p.len();
            p.rotate_left(rot % n);
            p.reverse();
            let mut r2 = r;
            r2.reverse();
            let b = sim_stats(&EmbeddingSet::new("r", r2).unwrap(), &EmbeddingSet::new("p", p).unwrap()).unwrap();
            prop_assert_eq!((a.min, a.max, a.median), (b.min, b.max, b.median));
            prop_assert!((a.mean - b.mean).abs() < 1e-15);
        }
    }
}
