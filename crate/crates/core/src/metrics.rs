//! Caption evaluation: tuple parsing and the graph structure score, BLEU-4,
//! ROUGE-L, CIDEr-D, Div-n and a spectral self-similarity diversity score.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::asg::{Asg, NodeRole};
use crate::error::{Error, Result};
use crate::num::math;
use crate::synth::{Vocab, WordKind, EOS};

/// Counts of `(o)`, `(o, a)` and `(o, r, o)` tuples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleCounts {
    pub n_o: usize,
    pub n_oa: usize,
    pub n_oro: usize,
}

impl TupleCounts {
    pub fn of_asg(g: &Asg) -> Self {
        Self {
            n_o: g.count(NodeRole::Object),
            n_oa: g.count(NodeRole::Attribute),
            n_oro: g.count(NodeRole::Relationship),
        }
    }

    fn as_array(&self) -> [usize; 3] {
        [self.n_o, self.n_oa, self.n_oro]
    }
}

/// Inverts the caption grammar. A class word introduces an object unless it
/// follows "that" (a re-mention); every attribute word is one `(o, a)` pair
/// and every relation word one triple. Reading stops at `<eos>`; anything
/// else is ignored.
pub fn parse_caption_tuples(tokens: &[usize], vocab: &Vocab) -> TupleCounts {
    let mut c = TupleCounts::default();
    let mut prev = None;
    for &t in tokens {
        if t == EOS {
            break;
        }
        match vocab.kind(t) {
            WordKind::Object(_) if prev != Some(vocab.that()) => c.n_o += 1,
            WordKind::Attribute(_) => c.n_oa += 1,
            WordKind::Relation(_) => c.n_oro += 1,
            _ => {}
        }
        prev = Some(t);
    }
    c
}

/// Absolute count errors per tuple type and their mean. Lower is better.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphScore {
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "G_o")]
    pub g_o: f64,
    #[serde(rename = "G_a")]
    pub g_a: f64,
    #[serde(rename = "G_r")]
    pub g_r: f64,
}

pub fn graph_structure_counts(gen: TupleCounts, reference: TupleCounts) -> GraphScore {
    let (a, b) = (gen.as_array(), reference.as_array());
    let e: Vec<f64> = (0..3).map(|k| a[k].abs_diff(b[k]) as f64).collect();
    GraphScore { g: (e[0] + e[1] + e[2]) / 3.0, g_o: e[0], g_a: e[1], g_r: e[2] }
}

pub fn graph_structure_metric(gen: &[usize], reference: &[usize], vocab: &Vocab) -> GraphScore {
    graph_structure_counts(parse_caption_tuples(gen, vocab), parse_caption_tuples(reference, vocab))
}

/// Per-type means over instances, then the mean of the three types.
pub fn graph_structure_corpus(scores: &[GraphScore]) -> Result<GraphScore> {
    if scores.is_empty() {
        return Err(Error::Empty("graph structure scores"));
    }
    let n = scores.len() as f64;
    let g_o = scores.iter().map(|s| s.g_o).sum::<f64>() / n;
    let g_a = scores.iter().map(|s| s.g_a).sum::<f64>() / n;
    let g_r = scores.iter().map(|s| s.g_r).sum::<f64>() / n;
    Ok(GraphScore { g: (g_o + g_a + g_r) / 3.0, g_o, g_a, g_r })
}

fn ngrams<T: Ord + Clone>(s: &[T], n: usize) -> BTreeMap<Vec<T>, usize> {
    let mut m = BTreeMap::new();
    if n > 0 && s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

fn check_corpus<T>(gen: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if gen.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if gen.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} candidates but {} references", gen.len(), refs.len())));
    }
    Ok(())
}

/// Corpus BLEU-4 with brevity penalty and no smoothing.
pub fn bleu4<T: Ord + Clone>(gen: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_corpus(gen, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (c, r) in gen.iter().zip(refs) {
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, k) in ngrams(c, n) {
                matched[n - 1] += k.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|k| math::ln(matched[k] as f64 / total[k] as f64)).sum::<f64>() / 4.0;
    let c: usize = gen.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { math::exp(1.0 - r as f64 / c as f64) };
    Ok(bp * math::exp(log_p))
}

fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

pub fn rouge_l_sentence<T: PartialEq>(gen: &[T], reference: &[T]) -> f64 {
    let l = lcs(gen, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / gen.len() as f64, l / reference.len() as f64);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence-level ROUGE-L F-measure.
pub fn rouge_l<T: PartialEq>(gen: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_corpus(gen, refs)?;
    Ok(gen.iter().zip(refs).map(|(g, r)| rouge_l_sentence(g, r)).sum::<f64>() / gen.len() as f64)
}

pub fn ngram_overlap_metrics<T: Ord + Clone>(gen: &[Vec<T>], refs: &[Vec<T>]) -> Result<(f64, f64)> {
    Ok((bleu4(gen, refs)?, rouge_l(gen, refs)?))
}

const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D with document frequencies taken from a fixed reference corpus.
#[derive(Debug, Clone)]
pub struct CiderD<T: Ord> {
    df: [BTreeMap<Vec<T>, usize>; 4],
    docs: usize,
}

impl<T: Ord + Clone> CiderD<T> {
    pub fn new(corpus: &[Vec<T>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("cider corpus"));
        }
        let mut df: [BTreeMap<Vec<T>, usize>; 4] = Default::default();
        for doc in corpus {
            for n in 1..=4 {
                for g in ngrams(doc, n).into_keys() {
                    *df[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(Self { df, docs: corpus.len() })
    }

    fn idf(&self, n: usize, g: &[T]) -> f64 {
        let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1);
        math::ln((self.docs as f64 + 1.0) / df as f64)
    }

    fn vector(&self, s: &[T], n: usize) -> BTreeMap<Vec<T>, f64> {
        ngrams(s, n).into_iter().map(|(g, k)| {
            let w = k as f64 * self.idf(n, &g);
            (g, w)
        }).collect()
    }

    pub fn score(&self, gen: &[T], reference: &[T]) -> f64 {
        let delta = gen.len() as f64 - reference.len() as f64;
        let penalty = math::exp(-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA));
        let mut total = 0.0;
        for n in 1..=4 {
            let (a, b) = (self.vector(gen, n), self.vector(reference, n));
            let na = math::sqrt(a.values().map(|x| x * x).sum());
            let nb = math::sqrt(b.values().map(|x| x * x).sum());
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
            total += dot / (na * nb);
        }
        10.0 * penalty * total / 4.0
    }
}

/// Mean CIDEr-D of candidates against their references, with document
/// frequencies from `corpus`.
pub fn cider_d<T: Ord + Clone>(gen: &[Vec<T>], refs: &[Vec<T>], corpus: &[Vec<T>]) -> Result<f64> {
    check_corpus(gen, refs)?;
    let c = CiderD::new(corpus)?;
    Ok(gen.iter().zip(refs).map(|(g, r)| c.score(g, r)).sum::<f64>() / gen.len() as f64)
}

/// Distinct n-grams across the set divided by its total word count.
pub fn div_n<T: Ord + Clone>(captions: &[Vec<T>], n: usize) -> Result<f64> {
    let words: usize = captions.iter().map(Vec::len).sum();
    if captions.is_empty() || words == 0 {
        return Err(Error::Empty("caption set"));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be positive".into()));
    }
    let mut distinct = BTreeMap::new();
    for c in captions {
        distinct.extend(ngrams(c, n));
    }
    Ok(distinct.len() as f64 / words as f64)
}

pub const JACOBI_TOL: f64 = 1e-10;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>, tol: f64) -> Result<Vec<f64>> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("matrix is not square".into()));
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if math::sqrt(off) < tol {
            return Ok((0..n).map(|i| a[i][i]).collect());
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::NonFinite { op: "jacobi" })
}

/// Cosine-normalized pairwise CIDEr-D kernel of a caption set, with
/// document frequencies from the set itself.
pub fn cider_kernel<T: Ord + Clone>(captions: &[Vec<T>]) -> Result<Vec<Vec<f64>>> {
    Ok(cider_kernel_with(&CiderD::new(captions)?, captions))
}

/// As [`cider_kernel`], with document frequencies taken from `c`.
pub fn cider_kernel_with<T: Ord + Clone>(c: &CiderD<T>, captions: &[Vec<T>]) -> Vec<Vec<f64>> {
    let m = captions.len();
    let mut k = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let v = c.score(&captions[i], &captions[j]);
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    let diag: Vec<f64> = (0..m).map(|i| k[i][i]).collect();
    for i in 0..m {
        for j in 0..m {
            k[i][j] = if i == j {
                1.0
            } else if diag[i] > 0.0 && diag[j] > 0.0 {
                k[i][j] / math::sqrt(diag[i] * diag[j])
            } else {
                0.0
            };
        }
    }
    k
}

/// `(1 − λmax / Σλ) · m / (m − 1)` over the kernel spectrum: 0 for
/// duplicates, 1 for mutually dissimilar captions.
pub fn self_cider<T: Ord + Clone>(captions: &[Vec<T>]) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::InvalidArgument("self-similarity needs at least two captions, got 0".into()));
    }
    self_cider_with(&CiderD::new(captions)?, captions)
}

/// As [`self_cider`], weighting n-grams by the document frequencies of `c`
/// (typically every caption of one system over a whole evaluation).
pub fn self_cider_with<T: Ord + Clone>(c: &CiderD<T>, captions: &[Vec<T>]) -> Result<f64> {
    let m = captions.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("self-similarity needs at least two captions, got {m}")));
    }
    let lam = symmetric_eigenvalues(cider_kernel_with(c, captions), JACOBI_TOL)?;
    let sum: f64 = lam.iter().sum();
    let max = lam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let score = (1.0 - max / sum) * m as f64 / (m as f64 - 1.0);
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    #[serde(flatten)]
    pub graph: GraphScore,
    pub div1: Option<f64>,
    pub div2: Option<f64>,
    pub self_cider: Option<f64>,
}

/// Overlap and graph structure scores of generated captions against their
/// references. Diversity fields are left empty.
pub fn control_report(gen: &[Vec<usize>], refs: &[Vec<usize>], vocab: &Vocab) -> Result<(MetricReport, Vec<GraphScore>)> {
    check_corpus(gen, refs)?;
    let (bleu, rouge) = ngram_overlap_metrics(gen, refs)?;
    let cider = cider_d(gen, refs, refs)?;
    let per: Vec<GraphScore> = gen.iter().zip(refs).map(|(g, r)| graph_structure_metric(g, r, vocab)).collect();
    let graph = graph_structure_corpus(&per)?;
    Ok((MetricReport { bleu4: bleu, rouge_l: rouge, cider_d: cider, graph, div1: None, div2: None, self_cider: None }, per))
}
