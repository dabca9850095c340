//! Hierarchical k-means vocabulary with tf-idf retrieval.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::{Descriptor, DESCRIPTOR_LEN};
use super::matching::distance_sq;
use super::SlamError;
use crate::io::{write_bytes, FormatError};

const KMEANS_ITERS: usize = 25;

/// Sparse word → weight histogram.
pub type WordHistogram = BTreeMap<u32, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct VocabNode {
    pub center: Descriptor,
    pub children: Vec<u32>,
    /// Word id for leaves.
    pub word: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub branching: usize,
    pub levels: usize,
    /// Node 0 is the root.
    pub nodes: Vec<VocabNode>,
    pub idf: Vec<f64>,
    /// Word → documents containing it, with the document's weight for it.
    pub inverted: Vec<Vec<(u64, f64)>>,
}

/// k-means++ seeding followed by Lloyd iterations. Returns the centers of
/// non-empty clusters and the assignment of each point.
fn kmeans(points: &[&Descriptor], k: usize, rng: &mut ChaCha8Rng) -> (Vec<Descriptor>, Vec<usize>) {
    let mut centers: Vec<Descriptor> = vec![*points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| distance_sq(p, &centers[0]) as f64).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut x = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if x < *d {
                pick = i;
                break;
            }
            x -= d;
        }
        if d2[pick] <= 0.0 {
            // Numerical tail: take the farthest point instead.
            pick = (0..points.len()).max_by(|a, b| d2[*a].total_cmp(&d2[*b]).then(b.cmp(a))).unwrap();
        }
        centers.push(*points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(distance_sq(p, centers.last().unwrap()) as f64);
        }
    }
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = nearest(p, centers.iter());
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0f64; DESCRIPTOR_LEN]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, a) in points.iter().zip(&assign) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p.iter()) {
                *s += *v as f64;
            }
        }
        for (c, (s, n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if *n > 0 {
                for (cv, sv) in c.iter_mut().zip(s) {
                    *cv = (sv / *n as f64) as f32;
                }
            }
        }
    }
    // Drop empty clusters and renumber.
    let mut counts = vec![0usize; centers.len()];
    assign.iter().for_each(|a| counts[*a] += 1);
    let mut remap = vec![usize::MAX; centers.len()];
    let mut kept = Vec::new();
    for (i, c) in centers.into_iter().enumerate() {
        if counts[i] > 0 {
            remap[i] = kept.len();
            kept.push(c);
        }
    }
    let assign = assign.into_iter().map(|a| remap[a]).collect();
    (kept, assign)
}

/// Index of the closest descriptor; ties go to the lower index.
fn nearest<'a>(p: &Descriptor, centers: impl Iterator<Item = &'a Descriptor>) -> usize {
    let mut best = (0usize, f32::INFINITY);
    for (i, c) in centers.enumerate() {
        let d = distance_sq(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

impl Vocabulary {
    /// Builds the tree from per-document descriptors; idf is computed over
    /// the documents.
    pub fn build(documents: &[Vec<Descriptor>], branching: usize, levels: usize, seed: u64) -> Result<Self, SlamError> {
        let corpus: Vec<&Descriptor> = documents.iter().flatten().collect();
        let needed = branching.checked_pow(levels as u32).unwrap_or(usize::MAX);
        if branching < 2 || levels == 0 || corpus.len() < needed {
            return Err(SlamError::CorpusTooSmall {
                size: corpus.len(),
                needed,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = vec![VocabNode {
            center: [0.0; DESCRIPTOR_LEN],
            children: Vec::new(),
            word: None,
        }];
        let mut words = 0u32;
        // Depth-first so word ids follow tree order.
        let mut stack: Vec<(usize, usize, Vec<&Descriptor>)> = vec![(0, 0, corpus)];
        while let Some((node, depth, pts)) = stack.pop() {
            let distinct = {
                let mut s: Vec<&Descriptor> = pts.clone();
                s.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
                s.dedup();
                s.len()
            };
            if depth == levels || distinct <= 1 {
                nodes[node].word = Some(words);
                words += 1;
                continue;
            }
            let (centers, assign) = kmeans(&pts, branching.min(distinct), &mut rng);
            let first = nodes.len();
            for c in &centers {
                nodes.push(VocabNode {
                    center: *c,
                    children: Vec::new(),
                    word: None,
                });
            }
            nodes[node].children = (first as u32..(first + centers.len()) as u32).collect();
            let mut groups: Vec<Vec<&Descriptor>> = vec![Vec::new(); centers.len()];
            for (p, a) in pts.into_iter().zip(assign) {
                groups[a].push(p);
            }
            for (i, g) in groups.into_iter().enumerate().rev() {
                stack.push((first + i, depth + 1, g));
            }
        }
        let mut v = Vocabulary {
            branching,
            levels,
            nodes,
            idf: vec![0.0; words as usize],
            inverted: vec![Vec::new(); words as usize],
        };
        let mut df = vec![0usize; words as usize];
        for doc in documents {
            let mut seen: Vec<u32> = doc.iter().map(|d| v.quantize(d)).collect();
            seen.sort_unstable();
            seen.dedup();
            seen.iter().for_each(|w| df[*w as usize] += 1);
        }
        let n = documents.len() as f64;
        for (idf, c) in v.idf.iter_mut().zip(&df) {
            *idf = if *c > 0 { (n / *c as f64).ln() } else { 0.0 };
        }
        Ok(v)
    }

    pub fn word_count(&self) -> usize {
        self.idf.len()
    }

    /// Leaf word reached by greedy descent.
    pub fn quantize(&self, d: &Descriptor) -> u32 {
        let mut node = 0usize;
        loop {
            let n = &self.nodes[node];
            if let Some(w) = n.word {
                return w;
            }
            let i = nearest(d, n.children.iter().map(|c| &self.nodes[*c as usize].center));
            node = n.children[i] as usize;
        }
    }

    /// L1-normalized tf-idf histogram; empty when every weight is zero.
    pub fn histogram(&self, descriptors: &[Descriptor]) -> WordHistogram {
        let mut h = WordHistogram::new();
        for d in descriptors {
            *h.entry(self.quantize(d)).or_insert(0.0) += 1.0;
        }
        for (w, v) in h.iter_mut() {
            *v *= self.idf[*w as usize];
        }
        h.retain(|_, v| *v > 0.0);
        let total: f64 = h.values().sum();
        h.values_mut().for_each(|v| *v /= total);
        h
    }

    /// Adds a document to the inverted index, replacing earlier entries
    /// with the same id.
    pub fn index_document(&mut self, id: u64, hist: &WordHistogram) {
        self.remove_document(id);
        for (w, v) in hist {
            self.inverted[*w as usize].push((id, *v));
        }
    }

    pub fn remove_document(&mut self, id: u64) {
        for list in &mut self.inverted {
            list.retain(|(d, _)| *d != id);
        }
    }

    /// Documents sharing at least one word with the query, ranked by L1
    /// distance between normalized histograms (ties by id), best first.
    pub fn query(&self, hist: &WordHistogram, n: usize) -> Vec<(u64, f64)> {
        // ‖q − d‖₁ = 2 − Σ_shared (|q| + |d| − |q − d|)
        let mut gain: BTreeMap<u64, f64> = BTreeMap::new();
        for (w, q) in hist {
            for (doc, d) in &self.inverted[*w as usize] {
                *gain.entry(*doc).or_insert(0.0) += q + d - (q - d).abs();
            }
        }
        let mut ranked: Vec<(u64, f64)> = gain.into_iter().map(|(d, g)| (d, (2.0 - g).max(0.0))).collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        ranked.truncate(n);
        ranked
    }

    /// Tree and idf only; the inverted index is rebuilt from keyframes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.branching as u32, self.levels as u32, self.nodes.len() as u32, self.idf.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.nodes {
            let word = n.word.map_or(u32::MAX, |w| w);
            out.extend_from_slice(&word.to_le_bytes());
            out.extend_from_slice(&(n.children.len() as u32).to_le_bytes());
            for c in &n.children {
                out.extend_from_slice(&c.to_le_bytes());
            }
            for v in &n.center {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &self.idf {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, FormatError> {
        let mut pos = 0usize;
        let bad = || FormatError::parse(path, 0, "truncated vocabulary");
        let u32_at = |pos: &mut usize| -> Result<u32, FormatError> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(bad)?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().unwrap()))
        };
        let branching = u32_at(&mut pos)? as usize;
        let levels = u32_at(&mut pos)? as usize;
        let n_nodes = u32_at(&mut pos)? as usize;
        let n_words = u32_at(&mut pos)? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
        for _ in 0..n_nodes {
            let word = u32_at(&mut pos)?;
            let nc = u32_at(&mut pos)? as usize;
            let mut children = Vec::with_capacity(nc.min(1 << 10));
            for _ in 0..nc {
                let c = u32_at(&mut pos)?;
                if c as usize >= n_nodes {
                    return Err(FormatError::parse(path, 0, "child index out of range"));
                }
                children.push(c);
            }
            let mut center = [0.0f32; DESCRIPTOR_LEN];
            for v in center.iter_mut() {
                *v = f32::from_bits(u32_at(&mut pos)?);
            }
            if word != u32::MAX && word as usize >= n_words {
                return Err(FormatError::parse(path, 0, "word id out of range"));
            }
            nodes.push(VocabNode {
                center,
                children,
                word: (word != u32::MAX).then_some(word),
            });
        }
        let mut idf = Vec::with_capacity(n_words.min(1 << 20));
        for _ in 0..n_words {
            let b = bytes.get(pos..pos + 8).ok_or_else(bad)?;
            pos += 8;
            idf.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        if pos != bytes.len() {
            return Err(FormatError::parse(path, 0, "trailing bytes in vocabulary"));
        }
        Ok(Vocabulary {
            branching,
            levels,
            nodes,
            idf,
            inverted: vec![Vec::new(); n_words],
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}
