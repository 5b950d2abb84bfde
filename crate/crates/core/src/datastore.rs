//! kNN datastore of decoder hidden states.
//!
//! Each entry maps the hidden state the model produced right before
//! predicting a target token (the key, stored as `f32`) to that token (the
//! value) and the talk the pair came from. Queries rank entries by squared
//! L2 distance, ties going to the lower entry index; an optional talk id is
//! excluded at query time to realize leave-one-out retrieval.
//!
//! The approximate path is an IVF-flat index: Lloyd's k-means partitions
//! the keys and a query scans only the `nprobe` clusters whose centroids
//! are nearest.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ParallelCorpus, BOS, EOS};
use crate::error::{format_err, Error, Result};
use crate::model::{read_u32, StepModel};

pub const DATASTORE_MAGIC: &[u8; 4] = b"KNND";
pub const INDEX_MAGIC: &[u8; 4] = b"KNNI";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Squared L2 distance.
    pub distance: f64,
    pub value: u32,
    pub talk_id: u32,
}

/// Squared L2 distance accumulated in eight lanes.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            lanes[i] += d * d;
        }
    }
    let mut s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    distance: f32,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap keeping the `k` smallest candidates.
struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<u32>,
    talk_ids: Vec<u32>,
    index: Option<IvfIndex>,
}

impl Datastore {
    pub fn new(dim: usize) -> Self {
        Datastore {
            dim,
            ..Default::default()
        }
    }

    /// Assembles a datastore from raw parts.
    pub fn from_parts(dim: usize, keys: Vec<f32>, values: Vec<u32>, talk_ids: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("datastore dim must be positive".into()));
        }
        if keys.len() != values.len() * dim || values.len() != talk_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "inconsistent datastore parts: {} key floats, {} values, {} talk ids at dim {dim}",
                keys.len(),
                values.len(),
                talk_ids.len()
            )));
        }
        if keys.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidArgument("datastore keys must be finite".into()));
        }
        Ok(Datastore {
            dim,
            keys,
            values,
            talk_ids,
            index: None,
        })
    }

    /// Teacher-forces every pair through `model`, storing the hidden state
    /// that precedes each target token (EOS included).
    pub fn build(model: &dyn StepModel, bitext: &ParallelCorpus) -> Result<Self> {
        let mut ds = Datastore::new(model.hidden_dim());
        for pair in &bitext.pairs {
            let context = model.encode(&pair.source)?;
            let mut state = model.initial_state();
            let mut prev = BOS;
            for &tok in pair.target.ids().iter().chain(std::iter::once(&EOS)) {
                let out = model.step(&context, &state, prev)?;
                ds.push(&out.hidden, tok, pair.talk_id)?;
                state = out.state;
                prev = tok;
            }
        }
        Ok(ds)
    }

    /// Appends one entry; the key is narrowed to `f32`.
    pub fn push(&mut self, key: &[f64], value: u32, talk_id: u32) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: key.len(),
            });
        }
        let start = self.keys.len();
        self.keys.extend(key.iter().map(|&v| v as f32));
        if self.keys[start..].iter().any(|k| !k.is_finite()) {
            self.keys.truncate(start);
            return Err(Error::InvalidArgument("datastore keys must be finite".into()));
        }
        self.values.push(value);
        self.talk_ids.push(talk_id);
        self.index = None;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn talk_ids(&self) -> &[u32] {
        &self.talk_ids
    }

    pub fn index(&self) -> Option<&IvfIndex> {
        self.index.as_ref()
    }

    pub fn set_index(&mut self, index: IvfIndex) -> Result<()> {
        index.check_against(self)?;
        self.index = Some(index);
        Ok(())
    }

    pub fn take_index(&mut self) -> Option<IvfIndex> {
        self.index.take()
    }

    fn check_query(&self, q: &[f32], k: usize) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        Ok(())
    }

    fn neighbor(&self, c: Candidate) -> Neighbor {
        Neighbor {
            index: c.index,
            distance: c.distance as f64,
            value: self.values[c.index],
            talk_id: self.talk_ids[c.index],
        }
    }

    #[inline]
    fn consider(&self, i: usize, q: &[f32], exclude_talk: Option<u32>, top: &mut TopK) {
        if exclude_talk == Some(self.talk_ids[i]) {
            return;
        }
        top.push(Candidate {
            distance: squared_l2(q, self.key(i)),
            index: i,
        });
    }

    /// Exact top-`k` by squared L2, ascending; fewer when not enough
    /// entries survive the talk filter.
    pub fn query_exact(&self, q: &[f32], k: usize, exclude_talk: Option<u32>) -> Result<Vec<Neighbor>> {
        self.check_query(q, k)?;
        let mut top = TopK::new(k);
        for i in 0..self.len() {
            self.consider(i, q, exclude_talk, &mut top);
        }
        Ok(top.into_sorted().into_iter().map(|c| self.neighbor(c)).collect())
    }

    /// Approximate top-`k`, scanning the `nprobe` nearest clusters.
    pub fn query_ivf(&self, q: &[f32], k: usize, exclude_talk: Option<u32>) -> Result<Vec<Neighbor>> {
        self.check_query(q, k)?;
        let index = self.index.as_ref().ok_or(Error::MissingIndex)?;
        let mut top = TopK::new(k);
        for cluster in index.nearest_clusters(q, index.nprobe) {
            for &i in &index.lists[cluster] {
                self.consider(i as usize, q, exclude_talk, &mut top);
            }
        }
        Ok(top.into_sorted().into_iter().map(|c| self.neighbor(c)).collect())
    }

    /// Uses the IVF index when one is attached, the exact scan otherwise.
    pub fn query(&self, q: &[f32], k: usize, exclude_talk: Option<u32>) -> Result<Vec<Neighbor>> {
        if self.index.is_some() {
            self.query_ivf(q, k, exclude_talk)
        } else {
            self.query_exact(q, k, exclude_talk)
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASTORE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.keys.len() * 4 + self.len() * 8);
        for k in &self.keys {
            buf.extend_from_slice(&k.to_le_bytes());
        }
        for v in self.values.iter().chain(&self.talk_ids) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASTORE_MAGIC {
            return Err(format_err("datastore", format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format_err("datastore", format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let keys = read_f32s(&mut r, count * dim)?;
        let values = read_u32s(&mut r, count)?;
        let talk_ids = read_u32s(&mut r, count)?;
        Self::from_parts(dim, keys, values, talk_ids).map_err(|e| format_err("datastore", e.to_string()))
    }
}

/// IVF-flat index over a datastore.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
    pub nprobe: usize,
}

impl IvfIndex {
    pub fn n_clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn with_nprobe(mut self, nprobe: usize) -> Self {
        self.nprobe = nprobe.clamp(1, self.n_clusters().max(1));
        self
    }

    fn nearest_clusters(&self, q: &[f32], n: usize) -> Vec<usize> {
        let mut top = TopK::new(n.max(1));
        for c in 0..self.n_clusters() {
            top.push(Candidate {
                distance: squared_l2(q, self.centroid(c)),
                index: c,
            });
        }
        top.into_sorted().into_iter().map(|c| c.index).collect()
    }

    fn check_against(&self, ds: &Datastore) -> Result<()> {
        if self.dim != ds.dim {
            return Err(Error::DimensionMismatch {
                expected: ds.dim,
                actual: self.dim,
            });
        }
        let mut seen = vec![false; ds.len()];
        for &i in self.lists.iter().flatten() {
            let i = i as usize;
            if i >= seen.len() || seen[i] {
                return Err(format_err("index", "posting lists do not partition the datastore"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(format_err("index", "posting lists do not cover the datastore"));
        }
        Ok(())
    }

    /// `KNNI`, version, dim, n_clusters, nprobe (u32), entry count (u64),
    /// centroids (f32), then per cluster a u32 length and its entry ids.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.dim, self.n_clusters(), self.nprobe] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let count: usize = self.lists.iter().map(Vec::len).sum();
        w.write_all(&(count as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for c in &self.centroids {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for list in &self.lists {
            buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for i in list {
                buf.extend_from_slice(&i.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(format_err("index", format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format_err("index", format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let n_clusters = read_u32(&mut r)? as usize;
        let nprobe = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let centroids = read_f32s(&mut r, n_clusters * dim)?;
        let mut lists = Vec::with_capacity(n_clusters);
        let mut total = 0;
        for _ in 0..n_clusters {
            let len = read_u32(&mut r)? as usize;
            total += len;
            if total > count {
                return Err(format_err("index", "posting lists exceed entry count"));
            }
            lists.push(read_u32s(&mut r, len)?);
        }
        if total != count || nprobe == 0 {
            return Err(format_err("index", "inconsistent header"));
        }
        Ok(IvfIndex {
            dim,
            centroids,
            lists,
            nprobe,
        })
    }
}

/// Lloyd's k-means with seeded random-point initialization. Empty clusters
/// are re-seeded with the point farthest from its current centroid.
pub fn train_ivf(ds: &Datastore, n_clusters: usize, iterations: usize, seed: u64) -> Result<IvfIndex> {
    let n = ds.len();
    if n_clusters == 0 {
        return Err(Error::InvalidArgument("n_clusters must be at least 1".into()));
    }
    if n_clusters > n {
        return Err(Error::InvalidArgument(format!(
            "n_clusters {n_clusters} exceeds entry count {n}"
        )));
    }
    let dim = ds.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f32> = Vec::with_capacity(n_clusters * dim);
    for i in sample(&mut rng, n, n_clusters).into_iter() {
        centroids.extend_from_slice(ds.key(i));
    }
    let mut assign = vec![0usize; n];
    let mut dist = vec![0f32; n];
    let assign_all = |centroids: &[f32], assign: &mut [usize], dist: &mut [f32]| {
        for i in 0..n {
            let key = ds.key(i);
            let mut best = (f32::INFINITY, 0usize);
            for c in 0..n_clusters {
                let d = squared_l2(key, &centroids[c * dim..(c + 1) * dim]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[i] = best.1;
            dist[i] = best.0;
        }
    };
    for _ in 0..iterations {
        assign_all(&centroids, &mut assign, &mut dist);
        let mut sums = vec![0f64; n_clusters * dim];
        let mut counts = vec![0usize; n_clusters];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &k) in sums[c * dim..(c + 1) * dim].iter_mut().zip(ds.key(i)) {
                *s += k as f64;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..n_clusters {
            let slot = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (v, s) in slot.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *v = (s * inv) as f32;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n_clusters <= n leaves a candidate");
                taken[far] = true;
                dist[far] = 0.0;
                slot.copy_from_slice(ds.key(far));
            }
        }
    }
    assign_all(&centroids, &mut assign, &mut dist);
    let mut lists = vec![Vec::new(); n_clusters];
    for (i, &c) in assign.iter().enumerate() {
        lists[c].push(i as u32);
    }
    Ok(IvfIndex {
        dim,
        centroids,
        lists,
        nprobe: 1,
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_u32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<u32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sentence, SentencePair};
    use crate::model::{ModelDims, RefModel};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn line_store() -> Datastore {
        Datastore::from_parts(1, vec![0.0, 1.0, 2.0], vec![10, 11, 12], vec![0, 1, 2]).unwrap()
    }

    #[test]
    fn exact_query_hand_case() {
        let ds = line_store();
        let nn = ds.query_exact(&[0.9], 2, None).unwrap();
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![1, 0]);
        assert!((nn[0].distance - 0.01).abs() < 1e-6);
        assert!((nn[1].distance - 0.81).abs() < 1e-6);
        assert_eq!(nn[0].value, 11);

        let hit = ds.query_exact(&[2.0], 1, None).unwrap();
        assert_eq!((hit[0].index, hit[0].distance), (2, 0.0));

        let all = ds.query_exact(&[5.0], 10, None).unwrap();
        assert_eq!(all.iter().map(|n| n.index).collect::<Vec<_>>(), vec![2, 1, 0]);

        let filtered = ds.query_exact(&[0.9], 3, Some(1)).unwrap();
        assert_eq!(filtered.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 2]);

        assert!(matches!(ds.query_exact(&[0.0, 1.0], 1, None), Err(Error::DimensionMismatch { .. })));
        assert!(ds.query_exact(&[0.0], 0, None).is_err());
        assert!(matches!(ds.query_ivf(&[0.0], 1, None), Err(Error::MissingIndex)));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let ds = Datastore::from_parts(1, vec![1.0, -1.0, 1.0, 3.0], vec![0, 1, 2, 3], vec![0; 4]).unwrap();
        let nn = ds.query_exact(&[0.0], 3, None).unwrap();
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    fn pair(src: &[u32], tgt: &[u32], talk: u32) -> SentencePair {
        SentencePair::new(Sentence::new(src.to_vec()), Sentence::new(tgt.to_vec()), "acl", talk).unwrap()
    }

    #[test]
    fn build_stores_teacher_forced_targets() {
        let model = RefModel::new(ModelDims::new(16), 1).unwrap();
        let one = ParallelCorpus::new("de", vec![pair(&[4, 5], &[6, 7, 8], 0)]);
        assert_eq!(Datastore::build(&model, &one).unwrap().len(), 4);
        assert!(Datastore::build(&model, &ParallelCorpus::default()).unwrap().is_empty());

        let pairs: Vec<_> = (0..5u32)
            .map(|i| pair(&[4 + i], &(0..=i).map(|j| 5 + j).collect::<Vec<_>>(), i))
            .collect();
        let corpus = ParallelCorpus::new("de", pairs.clone());
        let ds = Datastore::build(&model, &corpus).unwrap();
        let mut expected_values = Vec::new();
        let mut expected_talks = Vec::new();
        for p in &pairs {
            expected_values.extend(p.target.ids().iter().copied().chain([EOS]));
            expected_talks.extend(std::iter::repeat_n(p.talk_id, p.target.len() + 1));
        }
        assert_eq!(ds.values(), &expected_values[..]);
        assert_eq!(ds.talk_ids(), &expected_talks[..]);

        // keys replay the model's own states, narrowed to f32
        let p = &pairs[2];
        let c = model.encode(&p.source).unwrap();
        let first = model.step(&c, &model.initial_state(), BOS).unwrap();
        let offset: usize = pairs[..2].iter().map(|p| p.target.len() + 1).sum();
        let key = ds.key(offset);
        let max_err = key
            .iter()
            .zip(&first.hidden)
            .map(|(&k, &h)| (k as f64 - h).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-7, "f32 quantization error {max_err}");
    }

    fn gaussian_store(n: usize, dim: usize, seed: u64) -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<f32> = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let values = (0..n as u32).map(|i| i % 50).collect();
        let talks = (0..n as u32).map(|i| i % 5).collect();
        Datastore::from_parts(dim, keys, values, talks).unwrap()
    }

    #[test]
    fn full_probe_ivf_equals_exact() {
        let ds = gaussian_store(2000, 16, 3);
        let mut ds = ds;
        let index = train_ivf(&ds, 16, 10, 7).unwrap().with_nprobe(16);
        ds.set_index(index).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q: Vec<f32> = (0..16).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            for exclude in [None, Some(2)] {
                assert_eq!(ds.query_ivf(&q, 8, exclude).unwrap(), ds.query_exact(&q, 8, exclude).unwrap());
            }
            assert!(ds.query_ivf(&q, 8, Some(2)).unwrap().iter().all(|n| n.talk_id != 2));
        }
    }

    #[test]
    fn one_cluster_per_entry() {
        let ds = gaussian_store(40, 4, 1);
        let index = train_ivf(&ds, 40, 5, 2).unwrap();
        for i in 0..40 {
            let c = index.lists().iter().position(|l| l.contains(&(i as u32))).unwrap();
            assert_eq!(index.lists()[c], vec![i as u32]);
            assert_eq!(index.centroid(c), ds.key(i));
        }
        assert!(train_ivf(&ds, 41, 5, 2).is_err());
    }

    #[test]
    fn kmeans_finds_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 8;
        let means = [-5.0f32, 5.0];
        let mut keys = Vec::new();
        for i in 0..1000 {
            let m = means[i % 2];
            keys.extend((0..dim).map(|_| m + 0.5 * rng.sample::<f32, _>(StandardNormal)));
        }
        let ds = Datastore::from_parts(dim, keys, vec![0; 1000], vec![0; 1000]).unwrap();
        let index = train_ivf(&ds, 2, 20, 11).unwrap();
        for c in 0..2 {
            let centroid = index.centroid(c);
            let target = if centroid[0] < 0.0 { -5.0 } else { 5.0 };
            assert!(centroid.iter().all(|&v| (v - target).abs() < 0.1), "{centroid:?}");
        }
        assert_eq!(train_ivf(&ds, 2, 20, 11).unwrap(), index);
    }

    #[test]
    fn binary_roundtrip() {
        let mut ds = gaussian_store(300, 12, 5);
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"KNND");
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 300 * 12 * 4 + 300 * 8);
        assert_eq!(Datastore::read(&buf[..]).unwrap(), ds);
        assert!(Datastore::read(&buf[..buf.len() - 1]).is_err());

        let index = train_ivf(&ds, 10, 5, 1).unwrap().with_nprobe(3);
        let mut ibuf = Vec::new();
        index.write(&mut ibuf).unwrap();
        assert_eq!(&ibuf[..4], b"KNNI");
        let back = IvfIndex::read(&ibuf[..]).unwrap();
        assert_eq!(back, index);
        ds.set_index(back).unwrap();
        let mut other = gaussian_store(301, 12, 5);
        assert!(other.set_index(index).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn posting_lists_partition_entries(n in 5usize..200, clusters in 1usize..5, seed in 0u64..1000) {
            let ds = gaussian_store(n, 3, seed);
            let index = train_ivf(&ds, clusters.min(n), 4, seed).unwrap();
            let mut all: Vec<u32> = index.lists().iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
        }

        #[test]
        fn distances_sorted_and_filter_respected(seed in 0u64..1000, k in 1usize..40, excl in 0u32..6) {
            let ds = gaussian_store(120, 4, seed);
            let q = ds.key(0).to_vec();
            let nn = ds.query_exact(&q, k, Some(excl)).unwrap();
            prop_assert!(nn.windows(2).all(|w| w[0].distance <= w[1].distance));
            prop_assert!(nn.iter().all(|n| n.talk_id != excl && n.distance >= 0.0));
        }

        #[test]
        fn serialization_is_identity(n in 0usize..50, dim in 1usize..9, seed in 0u64..100) {
            let ds = gaussian_store(n, dim, seed);
            let mut buf = Vec::new();
            ds.write(&mut buf).unwrap();
            let back = Datastore::read(&buf[..]).unwrap();
            prop_assert_eq!(back.keys().iter().map(|k| k.to_bits()).collect::<Vec<_>>(),
                            ds.keys().iter().map(|k| k.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, ds);
        }
    }
}
