//! Synthetic dataset generators, CSV ingestion and client partitioners.
//!
//! Partitions come in three kinds: PρCς (ρ clients, each holding exactly ς
//! classes, class samples split equally among owners), Dirichlet(β)
//! allocation per class, and IID. All of them are deterministic functions of
//! their seed and produce shards that are disjoint and cover the dataset.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

/// Labeled samples with dense row-major features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub input_dim: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the rows at `indices` into a contiguous batch buffer.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut feats = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            feats.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        (feats, labels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("dataset has no samples".into()));
        }
        if self.features.len() != self.len() * self.input_dim {
            return Err(Error::Dimension(format!(
                "feature buffer length {} is not {} rows of width {}",
                self.features.len(),
                self.len(),
                self.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Indices of one client's samples within a parent dataset.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub class_set: BTreeSet<usize>,
}

impl ClientShard {
    fn from_indices(client_id: usize, indices: Vec<usize>, ds: &Dataset) -> Self {
        let class_set = indices.iter().map(|&i| ds.labels[i]).collect();
        Self { client_id, indices, class_set }
    }
}

/// Partition strategy plus its seed.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionKind {
    Pcdd { clients: usize, classes_per_client: usize },
    Dirichlet { clients: usize, beta: f64 },
    Iid { clients: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn num_clients(&self) -> usize {
        match self.kind {
            PartitionKind::Pcdd { clients, .. } => clients,
            PartitionKind::Dirichlet { clients, .. } => clients,
            PartitionKind::Iid { clients } => clients,
        }
    }
}

/// Dispatches to the partitioner for `spec.kind`.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    match spec.kind {
        PartitionKind::Pcdd { clients, classes_per_client } => {
            partition_pcdd(ds, clients, classes_per_client, spec.seed)
        }
        PartitionKind::Dirichlet { clients, beta } => partition_dirichlet(ds, beta, clients, spec.seed),
        PartitionKind::Iid { clients } => partition_iid(ds, clients, spec.seed),
    }
}

fn disk_sample(rng: &mut ChaCha8Rng, cx: f64, cy: f64, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen_range(0.0..1.0f64).sqrt();
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    (cx + r * theta.cos(), cy + r * theta.sin())
}

/// Uniform samples on one disk per class.
pub fn gen_circles(centers: &[(f64, f64)], radius: f64, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if centers.is_empty() || n_per_class == 0 {
        return Err(Error::Contract(
            "circles generator needs at least one center and one sample per class".into(),
        ));
    }
    if radius <= 0.0 {
        return Err(Error::Domain(format!("radius must be positive, got {radius}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(centers.len() * n_per_class * 2);
    let mut labels = Vec::with_capacity(centers.len() * n_per_class);
    for (c, &(cx, cy)) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let (x, y) = disk_sample(&mut rng, cx, cy, radius);
            features.push(x);
            features.push(y);
            labels.push(c);
        }
    }
    Ok(Dataset { features, input_dim: 2, labels, num_classes: centers.len() })
}

/// Four disks of radius 0.5 centered on the corners (±1, ±1), 5000 samples
/// per class.
pub fn gen_circles_default(seed: u64) -> Dataset {
    gen_circles(&[(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)], 0.5, 5000, seed)
        .expect("default circle parameters are valid")
}

pub const MOTIVATION_CENTERS: [(f64, f64); 3] = [(1.0, 0.0), (0.0, 1.732050807568877), (0.0, -1.732050807568877)];

/// Three disks of radius 1/2 centered at (1, 0), (0, √3) and (0, −√3).
pub fn gen_motivation(n_per_class: usize, seed: u64) -> Result<Dataset> {
    gen_circles(&MOTIVATION_CENTERS, 0.5, n_per_class, seed)
}

fn class_indices(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// PρCς partition: classes handed out in contiguous order until all are
/// placed, clients still short of ς classes draw the remainder uniformly
/// without replacement, then each class's samples are split equally among
/// its owners (remainder samples to the lowest client ids).
pub fn partition_pcdd(
    ds: &Dataset,
    clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    ds.validate()?;
    let c = ds.num_classes;
    if clients == 0 || classes_per_client == 0 {
        return Err(Error::InfeasiblePartition("clients and classes_per_client must be positive".into()));
    }
    if classes_per_client > c {
        return Err(Error::InfeasiblePartition(format!(
            "classes_per_client {classes_per_client} exceeds the {c} available classes"
        )));
    }
    if clients * classes_per_client < c {
        return Err(Error::InfeasiblePartition(format!(
            "{clients} clients x {classes_per_client} classes cannot cover {c} classes"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); clients];
    let mut next_class = 0;
    for set in class_sets.iter_mut() {
        while set.len() < classes_per_client && next_class < c {
            set.insert(next_class);
            next_class += 1;
        }
    }
    for set in class_sets.iter_mut() {
        while set.len() < classes_per_client {
            let missing: Vec<usize> = (0..c).filter(|cl| !set.contains(cl)).collect();
            let &pick = missing.choose(&mut rng).expect("set is smaller than the class count");
            set.insert(pick);
        }
    }

    let by_class = class_indices(ds);
    let mut indices: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (class, samples) in by_class.iter().enumerate() {
        let owners: Vec<usize> = (0..clients).filter(|&k| class_sets[k].contains(&class)).collect();
        if owners.is_empty() {
            continue; // unreachable given the coverage check above
        }
        let base = samples.len() / owners.len();
        let rem = samples.len() % owners.len();
        let mut cursor = 0;
        for (rank, &owner) in owners.iter().enumerate() {
            let take = base + usize::from(rank < rem);
            indices[owner].extend_from_slice(&samples[cursor..cursor + take]);
            cursor += take;
        }
    }

    Ok(indices
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.sort_unstable();
            ClientShard::from_indices(k, idx, ds)
        })
        .collect())
}

/// Dirichlet(β) partition: per class, one Dir(β) draw over clients allocates
/// that class's samples proportionally; rounding remainders go to the
/// largest fractional parts.
pub fn partition_dirichlet(ds: &Dataset, beta: f64, clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    ds.validate()?;
    if clients == 0 {
        return Err(Error::InfeasiblePartition("need at least one client".into()));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Domain(format!("dirichlet beta must be positive, got {beta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Domain(format!("invalid gamma shape: {e}")))?;
    let by_class = class_indices(ds);
    let mut indices: Vec<Vec<usize>> = vec![Vec::new(); clients];

    for samples in by_class.iter() {
        if samples.is_empty() {
            continue;
        }
        // Symmetric Dirichlet via normalized Gamma draws.
        let mut draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if total <= 0.0 {
            draws = vec![1.0; clients];
        }
        let total: f64 = draws.iter().sum();
        let quotas: Vec<f64> = draws.iter().map(|d| d / total * samples.len() as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..clients).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &k in order.iter().take(samples.len() - assigned) {
            counts[k] += 1;
        }
        let mut cursor = 0;
        for (k, &take) in counts.iter().enumerate() {
            indices[k].extend_from_slice(&samples[cursor..cursor + take]);
            cursor += take;
        }
    }

    Ok(indices
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.sort_unstable();
            ClientShard::from_indices(k, idx, ds)
        })
        .collect())
}

/// IID partition: a seeded shuffle split into near-equal shards.
pub fn partition_iid(ds: &Dataset, clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    ds.validate()?;
    if clients == 0 {
        return Err(Error::InfeasiblePartition("need at least one client".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..ds.len()).collect();
    all.shuffle(&mut rng);
    let base = ds.len() / clients;
    let rem = ds.len() % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut cursor = 0;
    for k in 0..clients {
        let take = base + usize::from(k < rem);
        let mut idx = all[cursor..cursor + take].to_vec();
        idx.sort_unstable();
        cursor += take;
        shards.push(ClientShard::from_indices(k, idx, ds));
    }
    Ok(shards)
}

/// Reads `f1,...,fm,label` rows under a mandatory header line.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let width = {
        let header = reader
            .headers()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if header.len() < 2 {
            return Err(Error::Format(format!(
                "{}: header needs at least one feature column and a label column",
                path.display()
            )));
        }
        header.len() - 1
    };

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width + 1 {
            return Err(Error::Parse(format!(
                "{} line {line}: expected {} fields, found {}",
                path.display(),
                width + 1,
                record.len()
            )));
        }
        for (col, field) in record.iter().take(width).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!(
                    "{} line {line}: feature column {} is not a number: {field:?}",
                    path.display(),
                    col + 1
                ))
            })?;
            features.push(v);
        }
        let label_field = &record[width];
        let label: usize = label_field.parse().map_err(|_| {
            Error::Parse(format!(
                "{} line {line}: label is not a nonnegative integer: {label_field:?}",
                path.display()
            ))
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    Ok(Dataset { features, input_dim: width, labels, num_classes })
}

/// Writes the dataset in [`load_csv`]'s format with 17 significant digits,
/// enough for f64 round trips to be bit-exact.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let header: Vec<String> = (1..=ds.input_dim).map(|i| format!("f{i}")).collect();
    writeln!(file, "{},label", header.join(","))?;
    for i in 0..ds.len() {
        let row: Vec<String> = ds.feature_row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(file, "{},{}", row.join(","), ds.labels[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circles_default_counts_and_radius() {
        let ds = gen_circles(&[(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)], 0.5, 5000, 9).unwrap();
        assert_eq!(ds.len(), 20_000);
        let mut counts = [0usize; 4];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [5000; 4]);
        let centers = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
        for i in 0..ds.len() {
            let (cx, cy) = centers[ds.labels[i]];
            let row = ds.feature_row(i);
            let dist = ((row[0] - cx).powi(2) + (row[1] - cy).powi(2)).sqrt();
            assert!(dist <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn circles_same_seed_identical() {
        let a = gen_circles_default(4);
        let b = gen_circles_default(4);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn motivation_geometry() {
        let ds = gen_motivation(100_000, 3).unwrap();
        assert!(ds.labels.iter().all(|&l| l < 3));
        // Law of large numbers: class centroids approach the disk centers.
        let mut sums = [[0.0f64; 2]; 3];
        let mut counts = [0usize; 3];
        for i in 0..ds.len() {
            let row = ds.feature_row(i);
            sums[ds.labels[i]][0] += row[0];
            sums[ds.labels[i]][1] += row[1];
            counts[ds.labels[i]] += 1;
        }
        for c in 0..3 {
            let mx = sums[c][0] / counts[c] as f64;
            let my = sums[c][1] / counts[c] as f64;
            let (cx, cy) = MOTIVATION_CENTERS[c];
            assert!((mx - cx).abs() < 0.01 && (my - cy).abs() < 0.01, "class {c} centroid ({mx}, {my})");
        }
        // Class 0 stays within its disk's x-range.
        for i in 0..ds.len() {
            if ds.labels[i] == 0 {
                let x = ds.feature_row(i)[0];
                assert!((0.5..=1.5).contains(&x));
            }
        }
    }

    fn assert_disjoint_cover(shards: &[ClientShard], n: usize) {
        let mut seen = vec![false; n];
        for s in shards {
            for &i in &s.indices {
                assert!(!seen[i], "index {i} in two shards");
                seen[i] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s), "not covering");
    }

    #[test]
    fn pcdd_exact_cover_is_ordered_slicing() {
        let centers = vec![(0.0, 0.0); 10];
        let ds = gen_circles(&centers, 0.5, 30, 1).unwrap();
        let shards = partition_pcdd(&ds, 5, 2, 11).unwrap();
        for (k, s) in shards.iter().enumerate() {
            let expect: BTreeSet<usize> = [2 * k, 2 * k + 1].into_iter().collect();
            assert_eq!(s.class_set, expect);
        }
        // every class owned by exactly one client
        let mut owners = [0usize; 10];
        for s in &shards {
            for &c in &s.class_set {
                owners[c] += 1;
            }
        }
        assert!(owners.iter().all(|&o| o == 1));
        assert_disjoint_cover(&shards, ds.len());
    }

    #[test]
    fn pcdd_with_random_fill_keeps_class_count() {
        let centers: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.0)).collect();
        let ds = gen_circles(&centers, 0.5, 40, 2).unwrap();
        let shards = partition_pcdd(&ds, 10, 3, 5).unwrap();
        let mut union = BTreeSet::new();
        for s in &shards {
            assert_eq!(s.class_set.len(), 3, "client {} classes {:?}", s.client_id, s.class_set);
            union.extend(s.class_set.iter().copied());
        }
        assert_eq!(union.len(), 10);
        assert_disjoint_cover(&shards, ds.len());
    }

    #[test]
    fn pcdd_equal_split_remainder_to_low_ids() {
        // One class, 7 samples, 3 owners: 3/2/2 in client-id order.
        let ds = Dataset {
            features: vec![0.0; 14],
            input_dim: 2,
            labels: vec![0; 7],
            num_classes: 1,
        };
        let shards = partition_pcdd(&ds, 3, 1, 0).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.indices.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
    }

    #[test]
    fn pcdd_infeasible_rejected() {
        let ds = gen_circles_default(0);
        let err = partition_pcdd(&ds, 1, 2, 0).unwrap_err();
        assert_eq!(err.category(), "partition");
    }

    #[test]
    fn pcdd_deterministic() {
        let centers: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 0.0)).collect();
        let ds = gen_circles(&centers, 0.5, 20, 2).unwrap();
        let a = partition_pcdd(&ds, 8, 2, 3).unwrap();
        let b = partition_pcdd(&ds, 8, 2, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
        }
    }

    #[test]
    fn dirichlet_conserves_and_is_deterministic() {
        let centers: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 0.0)).collect();
        let ds = gen_circles(&centers, 0.5, 33, 8).unwrap();
        let a = partition_dirichlet(&ds, 0.5, 7, 21).unwrap();
        assert_disjoint_cover(&a, ds.len());
        let b = partition_dirichlet(&ds, 0.5, 7, 21).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
        }
    }

    #[test]
    fn dirichlet_concentration_limit() {
        // Huge beta concentrates toward equal per-client class counts.
        let centers: Vec<(f64, f64)> = (0..4).map(|i| (i as f64, 0.0)).collect();
        let ds = gen_circles(&centers, 0.5, 1000, 5).unwrap();
        let shards = partition_dirichlet(&ds, 1e6, 4, 17).unwrap();
        for s in &shards {
            let mut per_class = vec![0usize; 4];
            for &i in &s.indices {
                per_class[ds.labels[i]] += 1;
            }
            for &n in &per_class {
                let dev = (n as f64 - 250.0).abs() / 250.0;
                assert!(dev <= 0.02, "client {} class counts {:?}", s.client_id, per_class);
            }
        }
    }

    #[test]
    fn iid_partition_covers() {
        let ds = gen_circles_default(6);
        let shards = partition_iid(&ds, 4, 1).unwrap();
        assert_disjoint_cover(&shards, ds.len());
        assert!(shards.iter().all(|s| s.class_set.len() == 4));
    }

    #[test]
    fn csv_small_file_roundtrip_of_labels() {
        let dir = std::env::temp_dir().join(format!("fedmr-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("small.csv");
        std::fs::write(&path, "f1,f2,label\n0.5,1.5,0\n-1,2,1\n3,4,1\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.labels, vec![0, 1, 1]);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn csv_bad_feature_names_line() {
        let dir = std::env::temp_dir().join(format!("fedmr-csv-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "f1,label\n1.0,0\nxyz,1\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert_eq!(err.category(), "parse");
        assert!(err.to_string().contains("line 3"), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn csv_empty_file_is_format_error() {
        let dir = std::env::temp_dir().join(format!("fedmr-csv-empty-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        std::fs::write(&path, "f1,label\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert_eq!(err.category(), "format");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let ds = gen_motivation(50, 77).unwrap();
        let dir = std::env::temp_dir().join(format!("fedmr-csv-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(ds.features, back.features);
        assert_eq!(ds.labels, back.labels);
        assert_eq!(ds.num_classes, back.num_classes);
        std::fs::remove_file(&path).ok();
    }
}
