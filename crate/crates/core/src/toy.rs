//! Synthetic clustered interaction data with known profile targets.
//!
//! Users belong to latent clusters. Each cluster owns a contiguous block of
//! items arranged on a ring; a user walks the ring of their cluster one or
//! two steps at a time, with occasional random detours anywhere in the
//! catalog. The per-user target is the cluster centroid plus isotropic
//! Gaussian noise, standing in for an encoded LLM profile.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_records, InteractionRecord, ItemMeta};
use crate::profile::{ProfileTarget, TargetStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next interaction continues the cluster walk.
    pub walk_prob: f64,
    pub target_dim: usize,
    pub target_noise: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 200,
            num_clusters: 5,
            min_len: 20,
            max_len: 35,
            walk_prob: 0.85,
            target_dim: 32,
            target_noise: 0.1,
            seed: 20240917,
        }
    }
}

const GENRES: [&str; 8] = [
    "Drama",
    "Comedy",
    "Documentary",
    "Thriller",
    "Animation",
    "Romance",
    "Sci-Fi",
    "Western",
];
const BASE_TS: u64 = 1_600_000_000;

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub records: Vec<InteractionRecord>,
    pub items: BTreeMap<String, ItemMeta>,
    pub user_cluster: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub targets: Vec<ProfileTarget>,
}

pub fn user_id(u: usize) -> String {
    format!("u{u:04}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i:04}")
}

pub fn generate(cfg: &ToyConfig) -> ToyDataset {
    assert!(
        cfg.num_clusters > 0 && cfg.num_items >= cfg.num_clusters,
        "need items per cluster"
    );
    assert!(
        cfg.min_len >= 2 && cfg.max_len >= cfg.min_len,
        "bad sequence lengths"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, cfg.target_noise).expect("valid noise");
    let per = cfg.num_items / cfg.num_clusters;
    let cluster_of_item = |i: usize| (i / per).min(cfg.num_clusters - 1);

    let centroids: Vec<Vec<f64>> = (0..cfg.num_clusters)
        .map(|_| (0..cfg.target_dim).map(|_| std.sample(&mut rng)).collect())
        .collect();

    let items = (0..cfg.num_items)
        .map(|i| {
            let c = cluster_of_item(i);
            let meta = ItemMeta {
                title: Some(format!("Title {i}")),
                categories: Some(format!("Collection {c}")),
                description: (i % 3 == 0)
                    .then(|| format!("A {} story, part {}.", GENRES[c % 8], i % per + 1)),
                genres: Some(format!("{}|{}", GENRES[c % 8], GENRES[(c + i) % 8])),
            };
            (item_id(i), meta)
        })
        .collect();

    let mut records = Vec::new();
    let mut user_cluster = BTreeMap::new();
    let mut targets = Vec::new();
    for u in 0..cfg.num_users {
        let c = u % cfg.num_clusters;
        let uid = user_id(u);
        user_cluster.insert(uid.clone(), c);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut ts = BASE_TS + rng.random_range(0..400_000u64);
        let mut pos = rng.random_range(0..per);
        for _ in 0..len {
            let (item, rating) = if rng.random::<f64>() < cfg.walk_prob {
                pos = (pos + if rng.random::<f64>() < 0.8 { 1 } else { 2 }) % per;
                (c * per + pos, rng.random_range(4..=5))
            } else {
                (rng.random_range(0..cfg.num_items), rng.random_range(1..=3))
            };
            records.push(
                InteractionRecord::new(uid.clone(), item_id(item), ts, Some(rating as f64))
                    .expect("valid record"),
            );
            ts += rng.random_range(1_000..40_000u64);
        }
        targets.push(ProfileTarget {
            user_id: uid,
            vector: centroids[c]
                .iter()
                .map(|&m| (m + noise.sample(&mut rng)) as f32)
                .collect(),
            frozen: true,
        });
    }
    records.sort_by(|a, b| (a.timestamp, &a.user_id).cmp(&(b.timestamp, &b.user_id)));
    ToyDataset {
        records,
        items,
        user_cluster,
        centroids,
        targets,
    }
}

impl ToyDataset {
    /// Writes `interactions.tsv`, `items.tsv`, `targets.tsv` and
    /// `clusters.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        write_records(
            io::BufWriter::new(fs::File::create(dir.join("interactions.tsv"))?),
            &self.records,
        )?;
        let mut w = io::BufWriter::new(fs::File::create(dir.join("items.tsv"))?);
        writeln!(w, "item_id\ttitle\tcategories\tdescription\tgenres")?;
        for (id, m) in &self.items {
            let f = |v: &Option<String>| v.clone().unwrap_or_default();
            writeln!(
                w,
                "{id}\t{}\t{}\t{}\t{}",
                f(&m.title),
                f(&m.categories),
                f(&m.description),
                f(&m.genres)
            )?;
        }
        w.flush()?;
        let store = TargetStore::from_targets(self.targets.clone()).map_err(io::Error::other)?;
        fs::write(dir.join("targets.tsv"), store.to_tsv())?;
        let clusters: String = self
            .user_cluster
            .iter()
            .map(|(u, c)| format!("{u}\t{c}\n"))
            .collect();
        fs::write(dir.join("clusters.tsv"), clusters)
    }
}
