//! Frozen target store.
//!
//! Three files in one directory:
//! - `targets.bin`: magic, version, rows and dim, then row-major
//!   little-endian `f32` values;
//! - `targets.idx`: one `user_id\trow` line per row;
//! - `targets.sha256`: digest of the two files above.

use std::collections::HashMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ProfileError;
use crate::digest::sha256_parts;
use crate::distill::TargetLookup;

const MAGIC: &[u8; 8] = b"SQDTGT\0\0";
const VERSION: u32 = 1;
pub const BIN_FILE: &str = "targets.bin";
pub const INDEX_FILE: &str = "targets.idx";
pub const DIGEST_FILE: &str = "targets.sha256";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTarget {
    pub user_id: String,
    pub vector: Vec<f32>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetStore {
    user_ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl TargetStore {
    /// Rows sorted by user id. Vectors must share one dimension, be finite
    /// and belong to distinct users.
    pub fn from_targets(mut targets: Vec<ProfileTarget>) -> Result<Self, ProfileError> {
        targets.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        let dim = targets.first().map_or(0, |t| t.vector.len());
        if dim == 0 {
            return Err(ProfileError::Store(
                "no targets or zero-length vectors".into(),
            ));
        }
        let mut user_ids = Vec::with_capacity(targets.len());
        let mut data = Vec::with_capacity(targets.len() * dim);
        let mut index = HashMap::new();
        for (row, t) in targets.into_iter().enumerate() {
            if t.vector.len() != dim {
                return Err(ProfileError::DimensionMismatch {
                    expected: dim,
                    got: t.vector.len(),
                });
            }
            if t.vector.iter().any(|v| !v.is_finite()) {
                return Err(ProfileError::Store(format!(
                    "non-finite target for `{}`",
                    t.user_id
                )));
            }
            if t.user_id.contains(['\t', '\n']) || t.user_id.is_empty() {
                return Err(ProfileError::Store(format!(
                    "unusable user id {:?}",
                    t.user_id
                )));
            }
            if index.insert(t.user_id.clone(), row).is_some() {
                return Err(ProfileError::Store(format!(
                    "duplicate user `{}`",
                    t.user_id
                )));
            }
            user_ids.push(t.user_id);
            data.extend(t.vector);
        }
        Ok(Self {
            user_ids,
            dim,
            data,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn get(&self, user_id: &str) -> Option<&[f32]> {
        self.index
            .get(user_id)
            .map(|&r| &self.data[r * self.dim..(r + 1) * self.dim])
    }

    fn encode(&self) -> (Vec<u8>, Vec<u8>) {
        let mut bin = Vec::with_capacity(24 + self.data.len() * 4);
        bin.extend_from_slice(MAGIC);
        bin.extend_from_slice(&VERSION.to_le_bytes());
        bin.extend_from_slice(&(self.len() as u64).to_le_bytes());
        bin.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        let idx: String = self
            .user_ids
            .iter()
            .enumerate()
            .map(|(r, u)| format!("{u}\t{r}\n"))
            .collect();
        (bin, idx.into_bytes())
    }

    /// Digest over the exact bytes written to disk.
    pub fn digest(&self) -> String {
        let (bin, idx) = self.encode();
        sha256_parts([bin.as_slice(), idx.as_slice()])
    }

    /// Writes the three files and returns the digest.
    pub fn write(&self, dir: &Path) -> Result<String, ProfileError> {
        fs::create_dir_all(dir)?;
        let (bin, idx) = self.encode();
        let digest = sha256_parts([bin.as_slice(), idx.as_slice()]);
        fs::write(dir.join(BIN_FILE), &bin)?;
        fs::write(dir.join(INDEX_FILE), &idx)?;
        fs::write(dir.join(DIGEST_FILE), format!("{digest}\n"))?;
        Ok(digest)
    }

    pub fn paths(dir: &Path) -> [PathBuf; 3] {
        [
            dir.join(BIN_FILE),
            dir.join(INDEX_FILE),
            dir.join(DIGEST_FILE),
        ]
    }

    /// Digest of the store files as they are on disk now.
    pub fn digest_on_disk(dir: &Path) -> Result<String, ProfileError> {
        let bin = fs::read(dir.join(BIN_FILE))?;
        let idx = fs::read(dir.join(INDEX_FILE))?;
        Ok(sha256_parts([bin.as_slice(), idx.as_slice()]))
    }

    /// Loads the store, refusing it if the files no longer match the
    /// recorded digest.
    pub fn read(dir: &Path) -> Result<Self, ProfileError> {
        let bin = fs::read(dir.join(BIN_FILE))?;
        let idx = fs::read(dir.join(INDEX_FILE))?;
        let recorded = fs::read_to_string(dir.join(DIGEST_FILE))?
            .trim()
            .to_string();
        let found = sha256_parts([bin.as_slice(), idx.as_slice()]);
        if recorded != found {
            return Err(ProfileError::DigestMismatch { recorded, found });
        }
        let corrupt =
            |m: &str| ProfileError::Store(format!("{}: {m}", dir.join(BIN_FILE).display()));
        if bin.len() < 24 || &bin[..8] != MAGIC {
            return Err(corrupt("bad header"));
        }
        let version = u32::from_le_bytes(bin[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(bin[12..20].try_into().expect("8 bytes")) as usize;
        let dim = u32::from_le_bytes(bin[20..24].try_into().expect("4 bytes")) as usize;
        if bin.len() != 24 + rows * dim * 4 {
            return Err(corrupt("length does not match header"));
        }
        let data: Vec<f32> = bin[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut user_ids = vec![String::new(); rows];
        for (n, line) in idx.lines().enumerate() {
            let line = line?;
            let (u, r) = line
                .split_once('\t')
                .ok_or_else(|| ProfileError::Store(format!("index line {} malformed", n + 1)))?;
            let r: usize = r.parse().ok().filter(|&r| r < rows).ok_or_else(|| {
                ProfileError::Store(format!("index line {} has a bad row", n + 1))
            })?;
            user_ids[r] = u.to_string();
        }
        let index = user_ids
            .iter()
            .enumerate()
            .map(|(r, u)| (u.clone(), r))
            .collect();
        Ok(Self {
            user_ids,
            dim,
            data,
            index,
        })
    }

    /// Targets supplied as text: `user_id<TAB>v1,v2,...` per line.
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self, ProfileError> {
        let mut targets = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || ProfileError::Store(format!("target line {} malformed", n + 1));
            let (u, v) = line.split_once('\t').ok_or_else(bad)?;
            let vector = v
                .split(',')
                .map(|x| x.trim().parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            targets.push(ProfileTarget {
                user_id: u.to_string(),
                vector,
                frozen: true,
            });
        }
        Self::from_targets(targets)
    }

    pub fn to_tsv(&self) -> String {
        self.user_ids
            .iter()
            .map(|u| {
                let v: Vec<String> = self
                    .get(u)
                    .expect("indexed")
                    .iter()
                    .map(|x| format!("{x}"))
                    .collect();
                format!("{u}\t{}\n", v.join(","))
            })
            .collect()
    }
}

impl TargetLookup for TargetStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn target(&self, user_id: &str) -> Option<&[f32]> {
        self.get(user_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> TargetStore {
        TargetStore::from_targets(vec![
            ProfileTarget {
                user_id: "b".into(),
                vector: vec![1.5, -2.0, 0.25],
                frozen: true,
            },
            ProfileTarget {
                user_id: "a".into(),
                vector: vec![0.0, 1e-7, 3.0],
                frozen: true,
            },
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let d = s.write(dir.path()).unwrap();
        assert_eq!(d, s.digest());
        assert_eq!(TargetStore::digest_on_disk(dir.path()).unwrap(), d);
        let back = TargetStore::read(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.get("a").unwrap(), &[0.0, 1e-7, 3.0]);
        assert_eq!(back.user_ids(), ["a", "b"]);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        store().write(dir.path()).unwrap();
        let p = dir.path().join(BIN_FILE);
        let mut bytes = fs::read(&p).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            TargetStore::read(dir.path()),
            Err(ProfileError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn invalid_sets_are_rejected() {
        let t = |u: &str, v: Vec<f32>| ProfileTarget {
            user_id: u.into(),
            vector: v,
            frozen: true,
        };
        assert!(
            TargetStore::from_targets(vec![t("a", vec![1.0]), t("b", vec![1.0, 2.0])]).is_err()
        );
        assert!(TargetStore::from_targets(vec![t("a", vec![1.0]), t("a", vec![2.0])]).is_err());
        assert!(TargetStore::from_targets(vec![t("a", vec![f32::NAN])]).is_err());
        assert!(TargetStore::from_targets(vec![]).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let s = store();
        let back = TargetStore::read_tsv(s.to_tsv().as_bytes()).unwrap();
        assert_eq!(back, s);
        assert!(TargetStore::read_tsv("a\t1,x\n".as_bytes()).is_err());
    }
}
