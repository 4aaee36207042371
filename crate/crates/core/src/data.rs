//! Dataset ingestion: CIFAR-10 binary batches and a seeded synthetic set.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "ADJSCC_DATA_DIR";

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILES: [&str; 1] = ["test_batch.bin"];
/// Optional `sha256sum`-format manifest checked against the batch files.
pub const CHECKSUM_MANIFEST: &str = "SHA256SUMS";

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Cifar10,
    Synthetic,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Data(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub path: Option<PathBuf>,
    pub split: Split,
    pub subset: Option<usize>,
    pub seed: u64,
    /// Synthetic images only: size of the split and image geometry.
    pub synthetic_size: usize,
    pub height: usize,
    pub width: usize,
}

/// Images `[N, 3, H, W]` in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        self.images.select_outer(idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], u8)> + '_ {
        (0..self.len()).map(move |i| (self.images.outer(i), self.labels[i]))
    }
}

pub fn ingest_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let full = match spec.name {
        DatasetName::Cifar10 => {
            let dir = match &spec.path {
                Some(p) => p.clone(),
                None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                    Error::Data(format!("no CIFAR-10 directory given and {DATA_DIR_ENV} is unset"))
                })?,
            };
            load_cifar10(&dir, spec.split)?
        }
        DatasetName::Synthetic => synthetic(spec),
    };
    let mut order: Vec<usize> = (0..full.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5E_ED0F_DA7A);
    order.shuffle(&mut rng);
    if let Some(n) = spec.subset {
        if n > full.len() {
            return Err(Error::Data(format!(
                "subset of {n} requested from a split of {}",
                full.len()
            )));
        }
        order.truncate(n);
    }
    Ok(full.subset(&order))
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Parses a `sha256sum` manifest into `(file name, digest)` pairs.
fn read_manifest(dir: &Path) -> Result<Option<Vec<(String, String)>>> {
    let path = dir.join(CHECKSUM_MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let entries = text
        .lines()
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            let digest = parts.next()?.to_ascii_lowercase();
            let name = parts.next()?.trim_start_matches('*');
            Some((name.to_string(), digest))
        })
        .collect();
    Ok(Some(entries))
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: &[&str] = match split {
        Split::Train => &CIFAR_TRAIN_FILES,
        Split::Test => &CIFAR_TEST_FILES,
    };
    let manifest = read_manifest(dir)?;
    let mut pixels = Vec::with_capacity(files.len() * CIFAR_BATCH_RECORDS * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(files.len() * CIFAR_BATCH_RECORDS);
    for name in files {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Data(format!("missing CIFAR-10 file {}", path.display())));
        }
        if let Some(entries) = &manifest {
            let expected = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Data(format!("{name} is not listed in {CHECKSUM_MANIFEST}")))?;
            let actual = sha256_file(&path)?;
            if actual != expected.1 {
                return Err(Error::Data(format!("checksum mismatch for {name}")));
            }
        }
        let bytes = std::fs::read(&path)?;
        if bytes.len() != CIFAR_BATCH_RECORDS * CIFAR_RECORD {
            return Err(Error::Data(format!(
                "{name} has {} bytes, expected {}",
                bytes.len(),
                CIFAR_BATCH_RECORDS * CIFAR_RECORD
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Data(format!("{name} holds label {}", rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], pixels),
        labels,
    })
}

/// Seeded smooth images whose label sets their texture complexity.
///
/// Class `c` sums `c + 1` random colored sinusoids with spatial frequencies up
/// to `1 + 0.6 c` cycles per image, so higher labels carry more detail and are
/// harder to reconstruct at a given rate. Image `i` depends only on
/// `(seed, split, i)`.
pub fn synthetic(spec: &DatasetSpec) -> Dataset {
    let (h, w) = (spec.height, spec.width);
    let split_tag: u64 = match spec.split {
        Split::Train => 0x7A41,
        Split::Test => 0x7E57,
    };
    let mut pixels = Vec::with_capacity(spec.synthetic_size * 3 * h * w);
    let mut labels = Vec::with_capacity(spec.synthetic_size);
    for i in 0..spec.synthetic_size {
        let label = (i % NUM_CLASSES) as u8;
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(split_tag << 32)
                .wrapping_add(i as u64),
        );
        pixels.extend(synthetic_image(label as usize, h, w, &mut rng));
        labels.push(label);
    }
    Dataset {
        images: Tensor::from_vec(&[spec.synthetic_size, 3, h, w], pixels),
        labels,
    }
}

fn synthetic_image(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        color: [f64; 3],
    }
    let components = class + 1;
    let max_freq = 1.0 + 0.6 * class as f64;
    let amp = 0.3 / (components as f64).sqrt();
    let base: [f64; 3] = std::array::from_fn(|_| 0.5 + rng.random_range(-0.15..0.15));
    let waves: Vec<Wave> = (0..components)
        .map(|_| Wave {
            fx: rng.random_range(-max_freq..max_freq),
            fy: rng.random_range(-max_freq..max_freq),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            color: std::array::from_fn(|_| rng.random_range(0.3..1.0)),
        })
        .collect();
    let mut out = vec![0f32; 3 * h * w];
    for (c, plane) in out.chunks_exact_mut(h * w).enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = waves.iter().fold(base[c], |acc, wv| {
                    let t = std::f64::consts::TAU
                        * (wv.fx * x as f64 / w as f64 + wv.fy * y as f64 / h as f64)
                        + wv.phase;
                    acc + amp * wv.color[c] * t.sin()
                });
                plane[y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(split: Split, n: usize) -> DatasetSpec {
        DatasetSpec {
            name: DatasetName::Synthetic,
            path: None,
            split,
            subset: None,
            seed: 3,
            synthetic_size: n,
            height: 16,
            width: 16,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = ingest_dataset(&spec(Split::Train, 64)).unwrap();
        let b = ingest_dataset(&spec(Split::Train, 64)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels.iter().all(|&l| (l as usize) < NUM_CLASSES));
        let t = ingest_dataset(&spec(Split::Test, 64)).unwrap();
        assert_ne!(a.images, t.images);
    }

    #[test]
    fn subset_bounds() {
        let mut s = spec(Split::Train, 20);
        s.subset = Some(5);
        assert_eq!(ingest_dataset(&s).unwrap().len(), 5);
        s.subset = Some(21);
        assert!(matches!(ingest_dataset(&s), Err(Error::Data(_))));
    }

    #[test]
    fn unknown_dataset_name() {
        assert!("imagenet".parse::<DatasetName>().is_err());
        assert_eq!("cifar10".parse::<DatasetName>().unwrap(), DatasetName::Cifar10);
    }

    fn write_fake_cifar(dir: &Path) {
        for (k, name) in CIFAR_TRAIN_FILES.iter().chain(&CIFAR_TEST_FILES).enumerate() {
            let mut bytes = vec![0u8; CIFAR_BATCH_RECORDS * CIFAR_RECORD];
            for (i, rec) in bytes.chunks_exact_mut(CIFAR_RECORD).enumerate() {
                rec[0] = ((i + k) % 10) as u8;
                rec[1] = 255;
            }
            std::fs::write(dir.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn cifar_split_sizes_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path());
        let train = load_cifar10(dir.path(), Split::Train).unwrap();
        let test = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        assert_eq!(test.images.outer(0)[0], 1.0);
        assert_eq!(test.images.outer(0)[1], 0.0);
    }

    #[test]
    fn cifar_checksum_manifest_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path());
        let good = sha256_file(&dir.path().join("test_batch.bin")).unwrap();
        std::fs::write(dir.path().join(CHECKSUM_MANIFEST), format!("{good}  test_batch.bin\n")).unwrap();
        assert!(load_cifar10(dir.path(), Split::Test).is_ok());
        std::fs::write(dir.path().join(CHECKSUM_MANIFEST), format!("{}  test_batch.bin\n", "0".repeat(64))).unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Data(_))));
    }

    #[test]
    fn cifar_missing_or_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Data(_))));
        std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 100]).unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Data(_))));
    }
}
