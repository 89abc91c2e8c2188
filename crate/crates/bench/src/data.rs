//! Binary image datasets: IDX files, binarization rules, and a synthetic substitute.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rebar_core::autodiff::{Shape, Tensor};
use rebar_core::rng::StreamKey;
use serde::{Deserialize, Serialize};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Largest payload we are willing to allocate (1 GiB).
const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unsupported type: IDX magic {magic:#010x} (expected 0x00000803 images or 0x00000801 labels)")]
    BadMagic { magic: u32 },
    #[error("truncated IDX file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("IDX dimensions {dims:?} overflow the addressable size")]
    DimOverflow { dims: Vec<u64> },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Images are `[count, rows, cols]`; this flattens each to one row.
    pub fn as_rows(&self) -> Result<(usize, usize), DataError> {
        match (self.magic, self.dims.as_slice()) {
            (IDX_IMAGES_MAGIC, [n, r, c]) => Ok((*n, r * c)),
            (IDX_LABELS_MAGIC, [n]) => Ok((*n, 1)),
            _ => Err(DataError::Invalid(format!("dims {:?} do not match magic {:#010x}", self.dims, self.magic))),
        }
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: 4,
            actual: bytes.len() as u64,
        });
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        _ => return Err(DataError::BadMagic { magic }),
    };
    let header = 4 + 4 * ndims as u64;
    if (bytes.len() as u64) < header {
        return Err(DataError::Truncated {
            expected: header,
            actual: bytes.len() as u64,
        });
    }
    let dims: Vec<u64> = (0..ndims)
        .map(|i| {
            let at = 4 + 4 * i;
            u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as u64
        })
        .collect();
    let payload = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_PAYLOAD)
        .ok_or_else(|| DataError::DimOverflow { dims: dims.clone() })?;
    let expected = header + payload;
    if (bytes.len() as u64) < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(IdxArray {
        magic,
        dims: dims.iter().map(|&d| d as usize).collect(),
        data: bytes[header as usize..expected as usize].to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxArray, DataError> {
    parse_idx(&std::fs::read(path)?)
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>, DataError> {
    let n: usize = array.dims.iter().product();
    array.as_rows()?;
    if n != array.data.len() {
        return Err(DataError::Invalid(format!("{} bytes for dims {:?}", array.data.len(), array.dims)));
    }
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + n);
    out.extend_from_slice(&array.magic.to_be_bytes());
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| DataError::DimOverflow {
            dims: array.dims.iter().map(|&d| d as u64).collect(),
        })?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<(), DataError> {
    let bytes = encode_idx(array)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizeRule {
    /// Pixel `≥ 128` maps to 1.
    Threshold,
    /// Pixel `p` maps to 1 with probability `p / 255`, from a seeded stream.
    Bernoulli,
    /// Input is already binary (0/1 or 0/255).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub rule: String,
    pub seed: Option<u64>,
}

impl fmt::Display for DatasetMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seed {
            Some(s) => write!(f, "{} ({}, seed {s})", self.source, self.rule),
            None => write!(f, "{} ({})", self.source, self.rule),
        }
    }
}

/// Row-major `{0,1}` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub images: Vec<f64>,
    pub split: Split,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.images.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-pixel mean, clamped to `[eps, 1 - eps]`.
    pub fn pixel_means(&self, eps: f64) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (acc, x) in m.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        m.iter().map(|s| (s / n).clamp(eps, 1.0 - eps)).collect()
    }

    pub fn batch(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor::new(Shape::Matrix(rows.len(), self.dim), data).expect("sized")
    }

    pub fn all(&self) -> Tensor {
        Tensor::new(Shape::Matrix(self.len(), self.dim), self.images.clone()).expect("sized")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.valid.len(), self.test.len()]
    }
}

pub fn binarize(raw: &IdxArray, rule: BinarizeRule, seed: u64, split: Split) -> Result<Dataset, DataError> {
    let (n, dim) = raw.as_rows()?;
    let mut rng = StreamKey::new(seed, 0, 0, 0).rng();
    let images = raw
        .data
        .iter()
        .map(|&p| match rule {
            BinarizeRule::Threshold => f64::from(p >= 128),
            BinarizeRule::Bernoulli => f64::from(rng.random::<f64>() < f64::from(p) / 255.0),
            BinarizeRule::None => f64::from(p != 0),
        })
        .collect();
    let (rule_name, seed) = match rule {
        BinarizeRule::Threshold => ("threshold_0.5", None),
        BinarizeRule::Bernoulli => ("bernoulli_seeded", Some(seed)),
        BinarizeRule::None => ("prebinarized", None),
    };
    debug_assert_eq!(n * dim, raw.data.len());
    Ok(Dataset {
        dim,
        images,
        split,
        meta: DatasetMeta {
            source: "idx".into(),
            rule: rule_name.into(),
            seed,
        },
    })
}

/// Splits one dataset 80/10/10 in order.
pub fn split_80_10_10(all: Dataset) -> DataSplits {
    let n = all.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let part = |lo: usize, hi: usize, split: Split| Dataset {
        dim: all.dim,
        images: all.images[lo * all.dim..hi * all.dim].to_vec(),
        split,
        meta: all.meta.clone(),
    };
    DataSplits {
        train: part(0, n_train, Split::Train),
        valid: part(n_train, n_train + n_valid, Split::Valid),
        test: part(n_train + n_valid, n, Split::Test),
    }
}

const SYNTHETIC_MODES: usize = 8;

/// Binary patterns from a seeded mixture of product-Bernoulli modes.
pub fn synthetic_dataset(dim: usize, count: usize, seed: u64) -> Result<DataSplits, DataError> {
    if dim == 0 || count == 0 {
        return Err(DataError::Invalid(format!("synthetic data needs dim, count > 0 (got {dim}, {count})")));
    }
    let mut rng = StreamKey::new(seed, 0, 0, 1).rng();
    let modes: Vec<Vec<f64>> = (0..SYNTHETIC_MODES)
        .map(|_| {
            (0..dim)
                .map(|_| if rng.random::<bool>() { rng.random_range(0.7..0.95) } else { rng.random_range(0.05..0.3) })
                .collect()
        })
        .collect();
    let mut images = Vec::with_capacity(dim * count);
    for _ in 0..count {
        let m = &modes[rng.random_range(0..SYNTHETIC_MODES)];
        images.extend(m.iter().map(|&p| f64::from(rng.random::<f64>() < p)));
    }
    Ok(split_80_10_10(Dataset {
        dim,
        images,
        split: Split::Train,
        meta: DatasetMeta {
            source: format!("synthetic(dim={dim}, count={count}, modes={SYNTHETIC_MODES})"),
            rule: "mixture_of_bernoulli".into(),
            seed: Some(seed),
        },
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> IdxArray {
        IdxArray {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![4, 2, 3],
            data: (0..24).map(|i| (i * 11) as u8).collect(),
        }
    }

    #[test]
    fn idx_round_trip() {
        let a = fixture();
        assert_eq!(parse_idx(&encode_idx(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let mut bytes = encode_idx(&fixture()).unwrap();
        bytes[3] = 0x02;
        let e = parse_idx(&bytes).unwrap_err();
        assert!(matches!(e, DataError::BadMagic { magic: 0x802 }));
        assert!(e.to_string().contains("unsupported type"));

        let bytes = encode_idx(&fixture()).unwrap();
        let e = parse_idx(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(e, DataError::Truncated { expected: 40, actual: 35 }), "{e}");
        assert!(e.to_string().contains("40") && e.to_string().contains("35"));

        let mut bytes = vec![0, 0, 8, 3];
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_be_bytes());
        }
        assert!(matches!(parse_idx(&bytes).unwrap_err(), DataError::DimOverflow { .. }));
    }

    #[test]
    fn binarize_rules() {
        let raw = IdxArray {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![2, 1, 3],
            data: vec![0, 0, 0, 127, 128, 200],
        };
        let t = binarize(&raw, BinarizeRule::Threshold, 0, Split::Train).unwrap();
        assert_eq!(t.images, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let b1 = binarize(&raw, BinarizeRule::Bernoulli, 7, Split::Train).unwrap();
        let b2 = binarize(&raw, BinarizeRule::Bernoulli, 7, Split::Train).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(&b1.images[..3], &[0.0; 3]);
        assert_eq!(b1.meta.seed, Some(7));
    }

    #[test]
    fn synthetic_is_deterministic_and_split() {
        let a = synthetic_dataset(16, 1000, 3).unwrap();
        assert_eq!(a, synthetic_dataset(16, 1000, 3).unwrap());
        assert_ne!(a.train.images, synthetic_dataset(16, 1000, 4).unwrap().train.images);
        assert_eq!(a.sizes(), [800, 100, 100]);
        assert!(a.train.images.iter().all(|&x| x == 0.0 || x == 1.0));
        let m = a.train.pixel_means(1e-2);
        assert!(m.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
