//! IDX (MNIST) ingestion and seeded dataset splits.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;

const MAGIC_U8_RANK1: u32 = 0x0000_0801;
const MAGIC_U8_RANK3: u32 = 0x0000_0803;

/// Unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, payload: Vec<u8>) -> Result<Self> {
        if dims.len() != 1 && dims.len() != 3 {
            return Err(Error::Idx(format!("rank {} unsupported (need 1 or 3)", dims.len())));
        }
        let n = element_count(&dims)?;
        if n != payload.len() {
            return Err(Error::Idx(format!("payload has {} bytes, dims need {n}", payload.len())));
        }
        Ok(Self { dims, payload })
    }

    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    /// Bytes of item `i` along the first axis.
    pub fn item(&self, i: usize) -> &[u8] {
        let stride: usize = self.dims[1..].iter().product();
        &self.payload[i * stride..(i + 1) * stride]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.dims.len() == 1 { MAGIC_U8_RANK1 } else { MAGIC_U8_RANK3 };
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| Error::Idx(format!("dims {dims:?} overflow")))
}

/// Parse raw (already decompressed) IDX bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Idx("truncated header".into()))
    };
    let magic = word(0)?;
    let rank = match magic {
        MAGIC_U8_RANK1 => 1,
        MAGIC_U8_RANK3 => 3,
        m => return Err(Error::Idx(format!("bad magic 0x{m:08x}"))),
    };
    let dims: Vec<usize> = (1..=rank).map(|i| word(i).map(|w| w as usize)).collect::<Result<_>>()?;
    let header = 4 * (rank + 1);
    let n = element_count(&dims)?;
    let body = &bytes[header..];
    if body.len() < n {
        return Err(Error::Idx(format!("truncated payload: {} of {n} bytes", body.len())));
    }
    if body.len() > n {
        return Err(Error::Idx(format!("{} trailing bytes after payload", body.len() - n)));
    }
    IdxTensor::new(dims, body.to_vec())
}

/// Load an IDX file, gunzipping transparently when it starts with the gzip magic.
pub fn load_idx(path: &Path) -> Result<IdxTensor> {
    let raw = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DataMissing(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Idx(format!("gzip: {e}")))?;
        parse_idx(&out)
    } else {
        parse_idx(&raw)
    }
}

pub fn write_idx(path: &Path, t: &IdxTensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&t.to_bytes())?;
    Ok(())
}

/// Bytes scaled to `[0, 1]` by `/255`.
pub fn normalize_images<T: Scalar>(t: &IdxTensor) -> Vec<T> {
    let s = T::of(1.0 / 255.0);
    t.payload.iter().map(|b| T::of(*b as f64) * s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MnistPart {
    Train,
    Test,
}

/// Images (raw bytes) and labels of one MNIST file pair.
#[derive(Debug, Clone)]
pub struct MnistSet {
    pub rows: usize,
    pub cols: usize,
    pub images: IdxTensor,
    pub labels: Vec<usize>,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Image `i` scaled to `[0, 1]`, row-major.
    pub fn image<T: Scalar>(&self, i: usize, out: &mut Vec<T>) {
        let s = T::of(1.0 / 255.0);
        out.clear();
        out.extend(self.images.item(i).iter().map(|b| T::of(*b as f64) * s));
    }
}

/// Canonical file stems; `.gz` and dotted variants are also accepted.
pub fn mnist_file_names(part: MnistPart) -> (&'static str, &'static str) {
    match part {
        MnistPart::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        MnistPart::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [stem.to_string(), format!("{stem}.gz"), dotted.clone(), format!("{dotted}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::DataMissing(dir.join(stem).display().to_string()))
}

pub fn load_mnist(dir: &Path, part: MnistPart) -> Result<MnistSet> {
    let (img, lab) = mnist_file_names(part);
    let images = load_idx(&find_file(dir, img)?)?;
    let labels = load_idx(&find_file(dir, lab)?)?;
    if images.dims.len() != 3 || labels.dims.len() != 1 {
        return Err(Error::Idx("expected rank-3 images and rank-1 labels".into()));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Idx(format!("{} images but {} labels", images.dims[0], labels.dims[0])));
    }
    if let Some(l) = labels.payload.iter().find(|l| **l > 9) {
        return Err(Error::Idx(format!("label {l} outside 0..=9")));
    }
    Ok(MnistSet {
        rows: images.dims[1],
        cols: images.dims[2],
        labels: labels.payload.iter().map(|l| *l as usize).collect(),
        images,
    })
}

/// Sizes of a three-way partition, as fractions of the set or absolute counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSizes {
    Fractions { train: f64, validation: f64, test: f64 },
    Counts { train: usize, validation: usize, test: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        match self.sizes {
            SplitSizes::Fractions { train, validation, test } => {
                let fr = [train, validation, test];
                if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr.iter().sum::<f64>() > 1.0 + 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "split fractions {fr:?} must lie in [0,1] and sum to <= 1"
                    )));
                }
                // rounding cumulative boundaries keeps full coverage when the fractions sum to 1
                let edge = |f: f64| ((f * n as f64).round() as usize).min(n);
                let (b1, b2, b3) = (edge(train), edge(train + validation), edge(train + validation + test));
                let (tr, va, te) = (b1, b2 - b1, b3 - b2);
                Ok((tr, va, te))
            }
            SplitSizes::Counts { train, validation, test } => {
                let total = train.checked_add(validation).and_then(|s| s.checked_add(test));
                match total {
                    Some(t) if t <= n => Ok((train, validation, test)),
                    _ => Err(Error::InvalidParameter(format!(
                        "split counts {train}+{validation}+{test} exceed {n} samples"
                    ))),
                }
            }
        }
    }
}

/// Seeded shuffle of `0..n`, then consecutive train / validation / test blocks.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    let (tr, va, te) = spec.counts(n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(derive_seed(spec.seed, "data.split")));
    let s = Split {
        train: idx[..tr].to_vec(),
        validation: idx[tr..tr + va].to_vec(),
        test: idx[tr + va..tr + va + te].to_vec(),
    };
    debug_assert!({
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.windows(2).all(|w| w[0] != w[1])
    });
    Ok(s)
}

/// Location of the MNIST files: `SPARCE_MNIST_DIR`, else `data/mnist` under `root`.
pub fn default_mnist_dir(root: &Path) -> PathBuf {
    std::env::var_os("SPARCE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("data").join("mnist"))
}
