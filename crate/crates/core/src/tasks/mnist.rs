//! Sequential MNIST variants and readout-feature extraction.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, MnistSet, SplitSizes, SplitSpec};
use crate::error::{Error, Result};
use crate::learning::FeatureMatrix;
use crate::readout::ReadoutPlan;
use crate::reservoir::{Activation, Encoder, HierarchyParams, InputDist, ReservoirParams};
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MnistVariant {
    /// One column per step: `cols` steps of `rows` inputs.
    Column,
    /// A fixed pixel permutation, then column by column.
    PermutedColumn,
    /// A fixed pixel permutation, one pixel per step.
    PermutedPixel,
}

impl MnistVariant {
    pub fn is_permuted(self) -> bool {
        !matches!(self, MnistVariant::Column)
    }

    /// `(steps, inputs per step)` for `rows x cols` images.
    pub fn shape(self, rows: usize, cols: usize) -> (usize, usize) {
        match self {
            MnistVariant::Column | MnistVariant::PermutedColumn => (cols, rows),
            MnistVariant::PermutedPixel => (rows * cols, 1),
        }
    }
}

/// Seeded permutation of `0..n_pixels`.
pub fn pixel_permutation(n_pixels: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n_pixels).collect();
    p.shuffle(&mut rng_from(derive_seed(seed, "mnist.permutation")));
    p
}

/// Input sequence (`steps x inputs`, row-major) of a row-major image.
/// Permuted variants read pixel `perm[i]` into position `i` first.
pub fn mnist_sequence<T: Scalar>(
    image: &[T],
    rows: usize,
    cols: usize,
    variant: MnistVariant,
    perm: Option<&[usize]>,
    out: &mut Vec<T>,
) -> Result<()> {
    let n = rows * cols;
    if image.len() != n || n == 0 {
        return Err(Error::DimensionMismatch { context: "image pixels", expected: n, got: image.len() });
    }
    let pixel = |i: usize| -> T {
        match perm {
            Some(p) => image[p[i]],
            None => image[i],
        }
    };
    if variant.is_permuted() {
        match perm {
            Some(p) if p.len() == n => {}
            _ => return Err(Error::InvalidParameter(format!("permuted variant needs a permutation of {n} pixels"))),
        }
    }
    out.clear();
    match variant {
        MnistVariant::Column | MnistVariant::PermutedColumn => {
            for c in 0..cols {
                for r in 0..rows {
                    out.push(pixel(r * cols + c));
                }
            }
        }
        MnistVariant::PermutedPixel => out.extend((0..n).map(pixel)),
    }
    Ok(())
}

/// Readout vectors of images `idx` from `set`, in parallel.
///
/// Sample ids are `id_base + image index`, so the same image under two task
/// permutations gets two identities.
pub fn encode_images<T: Scalar, E: Encoder<T>>(
    encoder: &E,
    set: &MnistSet,
    idx: &[usize],
    variant: MnistVariant,
    perm: Option<&[usize]>,
    plan: &ReadoutPlan,
    n_class: usize,
    id_base: u64,
) -> Result<FeatureMatrix<T>> {
    let (steps, width) = variant.shape(set.rows, set.cols);
    if encoder.n_in() != width {
        return Err(Error::DimensionMismatch { context: "encoder inputs vs sequence width", expected: width, got: encoder.n_in() });
    }
    let d = plan.dim(encoder.n_state(), steps)?;
    let mut data = vec![T::zero(); idx.len() * d];
    data.par_chunks_mut(d.max(1)).zip(idx.par_iter()).try_for_each_init(
        || (Vec::new(), Vec::new(), Vec::with_capacity(d)),
        |(img, seq, v), (row, &i)| -> Result<()> {
            set.image(i, img);
            mnist_sequence(img, set.rows, set.cols, variant, perm, seq)?;
            encoder.encode(seq, plan, v)?;
            row.copy_from_slice(v);
            Ok(())
        },
    )?;
    FeatureMatrix::new(
        d,
        n_class,
        data,
        idx.iter().map(|&i| set.labels[i]).collect(),
        idx.iter().map(|&i| id_base + i as u64).collect(),
    )
}

/// Reservoir for the column-wise and permuted-column tasks.
pub fn mnist_reservoir(n_nodes: usize, seed: u64) -> ReservoirParams {
    ReservoirParams {
        n_nodes,
        alpha: 0.17,
        rho: 0.97,
        gamma: 0.1,
        p_er: 0.01,
        activation: Activation::Tanh,
        input_dist: InputDist::Uniform,
        seed: derive_seed(seed, "reservoir"),
    }
}

/// Fast-to-slow reservoir pair for the pixel-by-pixel task.
pub fn psmnist_hierarchy(n_first: usize, n_second: usize, seed: u64) -> HierarchyParams {
    HierarchyParams {
        first: ReservoirParams {
            n_nodes: n_first,
            alpha: 1.0,
            rho: 1.0,
            gamma: 1.0,
            p_er: 0.01,
            activation: Activation::Tanh,
            input_dist: InputDist::Uniform,
            seed: derive_seed(seed, "reservoir.first"),
        },
        second: ReservoirParams {
            n_nodes: n_second,
            alpha: 0.017,
            rho: 0.99,
            gamma: 0.0,
            p_er: 0.01,
            activation: Activation::Tanh,
            input_dist: InputDist::Uniform,
            seed: derive_seed(seed, "reservoir.second"),
        },
        coupling_gain: 0.15,
    }
}

/// Image indices of one single-task run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistSplit {
    /// Into the training file.
    pub train: Vec<usize>,
    /// Into the training file, disjoint from `train`.
    pub validation: Vec<usize>,
    /// Into the test file.
    pub test: Vec<usize>,
}

/// Takes `train_size` images of the training file (all when unset), holds
/// out `validation_fraction` of them, and `test_size` images of the test file.
pub fn mnist_split(
    n_train_file: usize,
    n_test_file: usize,
    train_size: Option<usize>,
    test_size: Option<usize>,
    validation_fraction: f64,
    seed: u64,
) -> Result<MnistSplit> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::InvalidParameter(format!("validation_fraction={validation_fraction} outside [0, 1)")));
    }
    let total = train_size.unwrap_or(n_train_file);
    let n_val = (total as f64 * validation_fraction).round() as usize;
    let tr = split(
        n_train_file,
        &SplitSpec { sizes: SplitSizes::Counts { train: total - n_val, validation: n_val, test: 0 }, seed },
    )?;
    let te = split(
        n_test_file,
        &SplitSpec {
            sizes: SplitSizes::Counts { train: 0, validation: 0, test: test_size.unwrap_or(n_test_file) },
            seed: derive_seed(seed, "test"),
        },
    )?;
    Ok(MnistSplit { train: tr.train, validation: tr.validation, test: te.test })
}
