//! Synthetic paired-modality data, the `APDS1` file format and seeded batch plans.
//!
//! `APDS1` layout (all little-endian):
//!
//! ```text
//! b"APDS1\n"
//! u32 n, u32 dim_a, u32 dim_b, u32 num_classes
//! f32 × n·dim_a   (modality A, row-major)
//! f32 × n·dim_b   (modality B, row-major)
//! u32 × n         (labels)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, rng, Matrix};

pub const MAGIC: &[u8; 6] = b"APDS1\n";
const HEADER_LEN: usize = 6 + 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub mod_a: Matrix,
    pub mod_b: Matrix,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub num_classes: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            num_classes: 32,
            dim_a: 64,
            dim_b: 48,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim_a(&self) -> usize {
        self.mod_a.cols()
    }

    pub fn dim_b(&self) -> usize {
        self.mod_b.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> PairedDataset {
        PairedDataset {
            mod_a: self.mod_a.select_rows(indices),
            mod_b: self.mod_b.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Splits off `eval_fraction` of the samples by a seeded permutation.
    /// Returns `(train, eval)`.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> Result<(PairedDataset, PairedDataset)> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::Config(format!(
                "eval fraction must lie in [0, 1), got {eval_fraction}"
            )));
        }
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut rng::seeded(seed, rng::stream_id("eval-split", &[])));
        let n_eval = (eval_fraction * self.len() as f64).round() as usize;
        let (eval, train) = perm.split_at(n_eval);
        Ok((self.subset(train), self.subset(eval)))
    }
}

/// Rounds through `f32` so in-memory values equal what the file stores.
fn to_stored_precision(m: Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

/// Class prototypes on the unit sphere of a latent space of dimension
/// `min(dim_a, dim_b)`, mapped into each modality by a fixed Gaussian matrix
/// with entries `N(0, 1/latent)` and perturbed by isotropic noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PairedDataset> {
    let SyntheticSpec {
        n,
        num_classes,
        dim_a,
        dim_b,
        noise_sigma,
        seed,
    } = *spec;
    if num_classes < 2 || n < num_classes {
        return Err(Error::Config(format!(
            "need n ≥ num_classes ≥ 2, got n={n}, num_classes={num_classes}"
        )));
    }
    if dim_a < 2 || dim_b < 2 {
        return Err(Error::Config(format!("dims must be ≥ 2, got {dim_a} and {dim_b}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be ≥ 0, got {noise_sigma}")));
    }
    let latent = dim_a.min(dim_b);
    let map_std = (1.0 / latent as f64).sqrt();

    let mut r = rng::seeded(seed, rng::stream_id("data.prototypes", &[]));
    let (prototypes, _) = l2_normalize_rows(&rng::normal_matrix(&mut r, num_classes, latent, 1.0))?;
    let mut r = rng::seeded(seed, rng::stream_id("data.maps", &[]));
    let map_a = rng::normal_matrix(&mut r, latent, dim_a, map_std);
    let map_b = rng::normal_matrix(&mut r, latent, dim_b, map_std);
    let clean_a = prototypes.matmul(&map_a)?;
    let clean_b = prototypes.matmul(&map_b)?;

    let mut r = rng::seeded(seed, rng::stream_id("data.samples", &[]));
    let mut mod_a = Matrix::zeros(n, dim_a);
    let mut mod_b = Matrix::zeros(n, dim_b);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = r.gen_range(0..num_classes);
        labels.push(c as u32);
        for (dst, &v) in mod_a.row_mut(i).iter_mut().zip(clean_a.row(c)) {
            *dst = v + noise_sigma * rng::standard_normal(&mut r);
        }
        for (dst, &v) in mod_b.row_mut(i).iter_mut().zip(clean_b.row(c)) {
            *dst = v + noise_sigma * rng::standard_normal(&mut r);
        }
    }
    Ok(PairedDataset {
        mod_a: to_stored_precision(mod_a),
        mod_b: to_stored_precision(mod_b),
        labels,
        num_classes,
    })
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} does not fit in u32")))
}

pub fn encode_dataset(ds: &PairedDataset) -> Result<Vec<u8>> {
    let n = ds.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * (ds.dim_a() + ds.dim_b() + 1));
    buf.extend_from_slice(MAGIC);
    for (v, what) in [
        (n, "n"),
        (ds.dim_a(), "dim_a"),
        (ds.dim_b(), "dim_b"),
        (ds.num_classes, "num_classes"),
    ] {
        buf.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
    }
    for m in [&ds.mod_a, &ds.mod_b] {
        for &v in m.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    Ok(buf)
}

/// Writes to a sibling temporary file and renames it, so a failed write never
/// leaves a partial dataset at `path`.
pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    write_atomically(path, &encode_dataset(ds)?)
}

pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}

/// Little-endian reader that reports byte offsets in errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub offset: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    pub fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .offset
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.offset,
                    format!(
                        "truncated while reading {what}: need {len} bytes, {} remain",
                        self.bytes.len() - self.offset
                    ),
                )
            })?;
        let out = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(out)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len(), "magic")?;
        if got != magic {
            return Err(Error::format(0, format!("bad magic {got:?}")));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::format(
                self.offset,
                format!("{} trailing bytes", self.bytes.len() - self.offset),
            ));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PairedDataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let n = r.u32("n")? as usize;
    let dim_a = r.u32("dim_a")? as usize;
    let dim_b = r.u32("dim_b")? as usize;
    let num_classes = r.u32("num_classes")? as usize;
    if n == 0 {
        return Err(Error::format(6, "empty dataset (n = 0)"));
    }
    if dim_a == 0 || dim_b == 0 {
        return Err(Error::format(10, "zero feature dimension"));
    }
    if num_classes == 0 {
        return Err(Error::format(18, "zero classes"));
    }
    let payload = n
        .checked_mul(dim_a)
        .and_then(|a| n.checked_mul(dim_b).and_then(|b| a.checked_add(b)))
        .and_then(|f| f.checked_add(n))
        .and_then(|w| w.checked_mul(4));
    match payload {
        Some(p) if p == bytes.len() - HEADER_LEN => {}
        Some(p) => {
            return Err(Error::format(
                HEADER_LEN,
                format!(
                    "header promises {p} payload bytes but file holds {}",
                    bytes.len() - HEADER_LEN
                ),
            ))
        }
        None => return Err(Error::format(6, "header dimensions overflow")),
    }

    let mut read_matrix = |rows: usize, cols: usize, what: &str| -> Result<Matrix> {
        let raw = r.take(4 * rows * cols, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let mod_a = read_matrix(n, dim_a, "modality A")?;
    let mod_b = read_matrix(n, dim_b, "modality B")?;
    if !mod_a.is_finite() || !mod_b.is_finite() {
        return Err(Error::format(HEADER_LEN, "non-finite feature value"));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset;
        let l = r.u32("label")?;
        if l as usize >= num_classes {
            return Err(Error::format(at, format!("label {l} ≥ num_classes {num_classes}")));
        }
        labels.push(l);
    }
    r.finish()?;
    Ok(PairedDataset {
        mod_a,
        mod_b,
        labels,
        num_classes,
    })
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    decode_dataset(&fs::read(path)?)
}

/// Seeded Fisher–Yates permutation for one epoch, cut into full batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch: usize,
    pub batch_size: usize,
    pub permutation: Vec<usize>,
}

impl BatchPlan {
    pub fn num_batches(&self) -> usize {
        self.permutation.len() / self.batch_size
    }

    /// Full batches only; the remainder is dropped.
    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.permutation.chunks_exact(self.batch_size)
    }

    pub fn batch(&self, k: usize) -> &[usize] {
        &self.permutation[k * self.batch_size..(k + 1) * self.batch_size]
    }
}

pub fn batch_iterator(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<BatchPlan> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be ≥ 2, got {batch_size}")));
    }
    if batch_size > n {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds dataset size {n}"
        )));
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut rng::seeded(seed, rng::stream_id("batches", &[epoch as u64])));
    Ok(BatchPlan {
        epoch,
        batch_size,
        permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n: 50,
            num_classes: 4,
            dim_a: 5,
            dim_b: 3,
            noise_sigma: 0.1,
            seed: 3,
        }
    }

    #[test]
    fn zero_noise_rows_repeat_per_class() {
        let ds = generate_synthetic(&SyntheticSpec { noise_sigma: 0.0, ..small() }).unwrap();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if ds.labels[i] == ds.labels[j] {
                    assert_eq!(ds.mod_a.row(i), ds.mod_a.row(j));
                }
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        assert_ne!(
            generate_synthetic(&small()).unwrap(),
            generate_synthetic(&SyntheticSpec { seed: 4, ..small() }).unwrap()
        );
    }

    #[test]
    fn class_counts_are_binomial() {
        let spec = SyntheticSpec { n: 1000, num_classes: 10, ..small() };
        let ds = generate_synthetic(&spec).unwrap();
        let mut counts = [0usize; 10];
        ds.labels.iter().for_each(|&l| counts[l as usize] += 1);
        let bound = 3.0 * (1000.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 100.0).abs() <= bound, "{counts:?}");
        }
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate_synthetic(&SyntheticSpec { num_classes: 1, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { n: 3, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { dim_b: 1, ..small() }).is_err());
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let ds = generate_synthetic(&small()).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), 6 + 16 + 4 * 50 * (5 + 3) + 4 * 50);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ds = generate_synthetic(&small()).unwrap();
        let bytes = encode_dataset(&ds).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));

        let mut empty = bytes[..HEADER_LEN].to_vec();
        empty[6..10].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_dataset(&empty), Err(Error::Format { .. })));

        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(matches!(decode_dataset(&bytes[..4]), Err(Error::Format { .. })));

        let mut huge = bytes.clone();
        huge[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_dataset(&huge), Err(Error::Format { .. })));

        let mut bad_label = bytes.clone();
        let at = bad_label.len() - 4;
        bad_label[at..].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bad_label), Err(Error::Format { offset, .. }) if offset == at));
    }

    #[test]
    fn batch_plan_examples() {
        let plan = batch_iterator(10, 4, 1, 1).unwrap();
        let batches: Vec<&[usize]> = plan.batches().collect();
        assert_eq!(batches.len(), 2);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_eq!(plan, batch_iterator(10, 4, 1, 1).unwrap());
        assert!(batch_iterator(3, 4, 1, 1).is_err());
        assert!(batch_iterator(10, 1, 1, 1).is_err());
    }

    #[test]
    fn epochs_permute_differently() {
        let e1 = batch_iterator(64, 8, 7, 1).unwrap();
        let e2 = batch_iterator(64, 8, 7, 2).unwrap();
        assert_ne!(e1.permutation, e2.permutation);
        // Frozen regression values for (seed 7, epoch 1).
        assert_eq!(&e1.batch(0)[..4], FROZEN_EPOCH1_PREFIX);
    }

    const FROZEN_EPOCH1_PREFIX: &[usize] = &[1, 10, 5, 53];

    #[test]
    fn split_is_disjoint() {
        let ds = generate_synthetic(&SyntheticSpec { n: 100, ..small() }).unwrap();
        let (train, eval) = ds.split(0.1, 5).unwrap();
        assert_eq!((train.len(), eval.len()), (90, 10));
    }

    proptest! {
        #[test]
        fn batches_never_repeat_indices(n in 2usize..200, bs in 2usize..20, seed in 0u64..50) {
            prop_assume!(bs <= n);
            let plan = batch_iterator(n, bs, seed, 3).unwrap();
            let mut all: Vec<usize> = plan.batches().flatten().copied().collect();
            prop_assert_eq!(all.len(), (n / bs) * bs);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), (n / bs) * bs);
        }
    }
}
