//! Image to embedding functions.
//!
//! [`LinearEncoder`] is a principal-subspace projection trained on the
//! reference images. [`LookupEncoder`] serves embeddings produced by an
//! external model, keyed by image fingerprint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, RealField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embx::{import_embeddings, EmbxRecords, Reader};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Any function from an image to a fixed-length embedding.
pub trait Encoder<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifier recorded in codebooks built with this encoder.
    fn id(&self) -> &str;

    fn encode(&self, img: &Image) -> Result<Vec<T>>;

    fn encode_batch(&self, imgs: &[Image]) -> Result<Vec<Vec<T>>> {
        imgs.iter().map(|img| self.encode(img)).collect()
    }

    /// Bytes needed to carry the encoder itself on board.
    fn model_bytes(&self) -> u64 {
        0
    }
}

/// Randomized range-finder settings for [`train_linear_encoder`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcaConfig {
    pub oversampling: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig {
            oversampling: 10,
            power_iterations: 2,
            seed: 0,
        }
    }
}

/// Rank-`D` linear encoder: `encode(x) = basis * (x - mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder<T: Scalar> {
    width: usize,
    height: usize,
    id: String,
    mean: DVector<T>,
    /// `D x P` with orthonormal rows.
    basis: DMatrix<T>,
}

impl<T: Scalar> LinearEncoder<T> {
    /// Assemble a model from parts. Rows of `basis` must be orthonormal for
    /// decode to invert encode on the subspace; this is not checked.
    pub fn from_parts(
        width: usize,
        height: usize,
        mean: Vec<T>,
        basis: DMatrix<T>,
        id: impl Into<String>,
    ) -> Result<Self> {
        let pixels = width * height;
        if mean.len() != pixels {
            return Err(Error::DimensionMismatch {
                expected: pixels,
                actual: mean.len(),
            });
        }
        if basis.ncols() != pixels {
            return Err(Error::DimensionMismatch {
                expected: pixels,
                actual: basis.ncols(),
            });
        }
        Ok(LinearEncoder {
            width,
            height,
            id: id.into(),
            mean: DVector::from_vec(mean),
            basis,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn mean_image(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                actual: img.width() * img.height(),
            });
        }
        Ok(())
    }

    fn centered(&self, img: &Image) -> DVector<T> {
        DVector::from_iterator(
            self.mean.len(),
            img.pixels()
                .iter()
                .zip(self.mean.iter())
                .map(|(&p, &m)| T::from_f32(p).unwrap() - m),
        )
    }

    /// `mean + basis^T e` without clamping.
    pub fn reconstruct(&self, e: &[T]) -> Result<Vec<T>> {
        if e.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: e.len(),
            });
        }
        let e = DVector::from_column_slice(e);
        let out = self.basis.tr_mul(&e) + &self.mean;
        Ok(out.iter().copied().collect())
    }

    /// Decode to an image, clamped to `[0, 1]`.
    pub fn decode(&self, e: &[T]) -> Result<Image> {
        let values = self.reconstruct(e)?;
        Image::new(
            self.width,
            self.height,
            values
                .into_iter()
                .map(|v| v.to_f32().unwrap_or(0.0).clamp(0.0, 1.0))
                .collect(),
        )
    }

    /// Mean over `images` of the per-pixel squared reconstruction error.
    pub fn reconstruction_error(&self, images: &[Image]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for img in images {
            self.check_image(img)?;
            let x = self.centered(img);
            let e = &self.basis * &x;
            let r = self.basis.tr_mul(&e) - x;
            total += r.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
        Ok(total / (images.len() * self.mean.len()) as f64)
    }

    /// Largest deviation of `basis * basis^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = &self.basis * self.basis.transpose();
        let mut worst = 0.0f64;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)].to_f64_lossy() - target).abs());
            }
        }
        worst
    }

    /// Serialized model size in bytes.
    pub fn serialized_len(&self) -> u64 {
        (LENC_FIXED_LEN + self.id.len() + (self.mean.len() + self.basis.len()) * T::BYTES) as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len() as usize);
        out.extend_from_slice(LENC_MAGIC);
        out.extend_from_slice(&LENC_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.id.as_bytes());
        let mut put = |v: T| {
            if T::BYTES == 4 {
                out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        };
        self.mean.iter().for_each(|&v| put(v));
        // Row-major so each basis vector is contiguous on disk.
        for r in 0..self.basis.nrows() {
            for c in 0..self.basis.ncols() {
                put(self.basis[(r, c)]);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format("truncated encoder model"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader::new(body);
        if r.take(4)? != LENC_MAGIC {
            return Err(Error::format("bad magic, expected LENC"));
        }
        let version = r.u16()?;
        if version != LENC_VERSION {
            return Err(Error::format(format!("unsupported LENC version {version}")));
        }
        let width_bytes = r.take(1)?[0] as usize;
        if width_bytes != T::BYTES {
            return Err(Error::format(format!(
                "model stores {width_bytes}-byte scalars, requested {}-byte",
                T::BYTES
            )));
        }
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let id_len = r.u16()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::format("encoder id is not UTF-8"))?;
        let pixels = width * height;
        let expected = (pixels + dim * pixels) * T::BYTES;
        if r.remaining() != expected {
            return Err(Error::format(format!(
                "model payload is {} bytes, expected {expected}",
                r.remaining()
            )));
        }
        let mut get = || -> Result<T> {
            Ok(if T::BYTES == 4 {
                T::from_f32(f32::from_le_bytes(r.take(4)?.try_into().unwrap())).unwrap()
            } else {
                T::from_f64_lossy(r.f64()?)
            })
        };
        let mean = (0..pixels).map(|_| get()).collect::<Result<Vec<T>>>()?;
        let row_major = (0..dim * pixels)
            .map(|_| get())
            .collect::<Result<Vec<T>>>()?;
        let basis = DMatrix::from_row_slice(dim, pixels, &row_major);
        LinearEncoder::from_parts(width, height, mean, basis, id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        LinearEncoder::from_bytes(&bytes)
    }
}

const LENC_MAGIC: &[u8; 4] = b"LENC";
const LENC_VERSION: u16 = 1;
// magic + version + scalar width + width + height + dim + id length + crc
const LENC_FIXED_LEN: usize = 4 + 2 + 1 + 4 + 4 + 4 + 2 + 4;

impl<T: Scalar> Encoder<T> for LinearEncoder<T> {
    fn dim(&self) -> usize {
        self.basis.nrows()
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn encode(&self, img: &Image) -> Result<Vec<T>> {
        self.check_image(img)?;
        let e = &self.basis * self.centered(img);
        Ok(e.iter().copied().collect())
    }

    fn encode_batch(&self, imgs: &[Image]) -> Result<Vec<Vec<T>>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        for img in imgs {
            self.check_image(img)?;
        }
        let p = self.mean.len();
        let mut x = DMatrix::<T>::zeros(p, imgs.len());
        for (j, img) in imgs.iter().enumerate() {
            x.column_mut(j).copy_from(&self.centered(img));
        }
        let e = &self.basis * x;
        Ok(e.column_iter()
            .map(|c| c.iter().copied().collect())
            .collect())
    }

    fn model_bytes(&self) -> u64 {
        self.serialized_len()
    }
}

/// Train a rank-`dim` linear encoder on the principal subspace of the
/// centered, flattened training images.
///
/// Uses a randomized range finder with power iterations followed by an
/// exact SVD of the projected data. Deterministic for fixed image order and
/// seed.
pub fn train_linear_encoder<T: Scalar + RealField>(
    images: &[Image],
    dim: usize,
    pca: &PcaConfig,
) -> Result<LinearEncoder<T>> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "encoder dimension must be >= 1".into(),
        ));
    }
    let first = images.first().ok_or(Error::TooFewImages {
        required: dim + 1,
        actual: 0,
    })?;
    let (width, height) = (first.width(), first.height());
    let pixels = width * height;
    if dim > pixels {
        return Err(Error::InvalidArgument(format!(
            "encoder dimension {dim} exceeds pixel count {pixels}"
        )));
    }
    if images.len() < dim + 1 {
        return Err(Error::TooFewImages {
            required: dim + 1,
            actual: images.len(),
        });
    }
    if let Some(bad) = images
        .iter()
        .find(|i| i.width() != width || i.height() != height)
    {
        return Err(Error::DimensionMismatch {
            expected: pixels,
            actual: bad.width() * bad.height(),
        });
    }

    let n = images.len();
    let mut mean64 = vec![0.0f64; pixels];
    for img in images {
        for (m, &p) in mean64.iter_mut().zip(img.pixels()) {
            *m += p as f64;
        }
    }
    mean64.iter_mut().for_each(|m| *m /= n as f64);
    let mean: Vec<T> = mean64.iter().map(|&m| T::from_f64_lossy(m)).collect();

    // Columns are centered images.
    let mut a = DMatrix::<T>::zeros(pixels, n);
    for (j, img) in images.iter().enumerate() {
        for (dst, (&p, &m)) in a
            .column_mut(j)
            .iter_mut()
            .zip(img.pixels().iter().zip(&mean64))
        {
            *dst = T::from_f64_lossy(p as f64 - m);
        }
    }

    let k = (dim + pca.oversampling).min(n).min(pixels);
    let mut rng = ChaCha8Rng::seed_from_u64(pca.seed);
    let omega = DMatrix::<T>::from_fn(n, k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::from_f64_lossy(z)
    });
    let mut q = orthonormal_columns(&a * omega);
    for _ in 0..pca.power_iterations {
        let z = orthonormal_columns(a.tr_mul(&q));
        q = orthonormal_columns(&a * z);
    }

    // Small problem: B = Q^T A is k x n.
    let b = q.tr_mul(&a);
    let svd = b.svd(true, false);
    let u_small = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut top = DMatrix::<T>::zeros(k, dim);
    for (dst, &src) in order.iter().take(dim).enumerate() {
        top.column_mut(dst).copy_from(&u_small.column(src));
    }
    // P x D with orthonormal columns; one more pass tightens orthogonality.
    let u = orthonormal_columns(q * top);
    let basis = u.transpose();

    let mut crc = crc32fast::Hasher::new();
    for v in basis.iter().chain(mean.iter()) {
        crc.update(&v.to_f64_lossy().to_le_bytes());
    }
    let id = format!("linear-pca-d{dim}-n{n}-{:08x}", crc.finalize());
    LinearEncoder::from_parts(width, height, mean, basis, id)
}

/// Orthonormalize the columns of `m` (thin QR). Columns that are numerically
/// dependent still come back as unit vectors orthogonal to the rest.
fn orthonormal_columns<T: Scalar + RealField>(m: DMatrix<T>) -> DMatrix<T> {
    let (rows, cols) = m.shape();
    if cols > rows {
        return m.qr().q();
    }
    // Householder QR is backward stable; its Q is orthonormal to machine
    // precision even when `m` is rank deficient.
    let mut q = m.qr().q();
    debug_assert_eq!(q.ncols(), cols);
    // Fix the sign so that results do not depend on Householder conventions
    // for zero columns.
    for mut col in q.column_iter_mut() {
        let pivot = col.iter().copied().fold(T::zero(), |acc, v| {
            if num_traits::Float::abs(v) > num_traits::Float::abs(acc) {
                v
            } else {
                acc
            }
        });
        if pivot < T::zero() {
            col.neg_mut();
        }
    }
    q
}

/// Serves embeddings computed elsewhere, keyed by [`Image::fingerprint`].
///
/// An external encoder writes an `EMBX` file whose ids are the fingerprints
/// of the PNG images it encoded; live images (and their rotations) are then
/// looked up instead of encoded.
#[derive(Clone, Debug)]
pub struct LookupEncoder<T: Scalar> {
    id: String,
    dim: usize,
    table: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> LookupEncoder<T> {
    pub fn new(id: impl Into<String>, dim: usize, records: EmbxRecords<T>) -> Result<Self> {
        let mut table = HashMap::with_capacity(records.len());
        for (key, v) in records {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            table.insert(key, v);
        }
        Ok(LookupEncoder {
            id: id.into(),
            dim,
            table,
        })
    }

    pub fn from_file(path: impl AsRef<Path>, id: impl Into<String>) -> Result<Self> {
        let (meta, records) = import_embeddings(path)?;
        LookupEncoder::new(id, meta.dim, records)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl<T: Scalar> Encoder<T> for LookupEncoder<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn encode(&self, img: &Image) -> Result<Vec<T>> {
        let key = img.fingerprint();
        self.table
            .get(&key)
            .cloned()
            .ok_or(Error::UnknownFingerprint(key))
    }
}
