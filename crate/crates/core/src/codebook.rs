//! Reference grids around a path and the pose-tagged embedding codebook.
//!
//! Columns are ordered along-track-major, lateral-minor: station `k` owns
//! columns `k * L .. (k + 1) * L` where `L` is the number of lateral offsets,
//! and within a station offsets run from `-extent` to `+extent`.
//!
//! File layout (`KLCB`, little-endian):
//!
//! ```text
//! "KLCB" | u16 version = 1 | u32 D | u64 N | u16 len + UTF-8 encoder id
//! | f64 along_spacing | f64 lateral_extent | f64 lateral_spacing
//! | N x (f64 x, f64 y, f64 heading, f64 arc_length)
//! | N * D f16 embeddings, column-major
//! | u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embx::{from_f16, to_f16, EmbxRecords, Reader};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::map_synth::{
    normalize_deg, render_view, CameraSpec, LightingSpec, MapRaster, PlanarPose,
};
use crate::scalar::Scalar;

pub const KLCB_MAGIC: &[u8; 4] = b"KLCB";
pub const KLCB_VERSION: u16 = 1;
/// Bytes per serialized pose record.
pub const POSE_RECORD_LEN: usize = 32;

const EPS: f64 = 1e-9;

/// Planned flight path: a polyline with a camera heading per segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub waypoints: Vec<(f64, f64)>,
    /// Camera heading on each segment, degrees; `waypoints.len() - 1` entries.
    pub headings: Vec<f64>,
}

/// Heading (CCW from +y) of the direction `(dx, dy)`.
fn direction_heading(dx: f64, dy: f64) -> f64 {
    normalize_deg((-dx).atan2(dy).to_degrees())
}

impl PathSpec {
    /// Path whose camera faces along each segment.
    pub fn new(waypoints: Vec<(f64, f64)>) -> Result<Self> {
        let headings = waypoints
            .windows(2)
            .map(|w| direction_heading(w[1].0 - w[0].0, w[1].1 - w[0].1))
            .collect();
        let path = PathSpec {
            waypoints,
            headings,
        };
        path.validate()?;
        Ok(path)
    }

    /// Straight path of `length` meters starting at `start`, facing along it.
    pub fn straight(start: (f64, f64), heading_deg: f64, length: f64) -> Result<Self> {
        let (s, c) = heading_deg.to_radians().sin_cos();
        PathSpec::new(vec![start, (start.0 - s * length, start.1 + c * length)])
    }

    pub fn with_headings(mut self, headings: Vec<f64>) -> Result<Self> {
        self.headings = headings;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::DegeneratePath("need at least two waypoints".into()));
        }
        if self.headings.len() != self.waypoints.len() - 1 {
            return Err(Error::DegeneratePath(format!(
                "{} segments but {} headings",
                self.waypoints.len() - 1,
                self.headings.len()
            )));
        }
        for (i, w) in self.waypoints.windows(2).enumerate() {
            let len = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            if !(len > EPS) {
                return Err(Error::DegeneratePath(format!(
                    "waypoints {i} and {} coincide",
                    i + 1
                )));
            }
        }
        if self
            .waypoints
            .iter()
            .any(|p| !(p.0.is_finite() && p.1.is_finite()))
            || self.headings.iter().any(|h| !h.is_finite())
        {
            return Err(Error::DegeneratePath("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
            .sum()
    }

    /// Point, unit segment direction and camera heading at arc length `s`.
    /// A point on a vertex belongs to the following segment.
    pub fn frame_at(&self, s: f64) -> ((f64, f64), (f64, f64), f64) {
        let last = self.waypoints.len() - 2;
        let mut start = 0.0;
        for (i, w) in self.waypoints.windows(2).enumerate() {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let len = dx.hypot(dy);
            if s < start + len || i == last {
                let t = s - start;
                let dir = (dx / len, dy / len);
                return (
                    (w[0].0 + t * dir.0, w[0].1 + t * dir.1),
                    dir,
                    normalize_deg(self.headings[i]),
                );
            }
            start += len;
        }
        unreachable!("validated path has at least one segment")
    }
}

/// Reference grid density around the path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub along_spacing: f64,
    pub lateral_extent: f64,
    pub lateral_spacing: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            along_spacing: 0.5,
            lateral_extent: 5.0,
            lateral_spacing: 0.5,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.along_spacing > 0.0 && self.lateral_spacing > 0.0) {
            return Err(Error::InvalidArgument(
                "grid spacings must be positive".into(),
            ));
        }
        if !(self.lateral_extent >= 0.0) {
            return Err(Error::InvalidArgument("lateral extent must be >= 0".into()));
        }
        let steps = self.lateral_extent / self.lateral_spacing;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "lateral extent {} is not a multiple of lateral spacing {}",
                self.lateral_extent, self.lateral_spacing
            )));
        }
        Ok(())
    }

    /// Offsets per along-track station.
    pub fn lateral_count(&self) -> usize {
        2 * (self.lateral_extent / self.lateral_spacing).round() as usize + 1
    }

    /// Signed lateral offset of slot `j` within a station.
    pub fn lateral_offset(&self, j: usize) -> f64 {
        let half = (self.lateral_extent / self.lateral_spacing).round() as i64;
        (j as i64 - half) as f64 * self.lateral_spacing
    }

    /// Stations at `0, s, 2s, ...` strictly before the path end.
    pub fn station_count(&self, path_length: f64) -> usize {
        ((path_length / self.along_spacing) - EPS).ceil().max(1.0) as usize
    }

    /// Reference images per meter of path.
    pub fn images_per_meter(&self) -> f64 {
        self.lateral_count() as f64 / self.along_spacing
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub pose: PlanarPose,
    pub arc_length: f64,
    pub lateral: f64,
}

/// Reference poses around `path`, along-track-major and lateral-minor.
pub fn enumerate_grid(path: &PathSpec, grid: &GridSpec) -> Result<Vec<GridPoint>> {
    path.validate()?;
    grid.validate()?;
    let stations = grid.station_count(path.length());
    let lateral = grid.lateral_count();
    let mut out = Vec::with_capacity(stations * lateral);
    for k in 0..stations {
        let s = k as f64 * grid.along_spacing;
        let ((px, py), (dx, dy), heading) = path.frame_at(s);
        // Right-hand perpendicular of the segment direction.
        let (nx, ny) = (dy, -dx);
        for j in 0..lateral {
            let off = grid.lateral_offset(j);
            out.push(GridPoint {
                pose: PlanarPose::new(px + off * nx, py + off * ny, heading),
                arc_length: s,
                lateral: off,
            });
        }
    }
    Ok(out)
}

/// Pose-tagged embedding matrix carried on board.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T: Scalar> {
    /// `D x N`; column `i` belongs to `poses[i]`.
    embeddings: DMatrix<T>,
    poses: Vec<PlanarPose>,
    arc_length: Vec<f64>,
    encoder_id: String,
    grid: GridSpec,
}

/// Contiguous block of codebook columns around a prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub columns: Range<usize>,
    /// Arc-length projection of the prior.
    pub center_arc: f64,
}

impl Window {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.columns.clone().collect()
    }
}

impl<T: Scalar> Codebook<T> {
    pub fn from_parts(
        embeddings: DMatrix<T>,
        poses: Vec<PlanarPose>,
        arc_length: Vec<f64>,
        encoder_id: impl Into<String>,
        grid: GridSpec,
    ) -> Result<Self> {
        grid.validate()?;
        let n = embeddings.ncols();
        if poses.len() != n || arc_length.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: poses.len().min(arc_length.len()),
            });
        }
        if !n.is_multiple_of(grid.lateral_count()) {
            return Err(Error::format(format!(
                "{n} columns is not a whole number of stations of {} offsets",
                grid.lateral_count()
            )));
        }
        let lateral = grid.lateral_count();
        for k in 0..n / lateral {
            let s = arc_length[k * lateral];
            if arc_length[k * lateral..(k + 1) * lateral]
                .iter()
                .any(|&a| a != s)
            {
                return Err(Error::format(format!("station {k} mixes arc lengths")));
            }
            if k > 0 && !(s > arc_length[(k - 1) * lateral]) {
                return Err(Error::format("station arc lengths must increase"));
            }
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite embedding value"));
        }
        let encoder_id = encoder_id.into();
        if encoder_id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("encoder id too long".into()));
        }
        Ok(Codebook {
            embeddings,
            poses,
            arc_length,
            encoder_id,
            grid,
        })
    }

    /// Codebook from externally computed embeddings whose ids are grid
    /// column indices (any order).
    pub fn from_embeddings(
        path: &PathSpec,
        grid: &GridSpec,
        dim: usize,
        records: EmbxRecords<T>,
        encoder_id: impl Into<String>,
    ) -> Result<Self> {
        let points = enumerate_grid(path, grid)?;
        if records.len() != points.len() {
            return Err(Error::format(format!(
                "grid has {} poses but {} embeddings were supplied",
                points.len(),
                records.len()
            )));
        }
        let mut matrix = DMatrix::<T>::zeros(dim, points.len());
        let mut seen = vec![false; points.len()];
        for (id, values) in records {
            let i = usize::try_from(id)
                .ok()
                .filter(|&i| i < points.len())
                .ok_or_else(|| Error::format(format!("embedding id {id} is not a grid index")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::format(format!("duplicate embedding id {id}")));
            }
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: values.len(),
                });
            }
            matrix.column_mut(i).copy_from_slice(&values);
        }
        Codebook::from_parts(
            matrix,
            points.iter().map(|p| p.pose).collect(),
            points.iter().map(|p| p.arc_length).collect(),
            encoder_id,
            *grid,
        )
    }

    pub fn dim(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn len(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embeddings(&self) -> &DMatrix<T> {
        &self.embeddings
    }

    pub fn column(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.embeddings.as_slice()[i * d..(i + 1) * d]
    }

    /// Column-major slice of a contiguous column range.
    pub fn columns(&self, range: Range<usize>) -> &[T] {
        let d = self.dim();
        &self.embeddings.as_slice()[range.start * d..range.end * d]
    }

    pub fn poses(&self) -> &[PlanarPose] {
        &self.poses
    }

    pub fn arc_lengths(&self) -> &[f64] {
        &self.arc_length
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn station_count(&self) -> usize {
        self.len() / self.grid.lateral_count()
    }

    /// Centerline pose and arc length of station `k`.
    fn station(&self, k: usize) -> (PlanarPose, f64) {
        let lateral = self.grid.lateral_count();
        let i = k * lateral + lateral / 2;
        (self.poses[i], self.arc_length[i])
    }

    /// Nearest-point arc length of `(x, y)` on the centerline polyline
    /// (end segments extended), with the perpendicular distance. Ties go to
    /// the smaller arc length.
    pub fn project(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let stations = self.station_count();
        if stations == 0 {
            return None;
        }
        if stations == 1 {
            let (p, s) = self.station(0);
            let (fx, fy) = p.forward();
            let t = (x - p.x) * fx + (y - p.y) * fy;
            let d = ((x - p.x) * fy - (y - p.y) * fx).abs();
            return Some((s + t, d));
        }
        let mut best: Option<(f64, f64)> = None;
        for k in 0..stations - 1 {
            let (a, sa) = self.station(k);
            let (b, sb) = self.station(k + 1);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let mut t = if len2 > 0.0 {
                ((x - a.x) * dx + (y - a.y) * dy) / len2
            } else {
                0.0
            };
            if k > 0 {
                t = t.max(0.0);
            }
            if k + 2 < stations {
                t = t.min(1.0);
            }
            let (qx, qy) = (a.x + t * dx, a.y + t * dy);
            let d = (x - qx).hypot(y - qy);
            let s = sa + t * (sb - sa);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((s, d));
            }
        }
        best
    }

    /// Columns whose arc length lies in `[s0 - half_window, s0 + half_window)`
    /// where `s0` is the prior's projection onto the path.
    pub fn select_window(&self, prior: &PlanarPose, half_window: f64) -> Result<Window> {
        if !(half_window > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "half window must be positive, got {half_window}"
            )));
        }
        let empty = || Error::EmptyWindow {
            x: prior.x,
            y: prior.y,
        };
        let (s0, dist) = self.project(prior.x, prior.y).ok_or_else(empty)?;
        if dist > self.grid.lateral_extent + half_window {
            return Err(empty());
        }
        let (lo, hi) = (s0 - half_window, s0 + half_window);
        let lateral = self.grid.lateral_count();
        let stations = self.station_count();
        let arc = |k: usize| self.arc_length[k * lateral];
        // Station arc lengths are strictly increasing.
        let first = partition_point(stations, |k| arc(k) < lo - EPS);
        let end = partition_point(stations, |k| arc(k) < hi - EPS);
        if first >= end {
            return Err(empty());
        }
        Ok(Window {
            columns: first * lateral..end * lateral,
            center_arc: s0,
        })
    }

    /// Exact size of the serialized file.
    pub fn serialized_len(&self) -> usize {
        self.header_len() + self.len() * self.bytes_per_image() + 4
    }

    /// Fixed bytes before the first pose record.
    pub fn header_len(&self) -> usize {
        4 + 2 + 4 + 8 + 2 + self.encoder_id.len() + 24
    }

    pub fn bytes_per_image(&self) -> usize {
        POSE_RECORD_LEN + 2 * self.dim()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(KLCB_MAGIC);
        out.extend_from_slice(&KLCB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.encoder_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.encoder_id.as_bytes());
        for v in [
            self.grid.along_spacing,
            self.grid.lateral_extent,
            self.grid.lateral_spacing,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (p, s) in self.poses.iter().zip(&self.arc_length) {
            for v in [p.x, p.y, p.heading, *s] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in self.embeddings.as_slice() {
            out.extend_from_slice(&to_f16(v)?.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        debug_assert_eq!(out.len(), self.serialized_len());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format("truncated codebook"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader::new(body);
        if r.take(4)? != KLCB_MAGIC {
            return Err(Error::format("bad magic, expected KLCB"));
        }
        let version = r.u16()?;
        if version != KLCB_VERSION {
            return Err(Error::format(format!("unsupported KLCB version {version}")));
        }
        let dim = r.u32()? as usize;
        let n = r.u64()?;
        let id_len = r.u16()? as usize;
        let encoder_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::format("encoder id is not UTF-8"))?;
        let grid = GridSpec {
            along_spacing: r.f64()?,
            lateral_extent: r.f64()?,
            lateral_spacing: r.f64()?,
        };
        let per = (POSE_RECORD_LEN + 2 * dim) as u64;
        if n.checked_mul(per) != Some(r.remaining() as u64) {
            return Err(Error::format(format!(
                "payload of {} bytes does not hold {n} columns of dimension {dim}",
                r.remaining()
            )));
        }
        let n = n as usize;
        let mut poses = Vec::with_capacity(n);
        let mut arc_length = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, y, heading, s) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            // Stored headings are already normalized; keep them bit-exact.
            poses.push(PlanarPose { x, y, heading });
            arc_length.push(s);
        }
        let values = (0..n * dim)
            .map(|_| r.f16().and_then(from_f16))
            .collect::<Result<Vec<T>>>()?;
        debug_assert_eq!(r.position(), body.len());
        Codebook::from_parts(
            DMatrix::from_vec(dim, n, values),
            poses,
            arc_length,
            encoder_id,
            grid,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Codebook::from_bytes(&bytes)
    }

    /// Values as they come back from disk (one half-precision rounding).
    pub fn quantized(&self) -> Result<Self> {
        let mut out = self.clone();
        for v in out.embeddings.iter_mut() {
            *v = from_f16(to_f16(*v)?)?;
        }
        Ok(out)
    }
}

fn partition_point(n: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Rendering options for [`build_codebook`].
#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    /// Images rendered and encoded together.
    pub batch_size: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { batch_size: 256 }
    }
}

/// Render every grid pose under `reference_light`, encode and stack.
#[allow(clippy::too_many_arguments)]
pub fn build_codebook<T: Scalar, E: Encoder<T> + ?Sized>(
    map: &MapRaster,
    path: &PathSpec,
    grid: &GridSpec,
    cam: &CameraSpec,
    encoder: &E,
    reference_light: &LightingSpec,
    opts: &BuildOptions,
) -> Result<Codebook<T>> {
    let points = enumerate_grid(path, grid)?;
    let dim = encoder.dim();
    let mut matrix = DMatrix::<T>::zeros(dim, points.len());
    let batch = opts.batch_size.max(1);
    for (chunk_idx, chunk) in points.chunks(batch).enumerate() {
        let base = chunk_idx * batch;
        let images = chunk
            .par_iter()
            .enumerate()
            .map(|(j, p)| {
                render_view(map, &p.pose, cam, reference_light).map_err(|e| Error::GridPose {
                    index: base + j,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let encoded = encoder.encode_batch(&images)?;
        for (j, e) in encoded.into_iter().enumerate() {
            if e.len() != dim {
                return Err(Error::GridPose {
                    index: base + j,
                    source: Box::new(Error::DimensionMismatch {
                        expected: dim,
                        actual: e.len(),
                    }),
                });
            }
            matrix.column_mut(base + j).copy_from_slice(&e);
        }
    }
    Codebook::from_parts(
        matrix,
        points.iter().map(|p| p.pose).collect(),
        points.iter().map(|p| p.arc_length).collect(),
        encoder.id(),
        *grid,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(len: f64) -> PathSpec {
        PathSpec::straight((0.0, 0.0), 0.0, len).unwrap()
    }

    fn dummy_codebook(path: &PathSpec, grid: &GridSpec, dim: usize) -> Codebook<f64> {
        let pts = enumerate_grid(path, grid).unwrap();
        let m = DMatrix::from_fn(dim, pts.len(), |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        Codebook::from_parts(
            m,
            pts.iter().map(|p| p.pose).collect(),
            pts.iter().map(|p| p.arc_length).collect(),
            "dummy",
            *grid,
        )
        .unwrap()
    }

    #[test]
    fn one_meter_default_grid_has_42_poses() {
        let pts = enumerate_grid(&straight(1.0), &GridSpec::default()).unwrap();
        assert_eq!(pts.len(), 42);
        assert_eq!(GridSpec::default().images_per_meter(), 42.0);
    }

    #[test]
    fn zero_extent_is_centerline_only() {
        let grid = GridSpec {
            lateral_extent: 0.0,
            ..GridSpec::default()
        };
        let pts = enumerate_grid(&straight(3.0), &grid).unwrap();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p.pose.x == 0.0 && p.lateral == 0.0));
    }

    #[test]
    fn lateral_geometry_on_axis_aligned_path() {
        let pts = enumerate_grid(&straight(10.0), &GridSpec::default()).unwrap();
        let p = pts
            .iter()
            .find(|p| p.arc_length == 4.5 && p.lateral == -3.0)
            .unwrap();
        assert!((p.pose.x + 3.0).abs() < 1e-12);
        assert!((p.pose.y - 4.5).abs() < 1e-12);
        assert_eq!(p.pose.heading, 0.0);
        // Along-track-major ordering.
        assert!(pts.windows(2).all(|w| w[0].arc_length <= w[1].arc_length));
        assert_eq!(pts[0].lateral, -5.0);
        assert_eq!(pts[20].lateral, 5.0);
    }

    #[test]
    fn degenerate_paths_are_rejected() {
        assert!(PathSpec::new(vec![(0.0, 0.0)]).is_err());
        assert!(PathSpec::new(vec![(1.0, 1.0), (1.0, 1.0)]).is_err());
        assert!(straight(5.0).with_headings(vec![]).is_err());
        let bad_grid = GridSpec {
            lateral_extent: 1.2,
            lateral_spacing: 0.5,
            ..GridSpec::default()
        };
        assert!(enumerate_grid(&straight(5.0), &bad_grid).is_err());
    }

    #[test]
    fn window_counts() {
        let grid = GridSpec::default();
        let cb = dummy_codebook(&straight(20.0), &grid, 3);
        let mid = PlanarPose::new(0.7, 10.0, 0.0);
        assert_eq!(cb.select_window(&mid, 4.0).unwrap().len(), 336);
        let minimal = cb
            .select_window(&PlanarPose::new(0.0, 6.0, 0.0), 0.2)
            .unwrap();
        assert_eq!(minimal.len(), 21);
        assert_eq!(cb.arc_lengths()[minimal.columns.start], 6.0);
        let start = cb
            .select_window(&PlanarPose::new(0.0, 1.0, 0.0), 4.0)
            .unwrap();
        assert_eq!(start.columns.start, 0);
        // Stations 0.0 ..= 4.5 remain.
        assert_eq!(start.len(), 10 * 21);
        let far = cb.select_window(&PlanarPose::new(200.0, 10.0, 0.0), 4.0);
        assert!(matches!(far, Err(Error::EmptyWindow { .. })));
        let beyond = cb.select_window(&PlanarPose::new(0.0, 40.0, 0.0), 4.0);
        assert!(matches!(beyond, Err(Error::EmptyWindow { .. })));
        assert!(cb.select_window(&mid, 0.0).is_err());
    }

    #[test]
    fn projection_on_bent_path() {
        let path = PathSpec::new(vec![(0.0, 0.0), (0.0, 10.0), (10.0, 10.0)]).unwrap();
        let cb = dummy_codebook(&path, &GridSpec::default(), 2);
        let (s, d) = cb.project(5.0, 10.5).unwrap();
        assert!((s - 15.0).abs() < 1e-9, "{s}");
        assert!((d - 0.5).abs() < 1e-9);
        let (s, _) = cb.project(0.2, 3.0).unwrap();
        assert!((s - 3.0).abs() < 1e-9);
        // Lateral offsets on the second segment point to -y.
        let pts = enumerate_grid(&path, &GridSpec::default()).unwrap();
        let p = pts
            .iter()
            .find(|p| p.arc_length == 12.0 && p.lateral == 1.0)
            .unwrap();
        assert!((p.pose.x - 2.0).abs() < 1e-9 && (p.pose.y - 9.0).abs() < 1e-9);
        assert!((p.pose.heading + 90.0).abs() < 1e-9);
    }

    #[test]
    fn serialized_size_and_round_trip() {
        let grid = GridSpec::default();
        let cb = dummy_codebook(&straight(1.0), &grid, 1000);
        assert_eq!(cb.bytes_per_image(), 2032);
        let bytes = cb.to_bytes().unwrap();
        assert_eq!(bytes.len(), cb.serialized_len());
        assert_eq!(
            bytes.len(),
            cb.header_len() + 42 * (2 * 1000 + POSE_RECORD_LEN) + 4
        );
        let back = Codebook::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, cb.quantized().unwrap());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Codebook::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn import_from_external_records() {
        let path = straight(1.0);
        let grid = GridSpec::default();
        let recs: Vec<(u64, Vec<f64>)> = (0..42u64).rev().map(|i| (i, vec![i as f64; 4])).collect();
        let cb = Codebook::from_embeddings(&path, &grid, 4, recs, "ext").unwrap();
        assert_eq!(cb.column(5), &[5.0; 4]);
        let short: Vec<(u64, Vec<f64>)> = (0..41u64).map(|i| (i, vec![0.0; 4])).collect();
        assert!(Codebook::from_embeddings(&path, &grid, 4, short, "ext").is_err());
        let mut dup: Vec<(u64, Vec<f64>)> = (0..42u64).map(|i| (i, vec![0.0; 4])).collect();
        dup[3].0 = 4;
        assert!(Codebook::from_embeddings(&path, &grid, 4, dup, "ext").is_err());
    }
}
