//! 3D volume container, mirror padding, window/patch geometry and file I/O.
//!
//! Conventions used everywhere in this crate:
//! * voxel (x, y, z) lives at flat index `x + nx*(y + ny*z)` (x fastest);
//! * patches are vectorized in the same x-fastest order;
//! * mirror padding is trailing-only and reflects about the boundary after
//!   the last voxel, so a row `[1,2,3]` padded by 2 becomes `[1,2,3,3,2]`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense scalar volume. Immutable after construction; filters allocate fresh
/// data and wrap it with [`Volume3D::like`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    intensity_peak: f64,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        intensity_peak: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::invalid("volume dims must be positive"));
        }
        if data.len() != nx * ny * nz {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {}x{}x{}",
                data.len(),
                nx,
                ny,
                nz
            )));
        }
        if !(intensity_peak > 0.0) || !intensity_peak.is_finite() {
            return Err(Error::invalid("intensity_peak must be positive and finite"));
        }
        Ok(Volume3D {
            dims,
            spacing,
            intensity_peak,
            data,
        })
    }

    /// Build a volume by evaluating `f` at every voxel coordinate.
    pub fn from_fn(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        intensity_peak: f64,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume3D::new(dims, spacing, intensity_peak, data)
    }

    /// New volume with the same geometry/peak but different voxel data.
    pub fn like(&self, data: Vec<f64>) -> Result<Self> {
        Volume3D::new(self.dims, self.spacing, self.intensity_peak, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn intensity_peak(&self) -> f64 {
        self.intensity_peak
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Patch/window geometry: `d` is the cubic patch edge, `w` the window radius
/// (window edge `2w+1`), `step` the stride between window origins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub d: usize,
    pub w: usize,
    pub step: usize,
}

impl PatchGeometry {
    pub fn new(d: usize, w: usize, step: usize) -> Result<Self> {
        let g = PatchGeometry { d, w, step };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::invalid("patch edge d must be >= 2"));
        }
        if self.w < 2 {
            return Err(Error::invalid("window radius w must be >= 2"));
        }
        if self.d > self.w + 1 {
            return Err(Error::invalid(format!(
                "patch edge d={} must not exceed w+1={}",
                self.d,
                self.w + 1
            )));
        }
        if self.step < 1 || self.step > self.window_edge() {
            return Err(Error::invalid(format!(
                "step={} must lie in [1, {}]",
                self.step,
                self.window_edge()
            )));
        }
        Ok(())
    }

    pub fn window_edge(&self) -> usize {
        2 * self.w + 1
    }

    /// Patch origins per axis inside one window.
    pub fn patch_grid_edge(&self) -> usize {
        2 * self.w + 2 - self.d
    }

    /// Number of overlapping patches in one window.
    pub fn patches_per_window(&self) -> usize {
        self.patch_grid_edge().pow(3)
    }
}

/// Per-voxel boolean mask tied to a volume's dims.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    dims: (usize, usize, usize),
    mask: Vec<bool>,
}

impl RoiMask {
    pub fn new(dims: (usize, usize, usize), mask: Vec<bool>) -> Result<Self> {
        if mask.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::invalid("mask length does not match dims"));
        }
        Ok(RoiMask { dims, mask })
    }

    /// Voxels with strictly positive intensity in a ground-truth volume.
    pub fn from_positive(truth: &Volume3D) -> Self {
        RoiMask {
            dims: truth.dims(),
            mask: truth.data().iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn complement(&self) -> RoiMask {
        RoiMask {
            dims: self.dims,
            mask: self.mask.iter().map(|&m| !m).collect(),
        }
    }
}

#[inline]
fn mirror_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        // i = n + k maps to n - 1 - k.
        2 * n - 1 - i
    }
}

/// Trailing mirror padding: output dims are `dims + pad` per axis.
pub fn mirror_pad(vol: &Volume3D, pad: (usize, usize, usize)) -> Result<Volume3D> {
    let (nx, ny, nz) = vol.dims();
    let (px, py, pz) = pad;
    if px >= nx || py >= ny || pz >= nz {
        return Err(Error::invalid(format!(
            "pad {:?} must be at most dims-1 {:?}",
            pad,
            (nx - 1, ny - 1, nz - 1)
        )));
    }
    let (mx, my, mz) = (nx + px, ny + py, nz + pz);
    let src = vol.data();
    let mut out = Vec::with_capacity(mx * my * mz);
    for z in 0..mz {
        let sz = mirror_index(z, nz);
        for y in 0..my {
            let sy = mirror_index(y, ny);
            let row = nx * (sy + ny * sz);
            for x in 0..mx {
                out.push(src[row + mirror_index(x, nx)]);
            }
        }
    }
    Volume3D::new((mx, my, mz), vol.spacing(), vol.intensity_peak(), out)
}

/// Take the leading `dims` region (inverse of trailing padding).
pub fn crop(vol: &Volume3D, dims: (usize, usize, usize)) -> Result<Volume3D> {
    let (nx, ny, nz) = vol.dims();
    let (cx, cy, cz) = dims;
    if cx > nx || cy > ny || cz > nz || cx == 0 || cy == 0 || cz == 0 {
        return Err(Error::invalid("crop dims out of range"));
    }
    let src = vol.data();
    let mut out = Vec::with_capacity(cx * cy * cz);
    for z in 0..cz {
        for y in 0..cy {
            let row = nx * (y + ny * z);
            out.extend_from_slice(&src[row..row + cx]);
        }
    }
    Volume3D::new(dims, vol.spacing(), vol.intensity_peak(), out)
}

/// Trailing pad needed so windows on the step grid cover every voxel.
pub fn pad_for_windows(dims: (usize, usize, usize), geom: &PatchGeometry) -> Result<(usize, usize, usize)> {
    geom.validate()?;
    let edge = geom.window_edge();
    let pad_axis = |n: usize| -> Result<usize> {
        let padded = if n <= edge {
            edge
        } else {
            // smallest origin grid point whose window reaches the end
            let last = (n - edge).div_ceil(geom.step) * geom.step;
            last + edge
        };
        let pad = padded - n;
        if pad >= n {
            return Err(Error::invalid(format!(
                "axis of {} voxels too small for window edge {}",
                n, edge
            )));
        }
        Ok(pad)
    };
    Ok((pad_axis(dims.0)?, pad_axis(dims.1)?, pad_axis(dims.2)?))
}

/// Window origins on the step grid. The volume must already be padded so the
/// grid covers it exactly (see [`pad_for_windows`]).
pub fn iter_windows(vol: &Volume3D, geom: &PatchGeometry) -> Result<Vec<(usize, usize, usize)>> {
    geom.validate()?;
    let (nx, ny, nz) = vol.dims();
    let edge = geom.window_edge();
    if nx < edge || ny < edge || nz < edge {
        return Err(Error::invalid(format!(
            "dims {:?} smaller than window edge {}",
            vol.dims(),
            edge
        )));
    }
    let axis = |n: usize| (0..=n - edge).step_by(geom.step).collect::<Vec<_>>();
    let (xs, ys, zs) = (axis(nx), axis(ny), axis(nz));
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push((x, y, z));
            }
        }
    }
    Ok(origins)
}

/// All overlapping d³ patches of one window, one vectorized patch per column.
#[derive(Debug, Clone)]
pub struct SampleMatrix {
    /// d³ x M matrix; column j is the patch at `patch_origins[j]`.
    pub matrix: DMatrix<f64>,
    /// Absolute voxel origin of each patch column.
    pub patch_origins: Vec<(usize, usize, usize)>,
}

/// Extract every patch of the window at `origin` into a sample matrix.
/// Columns follow x-fastest patch-origin order; rows x-fastest voxel order.
pub fn extract_patches(
    vol: &Volume3D,
    origin: (usize, usize, usize),
    geom: &PatchGeometry,
) -> SampleMatrix {
    let d = geom.d;
    let grid = geom.patch_grid_edge();
    let m = grid * grid * grid;
    let rows = d * d * d;
    let mut matrix = DMatrix::<f64>::zeros(rows, m);
    let mut patch_origins = Vec::with_capacity(m);
    let data = vol.data();
    let (nx, ny, _) = vol.dims();
    let mut col = 0usize;
    for pz in 0..grid {
        for py in 0..grid {
            for px in 0..grid {
                let o = (origin.0 + px, origin.1 + py, origin.2 + pz);
                patch_origins.push(o);
                let mut row = 0usize;
                for dz in 0..d {
                    for dy in 0..d {
                        let base = o.0 + nx * (o.1 + dy + ny * (o.2 + dz));
                        for dx in 0..d {
                            matrix[(row, col)] = data[base + dx];
                            row += 1;
                        }
                    }
                }
                col += 1;
            }
        }
    }
    SampleMatrix {
        matrix,
        patch_origins,
    }
}

/// Scatter patch columns back into running sum/hit accumulators
/// (uniform-average aggregation).
pub fn scatter_patches(
    sums: &mut [f64],
    hits: &mut [f64],
    acc_dims: (usize, usize, usize),
    patches: &DMatrix<f64>,
    patch_origins: &[(usize, usize, usize)],
    d: usize,
) {
    let (nx, ny, _) = acc_dims;
    for (col, &o) in patch_origins.iter().enumerate() {
        let mut row = 0usize;
        for dz in 0..d {
            for dy in 0..d {
                let base = o.0 + nx * (o.1 + dy + ny * (o.2 + dz));
                for dx in 0..d {
                    sums[base + dx] += patches[(row, col)];
                    hits[base + dx] += 1.0;
                    row += 1;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// File I/O: raw little-endian f32 stream + JSON sidecar, read-only NIfTI-1.
// ---------------------------------------------------------------------------

pub const SIDECAR_FORMAT: u32 = 1;
pub const KIND_VOLUME: &str = "volume";
pub const KIND_NOISE_MAP: &str = "noise_map";

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct Sidecar {
    pub format: u32,
    pub kind: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub intensity_peak: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_sigma: Option<bool>,
}

pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub(crate) fn write_raw_with_sidecar(path: &Path, data: &[f64], sidecar: &Sidecar) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let json = serde_json::to_string_pretty(sidecar)
        .map_err(|e| Error::Numerical(format!("sidecar serialization: {e}")))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub(crate) fn read_raw_with_sidecar(path: &Path) -> Result<(Sidecar, Vec<f64>)> {
    let sc_path = sidecar_path(path);
    let sc_text = fs::read_to_string(&sc_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("sidecar {}: {e}", sc_path.display()),
        ))
    })?;
    let sidecar: Sidecar = serde_json::from_str(&sc_text)
        .map_err(|e| Error::format(0, format!("sidecar JSON: {e}")))?;
    if sidecar.format != SIDECAR_FORMAT {
        return Err(Error::format(
            0,
            format!("unsupported sidecar format {}", sidecar.format),
        ));
    }
    let bytes = fs::read(path)?;
    let expected = sidecar.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("raw stream holds {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((sidecar, data))
}

/// Store in the native raw+sidecar format.
pub fn store_volume(vol: &Volume3D, path: &Path) -> Result<()> {
    let (nx, ny, nz) = vol.dims();
    let (sx, sy, sz) = vol.spacing();
    let sidecar = Sidecar {
        format: SIDECAR_FORMAT,
        kind: KIND_VOLUME.to_owned(),
        dims: [nx, ny, nz],
        spacing: [sx, sy, sz],
        intensity_peak: vol.intensity_peak(),
        constant_sigma: None,
    };
    write_raw_with_sidecar(path, vol.data(), &sidecar)
}

/// Load either the native format or (read-only) a single-file NIfTI-1 `.nii`.
pub fn load_volume(path: &Path) -> Result<Volume3D> {
    if path.extension().and_then(|e| e.to_str()) == Some("nii") {
        return load_nifti(path);
    }
    let (sidecar, data) = read_raw_with_sidecar(path)?;
    if sidecar.kind != KIND_VOLUME {
        return Err(Error::invalid(format!(
            "{} holds kind '{}', expected '{}'",
            path.display(),
            sidecar.kind,
            KIND_VOLUME
        )));
    }
    Volume3D::new(
        (sidecar.dims[0], sidecar.dims[1], sidecar.dims[2]),
        (sidecar.spacing[0], sidecar.spacing[1], sidecar.spacing[2]),
        sidecar.intensity_peak,
        data,
    )
}

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_DT_INT16: i16 = 4;
const NIFTI_DT_FLOAT32: i16 = 16;

struct NiftiReader<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl<'a> NiftiReader<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let raw = [self.bytes[off], self.bytes[off + 1]];
        if self.swap {
            i16::from_be_bytes(raw)
        } else {
            i16::from_le_bytes(raw)
        }
    }
    fn i32_at(&self, off: usize) -> i32 {
        let raw = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.swap {
            i32::from_be_bytes(raw)
        } else {
            i32::from_le_bytes(raw)
        }
    }
    fn f32_at(&self, off: usize) -> f32 {
        f32::from_bits(self.i32_at(off) as u32)
    }
}

/// Minimal single-file NIfTI-1 reader: float32/int16, uncompressed, either
/// endianness; scl_slope/scl_inter applied when set.
pub fn load_nifti(path: &Path) -> Result<Volume3D> {
    let bytes = fs::read(path)?;
    if bytes.len() < NIFTI_HEADER_LEN + 4 {
        return Err(Error::format(
            bytes.len() as u64,
            "file shorter than a NIfTI-1 header",
        ));
    }
    let native = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let swap = match native {
        348 => false,
        _ if native.swap_bytes() == 348 => true,
        _ => {
            return Err(Error::format(0, "sizeof_hdr is not 348; not NIfTI-1"));
        }
    };
    let r = NiftiReader {
        bytes: &bytes,
        swap,
    };
    if &bytes[344..348] != b"n+1\0" {
        if &bytes[344..348] == b"ni1\0" {
            return Err(Error::format(344, "two-file NIfTI (.hdr/.img) unsupported"));
        }
        return Err(Error::format(344, "bad NIfTI magic"));
    }
    let ndim = r.i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(40, format!("bad dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for i in 0..ndim as usize {
        let v = r.i16_at(42 + 2 * i);
        if v < 1 {
            return Err(Error::format(42 + 2 * i as u64, format!("bad dim[{}] = {v}", i + 1)));
        }
        dims[i] = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::format(40, "only 3D volumes supported"));
    }
    let datatype = r.i16_at(70);
    let vox_offset = r.f32_at(108) as usize;
    if vox_offset < NIFTI_HEADER_LEN {
        return Err(Error::format(108, "vox_offset inside the header"));
    }
    let scl_slope = r.f32_at(112);
    let scl_inter = r.f32_at(116);
    let n = dims[0] * dims[1] * dims[2];
    let elem = match datatype {
        NIFTI_DT_FLOAT32 => 4,
        NIFTI_DT_INT16 => 2,
        other => {
            return Err(Error::format(70, format!("unsupported datatype {other}")));
        }
    };
    let need = vox_offset + n * elem;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("data truncated: need {need} bytes"),
        ));
    }
    let rescale = scl_slope != 0.0 && scl_slope.is_finite();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = vox_offset + i * elem;
        let raw = match datatype {
            NIFTI_DT_FLOAT32 => r.f32_at(off) as f64,
            _ => r.i16_at(off) as f64,
        };
        data.push(if rescale {
            raw * scl_slope as f64 + scl_inter as f64
        } else {
            raw
        });
    }
    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = r.f32_at(76 + 4 * (i + 1)) as f64;
        if p.is_finite() && p > 0.0 {
            *s = p;
        }
    }
    let peak = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let peak = if peak > 0.0 { peak } else { 1.0 };
    // intensity_peak for external data defaults to the observed maximum
    Volume3D::new(
        (dims[0], dims[1], dims[2]),
        (spacing[0], spacing[1], spacing[2]),
        peak,
        data,
    )
}
