//! Patch-grouping PCA filter with eigenvalue shrinkage.
//!
//! The volume is tiled with overlapping (2w+1)^3 windows on a `step` grid.
//! Inside each window the overlapping d^3 patches are grouped, each group is
//! centered and eigendecomposed, eigenvectors whose sqrt-eigenvalue falls
//! below `tau_beta * sigma_raw` are dropped, and the surviving projection is
//! scattered back with uniform averaging. `sigma_raw` is the median of the
//! noise-like sqrt-eigenvalues (those below `t * median(sqrt(lambda))`), so
//! the same spectrum yields both the shrink threshold and a local noise
//! estimate; the standalone noise map scales that raw median by 1.16 and then
//! maps it back to the Gaussian-domain sigma through the Rician moment
//! relations.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{rician_correct_sigma, NoiseMap, RicianLut};
use crate::stats::{median_in_place, mirror};
use crate::volume::{self, PatchGeometry, SampleMatrix, Volume3D};

/// Scale from the raw noise-eigenvalue median to the magnitude-domain sigma.
pub const SIGMA_BETA: f64 = 1.16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Every patch of the window forms one group (requires M = (2w+2-d)^3).
    AllInWindow,
    /// One group per window: the central patch plus its M-1 nearest patches.
    /// Experiment mode only; it blurs (tends to under-cover window corners).
    SimilarToCenter,
    /// One group per patch: each patch plus its M-1 nearest, one PCA each.
    SimilarToEach,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NlpcaParams {
    pub d: usize,
    pub m: usize,
    pub w: usize,
    pub tau_beta: f64,
    pub t: f64,
    pub step: usize,
    pub grouping: Grouping,
    /// Rank patch similarity on a 3x3x3-median-filtered copy. Only grouping
    /// is affected; the filtered data never feeds the output.
    pub median_prefilter: bool,
}

impl Default for NlpcaParams {
    fn default() -> Self {
        NlpcaParams {
            d: 4,
            m: 64,
            w: 3,
            tau_beta: 2.46,
            t: 2.46,
            step: 3,
            grouping: Grouping::AllInWindow,
            median_prefilter: false,
        }
    }
}

impl NlpcaParams {
    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.d, self.w, self.step)
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry()?;
        let all = geom.patches_per_window();
        if self.m < self.d.pow(3) || self.m > all {
            return Err(Error::invalid(format!(
                "M={} outside [d^3={}, (2w+2-d)^3={}]",
                self.m,
                self.d.pow(3),
                all
            )));
        }
        if !(self.tau_beta >= 0.0 && self.t > 0.0 && self.tau_beta <= self.t) {
            return Err(Error::invalid(format!(
                "need 0 <= tau_beta <= T with T > 0, got tau_beta={} T={}",
                self.tau_beta, self.t
            )));
        }
        if self.grouping == Grouping::AllInWindow && self.m != all {
            return Err(Error::invalid(format!(
                "all-in-window grouping requires M={all}, got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// 3x3x3 median filter with mirrored boundaries.
pub fn median_filter3(vol: &Volume3D) -> Volume3D {
    let (nx, ny, nz) = vol.dims();
    let data = vol.data();
    let mut out = vec![0.0; data.len()];
    let mut neigh = [0.0f64; 27];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut k = 0;
                for dz in -1isize..=1 {
                    let zz = mirror(z as isize + dz, nz);
                    for dy in -1isize..=1 {
                        let yy = mirror(y as isize + dy, ny);
                        let row = nx * (yy + ny * zz);
                        for dx in -1isize..=1 {
                            neigh[k] = data[row + mirror(x as isize + dx, nx)];
                            k += 1;
                        }
                    }
                }
                out[x + nx * (y + ny * z)] = median_in_place(&mut neigh);
            }
        }
    }
    vol.like(out).expect("same length as input")
}

/// Group the window's patch columns. `ranking` supplies the vectors used for
/// similarity (e.g. median-prefiltered patches); group membership indexes
/// into the original columns. Each group lists its reference column first,
/// then the selected columns by increasing distance; ties resolve in column
/// order.
pub fn group_patches(
    ranking: &DMatrix<f64>,
    grouping: Grouping,
    m: usize,
    grid_edge: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = ranking.ncols();
    if m < 1 || m > n {
        return Err(Error::invalid(format!(
            "group size M={m} exceeds the {n} patches available"
        )));
    }
    let nearest = |reference: usize| -> Vec<usize> {
        let r = ranking.column(reference);
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != reference)
            .map(|j| {
                let mut d2 = 0.0;
                let c = ranking.column(j);
                for i in 0..ranking.nrows() {
                    let diff = r[i] - c[i];
                    d2 += diff * diff;
                }
                (d2, j)
            })
            .collect();
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut group = Vec::with_capacity(m);
        group.push(reference);
        group.extend(scored.iter().take(m - 1).map(|&(_, j)| j));
        group
    };
    match grouping {
        Grouping::AllInWindow => {
            if m != n {
                return Err(Error::invalid(format!(
                    "all-in-window grouping requires M={n}, got {m}"
                )));
            }
            Ok(vec![(0..n).collect()])
        }
        Grouping::SimilarToCenter => {
            let c = (grid_edge - 1) / 2;
            let center = c + grid_edge * (c + grid_edge * c);
            Ok(vec![nearest(center)])
        }
        Grouping::SimilarToEach => Ok((0..n).map(nearest).collect()),
    }
}

#[derive(Debug, Clone)]
pub struct EigenShrinkResult {
    pub denoised: DMatrix<f64>,
    pub retained: usize,
    /// Median of the noise-like sqrt-eigenvalues, unscaled.
    pub sigma_raw: f64,
}

/// Center the sample columns, eigendecompose their covariance, drop
/// components with sqrt-eigenvalue below `tau_beta * sigma_raw`, and project
/// back. `sigma_raw` is the median of sqrt-eigenvalues not exceeding
/// `t * median(all sqrt-eigenvalues)`.
pub fn eigen_shrink(x: &DMatrix<f64>, tau_beta: f64, t: f64) -> EigenShrinkResult {
    let n = x.nrows();
    let m = x.ncols();
    if m < 2 {
        return EigenShrinkResult {
            denoised: x.clone(),
            retained: n,
            sigma_raw: 0.0,
        };
    }
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / (m as f64 - 1.0);
    if (0..n).all(|i| cov[(i, i)] == 0.0) {
        // identical columns: nothing to separate
        return EigenShrinkResult {
            denoised: x.clone(),
            retained: n,
            sigma_raw: 0.0,
        };
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let sq: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let med_all = median_in_place(&mut sq.clone());
    let mut noise_like: Vec<f64> = sq.iter().cloned().filter(|&s| s <= t * med_all).collect();
    let sigma_raw = if noise_like.is_empty() {
        0.0
    } else {
        median_in_place(&mut noise_like)
    };
    let threshold = tau_beta * sigma_raw;
    let kept: Vec<usize> = (0..n).filter(|&j| sq[j] >= threshold).collect();
    if kept.len() == n {
        // full basis: the projection is the identity
        return EigenShrinkResult {
            denoised: x.clone(),
            retained: n,
            sigma_raw,
        };
    }
    let basis = eig.eigenvectors.select_columns(kept.iter());
    let mut denoised = &basis * (basis.transpose() * &centered);
    for mut col in denoised.column_iter_mut() {
        col += &mean;
    }
    EigenShrinkResult {
        denoised,
        retained: kept.len(),
        sigma_raw,
    }
}

/// Mutable accumulator slice covering one window-z slab of the padded volume.
struct Slab<'a> {
    sums: &'a mut [f64],
    hits: &'a mut [f64],
    sigs: &'a mut [f64],
    voxel_offset: usize,
}

fn scatter_group(
    slab: &mut Slab<'_>,
    acc_dims: (usize, usize, usize),
    denoised: &DMatrix<f64>,
    group: &[usize],
    patch_origins: &[(usize, usize, usize)],
    d: usize,
    sigma: f64,
) {
    let (nx, ny, _) = acc_dims;
    for (col, &patch) in group.iter().enumerate() {
        let o = patch_origins[patch];
        let mut row = 0usize;
        for dz in 0..d {
            for dy in 0..d {
                let base = o.0 + nx * (o.1 + dy + ny * (o.2 + dz)) - slab.voxel_offset;
                for dx in 0..d {
                    slab.sums[base + dx] += denoised[(row, col)];
                    slab.sigs[base + dx] += sigma;
                    slab.hits[base + dx] += 1.0;
                    row += 1;
                }
            }
        }
    }
}

fn process_window(
    padded: &Volume3D,
    ranking_vol: Option<&Volume3D>,
    params: &NlpcaParams,
    geom: &PatchGeometry,
    origin: (usize, usize, usize),
    slab: &mut Slab<'_>,
) {
    let patches = volume::extract_patches(padded, origin, geom);
    let groups = match ranking_vol {
        Some(r) => {
            let rp = volume::extract_patches(r, origin, geom);
            group_patches(&rp.matrix, params.grouping, params.m, geom.patch_grid_edge())
        }
        None => group_patches(
            &patches.matrix,
            params.grouping,
            params.m,
            geom.patch_grid_edge(),
        ),
    }
    .expect("params validated before the window loop");
    for group in &groups {
        let shrunk = if group.len() == patches.matrix.ncols() {
            eigen_shrink(&patches.matrix, params.tau_beta, params.t)
        } else {
            let sub = patches.matrix.select_columns(group.iter());
            eigen_shrink(&sub, params.tau_beta, params.t)
        };
        scatter_group(
            slab,
            padded.dims(),
            &shrunk.denoised,
            group,
            &patches.patch_origins,
            geom.d,
            shrunk.sigma_raw,
        );
    }
}

/// Carve disjoint mutable slabs out of the accumulators, one per window
/// z-origin in `slab_zs` (ascending, pairwise disjoint z extents).
fn carve_slabs<'a>(
    mut sums: &'a mut [f64],
    mut hits: &'a mut [f64],
    mut sigs: &'a mut [f64],
    slab_zs: &[usize],
    edge: usize,
    xy: usize,
) -> Vec<(usize, Slab<'a>)> {
    let mut out = Vec::with_capacity(slab_zs.len());
    let mut consumed = 0usize;
    for &z0 in slab_zs {
        let start = z0 * xy;
        let len = edge * xy;
        let (_, s) = std::mem::take(&mut sums).split_at_mut(start - consumed);
        let (slab_s, rest_s) = s.split_at_mut(len);
        sums = rest_s;
        let (_, h) = std::mem::take(&mut hits).split_at_mut(start - consumed);
        let (slab_h, rest_h) = h.split_at_mut(len);
        hits = rest_h;
        let (_, g) = std::mem::take(&mut sigs).split_at_mut(start - consumed);
        let (slab_g, rest_g) = g.split_at_mut(len);
        sigs = rest_g;
        consumed = start + len;
        out.push((
            z0,
            Slab {
                sums: slab_s,
                hits: slab_h,
                sigs: slab_g,
                voxel_offset: start,
            },
        ));
    }
    out
}

/// Denoise and estimate the noise map in one sweep.
///
/// Aggregation runs in fixed "waves" of non-overlapping window-z slabs; the
/// per-voxel addition order is therefore a function of the geometry alone,
/// and results are bit-identical for any worker count.
pub fn denoise(vol: &Volume3D, params: &NlpcaParams) -> Result<(Volume3D, NoiseMap)> {
    params.validate()?;
    let geom = params.geometry()?;
    let pads = volume::pad_for_windows(vol.dims(), &geom)?;
    let padded = volume::mirror_pad(vol, pads)?;
    let needs_ranking = params.grouping != Grouping::AllInWindow && params.median_prefilter;
    let ranking_vol = if needs_ranking {
        Some(volume::mirror_pad(&median_filter3(vol), pads)?)
    } else {
        None
    };

    let (nx, ny, nz) = padded.dims();
    let edge = geom.window_edge();
    let xy = nx * ny;
    let axis = |n: usize| (0..=n - edge).step_by(geom.step).collect::<Vec<usize>>();
    let (xs, ys, zs) = (axis(nx), axis(ny), axis(nz));
    let waves = edge.div_ceil(geom.step);

    let mut sums = vec![0.0f64; padded.len()];
    let mut hits = vec![0.0f64; padded.len()];
    let mut sigs = vec![0.0f64; padded.len()];
    for wave in 0..waves {
        let slab_zs: Vec<usize> = zs.iter().copied().skip(wave).step_by(waves).collect();
        let tasks = carve_slabs(&mut sums, &mut hits, &mut sigs, &slab_zs, edge, xy);
        tasks.into_par_iter().for_each(|(z0, mut slab)| {
            for &y0 in &ys {
                for &x0 in &xs {
                    process_window(
                        &padded,
                        ranking_vol.as_ref(),
                        params,
                        &geom,
                        (x0, y0, z0),
                        &mut slab,
                    );
                }
            }
        });
    }

    let src = padded.data();
    let mut out = vec![0.0f64; padded.len()];
    let mut sigma_m = vec![0.0f64; padded.len()];
    for i in 0..padded.len() {
        if hits[i] > 0.0 {
            out[i] = (sums[i] / hits[i]).max(0.0);
            sigma_m[i] = SIGMA_BETA * sigs[i] / hits[i];
        } else {
            // possible only for selection groupings that skip corner patches
            out[i] = src[i];
        }
    }
    let denoised = volume::crop(&padded.like(out)?, vol.dims())?;
    let sigma_m = volume::crop(&padded.like(sigma_m)?, vol.dims())?;

    let lut = RicianLut::standard();
    let mut capped = 0usize;
    let sigma_g: Vec<f64> = denoised
        .data()
        .iter()
        .zip(sigma_m.data())
        .map(|(&v, &s)| {
            if s <= 0.0 {
                0.0
            } else {
                let c = rician_correct_sigma(s, v / s, &lut);
                capped += !c.converged as usize;
                c.sigma_g
            }
        })
        .collect();
    if capped > 0 {
        log::debug!(
            "sigma correction hit its iteration cap on {capped}/{} voxels \
             (near-Rayleigh neighbourhoods); last iterates used",
            sigma_g.len()
        );
    }
    Ok((denoised, NoiseMap::varying(vol.dims(), sigma_g)?))
}

/// The noise-map half of [`denoise`] exposed standalone.
pub fn estimate_noise_map(vol: &Volume3D, params: &NlpcaParams) -> Result<NoiseMap> {
    Ok(denoise(vol, params)?.1)
}

/// Patches of one window as a standalone sample matrix (exposed for tests
/// and the tuner's non-overlapping fast path).
pub fn window_samples(
    vol: &Volume3D,
    origin: (usize, usize, usize),
    geom: &PatchGeometry,
) -> SampleMatrix {
    volume::extract_patches(vol, origin, geom)
}
