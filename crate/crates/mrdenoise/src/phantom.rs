//! Synthetic piecewise-constant phantoms so every trend in the test suite
//! runs without external datasets.
//!
//! The desk-scale default is a 64-cube with three nested ellipsoids plus two
//! small lesion spheres over a zero background. The T1-like profile puts the
//! brightest tissue innermost (60/140/220 outward-in); the T2-like profile
//! inverts the ordering with a smaller tissue contrast (160/110/70), which is
//! what makes its optimal shrink thresholds sit lower.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub const PHANTOM_PEAK: f64 = 255.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Primitive {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        intensity: f64,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        intensity: f64,
    },
}

impl Primitive {
    fn intensity(&self) -> f64 {
        match self {
            Primitive::Ellipsoid { intensity, .. } | Primitive::Box { intensity, .. } => {
                *intensity
            }
        }
    }

    fn contains(&self, p: [f64; 3], jitter: [f64; 3]) -> bool {
        match self {
            Primitive::Ellipsoid { center, radii, .. } => {
                let mut q = 0.0;
                for a in 0..3 {
                    let d = (p[a] - center[a] - jitter[a]) / radii[a];
                    q += d * d;
                }
                q <= 1.0
            }
            Primitive::Box { min, max, .. } => (0..3).all(|a| {
                p[a] >= min[a] + jitter[a] && p[a] <= max[a] + jitter[a]
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastProfile {
    T1Like,
    T2Like,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub profile: ContrastProfile,
    /// Fraction of each axis forced to zero near every face.
    pub margin_fraction: f64,
    /// Overlaps resolve last-writer-wins, in list order.
    pub primitives: Vec<Primitive>,
    /// One 3x3x3 mean pass on non-constant neighborhoods.
    pub smooth_edges: bool,
    /// Uniform per-primitive center jitter in voxels, driven by the seed.
    pub jitter_voxels: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::invalid("phantom dims must be positive"));
        }
        if !(0.0..0.5).contains(&self.margin_fraction) {
            return Err(Error::invalid("margin_fraction must be in [0, 0.5)"));
        }
        if !(0.0..=4.0).contains(&self.jitter_voxels) {
            return Err(Error::invalid("jitter_voxels must be in [0, 4]"));
        }
        for p in &self.primitives {
            if !(0.0..=PHANTOM_PEAK).contains(&p.intensity()) {
                return Err(Error::invalid("primitive intensity outside [0, 255]"));
            }
        }
        Ok(())
    }

    fn nested(dims: (usize, usize, usize), profile: ContrastProfile, levels: [f64; 3], lesions: [f64; 2]) -> Self {
        let c = [
            dims.0 as f64 / 2.0,
            dims.1 as f64 / 2.0,
            dims.2 as f64 / 2.0,
        ];
        let s = dims.0.min(dims.1).min(dims.2) as f64 / 64.0;
        let ell = |radii: [f64; 3], intensity: f64| Primitive::Ellipsoid {
            center: c,
            radii: [radii[0] * s, radii[1] * s, radii[2] * s],
            intensity,
        };
        let sphere = |center: [f64; 3], r: f64, intensity: f64| Primitive::Ellipsoid {
            center: [c[0] + center[0] * s, c[1] + center[1] * s, c[2] + center[2] * s],
            radii: [r * s, r * s, r * s],
            intensity,
        };
        PhantomSpec {
            dims,
            profile,
            margin_fraction: 0.04,
            primitives: vec![
                ell([25.0, 27.0, 23.0], levels[0]),
                ell([17.0, 18.0, 15.0], levels[1]),
                ell([9.0, 10.0, 8.0], levels[2]),
                sphere([-13.0, 5.0, 4.0], 3.5, lesions[0]),
                sphere([10.0, -8.0, -6.0], 2.5, lesions[1]),
            ],
            smooth_edges: true,
            jitter_voxels: 1.0,
        }
    }

    /// Bright tissue innermost, dark-to-bright 60/140/220, one dark and one
    /// bright lesion.
    pub fn default_t1(dims: (usize, usize, usize)) -> Self {
        Self::nested(dims, ContrastProfile::T1Like, [60.0, 140.0, 220.0], [30.0, 250.0])
    }

    /// Inverted, lower-contrast tissue ordering 160/110/70 with a bright and
    /// a dark lesion.
    pub fn default_t2(dims: (usize, usize, usize)) -> Self {
        Self::nested(dims, ContrastProfile::T2Like, [160.0, 110.0, 70.0], [200.0, 40.0])
    }

    /// The 64-cube T1-like default used by the validation suite.
    pub fn desk() -> Self {
        Self::default_t1((64, 64, 64))
    }
}

/// Rasterize a phantom. Deterministic for a fixed (spec, seed) pair.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Volume3D> {
    spec.validate()?;
    let (nx, ny, nz) = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitters: Vec<[f64; 3]> = spec
        .primitives
        .iter()
        .map(|_| {
            let j = spec.jitter_voxels;
            [
                rng.random_range(-j..=j),
                rng.random_range(-j..=j),
                rng.random_range(-j..=j),
            ]
        })
        .collect();

    let mut data = vec![0.0f64; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let mut v = 0.0;
                for (prim, &jit) in spec.primitives.iter().zip(&jitters) {
                    if prim.contains(p, jit) {
                        v = prim.intensity(); // last writer wins
                    }
                }
                data[x + nx * (y + ny * z)] = v;
            }
        }
    }

    // zero margin band near every face
    let margin = |n: usize| (spec.margin_fraction * n as f64).round() as usize;
    let (mx, my, mz) = (margin(nx), margin(ny), margin(nz));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if x < mx || x >= nx - mx || y < my || y >= ny - my || z < mz || z >= nz - mz {
                    data[x + nx * (y + ny * z)] = 0.0;
                }
            }
        }
    }

    if spec.smooth_edges {
        data = smooth_edges_once(&data, spec.dims);
    }
    Volume3D::new(spec.dims, (1.0, 1.0, 1.0), PHANTOM_PEAK, data)
}

/// Replace voxels whose 3x3x3 neighborhood is non-constant by the
/// neighborhood mean (in-bounds voxels only).
fn smooth_edges_once(data: &[f64], dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let mut out = data.to_vec();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let v = data[i];
                let mut sum = 0.0;
                let mut cnt = 0.0;
                let mut constant = true;
                for dz in -1isize..=1 {
                    let zz = z as isize + dz;
                    if zz < 0 || zz >= nz as isize {
                        continue;
                    }
                    for dy in -1isize..=1 {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= ny as isize {
                            continue;
                        }
                        for dx in -1isize..=1 {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= nx as isize {
                                continue;
                            }
                            let u = data[xx as usize + nx * (yy as usize + ny * zz as usize)];
                            if u != v {
                                constant = false;
                            }
                            sum += u;
                            cnt += 1.0;
                        }
                    }
                }
                if !constant {
                    out[i] = sum / cnt;
                }
            }
        }
    }
    out
}
