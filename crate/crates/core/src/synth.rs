//! Deterministic synthetic sequences: noisy spherical shells under rigid
//! translation, rigid rotation, two-body articulation, and radial
//! breathing. Small enough to train toy models on, structured enough that
//! motion compensation has something to find.

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::{Coord, CoordSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    RigidTranslate,
    RigidRotate,
    TwoBlobArticulate,
    BreathingSphere,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::RigidTranslate,
        SynthKind::RigidRotate,
        SynthKind::TwoBlobArticulate,
        SynthKind::BreathingSphere,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::RigidTranslate => "rigid-translate",
            SynthKind::RigidRotate => "rigid-rotate",
            SynthKind::TwoBlobArticulate => "two-blob-articulate",
            SynthKind::BreathingSphere => "breathing-sphere",
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sequence kind {:?}, expected one of {}",
                    s,
                    SynthKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub frames: usize,
    /// Surface samples per frame; the voxelized count lands slightly lower
    /// after duplicate removal.
    pub points: usize,
    pub bit_depth: u8,
    pub seed: u64,
}

impl SynthSpec {
    /// Per-frame displacement when the motion is an exact lattice shift.
    pub fn known_translation(&self) -> Option<Coord> {
        match self.kind {
            SynthKind::RigidTranslate => Some([1, 0, 0]),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(4..=16).contains(&self.bit_depth) {
            return Err(Error::Config(format!(
                "bit depth {} outside 4..=16",
                self.bit_depth
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("sequence needs at least one frame".into()));
        }
        if self.points == 0 {
            return Err(Error::Config("sequence needs at least one point".into()));
        }
        let g = 1usize << self.bit_depth;
        if self.kind == SynthKind::RigidTranslate && self.frames >= g / 4 {
            return Err(Error::Config(format!(
                "{} frames of unit translation exceed a {}-bit grid",
                self.frames, self.bit_depth
            )));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<CoordSet>> {
        self.validate()?;
        let g = (1u32 << self.bit_depth) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.kind {
            SynthKind::RigidTranslate => {
                // Voxelize once, then shift exact lattice steps: every frame
                // is frame 0 displaced by k * (1, 0, 0), point for point.
                let center = [g * 0.35, g * 0.5, g * 0.5];
                let base = shell(&mut rng, self.points, center, g * 0.22, g * 0.02);
                let frame0 = voxelize(&base, self.bit_depth)?;
                (0..self.frames)
                    .map(|k| shift(&frame0, [k as i32, 0, 0], self.bit_depth))
                    .collect()
            }
            SynthKind::RigidRotate => {
                let center = [g * 0.5, g * 0.5, g * 0.5];
                let base = shell(&mut rng, self.points, center, g * 0.3, g * 0.02);
                let step = 3.0f64.to_radians();
                (0..self.frames)
                    .map(|k| {
                        let rotated = rotate_z(&base, center, step * k as f64);
                        voxelize(&rotated, self.bit_depth)
                    })
                    .collect()
            }
            SynthKind::TwoBlobArticulate => {
                // A static body and a smaller one orbiting it: piecewise
                // rigid, discontinuous at the boundary between the parts.
                let pivot = [g * 0.45, g * 0.5, g * 0.5];
                let body = shell(&mut rng, self.points * 2 / 3, pivot, g * 0.2, g * 0.02);
                let arm0 = shell(
                    &mut rng,
                    self.points - self.points * 2 / 3,
                    [0.0, 0.0, 0.0],
                    g * 0.11,
                    g * 0.015,
                );
                let orbit = g * 0.36;
                let step = 4.0f64.to_radians();
                (0..self.frames)
                    .map(|k| {
                        let a = step * k as f64;
                        let c = [
                            pivot[0] + orbit * a.cos(),
                            pivot[1] + orbit * a.sin(),
                            pivot[2],
                        ];
                        let mut pts = body.clone();
                        pts.extend(arm0.iter().map(|p| {
                            [p[0] + c[0], p[1] + c[1], p[2] + c[2]]
                        }));
                        voxelize(&pts, self.bit_depth)
                    })
                    .collect()
            }
            SynthKind::BreathingSphere => {
                let center = [g * 0.5, g * 0.5, g * 0.5];
                let dirs = directions(&mut rng, self.points);
                let jitter: Vec<f64> =
                    (0..self.points).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (0..self.frames)
                    .map(|k| {
                        let phase = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
                        let r = g * 0.25 * (1.0 + 0.18 * phase.sin());
                        let pts: Vec<[f64; 3]> = dirs
                            .iter()
                            .zip(&jitter)
                            .map(|(d, j)| {
                                let rr = r + j * g * 0.015;
                                [
                                    center[0] + rr * d[0],
                                    center[1] + rr * d[1],
                                    center[2] + rr * d[2],
                                ]
                            })
                            .collect();
                        voxelize(&pts, self.bit_depth)
                    })
                    .collect()
            }
        }
    }
}

/// Uniform directions on the unit sphere (Marsaglia's method).
fn directions(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s >= 1.0 {
            continue;
        }
        let f = 2.0 * (1.0 - s).sqrt();
        out.push([u * f, v * f, 1.0 - 2.0 * s]);
    }
    out
}

/// Spherical shell around `center` with radial jitter: a fuzzy surface.
fn shell(
    rng: &mut ChaCha8Rng,
    n: usize,
    center: [f64; 3],
    radius: f64,
    fuzz: f64,
) -> Vec<[f64; 3]> {
    directions(rng, n)
        .into_iter()
        .map(|d| {
            let r = radius + rng.gen_range(-1.0..1.0) * fuzz;
            [
                center[0] + r * d[0],
                center[1] + r * d[1],
                center[2] + r * d[2],
            ]
        })
        .collect()
}

fn rotate_z(pts: &[[f64; 3]], center: [f64; 3], angle: f64) -> Vec<[f64; 3]> {
    let (s, c) = angle.sin_cos();
    pts.iter()
        .map(|p| {
            let x = p[0] - center[0];
            let y = p[1] - center[1];
            [center[0] + c * x - s * y, center[1] + s * x + c * y, p[2]]
        })
        .collect()
}

/// Rounds to the nearest lattice point, clamps into the grid, and removes
/// duplicates.
fn voxelize(pts: &[[f64; 3]], bit_depth: u8) -> Result<CoordSet> {
    let max = (1i32 << bit_depth) - 1;
    let coords: Vec<Coord> = pts
        .iter()
        .map(|p| {
            let mut c = [0i32; 3];
            for d in 0..3 {
                c[d] = (p[d].round() as i32).clamp(0, max);
            }
            c
        })
        .collect();
    CoordSet::new(coords, 1)
}

fn shift(x: &CoordSet, d: Coord, bit_depth: u8) -> Result<CoordSet> {
    let max = (1i32 << bit_depth) - 1;
    let coords: Vec<Coord> = x
        .coords()
        .iter()
        .map(|c| {
            let n = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
            if n.iter().any(|&v| v < 0 || v > max) {
                Err(Error::Coords(format!(
                    "shifted point {n:?} leaves the {bit_depth}-bit grid"
                )))
            } else {
                Ok(n)
            }
        })
        .collect::<Result<_>>()?;
    CoordSet::new(coords, 1)
}
