//! Objective geometry quality (point-to-point and point-to-plane PSNR) and
//! rate-distortion curve comparison.

use crate::error::{Error, Result};
use crate::search::knn;
use crate::sparse::CoordSet;

/// One operating point of a codec: rate in bits per input point and the two
/// PSNR flavors measured against the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub d1_psnr: f64,
    pub d2_psnr: f64,
}

/// Rate-distortion sweep, lowest rate first. At least two points, strictly
/// increasing positive rate.
#[derive(Debug, Clone)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config(format!(
                "a rate-distortion curve needs at least 2 points, got {}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.bpp > 0.0) || !p.bpp.is_finite() {
                return Err(Error::Config(format!(
                    "point {i} has non-positive rate {}",
                    p.bpp
                )));
            }
            if i > 0 && p.bpp <= points[i - 1].bpp {
                return Err(Error::Config(format!(
                    "rates must increase strictly: point {i} at {} after {}",
                    p.bpp,
                    points[i - 1].bpp
                )));
            }
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    /// (rate, psnr) pairs for one of the two metrics.
    pub fn rate_psnr(&self, metric: PsnrKind) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|p| {
                let q = match metric {
                    PsnrKind::D1 => p.d1_psnr,
                    PsnrKind::D2 => p.d2_psnr,
                };
                (p.bpp, q)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsnrKind {
    D1,
    D2,
}

/// Infinite PSNR (identical clouds) rendered as a finite CSV value.
pub const PSNR_CAP: f64 = 999.0;

pub fn cap_psnr(psnr: f64) -> f64 {
    if psnr.is_finite() {
        psnr
    } else {
        PSNR_CAP
    }
}

fn as_points(c: &CoordSet) -> Vec<[f64; 3]> {
    c.coords()
        .iter()
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect()
}

fn check_pair(a: &CoordSet, b: &CoordSet) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Coords("PSNR of an empty cloud".into()));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (3.0 * peak * peak / mse).log10()
    }
}

/// Mean over `from` of the squared distance to the nearest point of `to`.
fn directional_d1(from: &[[f64; 3]], to: &[[f64; 3]]) -> Result<f64> {
    let nn = knn(from, to, 1)?;
    let total: f64 = nn.entries.iter().map(|n| n.dist * n.dist).sum();
    Ok(total / from.len() as f64)
}

/// Point-to-point PSNR: symmetric MSE is the worse of the two directional
/// means, peak energy is `3 * peak^2`. Identical clouds yield infinity.
pub fn d1_psnr(a: &CoordSet, b: &CoordSet, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    let pa = as_points(a);
    let pb = as_points(b);
    let mse = directional_d1(&pa, &pb)?.max(directional_d1(&pb, &pa)?);
    Ok(psnr_from_mse(mse, peak))
}

/// Surface normals by PCA over each point's 9 nearest neighbors (fewer on
/// tiny clouds): the eigenvector of the smallest covariance eigenvalue.
/// Orientation is arbitrary; only squared projections are used.
pub fn pca_normals(cloud: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let k = cloud.len().min(9);
    let nn = knn(cloud, cloud, k)?;
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let seg = nn.segment(i);
        let mut mean = [0.0f64; 3];
        for n in seg {
            let p = cloud[n.row as usize];
            for d in 0..3 {
                mean[d] += p[d];
            }
        }
        for m in &mut mean {
            *m /= seg.len() as f64;
        }
        let mut cov = [[0.0f64; 3]; 3];
        for n in seg {
            let p = cloud[n.row as usize];
            let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
            for r in 0..3 {
                for c in 0..3 {
                    cov[r][c] += d[r] * d[c];
                }
            }
        }
        out.push(smallest_eigenvector(cov));
    }
    Ok(out)
}

/// Mean over `from` of the squared plane-projected error against `to`,
/// using `to`'s precomputed normals.
fn directional_d2(from: &[[f64; 3]], to: &[[f64; 3]], to_normals: &[[f64; 3]]) -> Result<f64> {
    let nn = knn(from, to, 1)?;
    let mut total = 0.0;
    for n in &nn.entries {
        let nv = to_normals[n.row as usize];
        let proj = n.offset[0] * nv[0] + n.offset[1] * nv[1] + n.offset[2] * nv[2];
        total += proj * proj;
    }
    Ok(total / from.len() as f64)
}

/// Point-to-plane PSNR: the nearest-neighbor error vector is projected onto
/// the reference side's surface normal before squaring.
pub fn d2_psnr(a: &CoordSet, b: &CoordSet, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    let pa = as_points(a);
    let pb = as_points(b);
    let na = pca_normals(&pa)?;
    let nb = pca_normals(&pb)?;
    let mse = directional_d2(&pa, &pb, &nb)?.max(directional_d2(&pb, &pa, &na)?);
    Ok(psnr_from_mse(mse, peak))
}

/// Eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix, by
/// cyclic Jacobi rotations. Always returns a unit vector.
pub fn smallest_eigenvector(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..32 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for i in 0..3 {
                let (aip, aiq) = (a[i][p], a[i][q]);
                a[i][p] = c * aip - s * aiq;
                a[i][q] = s * aip + c * aiq;
            }
            for j in 0..3 {
                let (apj, aqj) = (a[p][j], a[q][j]);
                a[p][j] = c * apj - s * aqj;
                a[q][j] = s * apj + c * aqj;
            }
            for i in 0..3 {
                let (vip, viq) = (v[i][p], v[i][q]);
                v[i][p] = c * vip - s * viq;
                v[i][q] = s * vip + c * viq;
            }
        }
    }
    let mut best = 0;
    for i in 1..3 {
        if a[i][i] < a[best][best] {
            best = i;
        }
    }
    let n = [v[0][best], v[1][best], v[2][best]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    [n[0] / len, n[1] / len, n[2] / len]
}

/// Least-squares cubic fit `y ≈ Σ c_i x^i` with `x` centered at its mean
/// for conditioning. Returns (center, coefficients low-to-high).
fn cubic_fit(points: &[(f64, f64)]) -> Result<(f64, [f64; 4])> {
    let n = points.len();
    let center = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for &(x, y) in points {
        let xc = x - center;
        let basis = [1.0, xc, xc * xc, xc * xc * xc];
        for r in 0..4 {
            for c in 0..4 {
                ata[r][c] += basis[r] * basis[c];
            }
            atb[r] += basis[r] * y;
        }
    }
    let coeff = solve4(ata, atb).ok_or_else(|| {
        Error::Config("rate-distortion points are degenerate (repeated quality values)".into())
    })?;
    Ok((center, coeff))
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let mut piv = col;
        for r in col + 1..4 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for col in (0..4).rev() {
        let mut s = b[col];
        for c in col + 1..4 {
            s -= a[col][c] * x[c];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

/// Definite integral of the fitted cubic over `[lo, hi]` (absolute x).
fn cubic_integral(center: f64, c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| {
        let xc = x - center;
        xc * (c[0] + xc * (c[1] / 2.0 + xc * (c[2] / 3.0 + xc * c[3] / 4.0)))
    };
    anti(hi) - anti(lo)
}

/// Average rate difference of `test` against `anchor` in percent, over the
/// PSNR interval both curves cover. Each curve is a cubic fit of
/// `log10(rate)` against quality; negative values mean `test` spends fewer
/// bits at equal quality. Needs at least 4 points per curve.
pub fn bd_rate(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> Result<f64> {
    for (name, pts) in [("anchor", anchor), ("test", test)] {
        if pts.len() < 4 {
            return Err(Error::Config(format!(
                "{name} curve has {} points, BD-rate needs at least 4",
                pts.len()
            )));
        }
        for &(r, q) in pts {
            if !(r > 0.0) || !r.is_finite() || !q.is_finite() {
                return Err(Error::Config(format!(
                    "{name} curve has an invalid point ({r}, {q})"
                )));
            }
        }
    }
    let log_pts = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
        pts.iter().map(|&(r, q)| (q, r.log10())).collect()
    };
    let a_pts = log_pts(anchor);
    let t_pts = log_pts(test);

    let span = |pts: &[(f64, f64)]| {
        let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (a_lo, a_hi) = span(&a_pts);
    let (t_lo, t_hi) = span(&t_pts);
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if !(hi > lo) {
        return Err(Error::Config(format!(
            "quality ranges do not overlap: anchor [{a_lo:.3}, {a_hi:.3}], test [{t_lo:.3}, {t_hi:.3}]"
        )));
    }

    let (a_center, a_coef) = cubic_fit(&a_pts)?;
    let (t_center, t_coef) = cubic_fit(&t_pts)?;
    let a_int = cubic_integral(a_center, &a_coef, lo, hi);
    let t_int = cubic_integral(t_center, &t_coef, lo, hi);
    let avg_diff = (t_int - a_int) / (hi - lo);
    Ok((10.0f64.powf(avg_diff) - 1.0) * 100.0)
}
