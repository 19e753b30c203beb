//! Real spherical harmonic analysis on the equirectangular cell-center
//! grid, degree power spectra, and model/truth spectra ratios.
//!
//! Convention: orthonormal real harmonics without the Condon-Shortley
//! sign. Basis functions are `Pbar_lm(x) * {1, sqrt(2) cos(m phi),
//! sqrt(2) sin(m phi)}` with `int Y^2 dOmega = 1`, so a constant field 1
//! has `c_00 = sqrt(4 pi)` and Parseval reads
//! `sum_l (2l+1) P_l = int f^2 dOmega`.
//!
//! Latitude quadrature uses midpoint-node weights solving the Legendre
//! moment conditions up to degree nlat-1. On top of the raw projection a
//! per-order correction `G^-1` (Gram matrix of the sampled basis under
//! the quadrature) removes aliasing, making analysis exact for fields
//! band-limited to l_max. Transforms are dense matrix products; at desk
//! scale that is both fast enough and directly differentiable.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{GemError, Result};
use crate::grid::{Field, GridSpec};
use crate::tape::ConstMatrix;

/// Real spherical-harmonic coefficients up to `l_max`.
///
/// Layout per degree `l` (flat offset `l^2`): `[a_l0, a_l1, b_l1,
/// a_l2, b_l2, ...]` where `a` multiplies the cosine basis and `b` the
/// sine basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    pub l_max: usize,
    pub data: Vec<f64>,
}

impl ShCoeffs {
    pub fn zeros(l_max: usize) -> Self {
        ShCoeffs {
            l_max,
            data: vec![0.0; (l_max + 1) * (l_max + 1)],
        }
    }

    pub fn ncoef(l_max: usize) -> usize {
        (l_max + 1) * (l_max + 1)
    }

    pub fn idx(l: usize, m: usize, sine: bool) -> usize {
        debug_assert!(m <= l);
        if m == 0 {
            l * l
        } else {
            l * l + 2 * m - 1 + usize::from(sine)
        }
    }

    pub fn get(&self, l: usize, m: usize, sine: bool) -> f64 {
        self.data[Self::idx(l, m, sine)]
    }

    pub fn set(&mut self, l: usize, m: usize, sine: bool, v: f64) {
        self.data[Self::idx(l, m, sine)] = v;
    }

    /// Squared complex magnitude `|c_lm|^2`; for m > 0 this is
    /// `(a^2 + b^2) / 2` under the real-pair identification.
    pub fn mag2(&self, l: usize, m: usize) -> f64 {
        if m == 0 {
            let a = self.get(l, 0, false);
            a * a
        } else {
            let a = self.get(l, m, false);
            let b = self.get(l, m, true);
            0.5 * (a * a + b * b)
        }
    }
}

/// Degree-averaged power spectrum, `P_l >= 0` in field units squared.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeSpectrum {
    pub p: Vec<f64>,
}

/// `P_l = (|c_l0|^2 + sum_{m=1..l} 2 |c_lm|^2) / (2l+1)`.
pub fn degree_power(coeffs: &ShCoeffs) -> DegreeSpectrum {
    let mut p = Vec::with_capacity(coeffs.l_max + 1);
    for l in 0..=coeffs.l_max {
        let mut acc = coeffs.mag2(l, 0);
        for m in 1..=l {
            acc += 2.0 * coeffs.mag2(l, m);
        }
        p.push(acc / (2.0 * l as f64 + 1.0));
    }
    DegreeSpectrum { p }
}

/// Precomputed transform operators for one grid and band limit.
pub struct ShtPlan {
    grid: GridSpec,
    l_max: usize,
    /// Latitude quadrature weights (sum = 2, integrating sin(theta) d theta).
    quad_weights: Vec<f64>,
    /// De-aliased analysis operator, `[ncoef, npix]`.
    analysis: Arc<ConstMatrix>,
    /// Synthesis operator, `[npix, ncoef]`.
    synthesis: Arc<ConstMatrix>,
    /// Maps elementwise-squared coefficients to `P_l`, `[l_max+1, ncoef]`.
    degree_map: Arc<ConstMatrix>,
}

impl ShtPlan {
    pub fn new(grid: &GridSpec, l_max: usize) -> Result<Self> {
        let nlat = grid.nlat();
        let nlon = grid.nlon();
        if l_max + 1 > nlat {
            return Err(GemError::Config(format!(
                "l_max {l_max} needs nlat >= {} (have {nlat})",
                l_max + 1
            )));
        }
        if 2 * l_max >= nlon {
            return Err(GemError::Config(format!(
                "l_max {l_max} needs nlon > {} to avoid azimuthal aliasing (have {nlon})",
                2 * l_max
            )));
        }

        // Colatitude cosines, north to south.
        let x: Vec<f64> = grid
            .lat_centers()
            .iter()
            .map(|lat| lat.to_radians().sin())
            .collect();
        let quad_weights = midpoint_quadrature_weights(&x)?;

        let alf = AlfTable::new(&x, l_max);
        let ncoef = ShCoeffs::ncoef(l_max);
        let npix = nlat * nlon;
        let dphi = 2.0 * PI / nlon as f64;
        let phi: Vec<f64> = grid.lon_centers().iter().map(|l| l.to_radians()).collect();

        // Synthesis S[(i,j), k].
        let mut synthesis = vec![0.0; npix * ncoef];
        for i in 0..nlat {
            for j in 0..nlon {
                let row = &mut synthesis[(i * nlon + j) * ncoef..(i * nlon + j + 1) * ncoef];
                for l in 0..=l_max {
                    row[ShCoeffs::idx(l, 0, false)] = alf.get(i, l, 0);
                    for m in 1..=l {
                        let p = alf.get(i, l, m) * std::f64::consts::SQRT_2;
                        row[ShCoeffs::idx(l, m, false)] = p * (m as f64 * phi[j]).cos();
                        row[ShCoeffs::idx(l, m, true)] = p * (m as f64 * phi[j]).sin();
                    }
                }
            }
        }

        // Raw analysis: quadrature-weighted transpose of the basis.
        let mut analysis = vec![0.0; ncoef * npix];
        for l in 0..=l_max {
            for m in 0..=l {
                for sine in [false, true] {
                    if m == 0 && sine {
                        continue;
                    }
                    let k = ShCoeffs::idx(l, m, sine);
                    let row = &mut analysis[k * npix..(k + 1) * npix];
                    for i in 0..nlat {
                        let latw = quad_weights[i] * alf.get(i, l, m) * dphi;
                        for j in 0..nlon {
                            let az = if m == 0 {
                                1.0
                            } else if sine {
                                std::f64::consts::SQRT_2 * (m as f64 * phi[j]).sin()
                            } else {
                                std::f64::consts::SQRT_2 * (m as f64 * phi[j]).cos()
                            };
                            row[i * nlon + j] = latw * az;
                        }
                    }
                }
            }
        }

        // Per-order Gram correction: within order m the raw projection of
        // a band-limited field mixes degrees through
        // G_{l l'} = 2 pi sum_i w_i Pbar_lm(x_i) Pbar_l'm(x_i).
        // Multiplying by G^-1 restores exact analysis up to l_max.
        for m in 0..=l_max {
            let nl = l_max + 1 - m;
            let mut gram = vec![0.0; nl * nl];
            for (a, l) in (m..=l_max).enumerate() {
                for (b, lp) in (m..=l_max).enumerate() {
                    let mut acc = 0.0;
                    for i in 0..nlat {
                        acc += quad_weights[i] * alf.get(i, l, m) * alf.get(i, lp, m);
                    }
                    gram[a * nl + b] = 2.0 * PI * acc;
                }
            }
            let inv = invert(&gram, nl)?;
            for sine in [false, true] {
                if m == 0 && sine {
                    continue;
                }
                let rows: Vec<usize> = (m..=l_max).map(|l| ShCoeffs::idx(l, m, sine)).collect();
                let old: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|&k| analysis[k * npix..(k + 1) * npix].to_vec())
                    .collect();
                for (a, &k) in rows.iter().enumerate() {
                    let row = &mut analysis[k * npix..(k + 1) * npix];
                    for v in row.iter_mut() {
                        *v = 0.0;
                    }
                    for (b, o) in old.iter().enumerate() {
                        let c = inv[a * nl + b];
                        if c != 0.0 {
                            for (rv, &ov) in row.iter_mut().zip(o) {
                                *rv += c * ov;
                            }
                        }
                    }
                }
            }
        }

        // P_l as a weighted sum of squared coefficients.
        let mut degree_map = vec![0.0; (l_max + 1) * ncoef];
        for l in 0..=l_max {
            let w = 1.0 / (2.0 * l as f64 + 1.0);
            degree_map[l * ncoef + ShCoeffs::idx(l, 0, false)] = w;
            for m in 1..=l {
                degree_map[l * ncoef + ShCoeffs::idx(l, m, false)] = w;
                degree_map[l * ncoef + ShCoeffs::idx(l, m, true)] = w;
            }
        }

        Ok(ShtPlan {
            grid: grid.clone(),
            l_max,
            quad_weights,
            analysis: Arc::new(ConstMatrix::new(ncoef, npix, analysis)),
            synthesis: Arc::new(ConstMatrix::new(npix, ncoef, synthesis)),
            degree_map: Arc::new(ConstMatrix::new(l_max + 1, ncoef, degree_map)),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Analysis operator for differentiable spectral losses.
    pub fn analysis_matrix(&self) -> Arc<ConstMatrix> {
        Arc::clone(&self.analysis)
    }

    /// Squared-coefficient to degree-power map for the same purpose.
    pub fn degree_map(&self) -> Arc<ConstMatrix> {
        Arc::clone(&self.degree_map)
    }

    pub fn analyze_values(&self, values: &[f64]) -> Result<ShCoeffs> {
        let npix = self.grid.ncell();
        if values.len() != npix {
            return Err(GemError::GridMismatch(format!(
                "field has {} cells, plan expects {npix}",
                values.len()
            )));
        }
        let a = &self.analysis;
        let mut out = vec![0.0; a.rows];
        for (k, slot) in out.iter_mut().enumerate() {
            let row = &a.data[k * npix..(k + 1) * npix];
            *slot = row.iter().zip(values).map(|(&r, &v)| r * v).sum();
        }
        Ok(ShCoeffs {
            l_max: self.l_max,
            data: out,
        })
    }

    /// Analyze one channel of a field.
    pub fn analyze(&self, field: &Field, channel: &str) -> Result<ShCoeffs> {
        if field.grid() != &self.grid {
            return Err(GemError::GridMismatch(
                "field grid differs from plan grid".to_string(),
            ));
        }
        let vals: Vec<f64> = field
            .channel_by_name(channel)?
            .iter()
            .map(|&v| v as f64)
            .collect();
        self.analyze_values(&vals)
    }

    pub fn synthesize(&self, coeffs: &ShCoeffs) -> Vec<f64> {
        let s = &self.synthesis;
        let ncoef = s.cols;
        assert_eq!(coeffs.data.len(), ncoef);
        let mut out = vec![0.0; s.rows];
        for (p, slot) in out.iter_mut().enumerate() {
            let row = &s.data[p * ncoef..(p + 1) * ncoef];
            *slot = row.iter().zip(&coeffs.data).map(|(&r, &c)| r * c).sum();
        }
        out
    }

    /// Quadrature-consistent area mean of f^2 (in units of the unit
    /// sphere: divide `int f^2 dOmega` by `4 pi`).
    pub fn area_mean_square(&self, values: &[f64]) -> f64 {
        let nlon = self.grid.nlon();
        let dphi = 2.0 * PI / nlon as f64;
        let mut acc = 0.0;
        for i in 0..self.grid.nlat() {
            let mut row = 0.0;
            for j in 0..nlon {
                let v = values[i * nlon + j];
                row += v * v;
            }
            acc += self.quad_weights[i] * row * dphi;
        }
        acc / (4.0 * PI)
    }
}

/// Mean over ensemble members of `P_l(member) / P_l(truth)`, skipping
/// degrees where the truth power is below 1e-14. `None` marks skipped
/// degrees; errors if every degree is degenerate.
pub fn spectra_ratio(
    plan: &ShtPlan,
    members: &[&Field],
    truth: &Field,
    channel: &str,
) -> Result<Vec<Option<f64>>> {
    if members.is_empty() {
        return Err(GemError::EnsembleTooSmall { s: 0, min: 1 });
    }
    let p_truth = degree_power(&plan.analyze(truth, channel)?);
    let mut sums = vec![0.0; plan.l_max() + 1];
    for member in members {
        let p = degree_power(&plan.analyze(member, channel)?);
        for l in 0..=plan.l_max() {
            sums[l] += p.p[l];
        }
    }
    let s = members.len() as f64;
    let mut out = Vec::with_capacity(plan.l_max() + 1);
    let mut any = false;
    for l in 0..=plan.l_max() {
        if p_truth.p[l] < 1e-14 {
            out.push(None);
        } else {
            any = true;
            out.push(Some(sums[l] / s / p_truth.p[l]));
        }
    }
    if !any {
        return Err(GemError::DegenerateSpectra);
    }
    Ok(out)
}

/// Normalized associated Legendre table at fixed nodes, orthonormal
/// spherical convention without the Condon-Shortley sign:
/// `int Pbar_lm^2 dx = 1/(2 pi)`.
struct AlfTable {
    l_max: usize,
    nlat: usize,
    /// `[node][pair]` with pair index `l(l+1)/2 + m`.
    values: Vec<f64>,
}

impl AlfTable {
    fn new(x: &[f64], l_max: usize) -> Self {
        let npair = (l_max + 1) * (l_max + 2) / 2;
        let nlat = x.len();
        let mut values = vec![0.0; nlat * npair];
        for (i, &xi) in x.iter().enumerate() {
            let s = (1.0 - xi * xi).max(0.0).sqrt();
            let row = &mut values[i * npair..(i + 1) * npair];
            row[0] = (1.0 / (4.0 * PI)).sqrt();
            for m in 1..=l_max {
                row[pair_idx(m, m)] =
                    row[pair_idx(m - 1, m - 1)] * s * ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
            }
            for m in 0..l_max {
                row[pair_idx(m + 1, m)] = xi * ((2 * m + 3) as f64).sqrt() * row[pair_idx(m, m)];
            }
            for m in 0..=l_max {
                for l in (m + 2)..=l_max {
                    let lf = l as f64;
                    let mf = m as f64;
                    let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
                    let b = (((lf - 1.0) * (lf - 1.0) - mf * mf)
                        / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
                        .sqrt();
                    row[pair_idx(l, m)] =
                        a * (xi * row[pair_idx(l - 1, m)] - b * row[pair_idx(l - 2, m)]);
                }
            }
        }
        AlfTable {
            l_max,
            nlat,
            values,
        }
    }

    fn get(&self, node: usize, l: usize, m: usize) -> f64 {
        debug_assert!(node < self.nlat && l <= self.l_max && m <= l);
        self.values[node * (self.l_max + 1) * (self.l_max + 2) / 2 + pair_idx(l, m)]
    }
}

fn pair_idx(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Weights on fixed nodes `x_i = sin(lat_i)` solving the Legendre moment
/// conditions `sum_i w_i P_k(x_i) = 2 delta_{k0}` for k < nlat, i.e.
/// exact integration of polynomials up to degree nlat-1 against
/// `sin(theta) d theta`.
fn midpoint_quadrature_weights(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    // M[k][i] = P_k(x_i) by the Legendre three-term recurrence.
    let mut m = vec![0.0; n * n];
    for (i, &xi) in x.iter().enumerate() {
        let mut pkm1 = 1.0;
        let mut pk = xi;
        m[i] = 1.0;
        if n > 1 {
            m[n + i] = xi;
        }
        for k in 2..n {
            let kf = k as f64;
            let pkp = ((2.0 * kf - 1.0) * xi * pk - (kf - 1.0) * pkm1) / kf;
            m[k * n + i] = pkp;
            pkm1 = pk;
            pk = pkp;
        }
    }
    let mut rhs = vec![0.0; n];
    rhs[0] = 2.0;
    let w = solve_dense(&mut m, &mut rhs)?;
    Ok(w)
}

/// In-place LU solve with partial pivoting: `a` is n x n row-major,
/// consumed; returns x with a x = b.
fn solve_dense(a: &mut [f64], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    assert_eq!(a.len(), n * n);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut piv = col;
        let mut best = a[perm[col] * n + col].abs();
        for r in (col + 1)..n {
            let v = a[perm[r] * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(GemError::Config(
                "singular matrix in quadrature/Gram solve".to_string(),
            ));
        }
        perm.swap(col, piv);
        let prow = perm[col];
        for r in (col + 1)..n {
            let row = perm[r];
            let f = a[row * n + col] / a[prow * n + col];
            a[row * n + col] = f;
            for c in (col + 1)..n {
                a[row * n + c] -= f * a[prow * n + c];
            }
        }
    }
    // Forward/back substitution under the permutation.
    let mut y = vec![0.0; n];
    for r in 0..n {
        let mut acc = b[perm[r]];
        for c in 0..r {
            acc -= a[perm[r] * n + c] * y[c];
        }
        y[r] = acc;
    }
    let mut xs = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = y[r];
        for c in (r + 1)..n {
            acc -= a[perm[r] * n + c] * xs[c];
        }
        xs[r] = acc / a[perm[r] * n + r];
    }
    Ok(xs)
}

/// Dense inverse via column-by-column solves.
fn invert(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        let mut work = a.to_vec();
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = solve_dense(&mut work, &mut e)?;
        for r in 0..n {
            inv[r * n + col] = x[r];
        }
    }
    Ok(inv)
}
