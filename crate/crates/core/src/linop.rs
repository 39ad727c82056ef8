//! Per-band dereverberation operator `Ĩ − G` and its factorization.
//!
//! Vectors are ordered newest frame first: entry `i` of an operator input of
//! width `m + D + L − 1` is frame `e − i`, where `e` is the newest frame of the
//! block. With that ordering, row `i` holds `1` at column `i` and `−conj(g_l)`
//! at column `i + D + l − 1`, reproducing the sliding filter in [`crate::wpe`].

use std::io::{Read, Write};
use std::path::Path;

use faer::{Mat, MatRef};
use num_complex::Complex64;

use crate::error::{Error, Result};

const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Relative threshold below which singular values are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct BandOperator {
    g: Vec<Complex64>,
    delay: usize,
    frames: usize,
}

impl BandOperator {
    pub fn filter(&self) -> &[Complex64] {
        &self.g
    }

    pub fn taps(&self) -> usize {
        self.g.len()
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    /// Output length `m`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of past frames beyond the block the operator reads: `D + L − 1`.
    pub fn context(&self) -> usize {
        self.delay + self.g.len() - 1
    }

    /// Input length `m + D + L − 1`.
    pub fn width(&self) -> usize {
        self.frames + self.context()
    }

    pub fn dense(&self) -> Mat<Complex64> {
        let mut a = Mat::<Complex64>::zeros(self.frames, self.width());
        for i in 0..self.frames {
            a.write(i, i, ONE);
            for (l, g) in self.g.iter().enumerate() {
                a.write(i, i + self.delay + l, -g.conj());
            }
        }
        a
    }
}

pub fn build_band_operator(g: &[Complex64], delay: usize, frames: usize) -> Result<BandOperator> {
    if frames == 0 || g.is_empty() || delay == 0 {
        return Err(Error::InvalidArgument(format!(
            "operator needs m >= 1, L >= 1, D >= 1 (got m={frames}, L={}, D={delay})",
            g.len()
        )));
    }
    if g.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::InvalidArgument("filter has non-finite entries".into()));
    }
    Ok(BandOperator {
        g: g.to_vec(),
        delay,
        frames,
    })
}

/// Banded matrix-vector product `(Ĩ − G) y`.
pub fn apply_operator(op: &BandOperator, y: &[Complex64]) -> Result<Vec<Complex64>> {
    if y.len() != op.width() {
        return Err(Error::ShapeMismatch(format!(
            "operator expects {} inputs, got {}",
            op.width(),
            y.len()
        )));
    }
    let gc: Vec<Complex64> = op.g.iter().map(|g| g.conj()).collect();
    Ok((0..op.frames)
        .map(|i| {
            let tail = &y[i + op.delay..i + op.delay + gc.len()];
            y[i] - gc.iter().zip(tail).map(|(g, v)| g * v).sum::<Complex64>()
        })
        .collect())
}

/// Thin SVD `A = U diag(s) Vh` with singular values in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSvd {
    pub u: Mat<Complex64>,
    pub s: Vec<f64>,
    pub vh: Mat<Complex64>,
}

impl BandSvd {
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.vh.ncols()
    }

    pub fn reconstruct(&self) -> Mat<Complex64> {
        let mut us = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            for i in 0..us.nrows() {
                us.write(i, j, us.read(i, j) * *s);
            }
        }
        us * &self.vh
    }

    fn permuted(self, order: &[usize]) -> BandSvd {
        let u = Mat::from_fn(self.u.nrows(), order.len(), |i, j| self.u.read(i, order[j]));
        let vh = Mat::from_fn(order.len(), self.vh.ncols(), |i, j| self.vh.read(order[i], j));
        let s = order.iter().map(|&j| self.s[j]).collect();
        BandSvd { u, s, vh }
    }
}

/// Thin SVD of an arbitrary complex matrix.
pub fn svd_matrix(a: MatRef<'_, Complex64>) -> Result<BandSvd> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let v = a.read(i, j);
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(Error::Numerical("matrix has non-finite entries".into()));
            }
        }
    }
    let svd = a.thin_svd();
    let s: Vec<f64> = (0..svd.s_diagonal().nrows())
        .map(|i| svd.s_diagonal().read(i).re)
        .collect();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("SVD did not converge".into()));
    }
    let raw = BandSvd {
        u: svd.u().to_owned(),
        s,
        vh: svd.v().adjoint().to_owned(),
    };
    let mut order: Vec<usize> = (0..raw.s.len()).collect();
    order.sort_by(|&a, &b| raw.s[b].total_cmp(&raw.s[a]));
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        Ok(raw)
    } else {
        Ok(raw.permuted(&order))
    }
}

pub fn svd_band(op: &BandOperator) -> Result<BandSvd> {
    svd_matrix(op.dense().as_ref())
}

/// SVD of the Moore-Penrose pseudo-inverse: factors swapped, singular values
/// reciprocated above `PINV_RTOL * s_max`, zero below.
pub fn pseudo_inverse_svd(svd: &BandSvd) -> BandSvd {
    let smax = svd.s.iter().cloned().fold(0.0, f64::max);
    let tau = PINV_RTOL * smax;
    let s: Vec<f64> = svd
        .s
        .iter()
        .map(|&v| if v > tau && v > 0.0 { 1.0 / v } else { 0.0 })
        .collect();
    let swapped = BandSvd {
        u: svd.vh.adjoint().to_owned(),
        s,
        vh: svd.u.adjoint().to_owned(),
    };
    // Largest reciprocal first, zeros last.
    let mut order: Vec<usize> = (0..swapped.s.len()).collect();
    order.sort_by(|&a, &b| swapped.s[b].total_cmp(&swapped.s[a]));
    swapped.permuted(&order)
}

const CACHE_MAGIC: &[u8; 8] = b"DRVBSVD\0";
const CACHE_VERSION: u32 = 1;

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

/// Write factorizations to a little-endian binary cache with a versioned header.
pub fn write_svd_cache(path: impl AsRef<Path>, svds: &[BandSvd]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    put_u64(&mut w, svds.len() as u64)?;
    for svd in svds {
        let (m, r, n) = (svd.u.nrows(), svd.s.len(), svd.vh.ncols());
        for d in [m, r, n] {
            put_u64(&mut w, d as u64)?;
        }
        for j in 0..r {
            for i in 0..m {
                let c = svd.u.read(i, j);
                put_f64(&mut w, c.re)?;
                put_f64(&mut w, c.im)?;
            }
        }
        for s in &svd.s {
            put_f64(&mut w, *s)?;
        }
        for j in 0..n {
            for i in 0..r {
                let c = svd.vh.read(i, j);
                put_f64(&mut w, c.re)?;
                put_f64(&mut w, c.im)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_svd_cache(path: impl AsRef<Path>) -> Result<Vec<BandSvd>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format("not a factorization cache".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "factorization cache version {version} is not supported"
        )));
    }
    let count = get_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let m = get_u64(&mut r)? as usize;
        let rank = get_u64(&mut r)? as usize;
        let n = get_u64(&mut r)? as usize;
        let mut u = Mat::<Complex64>::zeros(m, rank);
        for j in 0..rank {
            for i in 0..m {
                u.write(i, j, Complex64::new(get_f64(&mut r)?, get_f64(&mut r)?));
            }
        }
        let s = (0..rank).map(|_| get_f64(&mut r)).collect::<std::io::Result<_>>()?;
        let mut vh = Mat::<Complex64>::zeros(rank, n);
        for j in 0..n {
            for i in 0..rank {
                vh.write(i, j, Complex64::new(get_f64(&mut r)?, get_f64(&mut r)?));
            }
        }
        out.push(BandSvd { u, s, vh });
    }
    Ok(out)
}

/// Frobenius norm of a complex matrix.
pub fn frobenius(a: MatRef<'_, Complex64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a.read(i, j).norm_sqr();
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{crandn_vec, rng};
    use faer::prelude::SpSolver;
    use proptest::prelude::*;

    const ZERO: Complex64 = Complex64::new(0.0, 0.0);

    fn rel(a: MatRef<'_, Complex64>, b: MatRef<'_, Complex64>) -> f64 {
        let d = Mat::from_fn(a.nrows(), a.ncols(), |i, j| a.read(i, j) - b.read(i, j));
        frobenius(d.as_ref()) / frobenius(b).max(1e-300)
    }

    fn random_op(seed: u64, m: usize, l: usize, d: usize) -> BandOperator {
        let mut r = rng(seed);
        let g: Vec<Complex64> = crandn_vec(&mut r, l).iter().map(|c| c * 0.4).collect();
        build_band_operator(&g, d, m).unwrap()
    }

    #[test]
    fn zero_filter_is_truncated_identity() {
        let op = build_band_operator(&[ZERO; 3], 2, 5).unwrap();
        let a = op.dense();
        assert_eq!((a.nrows(), a.ncols()), (5, 9));
        for i in 0..5 {
            for j in 0..9 {
                let want = if i == j { ONE } else { ZERO };
                assert_eq!(a.read(i, j), want);
            }
        }
        let s = svd_band(&op).unwrap();
        assert!(s.s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_by_four_example() {
        let a = Complex64::new(0.3, -0.2);
        let b = Complex64::new(-0.1, 0.7);
        let op = build_band_operator(&[a, b], 1, 2).unwrap();
        let d = op.dense();
        let want = [[ONE, -a.conj(), -b.conj(), ZERO], [ZERO, ONE, -a.conj(), -b.conj()]];
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(d.read(i, j), want[i][j]);
            }
        }
        // Row 0 is the sliding filter at the newest frame of a length-4 window.
        let y = [
            Complex64::new(1.0, 0.5),
            Complex64::new(-2.0, 0.1),
            Complex64::new(0.3, 0.3),
            Complex64::new(0.0, -1.0),
        ];
        let out = apply_operator(&op, &y).unwrap();
        assert!((out[0] - (y[0] - a.conj() * y[1] - b.conj() * y[2])).norm() < 1e-15);
        assert!((out[1] - (y[1] - a.conj() * y[2] - b.conj() * y[3])).norm() < 1e-15);
    }

    #[test]
    fn structure_counts() {
        let g: Vec<Complex64> = (1..=4).map(|v| Complex64::new(v as f64, 1.0)).collect();
        let op = build_band_operator(&g, 3, 7).unwrap();
        let d = op.dense();
        let mut ones = 0;
        let mut taps = 0;
        let mut other = 0;
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                let v = d.read(i, j);
                if v == ONE && j == i {
                    ones += 1;
                } else if v != ZERO {
                    let l = j as isize - i as isize - 3;
                    if (0..4).contains(&l) && v == -g[l as usize].conj() {
                        taps += 1;
                    } else {
                        other += 1;
                    }
                }
            }
        }
        assert_eq!((ones, taps, other), (7, 28, 0));
    }

    #[test]
    fn toeplitz_shift() {
        let d = random_op(5, 9, 4, 2).dense();
        for i in 1..d.nrows() {
            for j in 1..d.ncols() {
                assert_eq!(d.read(i, j), d.read(i - 1, j - 1));
            }
        }
    }

    #[test]
    fn build_errors() {
        assert!(build_band_operator(&[], 1, 4).is_err());
        assert!(build_band_operator(&[ONE], 0, 4).is_err());
        assert!(build_band_operator(&[ONE], 1, 0).is_err());
        assert!(build_band_operator(&[Complex64::new(f64::NAN, 0.0)], 1, 4).is_err());
        let op = random_op(1, 4, 2, 1);
        assert!(apply_operator(&op, &[ONE; 3]).is_err());
    }

    #[test]
    fn apply_matches_dense_on_random_instances() {
        let mut r = rng(77);
        for case in 0..100u64 {
            let m = 1 + (case as usize * 7) % 16;
            let l = 1 + (case as usize * 3) % 8;
            let d = 1 + (case as usize) % 4;
            let op = random_op(case, m, l, d);
            let y = crandn_vec(&mut r, op.width());
            let fast = apply_operator(&op, &y).unwrap();
            let ym = Mat::from_fn(y.len(), 1, |i, _| y[i]);
            let dense = op.dense() * &ym;
            for i in 0..m {
                let want = dense.read(i, 0);
                assert!((fast[i] - want).norm() <= 1e-12 * want.norm().max(1.0));
            }
        }
    }

    #[test]
    fn zero_filter_apply_selects_identity_part() {
        let op = build_band_operator(&[ZERO; 2], 1, 3).unwrap();
        let y: Vec<Complex64> = (0..5).map(|v| Complex64::new(v as f64, -1.0)).collect();
        assert_eq!(apply_operator(&op, &y).unwrap(), y[..3].to_vec());
    }

    #[test]
    fn svd_reconstructs() {
        let op = random_op(11, 4, 3, 1);
        assert_eq!(op.width(), 7);
        let svd = svd_band(&op).unwrap();
        assert!(rel(svd.reconstruct().as_ref(), op.dense().as_ref()) < 1e-10);
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        // orthonormal rows of Vh
        let g = &svd.vh * svd.vh.adjoint();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.read(i, j) - Complex64::new(want, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn realified_singular_values_double_up() {
        let op = random_op(23, 5, 3, 2);
        let a = op.dense();
        let (m, n) = (a.nrows(), a.ncols());
        let real = faer::Mat::<f64>::from_fn(2 * m, 2 * n, |i, j| {
            let c = a.read(i % m, j % n);
            match (i < m, j < n) {
                (true, true) | (false, false) => c.re,
                (true, false) => -c.im,
                (false, true) => c.im,
            }
        });
        let rs = real.singular_values();
        let mut rs: Vec<f64> = rs.into_iter().collect();
        rs.sort_by(|a, b| b.total_cmp(a));
        let cs = svd_band(&op).unwrap().s;
        for (i, s) in cs.iter().enumerate() {
            assert!((rs[2 * i] - s).abs() < 1e-10);
            assert!((rs[2 * i + 1] - s).abs() < 1e-10);
        }
    }

    #[test]
    fn pinv_of_truncated_identity() {
        let op = build_band_operator(&[ZERO; 2], 2, 3).unwrap();
        let a = op.dense();
        let p = pseudo_inverse_svd(&svd_band(&op).unwrap()).reconstruct();
        assert!(rel(p.as_ref(), a.adjoint().to_owned().as_ref()) < 1e-12);
        let proj = &p * &a;
        for i in 0..proj.nrows() {
            for j in 0..proj.ncols() {
                let want = if i == j && i < 3 { 1.0 } else { 0.0 };
                assert!((proj.read(i, j).re - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moore_penrose_identities() {
        for seed in 0..20 {
            let op = random_op(100 + seed, 6, 3, 2);
            let a = op.dense();
            let p = pseudo_inverse_svd(&svd_band(&op).unwrap()).reconstruct();
            let apa = &a * &p * &a;
            let pap = &p * &a * &p;
            assert!(rel(apa.as_ref(), a.as_ref()) < 1e-9);
            assert!(rel(pap.as_ref(), p.as_ref()) < 1e-9);
        }
    }

    #[test]
    fn pinv_matches_normal_equation_formula() {
        let op = random_op(42, 5, 3, 2);
        assert_eq!(op.width(), 9);
        let a = op.dense();
        let gram = &a * a.adjoint();
        let inv = gram.partial_piv_lu().solve(Mat::<Complex64>::identity(5, 5));
        let direct = a.adjoint() * &inv;
        let p = pseudo_inverse_svd(&svd_band(&op).unwrap()).reconstruct();
        assert!(rel(p.as_ref(), direct.as_ref()) < 1e-8);
    }

    #[test]
    fn pinv_thresholds_rank_deficiency() {
        let svd = BandSvd {
            u: Mat::<Complex64>::identity(2, 2),
            s: vec![2.0, 1e-14],
            vh: Mat::<Complex64>::identity(2, 2),
        };
        let p = pseudo_inverse_svd(&svd);
        assert_eq!(p.s, vec![0.5, 0.0]);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svd.bin");
        let svds: Vec<BandSvd> = (0..3).map(|s| svd_band(&random_op(s, 4, 2, 1)).unwrap()).collect();
        write_svd_cache(&path, &svds).unwrap();
        assert_eq!(read_svd_cache(&path).unwrap(), svds);
        std::fs::write(&path, b"garbage!garbage!").unwrap();
        assert!(read_svd_cache(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn reconstruction_property(seed in 0u64..10_000, m in 1usize..12, l in 1usize..6, d in 1usize..4) {
            let op = random_op(seed, m, l, d);
            let svd = svd_band(&op).unwrap();
            prop_assert!(rel(svd.reconstruct().as_ref(), op.dense().as_ref()) < 1e-10);
        }
    }
}
