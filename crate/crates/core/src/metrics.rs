//! PSNR, rate-distortion curves and Bjøntegaard deltas.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported value for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BdError {
    #[error("curve {label:?} has {n} usable points, at least 4 are needed")]
    Arity { label: String, n: usize },
    #[error("curve {label:?}: {detail}")]
    InvalidPoint { label: String, detail: String },
    #[error("curve {label:?} is not strictly increasing in both rate and PSNR")]
    NonMonotonic { label: String },
    #[error("curves {anchor:?} and {test:?} do not overlap in {axis}")]
    NoOverlap { anchor: String, test: String, axis: &'static str },
    #[error("polynomial fit failed for curve {label:?}")]
    Fit { label: String },
}

/// PSNR in dB between the 8-bit roundings of two images. Identical images
/// give `+inf`.
pub fn psnr(x: &Image, x_hat: &Image) -> Result<f64> {
    let mse = mse_8bit(x, x_hat)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (255.0f64 * 255.0 / mse).log10() })
}

pub fn psnr_capped(x: &Image, x_hat: &Image) -> Result<f64> {
    Ok(psnr(x, x_hat)?.min(PSNR_CAP))
}

/// Mean squared error of the 8-bit roundings, in 8-bit units.
pub fn mse_8bit(x: &Image, x_hat: &Image) -> Result<f64> {
    if x.height() != x_hat.height() || x.width() != x_hat.width() {
        return Err(Error::Data(format!(
            "psnr shape mismatch: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            x_hat.height(),
            x_hat.width()
        )));
    }
    let (a, b) = (x.to_u8(), x_hat.to_u8());
    let sum: u64 = a.iter().zip(&b).map(|(&p, &q)| (p as i64 - q as i64).pow(2) as u64).sum();
    Ok(sum as f64 / a.len() as f64)
}

/// `8 * bytes / pixels`.
pub fn bpp(stream_bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * stream_bytes as f64 / (height * width) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub label: String,
    points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts by rate, drops points with infinite PSNR and checks that at
    /// least 4 strictly increasing points remain.
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self, BdError> {
        let label = label.into();
        points.retain(|p| p.psnr_db != f64::INFINITY);
        for p in &points {
            if !p.bpp.is_finite() || p.bpp <= 0.0 || !p.psnr_db.is_finite() {
                return Err(BdError::InvalidPoint {
                    label,
                    detail: format!("bpp {} / psnr {} (bpp must be > 0, both finite)", p.bpp, p.psnr_db),
                });
            }
        }
        if points.len() < 4 {
            return Err(BdError::Arity { label, n: points.len() });
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp || w[1].psnr_db <= w[0].psnr_db) {
            return Err(BdError::NonMonotonic { label });
        }
        Ok(RDCurve { label, points })
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }

    fn log_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp.log10()).collect()
    }

    fn psnrs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.psnr_db).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BdVariant {
    /// Least-squares cubic polynomial per curve.
    #[default]
    Cubic,
    /// Piecewise cubic Hermite interpolation with monotone slopes.
    Pchip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdResult {
    pub bd_rate_percent: f64,
    pub bd_psnr_db: f64,
}

/// BD-Rate of `test` against `anchor` (negative means fewer bits at equal
/// quality) and BD-PSNR (positive means higher quality at equal rate).
pub fn bd_metrics(anchor: &RDCurve, test: &RDCurve, variant: BdVariant) -> Result<BdResult, BdError> {
    let rate_delta = mean_difference(
        (&anchor.psnrs(), &anchor.log_rates()),
        (&test.psnrs(), &test.log_rates()),
        variant,
        anchor,
        test,
        "PSNR",
    )?;
    let psnr_delta = mean_difference(
        (&anchor.log_rates(), &anchor.psnrs()),
        (&test.log_rates(), &test.psnrs()),
        variant,
        anchor,
        test,
        "rate",
    )?;
    Ok(BdResult { bd_rate_percent: (10f64.powf(rate_delta) - 1.0) * 100.0, bd_psnr_db: psnr_delta })
}

/// Average of `f_test - f_anchor` over the overlap of the two x ranges,
/// where each `f` is fitted to `(x, y)` samples.
fn mean_difference(
    a: (&[f64], &[f64]),
    t: (&[f64], &[f64]),
    variant: BdVariant,
    anchor: &RDCurve,
    test: &RDCurve,
    axis: &'static str,
) -> Result<f64, BdError> {
    let lo = a.0[0].max(t.0[0]);
    let hi = a.0[a.0.len() - 1].min(t.0[t.0.len() - 1]);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(BdError::NoOverlap { anchor: anchor.label.clone(), test: test.label.clone(), axis });
    }
    let ia = integrate(a.0, a.1, lo, hi, variant).ok_or_else(|| BdError::Fit { label: anchor.label.clone() })?;
    let it = integrate(t.0, t.1, lo, hi, variant).ok_or_else(|| BdError::Fit { label: test.label.clone() })?;
    Ok((it - ia) / (hi - lo))
}

fn integrate(x: &[f64], y: &[f64], lo: f64, hi: f64, variant: BdVariant) -> Option<f64> {
    match variant {
        BdVariant::Cubic => {
            let p = Polynomial::fit(x, y, 3)?;
            Some(p.integral(lo, hi))
        }
        BdVariant::Pchip => Some(Pchip::new(x, y).integral(lo, hi)),
    }
}

/// Least-squares polynomial in a normalized variable `(x - shift) / scale`.
#[derive(Debug, Clone)]
pub struct Polynomial {
    coeffs: Vec<f64>,
    shift: f64,
    scale: f64,
}

impl Polynomial {
    pub fn fit(x: &[f64], y: &[f64], degree: usize) -> Option<Self> {
        if x.len() != y.len() || x.len() <= degree {
            return None;
        }
        let shift = x.iter().sum::<f64>() / x.len() as f64;
        let spread = x.iter().map(|v| (v - shift).abs()).fold(0.0, f64::max);
        let scale = if spread > 0.0 { spread } else { 1.0 };
        let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| ((x[i] - shift) / scale).powi(j as i32));
        let b = DVector::from_column_slice(y);
        let qr = a.qr();
        let qtb = qr.q().transpose() * b;
        let coeffs = qr.r().solve_upper_triangular(&qtb)?;
        coeffs.iter().all(|c| c.is_finite()).then(|| Polynomial { coeffs: coeffs.iter().copied().collect(), shift, scale })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.shift) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    /// Exact definite integral over `[lo, hi]`.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let u = (x - self.shift) / self.scale;
            self.coeffs.iter().enumerate().map(|(j, c)| c * u.powi(j as i32 + 1) / (j + 1) as f64).sum::<f64>()
        };
        (anti(hi) - anti(lo)) * self.scale
    }
}

/// Monotone piecewise cubic Hermite interpolant (Fritsch-Carlson slopes).
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing with at least two samples.
    pub fn new(x: &[f64], y: &[f64]) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![delta[0]; 2];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Pchip { x: x.to_vec(), y: y.to_vec(), d }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s).powi(2),
            s * (1.0 - s).powi(2),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.x.len();
        self.x.partition_point(|&v| v <= t).saturating_sub(1).min(n - 2)
    }

    /// Integral of the segment `i` cubic from its left knot to `t`.
    fn partial(&self, i: usize, t: f64) -> f64 {
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
        let i00 = s - s3 + s4 / 2.0;
        let i10 = s2 / 2.0 - 2.0 * s3 / 3.0 + s4 / 4.0;
        let i01 = s3 - s4 / 2.0;
        let i11 = s4 / 4.0 - s3 / 3.0;
        h * (i00 * self.y[i] + i10 * h * self.d[i] + i01 * self.y[i + 1] + i11 * h * self.d[i + 1])
    }

    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let (a, b) = (self.segment(lo), self.segment(hi));
        if a == b {
            return self.partial(a, hi) - self.partial(a, lo);
        }
        let mut total = self.partial(a, self.x[a + 1]) - self.partial(a, lo);
        for i in a + 1..b {
            total += self.partial(i, self.x[i + 1]);
        }
        total + self.partial(b, hi)
    }
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > (3.0 * del0).abs() {
        3.0 * del0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(label: &str, pts: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(label, pts.iter().map(|&(bpp, psnr_db)| RDPoint { bpp, psnr_db }).collect()).unwrap()
    }

    fn anchor() -> Vec<(f64, f64)> {
        vec![(0.1, 26.0), (0.25, 29.5), (0.5, 32.0), (0.9, 35.2)]
    }

    #[test]
    fn psnr_closed_forms() {
        let black = Image::filled(4, 4, [0.0; 3]);
        let white = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        assert_eq!(psnr(&black, &black).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(&black, &black).unwrap(), PSNR_CAP);
        assert!(psnr(&black, &Image::filled(4, 5, [0.0; 3])).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula_on_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Image::from_fn(16, 16, |_, _, _| rng.gen());
        let b = Image::from_fn(16, 16, |_, _, _| rng.gen());
        let (pa, pb) = (a.to_u8(), b.to_u8());
        let mut se = 0.0f64;
        for i in 0..pa.len() {
            let d = pa[i] as f64 - pb[i] as f64;
            se += d * d;
        }
        let direct = 20.0 * 255f64.log10() - 10.0 * (se / pa.len() as f64).log10();
        assert!((psnr(&a, &b).unwrap() - direct).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn curve_validation() {
        let p = |bpp, psnr_db| RDPoint { bpp, psnr_db };
        assert!(matches!(RDCurve::new("a", vec![p(0.1, 20.0); 3]), Err(BdError::Arity { .. })));
        let non_mono = vec![p(0.1, 20.0), p(0.2, 22.0), p(0.3, 21.0), p(0.4, 25.0)];
        assert!(matches!(RDCurve::new("a", non_mono), Err(BdError::NonMonotonic { .. })));
        let neg = vec![p(-0.1, 20.0), p(0.2, 22.0), p(0.3, 23.0), p(0.4, 25.0)];
        assert!(matches!(RDCurve::new("a", neg), Err(BdError::InvalidPoint { .. })));
        let with_inf = vec![p(0.1, 20.0), p(0.2, 22.0), p(0.3, 23.0), p(0.4, 25.0), p(5.0, f64::INFINITY)];
        assert_eq!(RDCurve::new("a", with_inf).unwrap().points().len(), 4);
    }

    #[test]
    fn identity_shift_and_offset() {
        let a = curve("anchor", &anchor());
        for variant in [BdVariant::Cubic, BdVariant::Pchip] {
            let r = bd_metrics(&a, &a, variant).unwrap();
            assert!(r.bd_rate_percent.abs() < 1e-9 && r.bd_psnr_db.abs() < 1e-9);
            let cheaper = curve("t", &anchor().iter().map(|&(b, p)| (b * 0.9, p)).collect::<Vec<_>>());
            let r = bd_metrics(&a, &cheaper, variant).unwrap();
            assert!((r.bd_rate_percent + 10.0).abs() < 0.01, "{r:?}");
            let better = curve("t", &anchor().iter().map(|&(b, p)| (b, p + 0.5)).collect::<Vec<_>>());
            let r = bd_metrics(&a, &better, variant).unwrap();
            assert!((r.bd_psnr_db - 0.5).abs() < 0.01, "{r:?}");
        }
    }

    #[test]
    fn disjoint_curves_have_no_overlap() {
        let a = curve("a", &anchor());
        let far = curve("b", &[(2.0, 40.0), (3.0, 41.0), (4.0, 42.0), (5.0, 43.0)]);
        assert!(matches!(bd_metrics(&a, &far, BdVariant::Cubic), Err(BdError::NoOverlap { .. })));
    }

    #[test]
    fn polynomial_fit_recovers_a_cubic() {
        let x = [1.0, 2.0, 3.5, 4.0, 6.0];
        let f = |x: f64| 0.5 - 2.0 * x + 0.3 * x * x - 0.01 * x * x * x;
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let p = Polynomial::fit(&x, &y, 3).unwrap();
        assert!((p.eval(2.7) - f(2.7)).abs() < 1e-9);
        // antiderivative: 0.5x - x^2 + 0.1x^3 - 0.0025x^4
        let anti = |x: f64| 0.5 * x - x * x + 0.1 * x.powi(3) - 0.0025 * x.powi(4);
        assert!((p.integral(1.5, 5.0) - (anti(5.0) - anti(1.5))).abs() < 1e-9);
    }

    #[test]
    fn pchip_interpolates_and_integrates_linear_data() {
        let x = [0.0, 1.0, 2.0, 4.0];
        let y = [1.0, 3.0, 5.0, 9.0];
        let p = Pchip::new(&x, &y);
        for &t in &[0.0, 0.5, 1.7, 3.3, 4.0] {
            assert!((p.eval(t) - (1.0 + 2.0 * t)).abs() < 1e-12);
        }
        assert!((p.integral(0.5, 3.0) - ((3.0 + 9.0) - (0.5 + 0.25))).abs() < 1e-12);
    }

    fn rd_curve_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        (0.05f64..0.2, prop::collection::vec((0.2f64..0.8, 1.0f64..4.0), 3..6), 20.0f64..30.0).prop_map(
            |(b0, steps, p0)| {
                let mut out = vec![(b0, p0)];
                for (db, dp) in steps {
                    let (b, p) = *out.last().unwrap();
                    out.push((b * (1.0 + db), p + dp));
                }
                out
            },
        )
    }

    proptest! {
        #[test]
        fn antisymmetry(a in rd_curve_strategy(), shift in -0.3f64..0.3, dp in -0.5f64..0.5) {
            let ca = curve("a", &a);
            let cb = curve("b", &a.iter().map(|&(b, p)| (b * (1.0 + shift), p + dp)).collect::<Vec<_>>());
            for variant in [BdVariant::Cubic, BdVariant::Pchip] {
                let ab = bd_metrics(&ca, &cb, variant).unwrap();
                let ba = bd_metrics(&cb, &ca, variant).unwrap();
                prop_assert!((ab.bd_psnr_db + ba.bd_psnr_db).abs() < 1e-9);
                let prod = (1.0 + ab.bd_rate_percent / 100.0) * (1.0 + ba.bd_rate_percent / 100.0);
                prop_assert!((prod - 1.0).abs() < 1e-3, "{}", prod);
            }
        }
    }
}
