//! Color-space conversions and color-difference metrics.
//!
//! sRGB values are encoded with the IEC 61966-2-1 transfer curve and
//! converted to CIELab relative to the D65 white of the sRGB primaries.

use serde::{Deserialize, Serialize};

/// An sRGB-encoded color with components nominally in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Rgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Rgb {
    pub const BLACK: Rgb = Rgb::new(0.0, 0.0, 0.0);
    pub const WHITE: Rgb = Rgb::new(1.0, 1.0, 1.0);

    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Rgb { r, g, b }
    }

    pub const fn from_array(v: [f64; 3]) -> Self {
        Rgb::new(v[0], v[1], v[2])
    }

    pub const fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn clamp01(self) -> Self {
        Rgb::new(
            self.r.clamp(0.0, 1.0),
            self.g.clamp(0.0, 1.0),
            self.b.clamp(0.0, 1.0),
        )
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }
}

impl From<[f64; 3]> for Rgb {
    fn from(v: [f64; 3]) -> Self {
        Rgb::from_array(v)
    }
}

impl From<Rgb> for [f64; 3] {
    fn from(c: Rgb) -> Self {
        c.to_array()
    }
}

/// A CIELab color (D65).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Lab { l, a, b }
    }

    pub fn chroma(self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Unit hue vector `(a, b) / sqrt(a² + b² + HUE_EPS)`.
    pub fn hue_vector(self) -> [f64; 2] {
        let n = (self.a * self.a + self.b * self.b + HUE_EPS).sqrt();
        [self.a / n, self.b / n]
    }
}

/// Regularizer for the hue vector at zero chroma.
pub const HUE_EPS: f64 = 1e-8;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

// D65 white as the image of sRGB (1,1,1), so white maps to a = b = 0 exactly.
const WHITE_XYZ: [f64; 3] = [
    SRGB_TO_XYZ[0][0] + SRGB_TO_XYZ[0][1] + SRGB_TO_XYZ[0][2],
    SRGB_TO_XYZ[1][0] + SRGB_TO_XYZ[1][1] + SRGB_TO_XYZ[1][2],
    SRGB_TO_XYZ[2][0] + SRGB_TO_XYZ[2][1] + SRGB_TO_XYZ[2][2],
];

const LAB_DELTA: f64 = 6.0 / 29.0;

/// sRGB decoding curve and its derivative.
#[inline]
fn srgb_to_linear(c: f64) -> (f64, f64) {
    if c <= 0.04045 {
        (c / 12.92, 1.0 / 12.92)
    } else {
        let t = (c + 0.055) / 1.055;
        let p = t.powf(1.4);
        (p * t, 2.4 / 1.055 * p)
    }
}

/// Lab companding function and its derivative; the linear branch below
/// (6/29)³ makes it C¹.
#[inline]
fn lab_f(t: f64) -> (f64, f64) {
    const T0: f64 = LAB_DELTA * LAB_DELTA * LAB_DELTA;
    if t > T0 {
        let c = t.cbrt();
        (c, 1.0 / (3.0 * c * c))
    } else {
        let k = 1.0 / (3.0 * LAB_DELTA * LAB_DELTA);
        (t * k + 4.0 / 29.0, k)
    }
}

pub fn srgb_to_lab(c: Rgb) -> Lab {
    srgb_to_lab_with_jacobian(c).0
}

/// Converts to Lab and returns the Jacobian `∂(L, a, b) / ∂(r, g, b)`.
pub fn srgb_to_lab_with_jacobian(c: Rgb) -> (Lab, [[f64; 3]; 3]) {
    let rgb = c.to_array();
    let mut lin = [0.0; 3];
    let mut dlin = [0.0; 3];
    for k in 0..3 {
        (lin[k], dlin[k]) = srgb_to_linear(rgb[k]);
    }
    let mut f = [0.0; 3];
    let mut df = [0.0; 3];
    for row in 0..3 {
        let xyz: f64 = (0..3).map(|k| SRGB_TO_XYZ[row][k] * lin[k]).sum();
        (f[row], df[row]) = lab_f(xyz / WHITE_XYZ[row]);
    }
    // ∂f_row/∂rgb_k
    let mut dfd = [[0.0; 3]; 3];
    for row in 0..3 {
        for k in 0..3 {
            dfd[row][k] = df[row] * SRGB_TO_XYZ[row][k] / WHITE_XYZ[row] * dlin[k];
        }
    }
    let lab = Lab::new(
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    );
    let mut jac = [[0.0; 3]; 3];
    for k in 0..3 {
        jac[0][k] = 116.0 * dfd[1][k];
        jac[1][k] = 500.0 * (dfd[0][k] - dfd[1][k]);
        jac[2][k] = 200.0 * (dfd[1][k] - dfd[2][k]);
    }
    (lab, jac)
}

pub fn delta_e76(x: Lab, y: Lab) -> f64 {
    let dl = x.l - y.l;
    let da = x.a - y.a;
    let db = x.b - y.b;
    (dl * dl + da * da + db * db).sqrt()
}

/// CIEDE2000 with kL = kC = kH = 1.
pub fn delta_e00(x: Lab, y: Lab) -> f64 {
    let c1 = x.chroma();
    let c2 = y.chroma();
    let c_bar = 0.5 * (c1 + c2);
    let c_bar7 = c_bar.powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + 25f64.powi(7))).sqrt());

    let a1p = (1.0 + g) * x.a;
    let a2p = (1.0 + g) * y.a;
    let c1p = a1p.hypot(x.b);
    let c2p = a2p.hypot(y.b);

    let hue = |b: f64, ap: f64| {
        if b == 0.0 && ap == 0.0 {
            0.0
        } else {
            let h = b.atan2(ap).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(x.b, a1p);
    let h2p = hue(y.b, a2p);

    let dlp = y.l - x.l;
    let dcp = c2p - c1p;
    let cprod = c1p * c2p;
    let dhp = if cprod == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dhp_big = 2.0 * cprod.sqrt() * (dhp.to_radians() / 2.0).sin();

    let lbp = 0.5 * (x.l + y.l);
    let cbp = 0.5 * (c1p + c2p);
    let hbp = if cprod == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        0.5 * (h1p + h2p)
    } else if h1p + h2p < 360.0 {
        0.5 * (h1p + h2p + 360.0)
    } else {
        0.5 * (h1p + h2p - 360.0)
    };

    let t = 1.0 - 0.17 * (hbp - 30.0).to_radians().cos()
        + 0.24 * (2.0 * hbp).to_radians().cos()
        + 0.32 * (3.0 * hbp + 6.0).to_radians().cos()
        - 0.20 * (4.0 * hbp - 63.0).to_radians().cos();
    let d_theta = 30.0 * (-((hbp - 275.0) / 25.0).powi(2)).exp();
    let cbp7 = cbp.powi(7);
    let rc = 2.0 * (cbp7 / (cbp7 + 25f64.powi(7))).sqrt();
    let lb50 = (lbp - 50.0) * (lbp - 50.0);
    let sl = 1.0 + 0.015 * lb50 / (20.0 + lb50).sqrt();
    let sc = 1.0 + 0.045 * cbp;
    let sh = 1.0 + 0.015 * cbp * t;
    let rt = -(2.0 * d_theta).to_radians().sin() * rc;

    let tl = dlp / sl;
    let tc = dcp / sc;
    let th = dhp_big / sh;
    (tl * tl + tc * tc + th * th + rt * tc * th).max(0.0).sqrt()
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("image dimensions differ: {left} vs {right} pixels")]
pub struct DimensionMismatch {
    pub left: usize,
    pub right: usize,
}

/// PSNR in dB over all channels of sRGB-encoded values, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(pred: &[Rgb], target: &[Rgb]) -> Result<f64, DimensionMismatch> {
    if pred.len() != target.len() {
        return Err(DimensionMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Ok(PSNR_CAP_DB);
    }
    let sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let (dr, dg, db) = (p.r - t.r, p.g - t.g, p.b - t.b);
            dr * dr + dg * dg + db * db
        })
        .sum();
    Ok(psnr_from_mse(sse / (3 * pred.len()) as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn white_and_black() {
        let w = srgb_to_lab(Rgb::WHITE);
        assert!(close(w.l, 100.0, 1e-4) && close(w.a, 0.0, 1e-4) && close(w.b, 0.0, 1e-4));
        let k = srgb_to_lab(Rgb::BLACK);
        assert!(close(k.l, 0.0, 1e-12) && close(k.a, 0.0, 1e-12) && close(k.b, 0.0, 1e-12));
    }

    #[test]
    fn golden_lab_value() {
        // Reference computed in numpy with the same matrix and white point.
        let lab = srgb_to_lab(Rgb::new(0.5, 0.25, 0.75));
        assert!(close(lab.l, 41.15532343887163, 1e-9), "{lab:?}");
        assert!(close(lab.a, 51.410823067112254, 1e-9), "{lab:?}");
        assert!(close(lab.b, -56.44851926151049, 1e-9), "{lab:?}");
        // scikit-image `rgb2lab` uses slightly different constants.
        assert!(close(lab.l, 41.15482443, 5e-3));
        assert!(close(lab.a, 51.40896626, 5e-3));
        assert!(close(lab.b, -56.44527966, 5e-3));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for c in [
            Rgb::new(0.5, 0.25, 0.75),
            Rgb::new(0.01, 0.02, 0.03),
            Rgb::new(0.9, 0.1, 0.4),
        ] {
            let (_, jac) = srgb_to_lab_with_jacobian(c);
            let h = 1e-6;
            for k in 0..3 {
                let mut p = c.to_array();
                let mut m = c.to_array();
                p[k] += h;
                m[k] -= h;
                let lp = srgb_to_lab(p.into());
                let lm = srgb_to_lab(m.into());
                let fd = [
                    (lp.l - lm.l) / (2.0 * h),
                    (lp.a - lm.a) / (2.0 * h),
                    (lp.b - lm.b) / (2.0 * h),
                ];
                for row in 0..3 {
                    assert!(
                        close(jac[row][k], fd[row], 1e-4 * (1.0 + fd[row].abs())),
                        "row {row} col {k}: {} vs {}",
                        jac[row][k],
                        fd[row]
                    );
                }
            }
        }
    }

    #[test]
    fn delta_e76_examples() {
        let x = Lab::new(50.0, 0.0, 0.0);
        assert_eq!(delta_e76(x, x), 0.0);
        assert!(close(delta_e76(x, Lab::new(50.0, 3.0, 4.0)), 5.0, 1e-12));
    }

    // Published CIEDE2000 verification pairs, cross-checked against
    // scikit-image's `deltaE_ciede2000`.
    const SHARMA_PAIRS: &[([f64; 3], [f64; 3], f64)] = &[
        ([50.0, 2.6772, -79.7751], [50.0, 0.0, -82.7485], 2.0425),
        ([50.0, 3.1571, -77.2803], [50.0, 0.0, -82.7485], 2.8615),
        ([50.0, 0.0, 0.0], [50.0, -1.0, 2.0], 2.3669),
        ([50.0, 2.5, 0.0], [73.0, 25.0, -18.0], 27.1492),
        ([50.0, 2.5, 0.0], [61.0, -5.0, 29.0], 22.8977),
        ([50.0, 2.5, 0.0], [56.0, -27.0, -3.0], 31.9030),
        ([50.0, 2.5, 0.0], [58.0, 24.0, 15.0], 19.4535),
        ([50.0, 2.5, 0.0], [50.0, 3.1736, 0.5854], 1.0000),
        ([60.2574, -34.0099, 36.2677], [60.4626, -34.1751, 39.4387], 1.2644),
        ([22.7233, 20.0904, -46.6940], [23.0331, 14.9730, -42.5619], 2.0373),
        ([90.8027, -2.0831, 1.4410], [91.1528, -1.6435, 0.0447], 1.4441),
        ([2.0776, 0.0795, -1.1350], [0.9033, -0.0636, -0.5514], 0.9082),
    ];

    #[test]
    fn delta_e00_published_pairs() {
        for (a, b, want) in SHARMA_PAIRS {
            let x = Lab::new(a[0], a[1], a[2]);
            let y = Lab::new(b[0], b[1], b[2]);
            let got = delta_e00(x, y);
            assert!(close(got, *want, 1e-4), "{a:?} {b:?}: {got} vs {want}");
            assert!(close(delta_e00(y, x), *want, 1e-4));
        }
    }

    #[test]
    fn delta_e00_neutral_lightness_only() {
        // With a = b = 0 only the lightness term survives:
        // ΔL' / S_L, S_L = 1 + 0.015 (L̄ − 50)² / sqrt(20 + (L̄ − 50)²).
        let x = Lab::new(40.0, 0.0, 0.0);
        let y = Lab::new(70.0, 0.0, 0.0);
        let lbar: f64 = 55.0;
        let sl = 1.0 + 0.015 * (lbar - 50.0).powi(2) / (20.0 + (lbar - 50.0).powi(2)).sqrt();
        assert!(close(delta_e00(x, y), 30.0 / sl, 1e-12));
        assert_eq!(delta_e00(x, x), 0.0);
    }

    #[test]
    fn psnr_examples() {
        let a = vec![Rgb::new(0.2, 0.4, 0.6); 10];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b: Vec<Rgb> = a.iter().map(|c| Rgb::new(c.r + 0.1, c.g - 0.1, c.b + 0.1)).collect();
        assert!(close(psnr(&a, &b).unwrap(), 20.0, 1e-9));
        assert!(psnr(&a, &b[..3]).is_err());
    }

    #[test]
    fn psnr_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<Rgb> = (0..257)
            .map(|_| Rgb::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let b: Vec<Rgb> = (0..257)
            .map(|_| Rgb::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let mut sse = 0.0;
        for i in 0..a.len() {
            for (p, t) in a[i].to_array().iter().zip(b[i].to_array()) {
                sse += (p - t).powi(2);
            }
        }
        let want = 10.0 * (1.0 / (sse / (3.0 * 257.0))).log10();
        assert!(close(psnr(&a, &b).unwrap(), want, 1e-10));
    }

    fn lab_strategy() -> impl Strategy<Value = Lab> {
        (0.0..100.0f64, -128.0..128.0f64, -128.0..128.0f64).prop_map(|(l, a, b)| Lab::new(l, a, b))
    }

    proptest! {
        #[test]
        fn metrics_symmetric(x in lab_strategy(), y in lab_strategy()) {
            prop_assert!((delta_e76(x, y) - delta_e76(y, x)).abs() < 1e-12);
            prop_assert!((delta_e00(x, y) - delta_e00(y, x)).abs() < 1e-9);
            prop_assert!(delta_e00(x, y) >= 0.0);
            prop_assert!(delta_e00(x, x) < 1e-12);
        }

        #[test]
        fn delta_e76_triangle(x in lab_strategy(), y in lab_strategy(), z in lab_strategy()) {
            prop_assert!(delta_e76(x, z) <= delta_e76(x, y) + delta_e76(y, z) + 1e-9);
        }

        #[test]
        fn gray_axis_is_neutral(v in 0.0..1.0f64) {
            let lab = srgb_to_lab(Rgb::new(v, v, v));
            prop_assert!(lab.a.abs() < 1e-6 && lab.b.abs() < 1e-6);
        }
    }
}
