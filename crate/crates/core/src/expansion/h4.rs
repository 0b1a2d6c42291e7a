//! The fourth-order correction H₄(S,Y,t) on the closed band |Y| ≤ Y^(j).
//!
//! ```text
//! A = (3γ²S / (2δ²|y*_S|))^{2/3},   B = γ² / (δ² y*_S²)
//! H₄ = Y²A/2 − Y⁴B/12
//! ```
//! S- and t-derivatives go through the logarithmic derivatives of A and B.

use super::TargetDerivs;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct H4 {
    pub h: f64,
    pub y: f64,
    pub yy: f64,
    pub s: f64,
    pub ys: f64,
    pub ss: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct H4Coeffs {
    a: f64,
    b: f64,
    a_s: f64,
    b_s: f64,
    a_ss: f64,
    b_ss: f64,
    a_t: f64,
    b_t: f64,
}

impl H4Coeffs {
    pub(crate) fn new(s: f64, delta: f64, gamma: f64, r: f64, tg: &TargetDerivs) -> Self {
        let ys = tg.y_s;
        let a = (1.5 * gamma * gamma * s / (delta * delta * ys.abs())).powf(2.0 / 3.0);
        let b = gamma * gamma / (delta * delta * ys * ys);
        let rho = tg.y_ss / ys;
        let rho_s = tg.y_sss / ys - rho * rho;
        let la = 2.0 / (3.0 * s) - 2.0 / 3.0 * rho;
        let lb = -2.0 * rho;
        let la_s = -2.0 / (3.0 * s * s) - 2.0 / 3.0 * rho_s;
        let lb_s = -2.0 * rho_s;
        let la_t = -4.0 / 3.0 * r - 2.0 / 3.0 * tg.y_st / ys;
        let lb_t = -2.0 * r - 2.0 * tg.y_st / ys;
        H4Coeffs {
            a,
            b,
            a_s: a * la,
            b_s: b * lb,
            a_ss: a * (la * la + la_s),
            b_ss: b * (lb * lb + lb_s),
            a_t: a * la_t,
            b_t: b * lb_t,
        }
    }

    pub(crate) fn eval(&self, y: f64) -> H4 {
        let y2 = y * y;
        let y3 = y2 * y;
        let y4 = y2 * y2;
        H4 {
            h: y2 * self.a / 2.0 - y4 * self.b / 12.0,
            y: y * self.a - y3 * self.b / 3.0,
            yy: self.a - y2 * self.b,
            s: y2 * self.a_s / 2.0 - y4 * self.b_s / 12.0,
            ys: y * self.a_s - y3 * self.b_s / 3.0,
            ss: y2 * self.a_ss / 2.0 - y4 * self.b_ss / 12.0,
            t: y2 * self.a_t / 2.0 - y4 * self.b_t / 12.0,
        }
    }
}
