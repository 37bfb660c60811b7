//! Polynomials in the ambient coordinates (x, y, z), restricted to the unit sphere.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub exps: [u32; 3],
    pub coeff: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Poly3 {
    pub terms: Vec<Monomial>,
}

/// Value, ambient gradient and ambient Hessian at a point.
#[derive(Clone, Copy, Debug)]
pub struct PolyJet {
    pub value: f64,
    pub grad: Vector3<f64>,
    pub hess: Matrix3<f64>,
}

fn powi(b: f64, e: u32) -> f64 {
    b.powi(e as i32)
}

impl Poly3 {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        Self::monomial([0, 0, 0], c)
    }

    pub fn monomial(exps: [u32; 3], coeff: f64) -> Self {
        Self { terms: vec![Monomial { exps, coeff }] }
    }

    /// The linear function x ↦ ⟨x, a⟩.
    pub fn linear(a: Vector3<f64>) -> Self {
        Self {
            terms: vec![
                Monomial { exps: [1, 0, 0], coeff: a[0] },
                Monomial { exps: [0, 1, 0], coeff: a[1] },
                Monomial { exps: [0, 0, 1], coeff: a[2] },
            ],
        }
        .simplified()
    }

    /// Σ c_n z^n with the first coefficient multiplying z¹.
    pub fn zonal(coeffs: &[f64]) -> Self {
        Self {
            terms: coeffs
                .iter()
                .enumerate()
                .map(|(i, &c)| Monomial { exps: [0, 0, i as u32 + 1], coeff: c })
                .collect(),
        }
        .simplified()
    }

    /// Unnormalized real solid harmonic of degree `l ≤ 3` and order `m ∈ [−l, l]`.
    pub fn harmonic(l: u32, m: i32) -> Option<Self> {
        let t = |e: [u32; 3], c: f64| Monomial { exps: e, coeff: c };
        let terms = match (l, m) {
            (0, 0) => vec![t([0, 0, 0], 1.0)],
            (1, -1) => vec![t([0, 1, 0], 1.0)],
            (1, 0) => vec![t([0, 0, 1], 1.0)],
            (1, 1) => vec![t([1, 0, 0], 1.0)],
            (2, -2) => vec![t([1, 1, 0], 1.0)],
            (2, -1) => vec![t([0, 1, 1], 1.0)],
            (2, 0) => vec![t([0, 0, 2], 2.0), t([2, 0, 0], -1.0), t([0, 2, 0], -1.0)],
            (2, 1) => vec![t([1, 0, 1], 1.0)],
            (2, 2) => vec![t([2, 0, 0], 1.0), t([0, 2, 0], -1.0)],
            (3, -3) => vec![t([2, 1, 0], 3.0), t([0, 3, 0], -1.0)],
            (3, -2) => vec![t([1, 1, 1], 1.0)],
            (3, -1) => vec![t([0, 1, 2], 4.0), t([2, 1, 0], -1.0), t([0, 3, 0], -1.0)],
            (3, 0) => vec![t([0, 0, 3], 2.0), t([2, 0, 1], -3.0), t([0, 2, 1], -3.0)],
            (3, 1) => vec![t([1, 0, 2], 4.0), t([3, 0, 0], -1.0), t([1, 2, 0], -1.0)],
            (3, 2) => vec![t([2, 0, 1], 1.0), t([0, 2, 1], -1.0)],
            (3, 3) => vec![t([3, 0, 0], 1.0), t([1, 2, 0], -3.0)],
            _ => return None,
        };
        Some(Self { terms })
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self { terms }.simplified()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|m| Monomial { exps: m.exps, coeff: m.coeff * s }).collect(),
        }
        .simplified()
    }

    /// Merges equal exponents and drops zero coefficients. Order is by exponent.
    pub fn simplified(&self) -> Self {
        let mut terms: Vec<Monomial> = Vec::new();
        let mut sorted = self.terms.clone();
        sorted.sort_by_key(|m| m.exps);
        for m in sorted {
            match terms.last_mut() {
                Some(last) if last.exps == m.exps => last.coeff += m.coeff,
                _ => terms.push(m),
            }
        }
        terms.retain(|m| m.coeff != 0.0);
        Self { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|m| m.coeff == 0.0)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|m| m.coeff == 0.0 || m.exps == [0, 0, 0])
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|m| m.exps.iter().sum::<u32>()).max().unwrap_or(0)
    }

    pub fn value(&self, p: &Vector3<f64>) -> f64 {
        self.terms
            .iter()
            .map(|m| m.coeff * powi(p[0], m.exps[0]) * powi(p[1], m.exps[1]) * powi(p[2], m.exps[2]))
            .sum()
    }

    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.jet(p).grad
    }

    pub fn jet(&self, p: &Vector3<f64>) -> PolyJet {
        let mut value = 0.0;
        let mut grad = Vector3::zeros();
        let mut hess = Matrix3::zeros();
        for m in &self.terms {
            // d[i][j] = j-th derivative of p_i^{e_i}
            let mut d = [[0.0; 3]; 3];
            for i in 0..3 {
                let e = m.exps[i];
                let ef = e as f64;
                d[i][0] = powi(p[i], e);
                d[i][1] = if e >= 1 { ef * powi(p[i], e - 1) } else { 0.0 };
                d[i][2] = if e >= 2 { ef * (ef - 1.0) * powi(p[i], e - 2) } else { 0.0 };
            }
            let c = m.coeff;
            value += c * d[0][0] * d[1][0] * d[2][0];
            grad[0] += c * d[0][1] * d[1][0] * d[2][0];
            grad[1] += c * d[0][0] * d[1][1] * d[2][0];
            grad[2] += c * d[0][0] * d[1][0] * d[2][1];
            for i in 0..3 {
                for j in 0..3 {
                    let mut prod = c;
                    for a in 0..3 {
                        let order = (i == a) as usize + (j == a) as usize;
                        prod *= d[a][order];
                    }
                    hess[(i, j)] += prod;
                }
            }
        }
        PolyJet { value, grad, hess }
    }

    /// Upper bound for the Lipschitz constant of the restriction to the unit sphere.
    pub fn sphere_lipschitz_bound(&self) -> f64 {
        self.terms
            .iter()
            .filter(|m| m.exps != [0, 0, 0])
            .map(|m| m.coeff.abs() * m.exps.iter().sum::<u32>() as f64)
            .sum()
    }

    /// Upper bound for |value| on the unit sphere.
    pub fn sphere_abs_bound(&self) -> f64 {
        self.terms.iter().map(|m| m.coeff.abs()).sum()
    }
}

/// Writes an expression that parses back to the same polynomial.
impl std::fmt::Display for Poly3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, m) in self.terms.iter().enumerate() {
            let sign = if m.coeff.is_sign_negative() { "-" } else { "+" };
            match (i, sign) {
                (0, "-") => write!(f, "-")?,
                (0, _) => {}
                _ => write!(f, " {sign} ")?,
            }
            write!(f, "{:?}", m.coeff.abs())?;
            for (name, e) in ["x", "y", "z"].iter().zip(m.exps) {
                match e {
                    0 => {}
                    1 => write!(f, "*{name}")?,
                    _ => write!(f, "*{name}^{e}")?,
                }
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for Poly3 {
    type Err = String;

    /// Parses sums of products such as `1 + 0.01*z - 0.2*x^2*y`.
    fn from_str(src: &str) -> Result<Self, String> {
        let chars: Vec<char> = src.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.is_empty() {
            return Err("empty polynomial".into());
        }
        let mut pos = 0;
        let mut out = Poly3::zero();
        while pos < chars.len() {
            let mut sign = 1.0;
            if chars[pos] == '+' || chars[pos] == '-' {
                if chars[pos] == '-' {
                    sign = -1.0;
                }
                pos += 1;
            } else if pos > 0 {
                return Err(format!("expected '+' or '-' at position {pos}"));
            }
            let mut coeff = sign;
            let mut exps = [0u32; 3];
            let mut first = true;
            loop {
                if !first {
                    if pos < chars.len() && chars[pos] == '*' {
                        pos += 1;
                    } else {
                        break;
                    }
                }
                first = false;
                let c = *chars.get(pos).ok_or_else(|| format!("unexpected end at position {pos}"))?;
                if let Some(i) = "xyz".find(c) {
                    pos += 1;
                    let mut e = 1;
                    if pos < chars.len() && chars[pos] == '^' {
                        pos += 1;
                        let start = pos;
                        while pos < chars.len() && chars[pos].is_ascii_digit() {
                            pos += 1;
                        }
                        e = chars[start..pos]
                            .iter()
                            .collect::<String>()
                            .parse::<u32>()
                            .map_err(|_| format!("bad exponent at position {start}"))?;
                    }
                    exps[i] += e;
                } else if c.is_ascii_digit() || c == '.' {
                    let start = pos;
                    while pos < chars.len()
                        && (chars[pos].is_ascii_digit()
                            || chars[pos] == '.'
                            || chars[pos] == 'e'
                            || chars[pos] == 'E'
                            || ((chars[pos] == '-' || chars[pos] == '+') && matches!(chars[pos - 1], 'e' | 'E')))
                    {
                        pos += 1;
                    }
                    let text: String = chars[start..pos].iter().collect();
                    coeff *= text.parse::<f64>().map_err(|_| format!("bad number '{text}' at position {start}"))?;
                } else {
                    return Err(format!("unexpected '{c}' at position {pos}"));
                }
            }
            if exps.iter().sum::<u32>() > 3 {
                return Err(format!("degree above 3 before position {pos}"));
            }
            out = out.add(&Poly3::monomial(exps, coeff));
        }
        Ok(out.simplified())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_expressions() {
        let p: Poly3 = "1 + 0.01*z - 0.2*x^2*y".parse().unwrap();
        let x = Vector3::new(0.3, -0.5, 0.2);
        assert!((p.value(&x) - (1.0 + 0.002 - 0.2 * 0.09 * -0.5)).abs() < 1e-15);
        let q: Poly3 = "-z*2e-1 + x*y*z".parse().unwrap();
        assert!((q.value(&x) - (-0.04 - 0.03)).abs() < 1e-15);
        assert!("1 +".parse::<Poly3>().is_err());
        assert!("w".parse::<Poly3>().is_err());
        assert!("x^4".parse::<Poly3>().is_err());
        assert!("".parse::<Poly3>().is_err());
        for text in ["1 + 0.01*z - 0.2*x^2*y", "-z*2e-1 + x*y*z", "0", "1e-300*x^3"] {
            let p: Poly3 = text.parse().unwrap();
            assert_eq!(p.to_string().parse::<Poly3>().unwrap(), p, "{text}");
        }
    }

    #[test]
    fn jet_matches_finite_differences() {
        let p = Poly3::harmonic(3, -1).unwrap().add(&Poly3::monomial([1, 2, 1], 0.7));
        let x = Vector3::new(0.3, -0.4, 0.5);
        let j = p.jet(&x);
        let h = 1e-5;
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = h;
            let fd = (p.value(&(x + e)) - p.value(&(x - e))) / (2.0 * h);
            assert!((fd - j.grad[i]).abs() < 1e-8);
            let gd = (p.gradient(&(x + e)) - p.gradient(&(x - e))) / (2.0 * h);
            for k in 0..3 {
                assert!((gd[k] - j.hess[(k, i)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn harmonics_are_harmonic() {
        for l in 0..=3u32 {
            for m in -(l as i32)..=(l as i32) {
                let p = Poly3::harmonic(l, m).unwrap();
                let x = Vector3::new(0.2, 0.9, -0.3);
                assert!(p.jet(&x).hess.trace().abs() < 1e-12, "l={l} m={m}");
            }
        }
    }

    #[test]
    fn zonal_starts_at_first_power() {
        let p = Poly3::zonal(&[0.5, 0.25]);
        let x = Vector3::new(0.0, 0.6, 0.8);
        assert!((p.value(&x) - (0.5 * 0.8 + 0.25 * 0.64)).abs() < 1e-15);
    }

    #[test]
    fn simplification_merges_terms() {
        let p = Poly3::linear(Vector3::z()).add(&Poly3::linear(-Vector3::z()));
        assert!(p.is_zero());
        assert!(p.terms.is_empty());
    }
}
