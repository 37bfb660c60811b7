//! Metric and curvature specifications given on the command line or in files.

use std::path::Path;

use maggeo::magnetic_flow::CurvatureFunction;
use maggeo::poly::Poly3;
use maggeo::sphere_geometry::{ConformalMetric, Vec3};
use maggeo::Error;
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Zonal {
    #[allow(dead_code)]
    kind: String,
    coeffs: Vec<f64>,
}

/// One term c·Y_lm of the conformal factor, l ≤ 3, in the real cartesian basis.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HarmonicTerm {
    l: u32,
    m: i32,
    coeff: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Harmonic {
    #[allow(dead_code)]
    kind: String,
    terms: Vec<HarmonicTerm>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Expr {
    #[allow(dead_code)]
    kind: String,
    expr: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Constant {
    #[allow(dead_code)]
    kind: String,
    value: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KindOnly {
    #[allow(dead_code)]
    kind: String,
}

/// The parsed document and its `kind` tag; syntax errors carry line and column.
fn tagged(path: &str) -> Result<(Value, String), Error> {
    let text = read_file(path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))?;
    let kind = doc
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config(format!("{path}: missing string key 'kind'")))?
        .to_string();
    Ok((doc, kind))
}

fn body<T: serde::de::DeserializeOwned>(path: &str, doc: Value) -> Result<T, Error> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let at = e.path().to_string();
        Error::Config(format!("{path}: key '{at}': {}", e.inner()))
    })
}

fn read_file(path: &str) -> Result<String, Error> {
    std::fs::read_to_string(Path::new(path)).map_err(|e| Error::Config(format!("cannot read {path}: {e}")))
}

fn parse_poly(expr: &str, what: &str) -> Result<Poly3, Error> {
    expr.parse::<Poly3>().map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// `round`, `zonal:c1,c2,..`, `poly:<expr>` or `@file.json`.
pub fn metric(spec: &str) -> Result<ConformalMetric, Error> {
    if let Some(path) = spec.strip_prefix('@') {
        let (doc, kind) = tagged(path)?;
        return match kind.as_str() {
            "round" => body::<KindOnly>(path, doc).map(|_| ConformalMetric::round()),
            "conformal_zonal" => body::<Zonal>(path, doc).map(|z| ConformalMetric::zonal(&z.coeffs)),
            "conformal_harmonic" => {
                let h: Harmonic = body(path, doc)?;
                let mut factor = Poly3::zero();
                for (i, t) in h.terms.iter().enumerate() {
                    let y = Poly3::harmonic(t.l, t.m).ok_or_else(|| {
                        Error::Config(format!("{path}: key 'terms[{i}]': no harmonic with l = {}, m = {}", t.l, t.m))
                    })?;
                    factor = factor.add(&y.scale(t.coeff));
                }
                let id = factor.to_string();
                Ok(ConformalMetric::from_poly(factor, id))
            }
            "conformal_poly" => {
                let e: Expr = body(path, doc)?;
                Ok(ConformalMetric::from_poly(parse_poly(&e.expr, &format!("{path}: key 'expr'"))?, e.expr))
            }
            other => Err(Error::Config(format!(
                "{path}: key 'kind': unknown metric kind '{other}' (round, conformal_zonal, conformal_harmonic, conformal_poly)"
            ))),
        };
    }
    if spec == "round" {
        return Ok(ConformalMetric::round());
    }
    if let Some(list) = spec.strip_prefix("zonal:") {
        let coeffs = list
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|_| Error::Config(format!("--metric: bad zonal coefficient '{c}'"))))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(ConformalMetric::zonal(&coeffs));
    }
    if let Some(expr) = spec.strip_prefix("poly:") {
        return Ok(ConformalMetric::from_poly(parse_poly(expr, "--metric")?, expr));
    }
    Err(Error::Config(format!("--metric: unrecognized specification '{spec}'")))
}

/// A polynomial expression in x, y, z or `@file.json`.
pub fn curvature(spec: &str) -> Result<CurvatureFunction, Error> {
    if let Some(path) = spec.strip_prefix('@') {
        let (doc, kind) = tagged(path)?;
        return match kind.as_str() {
            "constant" => body::<Constant>(path, doc).map(|c| CurvatureFunction::constant(c.value)),
            "poly" => {
                let e: Expr = body(path, doc)?;
                Ok(CurvatureFunction::from_poly(parse_poly(&e.expr, &format!("{path}: key 'expr'"))?, e.expr))
            }
            other => Err(Error::Config(format!("{path}: key 'kind': unknown curvature kind '{other}' (constant, poly)"))),
        };
    }
    Ok(CurvatureFunction::from_poly(parse_poly(spec, "--k")?, spec))
}

/// `--k` when given, else k₀ + ε⟨x, e₃⟩.
pub fn curvature_or_default(spec: Option<&str>, k0: f64, eps: f64) -> Result<CurvatureFunction, Error> {
    match spec {
        Some(s) => curvature(s),
        None => Ok(CurvatureFunction::linear_perturbation(k0, eps, Vec3::z())),
    }
}

pub fn vec3(text: &str, flag: &str) -> Result<Vec3, Error> {
    let v: Vec<f64> = text
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|_| Error::Config(format!("{flag}: bad number '{c}'"))))
        .collect::<Result<_, _>>()?;
    if v.len() != 3 {
        return Err(Error::Config(format!("{flag}: expected 3 comma-separated numbers")));
    }
    Ok(Vec3::new(v[0], v[1], v[2]))
}
