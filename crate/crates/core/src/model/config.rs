//! Model definitions loadable from a structured text config.
//!
//! Two forms are accepted. The built-in satellite template:
//!
//! ```toml
//! template = "satellite"
//! delta = 0.1
//! q1 = 0.0063        # optional
//! theta_star = 5.0   # optional, used by callers that simulate data
//! ```
//!
//! and a general form where every matrix entry is a polynomial in the
//! parameters `theta0 .. theta{p-1}`:
//!
//! ```toml
//! [dims]
//! n = 1
//! m = 1
//! d = 0
//! q = 1
//! p = 1
//! theta_star = [0.8]
//!
//! [matrices]
//! f = [["0.9"]]
//! g = [["1"]]
//! h = [["1"]]
//! omega = [["0.1"]]
//! r = [["1 + theta0^2"]]
//! pi0 = [["1"]]
//! x0_mean = ["0"]
//! # b omitted when d = 0
//! ```
//!
//! Polynomial entries support `+`, `-`, `*`, integer `^`, parentheses and
//! numeric literals; partial derivatives are taken symbolically.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{
    satellite_model, ModelDims, ParametrizedModel, SystemMatrices, SystemPartials,
    SATELLITE_DEFAULT_Q1,
};

/// A model loaded from a config file, with the optional true parameter value
/// used for data simulation.
pub struct ModelConfig {
    pub model: ParametrizedModel,
    pub theta_star: Option<DVector<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    template: Option<String>,
    delta: Option<f64>,
    q1: Option<f64>,
    theta_star: Option<ThetaStar>,
    dims: Option<RawDims>,
    matrices: Option<RawMatrices>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ThetaStar {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDims {
    n: usize,
    m: usize,
    d: usize,
    q: usize,
    p: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrices {
    f: Vec<Vec<String>>,
    b: Option<Vec<Vec<String>>>,
    g: Vec<Vec<String>>,
    h: Vec<Vec<String>>,
    omega: Vec<Vec<String>>,
    r: Vec<Vec<String>>,
    pi0: Vec<Vec<String>>,
    x0_mean: Vec<String>,
}

/// Parses a model config from TOML text.
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
    match raw.template.as_deref() {
        Some("satellite") => {
            let delta = raw
                .delta
                .ok_or_else(|| Error::Config("satellite template requires `delta`".into()))?;
            if delta <= 0.0 {
                return Err(Error::Config("`delta` must be positive".into()));
            }
            let q1 = raw.q1.unwrap_or(SATELLITE_DEFAULT_Q1);
            let theta_star = match raw.theta_star {
                None => None,
                Some(ThetaStar::Scalar(v)) => Some(DVector::from_vec(vec![v])),
                Some(ThetaStar::Vector(v)) if v.len() == 1 => Some(DVector::from_vec(v)),
                Some(ThetaStar::Vector(_)) => {
                    return Err(Error::Config(
                        "satellite template has a single parameter".into(),
                    ))
                }
            };
            Ok(ModelConfig {
                model: satellite_model(delta, q1),
                theta_star,
            })
        }
        Some(other) => Err(Error::Config(format!("unknown template `{other}`"))),
        None => {
            let dims = raw
                .dims
                .ok_or_else(|| Error::Config("general form requires a [dims] table".into()))?;
            let mats = raw
                .matrices
                .ok_or_else(|| Error::Config("general form requires a [matrices] table".into()))?;
            let theta_star = match raw.theta_star {
                None => None,
                Some(ThetaStar::Scalar(v)) if dims.p == 1 => Some(DVector::from_vec(vec![v])),
                Some(ThetaStar::Vector(v)) if v.len() == dims.p => Some(DVector::from_vec(v)),
                Some(_) => {
                    return Err(Error::Config(format!(
                        "theta_star must have {} entries",
                        dims.p
                    )))
                }
            };
            build_polynomial_model(&dims, &mats).map(|model| ModelConfig { model, theta_star })
        }
    }
}

/// Loads a model config from a TOML file.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_model_config(&text)
}

fn build_polynomial_model(dims: &RawDims, mats: &RawMatrices) -> Result<ParametrizedModel> {
    let p = dims.p;
    let f = parse_matrix("f", &mats.f, dims.n, dims.n, p)?;
    let b = match &mats.b {
        Some(rows) => parse_matrix("b", rows, dims.n, dims.d, p)?,
        None if dims.d == 0 => PolyMatrix::empty(dims.n, 0),
        None => return Err(Error::Config("matrix `b` required when d > 0".into())),
    };
    let g = parse_matrix("g", &mats.g, dims.n, dims.q, p)?;
    let h = parse_matrix("h", &mats.h, dims.m, dims.n, p)?;
    let omega = parse_matrix("omega", &mats.omega, dims.q, dims.q, p)?;
    let r = parse_matrix("r", &mats.r, dims.m, dims.m, p)?;
    let pi0 = parse_matrix("pi0", &mats.pi0, dims.n, dims.n, p)?;
    if mats.x0_mean.len() != dims.n {
        return Err(Error::Config(format!(
            "x0_mean has {} entries, expected {}",
            mats.x0_mean.len(),
            dims.n
        )));
    }
    let x0: Vec<f64> = mats
        .x0_mean
        .iter()
        .map(|s| {
            let poly = Poly::parse(s, p)?;
            poly.constant_value().ok_or_else(|| {
                Error::Config("x0_mean entries must be parameter-independent".into())
            })
        })
        .collect::<Result<_>>()?;
    let x0_mean = DVector::from_vec(x0);

    let model_dims = ModelDims {
        n: dims.n,
        m: dims.m,
        d: dims.d,
        q: dims.q,
        p,
    };
    let derivs: Vec<[PolyMatrix; 7]> = (0..p)
        .map(|i| {
            [
                f.derivative(i),
                b.derivative(i),
                g.derivative(i),
                h.derivative(i),
                omega.derivative(i),
                r.derivative(i),
                pi0.derivative(i),
            ]
        })
        .collect();

    let system = {
        let (f, b, g, h, omega, r, pi0, x0_mean) = (
            f.clone(),
            b.clone(),
            g.clone(),
            h.clone(),
            omega.clone(),
            r.clone(),
            pi0.clone(),
            x0_mean.clone(),
        );
        move |theta: &DVector<f64>| SystemMatrices {
            f: f.eval(theta),
            b: b.eval(theta),
            g: g.eval(theta),
            h: h.eval(theta),
            omega: omega.eval(theta),
            r: r.eval(theta),
            pi0: pi0.eval(theta),
            x0_mean: x0_mean.clone(),
        }
    };
    let partials = move |theta: &DVector<f64>| {
        derivs
            .iter()
            .map(|d| SystemPartials {
                f: d[0].eval(theta),
                b: d[1].eval(theta),
                g: d[2].eval(theta),
                h: d[3].eval(theta),
                omega: d[4].eval(theta),
                r: d[5].eval(theta),
                pi0: d[6].eval(theta),
            })
            .collect()
    };
    Ok(ParametrizedModel::new(model_dims, system, partials))
}

fn parse_matrix(
    name: &str,
    rows: &[Vec<String>],
    nrows: usize,
    ncols: usize,
    p: usize,
) -> Result<PolyMatrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!(
            "matrix `{name}` must be {nrows}x{ncols}"
        )));
    }
    let mut entries = Vec::with_capacity(nrows * ncols);
    for row in rows {
        for src in row {
            entries.push(Poly::parse(src, p).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("in `{name}`: {msg}")),
                other => other,
            })?);
        }
    }
    Ok(PolyMatrix {
        nrows,
        ncols,
        entries,
    })
}

/// A matrix of polynomial entries, stored row-major.
#[derive(Clone)]
struct PolyMatrix {
    nrows: usize,
    ncols: usize,
    entries: Vec<Poly>,
}

impl PolyMatrix {
    fn empty(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    fn eval(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.nrows,
            self.ncols,
            self.entries.iter().map(|p| p.eval(theta)),
        )
    }

    fn derivative(&self, var: usize) -> PolyMatrix {
        PolyMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            entries: self.entries.iter().map(|p| p.derivative(var)).collect(),
        }
    }
}

/// Sparse multivariate polynomial: a sum of `coeff * prod theta_i^e_i` terms.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Poly {
    nvars: usize,
    terms: Vec<(f64, Vec<u32>)>,
}

impl Poly {
    fn constant(c: f64, nvars: usize) -> Self {
        Self {
            nvars,
            terms: vec![(c, vec![0; nvars])],
        }
    }

    fn var(i: usize, nvars: usize) -> Self {
        let mut exps = vec![0; nvars];
        exps[i] = 1;
        Self {
            nvars,
            terms: vec![(1.0, exps)],
        }
    }

    fn normalize(mut self) -> Self {
        self.terms.sort_by(|a, b| a.1.cmp(&b.1));
        let mut merged: Vec<(f64, Vec<u32>)> = Vec::new();
        for (c, e) in self.terms {
            match merged.last_mut() {
                Some((mc, me)) if *me == e => *mc += c,
                _ => merged.push((c, e)),
            }
        }
        merged.retain(|(c, _)| *c != 0.0);
        self.terms = merged;
        self
    }

    fn add(&self, other: &Poly) -> Poly {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Poly {
            nvars: self.nvars,
            terms,
        }
        .normalize()
    }

    fn neg(&self) -> Poly {
        Poly {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(c, e)| (-c, e.clone())).collect(),
        }
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (ca, ea) in &self.terms {
            for (cb, eb) in &other.terms {
                let exps: Vec<u32> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
                terms.push((ca * cb, exps));
            }
        }
        Poly {
            nvars: self.nvars,
            terms,
        }
        .normalize()
    }

    fn powi(&self, k: u32) -> Poly {
        let mut out = Poly::constant(1.0, self.nvars);
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    pub(crate) fn eval(&self, theta: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|(c, exps)| {
                c * exps
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| theta[i].powi(e as i32))
                    .product::<f64>()
            })
            .sum()
    }

    pub(crate) fn derivative(&self, var: usize) -> Poly {
        let terms = self
            .terms
            .iter()
            .filter(|(_, exps)| exps[var] > 0)
            .map(|(c, exps)| {
                let mut e = exps.clone();
                let k = e[var];
                e[var] -= 1;
                (c * k as f64, e)
            })
            .collect();
        Poly {
            nvars: self.nvars,
            terms,
        }
        .normalize()
    }

    fn constant_value(&self) -> Option<f64> {
        if self.terms.iter().all(|(_, e)| e.iter().all(|&x| x == 0)) {
            Some(self.terms.iter().map(|(c, _)| c).sum())
        } else {
            None
        }
    }

    /// Parses `+ - * ^ ( )`, numeric literals, and `theta<k>` variables.
    pub(crate) fn parse(src: &str, nvars: usize) -> Result<Poly> {
        let tokens = tokenize(src)?;
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            nvars,
        };
        let poly = parser.expr()?;
        if parser.pos != tokens.len() {
            return Err(Error::Config(format!(
                "unexpected trailing input in `{src}`"
            )));
        }
        Ok(poly)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Var(usize),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '^' => {
                out.push(Token::Caret);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() {
                    let c = bytes[i] as char;
                    if c.is_ascii_digit() || c == '.' {
                        i += 1;
                    } else if (c == 'e' || c == 'E')
                        && i + 1 < bytes.len()
                        && ((bytes[i + 1] as char).is_ascii_digit()
                            || bytes[i + 1] == b'+'
                            || bytes[i + 1] == b'-')
                    {
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text = &src[start..i];
                let value: f64 = text
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number `{text}`")))?;
                out.push(Token::Num(value));
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                let ident = &src[start..i];
                let index = ident
                    .strip_prefix("theta")
                    .and_then(|rest| rest.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown identifier `{ident}` (variables are theta0, theta1, ...)"
                        ))
                    })?;
                out.push(Token::Var(index));
            }
            other => return Err(Error::Config(format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    nvars: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Result<Poly> {
        let mut acc = self.term()?;
        while let Some(tok) = self.peek() {
            match tok {
                Token::Plus => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?);
                }
                Token::Minus => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?.neg());
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Poly> {
        let mut acc = self.factor()?;
        while let Some(Token::Star) = self.peek() {
            self.pos += 1;
            acc = acc.mul(&self.factor()?);
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Poly> {
        let base = self.base()?;
        if let Some(Token::Caret) = self.peek() {
            self.pos += 1;
            match self.peek() {
                Some(&Token::Num(v)) if v >= 0.0 && v.fract() == 0.0 => {
                    self.pos += 1;
                    Ok(base.powi(v as u32))
                }
                _ => Err(Error::Config(
                    "exponent must be a nonnegative integer".into(),
                )),
            }
        } else {
            Ok(base)
        }
    }

    fn base(&mut self) -> Result<Poly> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Poly::constant(v, self.nvars))
            }
            Some(Token::Var(i)) => {
                if i >= self.nvars {
                    return Err(Error::Config(format!(
                        "theta{i} out of range for {} parameters",
                        self.nvars
                    )));
                }
                self.pos += 1;
                Ok(Poly::var(i, self.nvars))
            }
            Some(Token::Minus) => {
                self.pos += 1;
                Ok(self.factor()?.neg())
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(Token::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(Error::Config("missing closing parenthesis".into())),
                }
            }
            _ => Err(Error::Config("unexpected end of expression".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn poly_parse_eval_derivative() {
        let p = Poly::parse("2*theta0^2 - theta1 + 3", 2).unwrap();
        let theta = DVector::from_vec(vec![2.0, 5.0]);
        assert_abs_diff_eq!(p.eval(&theta), 8.0 - 5.0 + 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.derivative(0).eval(&theta), 8.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.derivative(1).eval(&theta), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn poly_parse_parentheses_and_negation() {
        let p = Poly::parse("-(theta0 - 1)*(theta0 + 1)", 1).unwrap();
        let theta = DVector::from_vec(vec![3.0]);
        assert_abs_diff_eq!(p.eval(&theta), -(9.0 - 1.0), epsilon = 1e-14);
    }

    #[test]
    fn poly_rejects_garbage() {
        assert!(Poly::parse("sin(theta0)", 1).is_err());
        assert!(Poly::parse("theta1", 1).is_err());
        assert!(Poly::parse("theta0^-1", 1).is_err());
        assert!(Poly::parse("1 +", 1).is_err());
    }

    #[test]
    fn satellite_template_roundtrip() {
        let cfg = parse_model_config(
            r#"
template = "satellite"
delta = 0.1
theta_star = 5.0
"#,
        )
        .unwrap();
        assert_eq!(cfg.model.dims().n, 4);
        assert_eq!(cfg.theta_star.unwrap()[0], 5.0);
    }

    #[test]
    fn general_polynomial_model_matches_analytic() {
        let cfg = parse_model_config(
            r#"
theta_star = [0.8]

[dims]
n = 1
m = 1
d = 0
q = 1
p = 1

[matrices]
f = [["0.9"]]
g = [["1"]]
h = [["1"]]
omega = [["0.1"]]
r = [["1 + theta0^2"]]
pi0 = [["2"]]
x0_mean = ["0"]
"#,
        )
        .unwrap();
        let theta = DVector::from_vec(vec![0.8]);
        let inst = cfg.model.evaluate(&theta).unwrap();
        assert_abs_diff_eq!(inst.mats.r[(0, 0)], 1.64, epsilon = 1e-14);
        assert_abs_diff_eq!(inst.partials[0].r[(0, 0)], 1.6, epsilon = 1e-14);
        assert_abs_diff_eq!(inst.mats.f[(0, 0)], 0.9, epsilon = 1e-14);
        assert!(inst.partials[0].f.amax() == 0.0);
    }

    #[test]
    fn config_errors_are_reported() {
        assert!(matches!(
            parse_model_config("template = \"unknown\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_model_config("template = \"satellite\""),
            Err(Error::Config(_))
        ));
    }
}
