//! Driving measures on the infinite simplex and their analytic functionals.
//!
//! A measure is split into the atom at the origin (`kingman_mass`) and a
//! nontrivial part. Λ-type parts live on one-coordinate points `(x, 0, ...)`
//! and are written as measures on `(0, 1]`; `XiAtoms` carries general
//! finitely supported points of the simplex.

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadOptions};

const MASS_TOL: f64 = 1e-12;

/// A point `x_1 >= x_2 >= ... >= 0` with `sum x_i <= 1`. Trailing zeros are
/// dropped, so the origin is the empty coordinate list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        let mut coords = coords;
        for (i, &c) in coords.iter().enumerate() {
            if !c.is_finite() || !(0.0..=1.0).contains(&c) {
                return Err(Error::SimplexViolation(format!(
                    "coordinate {i} = {c} outside [0,1]"
                )));
            }
            if i > 0 && c > coords[i - 1] {
                return Err(Error::SimplexViolation(format!(
                    "coordinates not nonincreasing at index {i}"
                )));
            }
        }
        let sum: f64 = coords.iter().sum();
        if sum > 1.0 + MASS_TOL {
            return Err(Error::SimplexViolation(format!(
                "coordinates sum to {sum} > 1"
            )));
        }
        while coords.last() == Some(&0.0) {
            coords.pop();
        }
        Ok(SimplexPoint(coords))
    }

    pub fn origin() -> Self {
        SimplexPoint(Vec::new())
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn is_origin(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaAtom {
    pub x: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiAtom {
    pub point: SimplexPoint,
    pub weight: f64,
}

/// Piecewise-linear density on `(0, 1]`, constant below the first and above
/// the last sample. Scaled so that its total mass is `1 - kingman_mass`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityTable {
    xs: Vec<f64>,
    fs: Vec<f64>,
}

impl DensityTable {
    fn new(samples: &[(f64, f64)], mass: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::BadParameter("density table is empty".into()));
        }
        let mut xs = Vec::with_capacity(samples.len());
        let mut fs = Vec::with_capacity(samples.len());
        for &(x, f) in samples {
            if !(x > 0.0 && x <= 1.0) {
                return Err(Error::BadParameter(format!(
                    "density abscissa {x} outside (0,1]"
                )));
            }
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::BadParameter(format!("density value {f} invalid")));
            }
            if let Some(&last) = xs.last() {
                if x <= last {
                    return Err(Error::BadParameter(
                        "density abscissae must be strictly increasing".into(),
                    ));
                }
            }
            xs.push(x);
            fs.push(f);
        }
        let mut table = DensityTable { xs, fs };
        let raw = table.mass();
        if raw <= 0.0 {
            return Err(Error::MassViolation("density table has zero mass".into()));
        }
        let scale = mass / raw;
        table.fs.iter_mut().for_each(|f| *f *= scale);
        Ok(table)
    }

    fn mass(&self) -> f64 {
        let n = self.xs.len();
        let mut m = self.xs[0] * self.fs[0] + (1.0 - self.xs[n - 1]) * self.fs[n - 1];
        for i in 1..n {
            m += 0.5 * (self.xs[i] - self.xs[i - 1]) * (self.fs[i] + self.fs[i - 1]);
        }
        m
    }

    pub fn density(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.fs[0];
        }
        if x >= self.xs[n - 1] {
            return self.fs[n - 1];
        }
        let i = self.xs.partition_point(|&xi| xi <= x);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let w = (x - x0) / (x1 - x0);
        self.fs[i - 1] * (1.0 - w) + self.fs[i] * w
    }

    /// Pieces on which the density is affine.
    fn pieces(&self) -> Vec<(f64, f64)> {
        let mut cuts = vec![0.0];
        cuts.extend(self.xs.iter().copied().filter(|&x| x < 1.0));
        cuts.push(1.0);
        cuts.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn samples(&self) -> Vec<(f64, f64)> {
        self.xs.iter().copied().zip(self.fs.iter().copied()).collect()
    }
}

/// The part of the driving measure off the origin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum NontrivialPart {
    None,
    /// Beta(2 - alpha, alpha) on (0,1), alpha in (1,2).
    LambdaBeta { alpha: f64 },
    /// Uniform on (0,1).
    LambdaBolthausenSznitman,
    LambdaAtoms(Vec<LambdaAtom>),
    LambdaDensityTable(DensityTable),
    XiAtoms(Vec<XiAtom>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoalescentMeasure {
    kingman_mass: f64,
    part: NontrivialPart,
}

/// Which ψ to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiVariant {
    Standard,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regularity {
    pub value: f64,
    pub infinite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Kingman,
    Beta,
    BolthausenSznitman,
    LambdaAtoms,
    XiAtoms,
    LambdaDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiAtomDescription {
    pub point: Vec<f64>,
    pub weight: f64,
}

/// Structured-text form of a measure (TOML or JSON).
///
/// ```toml
/// kingman_mass = 0.0
/// family = "beta"
/// alpha = 1.5
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureDescription {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kingman_mass: Option<f64>,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// `[[x, weight], ...]` for `lambda_atoms`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_atoms: Option<Vec<XiAtomDescription>>,
    /// `[[x, density], ...]` for `lambda_density`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<Vec<(f64, f64)>>,
}

impl MeasureDescription {
    pub fn family(family: Family) -> Self {
        MeasureDescription {
            kingman_mass: None,
            family,
            alpha: None,
            atoms: None,
            xi_atoms: None,
            density: None,
        }
    }

    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    /// Command-line shorthand: `kingman`, `bolthausen-sznitman` (or `bs`),
    /// `beta:ALPHA`, `lambda-atom:X`.
    pub fn from_shorthand(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| Error::Config(format!("measure `{s}` needs a parameter")))?
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("measure `{s}`: {e}")))
        };
        match name.replace('_', "-").as_str() {
            "kingman" => Ok(Self::family(Family::Kingman)),
            "bolthausen-sznitman" | "bs" => Ok(Self::family(Family::BolthausenSznitman)),
            "beta" => Ok(MeasureDescription {
                alpha: Some(num(arg)?),
                ..Self::family(Family::Beta)
            }),
            "lambda-atom" => Ok(MeasureDescription {
                atoms: Some(vec![(num(arg)?, 1.0)]),
                ..Self::family(Family::LambdaAtoms)
            }),
            _ => Err(Error::Config(format!("unknown measure shorthand `{s}`"))),
        }
    }
}

fn reject_extra(desc: &MeasureDescription, allowed: &[&str]) -> Result<()> {
    let present = [
        ("alpha", desc.alpha.is_some()),
        ("atoms", desc.atoms.is_some()),
        ("xi_atoms", desc.xi_atoms.is_some()),
        ("density", desc.density.is_some()),
    ];
    for (key, is_set) in present {
        if is_set && !allowed.contains(&key) {
            return Err(Error::BadParameter(format!(
                "key `{key}` does not apply to family {:?}",
                desc.family
            )));
        }
    }
    Ok(())
}

/// Check a raw description and build the normalized measure.
pub fn validate_measure(desc: &MeasureDescription) -> Result<CoalescentMeasure> {
    let default_mass = if desc.family == Family::Kingman { 1.0 } else { 0.0 };
    let k0 = desc.kingman_mass.unwrap_or(default_mass);
    if !(0.0..=1.0).contains(&k0) {
        return Err(Error::MassViolation(format!(
            "kingman_mass {k0} outside [0,1]"
        )));
    }
    let rest = 1.0 - k0;
    let part = match desc.family {
        Family::Kingman => {
            reject_extra(desc, &[])?;
            if (k0 - 1.0).abs() > MASS_TOL {
                return Err(Error::MassViolation(format!(
                    "pure Kingman measure needs kingman_mass 1, got {k0}"
                )));
            }
            NontrivialPart::None
        }
        Family::Beta => {
            reject_extra(desc, &["alpha"])?;
            let alpha = desc
                .alpha
                .ok_or_else(|| Error::BadParameter("beta family requires alpha".into()))?;
            if !(alpha > 1.0 && alpha < 2.0) {
                return Err(Error::BadParameter(format!(
                    "beta alpha {alpha} outside (1,2)"
                )));
            }
            if rest <= 0.0 {
                NontrivialPart::None
            } else {
                NontrivialPart::LambdaBeta { alpha }
            }
        }
        Family::BolthausenSznitman => {
            reject_extra(desc, &[])?;
            if rest <= 0.0 {
                NontrivialPart::None
            } else {
                NontrivialPart::LambdaBolthausenSznitman
            }
        }
        Family::LambdaAtoms => {
            reject_extra(desc, &["atoms"])?;
            let raw = desc
                .atoms
                .as_ref()
                .ok_or_else(|| Error::BadParameter("lambda_atoms requires atoms".into()))?;
            let mut atoms: Vec<LambdaAtom> = Vec::with_capacity(raw.len());
            for &(x, w) in raw {
                if !(x > 0.0 && x <= 1.0) {
                    return Err(Error::SimplexViolation(format!(
                        "lambda atom location {x} outside (0,1]"
                    )));
                }
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::BadParameter(format!("atom weight {w} not positive")));
                }
                atoms.push(LambdaAtom { x, weight: w });
            }
            atoms.sort_by(|a, b| b.x.total_cmp(&a.x));
            atoms.dedup_by(|a, b| {
                if a.x == b.x {
                    b.weight += a.weight;
                    true
                } else {
                    false
                }
            });
            check_total(k0, atoms.iter().map(|a| a.weight).sum())?;
            NontrivialPart::LambdaAtoms(atoms)
        }
        Family::XiAtoms => {
            reject_extra(desc, &["xi_atoms"])?;
            let raw = desc
                .xi_atoms
                .as_ref()
                .ok_or_else(|| Error::BadParameter("xi_atoms requires xi_atoms".into()))?;
            let mut atoms: Vec<XiAtom> = Vec::with_capacity(raw.len());
            for a in raw {
                let point = SimplexPoint::new(a.point.clone())?;
                if point.is_origin() {
                    return Err(Error::SimplexViolation(
                        "xi atom at the origin; use kingman_mass".into(),
                    ));
                }
                if !(a.weight > 0.0 && a.weight.is_finite()) {
                    return Err(Error::BadParameter(format!(
                        "atom weight {} not positive",
                        a.weight
                    )));
                }
                match atoms.iter_mut().find(|b| b.point == point) {
                    Some(b) => b.weight += a.weight,
                    None => atoms.push(XiAtom {
                        point,
                        weight: a.weight,
                    }),
                }
            }
            atoms.sort_by(|a, b| {
                b.point
                    .coords()
                    .iter()
                    .zip(a.point.coords())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or_else(|| b.point.coords().len().cmp(&a.point.coords().len()))
            });
            check_total(k0, atoms.iter().map(|a| a.weight).sum())?;
            NontrivialPart::XiAtoms(atoms)
        }
        Family::LambdaDensity => {
            reject_extra(desc, &["density"])?;
            let raw = desc
                .density
                .as_ref()
                .ok_or_else(|| Error::BadParameter("lambda_density requires density".into()))?;
            if rest <= 0.0 {
                NontrivialPart::None
            } else {
                NontrivialPart::LambdaDensityTable(DensityTable::new(raw, rest)?)
            }
        }
    };
    if matches!(part, NontrivialPart::None) && (k0 - 1.0).abs() > MASS_TOL {
        return Err(Error::MassViolation(format!(
            "total mass {k0} != 1 with empty nontrivial part"
        )));
    }
    Ok(CoalescentMeasure {
        kingman_mass: k0,
        part,
    })
}

fn check_total(k0: f64, weights: f64) -> Result<()> {
    let total = k0 + weights;
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::MassViolation(format!("total mass {total} != 1")));
    }
    Ok(())
}

/// `e^{-z} - 1 + z`, accurate for small `z`.
pub(crate) fn phi(z: f64) -> f64 {
    if z < 1e-3 {
        z * z * (0.5 - z * (1.0 / 6.0 - z * (1.0 / 24.0 - z / 120.0)))
    } else {
        (-z).exp_m1() + z
    }
}

/// `(e^{-qx} - 1 + qx) / x^2`, continued by `q^2/2` at `x = 0`.
fn psi_kernel(q: f64, x: f64) -> f64 {
    let z = q * x;
    if z < 1e-3 {
        q * q * (0.5 - z * (1.0 / 6.0 - z * (1.0 / 24.0 - z / 120.0)))
    } else {
        phi(z) / (x * x)
    }
}

/// `((1-x)^q - 1 + qx) / x^2`, continued by `q(q-1)/2` at `x = 0`.
fn psi_bar_kernel(q: f64, x: f64) -> f64 {
    if x >= 1.0 {
        return q - 1.0;
    }
    if x == 0.0 {
        return 0.5 * q * (q - 1.0);
    }
    let l = (-x).ln_1p();
    let y = q * l;
    if y.abs() < 1e-3 {
        // y + qx = q (ln(1-x) + x), expanded for small x
        let mut s = 0.0;
        let mut xp = 1.0;
        for j in 2..10 {
            s += xp / j as f64;
            xp *= x;
        }
        let head = -q * s; // (y + qx) / x^2
        let y2 = y * y;
        head + (y2 * (0.5 + y / 6.0 + y2 / 24.0)) / (x * x)
    } else {
        (y.exp_m1() + q * x) / (x * x)
    }
}

/// Integral of `h` over `[0, hi]` where `h` is bounded but may vary on the
/// scale `feature` near zero; the part above `feature` is done in log space.
fn integrate_from_zero<F: Fn(f64) -> f64>(h: F, hi: f64, feature: f64, opts: QuadOptions) -> Result<f64> {
    let split = feature.clamp(0.0, hi);
    let mut total = 0.0;
    if split > 0.0 {
        total += integrate(&h, 0.0, split, opts)?.0;
    }
    if split < hi {
        let lo = split.max(hi * 1e-300);
        total += integrate(|s: f64| {
            let u = s.exp();
            h(u) * u
        }, lo.ln(), hi.ln(), opts)?
        .0;
    }
    Ok(total)
}

/// `∫_0^1 g(x) x^{a-1} (1-x)^{b-1} dx` for bounded `g`, with the endpoint
/// power singularities removed by substitution.
fn beta_weighted<F: Fn(f64) -> f64>(g: F, a: f64, b: f64, feature: f64, opts: QuadOptions) -> Result<f64> {
    // left half: x = u^{1/a}
    let left = integrate_from_zero(
        |u: f64| {
            let x = u.powf(1.0 / a);
            g(x) * (1.0 - x).powf(b - 1.0)
        },
        0.5f64.powf(a),
        feature.powf(a),
        opts,
    )? / a;
    // right half: x = 1 - w^{1/b}
    let right = integrate(
        |w: f64| {
            let x = 1.0 - w.powf(1.0 / b);
            g(x) * x.powf(a - 1.0)
        },
        0.0,
        0.5f64.powf(b),
        opts,
    )?
    .0 / b;
    Ok(left + right)
}

impl CoalescentMeasure {
    pub fn kingman() -> Self {
        CoalescentMeasure {
            kingman_mass: 1.0,
            part: NontrivialPart::None,
        }
    }

    pub fn beta(alpha: f64) -> Result<Self> {
        validate_measure(&MeasureDescription {
            alpha: Some(alpha),
            ..MeasureDescription::family(Family::Beta)
        })
    }

    pub fn bolthausen_sznitman() -> Self {
        CoalescentMeasure {
            kingman_mass: 0.0,
            part: NontrivialPart::LambdaBolthausenSznitman,
        }
    }

    pub fn lambda_atoms(atoms: &[(f64, f64)]) -> Result<Self> {
        validate_measure(&MeasureDescription {
            atoms: Some(atoms.to_vec()),
            ..MeasureDescription::family(Family::LambdaAtoms)
        })
    }

    pub fn kingman_mass(&self) -> f64 {
        self.kingman_mass
    }

    pub fn part(&self) -> &NontrivialPart {
        &self.part
    }

    /// Λ-type: nontrivial part supported on one-coordinate points.
    pub fn is_lambda(&self) -> bool {
        !matches!(self.part, NontrivialPart::XiAtoms(_))
    }

    fn lambda_mass(&self) -> f64 {
        1.0 - self.kingman_mass
    }

    /// Back to the structured-text form.
    pub fn to_description(&self) -> MeasureDescription {
        let k0 = Some(self.kingman_mass);
        match &self.part {
            NontrivialPart::None => MeasureDescription {
                kingman_mass: k0,
                ..MeasureDescription::family(Family::Kingman)
            },
            NontrivialPart::LambdaBeta { alpha } => MeasureDescription {
                kingman_mass: k0,
                alpha: Some(*alpha),
                ..MeasureDescription::family(Family::Beta)
            },
            NontrivialPart::LambdaBolthausenSznitman => MeasureDescription {
                kingman_mass: k0,
                ..MeasureDescription::family(Family::BolthausenSznitman)
            },
            NontrivialPart::LambdaAtoms(atoms) => MeasureDescription {
                kingman_mass: k0,
                atoms: Some(atoms.iter().map(|a| (a.x, a.weight)).collect()),
                ..MeasureDescription::family(Family::LambdaAtoms)
            },
            NontrivialPart::LambdaDensityTable(t) => MeasureDescription {
                kingman_mass: k0,
                density: Some(t.samples()),
                ..MeasureDescription::family(Family::LambdaDensity)
            },
            NontrivialPart::XiAtoms(atoms) => MeasureDescription {
                kingman_mass: k0,
                xi_atoms: Some(
                    atoms
                        .iter()
                        .map(|a| XiAtomDescription {
                            point: a.point.coords().to_vec(),
                            weight: a.weight,
                        })
                        .collect(),
                ),
                ..MeasureDescription::family(Family::XiAtoms)
            },
        }
    }

    /// `∫ g(x) Λ'(dx)` for a Λ-type part, `g` bounded on `(0,1]`.
    /// `feature` is the length scale near zero on which `g` varies.
    fn lambda_integral<F: Fn(f64) -> f64>(&self, g: F, feature: f64, opts: QuadOptions) -> Result<f64> {
        let mass = self.lambda_mass();
        match &self.part {
            NontrivialPart::None => Ok(0.0),
            NontrivialPart::LambdaBeta { alpha } => {
                let a = 2.0 - alpha;
                let b = *alpha;
                let norm = ln_beta(a, b).exp();
                Ok(mass * beta_weighted(g, a, b, feature, opts)? / norm)
            }
            NontrivialPart::LambdaBolthausenSznitman => {
                Ok(mass * integrate_from_zero(g, 1.0, feature, opts)?)
            }
            NontrivialPart::LambdaAtoms(atoms) => {
                Ok(atoms.iter().map(|a| a.weight * g(a.x)).sum())
            }
            NontrivialPart::LambdaDensityTable(table) => {
                let mut total = 0.0;
                for (lo, hi) in table.pieces() {
                    let h = |x: f64| g(x) * table.density(x);
                    total += if lo == 0.0 {
                        integrate_from_zero(h, hi, feature, opts)?
                    } else if feature > lo && feature < hi {
                        integrate(&h, lo, feature, opts)?.0 + integrate(&h, feature, hi, opts)?.0
                    } else {
                        integrate(h, lo, hi, opts)?.0
                    };
                }
                Ok(total)
            }
            NontrivialPart::XiAtoms(_) => Err(Error::UnsupportedMeasure(
                "Lambda integral requested for a Xi measure".into(),
            )),
        }
    }

    /// ψ(q) for this measure at relative tolerance `rel_tol`.
    pub fn psi(&self, q: f64, rel_tol: f64) -> Result<f64> {
        if !(q >= 0.0) {
            return Err(Error::BadParameter(format!("psi needs q >= 0, got {q}")));
        }
        if q == 0.0 {
            return Ok(0.0);
        }
        let kingman = self.kingman_mass * 0.5 * q * q;
        let rest = match &self.part {
            NontrivialPart::XiAtoms(atoms) => atoms
                .iter()
                .map(|a| {
                    let num: f64 = a.point.coords().iter().map(|&x| phi(q * x)).sum();
                    a.weight * num / a.point.sum_sq()
                })
                .sum(),
            _ => self.lambda_integral(|x| psi_kernel(q, x), 1.0 / q, QuadOptions::rel(rel_tol))?,
        };
        Ok(kingman + rest)
    }

    /// ψ̄(q) = ∫ ((1-x)^q - 1 + qx)/x² Λ'(dx) + kingman_mass·q(q-1)/2.
    pub fn psi_bar(&self, q: f64, rel_tol: f64) -> Result<f64> {
        if !self.is_lambda() {
            return Err(Error::BarUnsupported);
        }
        if !(q >= 0.0) {
            return Err(Error::BadParameter(format!("psi needs q >= 0, got {q}")));
        }
        // the kernel vanishes identically at q = 0 and q = 1
        if q == 0.0 || q == 1.0 {
            return Ok(0.0);
        }
        let kingman = self.kingman_mass * 0.5 * q * (q - 1.0);
        // near q = 1 the value is tiny next to the q² scale of the kernel
        let opts = QuadOptions {
            abs_tol: 1e-15 * q * q,
            ..QuadOptions::rel(rel_tol)
        };
        let rest = self.lambda_integral(|x| psi_bar_kernel(q, x), 1.0 / q, opts)?;
        Ok(kingman + rest)
    }

    /// `∫ (Σx_i)² / Σx_i² Ξ(dx)`, the ratio taken as 0 at the origin.
    pub fn regularity_integral(&self) -> Regularity {
        let value = match &self.part {
            NontrivialPart::XiAtoms(atoms) => atoms
                .iter()
                .map(|a| {
                    let s = a.point.sum();
                    a.weight * s * s / a.point.sum_sq()
                })
                .sum(),
            NontrivialPart::None => 0.0,
            _ => self.lambda_mass(),
        };
        Regularity {
            value,
            infinite: !value.is_finite() || value > 1e300,
        }
    }

    /// `λ_{b,k}` for a Λ-type measure, `2 <= k <= b`.
    pub fn lambda_rate(&self, b: usize, k: usize) -> Result<f64> {
        Ok(self.weighted_rate(b, k)?.1)
    }

    /// `(C(b,k) λ_{b,k}, λ_{b,k})`, the first computed in log space where
    /// a closed form exists.
    fn weighted_rate(&self, b: usize, k: usize) -> Result<(f64, f64)> {
        if !self.is_lambda() {
            return Err(Error::UnsupportedMeasure(
                "block merger rates need a Lambda-type measure".into(),
            ));
        }
        if b < 2 || k < 2 || k > b {
            return Err(Error::BadParameter(format!(
                "merger rate needs 2 <= k <= b, got b={b}, k={k}"
            )));
        }
        let ln_choose = ln_gamma(b as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((b - k) as f64 + 1.0);
        let mass = self.lambda_mass();
        let (bf, kf) = (b as f64, k as f64);
        let (mut weighted, mut plain) = match &self.part {
            NontrivialPart::None => (0.0, 0.0),
            NontrivialPart::LambdaBeta { alpha } => {
                let l = ln_beta(kf - alpha, bf - kf + alpha) - ln_beta(2.0 - alpha, *alpha);
                (mass * (ln_choose + l).exp(), mass * l.exp())
            }
            NontrivialPart::LambdaBolthausenSznitman => {
                let l = ln_beta(kf - 1.0, bf - kf + 1.0);
                (mass * (ln_choose + l).exp(), mass * l.exp())
            }
            NontrivialPart::LambdaAtoms(atoms) => {
                let mut w = 0.0;
                let mut p = 0.0;
                for a in atoms {
                    if a.x >= 1.0 {
                        if k == b {
                            w += a.weight;
                            p += a.weight;
                        }
                        continue;
                    }
                    let l = (kf - 2.0) * a.x.ln() + (bf - kf) * (-a.x).ln_1p();
                    w += a.weight * (ln_choose + l).exp();
                    p += a.weight * l.exp();
                }
                (w, p)
            }
            NontrivialPart::LambdaDensityTable(_) => {
                let p = self.lambda_integral(
                    |x| x.powi(k as i32 - 2) * (1.0 - x).powi((b - k) as i32),
                    1.0 / bf,
                    QuadOptions::rel(1e-11),
                )?;
                (ln_choose.exp() * p, p)
            }
            NontrivialPart::XiAtoms(_) => unreachable!(),
        };
        if k == 2 {
            plain += self.kingman_mass;
            weighted += self.kingman_mass * ln_choose.exp();
        }
        if !weighted.is_finite() {
            return Err(Error::RateOverflow(b));
        }
        Ok((weighted, plain))
    }
}

/// One row of block merger rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergerRateRow {
    pub b: usize,
    /// `λ_{b,k}` for `k = 2..=b` (index 0 is k = 2).
    pub by_k: Vec<f64>,
    /// `λ_b = Σ_k C(b,k) λ_{b,k}`.
    pub total: f64,
}

/// Rates at which a given block of `k` out of `b` lineages merges.
pub fn merger_rates(m: &CoalescentMeasure, b: usize) -> Result<MergerRateRow> {
    if b < 2 {
        return Err(Error::BadParameter(format!("merger_rates needs b >= 2, got {b}")));
    }
    let mut by_k = Vec::with_capacity(b - 1);
    let mut total = 0.0;
    for k in 2..=b {
        let (w, p) = m.weighted_rate(b, k)?;
        by_k.push(p);
        total += w;
    }
    if !total.is_finite() {
        return Err(Error::RateOverflow(b));
    }
    Ok(MergerRateRow { b, by_k, total })
}

/// Precomputed total merger rates `λ_b`, `b = 2..=b_max`, for a Λ-type
/// measure, together with on-demand `C(b,k) λ_{b,k}`.
///
/// Totals use `λ_{b+1} = λ_b + b λ_{b+1,2}`, which is linear in `b_max`.
#[derive(Debug)]
pub struct LambdaRates {
    measure: CoalescentMeasure,
    totals: Vec<f64>,
    memo: Option<RwLock<HashMap<(u32, u32), f64>>>,
}

impl LambdaRates {
    pub fn new(measure: &CoalescentMeasure, b_max: usize) -> Result<Self> {
        if !measure.is_lambda() {
            return Err(Error::UnsupportedMeasure(
                "Lambda rates requested for a Xi measure".into(),
            ));
        }
        let b_max = b_max.max(2);
        let mut totals = vec![0.0; b_max + 1];
        totals[2] = measure.weighted_rate(2, 2)?.0;
        for b in 2..b_max {
            let next = measure.lambda_rate(b + 1, 2)?;
            totals[b + 1] = totals[b] + b as f64 * next;
            if !totals[b + 1].is_finite() {
                return Err(Error::RateOverflow(b + 1));
            }
        }
        let memo = matches!(measure.part, NontrivialPart::LambdaDensityTable(_))
            .then(|| RwLock::new(HashMap::new()));
        Ok(LambdaRates {
            measure: measure.clone(),
            totals,
            memo,
        })
    }

    pub fn b_max(&self) -> usize {
        self.totals.len() - 1
    }

    pub fn total(&self, b: usize) -> f64 {
        if b < 2 {
            0.0
        } else {
            self.totals[b]
        }
    }

    /// `C(b,k) λ_{b,k}`: rate at which some `k`-subset of `b` blocks merges.
    pub fn weighted(&self, b: usize, k: usize) -> Result<f64> {
        match &self.memo {
            None => Ok(self.measure.weighted_rate(b, k)?.0),
            Some(memo) => {
                let key = (b as u32, k as u32);
                if let Some(v) = memo.read().expect("rate memo poisoned").get(&key) {
                    return Ok(*v);
                }
                let v = self.measure.weighted_rate(b, k)?.0;
                memo.write().expect("rate memo poisoned").insert(key, v);
                Ok(v)
            }
        }
    }
}

/// ψ evaluation with a memo of previously computed values.
#[derive(Debug)]
pub struct PsiEvaluator {
    measure: CoalescentMeasure,
    rel_tol: f64,
    cache: RwLock<HashMap<(u64, bool), f64>>,
}

const CACHE_CAP: usize = 1 << 16;

impl Clone for PsiEvaluator {
    fn clone(&self) -> Self {
        PsiEvaluator::with_tolerance(self.measure.clone(), self.rel_tol)
    }
}

impl PsiEvaluator {
    pub fn new(measure: CoalescentMeasure) -> Self {
        Self::with_tolerance(measure, 1e-9)
    }

    pub fn with_tolerance(measure: CoalescentMeasure, rel_tol: f64) -> Self {
        PsiEvaluator {
            measure,
            rel_tol,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn measure(&self) -> &CoalescentMeasure {
        &self.measure
    }

    pub fn rel_tol(&self) -> f64 {
        self.rel_tol
    }

    pub fn psi(&self, q: f64, variant: PsiVariant) -> Result<f64> {
        // pure Kingman needs no memo
        if matches!(self.measure.part, NontrivialPart::None) {
            return match variant {
                PsiVariant::Standard => self.measure.psi(q, self.rel_tol),
                PsiVariant::Bar => self.measure.psi_bar(q, self.rel_tol),
            };
        }
        let key = (q.to_bits(), variant == PsiVariant::Bar);
        if let Some(v) = self.cache.read().expect("psi cache poisoned").get(&key) {
            return Ok(*v);
        }
        let v = match variant {
            PsiVariant::Standard => self.measure.psi(q, self.rel_tol)?,
            PsiVariant::Bar => self.measure.psi_bar(q, self.rel_tol)?,
        };
        let mut cache = self.cache.write().expect("psi cache poisoned");
        if cache.len() >= CACHE_CAP {
            cache.clear();
        }
        cache.insert(key, v);
        Ok(v)
    }

    pub fn standard(&self, q: f64) -> Result<f64> {
        self.psi(q, PsiVariant::Standard)
    }

    pub fn bar(&self, q: f64) -> Result<f64> {
        self.psi(q, PsiVariant::Bar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xi(points: Vec<(Vec<f64>, f64)>, k0: f64) -> Result<CoalescentMeasure> {
        validate_measure(&MeasureDescription {
            kingman_mass: Some(k0),
            xi_atoms: Some(
                points
                    .into_iter()
                    .map(|(point, weight)| XiAtomDescription { point, weight })
                    .collect(),
            ),
            ..MeasureDescription::family(Family::XiAtoms)
        })
    }

    #[test]
    fn validate_examples() {
        let k = validate_measure(&MeasureDescription::family(Family::Kingman)).unwrap();
        assert_eq!(k.kingman_mass(), 1.0);
        assert!(matches!(
            xi(vec![(vec![0.6, 0.5], 1.0)], 0.0),
            Err(Error::SimplexViolation(_))
        ));
        let b = CoalescentMeasure::beta(1.5).unwrap();
        assert_eq!(b.kingman_mass(), 0.0);
        assert!(matches!(b.part(), NontrivialPart::LambdaBeta { alpha } if *alpha == 1.5));
    }

    #[test]
    fn validate_errors() {
        assert!(matches!(
            xi(vec![(vec![0.2, 0.3], 1.0)], 0.0),
            Err(Error::SimplexViolation(_))
        ));
        assert!(matches!(
            CoalescentMeasure::beta(2.0),
            Err(Error::BadParameter(_))
        ));
        assert!(matches!(
            CoalescentMeasure::lambda_atoms(&[(0.5, 0.7)]),
            Err(Error::MassViolation(_))
        ));
        let d = MeasureDescription {
            kingman_mass: Some(0.5),
            ..MeasureDescription::family(Family::Kingman)
        };
        assert!(matches!(validate_measure(&d), Err(Error::MassViolation(_))));
        let d = MeasureDescription {
            alpha: Some(1.5),
            ..MeasureDescription::family(Family::Kingman)
        };
        assert!(matches!(validate_measure(&d), Err(Error::BadParameter(_))));
    }

    #[test]
    fn duplicate_atoms_aggregate_and_sort() {
        let m = CoalescentMeasure::lambda_atoms(&[(0.2, 0.25), (0.7, 0.5), (0.2, 0.25)]).unwrap();
        match m.part() {
            NontrivialPart::LambdaAtoms(a) => {
                assert_eq!(a.len(), 2);
                assert_eq!(a[0].x, 0.7);
                assert_eq!(a[1].weight, 0.5);
            }
            _ => panic!(),
        }
        let m = xi(vec![(vec![0.3, 0.1], 0.5), (vec![0.3, 0.1, 0.0], 0.5)], 0.0).unwrap();
        match m.part() {
            NontrivialPart::XiAtoms(a) => assert_eq!(a.len(), 1),
            _ => panic!(),
        }
    }

    #[test]
    fn description_round_trip() {
        let text = "kingman_mass = 0.25\nfamily = \"lambda_atoms\"\natoms = [[0.5, 0.75]]\n";
        let d = MeasureDescription::parse(text).unwrap();
        let m = validate_measure(&d).unwrap();
        assert_eq!(validate_measure(&m.to_description()).unwrap(), m);
        let bad = MeasureDescription::parse("family = \"beta\"\nalpah = 1.5\n");
        assert!(matches!(bad, Err(Error::Config(msg)) if msg.contains("alpah")));
    }

    #[test]
    fn psi_examples() {
        let k = CoalescentMeasure::kingman();
        assert_eq!(k.psi(2.0, 1e-9).unwrap(), 2.0);
        assert_eq!(k.psi(0.0, 1e-9).unwrap(), 0.0);
        let a = CoalescentMeasure::lambda_atoms(&[(0.5, 1.0)]).unwrap();
        let expected = 4.0 * (-1f64).exp();
        assert!((a.psi(2.0, 1e-9).unwrap() - expected).abs() < 1e-14);
        for m in [CoalescentMeasure::beta(1.5).unwrap(), CoalescentMeasure::bolthausen_sznitman()] {
            assert_eq!(m.psi(0.0, 1e-9).unwrap(), 0.0);
        }
    }

    #[test]
    fn psi_bar_kingman_is_pair_count() {
        let k = CoalescentMeasure::kingman();
        for b in 1..20 {
            let q = b as f64;
            assert_eq!(k.psi_bar(q, 1e-9).unwrap(), q * (q - 1.0) / 2.0);
        }
        let x = xi(vec![(vec![0.3, 0.3], 1.0)], 0.0).unwrap();
        assert_eq!(x.psi_bar(3.0, 1e-9), Err(Error::BarUnsupported));
    }

    #[test]
    fn psi_bar_matches_expected_block_loss() {
        // ψ̄(b) = Σ_k C(b,k) λ_{b,k} (k-1) at integer b
        for m in [
            CoalescentMeasure::beta(1.5).unwrap(),
            CoalescentMeasure::bolthausen_sznitman(),
            CoalescentMeasure::lambda_atoms(&[(0.3, 0.6), (1.0, 0.4)]).unwrap(),
        ] {
            for b in [2usize, 3, 7, 40] {
                let mut s = 0.0;
                for k in 2..=b {
                    let (w, _) = m.weighted_rate(b, k).unwrap();
                    s += w * (k - 1) as f64;
                }
                let bar = m.psi_bar(b as f64, 1e-11).unwrap();
                assert!((bar - s).abs() <= 1e-8 * s, "{m:?} b={b}: {bar} vs {s}");
            }
        }
    }

    #[test]
    fn regularity_examples() {
        assert_eq!(CoalescentMeasure::kingman().regularity_integral().value, 0.0);
        let a = CoalescentMeasure::lambda_atoms(&[(0.5, 1.0)]).unwrap();
        assert_eq!(a.regularity_integral().value, 1.0);
        let x = xi(vec![(vec![0.1; 10], 1.0)], 0.0).unwrap();
        assert!((x.regularity_integral().value - 10.0).abs() < 1e-12);
        assert!(!x.regularity_integral().infinite);
    }

    #[test]
    fn rate_examples() {
        let one = CoalescentMeasure::lambda_atoms(&[(1.0, 1.0)]).unwrap();
        let row = merger_rates(&one, 5).unwrap();
        assert_eq!(row.by_k, vec![0.0, 0.0, 0.0, 1.0]);
        let k = CoalescentMeasure::kingman();
        let row = merger_rates(&k, 4).unwrap();
        assert_eq!(row.by_k[0], 1.0);
        assert!((row.total - 6.0).abs() < 1e-12);
        let b = CoalescentMeasure::beta(1.5).unwrap();
        let row = merger_rates(&b, 3).unwrap();
        assert!((row.by_k[0] - 0.75).abs() < 1e-12);
        assert!((row.by_k[1] - 0.25).abs() < 1e-12);
        assert!(matches!(merger_rates(&b, 1), Err(Error::BadParameter(_))));
    }

    #[test]
    fn beta_rates_match_quadrature() {
        // independent route: integrate x^{k-2}(1-x)^{b-k} against the Beta density directly
        let alpha = 1.5;
        let b_meas = CoalescentMeasure::beta(alpha).unwrap();
        let norm = ln_beta(2.0 - alpha, alpha).exp();
        for (b, k) in [(3usize, 2usize), (3, 3), (10, 4), (25, 2)] {
            let f = |x: f64| {
                x.powf(k as f64 - 2.0 + 1.0 - alpha) * (1.0 - x).powf((b - k) as f64 + alpha - 1.0)
            };
            let (direct, _) = integrate(f, 0.0, 1.0, QuadOptions::rel(1e-12)).unwrap();
            let closed = b_meas.lambda_rate(b, k).unwrap();
            assert!((direct / norm - closed).abs() < 1e-8 * closed, "b={b} k={k}");
        }
    }

    #[test]
    fn lambda_totals_recursion_matches_direct_sum() {
        for m in [
            CoalescentMeasure::beta(1.3).unwrap(),
            CoalescentMeasure::bolthausen_sznitman(),
            CoalescentMeasure::lambda_atoms(&[(0.5, 1.0)]).unwrap(),
            CoalescentMeasure::kingman(),
        ] {
            let rates = LambdaRates::new(&m, 60).unwrap();
            for b in [2usize, 5, 30, 60] {
                let direct = merger_rates(&m, b).unwrap().total;
                let t = rates.total(b);
                assert!((t - direct).abs() <= 1e-10 * direct, "{m:?} b={b}: {t} vs {direct}");
            }
        }
    }

    #[test]
    fn density_table_behaves_like_uniform() {
        let d = validate_measure(&MeasureDescription {
            density: Some(vec![(0.25, 2.0), (0.75, 2.0)]),
            ..MeasureDescription::family(Family::LambdaDensity)
        })
        .unwrap();
        let bs = CoalescentMeasure::bolthausen_sznitman();
        for q in [0.5, 3.0, 100.0] {
            let a = d.psi(q, 1e-10).unwrap();
            let b = bs.psi(q, 1e-10).unwrap();
            assert!((a - b).abs() < 1e-8 * b, "q={q}: {a} vs {b}");
        }
        let rd = d.lambda_rate(6, 3).unwrap();
        let rb = bs.lambda_rate(6, 3).unwrap();
        assert!((rd - rb).abs() < 1e-9 * rb);
    }

    #[test]
    fn evaluator_caches_consistently() {
        let ev = PsiEvaluator::new(CoalescentMeasure::beta(1.5).unwrap());
        let a = ev.standard(17.0).unwrap();
        let b = ev.standard(17.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a, ev.measure().psi(17.0, 1e-9).unwrap());
    }
}
