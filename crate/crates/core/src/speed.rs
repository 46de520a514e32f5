//! The deterministic speed function `v^n(t)`, defined by
//! `∫_{v^n(t)}^n dq/ψ(q) = t`, and the length functionals
//! `ℓ(n) = ∫_1^n q/ψ(q) dq`, `ℓ_t(n) = ∫_{v^n(t)}^n q/ψ(q) dq`.
//!
//! All integrals over `q` are taken in `s = ln q`, where the integrands are
//! smooth and of moderate range for every family we support.

use std::sync::{Arc, OnceLock};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{CoalescentMeasure, NontrivialPart, PsiEvaluator};
use crate::quadrature::{integrate, QuadOptions};

/// Upper truncation of `∫_1^∞ dq/ψ(q)`.
pub const HORIZON_TRUNCATION: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct SpeedSolver {
    psi: Arc<PsiEvaluator>,
    n: f64,
    root_rel_tol: f64,
    horizon: Arc<OnceLock<f64>>,
}

impl SpeedSolver {
    pub fn new(psi: Arc<PsiEvaluator>, n: u64) -> Result<Self> {
        Self::with_tolerance(psi, n, 1e-10)
    }

    pub fn with_tolerance(psi: Arc<PsiEvaluator>, n: u64, root_rel_tol: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::BadParameter("speed solver needs n >= 1".into()));
        }
        Ok(SpeedSolver {
            psi,
            n: n as f64,
            root_rel_tol,
            horizon: Arc::new(OnceLock::new()),
        })
    }

    pub fn for_measure(m: &CoalescentMeasure, n: u64) -> Result<Self> {
        Self::new(Arc::new(PsiEvaluator::new(m.clone())), n)
    }

    pub fn n(&self) -> u64 {
        self.n as u64
    }

    pub fn psi(&self) -> &PsiEvaluator {
        &self.psi
    }

    fn opts(&self) -> QuadOptions {
        let exact = matches!(self.psi.measure().part(), NontrivialPart::None);
        let rel = if exact {
            1e-13
        } else {
            (10.0 * self.psi.rel_tol()).max(1e-12)
        };
        QuadOptions {
            abs_tol: 0.0,
            rel_tol: rel,
            max_intervals: 4000,
        }
    }

    /// `∫_lo^hi q^power / ψ(q) dq`, integrated in log space.
    fn log_integral(&self, lo: f64, hi: f64, power: i32) -> Result<f64> {
        if hi <= lo {
            return Ok(0.0);
        }
        let psi = &self.psi;
        let failure = std::cell::Cell::new(None);
        let f = |s: f64| {
            let q = s.exp();
            match psi.standard(q) {
                Ok(p) => q.powi(power + 1) / p,
                Err(e) => {
                    failure.set(Some(e));
                    f64::NAN
                }
            }
        };
        let res = integrate(f, lo.ln(), hi.ln(), self.opts());
        if let Some(e) = failure.take() {
            return Err(e);
        }
        Ok(res?.0)
    }

    /// `∫_v^n dq/ψ(q)`.
    pub fn elapsed(&self, v: f64) -> Result<f64> {
        self.log_integral(v, self.n, 0)
    }

    /// The time at which `v^n` reaches 1: `∫_1^n dq/ψ(q)`.
    pub fn horizon(&self) -> Result<f64> {
        if let Some(h) = self.horizon.get() {
            return Ok(*h);
        }
        let h = self.elapsed(1.0)?;
        Ok(*self.horizon.get_or_init(|| h))
    }

    pub fn v_of_t(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::BadParameter(format!("v(t) needs t >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(self.n);
        }
        let horizon = self.horizon()?;
        if t > horizon {
            return Err(Error::HorizonExceeded { t, horizon });
        }
        if t == horizon {
            return Ok(1.0);
        }
        // Newton in s = ln v on f(s) = ∫_{e^s}^n dq/ψ - t, f'(s) = -e^s/ψ(e^s),
        // safeguarded by the bracket [0, ln n] on which f changes sign.
        let (mut lo, mut hi) = (0.0f64, self.n.ln());
        let mut s = {
            // start from the pure-Kingman profile clipped to the bracket
            let guess = 2.0 * self.n / (2.0 + self.n * t);
            guess.clamp(1.0, self.n).ln()
        };
        for _ in 0..200 {
            let v = s.exp();
            let f = self.elapsed(v)? - t;
            if f == 0.0 {
                return Ok(v);
            }
            if f > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let slope = -v / self.psi.standard(v)?;
            let mut next = s - f / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - s).abs();
            s = next;
            if step <= 1e-14 * s.abs().max(1.0) || hi - lo <= 1e-15 * hi.abs().max(1.0) {
                break;
            }
        }
        let v = s.exp();
        let residual = (self.elapsed(v)? - t).abs();
        if residual > self.root_rel_tol * t.max(1.0) {
            return Err(Error::QuadratureFailure(format!(
                "v({t}) root residual {residual:e} above tolerance"
            )));
        }
        Ok(v)
    }

    /// `ℓ(n)` without `t`, `ℓ_t(n)` with it.
    pub fn ell(&self, t: Option<f64>) -> Result<f64> {
        let lower = match t {
            None => 1.0,
            Some(t) => self.v_of_t(t)?,
        };
        self.log_integral(lower, self.n, 1)
    }

    /// `∫_1^∞ dq/ψ(q)` truncated at [`HORIZON_TRUNCATION`]; meaningful when
    /// the measure comes down from infinity.
    pub fn blowdown_horizon(psi: &Arc<PsiEvaluator>) -> Result<f64> {
        let s = SpeedSolver::new(psi.clone(), HORIZON_TRUNCATION as u64)?;
        s.elapsed(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Cdi {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CdiBasis {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdiVerdict {
    pub cdi: Cdi,
    pub basis: CdiBasis,
    /// Local exponents `d ln ψ / d ln q` on the probe grid (numeric basis).
    pub exponents: Vec<f64>,
}

const PROBE_GRID: [f64; 4] = [1e3, 1e4, 1e5, 1e6];

/// Whether `∫_a^∞ dq/ψ(q) < ∞`.
pub fn comes_down_check(m: &CoalescentMeasure) -> Result<CdiVerdict> {
    let analytic = |cdi| {
        Ok(CdiVerdict {
            cdi,
            basis: CdiBasis::Analytic,
            exponents: Vec::new(),
        })
    };
    if m.kingman_mass() > 0.0 {
        return analytic(Cdi::Yes);
    }
    match m.part() {
        NontrivialPart::None | NontrivialPart::LambdaBeta { .. } => analytic(Cdi::Yes),
        NontrivialPart::LambdaBolthausenSznitman
        | NontrivialPart::LambdaAtoms(_)
        | NontrivialPart::XiAtoms(_) => analytic(Cdi::No),
        NontrivialPart::LambdaDensityTable(_) => {
            let values = PROBE_GRID
                .iter()
                .map(|&q| m.psi(q, 1e-9))
                .collect::<Result<Vec<_>>>()?;
            let exponents: Vec<f64> = values
                .windows(2)
                .zip(PROBE_GRID.windows(2))
                .map(|(p, q)| (p[1] / p[0]).ln() / (q[1] / q[0]).ln())
                .collect();
            let cdi = if exponents.iter().all(|&e| e >= 1.05) {
                Cdi::Yes
            } else if exponents.iter().all(|&e| e <= 0.95)
                || exponents.last().is_some_and(|&e| e <= 1.0)
            {
                Cdi::No
            } else {
                Cdi::Unknown
            };
            Ok(CdiVerdict {
                cdi,
                basis: CdiBasis::Numeric,
                exponents,
            })
        }
    }
}
