//! Checkable stability conditions and the end-to-end analysis.

use num_complex::Complex;
use serde::Serialize;

use crate::certificates::{certify, CertificateSet, Eps1Policy, QChoices};
use crate::equilibrium::{find_equilibrium, flat_start, EquilibriumResult, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, OperatingPoint};
use crate::linalg::{eigenvalues, max_abs, Matrix};
use crate::linearize::{check_homogeneous_filters, extract_blocks, jacobian, BlockSystem, FilterCheck, DEFAULT_FILTER_REL_TOL};
use crate::scalar::Scalar;
use crate::timescale::{e_from_nu, nu_terms, reduce, NuTerms, ReducedModel, STRUCTURE_TOL};

pub const DEFAULT_HURWITZ_TOL: f64 = 1e-9;

/// Entrywise tolerance between the two constructions of `E`.
pub const E_AGREEMENT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct HurwitzCheck<T: Scalar> {
    pub flag: bool,
    /// `|abscissa| ≤ tol`: neither certified stable nor clearly unstable.
    pub marginal: bool,
    pub spectral_abscissa: T,
}

pub fn hurwitz<T: Scalar>(a: &Matrix<T>, tol: T) -> Result<HurwitzCheck<T>> {
    hurwitz_from_spectrum(&eigenvalues(a)?, tol)
}

fn hurwitz_from_spectrum<T: Scalar>(ev: &[Complex<T>], tol: T) -> Result<HurwitzCheck<T>> {
    if tol < T::zero() {
        return Err(Error::Structure("Hurwitz tolerance must be nonnegative".into()));
    }
    let abscissa = ev
        .iter()
        .map(|z| z.re)
        .fold(T::lit(f64::NEG_INFINITY), |m, r| if r > m { r } else { m });
    Ok(HurwitzCheck {
        flag: abscissa < -tol,
        marginal: abscissa.abs() <= tol,
        spectral_abscissa: abscissa,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", bound = "T: Scalar")]
pub enum GainBound<T: Scalar> {
    /// Any `k_q > 0`.
    UnboundedPositive,
    /// `0 < k_q < upper`.
    UpperBounded { upper: T },
}

impl<T: Scalar> GainBound<T> {
    pub fn admits(&self, k_q: T) -> bool {
        match self {
            Self::UnboundedPositive => k_q > T::zero(),
            Self::UpperBounded { upper } => k_q > T::zero() && k_q < *upper,
        }
    }

    pub fn upper(&self) -> Option<T> {
        match self {
            Self::UnboundedPositive => None,
            Self::UpperBounded { upper } => Some(*upper),
        }
    }
}

/// Decentralized voltage-droop gain bounds from diagonal dominance of `E`.
pub fn voltage_gain_bounds<T: Scalar>(nu: &NuTerms<T>) -> Result<Vec<GainBound<T>>> {
    nu.nu_diag
        .iter()
        .enumerate()
        .map(|(i, &nu_i)| {
            if !(nu_i < T::zero()) {
                return Err(Error::NuNotNegative {
                    inverter: i,
                    nu: nu_i.as_f64(),
                });
            }
            let sum = nu.neighbors[i]
                .iter()
                .fold(T::zero(), |s, &j| s + nu.nu_offdiag[i][j].abs());
            Ok(if nu_i.abs() >= sum {
                GainBound::UnboundedPositive
            } else {
                GainBound::UpperBounded {
                    upper: T::one() / (sum - nu_i.abs()),
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct GainRecord<T: Scalar> {
    pub inverter: usize,
    pub bus: u32,
    pub nu: T,
    pub neighbor_sum: T,
    pub bound: GainBound<T>,
    pub k_q: T,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct GainBoundOutcome<T: Scalar> {
    pub applicable: bool,
    pub message: Option<String>,
    pub records: Vec<GainRecord<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Certified,
    ConditionsFail,
    Unstable,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Certified => 0,
            Self::ConditionsFail => 2,
            Self::Unstable => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions<T: Scalar> {
    pub q: QChoices<T>,
    pub eps1_policy: Eps1Policy,
    pub hurwitz_tol: T,
    pub filter_rel_tol: T,
    pub equilibrium_tol: T,
    pub equilibrium_max_iter: usize,
    /// Newton starting point; the flat start when absent.
    pub initial_guess: Option<OperatingPoint<T>>,
}

impl<T: Scalar> Default for AnalyzeOptions<T> {
    fn default() -> Self {
        Self {
            q: QChoices::identity(),
            eps1_policy: Eps1Policy::HalfStar,
            hurwitz_tol: T::lit(DEFAULT_HURWITZ_TOL),
            filter_rel_tol: T::lit(DEFAULT_FILTER_REL_TOL),
            equilibrium_tol: T::lit(DEFAULT_TOL),
            equilibrium_max_iter: DEFAULT_MAX_ITER,
            initial_guess: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct EquilibriumSummary<T: Scalar> {
    pub iterations: usize,
    pub residual_norm: T,
    pub field_norm: T,
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct StabilityReport<T: Scalar> {
    pub spec_fingerprint: String,
    pub n_inverters: usize,
    pub n_lines: usize,
    pub equilibrium: EquilibriumSummary<T>,
    pub filters: FilterCheck<T>,
    pub hurwitz_e: HurwitzCheck<T>,
    pub hurwitz_slow: Option<HurwitzCheck<T>>,
    pub hurwitz_full: HurwitzCheck<T>,
    /// Largest entrywise gap between the closed-form and extracted `E`.
    pub e_agreement: T,
    pub gain_bounds: GainBoundOutcome<T>,
    pub eps1: T,
    pub eps1_star: Option<T>,
    pub eps2: T,
    pub eps3: T,
    pub eps3_star: Option<T>,
    pub eps3_star_at_actual_eps1: Option<T>,
    pub eps1_policy: Eps1Policy,
    pub verdict_reduced: bool,
    pub verdict_full: bool,
    pub conditions_conservative: bool,
    pub verdict: Verdict,
    /// Up to three eigenvalues of `A` with the largest real part, as `[re, im]`.
    pub dominant_full: Vec<[T; 2]>,
    pub certificates: Option<CertificateSet<T>>,
    pub certificate_error: Option<String>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> StabilityReport<T> {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn exit_code(&self) -> i32 {
        self.verdict.exit_code()
    }
}

/// Everything `analyze` computed, for callers that export matrices.
#[derive(Debug, Clone)]
pub struct Analysis<T: Scalar> {
    pub report: StabilityReport<T>,
    pub equilibrium: EquilibriumResult<T>,
    pub jacobian: Matrix<T>,
    pub blocks: BlockSystem<T>,
    pub reduced: ReducedModel<T>,
    pub e_closed_form: Matrix<T>,
    pub eig_full: Vec<Complex<T>>,
    pub eig_e: Vec<Complex<T>>,
    pub eig_slow: Vec<Complex<T>>,
}

fn gain_bound_outcome<T: Scalar>(spec: &GridSpec<T>, nu: &NuTerms<T>) -> GainBoundOutcome<T> {
    match voltage_gain_bounds(nu) {
        Ok(bounds) => {
            let records = bounds
                .into_iter()
                .enumerate()
                .map(|(i, bound)| {
                    let k_q = spec.inverters[i].k_q;
                    GainRecord {
                        inverter: i,
                        bus: spec.inverters[i].bus,
                        nu: nu.nu_diag[i],
                        neighbor_sum: nu.neighbors[i]
                            .iter()
                            .fold(T::zero(), |s, &j| s + nu.nu_offdiag[i][j].abs()),
                        bound,
                        k_q,
                        satisfied: bound.admits(k_q),
                    }
                })
                .collect();
            GainBoundOutcome {
                applicable: true,
                message: None,
                records,
            }
        }
        Err(e) => GainBoundOutcome {
            applicable: false,
            message: Some(format!("{e}; falling back to a direct Hurwitz check of E")),
            records: Vec::new(),
        },
    }
}

/// Full pipeline: equilibrium, Jacobian, block form, reduction,
/// certificates and conditions, checked against the spectrum of `A`.
pub fn analyze<T: Scalar>(spec: &GridSpec<T>, opts: &AnalyzeOptions<T>) -> Result<Analysis<T>> {
    spec.validate().map_err(|e| e.at("spec"))?;
    let mut warnings = Vec::new();

    let guess = match &opts.initial_guess {
        Some(g) => g.clone(),
        None => flat_start(spec).map_err(|e| e.at("equilibrium"))?,
    };
    let eq = find_equilibrium(spec, &guess, opts.equilibrium_tol, opts.equilibrium_max_iter)
        .map_err(|e| e.at("equilibrium"))?;
    if !eq.converged {
        let msg = eq.message.clone().unwrap_or_else(|| "Newton did not converge".into());
        return Err(Error::NoEquilibrium(format!(
            "{msg} (residual {:e} after {} iterations)",
            eq.residual_norm.as_f64(),
            eq.iterations
        ))
        .at("equilibrium"));
    }
    let w0 = &eq.point;

    let filters = check_homogeneous_filters(spec, opts.filter_rel_tol).map_err(|e| e.at("linearize"))?;
    if filters.mean_substituted {
        warnings.push(format!(
            "filter constants differ by up to {:e} relative; their mean is used",
            filters.max_rel_dev.as_f64()
        ));
    }
    let a = jacobian(spec, w0).map_err(|e| e.at("linearize"))?;
    let blocks = extract_blocks(&a, spec, opts.filter_rel_tol).map_err(|e| e.at("linearize"))?;
    if blocks.timescale_overlap() {
        warnings.push(format!(
            "line time constants span a ratio of {:.3e}; the geometric-mean eps2 hides timescale overlap",
            blocks.eps2_spread().as_f64()
        ));
    }

    let structure_tol = T::lit(STRUCTURE_TOL) + filters.max_rel_dev;
    let reduced = reduce(&blocks, structure_tol).map_err(|e| e.at("timescale"))?;
    let nu = nu_terms(spec, w0).map_err(|e| e.at("timescale"))?;
    let e_closed_form = e_from_nu(spec, &nu);
    let e_agreement = max_abs(&(&e_closed_form - &reduced.e_matrix));
    if e_agreement.as_f64() > E_AGREEMENT_TOL {
        warnings.push(format!(
            "closed-form and extracted E differ by {:e}",
            e_agreement.as_f64()
        ));
    }

    let tol = opts.hurwitz_tol;
    let eig_full = eigenvalues(&a).map_err(|e| e.at("conditions"))?;
    let eig_e = eigenvalues(&reduced.e_matrix).map_err(|e| e.at("conditions"))?;
    let eig_slow = eigenvalues(&reduced.a_slow).map_err(|e| e.at("conditions"))?;
    let hurwitz_full = hurwitz_from_spectrum(&eig_full, tol)?;
    let hurwitz_e = hurwitz_from_spectrum(&eig_e, tol)?;
    let hurwitz_slow = hurwitz_from_spectrum(&eig_slow, tol)?;
    for (name, h) in [("E", &hurwitz_e), ("A_slow", &hurwitz_slow), ("A", &hurwitz_full)] {
        if h.marginal {
            warnings.push(format!(
                "{name} is marginal (spectral abscissa {:e})",
                h.spectral_abscissa.as_f64()
            ));
        }
    }

    let gain_bounds = gain_bound_outcome(spec, &nu);
    if let Some(msg) = &gain_bounds.message {
        warnings.push(msg.clone());
    }

    let (certificates, certificate_error) = if hurwitz_e.flag && hurwitz_slow.flag {
        match certify(&blocks, &reduced, &opts.q, opts.eps1_policy) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.at("certificates").to_string())),
        }
    } else {
        (
            None,
            Some("E and A_slow must both be Hurwitz to build certificates".to_string()),
        )
    };
    if let Some(c) = &certificates {
        if c.max_residual().as_f64() > crate::certificates::LYAPUNOV_RESIDUAL_TOL {
            warnings.push(format!(
                "Lyapunov residual {:e} above tolerance",
                c.max_residual().as_f64()
            ));
        }
    }

    let verdict_reduced = hurwitz_e.flag
        && hurwitz_slow.flag
        && certificates.as_ref().is_some_and(|c| c.verdict_reduced);
    let verdict_full = verdict_reduced && certificates.as_ref().is_some_and(|c| c.verdict_full);
    let verdict = if verdict_full && hurwitz_full.flag {
        Verdict::Certified
    } else if hurwitz_full.flag {
        Verdict::ConditionsFail
    } else {
        if verdict_full {
            warnings.push("certificate claims stability but A is not Hurwitz".into());
        }
        Verdict::Unstable
    };

    let report = StabilityReport {
        spec_fingerprint: spec.fingerprint(),
        n_inverters: spec.n_inverters(),
        n_lines: spec.n_lines(),
        equilibrium: EquilibriumSummary {
            iterations: eq.iterations,
            residual_norm: eq.residual_norm,
            field_norm: eq.field_norm,
        },
        filters,
        hurwitz_e,
        hurwitz_slow: Some(hurwitz_slow),
        hurwitz_full,
        e_agreement,
        gain_bounds,
        eps1: blocks.eps1,
        eps1_star: certificates.as_ref().map(|c| c.eps1_star()),
        eps2: blocks.eps2,
        eps3: blocks.eps3(),
        eps3_star: certificates.as_ref().and_then(|c| c.eps3_star()),
        eps3_star_at_actual_eps1: certificates
            .as_ref()
            .and_then(|c| c.at_actual.as_ref().map(|f| f.eps3_star)),
        eps1_policy: opts.eps1_policy,
        verdict_reduced,
        verdict_full,
        conditions_conservative: !verdict_full && hurwitz_full.flag,
        verdict,
        dominant_full: eig_full.iter().take(3).map(|z| [z.re, z.im]).collect(),
        certificates,
        certificate_error,
        warnings,
    };
    Ok(Analysis {
        report,
        equilibrium: eq,
        jacobian: a,
        blocks,
        reduced,
        e_closed_form,
        eig_full,
        eig_e,
        eig_slow,
    })
}
