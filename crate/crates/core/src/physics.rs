//! Constitutive functions: degenerate normalized mobilities and their
//! monotone split, the double-well potential and its convex splitting,
//! proliferation, the nutrient chemical potential and the discrete energy.

use thiserror::Error;

use crate::mesh::Mesh;
use crate::quadrature::{p1_at, DEGREE4};
use crate::spaces::{p1_dirichlet_energy, pi0_pi1h, pi1h, P0Field};

#[inline]
pub fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// Negative part, `max(-x, 0) >= 0`.
#[inline]
pub fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

/// Semismooth derivative of [`pos`]: 1 for `x > 0`, 0 otherwise.
#[inline]
pub fn dpos(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `h_{p,q}(v) = K_{p,q} v_+^p (1-v)_+^q`, normalized so its maximum is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MobilitySpec {
    pub p: u32,
    pub q: u32,
}

impl MobilitySpec {
    pub const fn new(p: u32, q: u32) -> Self {
        Self { p, q }
    }

    /// Location of the maximum, `p / (p + q)`.
    pub fn w_star(&self) -> f64 {
        self.p as f64 / (self.p + self.q) as f64
    }

    pub fn k_pq(&self) -> f64 {
        let w = self.w_star();
        1.0 / (w.powi(self.p as i32) * (1.0 - w).powi(self.q as i32))
    }

    pub fn eval(&self, v: f64) -> f64 {
        mobility_eval(*self, v)
    }

    pub fn derivative(&self, v: f64) -> f64 {
        if v <= 0.0 || v >= 1.0 {
            return 0.0;
        }
        let (p, q) = (self.p as i32, self.q as i32);
        self.k_pq()
            * (p as f64 * v.powi(p - 1) * (1.0 - v).powi(q) - q as f64 * v.powi(p) * (1.0 - v).powi(q - 1))
    }
}

pub fn mobility_eval(spec: MobilitySpec, v: f64) -> f64 {
    if v <= 0.0 || v >= 1.0 {
        return 0.0;
    }
    spec.k_pq() * v.powi(spec.p as i32) * (1.0 - v).powi(spec.q as i32)
}

/// Nondecreasing and nonincreasing parts `(M_up, M_down)` with
/// `M_up + M_down = M`.
pub fn mobility_split(spec: MobilitySpec, v: f64) -> (f64, f64) {
    let w = spec.w_star();
    if v <= w {
        (mobility_eval(spec, v), 0.0)
    } else {
        let top = mobility_eval(spec, w);
        (top, mobility_eval(spec, v) - top)
    }
}

/// Derivatives of the two branches of [`mobility_split`], one-sided (zero)
/// at `w*`.
pub fn mobility_split_derivative(spec: MobilitySpec, v: f64) -> (f64, f64) {
    let w = spec.w_star();
    if v < w {
        (spec.derivative(v), 0.0)
    } else if v > w {
        (0.0, spec.derivative(v))
    } else {
        (0.0, 0.0)
    }
}

/// Ginzburg–Landau double well `F(u) = u²(1-u)²/4`.
pub fn potential_f(u: f64) -> f64 {
    0.25 * u * u * (1.0 - u) * (1.0 - u)
}

pub fn potential_f_prime(u: f64) -> f64 {
    0.5 * u * (1.0 - u) * (1.0 - 2.0 * u)
}

/// Convex-splitting derivative: implicit convex part `3u²/8` at `a`,
/// explicit concave part `u⁴/4 - u³/2 - u²/8` at `b`.
pub fn convex_split_f(a: f64, b: f64) -> f64 {
    0.25 * (3.0 * a + 4.0 * b * b * b - 6.0 * b * b - b)
}

/// Explicit part of [`convex_split_f`] (everything that depends on `b`).
pub fn convex_split_explicit(b: f64) -> f64 {
    0.25 * (4.0 * b * b * b - 6.0 * b * b - b)
}

/// `∂f/∂a`.
pub const CONVEX_SPLIT_IMPLICIT_SLOPE: f64 = 0.75;

/// `P(u, n) = h_{r,s}(u) n_+`.
pub fn proliferation(u: f64, n: f64, exps: MobilitySpec) -> f64 {
    mobility_eval(exps, u) * pos(n)
}

/// `(∂P/∂u, ∂P/∂n)`.
pub fn proliferation_derivative(u: f64, n: f64, exps: MobilitySpec) -> (f64, f64) {
    (exps.derivative(u) * pos(n), mobility_eval(exps, u) * dpos(n))
}

#[derive(Debug, Error, PartialEq)]
#[error("{field}: {reason}")]
pub struct ParamError {
    pub field: &'static str,
    pub reason: String,
}

/// Physical and numerical constants of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Interface width ε.
    pub eps: f64,
    /// Nutrient scale δ.
    pub delta: f64,
    pub c_u: f64,
    pub c_n: f64,
    /// Permeability K.
    pub k_perm: f64,
    /// Chemotaxis χ0.
    pub chi0: f64,
    /// Proliferation rate P0.
    pub prolif_rate: f64,
    pub mobility: MobilitySpec,
    /// Exponents `(r, s)` of the proliferation function.
    pub prolif_exps: MobilitySpec,
    pub sigma_u: f64,
    pub sigma_n: f64,
    /// Regularization of the sign function in the stabilization.
    pub eta: f64,
    pub dt: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            eps: 0.1,
            delta: 0.01,
            c_u: 2.8,
            c_n: 2.8e-4,
            k_perm: 1.0,
            chi0: 0.1,
            prolif_rate: 0.5,
            mobility: MobilitySpec::new(1, 1),
            prolif_exps: MobilitySpec::new(1, 1),
            sigma_u: 0.0,
            sigma_n: 0.0,
            eta: 1e-8,
            dt: 0.1,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let check = |field: &'static str, x: f64, strict: bool| -> Result<(), ParamError> {
            if !x.is_finite() {
                return Err(ParamError { field, reason: format!("must be finite, got {x}") });
            }
            if strict && x <= 0.0 {
                return Err(ParamError { field, reason: format!("must be > 0, got {x}") });
            }
            if !strict && x < 0.0 {
                return Err(ParamError { field, reason: format!("must be >= 0, got {x}") });
            }
            Ok(())
        };
        check("eps", self.eps, false)?;
        check("delta", self.delta, true)?;
        check("C_u", self.c_u, true)?;
        check("C_n", self.c_n, true)?;
        check("K_perm", self.k_perm, true)?;
        check("chi0", self.chi0, false)?;
        check("prolif_rate", self.prolif_rate, false)?;
        check("sigma_u", self.sigma_u, false)?;
        check("sigma_n", self.sigma_n, false)?;
        check("eta", self.eta, false)?;
        check("dt", self.dt, true)?;
        for (field, s) in [("mobility", self.mobility), ("prolif_exps", self.prolif_exps)] {
            if s.p < 1 || s.q < 1 {
                return Err(ParamError { field, reason: format!("exponents must be >= 1, got ({}, {})", s.p, s.q) });
            }
        }
        Ok(())
    }
}

/// `μ_n = n/δ - χ0 Π0(Π1h u_prev)`, with the chemotaxis term explicit.
pub fn mu_n_discrete(mesh: &Mesh, n_next: &P0Field, u_prev: &P0Field, params: &ModelParams) -> P0Field {
    let smooth = pi0_pi1h(mesh, u_prev);
    n_next
        .iter()
        .zip(smooth.iter())
        .map(|(n, s)| n / params.delta - params.chi0 * s)
        .collect::<Vec<_>>()
        .into()
}

/// Terms of `E(Π1h u, n)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyParts {
    /// `ε²/2 ∫|∇Π1h u|²`
    pub gradient: f64,
    /// `∫ F(Π1h u)`
    pub potential: f64,
    /// `-χ0 ∫ Π1h u n`
    pub cross: f64,
    /// `∫ n² / (2δ)`
    pub nutrient: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.gradient + self.potential + self.cross + self.nutrient
    }
}

/// `∫_Ω F(g)` for a P1 field `g` (degree-4 rule, exact).
pub fn integrate_potential(mesh: &Mesh, g: &[f64]) -> f64 {
    mesh.triangles
        .iter()
        .zip(&mesh.areas)
        .map(|(t, area)| {
            let v = t.map(|j| g[j]);
            area * DEGREE4.iter().map(|(l, w)| w * potential_f(p1_at(v, *l))).sum::<f64>()
        })
        .sum()
}

/// Energy evaluated at `(Π1h u, n)`.
pub fn energy_parts(mesh: &Mesh, u: &P0Field, n: &P0Field, params: &ModelParams) -> EnergyParts {
    let smooth = pi1h(mesh, u);
    let gradient = 0.5 * params.eps * params.eps * p1_dirichlet_energy(mesh, &smooth);
    let potential = integrate_potential(mesh, &smooth);
    // P1 x P0 is integrated exactly by the element mean of the P1 factor.
    let cross = -params.chi0
        * mesh
            .triangles
            .iter()
            .enumerate()
            .map(|(k, t)| mesh.areas[k] * n[k] * (smooth[t[0]] + smooth[t[1]] + smooth[t[2]]) / 3.0)
            .sum::<f64>();
    let nutrient = n
        .iter()
        .zip(&mesh.areas)
        .map(|(n, a)| a * n * n)
        .sum::<f64>()
        / (2.0 * params.delta);
    EnergyParts { gradient, potential, cross, nutrient }
}

pub fn energy_discrete(mesh: &Mesh, u: &P0Field, n: &P0Field, params: &ModelParams) -> f64 {
    energy_parts(mesh, u, n, params).total()
}
