use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::Grid1D;
use crate::quadrature::QuadratureRule;

/// `(-d²/dx² - λ0²) u = f` on `(0, 1)` with `u(0) = u(1) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HelmholtzRepr", into = "HelmholtzRepr")]
pub struct HelmholtzProblem {
    lambda0: f64,
    denom: f64,
}

#[derive(Serialize, Deserialize)]
struct HelmholtzRepr {
    lambda0: f64,
}

impl TryFrom<HelmholtzRepr> for HelmholtzProblem {
    type Error = Error;
    fn try_from(r: HelmholtzRepr) -> Result<Self> {
        Self::new(r.lambda0)
    }
}

impl From<HelmholtzProblem> for HelmholtzRepr {
    fn from(p: HelmholtzProblem) -> Self {
        HelmholtzRepr { lambda0: p.lambda0 }
    }
}

impl HelmholtzProblem {
    /// Fails with [`Error::Resonance`] when `|sin λ0| < 1e-12`.
    pub fn new(lambda0: f64) -> Result<Self> {
        if !(lambda0 > 0.0) || !lambda0.is_finite() {
            return Err(Error::invalid(format!("lambda0 must be positive, got {lambda0}")));
        }
        let sine = lambda0.sin();
        if sine.abs() < 1e-12 {
            return Err(Error::Resonance { lambda0, sine });
        }
        Ok(Self {
            lambda0,
            denom: lambda0 * sine,
        })
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    /// Closed-form Green's function. On the diagonal only the `y >= x`
    /// branch is active, which keeps `G` continuous there.
    pub fn greens_function(&self, x: f64, y: f64) -> f64 {
        let l = self.lambda0;
        let num = if y >= x {
            (l * x).sin() * (l * (1.0 - y)).sin()
        } else {
            (l * (1.0 - x)).sin() * (l * y).sin()
        };
        num / self.denom
    }

    /// `G` on the product grid `x_nodes × y_nodes`, row-major.
    pub fn greens_matrix(&self, x_nodes: &Grid1D, y_nodes: &Grid1D) -> Vec<f64> {
        x_nodes
            .points()
            .iter()
            .flat_map(|&x| y_nodes.points().iter().map(move |&y| (x, y)))
            .map(|(x, y)| self.greens_function(x, y))
            .collect()
    }
}

pub fn greens_function(problem: &HelmholtzProblem, x: f64, y: f64) -> f64 {
    problem.greens_function(x, y)
}

/// Quadrature solution `u(x_k) = Σ_j w_j G(x_k, y_j) f(y_j)` on the rule's nodes.
pub fn solve_helmholtz(problem: &HelmholtzProblem, f: &Field, rule: &QuadratureRule) -> Result<Field> {
    let nodes = rule
        .nodes()
        .as_1d()
        .ok_or_else(|| Error::invalid("Helmholtz problem is one-dimensional"))?;
    if f.grid() != rule.nodes() {
        return Err(Error::invalid("right-hand side is not sampled on the quadrature nodes"));
    }
    let ys = nodes.points();
    let values = ys
        .iter()
        .map(|&x| {
            let g: Vec<f64> = ys.iter().map(|&y| problem.greens_function(x, y)).collect();
            rule.product_sum(f.values(), &g)
        })
        .collect();
    Field::new(rule.nodes().clone(), values)
}

/// Shifted Legendre polynomial `P_n(2x - 1)` via Bonnet's recurrence.
pub fn legendre_rhs(n: usize, grid: &Grid1D) -> Field {
    let values = grid
        .points()
        .iter()
        .map(|&x| {
            let t = 2.0 * x - 1.0;
            let (mut prev, mut cur) = (1.0, t);
            if n == 0 {
                return 1.0;
            }
            for k in 1..n {
                let k = k as f64;
                let next = ((2.0 * k + 1.0) * t * cur - k * prev) / (k + 1.0);
                prev = cur;
                cur = next;
            }
            cur
        })
        .collect();
    Field::new(crate::grid::Grid::One(grid.clone()), values)
        .expect("Legendre samples are finite")
        .with_name(format!("legendre_{n}"))
}
