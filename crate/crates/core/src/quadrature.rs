//! Composite Newton-Cotes rules on uniform grids and the discretized integral
//! operator `G -> (x -> ∫ G(x, y) f(y) dy)`.
//!
//! Weighted sums are always evaluated as `Σ_j w_j * (a_j * b_j)` in ascending
//! `j`, so every route through an integral (direct integration, the assembled
//! operator, one-layer neural operators) produces bit-identical results.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{Grid, Grid1D, Grid2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Trapezoid,
    Simpson,
}

fn weights_1d(grid: &Grid1D, scheme: Scheme) -> Result<Vec<f64>> {
    if !grid.is_uniform() {
        return Err(Error::invalid("quadrature requires a uniform grid"));
    }
    let k = grid.len();
    let h = grid.spacing();
    match scheme {
        Scheme::Trapezoid => Ok((0..k)
            .map(|i| if i == 0 || i == k - 1 { 0.5 * h } else { h })
            .collect()),
        Scheme::Simpson => {
            if k % 2 == 0 {
                return Err(Error::invalid(format!(
                    "Simpson's rule needs an odd node count, got {k}"
                )));
            }
            Ok((0..k)
                .map(|i| {
                    let c = if i == 0 || i == k - 1 {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    c * h / 3.0
                })
                .collect())
        }
    }
}

/// Nodes and weights of a composite rule. 2D weights are outer products.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Grid,
    weights: Vec<f64>,
    scheme: Scheme,
}

impl QuadratureRule {
    pub fn new(nodes: Grid, scheme: Scheme) -> Result<Self> {
        let weights = match &nodes {
            Grid::One(g) => weights_1d(g, scheme)?,
            Grid::Two(g) => {
                let wx = weights_1d(&g.x_grid, scheme)?;
                let wy = weights_1d(&g.y_grid, scheme)?;
                wx.iter()
                    .flat_map(|a| wy.iter().map(move |b| a * b))
                    .collect()
            }
        };
        Ok(Self {
            nodes,
            weights,
            scheme,
        })
    }

    pub fn trapezoid(nodes: Grid) -> Result<Self> {
        Self::new(nodes, Scheme::Trapezoid)
    }

    pub fn nodes(&self) -> &Grid {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `Σ_j w_j v_j` over raw samples.
    pub fn weighted_sum(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "expected {} samples, got {}",
                self.weights.len(),
                values.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(values)
            .fold(0.0, |acc, (w, v)| acc + w * v))
    }

    /// Integral of a field sampled on this rule's nodes.
    pub fn integrate(&self, values: &Field) -> Result<f64> {
        if values.grid() != &self.nodes {
            return Err(Error::invalid("field is not sampled on the quadrature nodes"));
        }
        self.weighted_sum(values.values())
    }

    /// `Σ_j w_j * (a_j * b_j)`, the canonical product integral.
    pub(crate) fn product_sum(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((w, x), y) in self.weights.iter().zip(a).zip(b) {
            acc += w * (x * y);
        }
        acc
    }
}

pub fn quadrature_weights(grid: &Grid, scheme: Scheme) -> Result<QuadratureRule> {
    QuadratureRule::new(grid.clone(), scheme)
}

pub fn integrate(rule: &QuadratureRule, values: &Field) -> Result<f64> {
    rule.integrate(values)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RuleRepr {
    One {
        scheme: Scheme,
        #[serde(rename = "K")]
        k: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
    },
    Two {
        scheme: Scheme,
        #[serde(rename = "K")]
        k: [usize; 2],
        x_points: Vec<f64>,
        y_points: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl Serialize for QuadratureRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match &self.nodes {
            Grid::One(g) => RuleRepr::One {
                scheme: self.scheme,
                k: g.len(),
                points: g.points().to_vec(),
                weights: self.weights.clone(),
            },
            Grid::Two(g) => RuleRepr::Two {
                scheme: self.scheme,
                k: [g.x_grid.len(), g.y_grid.len()],
                x_points: g.x_grid.points().to_vec(),
                y_points: g.y_grid.points().to_vec(),
                weights: self.weights.clone(),
            },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuadratureRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let (nodes, scheme, weights) = match RuleRepr::deserialize(d)? {
            RuleRepr::One {
                scheme,
                k,
                points,
                weights,
            } => {
                if points.len() != k {
                    return Err(D::Error::custom("K does not match point count"));
                }
                let g = Grid1D::from_points(points).map_err(D::Error::custom)?;
                (Grid::One(g), scheme, weights)
            }
            RuleRepr::Two {
                scheme,
                k,
                x_points,
                y_points,
                weights,
            } => {
                if x_points.len() != k[0] || y_points.len() != k[1] {
                    return Err(D::Error::custom("K does not match point count"));
                }
                let gx = Grid1D::from_points(x_points).map_err(D::Error::custom)?;
                let gy = Grid1D::from_points(y_points).map_err(D::Error::custom)?;
                (Grid::Two(Grid2D::new(gx, gy)), scheme, weights)
            }
        };
        let rule = QuadratureRule::new(nodes, scheme).map_err(D::Error::custom)?;
        if rule.weights != weights {
            return Err(D::Error::custom("weights do not match the scheme"));
        }
        Ok(rule)
    }
}

/// Discretized integral operator mapping `vec(G)` (row-major, x outer, y
/// inner) to the stacked solutions `u_n(x_k) = Σ_j w_j f_n(y_j) G(x_k, y_j)`.
///
/// Row `n * K + k` belongs to right-hand side `n` and output node `x_k`.
#[derive(Debug, Clone)]
pub struct IntegralOperatorMatrix {
    x_nodes: Grid1D,
    rule: QuadratureRule,
    rhs: Vec<Vec<f64>>,
    rhs_names: Vec<Option<String>>,
    dense: DMatrix<f64>,
}

impl IntegralOperatorMatrix {
    pub fn x_nodes(&self) -> &Grid1D {
        &self.x_nodes
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn y_nodes(&self) -> &Grid1D {
        self.rule.nodes().as_1d().expect("1D rule")
    }

    pub fn rhs_names(&self) -> &[Option<String>] {
        &self.rhs_names
    }

    pub fn rhs(&self) -> &[Vec<f64>] {
        &self.rhs
    }

    pub fn n_rhs(&self) -> usize {
        self.rhs.len()
    }

    pub fn nrows(&self) -> usize {
        self.rhs.len() * self.x_nodes.len()
    }

    pub fn ncols(&self) -> usize {
        self.x_nodes.len() * self.rule.len()
    }

    /// The product grid `x_nodes × y_nodes` that `vec(G)` lives on.
    pub fn kernel_grid(&self) -> Grid2D {
        Grid2D::new(self.x_nodes.clone(), self.y_nodes().clone())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.dense
    }

    /// `A · vec(G)` evaluated row by row with the canonical summation order.
    pub fn apply(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.ncols() {
            return Err(Error::invalid(format!(
                "vec(G) has length {}, operator expects {}",
                g.len(),
                self.ncols()
            )));
        }
        let ny = self.rule.len();
        let mut out = Vec::with_capacity(self.nrows());
        for f in &self.rhs {
            for k in 0..self.x_nodes.len() {
                out.push(self.rule.product_sum(f, &g[k * ny..(k + 1) * ny]));
            }
        }
        Ok(out)
    }

    pub fn apply_dense(&self, g: &DVector<f64>) -> DVector<f64> {
        &self.dense * g
    }
}

pub fn assemble_integral_operator(
    rhs_functions: &[Field],
    rule: &QuadratureRule,
    x_nodes: &Grid1D,
) -> Result<IntegralOperatorMatrix> {
    if rule.nodes().as_1d().is_none() {
        return Err(Error::invalid("integral operator needs a 1D quadrature rule"));
    }
    for (n, f) in rhs_functions.iter().enumerate() {
        if f.grid() != rule.nodes() {
            return Err(Error::invalid(format!(
                "right-hand side {n} is not sampled on the quadrature nodes"
            )));
        }
    }
    let kx = x_nodes.len();
    let ny = rule.len();
    let n = rhs_functions.len();
    let mut dense = DMatrix::zeros(n * kx, kx * ny);
    for (ni, f) in rhs_functions.iter().enumerate() {
        for k in 0..kx {
            for (j, (w, fv)) in rule.weights().iter().zip(f.values()).enumerate() {
                dense[(ni * kx + k, k * ny + j)] = w * fv;
            }
        }
    }
    Ok(IntegralOperatorMatrix {
        x_nodes: x_nodes.clone(),
        rule: rule.clone(),
        rhs: rhs_functions.iter().map(|f| f.values().to_vec()).collect(),
        rhs_names: rhs_functions.iter().map(|f| f.name().map(String::from)).collect(),
        dense,
    })
}
