use std::borrow::Cow;

use nalgebra::DMatrix;

use crate::dataset::OperatorSample;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::Grid;
use crate::quadrature::QuadratureRule;

use super::kernel::{backprop_block, eval_block, PointSet};
use super::{Architecture, NeuralOperatorParams};

/// Channel states of one forward pass, each row-major `nodes × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub channels: usize,
    /// Lifted input `v_0`.
    pub lifted: Vec<f64>,
    /// Pre-activations of layers `1..=L`.
    pub pre_activations: Vec<Vec<f64>>,
    /// `v_1..v_L`.
    pub activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// Input of the last linear layer, `v_L`.
    pub fn features(&self) -> &[f64] {
        self.activations.last().expect("depth >= 1")
    }

    pub fn nodes(&self) -> usize {
        self.output.len()
    }
}

fn check_fields(arch: &Architecture, lambda: Option<&Field>, f: &Field, rule: &QuadratureRule) -> Result<()> {
    if rule.nodes().dim() != arch.spatial_dim {
        return Err(Error::invalid(format!(
            "architecture is {}D but the rule is {}D",
            arch.spatial_dim,
            rule.nodes().dim()
        )));
    }
    if f.grid() != rule.nodes() {
        return Err(Error::invalid("input field is not sampled on the quadrature nodes"));
    }
    match (arch.uses_coefficient, lambda) {
        (true, Some(l)) if l.grid() != rule.nodes() => {
            Err(Error::invalid("coefficient field is not sampled on the quadrature nodes"))
        }
        (true, None) => Err(Error::invalid("this operator needs a coefficient field")),
        (false, Some(_)) => Err(Error::invalid("this operator takes no coefficient field")),
        _ => Ok(()),
    }
}

/// Kernel-network inputs per node: coordinates, then `λ` if used.
fn kernel_features(arch: &Architecture, grid: &Grid, lam: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..grid.len() {
        out.extend(grid.coords(i));
        if arch.uses_coefficient {
            out.push(arch.normalize_coefficient(lam(i)));
        }
    }
    out
}

/// Lift inputs per node: `f`, `λ` if used, coordinates if enabled.
fn lift_features(arch: &Architecture, grid: &Grid, f: &[f64], lam: Option<&[f64]>) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len() * arch.lift_input_dim());
    for (i, fi) in f.iter().enumerate() {
        out.push(*fi);
        if let Some(l) = lam {
            out.push(arch.normalize_coefficient(l[i]));
        }
        if arch.lift_coordinates {
            out.extend(grid.coords(i));
        }
    }
    out
}

/// How kernel values are shared across a batch. Without a coefficient one
/// kernel serves every sample; with few distinct coefficient values the
/// kernel is tabulated per pair of values.
enum Plan {
    Shared,
    Table { levels: Vec<f64>, classes: Vec<Vec<usize>> },
    PerSample,
}

struct Kernels {
    plan: Plan,
    /// Kernel network inputs for rows and columns of each block.
    features: Vec<(Vec<f64>, Vec<f64>)>,
    blocks: Vec<Vec<f64>>,
    n: usize,
}

impl Kernels {
    fn build(p: &NeuralOperatorParams, grid: &Grid, lams: &[Option<&[f64]>]) -> Self {
        let arch = p.architecture();
        let n = grid.len();
        let plan = if !arch.uses_coefficient {
            Plan::Shared
        } else {
            let mut levels: Vec<f64> = Vec::new();
            for l in lams.iter().flatten() {
                for v in l.iter() {
                    if !levels.contains(v) {
                        levels.push(*v);
                    }
                    if levels.len() * levels.len() >= lams.len() {
                        break;
                    }
                }
            }
            if levels.len() * levels.len() < lams.len() {
                levels.sort_by(f64::total_cmp);
                let classes = lams
                    .iter()
                    .map(|l| {
                        let l = l.expect("checked");
                        l.iter()
                            .map(|v| levels.iter().position(|x| x == v).expect("level"))
                            .collect()
                    })
                    .collect();
                Plan::Table { levels, classes }
            } else {
                Plan::PerSample
            }
        };
        let features: Vec<(Vec<f64>, Vec<f64>)> = match &plan {
            Plan::Shared => {
                let f = kernel_features(arch, grid, |_| 0.0);
                vec![(f.clone(), f)]
            }
            Plan::Table { levels, .. } => {
                let mut out = Vec::new();
                for a in levels {
                    for b in levels {
                        out.push((
                            kernel_features(arch, grid, |_| *a),
                            kernel_features(arch, grid, |_| *b),
                        ));
                    }
                }
                out
            }
            Plan::PerSample => lams
                .iter()
                .map(|l| {
                    let l = l.expect("checked");
                    let f = kernel_features(arch, grid, |i| l[i]);
                    (f.clone(), f)
                })
                .collect(),
        };
        let blocks = features
            .iter()
            .map(|(r, c)| eval_block(p, &PointSet { features: r, n }, &PointSet { features: c, n }))
            .collect();
        Self {
            plan,
            features,
            blocks,
            n,
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.blocks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                layer: "kernel network".into(),
            });
        }
        Ok(())
    }

    fn for_sample(&self, s: usize) -> Cow<'_, [f64]> {
        let n = self.n;
        match &self.plan {
            Plan::Shared => Cow::Borrowed(&self.blocks[0]),
            Plan::PerSample => Cow::Borrowed(&self.blocks[s]),
            Plan::Table { levels, classes } => {
                let m = levels.len();
                let cls = &classes[s];
                let mut k = vec![0.0; n * n];
                for i in 0..n {
                    let row = &mut k[i * n..(i + 1) * n];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = self.blocks[cls[i] * m + cls[j]][i * n + j];
                    }
                }
                Cow::Owned(k)
            }
        }
    }

    fn accumulate(&self, s: usize, dk: &[f64], dblocks: &mut [Vec<f64>]) {
        let n = self.n;
        match &self.plan {
            Plan::Shared => add_into(&mut dblocks[0], dk),
            Plan::PerSample => add_into(&mut dblocks[s], dk),
            Plan::Table { levels, classes } => {
                let m = levels.len();
                let cls = &classes[s];
                for i in 0..n {
                    for j in 0..n {
                        dblocks[cls[i] * m + cls[j]][i * n + j] += dk[i * n + j];
                    }
                }
            }
        }
    }

    fn backprop(&self, p: &NeuralOperatorParams, dblocks: &[Vec<f64>], grad: &mut [f64]) {
        for ((r, c), d) in self.features.iter().zip(dblocks) {
            if d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let rows = PointSet { features: r, n: self.n };
            let cols = PointSet { features: c, n: self.n };
            backprop_block(p, &rows, &cols, d, grad);
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// `M(j, i) = κ(x_i, y_j) w_j`, so that a channel-major `c × n` field times
/// `M` applies the integral operator to every channel. Used for `c > 1`;
/// single-channel operators keep the plain ascending quadrature sum.
fn weighted_kernel(kappa: &[f64], w: &[f64]) -> DMatrix<f64> {
    let n = w.len();
    let mut m = kappa.to_vec();
    for row in m.chunks_exact_mut(n) {
        for (k, wj) in row.iter_mut().zip(w) {
            *k *= wj;
        }
    }
    DMatrix::from_vec(n, n, m)
}

fn sample_forward(p: &NeuralOperatorParams, kappa: &[f64], w: &[f64], f: &[f64], lift_in: &[f64]) -> Result<ForwardTrace> {
    let arch = p.architecture();
    let layout = p.layout();
    let vals = p.values();
    let (n, c) = (f.len(), arch.channels);

    let lifted = match layout.lift {
        Some(s) => {
            let mut v0 = vec![0.0; n * c];
            for i in 0..n {
                let feat = &lift_in[i * s.cols..(i + 1) * s.cols];
                for ch in 0..c {
                    let row = &vals[s.w + ch * s.cols..s.w + (ch + 1) * s.cols];
                    let dot = row.iter().zip(feat).fold(0.0, |acc, (a, b)| acc + a * b);
                    v0[i * c + ch] = dot + vals[s.b + ch];
                }
            }
            v0
        }
        None => f.to_vec(),
    };

    let weighted = (c > 1).then(|| weighted_kernel(kappa, w));
    let mut pre_activations = Vec::with_capacity(arch.depth);
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(arch.depth);
    for l in 1..=arch.depth {
        let v = activations.last().unwrap_or(&lifted);
        let mut pre = vec![0.0; n * c];
        match &weighted {
            Some(m) => {
                let vt = DMatrix::from_column_slice(c, n, v);
                let mut out = DMatrix::from_column_slice(c, n, &pre);
                out.gemm(1.0, &vt, m, 0.0);
                pre.copy_from_slice(out.as_slice());
            }
            None => {
                for i in 0..n {
                    let acc = &mut pre[i * c..(i + 1) * c];
                    let krow = &kappa[i * n..(i + 1) * n];
                    for j in 0..n {
                        let (k, wj) = (krow[j], w[j]);
                        let vj = &v[j * c..(j + 1) * c];
                        for ch in 0..c {
                            acc[ch] += wj * (k * vj[ch]);
                        }
                    }
                }
            }
        }
        if let Some(wl) = p.skip(l) {
            for i in 0..n {
                let vi = &v[i * c..(i + 1) * c];
                for ch in 0..c {
                    let row = &wl[ch * c..(ch + 1) * c];
                    let s = row.iter().zip(vi).fold(0.0, |acc, (a, b)| acc + a * b);
                    pre[i * c + ch] = s + pre[i * c + ch];
                }
            }
        }
        let post: Vec<f64> = pre.iter().map(|x| arch.layer_activation.apply(*x)).collect();
        if post.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow {
                layer: format!("layer {l}"),
            });
        }
        pre_activations.push(pre);
        activations.push(post);
    }

    let v_last = activations.last().expect("depth >= 1");
    let output = match p.projection() {
        Some((pw, pb)) => (0..n)
            .map(|i| {
                let vi = &v_last[i * c..(i + 1) * c];
                pw.iter().zip(vi).fold(0.0, |acc, (a, b)| acc + a * b) + pb
            })
            .collect(),
        None => v_last.clone(),
    };
    if output.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericOverflow {
            layer: "projection".into(),
        });
    }
    Ok(ForwardTrace {
        channels: c,
        lifted,
        pre_activations,
        activations,
        output,
    })
}

/// Accumulates parameter gradients into `grad` and kernel gradients into
/// `dk` for the cotangent `dout` of the output.
#[allow(clippy::too_many_arguments)]
fn sample_backward(
    p: &NeuralOperatorParams,
    kappa: &[f64],
    w: &[f64],
    lift_in: &[f64],
    trace: &ForwardTrace,
    dout: &[f64],
    grad: &mut [f64],
    dk: &mut [f64],
) {
    let arch = p.architecture();
    let layout = p.layout();
    let vals = p.values();
    let (n, c) = (dout.len(), arch.channels);

    let weighted = (c > 1).then(|| weighted_kernel(kappa, w));
    let mut outer = DMatrix::zeros(if c > 1 { n } else { 0 }, if c > 1 { n } else { 0 });
    let mut dv = vec![0.0; n * c];
    match layout.projection {
        Some(s) => {
            let v_last = trace.features();
            for i in 0..n {
                for ch in 0..c {
                    grad[s.w + ch] += dout[i] * v_last[i * c + ch];
                    dv[i * c + ch] = dout[i] * vals[s.w + ch];
                }
                grad[s.b] += dout[i];
            }
        }
        None => dv.copy_from_slice(dout),
    }

    for l in (1..=arch.depth).rev() {
        let v_prev = if l == 1 { &trace.lifted } else { &trace.activations[l - 2] };
        let g: Vec<f64> = dv
            .iter()
            .zip(&trace.pre_activations[l - 1])
            .map(|(d, z)| d * arch.layer_activation.derivative(*z))
            .collect();
        let mut dprev = vec![0.0; n * c];
        if arch.skip {
            let off = layout.skips[l - 1];
            for i in 0..n {
                for ch in 0..c {
                    let gi = g[i * c + ch];
                    for d in 0..c {
                        grad[off + ch * c + d] += gi * v_prev[i * c + d];
                        dprev[i * c + d] += vals[off + ch * c + d] * gi;
                    }
                }
            }
        }
        match &weighted {
            Some(m) => {
                let gt = DMatrix::from_column_slice(c, n, &g);
                let vt = DMatrix::from_column_slice(c, n, v_prev);
                let back = m * gt.transpose();
                for (j, dj) in dprev.chunks_exact_mut(c).enumerate() {
                    for (ch, d) in dj.iter_mut().enumerate() {
                        *d += back[(j, ch)];
                    }
                }
                outer.gemm_tr(1.0, &vt, &gt, 0.0);
                for (dkrow, orow) in dk.chunks_exact_mut(n).zip(outer.as_slice().chunks_exact(n)) {
                    for ((d, o), wj) in dkrow.iter_mut().zip(orow).zip(w) {
                        *d += wj * o;
                    }
                }
            }
            None => {
                for i in 0..n {
                    let gi = &g[i * c..(i + 1) * c];
                    let krow = &kappa[i * n..(i + 1) * n];
                    let dkrow = &mut dk[i * n..(i + 1) * n];
                    for j in 0..n {
                        let vj = &v_prev[j * c..(j + 1) * c];
                        let s = gi.iter().zip(vj).fold(0.0, |acc, (a, b)| acc + a * b);
                        dkrow[j] += w[j] * s;
                        let coef = w[j] * krow[j];
                        let dj = &mut dprev[j * c..(j + 1) * c];
                        for ch in 0..c {
                            dj[ch] += coef * gi[ch];
                        }
                    }
                }
            }
        }
        dv = dprev;
    }

    if let Some(s) = layout.lift {
        for i in 0..n {
            let feat = &lift_in[i * s.cols..(i + 1) * s.cols];
            for ch in 0..c {
                let d = dv[i * c + ch];
                for (k, x) in feat.iter().enumerate() {
                    grad[s.w + ch * s.cols + k] += d * x;
                }
                grad[s.b + ch] += d;
            }
        }
    }
}

/// Applies the operator to `f` (and `λ`) on the rule's nodes.
pub fn forward(
    params: &NeuralOperatorParams,
    lambda: Option<&Field>,
    f: &Field,
    rule: &QuadratureRule,
) -> Result<(Field, ForwardTrace)> {
    let arch = params.architecture();
    check_fields(arch, lambda, f, rule)?;
    let lam = lambda.map(Field::values);
    let kernels = Kernels::build(params, rule.nodes(), &[lam]);
    kernels.check_finite()?;
    let lift_in = lift_features(arch, rule.nodes(), f.values(), lam);
    let trace = sample_forward(params, &kernels.for_sample(0), rule.weights(), f.values(), &lift_in)?;
    let out = Field::new(rule.nodes().clone(), trace.output.clone())?;
    Ok((out, trace))
}

/// Forward passes for a batch of samples sharing the rule's grid.
pub(crate) fn forward_batch(
    params: &NeuralOperatorParams,
    samples: &[OperatorSample],
    rule: &QuadratureRule,
) -> Result<Vec<ForwardTrace>> {
    let arch = params.architecture();
    for s in samples {
        check_fields(arch, s.coefficient.as_ref(), &s.forcing, rule)?;
    }
    let lams: Vec<Option<&[f64]>> = samples.iter().map(|s| s.coefficient.as_ref().map(Field::values)).collect();
    let kernels = Kernels::build(params, rule.nodes(), &lams);
    kernels.check_finite()?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let lift_in = lift_features(arch, rule.nodes(), s.forcing.values(), lams[i]);
            sample_forward(params, &kernels.for_sample(i), rule.weights(), s.forcing.values(), &lift_in)
        })
        .collect()
}

/// Forward pass on another grid; inputs not already on `fine_rule`'s nodes
/// are interpolated onto them.
pub fn evaluate_on_grid(
    params: &NeuralOperatorParams,
    lambda: Option<&Field>,
    f: &Field,
    fine_rule: &QuadratureRule,
) -> Result<Field> {
    Ok(evaluate_on_grid_with_trace(params, lambda, f, fine_rule)?.0)
}

/// [`evaluate_on_grid`] together with the forward trace.
pub fn evaluate_on_grid_with_trace(
    params: &NeuralOperatorParams,
    lambda: Option<&Field>,
    f: &Field,
    fine_rule: &QuadratureRule,
) -> Result<(Field, ForwardTrace)> {
    let nodes = fine_rule.nodes();
    if f.grid().dim() != nodes.dim() || lambda.is_some_and(|l| l.grid().dim() != nodes.dim()) {
        return Err(Error::invalid("input grids do not match the evaluation grid dimension"));
    }
    let f = f.interpolate(nodes)?;
    let lambda = lambda.map(|l| l.interpolate(nodes)).transpose()?;
    forward(params, lambda.as_ref(), &f, fine_rule)
}

/// `g_θ(x_i, y_j)` on a product of node sets for operators without a
/// coefficient, row-major.
pub fn kernel_on_grid(params: &NeuralOperatorParams, x: &Grid, y: &Grid) -> Result<Vec<f64>> {
    let arch = params.architecture();
    if arch.uses_coefficient {
        return Err(Error::invalid("kernel depends on a coefficient field"));
    }
    if x.dim() != arch.spatial_dim || y.dim() != arch.spatial_dim {
        return Err(Error::invalid("grid dimension does not match the architecture"));
    }
    let (rf, cf) = (x.coordinate_table(), y.coordinate_table());
    Ok(eval_block(
        params,
        &PointSet { features: &rf, n: x.len() },
        &PointSet { features: &cf, n: y.len() },
    ))
}

fn objective(
    params: &NeuralOperatorParams,
    samples: &[OperatorSample],
    rule: &QuadratureRule,
    tau: f64,
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if samples.is_empty() {
        return Err(Error::invalid("loss needs at least one sample"));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid("prior precision must be nonnegative"));
    }
    let arch = params.architecture();
    for s in samples {
        check_fields(arch, s.coefficient.as_ref(), &s.forcing, rule)?;
        if s.solution.grid() != rule.nodes() {
            return Err(Error::invalid(format!("target of {} is not on the quadrature nodes", s.id)));
        }
    }
    let total: usize = samples.iter().map(OperatorSample::observed_count).sum();
    if total == 0 {
        return Err(Error::invalid("no observed output nodes"));
    }
    let lams: Vec<Option<&[f64]>> = samples.iter().map(|s| s.coefficient.as_ref().map(Field::values)).collect();
    let kernels = Kernels::build(params, rule.nodes(), &lams);
    kernels.check_finite()?;
    let n = rule.len();
    let mut grad = with_gradient.then(|| vec![0.0; params.len()]);
    let mut dblocks: Vec<Vec<f64>> = if with_gradient {
        kernels.blocks.iter().map(|b| vec![0.0; b.len()]).collect()
    } else {
        Vec::new()
    };
    let mut sse = 0.0;
    for (si, s) in samples.iter().enumerate() {
        let kappa = kernels.for_sample(si);
        let lift_in = lift_features(arch, rule.nodes(), s.forcing.values(), lams[si]);
        let trace = sample_forward(params, &kappa, rule.weights(), s.forcing.values(), &lift_in)?;
        let target = s.solution.values();
        let mut dout = vec![0.0; n];
        let mut add = |i: usize| {
            let r = trace.output[i] - target[i];
            sse += r * r;
            dout[i] = 2.0 * r / total as f64;
        };
        match &s.mask {
            Some(m) => m.iter().for_each(|&i| add(i)),
            None => (0..n).for_each(add),
        }
        if let Some(g) = grad.as_mut() {
            let mut dk = vec![0.0; n * n];
            sample_backward(params, &kappa, rule.weights(), &lift_in, &trace, &dout, g, &mut dk);
            kernels.accumulate(si, &dk, &mut dblocks);
        }
    }
    let value = sse / total as f64 + 0.5 * tau * params.norm_squared();
    if let Some(g) = grad.as_mut() {
        kernels.backprop(params, &dblocks, g);
        for (gi, v) in g.iter_mut().zip(params.values()) {
            *gi += tau * v;
        }
    }
    Ok((value, grad))
}

/// Mean squared error over observed nodes plus `τ/2 ‖Θ‖²`.
pub fn loss(params: &NeuralOperatorParams, samples: &[OperatorSample], rule: &QuadratureRule, tau: f64) -> Result<f64> {
    Ok(objective(params, samples, rule, tau, false)?.0)
}

/// Loss and its gradient, shaped like the parameters.
pub fn gradient(
    params: &NeuralOperatorParams,
    samples: &[OperatorSample],
    rule: &QuadratureRule,
    tau: f64,
) -> Result<(f64, NeuralOperatorParams)> {
    let (value, g) = objective(params, samples, rule, tau, true)?;
    let mut out = params.clone();
    out.values_mut().copy_from_slice(&g.expect("requested"));
    Ok((value, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{darcy_dataset, helmholtz_dataset, DarcyDataSpec};
    use crate::grid::Grid1D;
    use crate::operator::{train_map, Activation, Schedule};
    use crate::pde::{legendre_rhs, solve_helmholtz, CoefficientSpec, HelmholtzProblem};
    use crate::quadrature::{assemble_integral_operator, Scheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rule1(k: usize) -> QuadratureRule {
        QuadratureRule::new(Grid::One(Grid1D::uniform(k).unwrap()), Scheme::Trapezoid).unwrap()
    }

    fn rule2(k: usize) -> QuadratureRule {
        QuadratureRule::new(crate::grid::make_uniform_grid(k, 2).unwrap(), Scheme::Trapezoid).unwrap()
    }

    fn small_darcy(n: usize, k: usize) -> Vec<OperatorSample> {
        let spec = DarcyDataSpec {
            n_samples: n,
            seed: 3,
            grid_size: k,
            solve_size: k,
            coefficient: CoefficientSpec::default(),
        };
        darcy_dataset(&spec).unwrap().samples().to_vec()
    }

    fn small_darcy_arch() -> Architecture {
        Architecture::darcy(vec![6, 5], 3, 2, (3.0, 12.0))
    }

    #[test]
    fn one_layer_matches_assembled_operator_bitwise() {
        let rule = rule1(17);
        let p = NeuralOperatorParams::init(Architecture::one_layer_linear(1, vec![8, 8]), 0).unwrap();
        let nodes = rule.nodes().as_1d().unwrap();
        let g = kernel_on_grid(&p, rule.nodes(), rule.nodes()).unwrap();
        for n in 0..4 {
            let f = legendre_rhs(n, nodes);
            let (u, _) = forward(&p, None, &f, &rule).unwrap();
            let op = assemble_integral_operator(std::slice::from_ref(&f), &rule, nodes).unwrap();
            let expected = op.apply(&g).unwrap();
            for (a, b) in u.values().iter().zip(&expected) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn true_kernel_reproduces_quadrature_solution_bitwise() {
        let rule = rule1(17);
        let nodes = rule.nodes().as_1d().unwrap();
        let problem = HelmholtzProblem::new(4.5).unwrap();
        let g = problem.greens_matrix(nodes, nodes);
        let p = NeuralOperatorParams::zeros(Architecture::one_layer_linear(1, vec![])).unwrap();
        let f = legendre_rhs(3, nodes);
        let trace = sample_forward(&p, &g, rule.weights(), f.values(), &[]).unwrap();
        let u = solve_helmholtz(&problem, &f, &rule).unwrap();
        for (a, b) in trace.output.iter().zip(u.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut arch = small_darcy_arch();
        arch.uses_coefficient = false;
        arch.lift_coordinates = false;
        let p = NeuralOperatorParams::init(arch, 4).unwrap();
        let rule = rule2(5);
        let (u, trace) = forward(&p, None, &Field::zeros(rule.nodes().clone()), &rule).unwrap();
        assert!(u.values().iter().all(|v| *v == 0.0));
        assert!(trace.features().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let rule = rule1(9);
        let p = NeuralOperatorParams::init(Architecture::one_layer_linear(1, vec![4]), 0).unwrap();
        let wrong = Field::zeros(Grid::One(Grid1D::uniform(5).unwrap()));
        assert!(matches!(forward(&p, None, &wrong, &rule), Err(Error::InvalidArgument(_))));
        let f = Field::zeros(rule.nodes().clone());
        assert!(forward(&p, Some(&f), &f, &rule).is_err());
        let d = NeuralOperatorParams::init(small_darcy_arch(), 0).unwrap();
        let r2 = rule2(5);
        assert!(forward(&d, None, &Field::zeros(r2.nodes().clone()), &r2).is_err());
    }

    #[test]
    fn overflow_is_reported_with_layer() {
        let rule = rule1(9);
        let mut p = NeuralOperatorParams::zeros(Architecture::one_layer_linear(1, vec![])).unwrap();
        p.values_mut()[2] = 1e300;
        let f = Field::constant(rule.nodes().clone(), 1e300);
        match forward(&p, None, &f, &rule) {
            Err(Error::NumericOverflow { layer }) => assert_eq!(layer, "layer 1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loss_on_two_point_toy_matches_hand_arithmetic() {
        // g(x, y) = a x + b y + c, trapezoid weights (1/2, 1/2) on {0, 1}
        let (a, b, c) = (0.5, -1.5, 0.25);
        let p = NeuralOperatorParams::from_values(Architecture::one_layer_linear(1, vec![]), vec![a, b, c]).unwrap();
        let rule = rule1(2);
        let f = Field::new(rule.nodes().clone(), vec![2.0, -1.0]).unwrap();
        let target = Field::new(rule.nodes().clone(), vec![0.1, 0.3]).unwrap();
        let sample = OperatorSample {
            id: "toy".into(),
            forcing: f,
            coefficient: None,
            solution: target,
            mask: None,
        };
        let g = |x: f64, y: f64| a * x + b * y + c;
        let u0 = 0.5 * g(0.0, 0.0) * 2.0 + 0.5 * g(0.0, 1.0) * -1.0;
        let u1 = 0.5 * g(1.0, 0.0) * 2.0 + 0.5 * g(1.0, 1.0) * -1.0;
        let mse = ((u0 - 0.1_f64).powi(2) + (u1 - 0.3_f64).powi(2)) / 2.0;
        let tau = 0.2;
        let reg = 0.5 * tau * (a * a + b * b + c * c);
        let l = loss(&p, std::slice::from_ref(&sample), &rule, tau).unwrap();
        assert!((l - (mse + reg)).abs() < 1e-15);
        let l2 = loss(&p, std::slice::from_ref(&sample), &rule, 2.0 * tau).unwrap();
        let l0 = loss(&p, std::slice::from_ref(&sample), &rule, 0.0).unwrap();
        assert_eq!(l2 - l0, 2.0 * (l - l0));
        assert!(loss(&p, &[], &rule, tau).is_err());
    }

    #[test]
    fn exact_fit_leaves_only_regularizer() {
        let rule = rule2(5);
        let p = NeuralOperatorParams::init(small_darcy_arch(), 2).unwrap();
        let mut samples = small_darcy(3, 5);
        for s in &mut samples {
            let (u, _) = forward(&p, s.coefficient.as_ref(), &s.forcing, &rule).unwrap();
            s.solution = u;
        }
        let tau = 0.3;
        let l = loss(&p, &samples, &rule, tau).unwrap();
        assert_eq!(l, 0.5 * tau * p.norm_squared());
        let (_, g) = gradient(&p, &samples, &rule, tau).unwrap();
        for (gi, v) in g.values().iter().zip(p.values()) {
            assert_eq!(*gi, tau * v);
        }
    }

    fn check_gradient(p: &NeuralOperatorParams, samples: &[OperatorSample], rule: &QuadratureRule, coords: usize, seed: u64) {
        let tau = 1e-3;
        let (_, g) = gradient(p, samples, rule, tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..coords {
            let idx = rng.random_range(0..p.len());
            let h = 1e-5;
            let mut plus = p.clone();
            plus.values_mut()[idx] += h;
            let mut minus = p.clone();
            minus.values_mut()[idx] -= h;
            let fd = (loss(&plus, samples, rule, tau).unwrap() - loss(&minus, samples, rule, tau).unwrap()) / (2.0 * h);
            let an = g.values()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences_one_layer() {
        let rule = rule1(9);
        let ds = helmholtz_dataset(&HelmholtzProblem::new(4.5).unwrap(), &[0, 1, 2], &rule).unwrap();
        let p = NeuralOperatorParams::init(Architecture::one_layer_linear(1, vec![6, 6]), 1).unwrap();
        check_gradient(&p, ds.samples(), &rule, 50, 10);
    }

    #[test]
    fn gradient_matches_finite_differences_deep() {
        let rule = rule2(5);
        let mut arch = small_darcy_arch();
        arch.layer_activation = Activation::Gelu;
        let p = NeuralOperatorParams::init(arch, 5).unwrap();
        // five samples tabulate the kernel, one sample evaluates it directly
        let samples = small_darcy(5, 5);
        check_gradient(&p, &samples, &rule, 50, 11);
        check_gradient(&p, &samples[..1], &rule, 30, 12);
        let relu = NeuralOperatorParams::init(small_darcy_arch(), 5).unwrap();
        let masked: Vec<OperatorSample> = samples
            .iter()
            .cloned()
            .map(|mut s| {
                s.mask = Some(vec![6, 12]);
                s
            })
            .collect();
        check_gradient(&relu, &masked, &rule, 30, 13);
    }

    #[test]
    fn kernel_plans_agree() {
        let rule = rule2(5);
        let p = NeuralOperatorParams::init(small_darcy_arch(), 6).unwrap();
        let samples = small_darcy(6, 5);
        let batch = loss(&p, &samples, &rule, 0.0).unwrap();
        let single: f64 = samples.iter().map(|s| loss(&p, std::slice::from_ref(s), &rule, 0.0).unwrap()).sum::<f64>() / 6.0;
        assert!((batch - single).abs() < 1e-12 * batch.abs().max(1.0));
        let traces = forward_batch(&p, &samples, &rule).unwrap();
        for (s, t) in samples.iter().zip(&traces) {
            let (u, _) = forward(&p, s.coefficient.as_ref(), &s.forcing, &rule).unwrap();
            for (a, b) in u.values().iter().zip(&t.output) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluation_on_training_grid_is_forward() {
        let rule = rule2(5);
        let p = NeuralOperatorParams::init(small_darcy_arch(), 7).unwrap();
        let s = &small_darcy(1, 5)[0];
        let (u, _) = forward(&p, s.coefficient.as_ref(), &s.forcing, &rule).unwrap();
        let e = evaluate_on_grid(&p, s.coefficient.as_ref(), &s.forcing, &rule).unwrap();
        assert_eq!(u, e);
    }

    #[test]
    fn constant_fields_agree_across_resolutions() {
        let mut arch = small_darcy_arch();
        arch.layer_activation = Activation::Gelu;
        let p = NeuralOperatorParams::init(arch, 8).unwrap();
        let eval = |k: usize| {
            let rule = rule2(k);
            let one = Field::constant(rule.nodes().clone(), 1.0);
            let lam = Field::constant(rule.nodes().clone(), 12.0);
            evaluate_on_grid(&p, Some(&lam), &one, &rule).unwrap()
        };
        let coarse = eval(16);
        let fine = eval(61);
        let sub = fine.subsample(4).unwrap();
        let scale = coarse.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let diff = coarse.values().iter().zip(sub.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let h = 1.0 / 15.0;
        assert!(diff <= 2.0 * h * h * scale.max(1.0), "diff {diff}, scale {scale}");
    }

    #[test]
    fn discretization_order_is_at_least_trapezoidal() {
        let arch = Architecture {
            depth: 2,
            channels: 3,
            lift: true,
            project: true,
            skip: true,
            lift_coordinates: true,
            layer_activation: Activation::Gelu,
            ..Architecture::one_layer_linear(1, vec![8, 8])
        };
        let p = NeuralOperatorParams::init(arch, 9).unwrap();
        let f = |c: &[f64]| (2.0 * c[0]).sin() + c[0] * c[0];
        let at_shared = |k: usize| -> Vec<f64> {
            let rule = rule1(k);
            let u = forward(&p, None, &Field::from_fn(rule.nodes().clone(), f), &rule).unwrap().0;
            u.subsample((k - 1) / 4).unwrap().into_values()
        };
        let reference = at_shared(513);
        let err = |k: usize| {
            at_shared(k).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let errors: Vec<f64> = [9, 17, 33].iter().map(|&k| err(k)).collect();
        for w in errors.windows(2) {
            assert!((w[0] / w[1]).log2() >= 1.5, "errors {errors:?}");
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let rule = rule1(9);
        let ds = helmholtz_dataset(&HelmholtzProblem::new(4.5).unwrap(), &[0, 1, 2, 3], &rule).unwrap();
        for seed in 0..3 {
            let init = NeuralOperatorParams::init(Architecture::one_layer_linear(1, vec![8, 8]), seed).unwrap();
            let schedule = Schedule::adam(60, 1e-2, 1e-6, seed);
            let a = train_map(&init, ds.samples(), &rule, &schedule).unwrap();
            assert!(a.best_loss < a.initial_loss);
            let b = train_map(&init, ds.samples(), &rule, &schedule).unwrap();
            assert_eq!(a.params, b.params);
            assert_eq!(a.log, b.log);
            let zero = train_map(&init, ds.samples(), &rule, &Schedule::adam(0, 1e-2, 1e-6, seed)).unwrap();
            assert_eq!(zero.params, init);
        }
    }

    #[test]
    fn divergence_is_detected() {
        let rule = rule1(9);
        let ds = helmholtz_dataset(&HelmholtzProblem::new(4.5).unwrap(), &[0, 1], &rule).unwrap();
        let init = NeuralOperatorParams::init(Architecture::one_layer_linear(1, vec![8]), 0).unwrap();
        let mut schedule = Schedule::adam(200, 1e4, 0.0, 0);
        schedule.epsilon = 1e-300;
        assert!(matches!(
            train_map(&init, ds.samples(), &rule, &schedule),
            Err(Error::Divergence { .. }) | Err(Error::NumericOverflow { .. })
        ));
    }
}
