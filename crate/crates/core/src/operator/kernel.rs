//! Evaluation and reverse mode of the kernel network `g_θ` over all pairs of
//! a row point set and a column point set.
//!
//! The first layer is affine in the concatenated input, so its
//! pre-activation splits into a row part and a column part that are computed
//! once per point. Deeper layers run as matrix products over chunks of
//! pairs. The reverse pass recomputes each chunk instead of storing
//! activations for every pair.

use nalgebra::{DMatrix, DVector};

use super::{Activation, NeuralOperatorParams};

const CHUNK_PAIRS: usize = 8192;

/// Per-point kernel inputs: coordinates, then the normalized coefficient
/// when the network uses it.
pub(crate) struct PointSet<'a> {
    pub features: &'a [f64],
    pub n: usize,
}

struct Net {
    act: Activation,
    /// Layers after the first: weights, their transposes, biases.
    w: Vec<DMatrix<f64>>,
    wt: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    widths: Vec<usize>,
}

impl Net {
    fn new(p: &NeuralOperatorParams) -> Self {
        let slots = &p.layout().kernel;
        let v = p.values();
        let mut net = Net {
            act: p.architecture().kernel_activation,
            w: Vec::new(),
            wt: Vec::new(),
            b: Vec::new(),
            widths: slots.iter().map(|s| s.rows).collect(),
        };
        for s in &slots[1..] {
            let w = DMatrix::from_row_slice(s.rows, s.cols, &v[s.w..s.b]);
            net.wt.push(w.transpose());
            net.w.push(w);
            net.b.push(DVector::from_column_slice(&v[s.b..s.b + s.rows]));
        }
        net
    }

    fn depth(&self) -> usize {
        self.widths.len()
    }
}

/// Which first-layer input column each point feature feeds.
fn first_layer_columns(p: &NeuralOperatorParams, rows: bool) -> Vec<usize> {
    let arch = p.architecture();
    let d = arch.spatial_dim;
    let offset = if rows { 0 } else { d };
    let mut cols: Vec<usize> = (0..d).map(|k| offset + k).collect();
    if arch.uses_coefficient {
        cols.push(2 * d + usize::from(!rows));
    }
    cols
}

/// Row-major `n × h1` partial pre-activations of the first layer.
fn first_layer_part(p: &NeuralOperatorParams, pts: &PointSet, rows: bool) -> Vec<f64> {
    let s = p.layout().kernel[0];
    let (w, b) = p.kernel_layer(0);
    let cols = first_layer_columns(p, rows);
    let q = cols.len();
    let mut out = vec![0.0; pts.n * s.rows];
    for i in 0..pts.n {
        let feat = &pts.features[i * q..(i + 1) * q];
        for o in 0..s.rows {
            let mut acc = if rows { b[o] } else { 0.0 };
            for (k, &c) in cols.iter().enumerate() {
                acc += w[o * s.cols + c] * feat[k];
            }
            out[i * s.rows + o] = acc;
        }
    }
    out
}

/// One chunk of rows `r0..r1` against all columns: the output row, plus
/// hidden activations and their derivatives when requested.
struct Chunk {
    out: DMatrix<f64>,
    hidden: Vec<DMatrix<f64>>,
    slopes: Vec<DMatrix<f64>>,
}

fn chunk_forward(net: &Net, a: &[f64], b: &[f64], r0: usize, r1: usize, n_c: usize, keep: bool) -> Chunk {
    let h1 = net.widths[0];
    let pairs = (r1 - r0) * n_c;
    let mut z0 = Vec::with_capacity(h1 * pairs);
    for i in r0..r1 {
        let ai = &a[i * h1..(i + 1) * h1];
        for j in 0..n_c {
            let bj = &b[j * h1..(j + 1) * h1];
            z0.extend(ai.iter().zip(bj).map(|(x, y)| x + y));
        }
    }
    let mut z = DMatrix::from_vec(h1, pairs, z0);
    let mut hidden = Vec::new();
    let mut slopes = Vec::new();
    for k in 1..net.depth() {
        let (h, d) = if keep {
            let mut d = z.clone();
            let mut h = z;
            for (hv, dv) in h.as_mut_slice().iter_mut().zip(d.as_mut_slice()) {
                (*hv, *dv) = net.act.value_and_derivative(*hv);
            }
            (h, Some(d))
        } else {
            let mut h = z;
            h.apply(|v| *v = net.act.apply(*v));
            (h, None)
        };
        let mut next = DMatrix::zeros(net.widths[k], pairs);
        next.gemm(1.0, &net.w[k - 1], &h, 0.0);
        for mut col in next.column_iter_mut() {
            col += &net.b[k - 1];
        }
        if keep {
            hidden.push(h);
            slopes.extend(d);
        }
        z = next;
    }
    Chunk {
        out: z,
        hidden,
        slopes,
    }
}

/// `g_θ` on all row × column pairs, row-major.
pub(crate) fn eval_block(p: &NeuralOperatorParams, rows: &PointSet, cols: &PointSet) -> Vec<f64> {
    let net = Net::new(p);
    let a = first_layer_part(p, rows, true);
    let b = first_layer_part(p, cols, false);
    let rb = (CHUNK_PAIRS / cols.n.max(1)).max(1);
    let mut out = Vec::with_capacity(rows.n * cols.n);
    let mut r0 = 0;
    while r0 < rows.n {
        let r1 = (r0 + rb).min(rows.n);
        let chunk = chunk_forward(&net, &a, &b, r0, r1, cols.n, false);
        out.extend_from_slice(chunk.out.as_slice());
        r0 = r1;
    }
    out
}

/// Accumulates into `grad` the gradient of `Σ_ij dk_ij g_θ(row_i, col_j)`.
pub(crate) fn backprop_block(
    p: &NeuralOperatorParams,
    rows: &PointSet,
    cols: &PointSet,
    dk: &[f64],
    grad: &mut [f64],
) {
    let net = Net::new(p);
    let slots = p.layout().kernel.clone();
    let a = first_layer_part(p, rows, true);
    let b = first_layer_part(p, cols, false);
    let h1 = net.widths[0];
    let n_c = cols.n;
    let mut da = vec![0.0; rows.n * h1];
    let mut db = vec![0.0; n_c * h1];
    let rb = (CHUNK_PAIRS / n_c.max(1)).max(1);
    let mut r0 = 0;
    while r0 < rows.n {
        let r1 = (r0 + rb).min(rows.n);
        let pairs = (r1 - r0) * n_c;
        let chunk = chunk_forward(&net, &a, &b, r0, r1, n_c, true);
        let mut dz = DMatrix::from_column_slice(1, pairs, &dk[r0 * n_c..r1 * n_c]);
        for k in (1..net.depth()).rev() {
            let h = &chunk.hidden[k - 1];
            let s = slots[k];
            let dw = &dz * h.transpose();
            for o in 0..s.rows {
                for i in 0..s.cols {
                    grad[s.w + o * s.cols + i] += dw[(o, i)];
                }
                grad[s.b + o] += dz.row(o).sum();
            }
            let mut dh = DMatrix::zeros(s.cols, pairs);
            dh.gemm(1.0, &net.wt[k - 1], &dz, 0.0);
            dh.component_mul_assign(&chunk.slopes[k - 1]);
            dz = dh;
        }
        // dz is now the gradient of the first-layer pre-activation
        for (local, col) in dz.column_iter().enumerate() {
            let (i, j) = (r0 + local / n_c, local % n_c);
            for o in 0..h1 {
                da[i * h1 + o] += col[o];
                db[j * h1 + o] += col[o];
            }
        }
        r0 = r1;
    }
    let s = slots[0];
    for (pts, d, is_rows) in [(rows, &da, true), (cols, &db, false)] {
        let cs = first_layer_columns(p, is_rows);
        let q = cs.len();
        for i in 0..pts.n {
            let feat = &pts.features[i * q..(i + 1) * q];
            for o in 0..h1 {
                let g = d[i * h1 + o];
                for (k, &c) in cs.iter().enumerate() {
                    grad[s.w + o * s.cols + c] += g * feat[k];
                }
                if is_rows {
                    grad[s.b + o] += g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::Architecture;

    /// Plain per-pair evaluation of the network.
    fn naive(p: &NeuralOperatorParams, input: &[f64]) -> f64 {
        let act = p.architecture().kernel_activation;
        let n = p.layout().kernel.len();
        let mut h = input.to_vec();
        for k in 0..n {
            let (w, b) = p.kernel_layer(k);
            let rows = b.len();
            let cols = h.len();
            let z: Vec<f64> = (0..rows)
                .map(|o| b[o] + (0..cols).map(|i| w[o * cols + i] * h[i]).sum::<f64>())
                .collect();
            h = if k + 1 < n { z.iter().map(|x| act.apply(*x)).collect() } else { z };
        }
        h[0]
    }

    #[test]
    fn block_matches_per_pair_evaluation() {
        let arch = Architecture::darcy(vec![7, 5], 2, 1, (3.0, 12.0));
        let p = NeuralOperatorParams::init(arch, 1).unwrap();
        let rf: Vec<f64> = (0..9 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let cf: Vec<f64> = (0..4 * 3).map(|i| (i as f64 * 0.71).cos()).collect();
        let rows = PointSet { features: &rf, n: 9 };
        let cols = PointSet { features: &cf, n: 4 };
        let k = eval_block(&p, &rows, &cols);
        for i in 0..9 {
            for j in 0..4 {
                let (x, y) = (&rf[i * 3..i * 3 + 3], &cf[j * 3..j * 3 + 3]);
                let input = [x[0], x[1], y[0], y[1], x[2], y[2]];
                assert!((k[i * 4 + j] - naive(&p, &input)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn chunked_gradient_matches_differences() {
        let arch = Architecture::one_layer_linear(1, vec![6, 4]);
        let p = NeuralOperatorParams::init(arch, 2).unwrap();
        let rf: Vec<f64> = (0..5000).map(|i| i as f64 / 4999.0).collect();
        let cf = [0.0, 0.3, 1.0];
        let rows = PointSet { features: &rf, n: 5000 };
        let cols = PointSet { features: &cf, n: 3 };
        let dk: Vec<f64> = (0..15000).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect();
        let obj = |q: &NeuralOperatorParams| -> f64 {
            eval_block(q, &rows, &cols).iter().zip(&dk).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; p.len()];
        backprop_block(&p, &rows, &cols, &dk, &mut grad);
        for idx in 0..p.len() {
            let h = 1e-5;
            let mut plus = p.clone();
            plus.values_mut()[idx] += h;
            let mut minus = p.clone();
            minus.values_mut()[idx] -= h;
            let fd = (obj(&plus) - obj(&minus)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", grad[idx]);
        }
    }
}
