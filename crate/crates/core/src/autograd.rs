//! Minimal reverse-mode differentiation over `f64` matrices.
//!
//! A [`Tape`] records operations in execution order; [`Tape::backward`]
//! walks it in reverse. Only the handful of ops the transformer needs are
//! provided, with attention and cross-entropy fused.

use ndarray::{s, Array2, Axis};

use crate::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How rows of `q`/`k`/`v` group into sequences for attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub time: usize,
    pub heads: usize,
    /// `batch * time` flags; false marks padding.
    pub valid: Vec<bool>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        count: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `a` plus the `1 × n` row `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        kernels::add_bias(&mut value, self.value(b).view());
        self.push(value, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(kernels::gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (value, xhat, inv_std) = kernels::layer_norm(
            self.value(x).view(),
            self.value(gamma).view(),
            self.value(beta).view(),
        );
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Select rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let value = self.value(table).select(Axis(0), &rows);
        self.push(value, Op::Gather { table, rows })
    }

    /// Stack `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("column counts agree");
        self.push(value, Op::ConcatRows(a, b))
    }

    /// Causal multi-head attention within each sequence of `layout`.
    /// Padded query rows produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (rows, d) = self.value(q).dim();
        let t = layout.time;
        debug_assert_eq!(rows, layout.batch * t);
        let mut out = Array2::zeros((rows, d));
        let mut probs = vec![0.0; layout.batch * layout.heads * t * t];
        {
            let qv = self.value(q).as_standard_layout();
            let kv = self.value(k).as_standard_layout();
            let vv = self.value(v).as_standard_layout();
            let (qs, ks, vs) = (
                qv.as_slice().unwrap(),
                kv.as_slice().unwrap(),
                vv.as_slice().unwrap(),
            );
            let mut row_probs = vec![0.0; layout.heads * t];
            for b in 0..layout.batch {
                let base = b * t;
                for i in 0..t {
                    if !layout.valid[base + i] {
                        continue;
                    }
                    let n = i + 1;
                    let valid = &layout.valid[base..base + n];
                    let mut o = vec![0.0; d];
                    kernels::attend(
                        &qs[(base + i) * d..(base + i + 1) * d],
                        &ks[base * d..(base + n) * d],
                        &vs[base * d..(base + n) * d],
                        valid,
                        layout.heads,
                        &mut o,
                        &mut row_probs[..layout.heads * n],
                    );
                    out.row_mut(base + i).assign(&ndarray::ArrayView1::from(&o));
                    for h in 0..layout.heads {
                        let dst = ((b * layout.heads + h) * t + i) * t;
                        probs[dst..dst + n].copy_from_slice(&row_probs[h * n..(h + 1) * n]);
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    /// Mean cross-entropy over rows whose target is `Some`. Produces a `1 × 1`
    /// node; zero when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        let mut probs = Array2::zeros(lv.dim());
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r).to_vec();
            let lse = kernels::log_sum_exp(&row);
            total += lse - row[t];
            count += 1;
            for (c, &l) in row.iter().enumerate() {
                probs[[r, c]] = kernels::exp(l - lse);
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
        )
    }

    /// Gradients of the `1 × 1` node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads[a.0], g * *f),
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(kernels::gelu_grad);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma).row(0).to_owned();
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let (rows, cols) = g.dim();
                    let n = cols as f64;
                    let mut gx = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| g[[r, c]] * gamma_v[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = (0..cols).map(|c| dxhat[c] * xhat[[r, c]]).sum::<f64>() / n;
                        for c in 0..cols {
                            gx[[r, c]] = inv_std[r] * (dxhat[c] - mean_d - xhat[[r, c]] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gamma.0], ggamma);
                    accumulate(&mut grads[beta.0], gbeta);
                }
                Op::Gather { table, rows } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    accumulate(&mut grads[a.0], g.slice(s![..na, ..]).to_owned());
                    accumulate(&mut grads[b.0], g.slice(s![na.., ..]).to_owned());
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(&g, *q, *k, *v, layout, probs);
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let mut gl = Array2::zeros(probs.dim());
                    if *count > 0 {
                        let scale = g[[0, 0]] / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..probs.ncols() {
                                gl[[r, c]] = probs[[r, c]] * scale;
                            }
                            gl[[r, t]] -= scale;
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }
        Gradients { grads }
    }

    fn attention_backward(
        &self,
        g: &Array2<f64>,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (rows, d) = qv.dim();
        let heads = layout.heads;
        let dh = d / heads;
        let t = layout.time;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Array2::zeros((rows, d));
        let mut gk = Array2::zeros((rows, d));
        let mut gv = Array2::zeros((rows, d));
        for b in 0..layout.batch {
            let base = b * t;
            for i in 0..t {
                let qi = base + i;
                if !layout.valid[qi] {
                    continue;
                }
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let p =
                        &probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i) * t + t];
                    let gout = g.slice(s![qi, cols.clone()]);
                    // dp_j = gout . v_j
                    let mut dp = vec![0.0; i + 1];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let vj = vv.slice(s![base + j, cols.clone()]);
                        dp[j] = gout.dot(&vj);
                        weighted += p[j] * dp[j];
                        let mut gvj = gv.slice_mut(s![base + j, cols.clone()]);
                        gvj.scaled_add(p[j], &gout);
                    }
                    for j in 0..=i {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        let kj = kv.slice(s![base + j, cols.clone()]).to_owned();
                        let qrow = qv.slice(s![qi, cols.clone()]).to_owned();
                        gq.slice_mut(s![qi, cols.clone()]).scaled_add(ds, &kj);
                        gk.slice_mut(s![base + j, cols.clone()])
                            .scaled_add(ds, &qrow);
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check<F>(inputs: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |vals: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape.scalar(out), tape, vars, out)
        };
        let (_, tape, vars, out) = eval(&inputs);
        let grads = tape.backward(out);
        let eps = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.clone();
                plus[i][[r, c]] += eps;
                let mut minus = inputs.clone();
                minus[i][[r, c]] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = analytic[[r, c]];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {i} [{r},{c}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grads_matmul_layernorm_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 4, 5),
            rand_mat(&mut rng, 1, 5),
            rand_mat(&mut rng, 1, 5),
            rand_mat(&mut rng, 6, 5),
        ];
        check(inputs, |t, v| {
            let xw = t.matmul(v[0], v[1]);
            let ln = t.layer_norm(xw, v[2], v[3]);
            let g = t.gelu(ln);
            let cat = t.concat_rows(g, v[4]);
            let sel = t.gather(cat, vec![0, 4, 4, 8, 2]);
            let logits = t.matmul_t(sel, v[4]);
            let sc = t.scale(logits, 0.7);
            t.cross_entropy(sc, vec![Some(1), None, Some(5), Some(0), Some(2)])
        });
    }

    #[test]
    fn grads_attention_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, tlen, d) = (2, 3, 4);
        let inputs = vec![
            rand_mat(&mut rng, b * tlen, d),
            rand_mat(&mut rng, b * tlen, d),
            rand_mat(&mut rng, b * tlen, d),
            rand_mat(&mut rng, 5, d),
        ];
        let layout = AttnLayout {
            batch: b,
            time: tlen,
            heads: 2,
            valid: vec![true, true, true, false, true, true],
        };
        check(inputs, move |t, v| {
            let a = t.attention(v[0], v[1], v[2], layout.clone());
            let logits = t.matmul_t(a, v[3]);
            t.cross_entropy(
                logits,
                vec![Some(0), Some(1), Some(4), None, Some(2), Some(3)],
            )
        });
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((3, 8)));
        let loss = tape.cross_entropy(logits, vec![Some(0), Some(3), Some(7)]);
        assert!((tape.scalar(loss) - 8f64.ln()).abs() < 1e-15);
    }
}
