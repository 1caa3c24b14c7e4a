use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::NnError;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
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
    Attention {
        qkv: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    Gather(Var, Vec<usize>),
    Scatter(Vec<(Var, Vec<usize>)>),
    Select(Var, Vec<usize>),
    Dropout(Var, Array2<f64>),
    Sse {
        x: Var,
        target: Array2<f64>,
        weight: f64,
    },
    MaskedCe {
        logits: Var,
        probs: Array2<f64>,
        targets: Vec<usize>,
        weight: f64,
    },
}

/// Records a forward computation so it can be differentiated in reverse.
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    params: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Softmax restricted to `mask`; masked entries are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    assert_eq!(logits.len(), mask.len(), "mask length");
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn constant(&mut self, a: Array2<f64>) -> Var {
        self.push(a, Op::Leaf)
    }

    /// Leaf for a parameter block; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimension");
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.dim(), vb.dim(), "add shapes");
        let out = va + vb;
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (&self.values[a.0], &self.values[row.0]);
        assert_eq!(vr.nrows(), 1, "broadcast row");
        assert_eq!(va.ncols(), vr.ncols(), "broadcast width");
        let out = va + vr;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = &self.values[a.0] * s;
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = &self.values[x.0];
        let n = vx.ncols() as f64;
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mu) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * &self.values[gamma.0] + &self.values[beta.0];
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `N x 3d` with query, key and value blocks side by side; each
    /// `(start, len)` segment attends only within itself and only backwards.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[(usize, usize)], heads: usize) -> Var {
        let v = &self.values[qkv.0];
        assert_eq!(v.ncols() % 3, 0, "qkv width");
        let d = v.ncols() / 3;
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((v.nrows(), d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            assert!(start + len <= v.nrows(), "segment out of range");
            let rows = start..start + len;
            for h in 0..heads {
                let q = v.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = v.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let val = v.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t()) * scale;
                for i in 0..len {
                    let mut row = p.row_mut(i);
                    let max = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let mut z = 0.0;
                    for j in 0..len {
                        if j <= i {
                            row[j] = (row[j] - max).exp();
                            z += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row.mapv_inplace(|x| x / z);
                }
                out.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&p.dot(&val));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.values[table.0];
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < t.nrows(), "gather index {id} out of range");
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    /// `n_rows x width` matrix where each part's rows are added at the listed positions.
    pub fn scatter_rows(&mut self, n_rows: usize, width: usize, parts: &[(Var, Vec<usize>)]) -> Var {
        let mut out = Array2::zeros((n_rows, width));
        for (v, rows) in parts {
            let p = &self.values[v.0];
            assert_eq!(p.nrows(), rows.len(), "scatter row count");
            assert_eq!(p.ncols(), width, "scatter width");
            for (i, &r) in rows.iter().enumerate() {
                let mut dst = out.row_mut(r);
                dst += &p.row(i);
            }
        }
        self.push(out, Op::Scatter(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = &self.values[x.0];
        let mut out = Array2::zeros((rows.len(), v.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&v.row(r));
        }
        self.push(out, Op::Select(x, rows.to_vec()))
    }

    /// Inverted dropout with a mask drawn from `seed`; identity when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask = self.values[x.0].mapv(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
        let out = &self.values[x.0] * &mask;
        self.push(out, Op::Dropout(x, mask))
    }

    /// `weight * sum((x - target)^2)` as a `1 x 1` value.
    pub fn sse(&mut self, x: Var, target: Array2<f64>, weight: f64) -> Var {
        let v = &self.values[x.0];
        assert_eq!(v.dim(), target.dim(), "sse shapes");
        let total = weight * (v - &target).mapv(|d| d * d).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sse { x, target, weight })
    }

    /// `weight * sum_i -log p_i[target_i]`, with `p_i` the masked softmax of row `i`.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        masks: &[Vec<bool>],
        targets: &[usize],
        weight: f64,
    ) -> Result<Var, NnError> {
        let v = &self.values[logits.0];
        if masks.len() != v.nrows() || targets.len() != v.nrows() {
            return Err(NnError::Shape(format!(
                "{} logit rows, {} masks, {} targets",
                v.nrows(),
                masks.len(),
                targets.len()
            )));
        }
        let mut probs = Array2::zeros(v.dim());
        let mut total = 0.0;
        for (i, row) in v.rows().into_iter().enumerate() {
            if masks[i].len() != v.ncols() {
                return Err(NnError::Shape(format!("mask row {i} width {}", masks[i].len())));
            }
            if !masks[i].iter().any(|&m| m) {
                return Err(NnError::EmptyMask(i));
            }
            if !masks[i][targets[i]] {
                return Err(NnError::MaskedTarget { row: i, target: targets[i] });
            }
            let p = masked_softmax(row.as_slice().expect("contiguous row"), &masks[i]);
            total -= p[targets[i]].ln();
            probs.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
        }
        Ok(self.push(
            Array2::from_elem((1, 1), weight * total),
            Op::MaskedCe {
                logits,
                probs,
                targets: targets.to_vec(),
                weight,
            },
        ))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.values[loss.0].dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.values[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g * *s),
            Op::Gelu(a) => {
                let d = val(*a).mapv(gelu_grad) * g;
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * val(*gamma);
                let n = xhat.ncols() as f64;
                let mut dx = Array2::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_d = dh.sum();
                    let sum_dx = (&dh * &xh).sum();
                    let inv = inv_std[r];
                    let mut out = dx.row_mut(r);
                    for c in 0..xhat.ncols() {
                        out[c] = inv / n * (n * dh[c] - sum_d - xh[c] * sum_dx);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                let v = val(*qkv);
                let d = v.ncols() / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = Array2::zeros(v.dim());
                let mut idx = 0;
                for &(start, len) in segments {
                    let rows = start..start + len;
                    for h in 0..*heads {
                        let p = &probs[idx];
                        idx += 1;
                        let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
                        let q = v.slice(s![rows.clone(), qc..qc + dh]);
                        let k = v.slice(s![rows.clone(), kc..kc + dh]);
                        let vv = v.slice(s![rows.clone(), vc..vc + dh]);
                        let dout = g.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                        let dp = dout.dot(&vv.t());
                        let dv = p.t().dot(&dout);
                        let mut ds = &dp * p;
                        for r in 0..len {
                            let dot = ds.row(r).sum();
                            let prow = p.row(r).to_owned();
                            let mut row = ds.row_mut(r);
                            row.scaled_add(-dot, &prow);
                        }
                        ds *= scale;
                        let dq = ds.dot(&k);
                        let dk = ds.t().dot(&q);
                        dqkv.slice_mut(s![rows.clone(), qc..qc + dh]).assign(&dq);
                        dqkv.slice_mut(s![rows.clone(), kc..kc + dh]).assign(&dk);
                        dqkv.slice_mut(s![rows.clone(), vc..vc + dh]).assign(&dv);
                    }
                }
                accumulate(grads, *qkv, dqkv);
            }
            Op::Gather(table, ids) => {
                let mut d = Array2::zeros(val(*table).dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(r);
                }
                accumulate(grads, *table, d);
            }
            Op::Scatter(parts) => {
                for (p, rows) in parts {
                    let mut d = Array2::zeros((rows.len(), g.ncols()));
                    for (r, &dst) in rows.iter().enumerate() {
                        d.row_mut(r).assign(&g.row(dst));
                    }
                    accumulate(grads, *p, d);
                }
            }
            Op::Select(x, rows) => {
                let mut d = Array2::zeros(val(*x).dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                accumulate(grads, *x, d);
            }
            Op::Dropout(x, mask) => accumulate(grads, *x, g * mask),
            Op::Sse { x, target, weight } => {
                let d = (val(*x) - target) * (2.0 * weight * g[[0, 0]]);
                accumulate(grads, *x, d);
            }
            Op::MaskedCe {
                logits,
                probs,
                targets,
                weight,
            } => {
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= 1.0;
                }
                d *= weight * g[[0, 0]];
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of every recorded value with respect to one scalar.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// One gradient per parameter block, zeros for blocks the tape never touched.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = store.values().iter().map(|v| Array2::zeros(v.dim())).collect();
        for &(id, var) in &tape.params {
            if let Some(g) = self.get(var) {
                out[id.0] += g;
            }
        }
        out
    }
}
