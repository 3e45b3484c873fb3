//! A small reverse-mode automatic differentiation tape over `f64` tensors.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for the backward pass. A graph
//! built with [`Graph::no_grad`] records values only; that is how key
//! pathways and evaluation run.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

pub type Tensor = ArrayD<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn dyn2(a: Array2<f64>) -> Tensor {
    a.into_dyn()
}

fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that never records backward closures.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (when the graph records).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = self.record;
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.iter().copied().next().unwrap_or(0.0)
    }

    fn push<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Option<Tensor>> + 'static,
    {
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs_grad { Some(Box::new(backward)) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = back(&g, &node.value, &parent_vals);
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &gp,
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sum_vars(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, &[a, b], |g, _, p| vec![Some(g * p[1]), Some(g * p[0])])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, &[a], move |g, _, _| vec![Some(g * c)])
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = self.value(a) + c;
        self.push(v, &[a], |g, _, _| vec![Some(g.clone())])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, &[a], |g, out, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(out).for_each(|d, &o| {
                if o <= 0.0 {
                    *d = 0.0
                }
            });
            vec![Some(d)]
        })
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.value(a).shape().to_vec();
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(v, &[a], move |g, _, _| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&src))
                    .expect("reshape back"),
            )]
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.value(a).view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(v, &[a], move |g, _, _| {
            vec![Some(g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[axis]).collect();
        self.push(v, parts, move |g, _, _| {
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let part = g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + w)).to_owned();
                    start += w;
                    Some(part)
                })
                .collect()
        })
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_axis(Axis(axis), ndarray::Slice::from(start..end)).to_owned();
        self.push(v, &[a], move |g, _, p| {
            let mut d = Tensor::zeros(p[0].raw_dim());
            d.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end)).assign(g);
            vec![Some(d)]
        })
    }

    /// Mean over the given axes (removed from the output shape).
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        let src_shape = self.value(a).shape().to_vec();
        let count: usize = axes.iter().map(|&ax| src_shape[ax]).product();
        let mut v = self.value(a).clone();
        for &ax in &sorted {
            v = v.sum_axis(Axis(ax));
        }
        v /= count as f64;
        self.push(v, &[a], move |g, _, _| {
            let mut d = g.clone();
            for &ax in sorted.iter().rev() {
                d = d.insert_axis(Axis(ax));
            }
            let d = d.broadcast(IxDyn(&src_shape)).expect("broadcast").to_owned() / count as f64;
            vec![Some(d)]
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let v = scalar(self.value(a).sum() / n);
        self.push(v, &[a], move |g, _, p| vec![Some(Tensor::from_elem(p[0].raw_dim(), g.sum() / n))])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = dyn2(view2(self.value(a)).dot(&view2(self.value(b))));
        self.push(v, &[a, b], |g, _, p| {
            let g2 = view2(g);
            vec![
                Some(dyn2(g2.dot(&view2(p[1]).t()))),
                Some(dyn2(view2(p[0]).t().dot(&g2))),
            ]
        })
    }

    /// `x [m, in] . w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut out = view2(self.value(x)).dot(&view2(self.value(w)));
        out += &self.value(b).view().into_dimensionality::<ndarray::Ix1>().expect("bias rank 1");
        self.push(dyn2(out), &[x, w, b], |g, _, p| {
            let g2 = view2(g);
            vec![
                Some(dyn2(g2.dot(&view2(p[1]).t()))),
                Some(dyn2(view2(p[0]).t().dot(&g2))),
                Some(g2.sum_axis(Axis(0)).into_dyn()),
            ]
        })
    }

    /// Applies a constant `J x J` matrix over the joint axis of `x [n, J, d]`.
    pub fn joint_mix(&mut self, x: Var, mix: &Array2<f64>) -> Var {
        let xs = self.value(x);
        let (n, j, d) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let x3 = xs.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
        let mut out = ndarray::Array3::<f64>::zeros((n, j, d));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i).assign(&mix.dot(&x3.index_axis(Axis(0), i)));
        }
        let mix_t = mix.t().to_owned();
        self.push(out.into_dyn(), &[x], move |g, _, _| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3");
            let mut d = ndarray::Array3::<f64>::zeros((n, j, d));
            for i in 0..n {
                d.index_axis_mut(Axis(0), i).assign(&mix_t.dot(&g3.index_axis(Axis(0), i)));
            }
            vec![Some(d.into_dyn())]
        })
    }

    /// Row-wise layer normalization of `x [m, d]` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = view2(self.value(x));
        let (m, d) = xv.dim();
        let gam = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().expect("gamma rank 1").to_owned();
        let bet = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().expect("beta rank 1").to_owned();
        let mut xhat = Array2::<f64>::zeros((m, d));
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = xv.row(i);
            let mu = row.mean().unwrap_or(0.0);
            let var = row.mapv(|v| (v - mu).powi(2)).mean().unwrap_or(0.0);
            inv_std[i] = 1.0 / (var + eps).sqrt();
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mu) * inv_std[i]));
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            Zip::from(&mut row).and(&gam).and(&bet).for_each(|o, &g, &b| *o = *o * g + b);
        }
        self.push(out.into_dyn(), &[x, gamma, beta], move |g, _, p| {
            let g2 = view2(g);
            let gam = &p[1];
            let mut dx = Array2::<f64>::zeros((m, d));
            let mut dgam = ndarray::Array1::<f64>::zeros(d);
            let mut dbet = ndarray::Array1::<f64>::zeros(d);
            for i in 0..m {
                let gr = g2.row(i);
                let xh = xhat.row(i);
                let dxhat: Vec<f64> = (0..d).map(|c| gr[c] * gam[[c]]).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dxhat_xhat = dxhat.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for c in 0..d {
                    dx[[i, c]] = inv_std[i] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                    dgam[c] += gr[c] * xh[c];
                    dbet[c] += gr[c];
                }
            }
            vec![Some(dx.into_dyn()), Some(dgam.into_dyn()), Some(dbet.into_dyn())]
        })
    }

    /// Multi-head scaled dot-product self-attention core over `batch`
    /// sequences laid out as `[batch * len, dim]` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let qv = view2(self.value(q));
        let (rows, dim) = qv.dim();
        assert_eq!(rows % batch, 0, "rows must split evenly into sequences");
        assert_eq!(dim % heads, 0, "dim must split evenly into heads");
        let len = rows / batch;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let kv = view2(self.value(k));
        let vv = view2(self.value(v));
        let mut out = Array2::<f64>::zeros((rows, dim));
        let mut probs: Vec<Array2<f64>> = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * len..(b + 1) * len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![r.clone(), c.clone()]);
                let kh = kv.slice(s![r.clone(), c.clone()]);
                let vh = vv.slice(s![r.clone(), c.clone()]);
                let mut sc = qh.dot(&kh.t()) * scale;
                for mut row in sc.rows_mut() {
                    let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|x| (x - mx).exp());
                    let z = row.sum();
                    row /= z;
                }
                out.slice_mut(s![r.clone(), c.clone()]).assign(&sc.dot(&vh));
                probs.push(sc);
            }
        }
        self.push(out.into_dyn(), &[q, k, v], move |g, _, p| {
            let g2 = view2(g);
            let (qv, kv, vv) = (view2(p[0]), view2(p[1]), view2(p[2]));
            let mut dq = Array2::<f64>::zeros((rows, dim));
            let mut dk = Array2::<f64>::zeros((rows, dim));
            let mut dv = Array2::<f64>::zeros((rows, dim));
            for b in 0..batch {
                let r = b * len..(b + 1) * len;
                for h in 0..heads {
                    let c = h * dh..(h + 1) * dh;
                    let pr = &probs[b * heads + h];
                    let go = g2.slice(s![r.clone(), c.clone()]);
                    let qh = qv.slice(s![r.clone(), c.clone()]);
                    let kh = kv.slice(s![r.clone(), c.clone()]);
                    let vh = vv.slice(s![r.clone(), c.clone()]);
                    dv.slice_mut(s![r.clone(), c.clone()]).assign(&pr.t().dot(&go));
                    let dp = go.dot(&vh.t());
                    let mut ds = Array2::<f64>::zeros((len, len));
                    for i in 0..len {
                        let dot: f64 = (0..len).map(|j| dp[[i, j]] * pr[[i, j]]).sum();
                        for j in 0..len {
                            ds[[i, j]] = pr[[i, j]] * (dp[[i, j]] - dot) * scale;
                        }
                    }
                    dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![r.clone(), c.clone()]).assign(&ds.t().dot(&qh));
                }
            }
            vec![Some(dq.into_dyn()), Some(dk.into_dyn()), Some(dv.into_dyn())]
        })
    }

    /// 3D convolution via im2col. `x [B, Ci, T, H, W]`, `w [Co, Ci, kt, kh, kw]`,
    /// `b [Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (bsz, ci) = (xs.shape()[0], xs.shape()[1]);
        let in_dims = [xs.shape()[2], xs.shape()[3], xs.shape()[4]];
        let co = ws.shape()[0];
        assert_eq!(ws.shape()[1], ci, "conv input channels");
        let k = [ws.shape()[2], ws.shape()[3], ws.shape()[4]];
        let geo = ConvGeometry::new(ci, in_dims, k, stride, pad);
        let wmat = ws
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, geo.patch))
            .expect("weight reshape");
        let bias = self.value(b).clone();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bsz, co, geo.out[0], geo.out[1], geo.out[2]]));
        let keep_cols = self.record && (self.needs(x) || self.needs(w));
        let mut saved: Vec<Array2<f64>> = Vec::new();
        for n in 0..bsz {
            let cols = geo.im2col(&xs.index_axis(Axis(0), n));
            let mut res = wmat.dot(&cols);
            for (mut row, &bv) in res.rows_mut().into_iter().zip(bias.iter()) {
                row += bv;
            }
            out.index_axis_mut(Axis(0), n)
                .assign(&res.into_shape_with_order(IxDyn(&[co, geo.out[0], geo.out[1], geo.out[2]])).expect("out"));
            if keep_cols {
                saved.push(cols);
            }
        }
        let w_shape = ws.shape().to_vec();
        self.push(out, &[x, w, b], move |g, _, _| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[bsz, ci, geo.in_dims[0], geo.in_dims[1], geo.in_dims[2]]));
            let mut dw = Array2::<f64>::zeros((co, geo.patch));
            let mut db = ndarray::Array1::<f64>::zeros(co);
            let positions = geo.out[0] * geo.out[1] * geo.out[2];
            for n in 0..bsz {
                let gn = g
                    .index_axis(Axis(0), n)
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((co, positions))
                    .expect("grad reshape");
                db += &gn.sum_axis(Axis(1));
                dw += &gn.dot(&saved[n].t());
                let dcols = wmat.t().dot(&gn);
                geo.col2im(&dcols, &mut dx.index_axis_mut(Axis(0), n));
            }
            vec![
                Some(dx),
                Some(dw.into_shape_with_order(IxDyn(&w_shape)).expect("dw")),
                Some(db.into_dyn()),
            ]
        })
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = view2(self.value(x));
        let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
        let mut out = xv.to_owned();
        for (mut row, &nrm) in out.rows_mut().into_iter().zip(&norms) {
            row /= nrm;
        }
        self.push(out.into_dyn(), &[x], move |g, y, _| {
            let (g2, y2) = (view2(g), view2(y));
            let mut d = g2.to_owned();
            for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                let yr = y2.row(i);
                let dot = yr.dot(&g2.row(i));
                Zip::from(&mut row).and(&yr).for_each(|dv, &yv| *dv = (*dv - yv * dot) / norms[i]);
            }
            vec![Some(d.into_dyn())]
        })
    }

    // ---- losses ----

    /// Batch-mean InfoNCE of query rows against their positive key rows and
    /// a constant bank of negatives.
    pub fn info_nce(&mut self, q: Var, k: Var, bank: &Array2<f64>, tau: f64) -> Var {
        let (qv, kv) = (view2(self.value(q)), view2(self.value(k)));
        let bsz = qv.nrows();
        let neg = if bank.nrows() > 0 { qv.dot(&bank.t()) } else { Array2::zeros((bsz, 0)) };
        let mut loss = 0.0;
        let mut probs = Array2::<f64>::zeros((bsz, 1 + bank.nrows()));
        for i in 0..bsz {
            let pos = qv.row(i).dot(&kv.row(i)) / tau;
            let logits: Vec<f64> = std::iter::once(pos).chain(neg.row(i).iter().map(|v| v / tau)).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            loss += mx + z.ln() - pos;
            for (j, l) in logits.iter().enumerate() {
                probs[[i, j]] = (l - mx).exp() / z;
            }
        }
        let bank = bank.clone();
        self.push(scalar(loss / bsz as f64), &[q, k], move |g, _, p| {
            let gs = g.sum() / (bsz as f64 * tau);
            let (qv, kv) = (view2(p[0]), view2(p[1]));
            let mut dq = Array2::<f64>::zeros(qv.raw_dim());
            let mut dk = Array2::<f64>::zeros(kv.raw_dim());
            for i in 0..bsz {
                let p0 = probs[[i, 0]] - 1.0;
                let mut row = kv.row(i).to_owned() * p0;
                if bank.nrows() > 0 {
                    row += &probs.slice(s![i, 1..]).dot(&bank);
                }
                dq.row_mut(i).assign(&(row * gs));
                dk.row_mut(i).assign(&(&qv.row(i) * (p0 * gs)));
            }
            vec![Some(dq.into_dyn()), Some(dk.into_dyn())]
        })
    }

    /// Batch mean of the per-row mean binary cross-entropy between
    /// `sigmoid(q . bank^T / tau)` and 0/1 `targets [B, N]`.
    pub fn bank_bce(&mut self, q: Var, bank: &Array2<f64>, targets: &Array2<f64>, tau: f64) -> Var {
        let qv = view2(self.value(q));
        let (bsz, n) = (qv.nrows(), bank.nrows());
        let logits = qv.dot(&bank.t()) / tau;
        let mut loss = 0.0;
        Zip::from(&logits).and(targets).for_each(|&x, &y| loss += softplus(x) - y * x);
        let norm = (bsz * n) as f64;
        let bank = bank.clone();
        let targets = targets.clone();
        self.push(scalar(loss / norm), &[q], move |g, _, _| {
            let gs = g.sum() / (norm * tau);
            let mut dx = logits.mapv(sigmoid);
            dx -= &targets;
            vec![Some((dx.dot(&bank) * gs).into_dyn())]
        })
    }

    /// Batch-mean softmax cross-entropy of `logits [B, C]` against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = view2(self.value(logits));
        let bsz = lv.nrows();
        let mut probs = lv.to_owned();
        let mut loss = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - mx).exp());
            let z = row.sum();
            row /= z;
            loss -= row[labels[i]].max(f64::MIN_POSITIVE).ln();
        }
        let labels = labels.to_vec();
        self.push(scalar(loss / bsz as f64), &[logits], move |g, _, _| {
            let gs = g.sum() / bsz as f64;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[[i, l]] -= 1.0;
            }
            vec![Some((d * gs).into_dyn())]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    ci: usize,
    in_dims: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
    patch: usize,
}

impl ConvGeometry {
    fn new(ci: usize, in_dims: [usize; 3], k: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let out = std::array::from_fn(|a| {
            assert!(in_dims[a] + 2 * pad[a] >= k[a], "kernel larger than padded input");
            (in_dims[a] + 2 * pad[a] - k[a]) / stride[a] + 1
        });
        Self {
            ci,
            in_dims,
            k,
            stride,
            pad,
            out,
            patch: ci * k[0] * k[1] * k[2],
        }
    }

    /// Output columns `x` whose tap `dx` lands inside the input width.
    #[inline]
    fn x_range(&self, dx: usize) -> (usize, usize) {
        let (s, p, iw, ow) = (self.stride[2], self.pad[2], self.in_dims[2], self.out[2]);
        let lo = if dx >= p { 0 } else { (p - dx).div_ceil(s) };
        // largest x with x*s + dx - p < iw
        let hi = if iw + p > dx { ((iw + p - dx - 1) / s + 1).min(ow) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(patch_row, out_start, input_start, len)` for every in-bounds
    /// run of taps along the width; offsets index a contiguous `[Ci, T, H, W]`
    /// block and input steps by the width stride.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [it, ih, iw] = self.in_dims;
        let [ot, oh, ow] = self.out;
        let [kt, kh, kw] = self.k;
        for c in 0..self.ci {
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row = ((c * kt + dt) * kh + dy) * kw + dx;
                        let (x0, x1) = self.x_range(dx);
                        if x0 == x1 {
                            continue;
                        }
                        for t in 0..ot {
                            let st = (t * self.stride[0] + dt) as isize - self.pad[0] as isize;
                            if st < 0 || st >= it as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let sy = (y * self.stride[1] + dy) as isize - self.pad[1] as isize;
                                if sy < 0 || sy >= ih as isize {
                                    continue;
                                }
                                let base = ((c * it + st as usize) * ih + sy as usize) * iw;
                                let sx = x0 * self.stride[2] + dx - self.pad[2];
                                f(row, (t * oh + y) * ow + x0, base + sx, x1 - x0);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &ndarray::ArrayViewD<'_, f64>) -> Array2<f64> {
        let positions = self.out[0] * self.out[1] * self.out[2];
        let mut cols = Array2::<f64>::zeros((self.patch, positions));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().expect("contiguous");
        let dst = cols.as_slice_mut().expect("contiguous");
        let s = self.stride[2];
        self.for_each_run(|row, pos, off, len| {
            let d = &mut dst[row * positions + pos..][..len];
            if s == 1 {
                d.copy_from_slice(&src[off..off + len]);
            } else {
                for (i, v) in d.iter_mut().enumerate() {
                    *v = src[off + i * s];
                }
            }
        });
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, dx: &mut ndarray::ArrayViewMutD<'_, f64>) {
        let positions = self.out[0] * self.out[1] * self.out[2];
        let src = cols.as_slice().expect("contiguous");
        let dst = dx.as_slice_mut().expect("contiguous grad slab");
        let s = self.stride[2];
        self.for_each_run(|row, pos, off, len| {
            let c = &src[row * positions + pos..][..len];
            if s == 1 {
                for (d, v) in dst[off..off + len].iter_mut().zip(c) {
                    *d += v;
                }
            } else {
                for (i, v) in c.iter().enumerate() {
                    dst[off + i * s] += v;
                }
            }
        });
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaves only.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|(n, v)| (n.to_string(), v.shape().to_vec())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Tensor::zeros(v.raw_dim())).collect(),
        }
    }

    /// Inserts every parameter into `g`; trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.leaf(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound {
            vars,
            index: self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }
}

/// Parameters inserted into one graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} not bound"),
        }
    }

    /// Gradients in parameter order; parameters outside the backward path get zeros.
    pub fn grads(&self, params: &Params, grads: &Gradients) -> Params {
        let mut out = params.zeros_like();
        for (slot, &v) in out.values.iter_mut().zip(&self.vars) {
            if let Some(g) = grads.get(v) {
                slot.assign(g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(r))
    }

    /// Central-difference check of d(f)/d(input i) for a scalar graph builder.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = vals.iter().map(|v| g.constant(v.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar_value(out)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-5;
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].raw_dim()));
            for idx in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[i].as_slice_mut().unwrap()[idx] += h;
                minus[i].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let tol = 1e-6 + 1e-5 * fd.abs().max(an.abs());
                assert!((fd - an).abs() <= tol, "input {i}[{idx}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn conv3d_gradients() {
        let mut r = rng::stream(1, &[]);
        let x = randn(&[2, 2, 3, 4, 5], &mut r);
        let w = randn(&[3, 2, 2, 3, 3], &mut r);
        let b = randn(&[3], &mut r);
        let probe = randn(&[2, 3, 2, 2, 3], &mut r);
        check(vec![x, w, b, probe], |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], [1, 2, 2], [0, 1, 1]);
            let m = g.mul(y, v[3]);
            g.mean_all(m)
        });
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut r = rng::stream(2, &[]);
        let x = randn(&[1, 2, 3, 3, 3], &mut r);
        let w = randn(&[1, 2, 3, 3, 3], &mut r);
        let mut g = Graph::no_grad();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let bv = g.constant(Tensor::zeros(IxDyn(&[1])));
        let y = g.conv3d(xv, wv, bv, [1, 1, 1], [1, 1, 1]);
        // centre output sees the whole input
        let direct: f64 = x.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        assert!((g.value(y)[[0, 0, 1, 1, 1]] - direct).abs() < 1e-12);
    }

    #[test]
    fn attention_and_layer_norm_gradients() {
        let mut r = rng::stream(3, &[]);
        let q = randn(&[6, 4], &mut r);
        let k = randn(&[6, 4], &mut r);
        let v = randn(&[6, 4], &mut r);
        let gam = randn(&[4], &mut r);
        let bet = randn(&[4], &mut r);
        let probe = randn(&[6, 4], &mut r);
        check(vec![q, k, v, gam, bet, probe], |g, x| {
            let a = g.attention(x[0], x[1], x[2], 2, 2);
            let n = g.layer_norm(a, x[3], x[4], 1e-5);
            let m = g.mul(n, x[5]);
            g.mean_all(m)
        });
    }

    #[test]
    fn shape_op_gradients() {
        let mut r = rng::stream(4, &[]);
        let a = randn(&[2, 3, 4], &mut r);
        let mix = Array2::from_shape_fn((3, 3), |(i, j)| (i + 2 * j) as f64 * 0.1);
        let probe = randn(&[4, 2], &mut r);
        check(vec![a, probe], move |g, x| {
            let p = g.permute(x[0], &[2, 0, 1]);
            let m = g.mean_axes(p, &[2]);
            let j = g.joint_mix(x[0], &mix);
            let jm = g.mean_axes(j, &[1]);
            let jt = g.permute(jm, &[1, 0]);
            let sl = g.slice(jt, 1, 0, 2);
            let c = g.concat(&[m, sl], 0);
            let c = g.reshape(c, &[4, 2, 2]);
            let c = g.mean_axes(c, &[2]);
            let c = g.relu(c);
            let l = g.mul(c, x[1]);
            g.mean_all(l)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut r = rng::stream(5, &[]);
        let bank = Array2::from_shape_fn((5, 3), |_| StandardNormal.sample(&mut r));
        let targets = Array2::from_shape_fn((2, 5), |(i, j)| ((i + j) % 2) as f64);
        let q = randn(&[2, 3], &mut r);
        let k = randn(&[2, 3], &mut r);
        let w = randn(&[3, 4], &mut r);
        let b = randn(&[4], &mut r);
        check(vec![q, k, w, b], move |g, x| {
            let qn = g.l2_normalize_rows(x[0]);
            let kn = g.l2_normalize_rows(x[1]);
            let a = g.info_nce(qn, kn, &bank, 0.5);
            let c = g.bank_bce(qn, &bank, &targets, 0.7);
            let logits = g.linear(x[0], x[2], x[3]);
            let ce = g.cross_entropy(logits, &[1, 3]);
            g.sum_vars(&[a, c, ce])
        });
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::no_grad();
        let a = g.leaf(Tensor::ones(IxDyn(&[2])));
        let b = g.scale(a, 2.0);
        let m = g.mean_all(b);
        assert_eq!(g.scalar_value(m), 2.0);
        assert!(g.backward(m).get(a).is_none());
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
