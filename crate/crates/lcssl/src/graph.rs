//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! The graph is a flat arena built in topological order; every op stores
//! its parents and a backward closure. `backward` walks the arena in
//! reverse with a fixed reduction order, so gradients are deterministic.
//! Ops that consume stop-gradient data (target-network outputs) take it
//! as plain `Tensor` constants rather than graph nodes.

use crate::tensor::Tensor;
use crate::Real;

pub type Var = usize;

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var>,
    back: Option<BackFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v].value
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, vec![], None)
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        self.nodes.len() - 1
    }

    /// Accumulate gradients of `loss` (a scalar node) w.r.t. every node.
    ///
    /// Returns one slot per node; leaves referenced by the loss keep their
    /// gradient, interior slots are drained as the walk passes them.
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        grads[loss] = Some(Tensor::filled(&self.nodes[loss].value.shape, T::one()));
        for id in (0..=loss).rev() {
            if grads[id].is_none() || self.nodes[id].back.is_none() {
                continue;
            }
            let g = grads[id].take().unwrap();
            let node = &self.nodes[id];
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let contributions =
                (node.back.as_ref().unwrap())(&g, &parent_values, &node.value);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (p, c) in node.parents.iter().zip(contributions) {
                match &mut grads[*p] {
                    Some(acc) => acc.add_scaled(&c, T::one()),
                    slot => *slot = Some(c),
                }
            }
        }
        grads
    }

    // ---- elementwise and scalar ops -------------------------------------

    /// `ca*a + cb*b`, element-wise over identical shapes.
    pub fn affine2(&mut self, a: Var, b: Var, ca: T, cb: T) -> Var {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape);
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let value = Tensor::from_vec(&va.shape, data);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                vec![g.map(|v| ca * v), g.map(|v| cb * v)]
            })),
        )
    }

    /// `mul*x + add`, element-wise.
    pub fn scalar_affine(&mut self, x: Var, mul: T, add: T) -> Var {
        let value = self.nodes[x].value.map(|v| mul * v + add);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, _| vec![g.map(|v| mul * v)])),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x].value.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, _, out| {
                let data = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(&gv, &ov)| if ov > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![Tensor::from_vec(&g.shape, data)]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x].value;
        let n = T::from_f64(v.len() as f64);
        let sum = v.data.iter().fold(T::zero(), |acc, &x| acc + x);
        let shape = v.shape.clone();
        self.push(
            Tensor::scalar(sum / n),
            vec![x],
            Some(Box::new(move |g, _, _| {
                let gv = g.item() / n;
                vec![Tensor::filled(&shape, gv)]
            })),
        )
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_vars(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let n = T::from_f64(xs.len() as f64);
        let sum = xs
            .iter()
            .fold(T::zero(), |acc, &v| acc + self.nodes[v].value.item());
        self.push(
            Tensor::scalar(sum / n),
            xs.to_vec(),
            Some(Box::new(move |g, parents, _| {
                let gv = g.item() / n;
                parents.iter().map(|_| Tensor::scalar(gv)).collect()
            })),
        )
    }

    // ---- shape ops -------------------------------------------------------

    /// Copy row `idx` out of the leading axis.
    pub fn batch_slice(&mut self, x: Var, idx: usize) -> Var {
        let v = &self.nodes[x].value;
        let rest: Vec<usize> = v.shape[1..].to_vec();
        let chunk: usize = rest.iter().product();
        let full_shape = v.shape.clone();
        let data = v.data[idx * chunk..(idx + 1) * chunk].to_vec();
        self.push(
            Tensor::from_vec(&rest, data),
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&full_shape);
                dx.data[idx * chunk..(idx + 1) * chunk].copy_from_slice(&g.data);
                vec![dx]
            })),
        )
    }

    /// `(C, H, W)` feature map -> `(H*W, C)` location-major rows.
    pub fn chw_to_rows(&mut self, x: Var) -> Var {
        let v = &self.nodes[x].value;
        assert_eq!(v.shape.len(), 3);
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        let n = h * w;
        let mut data = vec![T::zero(); n * c];
        for ci in 0..c {
            for ni in 0..n {
                data[ni * c + ci] = v.data[ci * n + ni];
            }
        }
        self.push(
            Tensor::from_vec(&[n, c], data),
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for ni in 0..n {
                        dx.data[ci * n + ni] = g.data[ni * c + ci];
                    }
                }
                vec![dx]
            })),
        )
    }

    // ---- dense layers ------------------------------------------------------

    /// `x (B,I) @ w (O,I)^T + b (O)` -> `(B,O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        let (bs, i) = (vx.shape[0], vx.shape[1]);
        let o = vw.shape[0];
        assert_eq!(vw.shape[1], i, "linear in-dim mismatch");
        assert_eq!(vb.shape, vec![o]);
        let mut out = vec![T::zero(); bs * o];
        for bi in 0..bs {
            let xr = &vx.data[bi * i..(bi + 1) * i];
            for oi in 0..o {
                let wr = &vw.data[oi * i..(oi + 1) * i];
                let mut acc = vb.data[oi];
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += *xv * *wv;
                }
                out[bi * o + oi] = acc;
            }
        }
        self.push(
            Tensor::from_vec(&[bs, o], out),
            vec![x, w, b],
            Some(Box::new(move |g, parents, _| {
                let (vx, vw) = (parents[0], parents[1]);
                let mut dx = Tensor::zeros(&[bs, i]);
                let mut dw = Tensor::zeros(&[o, i]);
                let mut db = Tensor::zeros(&[o]);
                for bi in 0..bs {
                    let gr = &g.data[bi * o..(bi + 1) * o];
                    let xr = &vx.data[bi * i..(bi + 1) * i];
                    let dxr = &mut dx.data[bi * i..(bi + 1) * i];
                    for oi in 0..o {
                        let gv = gr[oi];
                        db.data[oi] += gv;
                        let wr = &vw.data[oi * i..(oi + 1) * i];
                        let dwr = &mut dw.data[oi * i..(oi + 1) * i];
                        for ii in 0..i {
                            dxr[ii] += gv * wr[ii];
                            dwr[ii] += gv * xr[ii];
                        }
                    }
                }
                vec![dx, dw, db]
            })),
        )
    }

    /// 2D convolution, NCHW input, `(Cout, Cin, K, K)` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        let value = conv2d_forward(vx, vw, vb, stride, pad);
        self.push(
            value,
            vec![x, w, b],
            Some(Box::new(move |g, parents, _| {
                conv2d_backward(g, parents[0], parents[1], stride, pad)
            })),
        )
    }

    /// Batch normalization over channel axis 1, batch statistics.
    ///
    /// Returns the node plus the computed per-channel mean and (biased)
    /// variance so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> (Var, Tensor<T>, Tensor<T>) {
        let vx = &self.nodes[x].value;
        let (bs, c, s) = split_bcs(&vx.shape);
        let n = T::from_f64((bs * s) as f64);
        let mut mean = Tensor::zeros(&[c]);
        let mut var = Tensor::zeros(&[c]);
        for ci in 0..c {
            let mut acc = T::zero();
            for bi in 0..bs {
                let base = (bi * c + ci) * s;
                for k in 0..s {
                    acc += vx.data[base + k];
                }
            }
            mean.data[ci] = acc / n;
        }
        for ci in 0..c {
            let m = mean.data[ci];
            let mut acc = T::zero();
            for bi in 0..bs {
                let base = (bi * c + ci) * s;
                for k in 0..s {
                    let d = vx.data[base + k] - m;
                    acc += d * d;
                }
            }
            var.data[ci] = acc / n;
        }
        let vgamma = &self.nodes[gamma].value;
        let vbeta = &self.nodes[beta].value;
        let mut out = vec![T::zero(); vx.data.len()];
        for bi in 0..bs {
            for ci in 0..c {
                let m = mean.data[ci];
                let inv = (var.data[ci] + eps).sqrt().recip();
                let (gm, bt) = (vgamma.data[ci], vbeta.data[ci]);
                let base = (bi * c + ci) * s;
                for k in 0..s {
                    out[base + k] = gm * (vx.data[base + k] - m) * inv + bt;
                }
            }
        }
        let mean_c = mean.clone();
        let var_c = var.clone();
        let shape = vx.shape.clone();
        let var_node = self.push(
            Tensor::from_vec(&shape, out),
            vec![x, gamma, beta],
            Some(Box::new(move |g, parents, _| {
                let vx = parents[0];
                let vgamma = parents[1];
                let mut dx = Tensor::zeros(&vx.shape);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let m = mean_c.data[ci];
                    let inv = (var_c.data[ci] + eps).sqrt().recip();
                    let gm = vgamma.data[ci];
                    // reduce: sum of g and of g*xhat over the channel
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for bi in 0..bs {
                        let base = (bi * c + ci) * s;
                        for k in 0..s {
                            let xhat = (vx.data[base + k] - m) * inv;
                            let gv = g.data[base + k];
                            sg += gv;
                            sgx += gv * xhat;
                        }
                    }
                    dbeta.data[ci] = sg;
                    dgamma.data[ci] = sgx;
                    let coef = gm * inv / n;
                    for bi in 0..bs {
                        let base = (bi * c + ci) * s;
                        for k in 0..s {
                            let xhat = (vx.data[base + k] - m) * inv;
                            dx.data[base + k] =
                                coef * (n * g.data[base + k] - sg - xhat * sgx);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
        );
        (var_node, mean, var)
    }

    /// Normalization with fixed (running) statistics: a per-channel affine.
    pub fn norm_with_stats(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Var {
        let vx = &self.nodes[x].value;
        let (bs, c, s) = split_bcs(&vx.shape);
        let vgamma = &self.nodes[gamma].value;
        let vbeta = &self.nodes[beta].value;
        let mut out = vec![T::zero(); vx.data.len()];
        let mean = mean.clone();
        let var = var.clone();
        for bi in 0..bs {
            for ci in 0..c {
                let inv = (var.data[ci] + eps).sqrt().recip();
                let base = (bi * c + ci) * s;
                for k in 0..s {
                    out[base + k] =
                        vgamma.data[ci] * (vx.data[base + k] - mean.data[ci]) * inv + vbeta.data[ci];
                }
            }
        }
        let shape = vx.shape.clone();
        self.push(
            Tensor::from_vec(&shape, out),
            vec![x, gamma, beta],
            Some(Box::new(move |g, parents, _| {
                let vx = parents[0];
                let vgamma = parents[1];
                let mut dx = Tensor::zeros(&vx.shape);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let inv = (var.data[ci] + eps).sqrt().recip();
                    let gm = vgamma.data[ci];
                    for bi in 0..bs {
                        let base = (bi * c + ci) * s;
                        for k in 0..s {
                            let gv = g.data[base + k];
                            let xhat = (vx.data[base + k] - mean.data[ci]) * inv;
                            dx.data[base + k] = gv * gm * inv;
                            dgamma.data[ci] += gv * xhat;
                            dbeta.data[ci] += gv;
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
        )
    }

    /// `(B, C, H, W)` -> `(B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.shape.len(), 4);
        let (bs, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let s = h * w;
        let ns = T::from_f64(s as f64);
        let mut out = vec![T::zero(); bs * c];
        for bi in 0..bs {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                let mut acc = T::zero();
                for k in 0..s {
                    acc += vx.data[base + k];
                }
                out[bi * c + ci] = acc / ns;
            }
        }
        self.push(
            Tensor::from_vec(&[bs, c], out),
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[bs, c, h, w]);
                for bi in 0..bs {
                    for ci in 0..c {
                        let gv = g.data[bi * c + ci] / ns;
                        let base = (bi * c + ci) * s;
                        for k in 0..s {
                            dx.data[base + k] = gv;
                        }
                    }
                }
                vec![dx]
            })),
        )
    }

    // ---- similarity / loss ops ----------------------------------------------

    /// L2-normalize the last axis, with `eps` added to the norm.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let vx = &self.nodes[x].value;
        let c = *vx.shape.last().expect("rows need a last axis");
        let rows = vx.data.len() / c;
        let mut out = vec![T::zero(); vx.data.len()];
        for r in 0..rows {
            let xr = &vx.data[r * c..(r + 1) * c];
            let n = xr.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            let s = n + eps;
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(xr) {
                *o = v / s;
            }
        }
        let shape = vx.shape.clone();
        self.push(
            Tensor::from_vec(&shape, out),
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let vx = parents[0];
                let mut dx = Tensor::zeros(&vx.shape);
                for r in 0..rows {
                    let xr = &vx.data[r * c..(r + 1) * c];
                    let gr = &g.data[r * c..(r + 1) * c];
                    let n = xr.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                    let s = n + eps;
                    let gx = gr
                        .iter()
                        .zip(xr)
                        .fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
                    let coef = if n > T::from_f64(1e-30) {
                        gx / (s * s * n)
                    } else {
                        T::zero()
                    };
                    for ((d, &gv), &xv) in
                        dx.data[r * c..(r + 1) * c].iter_mut().zip(gr).zip(xr)
                    {
                        *d = gv / s - coef * xv;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// `out[m, n] = sum_c k[m, c] * a[n, c]` with `k` a constant.
    pub fn matmul_nt_const(&mut self, a: Var, k: Tensor<T>) -> Var {
        let va = &self.nodes[a].value;
        assert_eq!(va.shape.len(), 2);
        let (n, c) = (va.shape[0], va.shape[1]);
        assert_eq!(k.shape[1], c, "contraction dim mismatch");
        let m = k.shape[0];
        let mut out = vec![T::zero(); m * n];
        for mi in 0..m {
            let kr = &k.data[mi * c..(mi + 1) * c];
            for ni in 0..n {
                let ar = &va.data[ni * c..(ni + 1) * c];
                let mut acc = T::zero();
                for (kv, av) in kr.iter().zip(ar) {
                    acc += *kv * *av;
                }
                out[mi * n + ni] = acc;
            }
        }
        self.push(
            Tensor::from_vec(&[m, n], out),
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut da = Tensor::zeros(&[n, c]);
                for mi in 0..m {
                    let kr = &k.data[mi * c..(mi + 1) * c];
                    for ni in 0..n {
                        let gv = g.data[mi * n + ni];
                        let dar = &mut da.data[ni * c..(ni + 1) * c];
                        for (d, kv) in dar.iter_mut().zip(kr) {
                            *d += gv * *kv;
                        }
                    }
                }
                vec![da]
            })),
        )
    }

    /// Per-row cosine similarity between `a` and a constant of equal shape.
    pub fn cos_rows_const(&mut self, a: Var, k: Tensor<T>, eps: T) -> Var {
        let va = &self.nodes[a].value;
        assert_eq!(va.shape, k.shape);
        let c = *va.shape.last().unwrap();
        let rows = va.data.len() / c;
        let mut out = vec![T::zero(); rows];
        // pre-normalize the constant side
        let mut khat = k.clone();
        for r in 0..rows {
            let kr = &mut khat.data[r * c..(r + 1) * c];
            let n = kr.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            let s = n + eps;
            for v in kr.iter_mut() {
                *v = *v / s;
            }
        }
        for r in 0..rows {
            let ar = &va.data[r * c..(r + 1) * c];
            let kr = &khat.data[r * c..(r + 1) * c];
            let n = ar.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            let s = n + eps;
            let dot = ar
                .iter()
                .zip(kr)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            out[r] = dot / s;
        }
        self.push(
            Tensor::from_vec(&[rows], out),
            vec![a],
            Some(Box::new(move |g, parents, out| {
                let va = parents[0];
                let mut da = Tensor::zeros(&va.shape);
                for r in 0..rows {
                    let ar = &va.data[r * c..(r + 1) * c];
                    let kr = &khat.data[r * c..(r + 1) * c];
                    let n = ar.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
                    let s = n + eps;
                    let cosv = out.data[r];
                    let gv = g.data[r];
                    let coef = if n > T::from_f64(1e-30) {
                        cosv / (s * n)
                    } else {
                        T::zero()
                    };
                    for ((d, &kv), &av) in
                        da.data[r * c..(r + 1) * c].iter_mut().zip(kr).zip(ar)
                    {
                        *d = gv * (kv / s - coef * av);
                    }
                }
                vec![da]
            })),
        )
    }

    /// Row-wise `-log softmax(x / tau)` via max-subtracted log-sum-exp.
    pub fn neg_log_softmax_rows(&mut self, x: Var, inv_temp: T) -> Var {
        let vx = &self.nodes[x].value;
        let c = *vx.shape.last().unwrap();
        let rows = vx.data.len() / c;
        let mut out = vec![T::zero(); vx.data.len()];
        let mut probs = vec![T::zero(); vx.data.len()];
        for r in 0..rows {
            let xr = &vx.data[r * c..(r + 1) * c];
            let m = xr
                .iter()
                .fold(T::neg_infinity(), |a, &v| if v * inv_temp > a { v * inv_temp } else { a });
            let mut z = T::zero();
            for &v in xr {
                z += (v * inv_temp - m).exp();
            }
            let lse = m + z.ln();
            for (idx, &v) in xr.iter().enumerate() {
                let s = v * inv_temp;
                out[r * c + idx] = lse - s;
                probs[r * c + idx] = (s - lse).exp();
            }
        }
        let probs = Tensor::from_vec(&vx.shape, probs);
        let shape = vx.shape.clone();
        self.push(
            Tensor::from_vec(&shape, out),
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&g.shape);
                for r in 0..rows {
                    let gr = &g.data[r * c..(r + 1) * c];
                    let pr = &probs.data[r * c..(r + 1) * c];
                    let gsum = gr.iter().fold(T::zero(), |a, &v| a + v);
                    for ((d, &gv), &pv) in
                        dx.data[r * c..(r + 1) * c].iter_mut().zip(gr).zip(pr)
                    {
                        *d = inv_temp * (pv * gsum - gv);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Mean over pairs of bilinearly interpolated row entries.
    ///
    /// `x` is `(M, N)` with columns laid out as an `h x w` grid; each pair
    /// `(row, u, v)` reads row `row` at continuous grid coordinate `(u, v)`.
    pub fn gather_bilinear_mean(
        &mut self,
        x: Var,
        pairs: Vec<(usize, f64, f64)>,
        grid_hw: (usize, usize),
    ) -> Var {
        assert!(!pairs.is_empty(), "gather over empty pair set");
        let vx = &self.nodes[x].value;
        let (h, w) = grid_hw;
        assert_eq!(vx.shape[1], h * w);
        let n_cols = h * w;
        let mut acc = T::zero();
        for &(row, u, v) in &pairs {
            acc += bilinear_read(&vx.data[row * n_cols..(row + 1) * n_cols], h, w, u, v);
        }
        let inv_p = T::from_f64(1.0 / pairs.len() as f64);
        let shape = vx.shape.clone();
        self.push(
            Tensor::scalar(acc * inv_p),
            vec![x],
            Some(Box::new(move |g, _, _| {
                let gv = g.item() * inv_p;
                let mut dx = Tensor::zeros(&shape);
                for &(row, u, v) in &pairs {
                    for (col, wt) in bilinear_taps(h, w, u, v) {
                        dx.data[row * n_cols + col] += gv * T::from_f64(wt);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Bilinearly warp grid rows: `x` is `(N=h*w, C)`; each coordinate
    /// `(u, v)` produces one interpolated C-vector.
    pub fn warp_rows_bilinear(
        &mut self,
        x: Var,
        coords: Vec<(f64, f64)>,
        grid_hw: (usize, usize),
    ) -> Var {
        let vx = &self.nodes[x].value;
        let (h, w) = grid_hw;
        let c = vx.shape[1];
        assert_eq!(vx.shape[0], h * w);
        let p = coords.len();
        let mut out = vec![T::zero(); p * c];
        for (pi, &(u, v)) in coords.iter().enumerate() {
            for (loc, wt) in bilinear_taps(h, w, u, v) {
                let wt = T::from_f64(wt);
                let src = &vx.data[loc * c..(loc + 1) * c];
                for (o, &sv) in out[pi * c..(pi + 1) * c].iter_mut().zip(src) {
                    *o += wt * sv;
                }
            }
        }
        let shape = vx.shape.clone();
        self.push(
            Tensor::from_vec(&[p, c], out),
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&shape);
                for (pi, &(u, v)) in coords.iter().enumerate() {
                    let gr = &g.data[pi * c..(pi + 1) * c];
                    for (loc, wt) in bilinear_taps(h, w, u, v) {
                        let wt = T::from_f64(wt);
                        for (d, &gv) in dx.data[loc * c..(loc + 1) * c].iter_mut().zip(gr) {
                            *d += wt * gv;
                        }
                    }
                }
                vec![dx]
            })),
        )
    }
}

fn split_bcs(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batch norm needs at least (B, C)");
    let bs = shape[0];
    let c = shape[1];
    let s: usize = shape[2..].iter().product::<usize>().max(1);
    (bs, c, s)
}

/// The four (location, weight) taps for bilinear interpolation at `(u, v)`
/// on an `h x w` grid, with neighbors clamped at the exact boundary.
///
/// At integer coordinates the weights are exactly `{1, 0, 0, 0}` so the
/// interpolated value equals the node value through the same arithmetic.
pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64) -> [(usize, f64); 4] {
    let i0 = if w > 1 {
        (u.floor() as i64).clamp(0, w as i64 - 2) as usize
    } else {
        0
    };
    let j0 = if h > 1 {
        (v.floor() as i64).clamp(0, h as i64 - 2) as usize
    } else {
        0
    };
    let du = u - i0 as f64;
    let dv = v - j0 as f64;
    let i1 = (i0 + 1).min(w - 1);
    let j1 = (j0 + 1).min(h - 1);
    [
        (j0 * w + i0, (1.0 - du) * (1.0 - dv)),
        (j0 * w + i1, du * (1.0 - dv)),
        (j1 * w + i0, (1.0 - du) * dv),
        (j1 * w + i1, du * dv),
    ]
}

/// Bilinear read of a length `h*w` row at grid coordinate `(u, v)`.
pub fn bilinear_read<T: Real>(row: &[T], h: usize, w: usize, u: f64, v: f64) -> T {
    let taps = bilinear_taps(h, w, u, v);
    // ordered so that an integer coordinate reproduces the node exactly:
    // 1*x + 0*y + 0*z + 0*w == x in IEEE arithmetic for finite values
    let mut acc = T::from_f64(taps[0].1) * row[taps[0].0];
    for &(loc, wt) in &taps[1..] {
        acc = acc + T::from_f64(wt) * row[loc];
    }
    acc
}

/// Dot product with eight independent accumulators. The reduction order is
/// fixed (lane-strided then a fixed lane fold), so results are reproducible
/// run-to-run while still allowing SIMD.
#[inline]
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut lanes = [T::zero(); L];
    let n = a.len().min(b.len());
    let chunks = n / L;
    for i in 0..chunks {
        for l in 0..L {
            lanes[l] += a[i * L + l] * b[i * L + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * L..n {
        tail += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Unroll one image's padded patches into a `(cin*kh*kw, oh*ow)` matrix so
/// the convolution becomes a plain matrix product with long contiguous rows.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cols: &mut [T],
    cin: usize,
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let xbase = ci * ih * iw;
        for khi in 0..kh {
            for kwi in 0..kw {
                let crow = ((ci * kh + khi) * kw + kwi) * ohw;
                for ho in 0..oh {
                    let ihh = (ho * stride + khi) as i64 - pad as i64;
                    let dst = &mut cols[crow + ho * ow..crow + (ho + 1) * ow];
                    if ihh < 0 || ihh >= ih as i64 {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let xrow = xbase + ihh as usize * iw;
                    if stride == 1 && kwi >= pad && iw + pad >= kwi + ow {
                        let off = kwi - pad;
                        dst.copy_from_slice(&x[xrow + off..xrow + off + ow]);
                    } else {
                        for (wo, d) in dst.iter_mut().enumerate() {
                            let iww = (wo * stride + kwi) as i64 - pad as i64;
                            *d = if iww < 0 || iww >= iw as i64 {
                                T::zero()
                            } else {
                                x[xrow + iww as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    dcols: &[T],
    dx: &mut [T],
    cin: usize,
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let xbase = ci * ih * iw;
        for khi in 0..kh {
            for kwi in 0..kw {
                let crow = ((ci * kh + khi) * kw + kwi) * ohw;
                for ho in 0..oh {
                    let ihh = (ho * stride + khi) as i64 - pad as i64;
                    if ihh < 0 || ihh >= ih as i64 {
                        continue;
                    }
                    let xrow = xbase + ihh as usize * iw;
                    let src = &dcols[crow + ho * ow..crow + (ho + 1) * ow];
                    if stride == 1 && kwi >= pad && iw + pad >= kwi + ow {
                        let off = kwi - pad;
                        let d = &mut dx[xrow + off..xrow + off + ow];
                        for (dv, &sv) in d.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    } else {
                        for (wo, &sv) in src.iter().enumerate() {
                            let iww = (wo * stride + kwi) as i64 - pad as i64;
                            if iww >= 0 && iww < iw as i64 {
                                dx[xrow + iww as usize] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (bs, cin, ih, iw) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, _cin2, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(w.shape[1], cin, "conv channel mismatch");
    let oh = (ih + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let (ck, ohw) = (cin * kh * kw, oh * ow);
    let mut out = vec![T::zero(); bs * cout * ohw];
    let mut cols = vec![T::zero(); ck * ohw];
    for bi in 0..bs {
        im2col(
            &x.data[bi * cin * ih * iw..(bi + 1) * cin * ih * iw],
            &mut cols,
            cin,
            ih,
            iw,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        // out[co] = bias[co] + sum_k w[co,k] * cols[k]
        for co in 0..cout {
            let orow = &mut out[(bi * cout + co) * ohw..(bi * cout + co + 1) * ohw];
            orow.iter_mut().for_each(|v| *v = b.data[co]);
            let wrow = &w.data[co * ck..(co + 1) * ck];
            for (k, &wv) in wrow.iter().enumerate() {
                let crow = &cols[k * ohw..(k + 1) * ohw];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o += wv * cv;
                }
            }
        }
    }
    Tensor::from_vec(&[bs, cout, oh, ow], out)
}

pub fn conv2d_backward<T: Real>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Vec<Tensor<T>> {
    let (bs, cin, ih, iw) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (oh, ow) = (g.shape[2], g.shape[3]);
    let (ck, ohw) = (cin * kh * kw, oh * ow);
    let mut dx = Tensor::zeros(&x.shape);
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[cout]);
    let mut cols = vec![T::zero(); ck * ohw];
    let mut dcols = vec![T::zero(); ck * ohw];
    for bi in 0..bs {
        im2col(
            &x.data[bi * cin * ih * iw..(bi + 1) * cin * ih * iw],
            &mut cols,
            cin,
            ih,
            iw,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        dcols.iter_mut().for_each(|v| *v = T::zero());
        for co in 0..cout {
            let grow = &g.data[(bi * cout + co) * ohw..(bi * cout + co + 1) * ohw];
            let mut acc = T::zero();
            for &gv in grow {
                acc += gv;
            }
            db.data[co] += acc;
            let wrow = &w.data[co * ck..(co + 1) * ck];
            let dwrow = &mut dw.data[co * ck..(co + 1) * ck];
            for k in 0..ck {
                let crow = &cols[k * ohw..(k + 1) * ohw];
                dwrow[k] += dot_lanes(grow, crow);
                // dcols[k] += w[co,k] * g[co]
                let wv = wrow[k];
                let drow = &mut dcols[k * ohw..(k + 1) * ohw];
                for (d, &gv) in drow.iter_mut().zip(grow) {
                    *d += wv * gv;
                }
            }
        }
        col2im_add(
            &dcols,
            &mut dx.data[bi * cin * ih * iw..(bi + 1) * cin * ih * iw],
            cin,
            ih,
            iw,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
    }
    vec![dx, dw, db]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    /// Central finite differences against analytic gradients of a scalar
    /// function built from graph ops. The builder is re-run per evaluation.
    fn grad_check<F>(build: F, inputs: &[Tensor<f64>], tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eps = 1e-6;
        for (ii, input) in inputs.iter().enumerate() {
            let analytic = grads[vars[ii]]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&input.shape));
            for k in 0..input.data.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vars2: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == ii {
                                t.data[k] += delta;
                            }
                            g2.leaf(t)
                        })
                        .collect();
                    let l = build(&mut g2, &vars2);
                    g2.value(l).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic.data[k];
                let denom = an.abs().max(fd.abs());
                let err = if denom > 1e-6 {
                    (an - fd).abs() / denom
                } else {
                    (an - fd).abs()
                };
                assert!(
                    err < tol,
                    "input {ii} elem {k}: analytic {an} vs fd {fd} (err {err})"
                );
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn conv2d_gradients() {
        for (stride, pad) in [(1, 1), (2, 1)] {
            grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad);
                    let y = g.relu(y);
                    g.mean_all(y)
                },
                &[randn(&[2, 2, 6, 6], 1), randn(&[3, 2, 3, 3], 2), randn(&[3], 3)],
                1e-6,
            );
        }
    }

    #[test]
    fn linear_and_bn_gradients() {
        grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]);
                let (y, _, _) = g.batch_norm(y, v[3], v[4], 1e-5);
                let y = g.relu(y);
                g.mean_all(y)
            },
            &[
                randn(&[4, 3], 10),
                randn(&[5, 3], 11),
                randn(&[5], 12),
                randn(&[5], 13),
                randn(&[5], 14),
            ],
            1e-6,
        );
    }

    #[test]
    fn norm_with_stats_gradients() {
        let mean = randn(&[3], 20);
        let var = randn(&[3], 21).map(|v| v.abs() + 0.5);
        grad_check(
            move |g, v| {
                let y = g.norm_with_stats(v[0], v[1], v[2], &mean, &var, 1e-5);
                g.mean_all(y)
            },
            &[randn(&[2, 3, 4], 22), randn(&[3], 23), randn(&[3], 24)],
            1e-6,
        );
    }

    #[test]
    fn softmax_nll_and_gather_gradients() {
        let pairs = vec![(0usize, 0.3, 0.7), (1, 1.0, 1.0), (2, 1.6, 0.2)];
        grad_check(
            move |g, v| {
                let nll = g.neg_log_softmax_rows(v[0], 1.0 / 0.3);
                g.gather_bilinear_mean(nll, pairs.clone(), (2, 2))
            },
            &[randn(&[3, 4], 30)],
            1e-6,
        );
    }

    #[test]
    fn cosine_and_normalize_gradients() {
        let k = randn(&[3, 5], 40);
        grad_check(
            move |g, v| {
                let c = g.cos_rows_const(v[0], k.clone(), 1e-8);
                let m = g.mean_all(c);
                g.scalar_affine(m, -2.0, 2.0)
            },
            &[randn(&[3, 5], 41)],
            1e-6,
        );
        let k2 = randn(&[2, 4], 42);
        grad_check(
            move |g, v| {
                let n = g.l2_normalize_rows(v[0], 1e-8);
                let m = g.matmul_nt_const(n, k2.clone());
                g.mean_all(m)
            },
            &[randn(&[3, 4], 43)],
            1e-6,
        );
    }

    #[test]
    fn warp_pool_slice_gradients() {
        let coords = vec![(0.25, 0.75), (1.0, 0.0)];
        grad_check(
            move |g, v| {
                let r = g.warp_rows_bilinear(v[0], coords.clone(), (2, 2));
                g.mean_all(r)
            },
            &[randn(&[4, 3], 50)],
            1e-6,
        );
        grad_check(
            |g, v| {
                let p = g.global_avg_pool(v[0]);
                g.mean_all(p)
            },
            &[randn(&[2, 3, 2, 2], 51)],
            1e-6,
        );
        grad_check(
            |g, v| {
                let s = g.batch_slice(v[0], 1);
                let r = g.chw_to_rows(s);
                let a = g.mean_all(r);
                let b = g.mean_all(v[0]);
                g.affine2(a, b, 0.7, 0.3)
            },
            &[randn(&[3, 2, 2, 3], 52)],
            1e-6,
        );
    }

    #[test]
    fn shared_parent_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0f64));
        let y = g.affine2(x, x, 1.0, 2.0); // 3x
        let grads = g.backward(y);
        assert_eq!(grads[x].as_ref().unwrap().item(), 3.0);
    }

    #[test]
    fn bilinear_integer_coordinate_is_node_value() {
        let row = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        for (idx, (u, v)) in [(0.0, 0.0), (2.0, 0.0), (0.0, 1.0), (2.0, 1.0)]
            .iter()
            .enumerate()
        {
            let val = bilinear_read(&row, 2, 3, *u, *v);
            let expect = match idx {
                0 => 1.0,
                1 => 3.0,
                2 => 4.0,
                _ => 6.0,
            };
            assert_eq!(val, expect);
        }
        // midpoint linearity
        assert_eq!(bilinear_read(&row, 2, 3, 0.5, 0.0), 1.5);
        assert_eq!(bilinear_read(&[2.0f64, 6.0], 1, 2, 0.25, 0.0), 3.0);
    }
}
