//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! Forward values are computed eagerly as ops are recorded, so node creation
//! order is already a topological order and `backward` is a single reverse
//! sweep. The op set is exactly what the networks in this crate need; every
//! op's gradient is covered by finite-difference tests.
//!
//! Convention for shapes in comments: `[C,H,W]` feature maps, `[R,C]`
//! matrices, `[n]` vectors, `[1]` scalars.

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Silu(NodeId),
    AddChannelBias { x: NodeId, bias: NodeId },
    AddRowBias { x: NodeId, bias: NodeId },
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    ConcatChannels(Vec<NodeId>),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    ReplicatePad2d { x: NodeId, pad: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64 },
    SoftmaxRows(NodeId),
    RowMean(NodeId),
    MeanRows { x: NodeId, rows: Vec<usize> },
    Reshape(NodeId),
    Transpose(NodeId),
    AvgPool2(NodeId),
    ResizeBilinear { x: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    L2NormalizeRows(NodeId),
    MseLoss { x: NodeId, target: Tensor<T> },
    CrossEntropy { logits: NodeId, labels: Vec<Option<usize>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    // ------------------------------------------------------------------
    // Elementwise and affine ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b)).expect("add shapes");
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let value = self.value(x).scale(s);
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, T::from_f64(-1.0));
        self.add(a, nb)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.needs(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    /// `x: [C,H,W]` plus `bias: [C]`, broadcast over spatial positions.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "add_channel_bias wants [C,H,W], got {xs:?}");
        let c = xs[0];
        let hw = xs[1] * xs[2];
        assert_eq!(self.value(bias).shape(), &[c], "bias must be [C]");
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(bias).data();
        for ci in 0..c {
            for i in 0..hw {
                data[ci * hw + i] = data[ci * hw + i] + bd[ci];
            }
        }
        let value = Tensor::from_vec(&xs, data).unwrap();
        let rg = self.needs(&[x, bias]);
        self.push(value, Op::AddChannelBias { x, bias }, rg)
    }

    /// `x: [R,C]` plus `bias: [C]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "add_row_bias wants [R,C], got {xs:?}");
        let (r, c) = (xs[0], xs[1]);
        assert_eq!(self.value(bias).shape(), &[c], "bias must be [C]");
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(bias).data();
        for ri in 0..r {
            for ci in 0..c {
                data[ri * c + ci] = data[ri * c + ci] + bd[ci];
            }
        }
        let value = Tensor::from_vec(&xs, data).unwrap();
        let rg = self.needs(&[x, bias]);
        self.push(value, Op::AddRowBias { x, bias }, rg)
    }

    // ------------------------------------------------------------------
    // Matrix ops
    // ------------------------------------------------------------------

    /// `a: [m,k] · b: [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, false)
    }

    /// `a: [m,k] · b: [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let asp = self.value(a).shape().to_vec();
        let bsp = self.value(b).shape().to_vec();
        assert_eq!(asp.len(), 2, "matmul lhs must be 2-d, got {asp:?}");
        assert_eq!(bsp.len(), 2, "matmul rhs must be 2-d, got {bsp:?}");
        let (m, k) = (asp[0], asp[1]);
        let n = if trans_b {
            assert_eq!(bsp[1], k, "matmul_nt: {asp:?} x {bsp:?}");
            bsp[0]
        } else {
            assert_eq!(bsp[0], k, "matmul: {asp:?} x {bsp:?}");
            bsp[1]
        };
        let mut out = vec![T::zero(); m * n];
        if trans_b {
            mm_nt(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        } else {
            mm(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        }
        let value = Tensor::from_vec(&[m, n], out).unwrap();
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "slice_cols wants [R,C]");
        let (r, c) = (xs[0], xs[1]);
        assert!(start + len <= c, "slice_cols {start}+{len} > {c}");
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for ri in 0..r {
            data.extend_from_slice(&xd[ri * c + start..ri * c + start + len]);
        }
        let value = Tensor::from_vec(&[r, len], data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, Op::SliceCols { x, start, len }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).shape()[0];
        let total: usize = parts.iter().map(|p| self.value(*p).shape()[1]).sum();
        for p in parts {
            assert_eq!(self.value(*p).shape()[0], r, "concat_cols row mismatch");
        }
        let mut data = Vec::with_capacity(r * total);
        for ri in 0..r {
            for p in parts {
                let c = self.value(*p).shape()[1];
                let pd = self.value(*p).data();
                data.extend_from_slice(&pd[ri * c..(ri + 1) * c]);
            }
        }
        let value = Tensor::from_vec(&[r, total], data).unwrap();
        let rg = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Concatenates `[C_i,H,W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let s0 = self.value(parts[0]).shape().to_vec();
        assert_eq!(s0.len(), 3, "concat_channels wants [C,H,W]");
        let (h, w) = (s0[1], s0[2]);
        let mut data = Vec::new();
        let mut c_total = 0;
        for p in parts {
            let ps = self.value(*p).shape();
            assert_eq!(
                (ps[1], ps[2]),
                (h, w),
                "concat_channels spatial mismatch: {ps:?} vs {s0:?}"
            );
            c_total += ps[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::from_vec(&[c_total, h, w], data).unwrap();
        let rg = self.needs(parts);
        self.push(value, Op::ConcatChannels(parts.to_vec()), rg)
    }

    // ------------------------------------------------------------------
    // Spatial ops
    // ------------------------------------------------------------------

    /// Zero-padded 2-d convolution. `x: [Cin,H,W]`, `w: [Cout,Cin,kh,kw]`,
    /// optional `b: [Cout]`.
    /// Valid output-column range for one kernel column: every `ox` in
    /// `lo..hi` reads an in-bounds input column `ox * stride + kx - pad`.
    fn conv_span(kx: usize, pad: usize, stride: usize, wd: usize, ow: usize) -> (usize, usize) {
        let lo = if kx >= pad {
            0
        } else {
            (pad - kx + stride - 1) / stride
        };
        if kx > wd - 1 + pad {
            let end = lo.min(ow);
            return (end, end);
        }
        let hi = ((wd - 1 + pad - kx) / stride + 1).min(ow);
        (lo.min(hi), hi)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,I,kh,kw], got {ws:?}");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch: {ws:?} vs {xs:?}");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let xd = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); cout * oh * ow];
        for oc in 0..cout {
            for ic in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wt = wv[((oc * cin + ic) * kh + ky) * kw + kx];
                        if wt == T::zero() {
                            continue;
                        }
                        let (lo, hi) = Self::conv_span(kx, pad, stride, wd, ow);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = (ic * h + iy as usize) * wd;
                            let orow = (oc * oh + oy) * ow;
                            if stride == 1 && hi > lo {
                                // Branch-free span so the loop vectorizes.
                                let off = (xrow + lo + kx) as isize - pad as isize;
                                let src = &xd[off as usize..][..hi - lo];
                                let dst = &mut out[orow + lo..][..hi - lo];
                                for i in 0..hi - lo {
                                    dst[i] = dst[i] + wt * src[i];
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    out[orow + ox] = out[orow + ox] + wt * xd[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bid) = b {
            assert_eq!(self.value(bid).shape(), &[cout], "conv2d bias must be [Cout]");
            let bd = self.value(bid).data();
            for oc in 0..cout {
                for i in 0..oh * ow {
                    out[oc * oh * ow + i] = out[oc * oh * ow + i] + bd[oc];
                }
            }
        }
        let value = Tensor::from_vec(&[cout, oh, ow], out).unwrap();
        let mut ids = vec![x, w];
        if let Some(bid) = b {
            ids.push(bid);
        }
        let rg = self.needs(&ids);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Edge-replicating padding by `pad` on both spatial axes.
    pub fn replicate_pad2d(&mut self, x: NodeId, pad: usize) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "replicate_pad2d wants [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (nh, nw) = (h + 2 * pad, w + 2 * pad);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); c * nh * nw];
        for ci in 0..c {
            for y in 0..nh {
                let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                for xw in 0..nw {
                    let sx = (xw as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                    data[(ci * nh + y) * nw + xw] = xd[(ci * h + sy) * w + sx];
                }
            }
        }
        let value = Tensor::from_vec(&[c, nh, nw], data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, Op::ReplicatePad2d { x, pad }, rg)
    }

    /// GroupNorm over `[C,H,W]` with biased variance and per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "group_norm wants [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(groups >= 1 && c % groups == 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let cpg = c / groups;
        let m = cpg * h * w;
        let mut data = vec![T::zero(); c * h * w];
        for g in 0..groups {
            let base = g * cpg * h * w;
            let (mu, var) = moments(&xd[base..base + m]);
            let inv = T::one() / (var + T::from_f64(eps)).sqrt();
            for j in 0..m {
                let ch = g * cpg + j / (h * w);
                let xhat = (xd[base + j] - mu) * inv;
                data[base + j] = gd[ch] * xhat + bd[ch];
            }
        }
        let value = Tensor::from_vec(&xs, data).unwrap();
        let rg = self.needs(&[x, gamma, beta]);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, eps }, rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "softmax_rows wants [R,C]");
        let (r, c) = (xs[0], xs[1]);
        assert!(c > 0, "softmax over zero columns is undefined");
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for ri in 0..r {
            let row = &xd[ri * c..(ri + 1) * c];
            let m = row.iter().cloned().fold(row[0], T::max);
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (row[ci] - m).exp();
                data[ri * c + ci] = e;
                sum = sum + e;
            }
            for ci in 0..c {
                data[ri * c + ci] = data[ri * c + ci] / sum;
            }
        }
        let value = Tensor::from_vec(&xs, data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Mean over columns: `[R,C] -> [R]`.
    pub fn row_mean(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "row_mean wants [R,C]");
        let (r, c) = (xs[0], xs[1]);
        assert!(c > 0);
        let xd = self.value(x).data();
        let inv = T::from_f64(1.0 / c as f64);
        let data = (0..r)
            .map(|ri| {
                let mut s = T::zero();
                for ci in 0..c {
                    s = s + xd[ri * c + ci];
                }
                s * inv
            })
            .collect();
        let value = Tensor::from_vec(&[r], data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, Op::RowMean(x), rg)
    }

    /// Mean of the selected rows: `[R,C] -> [C]`.
    pub fn mean_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "mean_rows wants [R,C]");
        assert!(!rows.is_empty(), "mean_rows needs at least one row");
        let (r, c) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let inv = T::from_f64(1.0 / rows.len() as f64);
        let mut data = vec![T::zero(); c];
        for &ri in rows {
            assert!(ri < r, "mean_rows row {ri} out of range {r}");
            for ci in 0..c {
                data[ci] = data[ci] + xd[ri * c + ci];
            }
        }
        for v in &mut data {
            *v = *v * inv;
        }
        let value = Tensor::from_vec(&[c], data).unwrap();
        let rg = self.needs(&[x]);
        self.push(
            value,
            Op::MeanRows { x, rows: rows.to_vec() },
            rg,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self.value(x).reshaped(shape).expect("reshape numel");
        let rg = self.needs(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Matrix transpose, `[R,C]` to `[C,R]`.
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "transpose wants [R,C]");
        let (r, c) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let value = Tensor::from_vec(&[c, r], data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "avg_pool2 wants [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let q = T::from_f64(0.25);
        let mut data = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = |dy: usize, dx: usize| (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
                    data[(ci * oh + oy) * ow + ox] =
                        (xd[i(0, 0)] + xd[i(0, 1)] + xd[i(1, 0)] + xd[i(1, 1)]) * q;
                }
            }
        }
        let value = Tensor::from_vec(&[c, oh, ow], data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, Op::AvgPool2(x), rg)
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "resize_bilinear wants [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(out_h > 0 && out_w > 0);
        let xd = self.value(x).data();
        let ys = bilinear_taps(h, out_h);
        let xsamp = bilinear_taps(w, out_w);
        let mut data = vec![T::zero(); c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                let (y0, y1, wy) = ys[oy];
                let wyt = T::from_f64(wy);
                for ox in 0..out_w {
                    let (x0, x1, wx) = xsamp[ox];
                    let wxt = T::from_f64(wx);
                    let v00 = xd[(ci * h + y0) * w + x0];
                    let v01 = xd[(ci * h + y0) * w + x1];
                    let v10 = xd[(ci * h + y1) * w + x0];
                    let v11 = xd[(ci * h + y1) * w + x1];
                    let top = v00 + (v01 - v00) * wxt;
                    let bot = v10 + (v11 - v10) * wxt;
                    data[(ci * out_h + oy) * out_w + ox] = top + (bot - top) * wyt;
                }
            }
        }
        let value = Tensor::from_vec(&[c, out_h, out_w], data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, Op::ResizeBilinear { x }, rg)
    }

    /// Row gather: `table: [V,D]`, `ids` of length n -> `[n,D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let ts = self.value(table).shape().to_vec();
        assert_eq!(ts.len(), 2, "embedding table must be [V,D]");
        let (v, d) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "token id {id} out of vocab {v}");
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], data).unwrap();
        let rg = self.needs(&[table]);
        self.push(
            value,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Rows scaled to unit L2 norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "l2_normalize_rows wants [R,C]");
        let (r, c) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for ri in 0..r {
            let row = &xd[ri * c..(ri + 1) * c];
            let mut n2 = T::zero();
            for &v in row {
                n2 = n2 + v * v;
            }
            if n2 > T::zero() {
                let inv = T::one() / n2.sqrt();
                for ci in 0..c {
                    data[ri * c + ci] = row[ci] * inv;
                }
            }
        }
        let value = Tensor::from_vec(&xs, data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, Op::L2NormalizeRows(x), rg)
    }

    // ------------------------------------------------------------------
    // Losses
    // ------------------------------------------------------------------

    /// Mean squared error against a constant target -> `[1]`.
    pub fn mse_loss(&mut self, x: NodeId, target: &Tensor<T>) -> NodeId {
        assert_eq!(
            self.value(x).shape(),
            target.shape(),
            "mse_loss shape mismatch"
        );
        let n = target.numel().max(1);
        let mut acc = T::zero();
        for (a, b) in self.value(x).data().iter().zip(target.data()) {
            let d = *a - *b;
            acc = acc + d * d;
        }
        let value = Tensor::scalar(acc / T::from_f64(n as f64));
        let rg = self.needs(&[x]);
        self.push(
            value,
            Op::MseLoss { x, target: target.clone() },
            rg,
        )
    }

    /// Mean negative log-likelihood over non-ignored rows -> `[1]`.
    /// `labels[r] = None` marks an ignored row; all-ignored input yields 0.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[Option<usize>]) -> NodeId {
        let xs = self.value(logits).shape().to_vec();
        assert_eq!(xs.len(), 2, "cross_entropy wants [R,K] logits");
        let (r, k) = (xs[0], xs[1]);
        assert_eq!(labels.len(), r, "labels length must match logit rows");
        let xd = self.value(logits).data();
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for (ri, lab) in labels.iter().enumerate() {
            let Some(y) = lab else { continue };
            assert!(*y < k, "label {y} out of range {k}");
            let row = &xd[ri * k..(ri + 1) * k];
            let m = row.iter().cloned().fold(row[0], T::max);
            let mut sum = T::zero();
            for &v in row {
                sum = sum + (v - m).exp();
            }
            let lse = m.as_f64() + sum.as_f64().ln();
            acc += lse - row[*y].as_f64();
            count += 1;
        }
        let value = Tensor::scalar(T::from_f64(if count == 0 { 0.0 } else { acc / count as f64 }));
        let rg = self.needs(&[logits]);
        self.push(
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            rg,
        )
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a `[1]`-shaped loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            let put_back = matches!(self.nodes[idx].op, Op::Leaf);
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g.clone());
                }
                Op::Scale(x, s) => {
                    self.acc(&mut grads, *x, g.scale(*s));
                }
                Op::Silu(x) => {
                    let xd = self.value(*x).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(&gi, &xi)| {
                            let s = sigmoid(xi);
                            gi * s * (T::one() + xi * (T::one() - s))
                        })
                        .collect();
                    self.acc(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.value(*x).shape(), data).unwrap(),
                    );
                }
                Op::AddChannelBias { x, bias } => {
                    let xs = self.value(*x).shape();
                    let (c, hw) = (xs[0], xs[1] * xs[2]);
                    let mut gb = vec![T::zero(); c];
                    for ci in 0..c {
                        for i in 0..hw {
                            gb[ci] = gb[ci] + g.data()[ci * hw + i];
                        }
                    }
                    self.acc(&mut grads, *x, g.clone());
                    self.acc(&mut grads, *bias, Tensor::from_vec(&[c], gb).unwrap());
                }
                Op::AddRowBias { x, bias } => {
                    let xs = self.value(*x).shape();
                    let (r, c) = (xs[0], xs[1]);
                    let mut gb = vec![T::zero(); c];
                    for ri in 0..r {
                        for ci in 0..c {
                            gb[ci] = gb[ci] + g.data()[ri * c + ci];
                        }
                    }
                    self.acc(&mut grads, *x, g.clone());
                    self.acc(&mut grads, *bias, Tensor::from_vec(&[c], gb).unwrap());
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = {
                        let s = self.value(*a).shape();
                        (s[0], s[1])
                    };
                    let n = g.shape()[1];
                    let ad = self.value(*a).data();
                    let bd = self.value(*b).data();
                    if !*trans_b {
                        // y = a·b, b: [k,n]
                        let mut da = vec![T::zero(); m * k];
                        mm_nt(g.data(), m, n, bd, k, &mut da);
                        let mut db = vec![T::zero(); k * n];
                        mm_tn(ad, m, k, g.data(), n, &mut db);
                        self.acc(&mut grads, *a, Tensor::from_vec(&[m, k], da).unwrap());
                        self.acc(&mut grads, *b, Tensor::from_vec(&[k, n], db).unwrap());
                    } else {
                        // y = a·b^T, b: [n,k]
                        let mut da = vec![T::zero(); m * k];
                        mm(g.data(), m, n, bd, k, &mut da);
                        let mut db = vec![T::zero(); n * k];
                        mm_tn(g.data(), m, n, ad, k, &mut db);
                        self.acc(&mut grads, *a, Tensor::from_vec(&[m, k], da).unwrap());
                        self.acc(&mut grads, *b, Tensor::from_vec(&[n, k], db).unwrap());
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xs = self.value(*x).shape();
                    let (r, c) = (xs[0], xs[1]);
                    let mut gx = vec![T::zero(); r * c];
                    for ri in 0..r {
                        for j in 0..*len {
                            gx[ri * c + start + j] = g.data()[ri * len + j];
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&[r, c], gx).unwrap());
                }
                Op::ConcatCols(parts) => {
                    let r = g.shape()[0];
                    let total = g.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).shape()[1];
                        let mut gp = Vec::with_capacity(r * c);
                        for ri in 0..r {
                            gp.extend_from_slice(
                                &g.data()[ri * total + offset..ri * total + offset + c],
                            );
                        }
                        self.acc(&mut grads, *p, Tensor::from_vec(&[r, c], gp).unwrap());
                        offset += c;
                    }
                }
                Op::ConcatChannels(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let ps = self.value(*p).shape().to_vec();
                        let n = ps.iter().product::<usize>();
                        let gp = g.data()[offset..offset + n].to_vec();
                        self.acc(&mut grads, *p, Tensor::from_vec(&ps, gp).unwrap());
                        offset += n;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xs = self.value(*x).shape().to_vec();
                    let ws = self.value(*w).shape().to_vec();
                    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                    let (oh, ow) = (g.shape()[1], g.shape()[2]);
                    let xd = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let gd = g.data();
                    let mut gx = vec![T::zero(); cin * h * wd];
                    let mut gw = vec![T::zero(); cout * cin * kh * kw];
                    for oc in 0..cout {
                        for ic in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let widx = ((oc * cin + ic) * kh + ky) * kw + kx;
                                    let wt = wv[widx];
                                    let mut wg = T::zero();
                                    let (lo, hi) = Self::conv_span(kx, *pad, *stride, wd, ow);
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = (ic * h + iy as usize) * wd;
                                        let orow = (oc * oh + oy) * ow;
                                        if *stride == 1 && hi > lo {
                                            // Branch-free span; vectorizes.
                                            let off =
                                                (xrow + lo + kx) as isize - *pad as isize;
                                            let xsrc = &xd[off as usize..][..hi - lo];
                                            let gsrc = &gd[orow + lo..][..hi - lo];
                                            let gxrow =
                                                &mut gx[off as usize..][..hi - lo];
                                            for i in 0..hi - lo {
                                                let gv = gsrc[i];
                                                wg = wg + gv * xsrc[i];
                                                gxrow[i] = gxrow[i] + gv * wt;
                                            }
                                        } else {
                                            for ox in lo..hi {
                                                let ix = ox * stride + kx - pad;
                                                let gv = gd[orow + ox];
                                                wg = wg + gv * xd[xrow + ix];
                                                gx[xrow + ix] = gx[xrow + ix] + gv * wt;
                                            }
                                        }
                                    }
                                    gw[widx] = gw[widx] + wg;
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&xs, gx).unwrap());
                    self.acc(&mut grads, *w, Tensor::from_vec(&ws, gw).unwrap());
                    if let Some(bid) = b {
                        let mut gb = vec![T::zero(); cout];
                        for oc in 0..cout {
                            for i in 0..oh * ow {
                                gb[oc] = gb[oc] + gd[oc * oh * ow + i];
                            }
                        }
                        self.acc(&mut grads, *bid, Tensor::from_vec(&[cout], gb).unwrap());
                    }
                }
                Op::ReplicatePad2d { x, pad } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (nh, nw) = (h + 2 * pad, w + 2 * pad);
                    let mut gx = vec![T::zero(); c * h * w];
                    for ci in 0..c {
                        for y in 0..nh {
                            let sy = (y as isize - *pad as isize).clamp(0, h as isize - 1) as usize;
                            for xw in 0..nw {
                                let sx =
                                    (xw as isize - *pad as isize).clamp(0, w as isize - 1) as usize;
                                gx[(ci * h + sy) * w + sx] =
                                    gx[(ci * h + sy) * w + sx] + g.data()[(ci * nh + y) * nw + xw];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&xs, gx).unwrap());
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let cpg = c / groups;
                    let m = cpg * h * w;
                    let xd = self.value(*x).data();
                    let gd = self.value(*gamma).data();
                    let gg = g.data();
                    let mut gx = vec![T::zero(); c * h * w];
                    let mut ggamma = vec![T::zero(); c];
                    let mut gbeta = vec![T::zero(); c];
                    let minv = T::from_f64(1.0 / m as f64);
                    for gi in 0..*groups {
                        let base = gi * cpg * h * w;
                        let (mu, var) = moments(&xd[base..base + m]);
                        let inv = T::one() / (var + T::from_f64(*eps)).sqrt();
                        let mut mean_u = T::zero();
                        let mut mean_ux = T::zero();
                        for j in 0..m {
                            let ch = gi * cpg + j / (h * w);
                            let xhat = (xd[base + j] - mu) * inv;
                            let gout = gg[base + j];
                            ggamma[ch] = ggamma[ch] + gout * xhat;
                            gbeta[ch] = gbeta[ch] + gout;
                            let u = gout * gd[ch];
                            mean_u = mean_u + u;
                            mean_ux = mean_ux + u * xhat;
                        }
                        mean_u = mean_u * minv;
                        mean_ux = mean_ux * minv;
                        for j in 0..m {
                            let ch = gi * cpg + j / (h * w);
                            let xhat = (xd[base + j] - mu) * inv;
                            let u = gg[base + j] * gd[ch];
                            gx[base + j] = inv * (u - mean_u - xhat * mean_ux);
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&xs, gx).unwrap());
                    self.acc(&mut grads, *gamma, Tensor::from_vec(&[c], ggamma).unwrap());
                    self.acc(&mut grads, *beta, Tensor::from_vec(&[c], gbeta).unwrap());
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    let mut gx = vec![T::zero(); r * c];
                    for ri in 0..r {
                        let yrow = &y.data()[ri * c..(ri + 1) * c];
                        let grow = &g.data()[ri * c..(ri + 1) * c];
                        let mut dot = T::zero();
                        for ci in 0..c {
                            dot = dot + yrow[ci] * grow[ci];
                        }
                        for ci in 0..c {
                            gx[ri * c + ci] = yrow[ci] * (grow[ci] - dot);
                        }
                    }
                    self.acc(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.value(*x).shape(), gx).unwrap(),
                    );
                }
                Op::RowMean(x) => {
                    let xs = self.value(*x).shape();
                    let (r, c) = (xs[0], xs[1]);
                    let inv = T::from_f64(1.0 / c as f64);
                    let mut gx = vec![T::zero(); r * c];
                    for ri in 0..r {
                        let gr = g.data()[ri] * inv;
                        for ci in 0..c {
                            gx[ri * c + ci] = gr;
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&[r, c], gx).unwrap());
                }
                Op::MeanRows { x, rows } => {
                    let xs = self.value(*x).shape();
                    let (r, c) = (xs[0], xs[1]);
                    let inv = T::from_f64(1.0 / rows.len() as f64);
                    let mut gx = vec![T::zero(); r * c];
                    for &ri in rows {
                        for ci in 0..c {
                            gx[ri * c + ci] = gx[ri * c + ci] + g.data()[ci] * inv;
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&[r, c], gx).unwrap());
                }
                Op::Reshape(x) => {
                    let gx = g.reshaped(self.value(*x).shape()).unwrap();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Transpose(x) => {
                    let gs = g.shape();
                    let (r, c) = (gs[0], gs[1]);
                    let gd = g.data();
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] = gd[i * c + j];
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&[c, r], gx).unwrap());
                }
                Op::AvgPool2(x) => {
                    let xs = self.value(*x).shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let q = T::from_f64(0.25);
                    let mut gx = vec![T::zero(); c * h * w];
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data()[(ci * oh + oy) * ow + ox] * q;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        gx[(ci * h + 2 * oy + dy) * w + 2 * ox + dx] = gx
                                            [(ci * h + 2 * oy + dy) * w + 2 * ox + dx]
                                            + gv;
                                    }
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&xs, gx).unwrap());
                }
                Op::ResizeBilinear { x } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (g.shape()[1], g.shape()[2]);
                    let ys = bilinear_taps(h, oh);
                    let xsamp = bilinear_taps(w, ow);
                    let mut gx = vec![T::zero(); c * h * w];
                    for ci in 0..c {
                        for oy in 0..oh {
                            let (y0, y1, wy) = ys[oy];
                            for ox in 0..ow {
                                let (x0, x1, wx) = xsamp[ox];
                                let gv = g.data()[(ci * oh + oy) * ow + ox];
                                let wyt = T::from_f64(wy);
                                let wxt = T::from_f64(wx);
                                let a = (T::one() - wyt) * (T::one() - wxt);
                                let b = (T::one() - wyt) * wxt;
                                let cc = wyt * (T::one() - wxt);
                                let d = wyt * wxt;
                                gx[(ci * h + y0) * w + x0] = gx[(ci * h + y0) * w + x0] + gv * a;
                                gx[(ci * h + y0) * w + x1] = gx[(ci * h + y0) * w + x1] + gv * b;
                                gx[(ci * h + y1) * w + x0] = gx[(ci * h + y1) * w + x0] + gv * cc;
                                gx[(ci * h + y1) * w + x1] = gx[(ci * h + y1) * w + x1] + gv * d;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&xs, gx).unwrap());
                }
                Op::Embedding { table, ids } => {
                    let ts = self.value(*table).shape().to_vec();
                    let d = ts[1];
                    let mut gt = vec![T::zero(); ts[0] * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g.data()[row * d + j];
                        }
                    }
                    self.acc(&mut grads, *table, Tensor::from_vec(&ts, gt).unwrap());
                }
                Op::L2NormalizeRows(x) => {
                    let xs = self.value(*x).shape().to_vec();
                    let (r, c) = (xs[0], xs[1]);
                    let xd = self.value(*x).data();
                    let mut gx = vec![T::zero(); r * c];
                    for ri in 0..r {
                        let row = &xd[ri * c..(ri + 1) * c];
                        let grow = &g.data()[ri * c..(ri + 1) * c];
                        let mut n2 = T::zero();
                        let mut dot = T::zero();
                        for ci in 0..c {
                            n2 = n2 + row[ci] * row[ci];
                            dot = dot + row[ci] * grow[ci];
                        }
                        if n2 > T::zero() {
                            let n = n2.sqrt();
                            let n3 = n2 * n;
                            for ci in 0..c {
                                gx[ri * c + ci] = grow[ci] / n - row[ci] * dot / n3;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(&xs, gx).unwrap());
                }
                Op::MseLoss { x, target } => {
                    let n = target.numel().max(1);
                    let coef = g.item() * T::from_f64(2.0 / n as f64);
                    let data = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| coef * (a - b))
                        .collect();
                    self.acc(
                        &mut grads,
                        *x,
                        Tensor::from_vec(target.shape(), data).unwrap(),
                    );
                }
                Op::CrossEntropy { logits, labels } => {
                    let xs = self.value(*logits).shape().to_vec();
                    let (r, k) = (xs[0], xs[1]);
                    let xd = self.value(*logits).data();
                    let count = labels.iter().filter(|l| l.is_some()).count();
                    let mut gx = vec![T::zero(); r * k];
                    if count > 0 {
                        let coef = g.item() * T::from_f64(1.0 / count as f64);
                        for (ri, lab) in labels.iter().enumerate() {
                            let Some(y) = lab else { continue };
                            let row = &xd[ri * k..(ri + 1) * k];
                            let m = row.iter().cloned().fold(row[0], T::max);
                            let mut sum = T::zero();
                            for &v in row {
                                sum = sum + (v - m).exp();
                            }
                            for ci in 0..k {
                                let p = (row[ci] - m).exp() / sum;
                                let delta = if ci == *y { T::one() } else { T::zero() };
                                gx[ri * k + ci] = coef * (p - delta);
                            }
                        }
                    }
                    self.acc(&mut grads, *logits, Tensor::from_vec(&xs, gx).unwrap());
                }
            }
            if put_back {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Mean and biased variance of a slice.
fn moments<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mut mu = T::zero();
    for &v in xs {
        mu = mu + v;
    }
    mu = mu / n;
    let mut var = T::zero();
    for &v in xs {
        let d = v - mu;
        var = var + d * d;
    }
    (mu, var / n)
}

/// Source taps for bilinear resize with half-pixel centers, clamped to edges.
/// Returns `(lo, hi, weight_of_hi)` per output index.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

// ----------------------------------------------------------------------
// Dense helpers: out += a·b with optional transposes
// ----------------------------------------------------------------------

/// `out[m,n] += a[m,k] · b[k,n]`
fn mm<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]^T`
fn mm_nt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for l in 0..k {
                acc = acc + arow[l] * brow[l];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T · b[m,n]`
fn mm_tn<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

// ----------------------------------------------------------------------
// Finite-difference verification
// ----------------------------------------------------------------------

/// One named leaf tensor to be perturbed by [`finite_diff_max_rel_err`].
pub type FdInputs = Vec<(String, Tensor<f64>)>;

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn` rebuilds the graph from the given leaves and returns the loss
/// node (leaves are created for the caller in input order, all trainable).
/// Up to `per_tensor` evenly spaced elements of each input are perturbed with
/// step `1e-5 * max(1,|x|)`; the result is the largest
/// `|fd - analytic| / (|fd| + |analytic| + 1e-6)` seen.
pub fn finite_diff_max_rel_err(
    inputs: &FdInputs,
    per_tensor: usize,
    loss_fn: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let eval = |tensors: &FdInputs| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = tensors.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let loss = loss_fn(&mut g, &ids);
        let grads = g.backward(loss);
        let gs = ids
            .iter()
            .zip(tensors)
            .map(|(id, (_, t))| {
                grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        (g.value(loss).item(), gs)
    };

    let (_, analytic) = eval(inputs);
    let mut worst = 0.0f64;
    for (ti, (_, tensor)) in inputs.iter().enumerate() {
        let n = tensor.numel();
        if n == 0 {
            continue;
        }
        let step = (n / per_tensor.min(n).max(1)).max(1);
        for ei in (0..n).step_by(step) {
            let x0 = tensor.data()[ei];
            let h = 1e-5 * x0.abs().max(1.0);
            let mut plus = inputs.clone();
            plus[ti].1.data_mut()[ei] = x0 + h;
            let mut minus = inputs.clone();
            minus[ti].1.data_mut()[ei] = x0 - h;
            let (lp, _) = {
                let mut g = Graph::<f64>::new();
                let ids: Vec<NodeId> = plus.iter().map(|(_, t)| g.leaf(t.clone())).collect();
                let loss = loss_fn(&mut g, &ids);
                (g.value(loss).item(), ())
            };
            let (lm, _) = {
                let mut g = Graph::<f64>::new();
                let ids: Vec<NodeId> = minus.iter().map(|(_, t)| g.leaf(t.clone())).collect();
                let loss = loss_fn(&mut g, &ids);
                (g.value(loss).item(), ())
            };
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[ti].data()[ei];
            let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    // Central differences at h = 1e-5 carry O(h^2 f''') truncation error, so
    // correct gradients can still show ~1e-6 relative error on curvy ops.
    // Wrong gradients show up orders of magnitude above this.
    const TOL: f64 = 1e-5;

    fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut r = rng::rng_from(seed);
        rng::normal_tensor(&mut r, shape)
    }

    /// FD-checks a loss built from named random leaves.
    fn check(inputs: FdInputs, loss_fn: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
        let err = finite_diff_max_rel_err(&inputs, 16, loss_fn);
        assert!(
            err <= TOL,
            "finite-difference mismatch: max rel err {err:.3e} > {TOL:.0e}"
        );
    }

    /// Reduces any node to a scalar via MSE against zeros, so every op can be
    /// checked through the same scalar loss.
    fn to_loss(g: &mut Graph<f64>, id: NodeId) -> NodeId {
        let zeros = Tensor::zeros(g.value(id).shape());
        g.mse_loss(id, &zeros)
    }

    #[test]
    fn grad_add_scale_silu() {
        check(
            vec![
                ("a".into(), randn(1, &[3, 4])),
                ("b".into(), randn(2, &[3, 4])),
            ],
            |g, ids| {
                let s = g.add(ids[0], ids[1]);
                let s = g.scale(s, 0.7);
                let s = g.silu(s);
                to_loss(g, s)
            },
        );
    }

    #[test]
    fn grad_biases() {
        check(
            vec![
                ("x".into(), randn(3, &[2, 3, 3])),
                ("cb".into(), randn(4, &[2])),
            ],
            |g, ids| {
                let y = g.add_channel_bias(ids[0], ids[1]);
                to_loss(g, y)
            },
        );
        check(
            vec![
                ("x".into(), randn(5, &[4, 3])),
                ("rb".into(), randn(6, &[3])),
            ],
            |g, ids| {
                let y = g.add_row_bias(ids[0], ids[1]);
                to_loss(g, y)
            },
        );
    }

    #[test]
    fn grad_matmul_both_layouts() {
        check(
            vec![
                ("a".into(), randn(7, &[3, 4])),
                ("b".into(), randn(8, &[4, 2])),
            ],
            |g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                to_loss(g, y)
            },
        );
        check(
            vec![
                ("a".into(), randn(9, &[3, 4])),
                ("b".into(), randn(10, &[2, 4])),
            ],
            |g, ids| {
                let y = g.matmul_nt(ids[0], ids[1]);
                to_loss(g, y)
            },
        );
    }

    #[test]
    fn grad_slice_concat() {
        check(
            vec![
                ("a".into(), randn(11, &[2, 5])),
                ("b".into(), randn(12, &[2, 3])),
            ],
            |g, ids| {
                let s = g.slice_cols(ids[0], 1, 3);
                let y = g.concat_cols(&[s, ids[1]]);
                to_loss(g, y)
            },
        );
        check(
            vec![
                ("a".into(), randn(13, &[2, 3, 3])),
                ("b".into(), randn(14, &[1, 3, 3])),
            ],
            |g, ids| {
                let y = g.concat_channels(&[ids[0], ids[1]]);
                to_loss(g, y)
            },
        );
    }

    #[test]
    fn grad_conv2d_stride_and_pad() {
        for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 3), (4, 0, 4), (1, 0, 1)] {
            check(
                vec![
                    ("x".into(), randn(15, &[2, 8, 8])),
                    ("w".into(), randn(16, &[3, 2, k, k])),
                    ("b".into(), randn(17, &[3])),
                ],
                move |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad);
                    to_loss(g, y)
                },
            );
        }
    }

    #[test]
    fn grad_replicate_pad() {
        check(vec![("x".into(), randn(18, &[2, 3, 4]))], |g, ids| {
            let y = g.replicate_pad2d(ids[0], 2);
            to_loss(g, y)
        });
    }

    #[test]
    fn grad_transpose() {
        check(vec![("x".into(), randn(45, &[3, 5]))], |g, ids| {
            let t = g.transpose(ids[0]);
            let y = g.matmul(t, ids[0]);
            to_loss(g, y)
        });
    }

    #[test]
    fn transpose_round_trip_is_identity() {
        let x = randn(46, &[4, 7]);
        let mut g = Graph::<f64>::new();
        let a = g.constant(x.clone());
        let t = g.transpose(a);
        let tt = g.transpose(t);
        assert_eq!(g.value(tt), &x);
        assert_eq!(g.value(t).shape(), &[7, 4]);
    }

    #[test]
    fn grad_group_norm() {
        check(
            vec![
                ("x".into(), randn(19, &[4, 3, 3])),
                ("gamma".into(), randn(20, &[4])),
                ("beta".into(), randn(21, &[4])),
            ],
            |g, ids| {
                let y = g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5);
                to_loss(g, y)
            },
        );
    }

    #[test]
    fn group_norm_moments_are_standardized() {
        // Pre-affine output within each group must have mean 0 and variance
        // close to 1 (shrunk slightly by eps).
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(22, &[6, 4, 4]));
        let gamma = g.constant(Tensor::filled(&[6], 1.0));
        let beta = g.constant(Tensor::zeros(&[6]));
        let y = g.group_norm(x, gamma, beta, 3, 1e-5);
        let yd = g.value(y).data();
        let m = 2 * 16;
        for grp in 0..3 {
            let slice = &yd[grp * m..(grp + 1) * m];
            let (mu, var) = moments(slice);
            assert!(mu.abs() < 1e-12, "group {grp} mean {mu}");
            assert!((var - 1.0).abs() < 1e-4, "group {grp} var {var}");
        }
    }

    #[test]
    fn grad_softmax_and_means() {
        check(vec![("x".into(), randn(23, &[3, 5]))], |g, ids| {
            let y = g.softmax_rows(ids[0]);
            to_loss(g, y)
        });
        check(vec![("x".into(), randn(24, &[3, 5]))], |g, ids| {
            let y = g.row_mean(ids[0]);
            let y = g.reshape(y, &[1, 3]);
            to_loss(g, y)
        });
        check(vec![("x".into(), randn(25, &[5, 4]))], |g, ids| {
            let y = g.mean_rows(ids[0], &[0, 2, 3]);
            let y = g.reshape(y, &[1, 4]);
            to_loss(g, y)
        });
    }

    #[test]
    fn grad_pool_and_resize() {
        check(vec![("x".into(), randn(26, &[2, 4, 4]))], |g, ids| {
            let y = g.avg_pool2(ids[0]);
            to_loss(g, y)
        });
        for (oh, ow) in [(8usize, 8usize), (3, 5), (4, 4)] {
            check(vec![("x".into(), randn(27, &[2, 4, 4]))], move |g, ids| {
                let y = g.resize_bilinear(ids[0], oh, ow);
                to_loss(g, y)
            });
        }
    }

    #[test]
    fn resize_identity_when_sizes_match() {
        let mut g = Graph::<f64>::new();
        let t = randn(28, &[3, 5, 7]);
        let x = g.constant(t.clone());
        let y = g.resize_bilinear(x, 5, 7);
        assert_eq!(g.value(y), &t, "same-size resize must be the identity");
    }

    #[test]
    fn grad_embedding_accumulates_repeats() {
        check(vec![("table".into(), randn(29, &[5, 3]))], |g, ids| {
            let y = g.embedding(ids[0], &[1, 3, 1, 0]);
            to_loss(g, y)
        });
    }

    #[test]
    fn grad_l2_normalize() {
        check(vec![("x".into(), randn(30, &[3, 4]))], |g, ids| {
            let y = g.l2_normalize_rows(ids[0]);
            to_loss(g, y)
        });
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        let y = g.l2_normalize_rows(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let loss = {
            let zeros = Tensor::filled(&[2, 3], 1.0);
            g.mse_loss(y, &zeros)
        };
        let grads = g.backward(loss);
        // Zero rows are a flat region: gradient must be exactly zero, not NaN.
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_cross_entropy_and_mse() {
        check(vec![("logits".into(), randn(31, &[4, 3]))], |g, ids| {
            g.cross_entropy(ids[0], &[Some(0), Some(2), None, Some(1)])
        });
        check(vec![("x".into(), randn(32, &[2, 3]))], |g, ids| {
            let target = randn(33, &[2, 3]);
            g.mse_loss(ids[0], &target)
        });
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(randn(34, &[2, 3]));
        let loss = g.cross_entropy(x, &[None, None]);
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = g.backward(loss);
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(randn(35, &[2, 2]));
        let b = g.constant(randn(36, &[2, 2]));
        let s = g.add(a, b);
        let loss = to_loss(&mut g, s);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none(), "constant leaves carry no grad");
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x; dy/dx = 2 exactly.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.add(x, x);
        let target = Tensor::scalar(0.0);
        let loss = g.mse_loss(y, &target);
        let grads = g.backward(loss);
        // d/dx (2x)^2 = 8x = 24.
        assert!((grads.get(x).unwrap().item() - 24.0).abs() < 1e-12);
    }
}
