//! Wengert tape: reverse-mode automatic differentiation by operation recording.
//!
//! Every forward op appends a node (value + provenance) to the tape; `backward`
//! replays the tape in reverse and accumulates adjoints into every node that
//! `requires_grad`. A tape is confined to one thread and is rebuilt per step;
//! persistent parameters live in [`crate::optim::ParamStore`] and are bound in
//! as leaves.

use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    AddScalar { x: Var, s: Var },
    AddRow { x: Var, row: Var },
    AddChannelBias { x: Var, bias: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Pad2d { x: Var, top: usize, left: usize },
    Concat { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    Transpose { x: Var },
    Softmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SelectCell { x: Var, row: usize, col: usize },
    AdaptiveAvgPool { x: Var },
    UpsampleNearest { x: Var, factor: usize },
    CropResizeNearest { x: Var, region: [f64; 4] },
    MulChannelBroadcast { x: Var, m: Var },
    BceMean { p: Var, y: Var },
    SoftmaxCe { logits: Var, target: usize },
    SmoothL1Sum { pred: Var, target: Var },
}

pub struct Tape<T> {
    nodes: Vec<Tensor<T>>,
    ops: Vec<Op>,
    backward_run: bool,
}

/// Probabilities are clamped into `[CLIP, 1 - CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), backward_run: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf; keeps its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Whether a reverse sweep has populated gradients on this tape.
    pub fn backward_was_run(&self) -> bool {
        self.backward_run
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item().to_f64()
    }

    fn push(&mut self, t: Tensor<T>, op: Op) -> Var {
        self.nodes.push(t);
        self.ops.push(op);
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let mut t = Tensor::new(shape, data);
        t.requires_grad = requires;
        self.push(t, op)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        Ok(self.push_derived(vec![m, n], out, &[a, b], Op::Matmul { a, b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(shape, data, &[a, b], Op::Add { a, b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(shape, data, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kt: T = fl(k);
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * kt).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(shape, data, &[x], Op::Scale { x, k })
    }

    /// Broadcast-adds a `[1]` tensor to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].numel(), 1, "add_scalar expects a [1] addend");
        let sv = self.nodes[s.0].data[0];
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v + sv).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(shape, data, &[x, s], Op::AddScalar { x, s })
    }

    /// `[n,a] + [1,a]` with the row broadcast down the first axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        if sx.len() != 2 || sr.len() != 2 || sr[0] != 1 || sr[1] != sx[1] {
            return Err(Error::ShapeMismatch { op: "add_row", left: sx, right: sr });
        }
        let (n, a) = (sx[0], sx[1]);
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..n {
            for j in 0..a {
                data[i * a + j] = data[i * a + j] + self.nodes[row.0].data[j];
            }
        }
        Ok(self.push_derived(sx, data, &[x, row], Op::AddRow { x, row }))
    }

    /// `[c,h,w] + [c]` with the bias broadcast over the spatial grid.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 3 || sb != vec![sx[0]] {
            return Err(Error::ShapeMismatch { op: "add_channel_bias", left: sx, right: sb });
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let mut data = self.nodes[x.0].data.clone();
        for ci in 0..c {
            let b = self.nodes[bias.0].data[ci];
            for v in &mut data[ci * hw..(ci + 1) * hw] {
                *v = *v + b;
            }
        }
        Ok(self.push_derived(sx, data, &[x, bias], Op::AddChannelBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(shape, data, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<T> =
            self.nodes[x.0].data.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(shape, data, &[x], Op::Sigmoid { x })
    }

    pub fn tanh_act(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(shape, data, &[x], Op::Tanh { x })
    }

    /// Cross-correlation of `x: [c_in,h,w]` with `w: [c_out,c_in,k,k]`.
    /// The output extent `(h + 2 pad - k) / stride + 1` must be integral.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch { op: "conv2d", left: sx, right: sw });
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::InvalidConfig(format!("conv2d kernel extent {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be positive".into()));
        }
        let (h, wd) = (sx[1], sx[2]);
        let out_extent = |e: usize| -> Result<usize> {
            let span = (e + 2 * pad) as isize - k as isize;
            if span < 0 || span as usize % stride != 0 {
                return Err(Error::InvalidConfig(format!(
                    "conv2d output extent ({e} + 2*{pad} - {k}) / {stride} + 1 is not integral"
                )));
            }
            Ok(span as usize / stride + 1)
        };
        let (oh, ow) = (out_extent(h)?, out_extent(wd)?);
        let oc = sw[0];
        let mut out = vec![T::zero(); oc * oh * ow];
        conv2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            ConvDims { ic: sx[0], h, w: wd, oc, k, stride, pad, oh, ow },
            &mut out,
        );
        Ok(self.push_derived(vec![oc, oh, ow], out, &[x, w], Op::Conv2d { x, w, stride, pad }))
    }

    /// Zero-pads a `[c,h,w]` map; used for exact-extent strided convolutions.
    pub fn pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "pad2d expects a [c,h,w] map");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (nh, nw) = (h + top + bottom, w + left + right);
        let mut data = vec![T::zero(); c * nh * nw];
        for ci in 0..c {
            for y in 0..h {
                let src = (ci * h + y) * w;
                let dst = (ci * nh + y + top) * nw + left;
                data[dst..dst + w].copy_from_slice(&self.nodes[x.0].data[src..src + w]);
            }
        }
        self.push_derived(vec![c, nh, nw], data, &[x], Op::Pad2d { x, top, left })
    }

    /// Stacks `[c_i,h,w]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = self.shape(parts[0]).to_vec();
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != first[1] || s[2] != first[2] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: first,
                    right: s.to_vec(),
                });
            }
            total_c += s[0];
        }
        let mut data = Vec::with_capacity(total_c * first[1] * first[2]);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push_derived(
            vec![total_c, first[1], first[2]],
            data,
            parts,
            Op::Concat { parts: parts.to_vec() },
        ))
    }

    /// Joins `[1,n_i]` rows into one `[1, sum n_i]` row.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![1],
                    right: s.to_vec(),
                });
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push_derived(vec![1, total], data, parts, Op::Concat { parts: parts.to_vec() }))
    }

    /// Takes columns `[start, start+len)` of a `[1,n]` row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != 1 || start + len > s[1] {
            return Err(Error::ShapeMismatch { op: "slice_cols", left: s, right: vec![start, len] });
        }
        let data = self.nodes[x.0].data[start..start + len].to_vec();
        Ok(self.push_derived(vec![1, len], data, &[x], Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push_derived(shape, data, &[x], Op::Reshape { x }))
    }

    /// `[m,n] -> [n,m]`.
    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "transpose expects a matrix");
        let (m, n) = (s[0], s[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push_derived(vec![n, m], data, &[x], Op::Transpose { x })
    }

    /// Softmax over the flattened input, keeping its shape.
    pub fn softmax(&mut self, x: Var) -> Var {
        let data = softmax_vec(&self.nodes[x.0].data);
        let shape = self.shape(x).to_vec();
        self.push_derived(shape, data, &[x], Op::Softmax { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().fold(T::zero(), |acc, &v| acc + v);
        self.push_derived(vec![1], vec![s], &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = fl::<T>(self.nodes[x.0].numel() as f64);
        let s = self.nodes[x.0].data.iter().fold(T::zero(), |acc, &v| acc + v) / n;
        self.push_derived(vec![1], vec![s], &[x], Op::Mean { x })
    }

    /// Extracts the channel fiber at one spatial cell of a `[c,h,w]` map.
    pub fn select_cell(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || row >= s[1] || col >= s[2] {
            return Err(Error::InvalidConfig(format!(
                "select_cell ({row},{col}) outside grid {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data: Vec<T> =
            (0..c).map(|ci| self.nodes[x.0].data[(ci * h + row) * w + col]).collect();
        Ok(self.push_derived(vec![c], data, &[x], Op::SelectCell { x, row, col }))
    }

    /// Area-interpolation resize of a `[c,h,w]` map to `[c,oh,ow]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "adaptive_avg_pool expects a [c,h,w] map");
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1) = pool_bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_bin(ox, w, ow);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + self.nodes[x.0].data[(ci * h + y) * w + xx];
                        }
                    }
                    let area = fl::<T>(((y1 - y0) * (x1 - x0)) as f64);
                    data[(ci * oh + oy) * ow + ox] = acc / area;
                }
            }
        }
        self.push_derived(vec![c, oh, ow], data, &[x], Op::AdaptiveAvgPool { x })
    }

    /// Integer-factor nearest-neighbor upsample of a `[c,h,w]` map.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && factor >= 1, "upsample_nearest expects a [c,h,w] map");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    data[(ci * oh + oy) * ow + ox] =
                        self.nodes[x.0].data[(ci * h + oy / factor) * w + ox / factor];
                }
            }
        }
        self.push_derived(vec![c, oh, ow], data, &[x], Op::UpsampleNearest { x, factor })
    }

    /// Nearest-neighbor crop of the continuous region `[y0,x0,y1,x1]` (grid
    /// units) out of a `[c,h,w]` map, resampled to `[c,oh,ow]`.
    pub fn crop_resize_nearest(
        &mut self,
        x: Var,
        region: [f64; 4],
        oh: usize,
        ow: usize,
    ) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "crop_resize_nearest expects a [c,h,w] map");
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![T::zero(); c * oh * ow];
        for oy in 0..oh {
            let iy = crop_index(region[0], region[2], oy, oh, h);
            for ox in 0..ow {
                let ix = crop_index(region[1], region[3], ox, ow, w);
                for ci in 0..c {
                    data[(ci * oh + oy) * ow + ox] = self.nodes[x.0].data[(ci * h + iy) * w + ix];
                }
            }
        }
        self.push_derived(vec![c, oh, ow], data, &[x], Op::CropResizeNearest { x, region })
    }

    /// `[c,h,w] * [1,h,w]` with the single-channel map broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        if sx.len() != 3 || sm != vec![1, sx[1], sx[2]] {
            return Err(Error::ShapeMismatch { op: "mul_channel_broadcast", left: sx, right: sm });
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let mut data = vec![T::zero(); c * hw];
        for ci in 0..c {
            for i in 0..hw {
                data[ci * hw + i] = self.nodes[x.0].data[ci * hw + i] * self.nodes[m.0].data[i];
            }
        }
        Ok(self.push_derived(sx, data, &[x, m], Op::MulChannelBroadcast { x, m }))
    }

    /// Mean binary cross-entropy of predictions `p` against targets `y`,
    /// clamping `p` into `[PROB_CLIP, 1 - PROB_CLIP]` first.
    pub fn bce_mean(&mut self, p: Var, y: Var) -> Result<Var> {
        if self.shape(p) != self.shape(y) {
            return Err(Error::ShapeMismatch {
                op: "bce_mean",
                left: self.shape(p).to_vec(),
                right: self.shape(y).to_vec(),
            });
        }
        let n = fl::<T>(self.nodes[p.0].numel() as f64);
        let mut acc = T::zero();
        for (&pv, &yv) in self.nodes[p.0].data.iter().zip(&self.nodes[y.0].data) {
            let pc = clamp_prob(pv);
            acc = acc - (yv * pc.ln() + (T::one() - yv) * (T::one() - pc).ln());
        }
        Ok(self.push_derived(vec![1], vec![acc / n], &[p, y], Op::BceMean { p, y }))
    }

    /// `-log softmax(logits)[target]`, stabilized by max subtraction.
    pub fn softmax_ce(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.nodes[logits.0].numel();
        if target >= n {
            return Err(Error::Vocabulary { index: target, vocab_size: n });
        }
        let d = &self.nodes[logits.0].data;
        let m = d.iter().fold(d[0], |acc, &v| acc.max(v));
        let lse = d.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp()).ln();
        let loss = lse - (d[target] - m);
        Ok(self.push_derived(vec![1], vec![loss], &[logits], Op::SoftmaxCe { logits, target }))
    }

    /// Smooth-L1 (Huber at delta 1) of `pred - target`, summed over elements.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1_sum",
                left: self.shape(pred).to_vec(),
                right: self.shape(target).to_vec(),
            });
        }
        let half = fl::<T>(0.5);
        let mut acc = T::zero();
        for (&pv, &tv) in self.nodes[pred.0].data.iter().zip(&self.nodes[target.0].data) {
            let d = (pv - tv).abs();
            acc = acc + if d < T::one() { half * d * d } else { d - half };
        }
        Ok(self.push_derived(vec![1], vec![acc], &[pred, target], Op::SmoothL1Sum { pred, target }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output; populates `grad` on every
    /// `requires_grad` node reachable on the tape.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.nodes[out.0].numel() != 1 {
            return Err(Error::InvalidConfig(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(out)
            )));
        }
        self.backward_run = true;
        self.nodes[out.0].grad = Some(vec![T::one()]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            let op = self.ops[i].clone();
            self.propagate(Var(i), &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn take_grad(&mut self, v: Var) -> Vec<T> {
        let n = self.nodes[v.0].numel();
        self.nodes[v.0].grad.take().unwrap_or_else(|| vec![T::zero(); n])
    }

    fn put_grad(&mut self, v: Var, g: Vec<T>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn propagate(&mut self, node: Var, op: &Op, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let bd = &self.nodes[b.0].data;
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bd[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc = acc + grow[j] * brow[j];
                            }
                            ga[i * k + p] = ga[i * k + p] + acc;
                        }
                    }
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let ad = &self.nodes[a.0].data;
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] = brow[j] + aip * grow[j];
                            }
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(v) {
                        let mut gv = self.take_grad(v);
                        for (o, &gi) in gv.iter_mut().zip(g) {
                            *o = *o + gi;
                        }
                        self.put_grad(v, gv);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs(v) {
                        let mut gv = self.take_grad(v);
                        for idx in 0..gv.len() {
                            gv[idx] = gv[idx] + g[idx] * self.nodes[other.0].data[idx];
                        }
                        self.put_grad(v, gv);
                    }
                }
            }
            Op::Scale { x, k } => {
                if self.needs(x) {
                    let kt: T = fl(k);
                    let mut gx = self.take_grad(x);
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi * kt;
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::AddScalar { x, s } => {
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi;
                    }
                    self.put_grad(x, gx);
                }
                if self.needs(s) {
                    let mut gs = self.take_grad(s);
                    gs[0] = gs[0] + g.iter().fold(T::zero(), |acc, &v| acc + v);
                    self.put_grad(s, gs);
                }
            }
            Op::AddRow { x, row } => {
                let (n, a) = (self.shape(x)[0], self.shape(x)[1]);
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi;
                    }
                    self.put_grad(x, gx);
                }
                if self.needs(row) {
                    let mut gr = self.take_grad(row);
                    for i in 0..n {
                        for j in 0..a {
                            gr[j] = gr[j] + g[i * a + j];
                        }
                    }
                    self.put_grad(row, gr);
                }
            }
            Op::AddChannelBias { x, bias } => {
                let (c, hw) = (self.shape(x)[0], self.shape(x)[1] * self.shape(x)[2]);
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi;
                    }
                    self.put_grad(x, gx);
                }
                if self.needs(bias) {
                    let mut gb = self.take_grad(bias);
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for &gi in &g[ci * hw..(ci + 1) * hw] {
                            acc = acc + gi;
                        }
                        gb[ci] = gb[ci] + acc;
                    }
                    self.put_grad(bias, gb);
                }
            }
            Op::Relu { x } => {
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for idx in 0..gx.len() {
                        if self.nodes[x.0].data[idx] > T::zero() {
                            gx[idx] = gx[idx] + g[idx];
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for idx in 0..gx.len() {
                        let s = self.nodes[node.0].data[idx];
                        gx[idx] = gx[idx] + g[idx] * s * (T::one() - s);
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Tanh { x } => {
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for idx in 0..gx.len() {
                        let t = self.nodes[node.0].data[idx];
                        gx[idx] = gx[idx] + g[idx] * (T::one() - t * t);
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let so = self.shape(node).to_vec();
                let dims = ConvDims {
                    ic: sx[0],
                    h: sx[1],
                    w: sx[2],
                    oc: sw[0],
                    k: sw[2],
                    stride,
                    pad,
                    oh: so[1],
                    ow: so[2],
                };
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    conv2d_backward_input(g, &self.nodes[w.0].data, dims, &mut gx);
                    self.put_grad(x, gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_grad(w);
                    conv2d_backward_weight(g, &self.nodes[x.0].data, dims, &mut gw);
                    self.put_grad(w, gw);
                }
            }
            Op::Pad2d { x, top, left } => {
                if self.needs(x) {
                    let s = self.shape(x).to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let so = self.shape(node).to_vec();
                    let (nh, nw) = (so[1], so[2]);
                    let mut gx = self.take_grad(x);
                    for ci in 0..c {
                        for y in 0..h {
                            let src = (ci * nh + y + top) * nw + left;
                            let dst = (ci * h + y) * w;
                            for xx in 0..w {
                                gx[dst + xx] = gx[dst + xx] + g[src + xx];
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Concat { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].numel();
                    if self.needs(p) {
                        let mut gp = self.take_grad(p);
                        for idx in 0..n {
                            gp[idx] = gp[idx] + g[offset + idx];
                        }
                        self.put_grad(p, gp);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for (idx, &gi) in g.iter().enumerate() {
                        gx[start + idx] = gx[start + idx] + gi;
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Reshape { x } => {
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi;
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Transpose { x } => {
                if self.needs(x) {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut gx = self.take_grad(x);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + g[j * m + i];
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Softmax { x } => {
                if self.needs(x) {
                    let s = self.nodes[node.0].data.clone();
                    let dot = s.iter().zip(g).fold(T::zero(), |acc, (&si, &gi)| acc + si * gi);
                    let mut gx = self.take_grad(x);
                    for idx in 0..gx.len() {
                        gx[idx] = gx[idx] + s[idx] * (g[idx] - dot);
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Sum { x } => {
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Mean { x } => {
                if self.needs(x) {
                    let n = fl::<T>(self.nodes[x.0].numel() as f64);
                    let gi = g[0] / n;
                    let mut gx = self.take_grad(x);
                    for o in gx.iter_mut() {
                        *o = *o + gi;
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::SelectCell { x, row, col } => {
                if self.needs(x) {
                    let (h, w) = (self.shape(x)[1], self.shape(x)[2]);
                    let mut gx = self.take_grad(x);
                    for (ci, &gi) in g.iter().enumerate() {
                        let idx = (ci * h + row) * w + col;
                        gx[idx] = gx[idx] + gi;
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::AdaptiveAvgPool { x } => {
                if self.needs(x) {
                    let s = self.shape(x).to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let so = self.shape(node).to_vec();
                    let (oh, ow) = (so[1], so[2]);
                    let mut gx = self.take_grad(x);
                    for ci in 0..c {
                        for oy in 0..oh {
                            let (y0, y1) = pool_bin(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = pool_bin(ox, w, ow);
                                let area = fl::<T>(((y1 - y0) * (x1 - x0)) as f64);
                                let gi = g[(ci * oh + oy) * ow + ox] / area;
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        let idx = (ci * h + y) * w + xx;
                                        gx[idx] = gx[idx] + gi;
                                    }
                                }
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if self.needs(x) {
                    let s = self.shape(x).to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h * factor, w * factor);
                    let mut gx = self.take_grad(x);
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let idx = (ci * h + oy / factor) * w + ox / factor;
                                gx[idx] = gx[idx] + g[(ci * oh + oy) * ow + ox];
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::CropResizeNearest { x, region } => {
                if self.needs(x) {
                    let s = self.shape(x).to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let so = self.shape(node).to_vec();
                    let (oh, ow) = (so[1], so[2]);
                    let mut gx = self.take_grad(x);
                    for oy in 0..oh {
                        let iy = crop_index(region[0], region[2], oy, oh, h);
                        for ox in 0..ow {
                            let ix = crop_index(region[1], region[3], ox, ow, w);
                            for ci in 0..c {
                                let idx = (ci * h + iy) * w + ix;
                                gx[idx] = gx[idx] + g[(ci * oh + oy) * ow + ox];
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::MulChannelBroadcast { x, m } => {
                let (c, hw) = (self.shape(x)[0], self.shape(x)[1] * self.shape(x)[2]);
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    for ci in 0..c {
                        for i in 0..hw {
                            gx[ci * hw + i] =
                                gx[ci * hw + i] + g[ci * hw + i] * self.nodes[m.0].data[i];
                        }
                    }
                    self.put_grad(x, gx);
                }
                if self.needs(m) {
                    let mut gm = self.take_grad(m);
                    for ci in 0..c {
                        for i in 0..hw {
                            gm[i] = gm[i] + g[ci * hw + i] * self.nodes[x.0].data[ci * hw + i];
                        }
                    }
                    self.put_grad(m, gm);
                }
            }
            Op::BceMean { p, y } => {
                let n = fl::<T>(self.nodes[p.0].numel() as f64);
                if self.needs(p) {
                    let mut gp = self.take_grad(p);
                    for idx in 0..gp.len() {
                        let pc = clamp_prob(self.nodes[p.0].data[idx]);
                        let yv = self.nodes[y.0].data[idx];
                        gp[idx] = gp[idx] + g[0] * (pc - yv) / (pc * (T::one() - pc)) / n;
                    }
                    self.put_grad(p, gp);
                }
                if self.needs(y) {
                    let mut gy = self.take_grad(y);
                    for idx in 0..gy.len() {
                        let pc = clamp_prob(self.nodes[p.0].data[idx]);
                        gy[idx] = gy[idx] + g[0] * ((T::one() - pc).ln() - pc.ln()) / n;
                    }
                    self.put_grad(y, gy);
                }
            }
            Op::SoftmaxCe { logits, target } => {
                if self.needs(logits) {
                    let s = softmax_vec(&self.nodes[logits.0].data);
                    let mut gl = self.take_grad(logits);
                    for idx in 0..gl.len() {
                        let indicator = if idx == target { T::one() } else { T::zero() };
                        gl[idx] = gl[idx] + g[0] * (s[idx] - indicator);
                    }
                    self.put_grad(logits, gl);
                }
            }
            Op::SmoothL1Sum { pred, target } => {
                let slope = |d: T| {
                    if d.abs() < T::one() {
                        d
                    } else if d > T::zero() {
                        T::one()
                    } else {
                        -T::one()
                    }
                };
                if self.needs(pred) {
                    let mut gp = self.take_grad(pred);
                    for idx in 0..gp.len() {
                        let d = self.nodes[pred.0].data[idx] - self.nodes[target.0].data[idx];
                        gp[idx] = gp[idx] + g[0] * slope(d);
                    }
                    self.put_grad(pred, gp);
                }
                if self.needs(target) {
                    let mut gt = self.take_grad(target);
                    for idx in 0..gt.len() {
                        let d = self.nodes[pred.0].data[idx] - self.nodes[target.0].data[idx];
                        gt[idx] = gt[idx] - g[0] * slope(d);
                    }
                    self.put_grad(target, gt);
                }
            }
        }
    }
}

// ── kernels ──────────────────────────────────────────────────────────

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = fl::<T>(PROB_CLIP);
    p.max(eps).min(T::one() - eps)
}

fn softmax_vec<T: Scalar>(d: &[T]) -> Vec<T> {
    let m = d.iter().fold(d[0], |acc, &v| acc.max(v));
    let exps: Vec<T> = d.iter().map(|&v| (v - m).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &v| acc + v);
    exps.into_iter().map(|v| v / total).collect()
}

fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Output index range `[start, end)` such that `0 <= o*stride + offset < limit`.
fn conv_range(limit: usize, stride: usize, offset: isize, out: usize) -> (usize, usize) {
    let start = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi = limit as isize - 1 - offset;
    if hi < 0 {
        return (0, 0);
    }
    let end = (hi as usize / stride + 1).min(out);
    (start.min(end), end)
}

fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], d: ConvDims, out: &mut [T]) {
    for o in 0..d.oc {
        for ci in 0..d.ic {
            let wbase = (o * d.ic + ci) * d.k * d.k;
            for ky in 0..d.k {
                let yoff = ky as isize - d.pad as isize;
                let (oy0, oy1) = conv_range(d.h, d.stride, yoff, d.oh);
                for kx in 0..d.k {
                    let wv = w[wbase + ky * d.k + kx];
                    let xoff = kx as isize - d.pad as isize;
                    let (ox0, ox1) = conv_range(d.w, d.stride, xoff, d.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy * d.stride) as isize + yoff;
                        let xrow = (ci * d.h + iy as usize) * d.w;
                        let orow = (o * d.oh + oy) * d.ow;
                        if d.stride == 1 {
                            let ix0 = (ox0 as isize + xoff) as usize;
                            let src = &x[xrow + ix0..xrow + ix0 + (ox1 - ox0)];
                            let dst = &mut out[orow + ox0..orow + ox1];
                            for (dv, &sv) in dst.iter_mut().zip(src) {
                                *dv = *dv + wv * sv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = (ox * d.stride) as isize + xoff;
                                out[orow + ox] = out[orow + ox] + wv * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input<T: Scalar>(gout: &[T], w: &[T], d: ConvDims, gx: &mut [T]) {
    for o in 0..d.oc {
        for ci in 0..d.ic {
            let wbase = (o * d.ic + ci) * d.k * d.k;
            for ky in 0..d.k {
                let yoff = ky as isize - d.pad as isize;
                let (oy0, oy1) = conv_range(d.h, d.stride, yoff, d.oh);
                for kx in 0..d.k {
                    let wv = w[wbase + ky * d.k + kx];
                    let xoff = kx as isize - d.pad as isize;
                    let (ox0, ox1) = conv_range(d.w, d.stride, xoff, d.ow);
                    for oy in oy0..oy1 {
                        let iy = (oy * d.stride) as isize + yoff;
                        let xrow = (ci * d.h + iy as usize) * d.w;
                        let orow = (o * d.oh + oy) * d.ow;
                        for ox in ox0..ox1 {
                            let ix = (ox * d.stride) as isize + xoff;
                            gx[xrow + ix as usize] = gx[xrow + ix as usize] + wv * gout[orow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight<T: Scalar>(gout: &[T], x: &[T], d: ConvDims, gw: &mut [T]) {
    for o in 0..d.oc {
        for ci in 0..d.ic {
            let wbase = (o * d.ic + ci) * d.k * d.k;
            for ky in 0..d.k {
                let yoff = ky as isize - d.pad as isize;
                let (oy0, oy1) = conv_range(d.h, d.stride, yoff, d.oh);
                for kx in 0..d.k {
                    let xoff = kx as isize - d.pad as isize;
                    let (ox0, ox1) = conv_range(d.w, d.stride, xoff, d.ow);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = (oy * d.stride) as isize + yoff;
                        let xrow = (ci * d.h + iy as usize) * d.w;
                        let orow = (o * d.oh + oy) * d.ow;
                        for ox in ox0..ox1 {
                            let ix = (ox * d.stride) as isize + xoff;
                            acc = acc + gout[orow + ox] * x[xrow + ix as usize];
                        }
                    }
                    gw[wbase + ky * d.k + kx] = gw[wbase + ky * d.k + kx] + acc;
                }
            }
        }
    }
}

/// Pooling bin `[start, end)` for output index `i` of `out` bins over `extent`.
fn pool_bin(i: usize, extent: usize, out: usize) -> (usize, usize) {
    (i * extent / out, ((i + 1) * extent).div_ceil(out))
}

/// Nearest source index for output cell `o` of `out` cells spanning
/// `[lo, hi)` in continuous grid coordinates.
fn crop_index(lo: f64, hi: f64, o: usize, out: usize, limit: usize) -> usize {
    let center = lo + (o as f64 + 0.5) * (hi - lo) / out as f64;
    (center.floor().max(0.0) as usize).min(limit - 1)
}
