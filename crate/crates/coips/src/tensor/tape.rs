//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation pushes one node; inputs always refer to earlier nodes, so
//! the tape order is already topological and `backward` is a single reverse
//! sweep. Values are checked for finiteness as they are produced: NaN or Inf
//! anywhere is an error state, not a silent propagation.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: usize,
        // flat input index of the (first) argmax for each output element
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: usize,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: F,
    },
    InstanceNorm {
        x: usize,
        inv_std: Vec<F>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Reshape {
        x: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    StackRows {
        rows: Vec<usize>,
    },
    Softmax {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    MeanScalars {
        xs: Vec<usize>,
    },
    WeightedCe {
        logits: usize,
        labels: Vec<usize>,
        sample_weights: Vec<F>,
        norm: F,
        probs: Vec<F>,
    },
    SegCombined {
        logits: usize,
        gt: Vec<F>,
        lambda: F,
        fg_probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
}

/// Precomputed convolution geometry: for a kernel offset, the output range
/// whose input samples stay in bounds. Lets the hot loops run over
/// contiguous slices without per-element boundary checks.
struct ConvGeom {
    h: usize,
    win: usize,
    wout: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn ow_range(&self, dx: usize) -> Option<(usize, usize)> {
        if dx + 1 > self.win + self.padding {
            return None;
        }
        let lo = if self.padding > dx {
            (self.padding - dx + self.stride - 1) / self.stride
        } else {
            0
        };
        let hi = ((self.win - 1 + self.padding - dx) / self.stride).min(self.wout - 1);
        if lo > hi {
            None
        } else {
            Some((lo, hi))
        }
    }

    fn input_y(&self, oh: usize, dy: usize) -> Option<usize> {
        let iy = oh * self.stride + dy;
        if iy < self.padding || iy - self.padding >= self.h {
            None
        } else {
            Some(iy - self.padding)
        }
    }
}

/// Numerical floor applied to probabilities before `log`.
pub fn prob_floor<F: Float>() -> F {
    F::from(1e-12).unwrap()
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value.data
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(
                "non-finite value produced by tensor op".into(),
            ));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 2D cross-correlation. `x`: `[C_in,H,W]`, `w`: `[C_out,C_in,k,k]`,
    /// optional `b`: `[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects x rank 3 and w rank 4, got {xs:?} and {ws:?}"
            )));
        }
        let (cin, h, win) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {cin}, kernel expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d stride must be positive".into()));
        }
        let k = kh;
        if h + 2 * padding < k || win + 2 * padding < k {
            return Err(Error::Geometry(format!(
                "conv2d kernel {k} exceeds padded input {h}x{win} (pad {padding})"
            )));
        }
        if (h + 2 * padding - k) % stride != 0 || (win + 2 * padding - k) % stride != 0 {
            return Err(Error::Geometry(format!(
                "conv2d geometry not integral: input {h}x{win}, k {k}, stride {stride}, pad {padding}"
            )));
        }
        let hout = (h + 2 * padding - k) / stride + 1;
        let wout = (win + 2 * padding - k) / stride + 1;
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {bs:?} does not match {cout} output channels"
                )));
            }
        }

        let xd = &self.nodes[x.0].value.data;
        let wd = &self.nodes[w.0].value.data;
        let geom = ConvGeom {
            h,
            win,
            wout,
            stride,
            padding,
        };
        let mut out = vec![F::zero(); cout * hout * wout];
        for co in 0..cout {
            let base_out = co * hout * wout;
            for ci in 0..cin {
                let base_x = ci * h * win;
                let base_w = (co * cin + ci) * k * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let wv = wd[base_w + dy * k + dx];
                        if wv == F::zero() {
                            continue;
                        }
                        let Some((ow_lo, ow_hi)) = geom.ow_range(dx) else {
                            continue;
                        };
                        for oh in 0..hout {
                            let Some(iy) = geom.input_y(oh, dy) else {
                                continue;
                            };
                            let row_x = base_x + iy * win;
                            let row_o = base_out + oh * wout;
                            if stride == 1 {
                                let x0 = row_x + ow_lo + dx - padding;
                                let xs = &xd[x0..x0 + ow_hi - ow_lo + 1];
                                let os = &mut out[row_o + ow_lo..row_o + ow_hi + 1];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                for ow in ow_lo..=ow_hi {
                                    let ix = ow * stride + dx - padding;
                                    out[row_o + ow] = out[row_o + ow] + wv * xd[row_x + ix];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bv) = b {
                let bval = self.nodes[bv.0].value.data[co];
                for v in &mut out[base_out..base_out + hout * wout] {
                    *v = *v + bval;
                }
            }
        }
        let req = self.requires(x)
            || self.requires(w)
            || b.map(|bv| self.requires(bv)).unwrap_or(false);
        self.push(
            Tensor::new(vec![cout, hout, wout], out)?,
            req,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                padding,
            },
        )
    }

    /// Max pooling over `window`x`window` patches; gradient routes to the
    /// first (row-major) argmax of each window.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("maxpool2d expects rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if window == 0 || stride == 0 {
            return Err(Error::Geometry("maxpool2d window/stride must be positive".into()));
        }
        if h < window || w < window || (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(Error::Geometry(format!(
                "maxpool2d geometry not integral: input {h}x{w}, window {window}, stride {stride}"
            )));
        }
        let hout = (h - window) / stride + 1;
        let wout = (w - window) / stride + 1;
        let xd = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(c * hout * wout);
        let mut argmax = Vec::with_capacity(c * hout * wout);
        for ci in 0..c {
            let base = ci * h * w;
            for oh in 0..hout {
                for ow in 0..wout {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oh * stride + dy) * w + (ow * stride + dx);
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let req = self.requires(x);
        self.push(
            Tensor::new(vec![c, hout, wout], out)?,
            req,
            Op::MaxPool2d { x: x.0, argmax },
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("upsample2x expects rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![F::zero(); c * 4 * h * w];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xd[ci * h * w + y * w + xx];
                    let base = ci * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[base + (2 * y + dy) * 2 * w + 2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        self.push(
            Tensor::new(vec![c, 2 * h, 2 * w], out)?,
            req,
            Op::Upsample2x { x: x.0 },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<F> = v.data.iter().map(|&a| a.max(F::zero())).collect();
        let req = self.requires(x);
        self.push(
            Tensor::new(v.shape, out)?,
            req,
            Op::Relu { x: x.0 },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<F> = v
            .data
            .iter()
            .map(|&a| if a < F::zero() { a * slope } else { a })
            .collect();
        let req = self.requires(x);
        self.push(
            Tensor::new(v.shape, out)?,
            req,
            Op::LeakyRelu { x: x.0, slope },
        )
    }

    /// Per-channel normalization of a `[C,H,W]` tensor to zero mean and unit
    /// variance over the spatial dimensions.
    pub fn instance_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("instance_norm expects rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let n = h * w;
        let nf = F::from(n).unwrap();
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![F::zero(); c * n];
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let sl = &xd[ci * n..(ci + 1) * n];
            let mean = sl.iter().fold(F::zero(), |a, &b| a + b) / nf;
            let var = sl
                .iter()
                .fold(F::zero(), |a, &b| a + (b - mean) * (b - mean))
                / nf;
            let istd = (var + eps).sqrt().recip();
            inv_std.push(istd);
            for (o, &v) in out[ci * n..(ci + 1) * n].iter_mut().zip(sl.iter()) {
                *o = (v - mean) * istd;
            }
        }
        let req = self.requires(x);
        self.push(
            Tensor::new(xs, out)?,
            req,
            Op::InstanceNorm { x: x.0, inv_std },
        )
    }

    /// Affine map `w*x + b` with `x`: `[in]`, `w`: `[out,in]`, `b`: `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::Shape(format!(
                "linear expects x [in], w [out,in], b [out]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (nout, nin) = (ws[0], ws[1]);
        if xs[0] != nin || bs[0] != nout {
            return Err(Error::Shape(format!(
                "linear shape mismatch: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let xd = &self.nodes[x.0].value.data;
        let wd = &self.nodes[w.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let mut out = Vec::with_capacity(nout);
        for o in 0..nout {
            let mut acc = bd[o];
            let row = &wd[o * nin..(o + 1) * nin];
            for i in 0..nin {
                acc = acc + row[i] * xd[i];
            }
            out.push(acc);
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(
            Tensor::new(vec![nout], out)?,
            req,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.nodes[x.0].value.clone();
        if shape.iter().product::<usize>() != v.data.len() {
            return Err(Error::Shape(format!(
                "reshape to {shape:?} incompatible with {} elements",
                v.data.len()
            )));
        }
        let req = self.requires(x);
        self.push(Tensor::new(shape, v.data)?, req, Op::Reshape { x: x.0 })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!(
                "concat_channels spatial mismatch: {sa:?} vs {sb:?}"
            )));
        }
        let mut data = self.nodes[a.0].value.data.clone();
        data.extend_from_slice(&self.nodes[b.0].value.data);
        let req = self.requires(a) || self.requires(b);
        self.push(
            Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data)?,
            req,
            Op::ConcatChannels { a: a.0, b: b.0 },
        )
    }

    /// Stacks N equally-shaped `[K]` vectors into `[N,K]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Shape("stack_rows needs at least one row".into()));
        }
        let k = {
            let s = self.shape(rows[0]);
            if s.len() != 1 {
                return Err(Error::Shape(format!("stack_rows expects rank-1 rows, got {s:?}")));
            }
            s[0]
        };
        let mut data = Vec::with_capacity(rows.len() * k);
        let mut req = false;
        for &r in rows {
            if self.shape(r) != [k] {
                return Err(Error::Shape("stack_rows rows differ in length".into()));
            }
            data.extend_from_slice(&self.nodes[r.0].value.data);
            req |= self.requires(r);
        }
        self.push(
            Tensor::new(vec![rows.len(), k], data)?,
            req,
            Op::StackRows {
                rows: rows.iter().map(|v| v.0).collect(),
            },
        )
    }

    /// Row-wise softmax over the last dimension, computed with
    /// max-subtraction. Input may be `[K]` or `[N,K]` with K >= 2.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().ok_or_else(|| Error::Shape("softmax on empty shape".into()))?;
        if k < 2 {
            return Err(Error::Shape("softmax needs at least 2 classes".into()));
        }
        let xd = &self.nodes[x.0].value.data;
        if xd.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(k) {
            out.extend(softmax_row(row));
        }
        let req = self.requires(x);
        self.push(Tensor::new(xs, out)?, req, Op::Softmax { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::Shape("add shape mismatch".into()));
        }
        let out: Vec<F> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(sa, out)?, req, Op::Add { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::Shape("mul shape mismatch".into()));
        }
        let out: Vec<F> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(sa, out)?, req, Op::Mul { a: a.0, b: b.0 })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0]
            .value
            .data
            .iter()
            .fold(F::zero(), |a, &b| a + b);
        let req = self.requires(x);
        self.push(Tensor::scalar(s), req, Op::Sum { x: x.0 })
    }

    /// Mean of N scalar variables, as a scalar.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("mean_scalars of nothing".into()));
        }
        let mut acc = F::zero();
        let mut req = false;
        for &v in xs {
            if self.nodes[v.0].value.data.len() != 1 {
                return Err(Error::Shape("mean_scalars expects scalars".into()));
            }
            acc = acc + self.nodes[v.0].value.data[0];
            req |= self.requires(v);
        }
        let n = F::from(xs.len()).unwrap();
        self.push(
            Tensor::scalar(acc / n),
            req,
            Op::MeanScalars {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        )
    }

    /// Class-weighted cross-entropy over `[N,K]` logits.
    ///
    /// Per-sample loss is `-w_{y_i} * log p_{i,y_i}`; the batch loss divides
    /// by `norm`, normally the sum of the sample weights over the batch.
    /// Probabilities are floored at 1e-12 before the log.
    pub fn weighted_ce(
        &mut self,
        logits: Var,
        labels: &[usize],
        sample_weights: &[F],
        norm: F,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let (n, k) = match ls.len() {
            1 => (1, ls[0]),
            2 => (ls[0], ls[1]),
            _ => return Err(Error::Shape(format!("weighted_ce expects [N,K] logits, got {ls:?}"))),
        };
        if labels.len() != n || sample_weights.len() != n {
            return Err(Error::Shape(format!(
                "weighted_ce: {n} rows but {} labels / {} weights",
                labels.len(),
                sample_weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range [0,{k})")));
        }
        if norm <= F::zero() {
            return Err(Error::Contract("weighted_ce normalizer must be positive".into()));
        }
        let xd = &self.nodes[logits.0].value.data;
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = F::zero();
        let floor = prob_floor::<F>();
        for (i, row) in xd.chunks(k).enumerate() {
            let p = softmax_row(row);
            let pt = p[labels[i]].max(floor);
            loss = loss - sample_weights[i] * pt.ln();
            probs.extend(p);
        }
        loss = loss / norm;
        let req = self.requires(logits);
        self.push(
            Tensor::scalar(loss),
            req,
            Op::WeightedCe {
                logits: logits.0,
                labels: labels.to_vec(),
                sample_weights: sample_weights.to_vec(),
                norm,
                probs,
            },
        )
    }

    /// Combined segmentation loss `lambda*CE + (1-lambda)*(1 - softDice)` on
    /// two-channel logits `[2,H,W]` against a binary ground-truth mask.
    ///
    /// CE is the mean pixelwise cross-entropy; the soft Dice uses sums of
    /// foreground probabilities with +1 smoothing in numerator and
    /// denominator.
    pub fn seg_combined_loss(&mut self, logits: Var, gt: &[F], lambda: F) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 3 || ls[0] != 2 {
            return Err(Error::Shape(format!(
                "seg_combined_loss expects [2,H,W] logits, got {ls:?}"
            )));
        }
        let hw = ls[1] * ls[2];
        if gt.len() != hw {
            return Err(Error::Shape(format!(
                "seg_combined_loss mask has {} pixels, logits {hw}",
                gt.len()
            )));
        }
        if lambda < F::zero() || lambda > F::one() {
            return Err(Error::Contract("lambda must lie in [0,1]".into()));
        }
        let xd = &self.nodes[logits.0].value.data;
        let floor = prob_floor::<F>();
        let mut fg_probs = Vec::with_capacity(hw);
        let mut ce = F::zero();
        let mut inter = F::zero();
        let mut psum = F::zero();
        let mut gsum = F::zero();
        for j in 0..hw {
            let l0 = xd[j];
            let l1 = xd[hw + j];
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let p1 = e1 / (e0 + e1);
            fg_probs.push(p1);
            let g = gt[j];
            let pt = if g > F::from(0.5).unwrap() { p1 } else { F::one() - p1 };
            ce = ce - pt.max(floor).ln();
            inter = inter + p1 * g;
            psum = psum + p1;
            gsum = gsum + g;
        }
        let hw_f = F::from(hw).unwrap();
        ce = ce / hw_f;
        let one = F::one();
        let two = F::from(2.0).unwrap();
        let dice = (two * inter + one) / (psum + gsum + one);
        let loss = lambda * ce + (one - lambda) * (one - dice);
        let req = self.requires(logits);
        self.push(
            Tensor::scalar(loss),
            req,
            Op::SegCombined {
                logits: logits.0,
                gt: gt.to_vec(),
                lambda,
                fg_probs,
            },
        )
    }

    /// Populates gradients of every parameter reachable from the scalar
    /// `loss`. Repeated calls accumulate into existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let n = self.nodes.len();
        let mut pass: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        pass[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let g = match pass[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pass)?;
            // accumulate into the persistent per-node gradient
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, &b) in acc.iter_mut().zip(&g) {
                        *a = *a + b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], pass: &mut [Option<Vec<F>>]) -> Result<()> {
        let add_to = |pass: &mut [Option<Vec<F>>], idx: usize, len: usize| -> *mut Vec<F> {
            if pass[idx].is_none() {
                pass[idx] = Some(vec![F::zero(); len]);
            }
            pass[idx].as_mut().unwrap() as *mut Vec<F>
        };
        macro_rules! gbuf {
            ($idx:expr) => {{
                let len = self.nodes[$idx].value.data.len();
                unsafe { &mut *add_to(pass, $idx, len) }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xs = &self.nodes[*x].value.shape;
                let ws = &self.nodes[*w].value.shape;
                let (cin, h, win) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let os = &self.nodes[i].value.shape;
                let (hout, wout) = (os[1], os[2]);
                let xd = &self.nodes[*x].value.data;
                let wd = &self.nodes[*w].value.data;
                let need_x = self.nodes[*x].requires_grad;
                let need_w = self.nodes[*w].requires_grad;
                if need_x || need_w {
                    let geom = ConvGeom {
                        h,
                        win,
                        wout,
                        stride: *stride,
                        padding: *padding,
                    };
                    // materialize both buffers before the main loop
                    let gx_ptr = if need_x {
                        Some(add_to(pass, *x, cin * h * win))
                    } else {
                        None
                    };
                    let gw_ptr = if need_w {
                        Some(add_to(pass, *w, wd.len()))
                    } else {
                        None
                    };
                    let mut gx = gx_ptr.map(|p| unsafe { &mut *p });
                    let mut gw = gw_ptr.map(|p| unsafe { &mut *p });
                    for co in 0..cout {
                        let base_out = co * hout * wout;
                        for ci in 0..cin {
                            let base_x = ci * h * win;
                            let base_w = (co * cin + ci) * k * k;
                            for dy in 0..k {
                                for dx in 0..k {
                                    let wi = base_w + dy * k + dx;
                                    let Some((ow_lo, ow_hi)) = geom.ow_range(dx) else {
                                        continue;
                                    };
                                    let wv = wd[wi];
                                    let mut wacc = F::zero();
                                    for oh in 0..hout {
                                        let Some(iy) = geom.input_y(oh, dy) else {
                                            continue;
                                        };
                                        let row_x = base_x + iy * win;
                                        let row_o = base_out + oh * wout;
                                        if *stride == 1 {
                                            let x0 = row_x + ow_lo + dx - padding;
                                            let n = ow_hi - ow_lo + 1;
                                            let gs = &g[row_o + ow_lo..row_o + ow_lo + n];
                                            if let Some(gx) = gx.as_deref_mut() {
                                                let t = &mut gx[x0..x0 + n];
                                                for (a, &gv) in t.iter_mut().zip(gs) {
                                                    *a = *a + wv * gv;
                                                }
                                            }
                                            if need_w {
                                                let xs = &xd[x0..x0 + n];
                                                for (&xv, &gv) in xs.iter().zip(gs) {
                                                    wacc = wacc + xv * gv;
                                                }
                                            }
                                        } else {
                                            for ow in ow_lo..=ow_hi {
                                                let ix = ow * stride + dx - padding;
                                                let xi = row_x + ix;
                                                let gv = g[row_o + ow];
                                                if let Some(gx) = gx.as_deref_mut() {
                                                    gx[xi] = gx[xi] + wv * gv;
                                                }
                                                if need_w {
                                                    wacc = wacc + xd[xi] * gv;
                                                }
                                            }
                                        }
                                    }
                                    if let Some(gw) = gw.as_deref_mut() {
                                        gw[wi] = gw[wi] + wacc;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(bi) = b {
                    if self.nodes[*bi].requires_grad {
                        let gb = gbuf!(*bi);
                        for co in 0..cout {
                            let mut acc = F::zero();
                            for v in &g[co * hout * wout..(co + 1) * hout * wout] {
                                acc = acc + *v;
                            }
                            gb[co] = gb[co] + acc;
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.nodes[*x].requires_grad {
                    let gx = gbuf!(*x);
                    for (o, &idx) in argmax.iter().enumerate() {
                        gx[idx] = gx[idx] + g[o];
                    }
                }
            }
            Op::Upsample2x { x } => {
                if self.nodes[*x].requires_grad {
                    let xs = &self.nodes[*x].value.shape;
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let gx = gbuf!(*x);
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut acc = F::zero();
                                let base = ci * 4 * h * w;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        acc = acc
                                            + g[base + (2 * y + dy) * 2 * w + 2 * xx + dx];
                                    }
                                }
                                let xi = ci * h * w + y * w + xx;
                                gx[xi] = gx[xi] + acc;
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.nodes[*x].requires_grad {
                    let xd = &self.nodes[*x].value.data;
                    let gx = gbuf!(*x);
                    for (j, &xv) in xd.iter().enumerate() {
                        if xv > F::zero() {
                            gx[j] = gx[j] + g[j];
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.nodes[*x].requires_grad {
                    let xd = &self.nodes[*x].value.data;
                    let gx = gbuf!(*x);
                    for (j, &xv) in xd.iter().enumerate() {
                        let f = if xv < F::zero() { *slope } else { F::one() };
                        gx[j] = gx[j] + f * g[j];
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if self.nodes[*x].requires_grad {
                    let xs = &self.nodes[*x].value.shape;
                    let (c, n) = (xs[0], xs[1] * xs[2]);
                    let nf = F::from(n).unwrap();
                    let yd = &self.nodes[i].value.data;
                    let gx = gbuf!(*x);
                    for ci in 0..c {
                        let gs = &g[ci * n..(ci + 1) * n];
                        let ys = &yd[ci * n..(ci + 1) * n];
                        let mean_g = gs.iter().fold(F::zero(), |a, &b| a + b) / nf;
                        let mean_gy = gs
                            .iter()
                            .zip(ys)
                            .fold(F::zero(), |a, (&gv, &yv)| a + gv * yv)
                            / nf;
                        let istd = inv_std[ci];
                        for j in 0..n {
                            gx[ci * n + j] = gx[ci * n + j]
                                + istd * (gs[j] - mean_g - ys[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = &self.nodes[*w].value.shape;
                let (nout, nin) = (ws[0], ws[1]);
                let xd = &self.nodes[*x].value.data;
                let wd = &self.nodes[*w].value.data;
                if self.nodes[*x].requires_grad {
                    let gx = gbuf!(*x);
                    for o in 0..nout {
                        let go = g[o];
                        let row = &wd[o * nin..(o + 1) * nin];
                        for j in 0..nin {
                            gx[j] = gx[j] + row[j] * go;
                        }
                    }
                }
                if self.nodes[*w].requires_grad {
                    let gw = gbuf!(*w);
                    for o in 0..nout {
                        let go = g[o];
                        for j in 0..nin {
                            gw[o * nin + j] = gw[o * nin + j] + xd[j] * go;
                        }
                    }
                }
                if self.nodes[*b].requires_grad {
                    let gb = gbuf!(*b);
                    for o in 0..nout {
                        gb[o] = gb[o] + g[o];
                    }
                }
            }
            Op::Reshape { x } => {
                if self.nodes[*x].requires_grad {
                    let gx = gbuf!(*x);
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let na = self.nodes[*a].value.data.len();
                if self.nodes[*a].requires_grad {
                    let ga = gbuf!(*a);
                    for (x, &y) in ga.iter_mut().zip(&g[..na]) {
                        *x = *x + y;
                    }
                }
                if self.nodes[*b].requires_grad {
                    let gb = gbuf!(*b);
                    for (x, &y) in gb.iter_mut().zip(&g[na..]) {
                        *x = *x + y;
                    }
                }
            }
            Op::StackRows { rows } => {
                let k = self.nodes[rows[0]].value.data.len();
                for (r, &idx) in rows.iter().enumerate() {
                    if self.nodes[idx].requires_grad {
                        let gr = gbuf!(idx);
                        for (x, &y) in gr.iter_mut().zip(&g[r * k..(r + 1) * k]) {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if self.nodes[*x].requires_grad {
                    let k = *self.nodes[i].value.shape.last().unwrap();
                    let pd = &self.nodes[i].value.data;
                    let gx = gbuf!(*x);
                    for (row, (ps, gs)) in pd.chunks(k).zip(g.chunks(k)).enumerate() {
                        let dot = ps
                            .iter()
                            .zip(gs)
                            .fold(F::zero(), |a, (&p, &gv)| a + p * gv);
                        for j in 0..k {
                            let idx = row * k + j;
                            gx[idx] = gx[idx] + ps[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &idx in &[*a, *b] {
                    if self.nodes[idx].requires_grad {
                        let gb = gbuf!(idx);
                        for (x, &y) in gb.iter_mut().zip(g) {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let bd = &self.nodes[*b].value.data;
                    let ga = gbuf!(*a);
                    for j in 0..g.len() {
                        ga[j] = ga[j] + bd[j] * g[j];
                    }
                }
                if self.nodes[*b].requires_grad {
                    let ad = &self.nodes[*a].value.data;
                    let gb = gbuf!(*b);
                    for j in 0..g.len() {
                        gb[j] = gb[j] + ad[j] * g[j];
                    }
                }
            }
            Op::Sum { x } => {
                if self.nodes[*x].requires_grad {
                    let gx = gbuf!(*x);
                    for v in gx.iter_mut() {
                        *v = *v + g[0];
                    }
                }
            }
            Op::MeanScalars { xs } => {
                let inv = F::from(xs.len()).unwrap().recip();
                for &idx in xs {
                    if self.nodes[idx].requires_grad {
                        let gb = gbuf!(idx);
                        gb[0] = gb[0] + g[0] * inv;
                    }
                }
            }
            Op::WeightedCe {
                logits,
                labels,
                sample_weights,
                norm,
                probs,
            } => {
                if self.nodes[*logits].requires_grad {
                    let k = probs.len() / labels.len();
                    let gl = gbuf!(*logits);
                    for (row, ps) in probs.chunks(k).enumerate() {
                        let scale = g[0] * sample_weights[row] / *norm;
                        for j in 0..k {
                            let onehot = if j == labels[row] { F::one() } else { F::zero() };
                            let idx = row * k + j;
                            gl[idx] = gl[idx] + scale * (ps[j] - onehot);
                        }
                    }
                }
            }
            Op::SegCombined {
                logits,
                gt,
                lambda,
                fg_probs,
            } => {
                if self.nodes[*logits].requires_grad {
                    let hw = gt.len();
                    let hw_f = F::from(hw).unwrap();
                    let one = F::one();
                    let two = F::from(2.0).unwrap();
                    let mut inter = F::zero();
                    let mut psum = F::zero();
                    let mut gsum = F::zero();
                    for j in 0..hw {
                        inter = inter + fg_probs[j] * gt[j];
                        psum = psum + fg_probs[j];
                        gsum = gsum + gt[j];
                    }
                    let denom = psum + gsum + one;
                    let num = two * inter + one;
                    let gl = gbuf!(*logits);
                    for j in 0..hw {
                        let p1 = fg_probs[j];
                        let p0 = one - p1;
                        // d(softDice)/dp1_j
                        let ddice = (two * gt[j] * denom - num) / (denom * denom);
                        let dce_dl1 = (p1 - gt[j]) / hw_f;
                        let dloss_dp1 = -(one - *lambda) * ddice;
                        let gl1 = *lambda * dce_dl1 + dloss_dp1 * p1 * p0;
                        gl[hw + j] = gl[hw + j] + g[0] * gl1;
                        gl[j] = gl[j] - g[0] * gl1;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row<F: Float>(row: &[F]) -> Vec<F> {
    let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
    let s = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / s).collect()
}
