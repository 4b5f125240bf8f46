use super::conv::ConvGeometry;
use super::{broadcast_repeats, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Label value excluded from the cross-entropy average.
pub const IGNORE_LABEL: u8 = 255;

/// Recorded operation with everything its backward rule needs.
#[derive(Debug)]
pub enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Shift { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Relu { x: Var },
    ClampMin { x: Var, min: T },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Reshape { x: Var },
    Softmax { x: Var, cols: usize },
    Sum { x: Var },
    Mean { x: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry, cols: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, inner: usize, normalized: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Upsample { x: Var, factor: usize },
    GlobalAvgPool { x: Var },
    ConcatChannels { a: Var, b: Var },
    ChannelsToTokens { x: Var },
    TokensToChannels { x: Var, height: usize, width: usize },
    CrossEntropy { logits: Var, labels: Vec<u8>, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    scope: usize,
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize by the statistics of the current batch.
    Batch { eps: T },
    /// Normalize by fixed running statistics.
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel mean and unbiased variance observed in a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Tape of executed operations. Nodes are appended in execution order, so the
/// reverse of insertion order is a valid reverse topological order.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
    scope_names: Vec<String>,
    scope_stack: Vec<usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Sum `g` over the leading broadcast axes down to `n` trailing elements.
fn reduce_leading<T: Real>(g: &[T], n: usize) -> Vec<T> {
    if n == g.len() {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    if n == 0 {
        return out;
    }
    for chunk in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            scope_names: vec![String::new()],
            scope_stack: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the backward root with respect to `v`, once `backward` ran.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Hierarchical scope label (`a/b/c`) a node was recorded under.
    pub fn scope_of(&self, v: Var) -> &str {
        &self.scope_names[self.nodes[v.0].scope]
    }

    pub fn push_scope(&mut self, name: &str) {
        let parent = &self.scope_names[*self.scope_stack.last().expect("root scope")];
        let path = if parent.is_empty() {
            name.to_string()
        } else {
            format!("{parent}/{name}")
        };
        let idx = match self.scope_names.iter().position(|s| *s == path) {
            Some(i) => i,
            None => {
                self.scope_names.push(path);
                self.scope_names.len() - 1
            }
        };
        self.scope_stack.push(idx);
    }

    pub fn pop_scope(&mut self) {
        assert!(self.scope_stack.len() > 1, "pop_scope without matching push_scope");
        self.scope_stack.pop();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let scope = *self.scope_stack.last().expect("root scope");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if broadcast_repeats(ta.shape(), tb.shape()).is_none() {
            return Err(Error::dim(format!(
                "{name}: {:?} does not broadcast over {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let n = tb.numel();
        let mut data = Vec::with_capacity(ta.numel());
        if n > 0 {
            for chunk in ta.data().chunks_exact(n) {
                data.extend(chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((out, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div { a, b }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn shift(&mut self, x: Var, offset: T) -> Var {
        self.unary(x, |v| v + offset, Op::Shift { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Log { x })
    }

    /// `max(x, 0)`; the gradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    /// `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        self.unary(x, |v| if v > min { v } else { min }, Op::ClampMin { x, min })
    }

    /// Matrix product. `a` is `M×K` or `B×M×K`; `b` is `K×N` or `B×K×N`
    /// (a 2-D `b` is shared across the batch of a 3-D `a`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        let (batch, m, k, shared_rhs) = match sa.len() {
            2 => (1, sa[0], sa[1], true),
            3 => (sa[0], sa[1], sa[2], sb.len() == 2),
            _ => return Err(mismatch()),
        };
        let (kb, n) = match (sb.len(), shared_rhs) {
            (2, true) => (sb[0], sb[1]),
            (3, false) if sb[0] == batch => (sb[1], sb[2]),
            _ => return Err(mismatch()),
        };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ta, tb) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let rhs = if shared_rhs { tb } else { &tb[bi * k * n..(bi + 1) * k * n] };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ta[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    rhs,
                    (n as isize, 1),
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul { a, b, batch, m, k, n, shared_rhs },
            rg,
        ))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::dim(format!("transpose expects rank 2 or 3, got {s:?}"))),
        };
        let data = transpose_blocks(self.value(x).data(), batch, rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Transpose { x, batch, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().ok_or_else(|| Error::dim("softmax of a scalar"))?;
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut data = t.data().to_vec();
        if cols > 0 {
            for row in data.chunks_exact_mut(cols) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Softmax { x, cols }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::from_usize(t.numel().max(1)).unwrap();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Cross-correlation of `x` (B×C×H×W) with `w` (O×C×k×k), optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = bias {
            same_shape("conv2d bias", self.shape(b), &[geom.out_ch])?;
        }
        let (rows, op) = (geom.col_rows(), geom.out_pixels());
        let in_len = geom.in_ch * geom.in_pixels();
        // Columns of all samples side by side: `rows × (batch·op)`.
        let ld = geom.batch * op;
        let mut cols = vec![T::zero(); rows * ld];
        let mut out = vec![T::zero(); geom.batch * geom.out_ch * op];
        {
            let xd = self.value(x).data();
            for b in 0..geom.batch {
                geom.im2col(&xd[b * in_len..(b + 1) * in_len], &mut cols[b * op..], ld);
            }
            let mut wide = vec![T::zero(); geom.out_ch * ld];
            T::gemm(
                geom.out_ch,
                rows,
                ld,
                T::one(),
                self.value(w).data(),
                (rows as isize, 1),
                &cols,
                (ld as isize, 1),
                T::zero(),
                &mut wide,
                (ld as isize, 1),
            );
            let bd = bias.map(|bv| self.value(bv).data());
            for (i, plane) in out.chunks_exact_mut(op).enumerate() {
                let (b, o) = (i / geom.out_ch, i % geom.out_ch);
                plane.copy_from_slice(&wide[o * ld + b * op..o * ld + (b + 1) * op]);
                if let Some(bd) = bd {
                    plane.iter_mut().for_each(|v| *v = *v + bd[o]);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Tensor::new(geom.output_shape().to_vec(), out)?,
            Op::Conv2d { x, w, bias, geom, cols },
            rg,
        ))
    }

    /// Per-channel normalization of a `B×C` or `B×C×H×W` tensor followed by the
    /// `gamma`/`beta` affine map. In batch mode the observed moments (mean and
    /// unbiased variance) are returned so the caller can update running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::dim(format!("batch_norm expects B×C or B×C×H×W, got {s:?}")));
        }
        let (batch, channels) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        same_shape("batch_norm gamma", self.shape(gamma), &[channels])?;
        same_shape("batch_norm beta", self.shape(beta), &[channels])?;
        let count = batch * inner;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        let (eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                if count < 2 {
                    return Err(Error::Invariant(format!(
                        "batch_norm in training mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let n = T::from_usize(count).unwrap();
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * inner;
                        mean[c] = mean[c] + xd[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * inner;
                        let mu = mean[c];
                        var[c] = var[c]
                            + xd[base..base + inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                (eps, true)
            }
            NormStats::Running { mean: rm, var: rv, eps } => {
                if rm.len() != channels || rv.len() != channels {
                    return Err(Error::dim("batch_norm running statistics length mismatch"));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                (eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut normalized = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                let (mu, is, g, bt) = (mean[c], inv_std[c], gd[c], bd[c]);
                for i in base..base + inner {
                    let xh = (xd[i] - mu) * is;
                    normalized[i] = xh;
                    out[i] = g * xh + bt;
                }
            }
        }
        let moments = batch_stats.then(|| {
            let n = T::from_usize(count).unwrap();
            let unbiased = T::from_usize(count - 1).unwrap();
            BatchMoments {
                var: var.iter().map(|&v| v * n / unbiased).collect(),
                mean: mean.clone(),
            }
        });
        let rg = self.any_grad(&[x, gamma, beta]);
        let var_out = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm { x, gamma, beta, inner, normalized, inv_std, batch_stats },
            rg,
        );
        Ok((var_out, moments))
    }

    /// Nearest-neighbour upsampling of B×C×H×W by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::dim(format!("upsample expects B×C×H×W and factor ≥ 1, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() * factor * factor);
        for plane in xd.chunks_exact(h * w) {
            for i in 0..oh {
                let row = &plane[(i / factor) * w..(i / factor + 1) * w];
                for j in 0..ow {
                    out.push(row[j / factor]);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![s[0], s[1], oh, ow], out)?, Op::Upsample { x, factor }, rg))
    }

    /// B×C×H×W → B×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool expects B×C×H×W, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let n = T::from_usize(hw).unwrap();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![s[0], s[1]], data)?, Op::GlobalAvgPool { x }, rg))
    }

    /// Concatenate two B×C×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim(format!("concat_channels: {sa:?} and {sb:?} incompatible")));
        }
        let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for i in 0..sa[0] {
            out.extend_from_slice(&da[i * la..(i + 1) * la]);
            out.extend_from_slice(&db[i * lb..(i + 1) * lb]);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], out)?,
            Op::ConcatChannels { a, b },
            rg,
        ))
    }

    /// B×C×H×W feature map → B×(H·W)×C token matrix, one token per spatial cell.
    pub fn channels_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("channels_to_tokens expects B×C×H×W, got {s:?}")));
        }
        let n = s[2] * s[3];
        let data = transpose_blocks(self.value(x).data(), s[0], s[1], n);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![s[0], n, s[1]], data)?, Op::ChannelsToTokens { x }, rg))
    }

    /// Inverse of [`channels_to_tokens`](Self::channels_to_tokens).
    pub fn tokens_to_channels(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != height * width {
            return Err(Error::dim(format!(
                "tokens_to_channels: {s:?} is not B×({height}·{width})×C"
            )));
        }
        let data = transpose_blocks(self.value(x).data(), s[0], s[1], s[2]);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[2], height, width], data)?,
            Op::TokensToChannels { x, height, width },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of B×K×H×W logits against per-pixel labels
    /// (B·H·W entries, row-major). Pixels labelled [`IGNORE_LABEL`] are skipped;
    /// with no valid pixel the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("cross_entropy expects B×K×H×W logits, got {s:?}")));
        }
        let (batch, k, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        if labels.len() != batch * hw {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for logits {s:?}",
                labels.len()
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l != IGNORE_LABEL && l as usize >= k {
                let (b, p) = (i / hw, i % hw);
                return Err(Error::Data(format!(
                    "label {l} ≥ {k} classes at sample {b}, row {}, col {}",
                    p / w,
                    p % w
                )));
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        let mut row = vec![T::zero(); k];
        for b in 0..batch {
            for p in 0..hw {
                for (c, r) in row.iter_mut().enumerate() {
                    *r = ld[(b * k + c) * hw + p];
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                for (c, &r) in row.iter().enumerate() {
                    probs[(b * k + c) * hw + p] = (r - lse).exp();
                }
                let label = labels[b * hw + p];
                if label != IGNORE_LABEL {
                    total = total + lse - row[label as usize];
                    count += 1;
                }
            }
        }
        let loss = if count > 0 {
            total / T::from_usize(count).unwrap()
        } else {
            T::zero()
        };
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, count },
            rg,
        ))
    }

    /// Reverse-mode sweep from the scalar `root`. A graph can be differentiated
    /// once; every trainable leaf ends up with a gradient (zero if unreachable).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Invariant(
                "backward already ran on this graph; re-execute the forward pass".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::dim(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::new(self.shape(root).to_vec(), vec![T::one()])?);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(g) = self.grads[i].take() {
                backprop(&self.nodes, &mut self.grads, i, &g);
                self.grads[i] = Some(g);
            }
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    /// Floating-point operation count of one node: a multiply-add is 2, batch
    /// normalization 2 per element, softmax 3 per element, every other
    /// arithmetic op 1 per output element, data movement 0.
    pub fn flops(&self, v: Var) -> u64 {
        let node = &self.nodes[v.0];
        let out = node.value.numel() as u64;
        match &node.op {
            Op::Leaf
            | Op::Reshape { .. }
            | Op::Transpose { .. }
            | Op::Upsample { .. }
            | Op::ConcatChannels { .. }
            | Op::ChannelsToTokens { .. }
            | Op::TokensToChannels { .. } => 0,
            Op::Add { .. }
            | Op::Sub { .. }
            | Op::Mul { .. }
            | Op::Div { .. }
            | Op::Scale { .. }
            | Op::Shift { .. }
            | Op::Exp { .. }
            | Op::Log { .. }
            | Op::Relu { .. }
            | Op::ClampMin { .. } => out,
            Op::MatMul { batch, m, k, n, .. } => 2 * (batch * m * k * n) as u64,
            Op::Softmax { .. } => 3 * out,
            Op::Sum { x } | Op::Mean { x } | Op::GlobalAvgPool { x } => self.value(*x).numel() as u64,
            Op::Conv2d { geom, bias, .. } => 2 * geom.macs() + if bias.is_some() { out } else { 0 },
            Op::BatchNorm { .. } => 2 * out,
            Op::CrossEntropy { logits, .. } => 3 * self.value(*logits).numel() as u64,
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Transpose each of `batch` contiguous `rows × cols` blocks.
fn transpose_blocks<T: Real>(data: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    let block = rows * cols;
    for b in 0..batch {
        let src = &data[b * block..(b + 1) * block];
        let dst = &mut out[b * block..(b + 1) * block];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let g = Tensor::new(nodes[v.0].value.shape().to_vec(), data).expect("gradient shape matches value");
    match &mut grads[v.0] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], i: usize, g: &Tensor<T>) {
    let gd = g.data();
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, gd.to_vec());
            if needs(*b) {
                accumulate(nodes, grads, *b, reduce_leading(gd, val(*b).len()));
            }
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, gd.to_vec());
            if needs(*b) {
                let r = reduce_leading(gd, val(*b).len());
                accumulate(nodes, grads, *b, r.into_iter().map(|v| -v).collect());
            }
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a), val(*b));
            let n = bd.len();
            if needs(*a) {
                let ga = gd.iter().enumerate().map(|(j, &gv)| gv * bd[j % n]).collect();
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let prod: Vec<T> = gd.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                accumulate(nodes, grads, *b, reduce_leading(&prod, n));
            }
        }
        Op::Div { a, b } => {
            let (ad, bd) = (val(*a), val(*b));
            let n = bd.len();
            if needs(*a) {
                let ga = gd.iter().enumerate().map(|(j, &gv)| gv / bd[j % n]).collect();
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let prod: Vec<T> = gd
                    .iter()
                    .zip(ad)
                    .enumerate()
                    .map(|(j, (&gv, &av))| -gv * av / (bd[j % n] * bd[j % n]))
                    .collect();
                accumulate(nodes, grads, *b, reduce_leading(&prod, n));
            }
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, gd.iter().map(|&v| v * *factor).collect());
        }
        Op::Shift { x } => accumulate(nodes, grads, *x, gd.to_vec()),
        Op::Exp { x } => {
            let y = nodes[i].value.data();
            accumulate(nodes, grads, *x, gd.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
        }
        Op::Log { x } => {
            let xd = val(*x);
            accumulate(nodes, grads, *x, gd.iter().zip(xd).map(|(&gv, &xv)| gv / xv).collect());
        }
        Op::Relu { x } => {
            let xd = val(*x);
            let gx = gd
                .iter()
                .zip(xd)
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::ClampMin { x, min } => {
            let xd = val(*x);
            let gx = gd
                .iter()
                .zip(xd)
                .map(|(&gv, &xv)| if xv > *min { gv } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (ad, bd) = (val(*a), val(*b));
            if needs(*a) {
                // dA = dC · Bᵀ
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    let rhs = if *shared_rhs { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &gd[bi * m * n..(bi + 1) * m * n],
                        (n as isize, 1),
                        rhs,
                        (1, n as isize),
                        T::zero(),
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        (k as isize, 1),
                    );
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                // dB = Aᵀ · dC, summed over the batch when B is shared
                let mut gb = vec![T::zero(); if *shared_rhs { k * n } else { batch * k * n }];
                for bi in 0..batch {
                    let (dst, beta) = if *shared_rhs {
                        (&mut gb[..], if bi == 0 { T::zero() } else { T::one() })
                    } else {
                        (&mut gb[bi * k * n..(bi + 1) * k * n], T::zero())
                    };
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &ad[bi * m * k..(bi + 1) * m * k],
                        (1, k as isize),
                        &gd[bi * m * n..(bi + 1) * m * n],
                        (n as isize, 1),
                        beta,
                        dst,
                        (n as isize, 1),
                    );
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose { x, batch, rows, cols } => {
            accumulate(nodes, grads, *x, transpose_blocks(gd, *batch, *cols, *rows));
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, gd.to_vec()),
        Op::Softmax { x, cols } => {
            let y = nodes[i].value.data();
            let mut gx = vec![T::zero(); y.len()];
            for ((yr, gr), out) in y
                .chunks_exact(*cols)
                .zip(gd.chunks_exact(*cols))
                .zip(gx.chunks_exact_mut(*cols))
            {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sum { x } => accumulate(nodes, grads, *x, vec![gd[0]; val(*x).len()]),
        Op::Mean { x } => {
            let n = val(*x).len();
            let v = gd[0] / T::from_usize(n.max(1)).unwrap();
            accumulate(nodes, grads, *x, vec![v; n]);
        }
        Op::Conv2d { x, w, bias, geom, cols } => {
            let (rows, op) = (geom.col_rows(), geom.out_pixels());
            let in_len = geom.in_ch * geom.in_pixels();
            let ld = geom.batch * op;
            // dY regrouped as `out_ch × (batch·op)` to match the column layout
            let mut wide = vec![T::zero(); geom.out_ch * ld];
            for (i, plane) in gd.chunks_exact(op).enumerate() {
                let (b, o) = (i / geom.out_ch, i % geom.out_ch);
                wide[o * ld + b * op..o * ld + (b + 1) * op].copy_from_slice(plane);
            }
            if needs(*w) {
                let mut gw = vec![T::zero(); geom.out_ch * rows];
                T::gemm(
                    geom.out_ch,
                    ld,
                    rows,
                    T::one(),
                    &wide,
                    (ld as isize, 1),
                    cols,
                    (1, ld as isize),
                    T::zero(),
                    &mut gw,
                    (rows as isize, 1),
                );
                accumulate(nodes, grads, *w, gw);
            }
            if let Some(bv) = bias {
                if needs(*bv) {
                    let gb = wide.chunks_exact(ld).map(|row| row.iter().copied().sum::<T>()).collect();
                    accumulate(nodes, grads, *bv, gb);
                }
            }
            if needs(*x) {
                let mut dcols = vec![T::zero(); rows * ld];
                // dcols = Wᵀ · dY
                T::gemm(
                    rows,
                    geom.out_ch,
                    ld,
                    T::one(),
                    val(*w),
                    (1, rows as isize),
                    &wide,
                    (ld as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (ld as isize, 1),
                );
                let mut gx = vec![T::zero(); geom.batch * in_len];
                for b in 0..geom.batch {
                    geom.col2im(&dcols[b * op..], ld, &mut gx[b * in_len..(b + 1) * in_len]);
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::BatchNorm { x, gamma, beta, inner, normalized, inv_std, batch_stats } => {
            let inner = *inner;
            let channels = inv_std.len();
            let batch = gd.len() / (channels * inner);
            let gam = val(*gamma);
            let mut sum_g = vec![T::zero(); channels];
            let mut sum_gx = vec![T::zero(); channels];
            for b in 0..batch {
                for c in 0..channels {
                    let base = (b * channels + c) * inner;
                    for j in base..base + inner {
                        sum_g[c] = sum_g[c] + gd[j];
                        sum_gx[c] = sum_gx[c] + gd[j] * normalized[j];
                    }
                }
            }
            accumulate(nodes, grads, *gamma, sum_gx.clone());
            accumulate(nodes, grads, *beta, sum_g.clone());
            if needs(*x) {
                let mut gx = vec![T::zero(); gd.len()];
                let m = T::from_usize(batch * inner).unwrap();
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * inner;
                        let k = gam[c] * inv_std[c];
                        for j in base..base + inner {
                            gx[j] = if *batch_stats {
                                k * (gd[j] - sum_g[c] / m - normalized[j] * sum_gx[c] / m)
                            } else {
                                k * gd[j]
                            };
                        }
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::Upsample { x, factor } => {
            let s = nodes[x.0].value.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h * factor, w * factor);
            let mut gx = vec![T::zero(); val(*x).len()];
            for (plane, out) in gd.chunks_exact(oh * ow).zip(gx.chunks_exact_mut(h * w)) {
                for r in 0..oh {
                    let dst = &mut out[(r / factor) * w..(r / factor + 1) * w];
                    for (c, &v) in plane[r * ow..(r + 1) * ow].iter().enumerate() {
                        dst[c / factor] = dst[c / factor] + v;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::GlobalAvgPool { x } => {
            let s = nodes[x.0].value.shape();
            let hw = s[2] * s[3];
            let n = T::from_usize(hw).unwrap();
            let gx = gd.iter().flat_map(|&v| std::iter::repeat_n(v / n, hw)).collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::ConcatChannels { a, b } => {
            let (la, lb) = (val(*a).len(), val(*b).len());
            let batch = nodes[a.0].value.shape()[0];
            let (pa, pb) = (la / batch, lb / batch);
            let mut ga = Vec::with_capacity(la);
            let mut gb = Vec::with_capacity(lb);
            for chunk in gd.chunks_exact(pa + pb) {
                ga.extend_from_slice(&chunk[..pa]);
                gb.extend_from_slice(&chunk[pa..]);
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::ChannelsToTokens { x } => {
            let s = nodes[x.0].value.shape();
            accumulate(nodes, grads, *x, transpose_blocks(gd, s[0], s[2] * s[3], s[1]));
        }
        Op::TokensToChannels { x, .. } => {
            let s = nodes[x.0].value.shape();
            accumulate(nodes, grads, *x, transpose_blocks(gd, s[0], s[2], s[1]));
        }
        Op::CrossEntropy { logits, labels, probs, count } => {
            let mut gx = vec![T::zero(); probs.len()];
            if *count > 0 {
                let s = nodes[logits.0].value.shape();
                let (k, hw) = (s[1], s[2] * s[3]);
                let scale = gd[0] / T::from_usize(*count).unwrap();
                for (idx, &label) in labels.iter().enumerate() {
                    if label == IGNORE_LABEL {
                        continue;
                    }
                    let (b, p) = (idx / hw, idx % hw);
                    for c in 0..k {
                        let j = (b * k + c) * hw + p;
                        let target = if c == label as usize { T::one() } else { T::zero() };
                        gx[j] = scale * (probs[j] - target);
                    }
                }
            }
            accumulate(nodes, grads, *logits, gx);
        }
    }
}
