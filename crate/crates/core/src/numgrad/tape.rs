use std::collections::BTreeMap;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Element, Tensor};
use super::GradError;

/// Default epsilon inside the instance-norm square root.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are tied to one recording generation: after [`Tape::backward`]
/// or [`Tape::clear`] every handle from the previous recording is stale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    generation: u64,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
}

enum Op<T> {
    Leaf,
    Affine {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BiasAdd {
        x: usize,
        b: usize,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Sigmoid {
        x: usize,
    },
    InstanceNorm {
        x: usize,
        gain: usize,
        shift: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: usize,
        k: usize,
        geom: ConvGeom,
        patches: Vec<T>,
    },
    ConvTranspose2d {
        x: usize,
        k: usize,
        geom: ConvGeom,
    },
    Reshape {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Sum {
        x: usize,
    },
    SquaredDistanceMean {
        a: usize,
        b: usize,
    },
    MeanAbsDiff {
        a: usize,
        b: usize,
    },
    TotalVariation {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        terms: Vec<(usize, T)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::BiasAdd { .. } => "bias_add",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::SquaredDistanceMean { .. } => "squared_distance_mean",
            Op::MeanAbsDiff { .. } => "mean_abs_diff",
            Op::TotalVariation { .. } => "total_variation",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients of a scalar loss with respect to every named parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f32> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor<T>) {
        self.by_name.insert(name.into(), g);
    }
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Single-threaded; one tape per forward/backward pass. Leaves are either
/// constants or named parameters; only parameters receive gradients.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    generation: u64,
    params: BTreeMap<String, usize>,
    trace: Option<Vec<&'static str>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
            params: BTreeMap::new(),
            trace: None,
        }
    }

    /// Records the op names visited by subsequent `backward` calls.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    /// Op names in the order the last backward pass visited them.
    pub fn trace(&self) -> Option<&[&'static str]> {
        self.trace.as_deref()
    }

    /// Names of recorded ops in recording order (leaves excluded).
    pub fn recorded_ops(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.name())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Discards the recording; outstanding handles become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.generation += 1;
    }

    fn idx(&self, v: Var) -> Result<usize, GradError> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(GradError::StaleVar);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, GradError> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, GradError> {
        if !value.all_finite() {
            return Err(GradError::NonFinite(format!("output of {}", op.name())));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a constant input; no gradient is reported for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, GradError> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient `backward` reports by `name`.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var, GradError> {
        if self.params.contains_key(name) {
            return Err(GradError::DuplicateParam(name.to_string()));
        }
        let v = self.push(value, Op::Leaf, true)?;
        self.nodes[v.id].param = Some(name.to_string());
        self.params.insert(name.to_string(), v.id);
        Ok(v)
    }

    /// `x[n×p] · w[p×q] + b[q]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GradError> {
        self.affine_impl(x, w, Some(b))
    }

    /// `x[n×p] · w[p×q]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, GradError> {
        self.affine_impl(x, w, None)
    }

    fn affine_impl(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, GradError> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(GradError::Shape(format!(
                "affine input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, p, q) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * q];
        if let Some(bi) = bi {
            let bs = self.nodes[bi].value.shape();
            if bs != [q] {
                return Err(GradError::Shape(format!(
                    "affine bias {bs:?} does not match output width {q} (weight {ws:?})"
                )));
            }
            let bias = self.nodes[bi].value.data();
            for row in out.chunks_mut(q) {
                row.copy_from_slice(bias);
            }
        }
        gemm_nn(
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            &mut out,
            n,
            p,
            q,
        );
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let rg = self.rg(&ids);
        self.push(
            Tensor::new(vec![n, q], out)?,
            Op::Affine {
                x: xi,
                w: wi,
                b: bi,
            },
            rg,
        )
    }

    /// Adds `b` along the last axis of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, GradError> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let xs = self.nodes[xi].value.shape();
        let c = *xs.last().unwrap_or(&0);
        if self.nodes[bi].value.shape() != [c] {
            return Err(GradError::Shape(format!(
                "bias {:?} does not match last axis of {xs:?}",
                self.nodes[bi].value.shape()
            )));
        }
        let bias = self.nodes[bi].value.data().to_vec();
        let mut out = self.nodes[xi].value.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[xi, bi]);
        self.push(out, Op::BiasAdd { x: xi, b: bi }, rg)
    }

    /// Elementwise `max(x, slope·x)` for `slope ∈ (0,1)`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var, GradError> {
        let xi = self.idx(x)?;
        if !(slope > T::zero() && slope < T::one()) {
            return Err(GradError::InvalidArgument(format!(
                "leaky-relu slope {slope:?} outside (0,1)"
            )));
        }
        if !self.nodes[xi].value.all_finite() {
            return Err(GradError::NonFinite("leaky_relu input".into()));
        }
        let out = self.nodes[xi]
            .value
            .map(|v| if v > T::zero() { v } else { slope * v });
        let rg = self.rg(&[xi]);
        self.push(out, Op::LeakyRelu { x: xi, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, GradError> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi]
            .value
            .map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[xi]);
        self.push(out, Op::Sigmoid { x: xi }, rg)
    }

    /// Per-sample, per-channel standardization of an `n×h×w×c` tensor over
    /// its spatial positions (biased variance), followed by `gain`/`shift`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var, GradError> {
        let (xi, gi, si) = (self.idx(x)?, self.idx(gain)?, self.idx(shift)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(GradError::Shape(format!(
                "instance_norm expects n×h×w×c, got {xs:?}"
            )));
        }
        let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        if hw < 2 {
            return Err(GradError::Shape(format!(
                "instance_norm needs spatial extent ≥ 2, got {xs:?}"
            )));
        }
        if self.nodes[gi].value.shape() != [c] || self.nodes[si].value.shape() != [c] {
            return Err(GradError::Shape(format!(
                "instance_norm gain {:?}/shift {:?} vs channels {c}",
                self.nodes[gi].value.shape(),
                self.nodes[si].value.shape()
            )));
        }
        let xd = self.nodes[xi].value.data();
        let gd = self.nodes[gi].value.data();
        let sd = self.nodes[si].value.data();
        let eps = T::lit(INSTANCE_NORM_EPS);
        let inv_n = T::one() / T::from_usize(hw).unwrap();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            let base = b * hw * c;
            mean.iter_mut().for_each(|m| *m = T::zero());
            var.iter_mut().for_each(|m| *m = T::zero());
            for p in 0..hw {
                for (ch, m) in mean.iter_mut().enumerate() {
                    *m += xd[base + p * c + ch];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m * inv_n);
            for p in 0..hw {
                for ch in 0..c {
                    let d = xd[base + p * c + ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            for ch in 0..c {
                inv_std[b * c + ch] = T::one() / (var[ch] * inv_n + eps).sqrt();
            }
            for p in 0..hw {
                for ch in 0..c {
                    let j = base + p * c + ch;
                    let xh = (xd[j] - mean[ch]) * inv_std[b * c + ch];
                    xhat[j] = xh;
                    out[j] = gd[ch] * xh + sd[ch];
                }
            }
        }
        let rg = self.rg(&[xi, gi, si]);
        self.push(
            Tensor::new(xs, out)?,
            Op::InstanceNorm {
                x: xi,
                gain: gi,
                shift: si,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    fn conv_geom(
        xs: &[usize],
        ks: &[usize],
        stride: usize,
        transpose: bool,
    ) -> Result<ConvGeom, GradError> {
        if xs.len() != 4 || ks.len() != 4 {
            return Err(GradError::Shape(format!(
                "convolution expects n×h×w×c input and kh×kw×ci×co kernel, got {xs:?} and {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(GradError::InvalidArgument("stride must be ≥ 1".into()));
        }
        if xs[3] != ks[2] {
            return Err(GradError::Shape(format!(
                "input channels of {xs:?} do not match kernel {ks:?}"
            )));
        }
        let (n, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, co) = (ks[0], ks[1], ks[3]);
        let (pad_h, pad_w) = ((kh - 1) / 2, (kw - 1) / 2);
        let (oh, ow) = if transpose {
            (h * stride, w * stride)
        } else {
            if kh > h + 2 * pad_h || kw > w + 2 * pad_w {
                return Err(GradError::Shape(format!(
                    "kernel {kh}×{kw} larger than padded input {}×{}",
                    h + 2 * pad_h,
                    w + 2 * pad_w
                )));
            }
            (
                (h + 2 * pad_h - kh) / stride + 1,
                (w + 2 * pad_w - kw) / stride + 1,
            )
        };
        Ok(ConvGeom {
            n,
            h,
            w,
            ci,
            kh,
            kw,
            co,
            oh,
            ow,
            stride,
            pad_h,
            pad_w,
        })
    }

    /// Zero-padded ("same", pad `(k-1)/2`) cross-correlation.
    /// Input `n×h×w×ci`, kernel `kh×kw×ci×co`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var, GradError> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let g = Self::conv_geom(
            self.nodes[xi].value.shape(),
            self.nodes[ki].value.shape(),
            stride,
            false,
        )?;
        let patches = im2col(self.nodes[xi].value.data(), &g);
        let rows = g.n * g.oh * g.ow;
        let kk = g.kh * g.kw * g.ci;
        let mut out = vec![T::zero(); rows * g.co];
        gemm_nn(
            &patches,
            self.nodes[ki].value.data(),
            &mut out,
            rows,
            kk,
            g.co,
        );
        let rg = self.rg(&[xi, ki]);
        let keep = if self.nodes[ki].requires_grad {
            patches
        } else {
            Vec::new()
        };
        self.push(
            Tensor::new(vec![g.n, g.oh, g.ow, g.co], out)?,
            Op::Conv2d {
                x: xi,
                k: ki,
                geom: g,
                patches: keep,
            },
            rg,
        )
    }

    /// Transposed counterpart of [`Tape::conv2d`]: the spatial extent grows
    /// by `stride`. Kernel layout is `kh×kw×ci×co` with `ci` the input channels.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
    ) -> Result<Var, GradError> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let g = Self::conv_geom(
            self.nodes[xi].value.shape(),
            self.nodes[ki].value.shape(),
            stride,
            true,
        )?;
        let kt = kernel_to_ci_major(self.nodes[ki].value.data(), &g);
        let rows = g.n * g.h * g.w;
        let cols_w = g.kh * g.kw * g.co;
        let mut cols = vec![T::zero(); rows * cols_w];
        gemm_nn(
            self.nodes[xi].value.data(),
            &kt,
            &mut cols,
            rows,
            g.ci,
            cols_w,
        );
        let out = col2im_transpose(&cols, &g);
        let rg = self.rg(&[xi, ki]);
        self.push(
            Tensor::new(vec![g.n, g.oh, g.ow, g.co], out)?,
            Op::ConvTranspose2d {
                x: xi,
                k: ki,
                geom: g,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.clone().reshape(shape)?;
        let rg = self.rg(&[xi]);
        self.push(out, Op::Reshape { x: xi }, rg)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>, _>>()?;
        if ids.is_empty() {
            return Err(GradError::InvalidArgument("concat of nothing".into()));
        }
        let n = self.nodes[ids[0]].value.shape()[0];
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.len() != 2 || s[0] != n {
                return Err(GradError::Shape(format!(
                    "concat part {s:?} incompatible with {n} rows"
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&i, &wd) in ids.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * wd..(r + 1) * wd]);
            }
        }
        let rg = self.rg(&ids);
        self.push(
            Tensor::new(vec![n, total], out)?,
            Op::Concat { parts: ids },
            rg,
        )
    }

    /// Rescales every row of a rank-2 tensor to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, GradError> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape().to_vec();
        if s.len() != 2 {
            return Err(GradError::Shape(format!(
                "l2_normalize expects rank 2, got {s:?}"
            )));
        }
        let d = s[1];
        let tiny = T::lit(1e-12);
        let mut out = self.nodes[xi].value.clone();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.data_mut().chunks_mut(d) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            row.iter_mut().for_each(|v| *v = *v / nrm);
            norms.push(nrm);
        }
        let rg = self.rg(&[xi]);
        self.push(out, Op::L2Normalize { x: xi, norms }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, GradError> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v * factor);
        let rg = self.rg(&[xi]);
        self.push(out, Op::Scale { x: xi, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().copied().sum::<T>();
        let rg = self.rg(&[xi]);
        self.push(Tensor::scalar(s), Op::Sum { x: xi }, rg)
    }

    /// `(1/n) Σᵢ ‖aᵢ − bᵢ‖²` with `n` the leading extent.
    pub fn squared_distance_mean(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ai, bi) = self.same_shape(a, b, "squared_distance_mean")?;
        let n = self.nodes[ai].value.shape()[0];
        let s = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::from_usize(n).unwrap();
        let rg = self.rg(&[ai, bi]);
        self.push(
            Tensor::scalar(s),
            Op::SquaredDistanceMean { a: ai, b: bi },
            rg,
        )
    }

    /// Mean over all elements of `|a − b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ai, bi) = self.same_shape(a, b, "mean_abs_diff")?;
        let len = self.nodes[ai].value.len();
        let s = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / T::from_usize(len).unwrap();
        let rg = self.rg(&[ai, bi]);
        self.push(Tensor::scalar(s), Op::MeanAbsDiff { a: ai, b: bi }, rg)
    }

    /// Squared forward differences along rows and columns of an `n×h×w×c`
    /// image batch, summed per image over valid positions and averaged over `n`.
    pub fn total_variation(&mut self, x: Var) -> Result<Var, GradError> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape().to_vec();
        if s.len() != 4 {
            return Err(GradError::Shape(format!(
                "total_variation expects n×h×w×c, got {s:?}"
            )));
        }
        let tv = total_variation_value(self.nodes[xi].value.data(), &s);
        let rg = self.rg(&[xi]);
        self.push(Tensor::scalar(tv), Op::TotalVariation { x: xi }, rg)
    }

    /// Mean negative log-softmax of the labelled class over rows of `logits`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, GradError> {
        let li = self.idx(logits)?;
        let s = self.nodes[li].value.shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(GradError::Shape(format!(
                "logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(GradError::InvalidArgument(format!(
                "label {bad} ≥ {c} classes"
            )));
        }
        let mut probs = vec![T::zero(); s[0] * c];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = self.nodes[li].value.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * c + j] = e;
                z += e;
            }
            probs[r * c..(r + 1) * c]
                .iter_mut()
                .for_each(|p| *p = *p / z);
            loss += -(row[label] - mx - z.ln());
        }
        loss = loss / T::from_usize(labels.len().max(1)).unwrap();
        let rg = self.rg(&[li]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `Σ wᵢ·sᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, GradError> {
        let mut ids = Vec::with_capacity(terms.len());
        let mut total = T::zero();
        for &(v, w) in terms {
            let i = self.idx(v)?;
            if !self.nodes[i].value.is_scalar() {
                return Err(GradError::NotScalar(self.nodes[i].value.shape().to_vec()));
            }
            total += w * self.nodes[i].value.item();
            ids.push((i, w));
        }
        let rg = self.rg(&ids.iter().map(|t| t.0).collect::<Vec<_>>());
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: ids }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize), GradError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb || sa.is_empty() {
            return Err(GradError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok((ai, bi))
    }

    /// Back-propagates from the scalar `loss`, returning the gradient of
    /// every parameter leaf. Clears the tape: a second call without
    /// re-recording fails with [`GradError::StaleVar`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, GradError> {
        let li = self.idx(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(GradError::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), T::one()));
        let mut trace = self.trace.as_ref().map(|_| Vec::new());

        for i in (0..=li).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if let Some(t) = trace.as_mut() {
                t.push(self.nodes[i].op.name());
            }
            self.backprop_node(i, &gy, &mut grads);
        }

        let mut by_name = BTreeMap::new();
        for (name, &id) in &self.params {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()));
            by_name.insert(name.clone(), g);
        }
        if let Some(t) = trace {
            self.trace = Some(t);
        }
        self.clear();
        Ok(Gradients { by_name })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gyd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let (n, p) = (xs[0], xs[1]);
                let q = node.value.shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * p];
                    gemm_nt(gyd, self.nodes[*w].value.data(), &mut dx, n, p, q);
                    accumulate(grads, *x, xs, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); p * q];
                    gemm_tn(self.nodes[*x].value.data(), gyd, &mut dw, n, p, q);
                    accumulate(grads, *w, &[p, q], dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, &[q], column_sums(gyd, q));
                    }
                }
            }
            Op::BiasAdd { x, b } => {
                if self.wants(*x) {
                    accumulate(grads, *x, node.value.shape(), gyd.to_vec());
                }
                if self.wants(*b) {
                    let c = *node.value.shape().last().unwrap();
                    accumulate(grads, *b, &[c], column_sums(gyd, c));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.nodes[*x].value.data();
                let dx = xd
                    .iter()
                    .zip(gyd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { *slope * g })
                    .collect();
                accumulate(grads, *x, node.value.shape(), dx);
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gyd)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, node.value.shape(), dx);
            }
            Op::InstanceNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let s = node.value.shape();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let gd = self.nodes[*gain].value.data();
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for (j, (&g, &xh)) in gyd.iter().zip(xhat).enumerate() {
                        dg[j % c] += g * xh;
                    }
                    accumulate(grads, *gain, &[c], dg);
                }
                if self.wants(*shift) {
                    accumulate(grads, *shift, &[c], column_sums(gyd, c));
                }
                if self.wants(*x) {
                    let cnt = T::from_usize(hw).unwrap();
                    let mut dx = vec![T::zero(); gyd.len()];
                    let mut sum_d = vec![T::zero(); c];
                    let mut sum_dx = vec![T::zero(); c];
                    for b in 0..n {
                        let base = b * hw * c;
                        sum_d.iter_mut().for_each(|v| *v = T::zero());
                        sum_dx.iter_mut().for_each(|v| *v = T::zero());
                        for p in 0..hw {
                            for ch in 0..c {
                                let j = base + p * c + ch;
                                let dxh = gyd[j] * gd[ch];
                                sum_d[ch] += dxh;
                                sum_dx[ch] += dxh * xhat[j];
                            }
                        }
                        for p in 0..hw {
                            for ch in 0..c {
                                let j = base + p * c + ch;
                                let dxh = gyd[j] * gd[ch];
                                dx[j] = inv_std[b * c + ch] / cnt
                                    * (cnt * dxh - sum_d[ch] - xhat[j] * sum_dx[ch]);
                            }
                        }
                    }
                    accumulate(grads, *x, s, dx);
                }
            }
            Op::Conv2d {
                x,
                k,
                geom: g,
                patches,
            } => {
                let rows = g.n * g.oh * g.ow;
                let kk = g.kh * g.kw * g.ci;
                if self.wants(*k) {
                    let mut dk = vec![T::zero(); kk * g.co];
                    gemm_tn(patches, gyd, &mut dk, rows, kk, g.co);
                    accumulate(grads, *k, self.nodes[*k].value.shape(), dk);
                }
                if self.wants(*x) {
                    let mut dpatches = vec![T::zero(); rows * kk];
                    gemm_nt(
                        gyd,
                        self.nodes[*k].value.data(),
                        &mut dpatches,
                        rows,
                        kk,
                        g.co,
                    );
                    let dx = col2im(&dpatches, g);
                    accumulate(grads, *x, self.nodes[*x].value.shape(), dx);
                }
            }
            Op::ConvTranspose2d { x, k, geom: g } => {
                let rows = g.n * g.h * g.w;
                let cols_w = g.kh * g.kw * g.co;
                let dcols = im2col_transpose(gyd, g);
                if self.wants(*k) {
                    let mut dkt = vec![T::zero(); g.ci * cols_w];
                    gemm_tn(
                        self.nodes[*x].value.data(),
                        &dcols,
                        &mut dkt,
                        rows,
                        g.ci,
                        cols_w,
                    );
                    accumulate(
                        grads,
                        *k,
                        self.nodes[*k].value.shape(),
                        kernel_from_ci_major(&dkt, g),
                    );
                }
                if self.wants(*x) {
                    let kt = kernel_to_ci_major(self.nodes[*k].value.data(), g);
                    let mut dx = vec![T::zero(); rows * g.ci];
                    gemm_nt(&dcols, &kt, &mut dx, rows, g.ci, cols_w);
                    accumulate(grads, *x, self.nodes[*x].value.shape(), dx);
                }
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.nodes[*x].value.shape(), gyd.to_vec());
            }
            Op::Concat { parts } => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let wd = self.nodes[p].value.shape()[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * wd);
                        for r in 0..n {
                            dp.extend_from_slice(&gyd[r * total + offset..r * total + offset + wd]);
                        }
                        accumulate(grads, p, &[n, wd], dp);
                    }
                    offset += wd;
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &gyd[r * d..(r + 1) * d]);
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / nrm;
                    }
                }
                accumulate(grads, *x, node.value.shape(), dx);
            }
            Op::Scale { x, factor } => {
                let dx = gyd.iter().map(|&g| g * *factor).collect();
                accumulate(grads, *x, node.value.shape(), dx);
            }
            Op::Sum { x } => {
                let g = gy.item();
                let s = self.nodes[*x].value.shape();
                accumulate(grads, *x, s, vec![g; self.nodes[*x].value.len()]);
            }
            Op::SquaredDistanceMean { a, b } => {
                let s = self.nodes[*a].value.shape();
                let coef = T::lit(2.0) * gy.item() / T::from_usize(s[0]).unwrap();
                let da: Vec<T> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[*b].value.data())
                    .map(|(&x, &y)| coef * (x - y))
                    .collect();
                if self.wants(*b) {
                    accumulate(grads, *b, s, da.iter().map(|&v| -v).collect());
                }
                if self.wants(*a) {
                    accumulate(grads, *a, s, da);
                }
            }
            Op::MeanAbsDiff { a, b } => {
                let s = self.nodes[*a].value.shape();
                let coef = gy.item() / T::from_usize(self.nodes[*a].value.len()).unwrap();
                let da: Vec<T> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[*b].value.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            coef
                        } else if d < T::zero() {
                            -coef
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    accumulate(grads, *b, s, da.iter().map(|&v| -v).collect());
                }
                if self.wants(*a) {
                    accumulate(grads, *a, s, da);
                }
            }
            Op::TotalVariation { x } => {
                let s = self.nodes[*x].value.shape();
                let dx = total_variation_grad(self.nodes[*x].value.data(), s, gy.item());
                accumulate(grads, *x, s, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[*logits].value.shape()[1];
                let coef = gy.item() / T::from_usize(labels.len()).unwrap();
                let mut dl: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * c + l] -= coef;
                }
                accumulate(grads, *logits, self.nodes[*logits].value.shape(), dl);
            }
            Op::WeightedSum { terms } => {
                let g = gy.item();
                for &(t, w) in terms {
                    if self.wants(t) {
                        accumulate(grads, t, &[1], vec![g * w]);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Element>(
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    shape: &[usize],
    data: Vec<T>,
) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}

fn column_sums<T: Element>(data: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in data.chunks(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.kh * g.kw * g.ci;
    let mut patches = vec![T::zero(); g.n * g.oh * g.ow * kk];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * kk;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.ci;
                        let dst = row + (ky * g.kw + kx) * g.ci;
                        patches[dst..dst + g.ci].copy_from_slice(&x[src..src + g.ci]);
                    }
                }
            }
        }
    }
    patches
}

fn col2im<T: Element>(patches: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.kh * g.kw * g.ci;
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.ci];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * kk;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.ci;
                        let src = row + (ky * g.kw + kx) * g.ci;
                        for c in 0..g.ci {
                            x[dst + c] += patches[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Scatter of per-input-pixel columns `[n·h·w, kh·kw·co]` into the upsampled output.
fn col2im_transpose<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let cw = g.kh * g.kw * g.co;
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * g.co];
    for b in 0..g.n {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let row = ((b * g.h + iy) * g.w + ix) * cw;
                for ky in 0..g.kh {
                    let oy = (iy * g.stride + ky) as isize - g.pad_h as isize;
                    if oy < 0 || oy >= g.oh as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ox = (ix * g.stride + kx) as isize - g.pad_w as isize;
                        if ox < 0 || ox >= g.ow as isize {
                            continue;
                        }
                        let dst = ((b * g.oh + oy as usize) * g.ow + ox as usize) * g.co;
                        let src = row + (ky * g.kw + kx) * g.co;
                        for c in 0..g.co {
                            out[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

fn im2col_transpose<T: Element>(gy: &[T], g: &ConvGeom) -> Vec<T> {
    let cw = g.kh * g.kw * g.co;
    let mut cols = vec![T::zero(); g.n * g.h * g.w * cw];
    for b in 0..g.n {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let row = ((b * g.h + iy) * g.w + ix) * cw;
                for ky in 0..g.kh {
                    let oy = (iy * g.stride + ky) as isize - g.pad_h as isize;
                    if oy < 0 || oy >= g.oh as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ox = (ix * g.stride + kx) as isize - g.pad_w as isize;
                        if ox < 0 || ox >= g.ow as isize {
                            continue;
                        }
                        let src = ((b * g.oh + oy as usize) * g.ow + ox as usize) * g.co;
                        let dst = row + (ky * g.kw + kx) * g.co;
                        cols[dst..dst + g.co].copy_from_slice(&gy[src..src + g.co]);
                    }
                }
            }
        }
    }
    cols
}

/// `[kh,kw,ci,co]` → `[ci, kh·kw·co]`.
fn kernel_to_ci_major<T: Element>(k: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); k.len()];
    let cw = g.kh * g.kw * g.co;
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            for ci in 0..g.ci {
                let src = ((ky * g.kw + kx) * g.ci + ci) * g.co;
                let dst = ci * cw + (ky * g.kw + kx) * g.co;
                out[dst..dst + g.co].copy_from_slice(&k[src..src + g.co]);
            }
        }
    }
    out
}

fn kernel_from_ci_major<T: Element>(kt: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); kt.len()];
    let cw = g.kh * g.kw * g.co;
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            for ci in 0..g.ci {
                let dst = ((ky * g.kw + kx) * g.ci + ci) * g.co;
                let src = ci * cw + (ky * g.kw + kx) * g.co;
                out[dst..dst + g.co].copy_from_slice(&kt[src..src + g.co]);
            }
        }
    }
    out
}

pub(crate) fn total_variation_value<T: Element>(x: &[T], s: &[usize]) -> T {
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut tv = T::zero();
    for b in 0..n {
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let j = ((b * h + r) * w + col) * c + ch;
                    if r + 1 < h {
                        let d = x[j + w * c] - x[j];
                        tv += d * d;
                    }
                    if col + 1 < w {
                        let d = x[j + c] - x[j];
                        tv += d * d;
                    }
                }
            }
        }
    }
    tv / T::from_usize(n.max(1)).unwrap()
}

fn total_variation_grad<T: Element>(x: &[T], s: &[usize], g: T) -> Vec<T> {
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let coef = T::lit(2.0) * g / T::from_usize(n.max(1)).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..n {
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let j = ((b * h + r) * w + col) * c + ch;
                    if r + 1 < h {
                        let d = coef * (x[j + w * c] - x[j]);
                        dx[j + w * c] += d;
                        dx[j] -= d;
                    }
                    if col + 1 < w {
                        let d = coef * (x[j + c] - x[j]);
                        dx[j + c] += d;
                        dx[j] -= d;
                    }
                }
            }
        }
    }
    dx
}
