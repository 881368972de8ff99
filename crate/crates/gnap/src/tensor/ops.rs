//! Forward operators. Each builds the output values eagerly and records an
//! [`Op`] node so [`super::Tensor::backward`] can replay the graph.

use rayon::prelude::*;

use super::{same_shape, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

pub(crate) enum Op<S: Scalar> {
    Add(Tensor<S>, Tensor<S>),
    AddMany(Vec<Tensor<S>>),
    Mul(Tensor<S>, Tensor<S>),
    MulKernelBroadcast {
        weights: Tensor<S>,
        gates: Tensor<S>,
        area: usize,
    },
    Relu(Tensor<S>),
    Conv2d {
        input: Tensor<S>,
        kernel: Tensor<S>,
        bias: Option<Tensor<S>>,
        stride: usize,
        padding: usize,
    },
    Pool2d {
        input: Tensor<S>,
        window: usize,
        mode: PoolMode,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Tensor<S>),
    Linear {
        input: Tensor<S>,
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
    },
    ConcatChannels(Vec<Tensor<S>>),
    SoftmaxCrossEntropy {
        logits: Tensor<S>,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Sum(Tensor<S>),
    Scale(Tensor<S>, S),
    GateSample {
        logits: Tensor<S>,
        relaxed: Vec<S>,
        inv_tau: S,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<Tensor<S>> {
        match self {
            Op::Add(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
            Op::AddMany(xs) | Op::ConcatChannels(xs) => xs.clone(),
            Op::MulKernelBroadcast { weights, gates, .. } => {
                vec![weights.clone(), gates.clone()]
            }
            Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Sum(x) | Op::Scale(x, _) => vec![x.clone()],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![input.clone(), kernel.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::Pool2d { input, .. } => vec![input.clone()],
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits.clone()],
            Op::GateSample { logits, .. } => vec![logits.clone()],
        }
    }

    pub(crate) fn any_input_requires_grad(&self) -> bool {
        self.inputs().iter().any(|t| t.requires_grad())
    }
}

fn reject_aliases<S: Scalar>(tensors: &[&Tensor<S>]) -> Result<(), TensorError> {
    for i in 0..tensors.len() {
        for j in i + 1..tensors.len() {
            if tensors[i].ptr_eq(tensors[j]) {
                return Err(TensorError::AliasedOperands);
            }
        }
    }
    Ok(())
}

fn dims4<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<[usize; 4], TensorError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch(format!(
            "{what} must be rank 4, got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

impl<S: Scalar> Tensor<S> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        reject_aliases(&[self, other])?;
        same_shape(self, other)?;
        let (a, b) = (self.data(), other.data());
        let values = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = a.shape.clone();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            shape,
            values,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    /// Elementwise sum of any number of same-shape tensors.
    pub fn add_many(tensors: &[Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        assert!(!tensors.is_empty(), "add_many of nothing");
        let refs: Vec<&Tensor<S>> = tensors.iter().collect();
        reject_aliases(&refs)?;
        for t in &tensors[1..] {
            same_shape(&tensors[0], t)?;
        }
        let shape = tensors[0].shape();
        let mut values = tensors[0].to_vec();
        for t in &tensors[1..] {
            let d = t.data();
            for (v, &x) in values.iter_mut().zip(d.values.iter()) {
                *v += x;
            }
        }
        Ok(Tensor::from_op(shape, values, Op::AddMany(tensors.to_vec())))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        reject_aliases(&[self, other])?;
        same_shape(self, other)?;
        let (a, b) = (self.data(), other.data());
        let values = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = a.shape.clone();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            shape,
            values,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    /// Broadcast one gate value over each contiguous kernel block of
    /// `weights`: entry `g*area + j` of the output is
    /// `weights[g*area + j] * gates[g]`.
    pub fn mul_kernel_broadcast(
        weights: &Tensor<S>,
        gates: &Tensor<S>,
        area: usize,
    ) -> Result<Tensor<S>, TensorError> {
        reject_aliases(&[weights, gates])?;
        if weights.len() != gates.len() * area {
            return Err(TensorError::ShapeMismatch(format!(
                "weights len {} != gates len {} * area {}",
                weights.len(),
                gates.len(),
                area
            )));
        }
        let (w, g) = (weights.data(), gates.data());
        let mut values = Vec::with_capacity(w.values.len());
        for (gi, &gate) in g.values.iter().enumerate() {
            for &wv in &w.values[gi * area..(gi + 1) * area] {
                values.push(wv * gate);
            }
        }
        let shape = w.shape.clone();
        drop(w);
        drop(g);
        Ok(Tensor::from_op(
            shape,
            values,
            Op::MulKernelBroadcast {
                weights: weights.clone(),
                gates: gates.clone(),
                area,
            },
        ))
    }

    /// Elementwise `max(0, x)`; subgradient 0 at 0.
    pub fn relu(&self) -> Tensor<S> {
        let d = self.data();
        let values = d
            .values
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let shape = d.shape.clone();
        drop(d);
        Tensor::from_op(shape, values, Op::Relu(self.clone()))
    }

    /// Total sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let d = self.data();
        let total: S = d.values.iter().copied().sum();
        drop(d);
        Tensor::from_op(vec![], vec![total], Op::Sum(self.clone()))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: S) -> Tensor<S> {
        let d = self.data();
        let values = d.values.iter().map(|&x| x * factor).collect();
        let shape = d.shape.clone();
        drop(d);
        Tensor::from_op(shape, values, Op::Scale(self.clone(), factor))
    }
}

/// 2-d cross-correlation of an `[N,Cin,H,W]` input with an
/// `[Cout,Cin,k,k]` kernel, stride `stride`, zero padding `padding`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>, TensorError> {
    let mut operands = vec![input, kernel];
    if let Some(b) = bias {
        operands.push(b);
    }
    reject_aliases(&operands)?;

    let [n, cin, h, w] = dims4(input, "conv input")?;
    let [cout, kcin, kh, kw] = dims4(kernel, "conv kernel")?;
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::BadKernel(kh, kw));
    }
    let k = kh;
    if kcin != cin {
        return Err(TensorError::ShapeMismatch(format!(
            "input has {cin} channels but kernel expects {kcin}"
        )));
    }
    if stride == 0 {
        return Err(TensorError::BadConvGeometry {
            h,
            w,
            k,
            stride,
            padding,
        });
    }
    let bad = |_| TensorError::BadConvGeometry {
        h,
        w,
        k,
        stride,
        padding,
    };
    let oh = conv_out_size(h, k, stride, padding).map_err(bad)?;
    let ow = conv_out_size(w, k, stride, padding).map_err(bad)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "bias shape {:?} != [{cout}]",
                b.shape()
            )));
        }
    }

    let ind = input.data();
    let kd = kernel.data();
    let in_vals: &[S] = &ind.values;
    let k_vals: &[S] = &kd.values;
    let bias_vals = bias.map(|b| b.to_vec());
    let mut out = vec![S::zero(); n * cout * oh * ow];

    // One thread owns one (image, out-channel) plane; inner summation order
    // is fixed, so the result does not depend on the thread count.
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, out_plane)| {
            let img = plane / cout;
            let co = plane % cout;
            if let Some(bv) = &bias_vals {
                out_plane.fill(bv[co]);
            }
            let in_img = &in_vals[img * cin * h * w..(img + 1) * cin * h * w];
            for ci in 0..cin {
                let in_plane = &in_img[ci * h * w..(ci + 1) * h * w];
                let kbase = ((co * cin) + ci) * k * k;
                if stride == 1 {
                    conv_plane_s1(
                        out_plane,
                        in_plane,
                        &k_vals[kbase..kbase + k * k],
                        h,
                        w,
                        oh,
                        ow,
                        k,
                        padding,
                    );
                } else {
                    conv_plane_general(
                        out_plane,
                        in_plane,
                        &k_vals[kbase..kbase + k * k],
                        h,
                        w,
                        oh,
                        ow,
                        k,
                        stride,
                        padding,
                    );
                }
            }
        });

    drop(ind);
    drop(kd);
    Ok(Tensor::from_op(
        vec![n, cout, oh, ow],
        out,
        Op::Conv2d {
            input: input.clone(),
            kernel: kernel.clone(),
            bias: bias.cloned(),
            stride,
            padding,
        },
    ))
}

pub(crate) fn conv_out_size(
    size: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, ()> {
    let padded = size + 2 * padding;
    if padded < k {
        return Err(());
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(());
    }
    Ok(span / stride + 1)
}

/// Stride-1 plane update: shifted-row multiply-accumulate, vectorizes well.
#[allow(clippy::too_many_arguments)]
fn conv_plane_s1<S: Scalar>(
    out_plane: &mut [S],
    in_plane: &[S],
    kvals: &[S],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    padding: usize,
) {
    for kr in 0..k {
        for kc in 0..k {
            let kval = kvals[kr * k + kc];
            if kval == S::zero() {
                continue; // closed gates leave exact zeros; skipping them is free accuracy-wise
            }
            // valid output rows: 0 <= or + kr - padding < h
            let or_lo = padding.saturating_sub(kr);
            let or_hi = (h + padding - kr).min(oh);
            let oc_lo = padding.saturating_sub(kc);
            let oc_hi = (w + padding - kc).min(ow);
            if or_lo >= or_hi || oc_lo >= oc_hi {
                continue;
            }
            for orow in or_lo..or_hi {
                let irow = orow + kr - padding;
                let icol0 = oc_lo + kc - padding;
                let dst = &mut out_plane[orow * ow + oc_lo..orow * ow + oc_hi];
                let src = &in_plane[irow * w + icol0..irow * w + icol0 + (oc_hi - oc_lo)];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d += kval * s;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_plane_general<S: Scalar>(
    out_plane: &mut [S],
    in_plane: &[S],
    kvals: &[S],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    for orow in 0..oh {
        for ocol in 0..ow {
            let mut acc = out_plane[orow * ow + ocol];
            for kr in 0..k {
                let ir = orow * stride + kr;
                if ir < padding || ir - padding >= h {
                    continue;
                }
                for kc in 0..k {
                    let ic = ocol * stride + kc;
                    if ic < padding || ic - padding >= w {
                        continue;
                    }
                    acc += kvals[kr * k + kc] * in_plane[(ir - padding) * w + (ic - padding)];
                }
            }
            out_plane[orow * ow + ocol] = acc;
        }
    }
}

/// Windowed max/avg pooling. Sizes not divisible by the window are padded
/// minimally (negative infinity for max, zero for avg; avg divides by the
/// full window area).
pub fn pool2d<S: Scalar>(
    input: &Tensor<S>,
    window: usize,
    mode: PoolMode,
) -> Result<Tensor<S>, TensorError> {
    if window == 0 {
        return Err(TensorError::BadPoolWindow(window));
    }
    let [n, c, h, w] = dims4(input, "pool input")?;
    let oh = h.div_ceil(window);
    let ow = w.div_ceil(window);
    let ind = input.data();
    let mut out = vec![S::zero(); n * c * oh * ow];
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax = vec![0u32; out.len()];
    }

    for plane in 0..n * c {
        let in_plane = &ind.values[plane * h * w..(plane + 1) * h * w];
        for orow in 0..oh {
            for ocol in 0..ow {
                let oi = (plane * oh + orow) * ow + ocol;
                match mode {
                    PoolMode::Max => {
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0u32;
                        for dr in 0..window {
                            let ir = orow * window + dr;
                            if ir >= h {
                                continue;
                            }
                            for dc in 0..window {
                                let ic = ocol * window + dc;
                                if ic >= w {
                                    continue;
                                }
                                let v = in_plane[ir * w + ic];
                                // first occurrence wins ties
                                if v > best {
                                    best = v;
                                    best_idx = (ir * w + ic) as u32;
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_idx;
                    }
                    PoolMode::Avg => {
                        let mut acc = S::zero();
                        for dr in 0..window {
                            let ir = orow * window + dr;
                            if ir >= h {
                                continue;
                            }
                            for dc in 0..window {
                                let ic = ocol * window + dc;
                                if ic >= w {
                                    continue;
                                }
                                acc += in_plane[ir * w + ic];
                            }
                        }
                        out[oi] = acc / S::from_usize(window * window);
                    }
                }
            }
        }
    }

    drop(ind);
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        Op::Pool2d {
            input: input.clone(),
            window,
            mode,
            argmax,
        },
    ))
}

/// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let [n, c, h, w] = dims4(input, "global pool input")?;
    let ind = input.data();
    let area = S::from_usize(h * w);
    let mut out = vec![S::zero(); n * c];
    for (plane, o) in out.iter_mut().enumerate() {
        let vals = &ind.values[plane * h * w..(plane + 1) * h * w];
        let total: S = vals.iter().copied().sum();
        *o = total / area;
    }
    drop(ind);
    Ok(Tensor::from_op(
        vec![n, c],
        out,
        Op::GlobalAvgPool(input.clone()),
    ))
}

/// Affine map `[N,F] x [K,F] (+ [K]) -> [N,K]`.
pub fn linear<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>, TensorError> {
    let mut operands = vec![input, weight];
    if let Some(b) = bias {
        operands.push(b);
    }
    reject_aliases(&operands)?;

    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[1] {
        return Err(TensorError::ShapeMismatch(format!(
            "linear: input {ishape:?} vs weight {wshape:?}"
        )));
    }
    let (n, f) = (ishape[0], ishape[1]);
    let k = wshape[0];
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(TensorError::ShapeMismatch(format!(
                "bias shape {:?} != [{k}]",
                b.shape()
            )));
        }
    }

    let ind = input.data();
    let wd = weight.data();
    let bias_vals = bias.map(|b| b.to_vec());
    let mut out = vec![S::zero(); n * k];
    for row in 0..n {
        let x = &ind.values[row * f..(row + 1) * f];
        for col in 0..k {
            let wrow = &wd.values[col * f..(col + 1) * f];
            let mut acc = match &bias_vals {
                Some(bv) => bv[col],
                None => S::zero(),
            };
            for (&a, &b) in x.iter().zip(wrow.iter()) {
                acc += a * b;
            }
            out[row * k + col] = acc;
        }
    }
    drop(ind);
    drop(wd);
    Ok(Tensor::from_op(
        vec![n, k],
        out,
        Op::Linear {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
        },
    ))
}

/// Channel-axis concatenation of `[N,Ci,H,W]` tensors sharing N, H, W.
pub fn concat_channels<S: Scalar>(inputs: &[Tensor<S>]) -> Result<Tensor<S>, TensorError> {
    assert!(!inputs.is_empty(), "concat of nothing");
    let refs: Vec<&Tensor<S>> = inputs.iter().collect();
    reject_aliases(&refs)?;
    let [n, _, h, w] = dims4(&inputs[0], "concat input")?;
    let mut channels = Vec::with_capacity(inputs.len());
    for t in inputs {
        let [tn, tc, th, tw] = dims4(t, "concat input")?;
        if tn != n || th != h || tw != w {
            return Err(TensorError::ShapeMismatch(format!(
                "concat expects [N={n},*,{h},{w}], got {:?}",
                t.shape()
            )));
        }
        channels.push(tc);
    }
    let ctotal: usize = channels.iter().sum();
    let mut out = vec![S::zero(); n * ctotal * h * w];
    let plane = h * w;
    for img in 0..n {
        let mut coff = 0;
        for (t, &tc) in inputs.iter().zip(channels.iter()) {
            let d = t.data();
            let src = &d.values[img * tc * plane..(img + 1) * tc * plane];
            let dst = &mut out[(img * ctotal + coff) * plane..(img * ctotal + coff + tc) * plane];
            dst.copy_from_slice(src);
            coff += tc;
        }
    }
    Ok(Tensor::from_op(
        vec![n, ctotal, h, w],
        out,
        Op::ConcatChannels(inputs.to_vec()),
    ))
}

/// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
/// max subtraction.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<Tensor<S>, TensorError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    for &label in labels {
        if label >= k {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
    }
    let ld = logits.data();
    let mut probs = vec![S::zero(); n * k];
    let mut total = S::zero();
    for row in 0..n {
        let x = &ld.values[row * k..(row + 1) * k];
        let mut m = x[0];
        for &v in &x[1..] {
            m = m.max_val(v);
        }
        let mut z = S::zero();
        for (j, &v) in x.iter().enumerate() {
            let e = (v - m).exp();
            probs[row * k + j] = e;
            z += e;
        }
        for p in &mut probs[row * k..(row + 1) * k] {
            *p = *p / z;
        }
        // -log softmax[label] = log(z) + m - x[label]
        total += z.ln() + m - x[labels[row]];
    }
    let mean = total / S::from_usize(n);
    drop(ld);
    Ok(Tensor::from_op(
        vec![],
        vec![mean],
        Op::SoftmaxCrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
        },
    ))
}

/// Hard Gumbel-Softmax sample over gate logit pairs.
///
/// `logits` has shape `[G,2]` with rows `(a_open, a_closed)`. `noise` holds
/// independent standard Gumbel draws, two per gate. The output is the hard
/// mask in {0,1}; its backward is the straight-through relaxed gradient.
pub fn gate_sample<S: Scalar>(
    logits: &Tensor<S>,
    noise: &[f64],
    tau: S,
) -> Result<Tensor<S>, TensorError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "gate logits must be [G,2], got {shape:?}"
        )));
    }
    let gates = shape[0];
    if noise.len() != 2 * gates {
        return Err(TensorError::BadLength {
            got: noise.len(),
            want: 2 * gates,
        });
    }
    assert!(tau > S::zero(), "gate temperature must be positive");
    let ld = logits.data();
    let mut relaxed = vec![S::zero(); gates];
    let mut hard = vec![S::zero(); gates];
    for g in 0..gates {
        let a_open = ld.values[2 * g];
        let a_closed = ld.values[2 * g + 1];
        let diff =
            (a_open + S::from_f64(noise[2 * g]) - a_closed - S::from_f64(noise[2 * g + 1])) / tau;
        let y = sigmoid(diff);
        relaxed[g] = y;
        hard[g] = if y > S::from_f64(0.5) {
            S::one()
        } else {
            S::zero()
        };
    }
    drop(ld);
    Ok(Tensor::from_op(
        vec![gates],
        hard,
        Op::GateSample {
            logits: logits.clone(),
            relaxed,
            inv_tau: S::one() / tau,
        },
    ))
}

impl<S: Scalar> Tensor<S> {
    /// Saved relaxed (pre-threshold) values when this tensor is a
    /// gate-sample node.
    pub fn relaxed_values(&self) -> Option<Vec<S>> {
        match &self.data().op {
            Some(Op::GateSample { relaxed, .. }) => Some(relaxed.clone()),
            _ => None,
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
