//! Reverse-mode gradient propagation over the implicit graph.

use std::collections::HashSet;

use rayon::prelude::*;

use super::ops::{Op, PoolMode};
use super::{Tensor, TensorData, TensorError};
use crate::scalar::Scalar;

impl<S: Scalar> Tensor<S> {
    /// Populate `grad` on every trainable leaf this scalar depends on.
    ///
    /// Visits nodes in exact reverse topological order; repeated invocation
    /// without [`Tensor::zero_grad`] accumulates.
    pub fn backward(&self) -> Result<(), TensorError> {
        {
            let d = self.data();
            if d.values.len() != 1 {
                return Err(TensorError::NonScalarLoss(d.shape.clone()));
            }
            if !d.requires_grad {
                // Nothing trainable is reachable; all tensors stay grad-free.
                return Ok(());
            }
        }

        let mut topo: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                topo.push(t);
                continue;
            }
            let id = t.id();
            if !visited.insert(id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.data().op {
                for input in op.inputs() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input, false));
                    }
                }
            }
        }

        // Interior gradients are scratch for this pass; only leaves keep
        // accumulating across invocations.
        for node in &topo {
            let mut d = node.data_mut();
            if d.op.is_some() {
                d.grad = None;
            }
        }

        {
            let mut d = self.data_mut();
            let g = d.grad.get_or_insert_with(|| vec![S::zero(); 1]);
            g[0] += S::one();
        }

        for node in topo.iter().rev() {
            propagate(node);
        }
        Ok(())
    }
}

fn ensure_grad<S: Scalar>(d: &mut TensorData<S>) {
    if d.grad.is_none() {
        d.grad = Some(vec![S::zero(); d.values.len()]);
    }
}

/// Accumulate `scaled * upstream` into a tensor's gradient buffer.
fn add_scaled<S: Scalar>(target: &Tensor<S>, upstream: &[S], scale: S) {
    if !target.requires_grad() {
        return;
    }
    let mut d = target.data_mut();
    ensure_grad(&mut d);
    let g = d.grad.as_mut().unwrap();
    for (gi, &u) in g.iter_mut().zip(upstream.iter()) {
        *gi += scale * u;
    }
}

fn propagate<S: Scalar>(node: &Tensor<S>) {
    let nd = node.data();
    let Some(op) = &nd.op else {
        return; // leaf
    };
    let Some(upstream) = nd.grad.as_ref() else {
        return; // no gradient reached this node
    };
    let u: &[S] = upstream;

    match op {
        Op::Add(a, b) => {
            add_scaled(a, u, S::one());
            add_scaled(b, u, S::one());
        }
        Op::AddMany(xs) => {
            for x in xs {
                add_scaled(x, u, S::one());
            }
        }
        Op::Scale(x, factor) => {
            add_scaled(x, u, *factor);
        }
        Op::Sum(x) => {
            if x.requires_grad() {
                let mut d = x.data_mut();
                ensure_grad(&mut d);
                let g = d.grad.as_mut().unwrap();
                for gi in g.iter_mut() {
                    *gi += u[0];
                }
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bv = b.to_vec();
                let mut d = a.data_mut();
                ensure_grad(&mut d);
                let g = d.grad.as_mut().unwrap();
                for i in 0..g.len() {
                    g[i] += u[i] * bv[i];
                }
            }
            if b.requires_grad() {
                let av = a.to_vec();
                let mut d = b.data_mut();
                ensure_grad(&mut d);
                let g = d.grad.as_mut().unwrap();
                for i in 0..g.len() {
                    g[i] += u[i] * av[i];
                }
            }
        }
        Op::MulKernelBroadcast {
            weights,
            gates,
            area,
        } => {
            let area = *area;
            if weights.requires_grad() {
                let gv = gates.to_vec();
                let mut d = weights.data_mut();
                ensure_grad(&mut d);
                let g = d.grad.as_mut().unwrap();
                for (gi, &gate) in gv.iter().enumerate() {
                    for j in 0..area {
                        g[gi * area + j] += u[gi * area + j] * gate;
                    }
                }
            }
            if gates.requires_grad() {
                let wv = weights.to_vec();
                let mut d = gates.data_mut();
                ensure_grad(&mut d);
                let g = d.grad.as_mut().unwrap();
                for gi in 0..g.len() {
                    let mut acc = S::zero();
                    for j in 0..area {
                        acc += u[gi * area + j] * wv[gi * area + j];
                    }
                    g[gi] += acc;
                }
            }
        }
        Op::Relu(x) => {
            if x.requires_grad() {
                let mut d = x.data_mut();
                ensure_grad(&mut d);
                let TensorData { values, grad, .. } = &mut *d;
                let g = grad.as_mut().unwrap();
                for i in 0..g.len() {
                    if values[i] > S::zero() {
                        g[i] += u[i];
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            conv2d_backward(u, &nd.shape, input, kernel, bias.as_ref(), *stride, *padding);
        }
        Op::Pool2d {
            input,
            window,
            mode,
            argmax,
        } => {
            pool2d_backward(u, &nd.shape, input, *window, *mode, argmax);
        }
        Op::GlobalAvgPool(input) => {
            if input.requires_grad() {
                let ishape = input.shape();
                let (h, w) = (ishape[2], ishape[3]);
                let inv_area = S::one() / S::from_usize(h * w);
                let mut d = input.data_mut();
                ensure_grad(&mut d);
                let g = d.grad.as_mut().unwrap();
                for (plane, &up) in u.iter().enumerate() {
                    let contribution = up * inv_area;
                    for gi in &mut g[plane * h * w..(plane + 1) * h * w] {
                        *gi += contribution;
                    }
                }
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            linear_backward(u, &nd.shape, input, weight, bias.as_ref());
        }
        Op::ConcatChannels(inputs) => {
            let (n, h, w) = {
                let s = &nd.shape;
                (s[0], s[2], s[3])
            };
            let ctotal = nd.shape[1];
            let plane = h * w;
            let mut coff = 0;
            for t in inputs {
                let tc = t.shape()[1];
                if t.requires_grad() {
                    let mut d = t.data_mut();
                    ensure_grad(&mut d);
                    let g = d.grad.as_mut().unwrap();
                    for img in 0..n {
                        let src =
                            &u[(img * ctotal + coff) * plane..(img * ctotal + coff + tc) * plane];
                        let dst = &mut g[img * tc * plane..(img + 1) * tc * plane];
                        for (gi, &ui) in dst.iter_mut().zip(src.iter()) {
                            *gi += ui;
                        }
                    }
                }
                coff += tc;
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if logits.requires_grad() {
                let n = labels.len();
                let k = logits.shape()[1];
                let scale = u[0] / S::from_usize(n);
                let mut d = logits.data_mut();
                ensure_grad(&mut d);
                let g = d.grad.as_mut().unwrap();
                for row in 0..n {
                    for col in 0..k {
                        let indicator = if col == labels[row] {
                            S::one()
                        } else {
                            S::zero()
                        };
                        g[row * k + col] += scale * (probs[row * k + col] - indicator);
                    }
                }
            }
        }
        Op::GateSample {
            logits,
            relaxed,
            inv_tau,
        } => {
            // Straight-through: the hard sample inherits the relaxed
            // sigmoid's gradient.
            if logits.requires_grad() {
                let mut d = logits.data_mut();
                ensure_grad(&mut d);
                let g = d.grad.as_mut().unwrap();
                for (gi, &y) in relaxed.iter().enumerate() {
                    let dy = u[gi] * y * (S::one() - y) * *inv_tau;
                    g[2 * gi] += dy;
                    g[2 * gi + 1] -= dy;
                }
            }
        }
    }
}

fn conv2d_backward<S: Scalar>(
    u: &[S],
    out_shape: &[usize],
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) {
    let (n, cout, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let ishape = input.shape();
    let (cin, h, w) = (ishape[1], ishape[2], ishape[3]);
    let k = kernel.shape()[2];

    if let Some(b) = bias {
        if b.requires_grad() {
            let mut d = b.data_mut();
            ensure_grad(&mut d);
            let g = d.grad.as_mut().unwrap();
            for img in 0..n {
                for co in 0..cout {
                    let plane = &u[(img * cout + co) * oh * ow..(img * cout + co + 1) * oh * ow];
                    let total: S = plane.iter().copied().sum();
                    g[co] += total;
                }
            }
        }
    }

    if input.requires_grad() {
        let kd = kernel.data();
        let k_vals: &[S] = &kd.values;
        let mut id = input.data_mut();
        ensure_grad(&mut id);
        let g = id.grad.as_mut().unwrap();
        // each task owns one image's input-gradient block
        g.par_chunks_mut(cin * h * w).enumerate().for_each(|(img, gin)| {
            for co in 0..cout {
                let u_plane = &u[(img * cout + co) * oh * ow..(img * cout + co + 1) * oh * ow];
                for ci in 0..cin {
                    let gin_plane = &mut gin[ci * h * w..(ci + 1) * h * w];
                    let kbase = (co * cin + ci) * k * k;
                    for kr in 0..k {
                        for kc in 0..k {
                            let kval = k_vals[kbase + kr * k + kc];
                            if kval == S::zero() {
                                continue;
                            }
                            if stride == 1 {
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
                                    let dst = &mut gin_plane
                                        [irow * w + icol0..irow * w + icol0 + (oc_hi - oc_lo)];
                                    let src = &u_plane[orow * ow + oc_lo..orow * ow + oc_hi];
                                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                                        *d += kval * s;
                                    }
                                }
                            } else {
                                for orow in 0..oh {
                                    let ir = orow * stride + kr;
                                    if ir < padding || ir - padding >= h {
                                        continue;
                                    }
                                    for ocol in 0..ow {
                                        let ic = ocol * stride + kc;
                                        if ic < padding || ic - padding >= w {
                                            continue;
                                        }
                                        gin_plane[(ir - padding) * w + (ic - padding)] +=
                                            kval * u_plane[orow * ow + ocol];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    if kernel.requires_grad() {
        let ind = input.data();
        let in_vals: &[S] = &ind.values;
        let mut kd = kernel.data_mut();
        ensure_grad(&mut kd);
        let g = kd.grad.as_mut().unwrap();
        // each task owns one output channel's kernel-gradient block; the
        // batch reduction runs in image order inside the task
        g.par_chunks_mut(cin * k * k).enumerate().for_each(|(co, gk)| {
            for img in 0..n {
                let u_plane = &u[(img * cout + co) * oh * ow..(img * cout + co + 1) * oh * ow];
                for ci in 0..cin {
                    let in_plane = &in_vals[(img * cin + ci) * h * w..(img * cin + ci + 1) * h * w];
                    for kr in 0..k {
                        for kc in 0..k {
                            let mut acc = S::zero();
                            if stride == 1 {
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
                                    let a = &u_plane[orow * ow + oc_lo..orow * ow + oc_hi];
                                    let b = &in_plane
                                        [irow * w + icol0..irow * w + icol0 + (oc_hi - oc_lo)];
                                    for (&x, &y) in a.iter().zip(b.iter()) {
                                        acc += x * y;
                                    }
                                }
                            } else {
                                for orow in 0..oh {
                                    let ir = orow * stride + kr;
                                    if ir < padding || ir - padding >= h {
                                        continue;
                                    }
                                    for ocol in 0..ow {
                                        let ic = ocol * stride + kc;
                                        if ic < padding || ic - padding >= w {
                                            continue;
                                        }
                                        acc += u_plane[orow * ow + ocol]
                                            * in_plane[(ir - padding) * w + (ic - padding)];
                                    }
                                }
                            }
                            gk[(ci * k + kr) * k + kc] += acc;
                        }
                    }
                }
            }
        });
    }
}

fn pool2d_backward<S: Scalar>(
    u: &[S],
    out_shape: &[usize],
    input: &Tensor<S>,
    window: usize,
    mode: PoolMode,
    argmax: &[u32],
) {
    if !input.requires_grad() {
        return;
    }
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let ishape = input.shape();
    let (h, w) = (ishape[2], ishape[3]);
    let planes = out_shape[0] * out_shape[1];
    let mut d = input.data_mut();
    ensure_grad(&mut d);
    let g = d.grad.as_mut().unwrap();
    match mode {
        PoolMode::Max => {
            for plane in 0..planes {
                let gin = &mut g[plane * h * w..(plane + 1) * h * w];
                for oi in 0..oh * ow {
                    gin[argmax[plane * oh * ow + oi] as usize] += u[plane * oh * ow + oi];
                }
            }
        }
        PoolMode::Avg => {
            let inv = S::one() / S::from_usize(window * window);
            for plane in 0..planes {
                let gin = &mut g[plane * h * w..(plane + 1) * h * w];
                for orow in 0..oh {
                    for ocol in 0..ow {
                        let contribution = u[(plane * oh + orow) * ow + ocol] * inv;
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
                                gin[ir * w + ic] += contribution;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn linear_backward<S: Scalar>(
    u: &[S],
    out_shape: &[usize],
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) {
    let (n, k) = (out_shape[0], out_shape[1]);
    let f = input.shape()[1];

    if let Some(b) = bias {
        if b.requires_grad() {
            let mut d = b.data_mut();
            ensure_grad(&mut d);
            let g = d.grad.as_mut().unwrap();
            for row in 0..n {
                for col in 0..k {
                    g[col] += u[row * k + col];
                }
            }
        }
    }

    if input.requires_grad() {
        let wd = weight.data();
        let mut d = input.data_mut();
        ensure_grad(&mut d);
        let g = d.grad.as_mut().unwrap();
        for row in 0..n {
            for col in 0..k {
                let ui = u[row * k + col];
                if ui == S::zero() {
                    continue;
                }
                let wrow = &wd.values[col * f..(col + 1) * f];
                let grow = &mut g[row * f..(row + 1) * f];
                for (gi, &wv) in grow.iter_mut().zip(wrow.iter()) {
                    *gi += ui * wv;
                }
            }
        }
    }

    if weight.requires_grad() {
        let ind = input.data();
        let mut d = weight.data_mut();
        ensure_grad(&mut d);
        let g = d.grad.as_mut().unwrap();
        for col in 0..k {
            for row in 0..n {
                let ui = u[row * k + col];
                if ui == S::zero() {
                    continue;
                }
                let xrow = &ind.values[row * f..(row + 1) * f];
                let grow = &mut g[col * f..(col + 1) * f];
                for (gi, &xv) in grow.iter_mut().zip(xrow.iter()) {
                    *gi += ui * xv;
                }
            }
        }
    }
}
