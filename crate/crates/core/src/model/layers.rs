//! Dense and 1-D convolution kernels with their backward passes.
//!
//! Weights are row-major: dense `[out, in]`, conv `[out_ch, in_ch, kernel]`.
//! Backward functions accumulate into the gradient slices.

pub(crate) fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, bias)| {
        let row = &w[o * n_in..(o + 1) * n_in];
        bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

/// Accumulates `dW += dy x^T`, `db += dy`; returns `W^T dy` when asked.
pub(crate) fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        if g != 0.0 {
            let row = &mut dw[o * n_in..(o + 1) * n_in];
            row.iter_mut().zip(x).for_each(|(d, xi)| *d += g * xi);
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                let row = &w[o * n_in..(o + 1) * n_in];
                dx.iter_mut().zip(row).for_each(|(d, wi)| *d += g * wi);
            }
        }
        dx
    })
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes gradient entries whose pre-activation was not positive.
pub(crate) fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    grad.iter_mut().zip(pre).for_each(|(g, &z)| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
}

/// Same-padded stride-1 convolution. `x` is `[in_ch, len]`.
pub(crate) fn conv_forward(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    in_ch: usize,
    kernel: usize,
    len: usize,
) -> Vec<f64> {
    let out_ch = b.len();
    let pad = kernel / 2;
    let mut y = vec![0.0; out_ch * len];
    for o in 0..out_ch {
        let yo = &mut y[o * len..(o + 1) * len];
        yo.fill(b[o]);
        for i in 0..in_ch {
            let xi = &x[i * len..(i + 1) * len];
            let wk = &w[(o * in_ch + i) * kernel..(o * in_ch + i + 1) * kernel];
            for (k, &wv) in wk.iter().enumerate() {
                // y[t] += w[k] * x[t + k - pad]
                let shift = k as isize - pad as isize;
                let t0 = (-shift).max(0) as usize;
                let t1 = (len as isize - shift).min(len as isize).max(0) as usize;
                for t in t0..t1 {
                    yo[t] += wv * xi[(t as isize + shift) as usize];
                }
            }
        }
    }
    y
}

/// Backward of [`conv_forward`]; `dy` is `[out_ch, len]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    in_ch: usize,
    kernel: usize,
    len: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let out_ch = db.len();
    let pad = kernel / 2;
    let mut dx = if want_dx { vec![0.0; in_ch * len] } else { Vec::new() };
    for o in 0..out_ch {
        let dyo = &dy[o * len..(o + 1) * len];
        db[o] += dyo.iter().sum::<f64>();
        for i in 0..in_ch {
            let xi = &x[i * len..(i + 1) * len];
            let base = (o * in_ch + i) * kernel;
            for k in 0..kernel {
                let shift = k as isize - pad as isize;
                let t0 = (-shift).max(0) as usize;
                let t1 = (len as isize - shift).min(len as isize).max(0) as usize;
                let mut acc = 0.0;
                for t in t0..t1 {
                    acc += dyo[t] * xi[(t as isize + shift) as usize];
                }
                dw[base + k] += acc;
                if want_dx {
                    let wv = w[base + k];
                    let dxi = &mut dx[i * len..(i + 1) * len];
                    for t in t0..t1 {
                        dxi[(t as isize + shift) as usize] += wv * dyo[t];
                    }
                }
            }
        }
    }
    want_dx.then_some(dx)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
