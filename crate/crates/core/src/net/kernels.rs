//! 3x3 same-padding convolution and batch-norm kernels.
//!
//! Weights are stored `[ky][kx][cin][cout]`, i.e. a `(9 cin) x cout` row-major
//! matrix matching the im2col column order.

use rayon::prelude::*;

use super::batch::Batch;
use super::real::{gemm, Strides};
use super::Real;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Upper bound on im2col buffer elements per tile.
const TILE_ELEMS: usize = 1 << 20;

fn tile_rows(w: usize, kc: usize) -> usize {
    (TILE_ELEMS / (w * kc).max(1)).max(1)
}

fn im2col<T: Real>(x: &[T], h: usize, w: usize, cin: usize, r0: usize, rows: usize, col: &mut [T]) {
    let kc = 9 * cin;
    for rr in 0..rows {
        let r = r0 + rr;
        for c in 0..w {
            let base = (rr * w + c) * kc;
            for ky in 0..3 {
                for kx in 0..3 {
                    let dst = &mut col[base + (ky * 3 + kx) * cin..][..cin];
                    let (sr, sc) = (r + ky, c + kx);
                    if sr >= 1 && sr <= h && sc >= 1 && sc <= w {
                        let src = ((sr - 1) * w + (sc - 1)) * cin;
                        dst.copy_from_slice(&x[src..src + cin]);
                    } else {
                        dst.fill(T::zero());
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], h: usize, w: usize, cin: usize, r0: usize, rows: usize, dx: &mut [T]) {
    let kc = 9 * cin;
    for rr in 0..rows {
        let r = r0 + rr;
        for c in 0..w {
            let base = (rr * w + c) * kc;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sr, sc) = (r + ky, c + kx);
                    if sr >= 1 && sr <= h && sc >= 1 && sc <= w {
                        let src = &col[base + (ky * 3 + kx) * cin..][..cin];
                        let dst = ((sr - 1) * w + (sc - 1)) * cin;
                        for (d, &s) in dx[dst..dst + cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_sample<T: Real>(x: &[T], h: usize, w: usize, cin: usize, weight: &[T], bias: &[T], out: &mut [T]) {
    let cout = bias.len();
    let kc = 9 * cin;
    let tr = tile_rows(w, kc);
    let mut col = vec![T::zero(); tr.min(h) * w * kc];
    let mut r0 = 0;
    while r0 < h {
        let rows = tr.min(h - r0);
        let p = rows * w;
        im2col(x, h, w, cin, r0, rows, &mut col[..p * kc]);
        let o = &mut out[r0 * w * cout..(r0 + rows) * w * cout];
        for px in o.chunks_exact_mut(cout) {
            px.copy_from_slice(bias);
        }
        gemm(p, kc, cout, &col, Strides(kc, 1), weight, Strides(cout, 1), o, Strides(cout, 1), true);
        r0 += rows;
    }
}

/// `y = conv3x3(x, weight) + bias`.
pub(crate) fn conv_forward<T: Real>(x: &Batch<T>, weight: &[T], bias: &[T]) -> Batch<T> {
    let (_, h, w, cin) = x.dims();
    let cout = bias.len();
    debug_assert_eq!(weight.len(), 9 * cin * cout);
    let mut out = x.zeros_with_channels(cout);
    let in_sz = h * w * cin;
    let out_sz = h * w * cout;
    out.data_mut()
        .par_chunks_mut(out_sz)
        .zip(x.data().par_chunks(in_sz))
        .for_each(|(o, xi)| forward_sample(xi, h, w, cin, weight, bias, o));
    out
}

#[allow(clippy::too_many_arguments)]
fn backward_sample<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
) -> (Vec<T>, Vec<T>) {
    let kc = 9 * cin;
    let mut dw = vec![T::zero(); kc * cout];
    let mut db = vec![T::zero(); cout];
    for px in dy.chunks_exact(cout) {
        for (b, &g) in db.iter_mut().zip(px) {
            *b += g;
        }
    }
    let tr = tile_rows(w, kc);
    let mut col = vec![T::zero(); tr.min(h) * w * kc];
    let mut dcol = if dx.is_some() { vec![T::zero(); col.len()] } else { Vec::new() };
    let mut dx = dx;
    let mut r0 = 0;
    while r0 < h {
        let rows = tr.min(h - r0);
        let p = rows * w;
        im2col(x, h, w, cin, r0, rows, &mut col[..p * kc]);
        let dyt = &dy[r0 * w * cout..(r0 + rows) * w * cout];
        gemm(kc, p, cout, &col, Strides(1, kc), dyt, Strides(cout, 1), &mut dw, Strides(cout, 1), true);
        if let Some(dx) = dx.as_deref_mut() {
            gemm(p, cout, kc, dyt, Strides(cout, 1), weight, Strides(1, cout), &mut dcol, Strides(kc, 1), false);
            col2im_add(&dcol[..p * kc], h, w, cin, r0, rows, dx);
        }
        r0 += rows;
    }
    (dw, db)
}

/// Gradients of `conv_forward` given `dy`. Weight and bias gradients are
/// summed over samples in index order, so the result does not depend on the
/// thread count.
pub(crate) struct ConvGrads<T> {
    pub dw: Vec<T>,
    pub db: Vec<T>,
    pub dx: Option<Batch<T>>,
}

pub(crate) fn conv_backward<T: Real>(x: &Batch<T>, weight: &[T], dy: &Batch<T>, need_dx: bool) -> ConvGrads<T> {
    let (_, h, w, cin) = x.dims();
    let cout = dy.dims().3;
    let in_sz = h * w * cin;
    let out_sz = h * w * cout;
    let mut dx = need_dx.then(|| x.zeros_with_channels(cin));
    let partials: Vec<(Vec<T>, Vec<T>)> = match dx.as_mut() {
        Some(dx) => dx
            .data_mut()
            .par_chunks_mut(in_sz)
            .zip(x.data().par_chunks(in_sz))
            .zip(dy.data().par_chunks(out_sz))
            .map(|((dxi, xi), dyi)| backward_sample(xi, h, w, cin, weight, cout, dyi, Some(dxi)))
            .collect(),
        None => x
            .data()
            .par_chunks(in_sz)
            .zip(dy.data().par_chunks(out_sz))
            .map(|(xi, dyi)| backward_sample(xi, h, w, cin, weight, cout, dyi, None))
            .collect(),
    };
    let mut dw = vec![T::zero(); 9 * cin * cout];
    let mut db = vec![T::zero(); cout];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    ConvGrads { dw, db, dx }
}

/// Normalized activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Per-channel batch mean and unbiased variance, in `f64`.
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Normalizes `y` in place with batch statistics, then applies `gamma, beta`.
pub(crate) fn bn_train_forward<T: Real>(y: &mut [T], gamma: &[T], beta: &[T]) -> (BnCache<T>, BnStats) {
    let c = gamma.len();
    let count = (y.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for px in y.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut ss = vec![0.0f64; c];
    for px in y.chunks_exact(c) {
        for ((s, &v), &m) in ss.iter_mut().zip(px).zip(&mean) {
            *s += (v.as_f64() - m).powi(2);
        }
    }
    let inv_std: Vec<T> = ss.iter().map(|&s| T::of(1.0 / (s / count + BN_EPS).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let mut xhat = vec![T::zero(); y.len()];
    for (px, xh) in y.chunks_exact_mut(c).zip(xhat.chunks_exact_mut(c)) {
        for ch in 0..c {
            let z = (px[ch] - mean_t[ch]) * inv_std[ch];
            xh[ch] = z;
            px[ch] = gamma[ch] * z + beta[ch];
        }
    }
    let denom = (count - 1.0).max(1.0);
    let stats = BnStats { mean, var_unbiased: ss.iter().map(|&s| s / denom).collect() };
    (BnCache { xhat, inv_std, batch_stats: true }, stats)
}

/// Normalizes `y` in place with fixed running statistics.
pub(crate) fn bn_eval_forward<T: Real>(y: &mut [T], gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> BnCache<T> {
    let c = gamma.len();
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v.as_f64() + BN_EPS).sqrt())).collect();
    let mut xhat = vec![T::zero(); y.len()];
    for (px, xh) in y.chunks_exact_mut(c).zip(xhat.chunks_exact_mut(c)) {
        for ch in 0..c {
            let z = (px[ch] - mean[ch]) * inv_std[ch];
            xh[ch] = z;
            px[ch] = gamma[ch] * z + beta[ch];
        }
    }
    BnCache { xhat, inv_std, batch_stats: false }
}

/// Converts `g = dL/d(out)` into `dL/d(in)` in place and accumulates the
/// `gamma, beta` gradients.
pub(crate) fn bn_backward<T: Real>(g: &mut [T], cache: &BnCache<T>, gamma: &[T], dgamma: &mut [T], dbeta: &mut [T]) {
    let c = gamma.len();
    let mut sg = vec![0.0f64; c];
    let mut sgx = vec![0.0f64; c];
    for (px, xh) in g.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            sg[ch] += px[ch].as_f64();
            sgx[ch] += (px[ch] * xh[ch]).as_f64();
        }
    }
    for ch in 0..c {
        dbeta[ch] += T::of(sg[ch]);
        dgamma[ch] += T::of(sgx[ch]);
    }
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch]).collect();
    if cache.batch_stats {
        let count = (g.len() / c) as f64;
        let mg: Vec<T> = sg.iter().map(|&s| T::of(s / count)).collect();
        let mgx: Vec<T> = sgx.iter().map(|&s| T::of(s / count)).collect();
        for (px, xh) in g.chunks_exact_mut(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                px[ch] = scale[ch] * (px[ch] - mg[ch] - xh[ch] * mgx[ch]);
            }
        }
    } else {
        for px in g.chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] *= scale[ch];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution with zero padding.
    fn naive_conv(x: &[f64], h: usize, w: usize, cin: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let cout = bias.len();
        let mut out = vec![0.0; h * w * cout];
        for r in 0..h as isize {
            for c in 0..w as isize {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (sr, sc) = (r + ky - 1, c + kx - 1);
                            if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                continue;
                            }
                            for i in 0..cin {
                                let xv = x[((sr as usize) * w + sc as usize) * cin + i];
                                acc += xv * weight[(((ky * 3 + kx) as usize) * cin + i) * cout + o];
                            }
                        }
                    }
                    out[((r as usize) * w + c as usize) * cout + o] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let (n, h, w, cin, cout) = (2, 5, 7, 3, 4);
        let x = Batch::from_vec(n, h, w, cin, pseudo(n * h * w * cin, 0.731)).unwrap();
        let weight = pseudo(9 * cin * cout, 1.37);
        let bias = pseudo(cout, 2.1);
        let y = conv_forward(&x, &weight, &bias);
        for s in 0..n {
            let want = naive_conv(x.sample(s), h, w, cin, &weight, &bias);
            for (a, b) in y.sample(s).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x) - b, dy> == <x, dx> and == <W, dW> (bilinearity)
        let (n, h, w, cin, cout) = (2, 4, 6, 2, 3);
        let x = Batch::from_vec(n, h, w, cin, pseudo(n * h * w * cin, 0.3)).unwrap();
        let weight = pseudo(9 * cin * cout, 0.9);
        let zero_bias = vec![0.0; cout];
        let dy = Batch::from_vec(n, h, w, cout, pseudo(n * h * w * cout, 1.7)).unwrap();
        let y = conv_forward(&x, &weight, &zero_bias);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let g = conv_backward(&x, &weight, &dy, true);
        let via_dx: f64 = x.data().iter().zip(g.dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_dw: f64 = weight.iter().zip(&g.dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_dx).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - via_dw).abs() < 1e-10 * lhs.abs().max(1.0));
        let dy_sum: Vec<f64> = (0..cout).map(|o| dy.data().iter().skip(o).step_by(cout).sum()).collect();
        for (a, b) in g.db.iter().zip(&dy_sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_train_output_is_standardized() {
        let c = 3;
        let mut y: Vec<f64> = pseudo(40 * c, 0.77).iter().enumerate().map(|(i, v)| v * (1.0 + (i % c) as f64) + i as f64 * 0.01).collect();
        let (cache, stats) = bn_train_forward(&mut y, &[1.0; 3], &[0.0; 3]);
        for ch in 0..c {
            let vals: Vec<f64> = y.iter().skip(ch).step_by(c).copied().collect();
            let m = vals.iter().sum::<f64>() / 40.0;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
            assert!(stats.var_unbiased[ch] > 0.0);
        }
        assert!(cache.batch_stats);
    }
}
