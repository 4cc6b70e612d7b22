//! Raw compute kernels behind the tape ops. Convolution goes through im2col
//! plus GEMM; batch items are processed in parallel with each output element
//! written by exactly one task in a fixed order, so results are bit-stable
//! for any worker count.

use rayon::prelude::*;

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    pub fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (h, w, k) = (d.in_h, d.in_w, d.k);
    let ohw = d.out_hw();
    debug_assert_eq!(col.len(), d.col_rows() * ohw);
    for c in 0..d.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                let mut p = 0;
                for oi in 0..d.out_h {
                    let src_i = (oi * d.stride + ki) as isize - d.pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        for _ in 0..d.out_w {
                            dst[p] = T::ZERO;
                            p += 1;
                        }
                        continue;
                    }
                    let base = src_i as usize * w;
                    for oj in 0..d.out_w {
                        let src_j = (oj * d.stride + kj) as isize - d.pad as isize;
                        dst[p] = if src_j < 0 || src_j >= w as isize {
                            T::ZERO
                        } else {
                            plane[base + src_j as usize]
                        };
                        p += 1;
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], d: &ConvDims, x_grad: &mut [T]) {
    let (h, w, k) = (d.in_h, d.in_w, d.k);
    let ohw = d.out_hw();
    for c in 0..d.in_ch {
        let plane = &mut x_grad[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                let mut p = 0;
                for oi in 0..d.out_h {
                    let src_i = (oi * d.stride + ki) as isize - d.pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        p += d.out_w;
                        continue;
                    }
                    let base = src_i as usize * w;
                    for oj in 0..d.out_w {
                        let src_j = (oj * d.stride + kj) as isize - d.pad as isize;
                        if src_j >= 0 && (src_j as usize) < w {
                            plane[base + src_j as usize] += src[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward: x [B,C,H,W], w [F,C,k,k], optional bias [F].
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let ohw = d.out_hw();
    let ckk = d.col_rows();
    let in_plane = d.in_ch * d.in_h * d.in_w;
    let out_plane = d.out_ch * ohw;
    let mut out = vec![T::ZERO; d.batch * out_plane];
    out.par_chunks_mut(out_plane)
        .zip(x.par_chunks(in_plane))
        .for_each(|(out_n, x_n)| {
            let mut col = vec![T::ZERO; ckk * ohw];
            im2col(x_n, d, &mut col);
            unsafe {
                T::gemm(
                    d.out_ch,
                    ckk,
                    ohw,
                    T::ONE,
                    w.as_ptr(),
                    ckk as isize,
                    1,
                    col.as_ptr(),
                    ohw as isize,
                    1,
                    T::ZERO,
                    out_n.as_mut_ptr(),
                    ohw as isize,
                    1,
                );
            }
            if let Some(b) = bias {
                for f in 0..d.out_ch {
                    let bf = b[f];
                    for v in &mut out_n[f * ohw..(f + 1) * ohw] {
                        *v += bf;
                    }
                }
            }
        });
    out
}

/// Backward pass returning (dx, dw, db). db is produced only when the
/// forward had a bias.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    with_bias: bool,
    d: &ConvDims,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let ohw = d.out_hw();
    let ckk = d.col_rows();
    let in_plane = d.in_ch * d.in_h * d.in_w;
    let out_plane = d.out_ch * ohw;

    let mut dx = vec![T::ZERO; d.batch * in_plane];
    // Per-image weight gradients, reduced afterwards in batch order.
    let partials: Vec<Vec<T>> = dx
        .par_chunks_mut(in_plane)
        .zip(x.par_chunks(in_plane))
        .zip(dy.par_chunks(out_plane))
        .map(|((dx_n, x_n), dy_n)| {
            let mut col = vec![T::ZERO; ckk * ohw];
            im2col(x_n, d, &mut col);
            let mut dw_n = vec![T::ZERO; d.out_ch * ckk];
            unsafe {
                // dW = dY * col^T.
                T::gemm(
                    d.out_ch,
                    ohw,
                    ckk,
                    T::ONE,
                    dy_n.as_ptr(),
                    ohw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    ohw as isize,
                    T::ZERO,
                    dw_n.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
                // dcol = W^T * dY, reusing the col buffer.
                T::gemm(
                    ckk,
                    d.out_ch,
                    ohw,
                    T::ONE,
                    w.as_ptr(),
                    1,
                    ckk as isize,
                    dy_n.as_ptr(),
                    ohw as isize,
                    1,
                    T::ZERO,
                    col.as_mut_ptr(),
                    ohw as isize,
                    1,
                );
            }
            col2im_add(&col, d, dx_n);
            dw_n
        })
        .collect();

    let mut dw = vec![T::ZERO; d.out_ch * ckk];
    for p in &partials {
        for (acc, v) in dw.iter_mut().zip(p) {
            *acc += *v;
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![T::ZERO; d.out_ch];
        for n in 0..d.batch {
            for f in 0..d.out_ch {
                let base = n * out_plane + f * ohw;
                for p in 0..ohw {
                    db[f] += dy[base + p];
                }
            }
        }
        db
    });
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2; returns pooled values and flat argmax
/// offsets into the input plane for the backward scatter.
pub fn maxpool2x2_forward<T: Scalar>(
    x: &[T],
    batch_ch: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![T::ZERO; batch_ch * oh * ow];
    let mut idx = vec![0u32; batch_ch * oh * ow];
    for p in 0..batch_ch {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let out_plane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        let idx_plane = &mut idx[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut best_off = (2 * i) * w + 2 * j;
                let mut best = plane[best_off];
                for (di, dj) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let off = (2 * i + di) * w + 2 * j + dj;
                    if plane[off] > best {
                        best = plane[off];
                        best_off = off;
                    }
                }
                out_plane[i * ow + j] = best;
                idx_plane[i * ow + j] = best_off as u32;
            }
        }
    }
    (out, idx)
}

/// Nearest-neighbor resize of [B*C] planes from (h, w) to (oh, ow) with
/// source index floor(i * h / oh).
pub fn resize_nearest_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let si = i * h / oh;
            for j in 0..ow {
                let sj = j * w / ow;
                dst[i * ow + j] = src[si * w + sj];
            }
        }
    }
    out
}

pub fn resize_nearest_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let si = i * h / oh;
            for j in 0..ow {
                let sj = j * w / ow;
                dst[si * w + sj] += src[i * ow + j];
            }
        }
    }
    dx
}

/// C = A * B for row-major 2D blocks.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            T::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C = A^T * B where A is [k, m] row-major.
pub fn matmul_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C = A * B^T where B is [n, k] row-major.
pub fn matmul_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            T::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_wrappers_agree_with_naive_loops() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for l in 0..3 {
                    acc += a[i * 3 + l] * b[l * 4 + j];
                }
                assert!((c[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
        // A^T * B with A stored [3, 2].
        let at: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let c = matmul_at_b(&at, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for l in 0..3 {
                    acc += at[l * 2 + i] * b[l * 4 + j];
                }
                assert!((c[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
        // A * B^T with B stored [4, 3].
        let bt: Vec<f64> = (0..12).map(|v| (v as f64).cos()).collect();
        let c = matmul_a_bt(&a, &bt, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for l in 0..3 {
                    acc += a[i * 3 + l] * bt[j * 3 + l];
                }
                assert!((c[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_quadruple_loop() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = ConvDims {
            batch: 1,
            in_ch: 2,
            in_h: 5,
            in_w: 5,
            out_ch: 3,
            k: 3,
            stride: 1,
            pad: 1,
            out_h: 5,
            out_w: 5,
        };
        let x: Vec<f64> = (0..d.in_ch * 25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d.out_ch * d.in_ch * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = conv2d_forward(&x, &w, Some(&b), &d);

        // Independent direct cross-correlation.
        for f in 0..3 {
            for oi in 0..5usize {
                for oj in 0..5usize {
                    let mut acc = b[f];
                    for c in 0..2 {
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let ii = oi as isize + ki as isize - 1;
                                let jj = oj as isize + kj as isize - 1;
                                if ii >= 0 && ii < 5 && jj >= 0 && jj < 5 {
                                    acc += x[c * 25 + ii as usize * 5 + jj as usize]
                                        * w[((f * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    let got = out[f * 25 + oi * 5 + oj];
                    assert!((got - acc).abs() < 1e-5, "mismatch at {f},{oi},{oj}");
                }
            }
        }
    }
}
