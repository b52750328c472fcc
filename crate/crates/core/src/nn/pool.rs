use crate::tensor::Tensor;

/// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
pub fn max_pool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(n, c, oh, ow);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..oh {
                for xx in 0..ow {
                    let a = src[2 * y * w + 2 * xx];
                    let b = src[2 * y * w + 2 * xx + 1];
                    let cc = src[(2 * y + 1) * w + 2 * xx];
                    let d = src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * ow + xx] = a.max(b).max(cc).max(d);
                }
            }
        }
    }
    out
}

/// Routes each output gradient to the first maximal element of its window.
pub fn max_pool2_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut grad_in = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let g = grad_out.plane(i, ch);
            let dst = grad_in.plane_mut(i, ch);
            for y in 0..oh {
                for xx in 0..ow {
                    let cands = [
                        2 * y * w + 2 * xx,
                        2 * y * w + 2 * xx + 1,
                        (2 * y + 1) * w + 2 * xx,
                        (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let mut best = cands[0];
                    for &idx in &cands[1..] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    dst[best] += g[y * ow + xx];
                }
            }
        }
    }
    grad_in
}
