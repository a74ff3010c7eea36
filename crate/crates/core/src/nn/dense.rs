//! Fully connected layer for the alignment regressor head.

use crate::graph::{Graph, Tensor, Var};

/// y = x · wᵀ + b for `x: [B, F]`, `w: [O, F]`, `b: [O]`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let xv = g.value(x).clone();
    let wv = g.value(w).clone();
    let bv = g.value(b).clone();
    assert_eq!(xv.shape().len(), 2, "dense expects [B, F] input");
    let (bs, f) = (xv.shape()[0], xv.shape()[1]);
    let (o, wf) = (wv.shape()[0], wv.shape()[1]);
    assert_eq!(f, wf, "dense: feature mismatch");
    assert_eq!(bv.len(), o, "dense: bias mismatch");

    let mut data = vec![0.0f32; bs * o];
    for bi in 0..bs {
        for oi in 0..o {
            let mut acc = bv.data()[oi] as f64;
            for fi in 0..f {
                acc += xv.data()[bi * f + fi] as f64 * wv.data()[oi * f + fi] as f64;
            }
            data[bi * o + oi] = acc as f32;
        }
    }
    let out = Tensor::new(vec![bs, o], data);
    let xd = xv.data_arc();
    let wd = wv.data_arc();
    g.push_op(
        out,
        Box::new(move |go, grads| {
            {
                let gw = grads.accum(w);
                for bi in 0..bs {
                    for oi in 0..o {
                        let gv = go[bi * o + oi];
                        for fi in 0..f {
                            gw[oi * f + fi] += gv * xd[bi * f + fi];
                        }
                    }
                }
            }
            {
                let gb = grads.accum(b);
                for bi in 0..bs {
                    for oi in 0..o {
                        gb[oi] += go[bi * o + oi];
                    }
                }
            }
            let gx = grads.accum(x);
            for bi in 0..bs {
                for oi in 0..o {
                    let gv = go[bi * o + oi];
                    for fi in 0..f {
                        gx[bi * f + fi] += gv * wd[oi * f + fi];
                    }
                }
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sum_all;

    #[test]
    fn dense_computes_affine_map_and_gradients() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::new(vec![2], vec![0.5, -0.5]));
        let y = dense(&mut g, x, w, b);
        assert_eq!(g.value(y).data(), &[1.5, 1.5]);
        let loss = sum_all(&mut g, y);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
    }
}
