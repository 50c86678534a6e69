use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// 2x2 / stride-2 max pooling. Returns the output and, per output element,
/// the flat input index that won (first maximum in row-major window order).
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return Err(Error::shape(format!("max_pool2 needs even extents, got {s:?}")));
    }
    let (oh, ow) = (s.h() / 2, s.w() / 2);
    let out_shape = Shape::of(s.n(), s.c(), oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    let xd = x.data();
    for plane in 0..s.n() * s.c() {
        let base = plane * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * s.w() + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * s.w() + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(out_shape, out), arg))
}

pub(crate) fn max_pool2_backward<T: Real>(input_len: usize, argmax: &[usize], dout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i] = dx[i] + g;
    }
    dx
}

/// Mean over each `(H, W)` plane, giving `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize(s.plane()).unwrap();
    let data = x
        .data()
        .chunks_exact(s.plane())
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_parts(Shape::of(s.n(), s.c(), 1, 1), data)
}

pub(crate) fn global_avg_pool_backward<T: Real>(input: Shape, dout: &[T]) -> Vec<T> {
    let inv = T::one() / T::from_usize(input.plane()).unwrap();
    let mut dx = Vec::with_capacity(input.numel());
    for &g in dout {
        dx.extend(std::iter::repeat_n(g * inv, input.plane()));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn window_max() {
        let x = Tensor::<f32>::new(Shape::of(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_route_to_top_left() {
        let x = Tensor::<f32>::full(Shape::of(1, 2, 4, 4), 5.0);
        let (y, arg) = max_pool2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
        let dx = max_pool2_backward(x.len(), &arg, &vec![1.0f32; y.len()]);
        for c in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    let want = if h % 2 == 0 && w % 2 == 0 { 1.0 } else { 0.0 };
                    assert_eq!(dx[(c * 4 + h) * 4 + w], want);
                }
            }
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let x = Tensor::<f64>::create([1, 2, 8, 8], Init::Uniform { lo: -1.0, hi: 1.0, seed: 11 }).unwrap();
        let (y, _) = max_pool2(&x).unwrap();
        for c in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let want = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(0, c, 2 * oy + dy, 2 * ox + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.at(0, c, oy, ox), want);
                }
            }
        }
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f32>::zeros(Shape::of(1, 1, 3, 4));
        assert!(matches!(max_pool2(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn gap_mean_and_gradient() {
        let x = Tensor::<f32>::new(Shape::of(1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[4.0]);
        let c = Tensor::<f32>::full(Shape::of(1, 3, 5, 5), 2.5);
        assert!(global_avg_pool(&c).data().iter().all(|&v| (v - 2.5).abs() < 1e-6));

        let r = Tensor::<f64>::create([1, 4, 6, 6], Init::Uniform { lo: -1.0, hi: 1.0, seed: 5 }).unwrap();
        let y = global_avg_pool(&r);
        for c in 0..4 {
            let mut acc = 0.0;
            for h in 0..6 {
                for w in 0..6 {
                    acc += r.at(0, c, h, w);
                }
            }
            assert!((y.data()[c] - acc / 36.0).abs() < 1e-14);
        }
        let dx = global_avg_pool_backward(r.shape(), &[1.0f64; 4]);
        assert!(dx.iter().all(|&g| (g - 1.0 / 36.0).abs() < 1e-15));
    }
}
