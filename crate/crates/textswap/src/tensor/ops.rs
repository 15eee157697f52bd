//! Forward constructors and backward rules for all tensor operations.

use super::conv;
use super::{BinaryKind, GradStore, Op, Scalar, Tensor, UnaryKind};
use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Zip};

fn unary_forward<E: Scalar>(x: &ArrayD<E>, kind: UnaryKind<E>) -> ArrayD<E> {
    let half = E::from_f64(0.5);
    match kind {
        UnaryKind::Neg => x.mapv(|v| -v),
        UnaryKind::Relu => x.mapv(|v| if v > E::zero() { v } else { E::zero() }),
        UnaryKind::LeakyRelu(a) => x.mapv(|v| if v > E::zero() { v } else { a * v }),
        UnaryKind::Tanh => x.mapv(|v| v.tanh()),
        UnaryKind::Sigmoid => x.mapv(|v| E::one() / (E::one() + (-v).exp())),
        UnaryKind::Exp => x.mapv(|v| v.exp()),
        UnaryKind::Log => x.mapv(|v| v.ln()),
        UnaryKind::Abs => x.mapv(|v| v.abs()),
        UnaryKind::Sqrt => x.mapv(|v| v.sqrt()),
        UnaryKind::Recip => x.mapv(|v| E::one() / v),
        UnaryKind::Scale(c) => x.mapv(|v| c * v),
        UnaryKind::AddScalar(c) => x.mapv(|v| c + v),
        UnaryKind::SmoothL1(beta) => x.mapv(|v| {
            if v.abs() < beta {
                half * v * v / beta
            } else {
                v.abs() - half * beta
            }
        }),
    }
}

/// d(op)/dx as a function of input x and output y.
fn unary_backward<E: Scalar>(
    x: &ArrayD<E>,
    y: &ArrayD<E>,
    grad: &ArrayD<E>,
    kind: UnaryKind<E>,
) -> ArrayD<E> {
    let one = E::one();
    let zero = E::zero();
    match kind {
        UnaryKind::Neg => grad.mapv(|g| -g),
        UnaryKind::Relu => Zip::from(grad)
            .and(x)
            .map_collect(|&g, &v| if v > zero { g } else { zero }),
        UnaryKind::LeakyRelu(a) => Zip::from(grad)
            .and(x)
            .map_collect(|&g, &v| if v > zero { g } else { a * g }),
        UnaryKind::Tanh => Zip::from(grad)
            .and(y)
            .map_collect(|&g, &t| g * (one - t * t)),
        UnaryKind::Sigmoid => Zip::from(grad)
            .and(y)
            .map_collect(|&g, &s| g * s * (one - s)),
        UnaryKind::Exp => Zip::from(grad).and(y).map_collect(|&g, &e| g * e),
        UnaryKind::Log => Zip::from(grad).and(x).map_collect(|&g, &v| g / v),
        UnaryKind::Abs => Zip::from(grad).and(x).map_collect(|&g, &v| {
            if v > zero {
                g
            } else if v < zero {
                -g
            } else {
                zero
            }
        }),
        UnaryKind::Sqrt => Zip::from(grad)
            .and(y)
            .map_collect(|&g, &s| g / (E::from_f64(2.0) * s)),
        UnaryKind::Recip => Zip::from(grad).and(y).map_collect(|&g, &r| -g * r * r),
        UnaryKind::Scale(c) => grad.mapv(|g| c * g),
        UnaryKind::AddScalar(_) => grad.clone(),
        UnaryKind::SmoothL1(beta) => Zip::from(grad).and(x).map_collect(|&g, &v| {
            let d = if v.abs() < beta {
                v / beta
            } else if v > zero {
                one
            } else {
                -one
            };
            g * d
        }),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "broadcast requires equal rank, got {a:?} vs {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            assert!(
                da == db || da == 1 || db == 1,
                "incompatible broadcast dims {a:?} vs {b:?}"
            );
            da.max(db)
        })
        .collect()
}

fn binary_forward<E: Scalar>(a: &ArrayD<E>, b: &ArrayD<E>, kind: BinaryKind) -> ArrayD<E> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast a");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast b");
    match kind {
        BinaryKind::Add => Zip::from(&av).and(&bv).map_collect(|&x, &y| x + y),
        BinaryKind::Sub => Zip::from(&av).and(&bv).map_collect(|&x, &y| x - y),
        BinaryKind::Mul => Zip::from(&av).and(&bv).map_collect(|&x, &y| x * y),
    }
}

/// Sums `grad` down to `shape` over the axes that were broadcast.
fn reduce_to_shape<E: Scalar>(grad: ArrayD<E>, shape: &[usize]) -> ArrayD<E> {
    let mut g = grad;
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn broadcast_mul<E: Scalar>(grad: &ArrayD<E>, other: &ArrayD<E>, shape: &[usize]) -> ArrayD<E> {
    let ov = other.broadcast(IxDyn(shape)).expect("broadcast");
    Zip::from(grad).and(&ov).map_collect(|&g, &o| g * o)
}

fn as2<E: Scalar>(a: &ArrayD<E>) -> ndarray::ArrayView2<'_, E> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn as3<E: Scalar>(a: &ArrayD<E>) -> ndarray::ArrayView3<'_, E> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn softmax_last<E: Scalar>(x: &ArrayD<E>) -> ArrayD<E> {
    let mut out = x.clone();
    let last = Axis(out.ndim() - 1);
    for mut lane in out.lanes_mut(last) {
        let mut max = E::neg_infinity();
        for &v in lane.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = E::zero();
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

impl<E: Scalar> Tensor<E> {
    fn unary(&self, kind: UnaryKind<E>) -> Tensor<E> {
        let y = unary_forward(&self.value(), kind);
        Tensor::from_op(y, Op::Unary { x: self.clone(), kind })
    }

    pub fn neg(&self) -> Tensor<E> {
        self.unary(UnaryKind::Neg)
    }
    pub fn relu(&self) -> Tensor<E> {
        self.unary(UnaryKind::Relu)
    }
    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }
    pub fn tanh(&self) -> Tensor<E> {
        self.unary(UnaryKind::Tanh)
    }
    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn exp(&self) -> Tensor<E> {
        self.unary(UnaryKind::Exp)
    }
    pub fn log(&self) -> Tensor<E> {
        self.unary(UnaryKind::Log)
    }
    pub fn abs(&self) -> Tensor<E> {
        self.unary(UnaryKind::Abs)
    }
    pub fn sqrt(&self) -> Tensor<E> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn recip(&self) -> Tensor<E> {
        self.unary(UnaryKind::Recip)
    }
    pub fn scale(&self, c: E) -> Tensor<E> {
        self.unary(UnaryKind::Scale(c))
    }
    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        self.unary(UnaryKind::AddScalar(c))
    }
    /// Elementwise smooth-L1 (Huber) with threshold `beta`.
    pub fn smooth_l1(&self, beta: E) -> Tensor<E> {
        assert!(beta > E::zero(), "smooth_l1 beta must be positive");
        self.unary(UnaryKind::SmoothL1(beta))
    }

    fn binary(&self, rhs: &Tensor<E>, kind: BinaryKind) -> Tensor<E> {
        let y = binary_forward(&self.value(), &rhs.value(), kind);
        Tensor::from_op(
            y,
            Op::Binary { a: self.clone(), b: rhs.clone(), kind },
        )
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Tensor<E> {
        self.binary(rhs, BinaryKind::Add)
    }
    pub fn sub(&self, rhs: &Tensor<E>) -> Tensor<E> {
        self.binary(rhs, BinaryKind::Sub)
    }
    pub fn mul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        self.binary(rhs, BinaryKind::Mul)
    }

    /// Elementwise binary cross-entropy on logits:
    /// `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&self, target: &Tensor<E>) -> Tensor<E> {
        let x = self.value();
        let t = target.value();
        assert_eq!(x.shape(), t.shape(), "bce_with_logits shape mismatch");
        let y = Zip::from(&*x).and(&*t).map_collect(|&x, &t| {
            let pos = if x > E::zero() { x } else { E::zero() };
            pos - x * t + (E::one() + (-x.abs()).exp()).ln()
        });
        drop(x);
        drop(t);
        Tensor::from_op(
            y,
            Op::BceWithLogits { x: self.clone(), target: target.clone() },
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let y = as2(&self.value()).dot(&as2(&rhs.value())).into_dyn();
        Tensor::from_op(y, Op::Matmul { a: self.clone(), b: rhs.clone() })
    }

    /// Batched matrix product on rank-3 tensors `(B,M,K) x (B,K,N)`.
    pub fn bmm(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let a = self.value();
        let b = rhs.value();
        let av = as3(&a);
        let bv = as3(&b);
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner dim mismatch");
        let (bs, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut y = ndarray::Array3::<E>::zeros((bs, m, n));
        for i in 0..bs {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            y.index_axis_mut(Axis(0), i).assign(&prod);
        }
        drop(a);
        drop(b);
        Tensor::from_op(y.into_dyn(), Op::BatchMatmul { a: self.clone(), b: rhs.clone() })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<E> {
        let y = softmax_last(&self.value());
        Tensor::from_op(y, Op::SoftmaxLast { x: self.clone() })
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let s = self.value().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::SumAll { x: self.clone() },
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let v = self.value();
        let n = E::from_f64(v.len() as f64);
        let s = v.sum() / n;
        drop(v);
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::MeanAll { x: self.clone() },
        )
    }

    /// Mean over `axes`, keeping reduced axes as size 1.
    pub fn mean_axes(&self, axes: &[usize]) -> Tensor<E> {
        self.reduce_axes(axes, true)
    }

    /// Sum over `axes`, keeping reduced axes as size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor<E> {
        self.reduce_axes(axes, false)
    }

    fn reduce_axes(&self, axes: &[usize], mean: bool) -> Tensor<E> {
        let v = self.value();
        let mut y = v.clone();
        let mut count = 1usize;
        for &ax in axes {
            count *= v.shape()[ax];
            y = y.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        if mean {
            let c = E::from_f64(count as f64);
            y.mapv_inplace(|x| x / c);
        }
        drop(v);
        Tensor::from_op(
            y,
            Op::ReduceAxes { x: self.clone(), axes: axes.to_vec(), mean },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<E> {
        let v = self.value();
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let y = v
            .to_shape(IxDyn(shape))
            .expect("reshape of standard-layout tensor")
            .to_owned();
        drop(v);
        Tensor::from_op(y, Op::Reshape { x: self.clone() })
    }

    /// Axis permutation; produces a standard-layout copy.
    pub fn permute(&self, perm: &[usize]) -> Tensor<E> {
        let y = permute_copy(&self.value(), perm);
        Tensor::from_op(y, Op::Permute { x: self.clone(), perm: perm.to_vec() })
    }

    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<ArrayViewD<'_, E>> = values.iter().map(|v| v.view()).collect();
        let y = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        drop(values);
        Tensor::from_op(y, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// 2-D convolution on `(B, C_in, H, W)` with weight `(C_out, C_in, kh, kw)`.
    pub fn conv2d(
        &self,
        w: &Tensor<E>,
        b: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Tensor<E> {
        let y = conv::conv2d_forward(
            &self.value(),
            &w.value(),
            b.map(|b| b.to_array()),
            stride,
            pad,
            dilation,
        );
        Tensor::from_op(
            y,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
                stride,
                pad,
                dilation,
            },
        )
    }

    /// Transposed 2-D convolution on `(B, C_in, H, W)` with weight
    /// `(C_in, C_out, kh, kw)`.
    pub fn conv_transpose2d(
        &self,
        w: &Tensor<E>,
        b: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Tensor<E> {
        let y = conv::conv_transpose2d_forward(
            &self.value(),
            &w.value(),
            b.map(|b| b.to_array()),
            stride,
            pad,
            out_pad,
        );
        Tensor::from_op(
            y,
            Op::ConvTranspose2d {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
                stride,
                pad,
                out_pad,
            },
        )
    }
}

fn permute_copy<E: Scalar>(v: &ArrayD<E>, perm: &[usize]) -> ArrayD<E> {
    v.view()
        .permuted_axes(IxDyn(perm))
        .as_standard_layout()
        .to_owned()
}

pub(super) fn backprop_node<E: Scalar>(node: &Tensor<E>, grad: &ArrayD<E>, store: &mut GradStore<E>) {
    let mut send = |t: &Tensor<E>, delta: ArrayD<E>| {
        if t.requires_grad() {
            store.accum(t.id(), delta);
        }
    };
    match node.op() {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            let dx = unary_backward(&x.value(), &node.value(), grad, *kind);
            send(x, dx);
        }
        Op::Binary { a, b, kind } => {
            let ashape = a.shape();
            let bshape = b.shape();
            match kind {
                BinaryKind::Add => {
                    send(a, reduce_to_shape(grad.clone(), &ashape));
                    send(b, reduce_to_shape(grad.clone(), &bshape));
                }
                BinaryKind::Sub => {
                    send(a, reduce_to_shape(grad.clone(), &ashape));
                    send(b, reduce_to_shape(grad.mapv(|g| -g), &bshape));
                }
                BinaryKind::Mul => {
                    if a.requires_grad() {
                        let da = broadcast_mul(grad, &b.value(), grad.shape());
                        send(a, reduce_to_shape(da, &ashape));
                    }
                    if b.requires_grad() {
                        let db = broadcast_mul(grad, &a.value(), grad.shape());
                        send(b, reduce_to_shape(db, &bshape));
                    }
                }
            }
        }
        Op::BceWithLogits { x, target } => {
            if x.requires_grad() {
                let xv = x.value();
                let tv = target.value();
                let dx = Zip::from(grad)
                    .and(&*xv)
                    .and(&*tv)
                    .map_collect(|&g, &x, &t| g * (E::one() / (E::one() + (-x).exp()) - t));
                drop(xv);
                drop(tv);
                send(x, dx);
            }
            if target.requires_grad() {
                let dt = Zip::from(grad)
                    .and(&*x.value())
                    .map_collect(|&g, &x| -g * x);
                send(target, dt);
            }
        }
        Op::Matmul { a, b } => {
            let g = as2(grad);
            if a.requires_grad() {
                let da = g.dot(&as2(&b.value()).t()).into_dyn();
                send(a, da);
            }
            if b.requires_grad() {
                let db = as2(&a.value()).t().dot(&g).into_dyn();
                send(b, db);
            }
        }
        Op::BatchMatmul { a, b } => {
            let av = a.to_array();
            let bv = b.to_array();
            let g3 = as3(grad);
            let bs = g3.shape()[0];
            if a.requires_grad() {
                let mut da = ArrayD::zeros(av.shape());
                for i in 0..bs {
                    let d = g3
                        .index_axis(Axis(0), i)
                        .dot(&as3(&bv).index_axis(Axis(0), i).t());
                    da.index_axis_mut(Axis(0), i).assign(&d.into_dyn());
                }
                send(a, da);
            }
            if b.requires_grad() {
                let mut db = ArrayD::zeros(bv.shape());
                for i in 0..bs {
                    let d = as3(&av)
                        .index_axis(Axis(0), i)
                        .t()
                        .dot(&g3.index_axis(Axis(0), i));
                    db.index_axis_mut(Axis(0), i).assign(&d.into_dyn());
                }
                send(b, db);
            }
        }
        Op::SoftmaxLast { x } => {
            let y = node.value();
            let last = Axis(y.ndim() - 1);
            let gy = Zip::from(grad).and(&*y).map_collect(|&g, &s| g * s);
            let dot = gy.sum_axis(last).insert_axis(last);
            let dx = Zip::from(grad)
                .and(&*y)
                .and(&dot.broadcast(y.shape()).unwrap())
                .map_collect(|&g, &s, &d| (g - d) * s);
            drop(y);
            send(x, dx);
        }
        Op::SumAll { x } => {
            let g = grad[[0]];
            send(x, ArrayD::from_elem(IxDyn(&x.shape()), g));
        }
        Op::MeanAll { x } => {
            let n = E::from_f64(x.len() as f64);
            let g = grad[[0]] / n;
            send(x, ArrayD::from_elem(IxDyn(&x.shape()), g));
        }
        Op::ReduceAxes { x, axes, mean } => {
            let xshape = x.shape();
            let mut count = 1usize;
            for &ax in axes {
                count *= xshape[ax];
            }
            let scale = if *mean {
                E::one() / E::from_f64(count as f64)
            } else {
                E::one()
            };
            let gb = grad.broadcast(IxDyn(&xshape)).expect("reduce grad broadcast");
            let dx = gb.mapv(|g| g * scale);
            send(x, dx);
        }
        Op::Reshape { x } => {
            let dx = grad
                .to_shape(IxDyn(&x.shape()))
                .expect("reshape grad")
                .to_owned();
            send(x, dx);
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            send(x, permute_copy(grad, &inv));
        }
        Op::Concat { parts, axis } => {
            let mut offset = 0usize;
            for p in parts {
                let dim = p.shape()[*axis];
                let slice = grad
                    .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + dim))
                    .to_owned();
                send(p, slice);
                offset += dim;
            }
        }
        Op::Conv2d { x, w, b, stride, pad, dilation } => {
            let (dx, dw, db) = conv::conv2d_backward(
                &x.value(),
                &w.value(),
                grad,
                *stride,
                *pad,
                *dilation,
                x.requires_grad(),
                w.requires_grad(),
            );
            if let Some(dx) = dx {
                send(x, dx);
            }
            if let Some(dw) = dw {
                send(w, dw);
            }
            if let Some(b) = b {
                if b.requires_grad() {
                    send(b, db);
                }
            }
        }
        Op::ConvTranspose2d { x, w, b, stride, pad, out_pad } => {
            let (dx, dw, db) = conv::conv_transpose2d_backward(
                &x.value(),
                &w.value(),
                grad,
                *stride,
                *pad,
                *out_pad,
                x.requires_grad(),
                w.requires_grad(),
            );
            if let Some(dx) = dx {
                send(x, dx);
            }
            if let Some(dw) = dw {
                send(w, dw);
            }
            if let Some(b) = b {
                if b.requires_grad() {
                    send(b, db);
                }
            }
        }
    }
}
