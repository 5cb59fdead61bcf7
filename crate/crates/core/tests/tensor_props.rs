use proptest::prelude::*;
use sfcnext::tensor::{
    conv3d_reference, conv3d_reference_backward, Conv3dGeometry, OptimizerKind, OptimizerState,
    Tape, Tensor,
};

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, n)
}

/// A few chained ops with a scalar loss; returns the gradients of both inputs.
fn composed_grads(x: &[f32], w: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut t = Tape::<f32>::new();
    let xv = t.leaf(Tensor::new(vec![1, 2, 4, 4, 4], x.to_vec()).unwrap().with_requires_grad(true));
    let wv = t.leaf(Tensor::new(vec![3, 2, 3, 3, 3], w.to_vec()).unwrap().with_requires_grad(true));
    let c = t.conv3d(xv, wv, None, 1, 1, 1).unwrap();
    let g = t.gelu(c).unwrap();
    let p = t.permute(g, &[0, 2, 3, 4, 1]).unwrap();
    let s = t.softmax(p, 4).unwrap();
    let m = t.mul(s, p).unwrap();
    let loss = t.sum(m).unwrap();
    t.backward(loss).unwrap();
    (t.grad(xv).unwrap().to_vec(), t.grad(wv).unwrap().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_bit_reproducible(x in values(128), w in values(162)) {
        let a = composed_grads(&x, &w);
        let b = composed_grads(&x, &w);
        prop_assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn grouped_conv_equals_independent_channels(x in values(3 * 5 * 4 * 6), w in values(3 * 27), b in values(3)) {
        let mut t = Tape::<f32>::new();
        let xv = t.constant(Tensor::new(vec![1, 3, 5, 4, 6], x.clone()).unwrap());
        let wv = t.constant(Tensor::new(vec![3, 1, 3, 3, 3], w.clone()).unwrap());
        let bv = t.constant(Tensor::new(vec![3], b.clone()).unwrap());
        let grouped = t.depthwise_conv3d(xv, wv, Some(bv)).unwrap();
        let grouped = t.value(grouped).values().to_vec();
        let per = 5 * 4 * 6;
        for c in 0..3 {
            let mut s = Tape::<f32>::new();
            let xc = s.constant(Tensor::new(vec![1, 1, 5, 4, 6], x[c * per..(c + 1) * per].to_vec()).unwrap());
            let wc = s.constant(Tensor::new(vec![1, 1, 3, 3, 3], w[c * 27..(c + 1) * 27].to_vec()).unwrap());
            let bc = s.constant(Tensor::new(vec![1], vec![b[c]]).unwrap());
            let o = s.conv3d(xc, wc, Some(bc), 1, 1, 1).unwrap();
            for (a, e) in grouped[c * per..(c + 1) * per].iter().zip(s.value(o).values()) {
                prop_assert!((a - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fast_conv_matches_reference_with_gradients(x in values(2 * 2 * 6 * 5 * 5), w in values(4 * 2 * 27),
                                                  stride in 1usize..3, padding in 0usize..2) {
        let geom = Conv3dGeometry::new(&[2, 2, 6, 5, 5], &[4, 2, 3, 3, 3], stride, padding, 1).unwrap();
        let reference = conv3d_reference(&geom, &x, &w, None);
        let mut t = Tape::<f32>::new();
        let xv = t.leaf(Tensor::new(vec![2, 2, 6, 5, 5], x.clone()).unwrap().with_requires_grad(true));
        let wv = t.leaf(Tensor::new(vec![4, 2, 3, 3, 3], w.clone()).unwrap().with_requires_grad(true));
        let o = t.conv3d(xv, wv, None, stride, padding, 1).unwrap();
        for (a, e) in t.value(o).values().iter().zip(&reference) {
            prop_assert!((a - e).abs() < 1e-5);
        }
        let loss = t.sum(o).unwrap();
        t.backward(loss).unwrap();
        let ones = vec![1.0f32; reference.len()];
        let (dx, dw, _) = conv3d_reference_backward(&geom, &x, &w, &ones);
        for (a, e) in t.grad(xv).unwrap().iter().zip(&dx) {
            prop_assert!((a - e).abs() < 1e-4);
        }
        for (a, e) in t.grad(wv).unwrap().iter().zip(&dw) {
            prop_assert!((a - e).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f32..30.0, 24), axis in 0usize..3) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![2, 3, 4], v).unwrap());
        let s = t.softmax(x, axis).unwrap();
        let out = t.value(s).values();
        let shape = [2usize, 3, 4];
        let strides = [12usize, 4, 1];
        for base in 0..24 {
            if !(base / strides[axis]).is_multiple_of(shape[axis]) {
                continue;
            }
            let total: f64 = (0..shape[axis]).map(|k| out[base + k * strides[axis]] as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_centres_each_slice(v in prop::collection::vec(-100.0f32..100.0, 4 * 8), gamma in values(8)) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![4, 8], v).unwrap());
        let g = t.constant(Tensor::new(vec![8], gamma.iter().map(|g| g.abs() + 0.5).collect()).unwrap());
        let b = t.constant(Tensor::zeros(vec![8]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-6).unwrap();
        let gamma = t.value(g).values().to_vec();
        for row in t.value(y).values().chunks(8) {
            let mean = row.iter().zip(&gamma).map(|(a, g)| (a / g) as f64).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn tape_records_parents_before_children(n in 1usize..6) {
        let mut t = Tape::<f32>::new();
        let mut x = t.leaf(Tensor::full(vec![2, 3], 0.5f32).unwrap().with_requires_grad(true));
        let mut seen = vec![x];
        for _ in 0..n {
            let y = t.gelu(x).unwrap();
            let z = t.add(y, x).unwrap();
            prop_assert!(y.index() > x.index() && z.index() > y.index());
            seen.push(z);
            x = z;
        }
        prop_assert_eq!(t.len(), 1 + 2 * n);
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        for v in seen {
            prop_assert!(t.grad(v).is_some());
        }
    }

    #[test]
    fn adamax_accumulator_never_negative(g in prop::collection::vec(-3.0f32..3.0, 1..8), steps in 1usize..20) {
        let mut p = vec![Tensor::zeros(vec![g.len()]).unwrap()];
        let mut opt = OptimizerState::new(OptimizerKind::Adamax, 1e-3).unwrap();
        for _ in 0..steps {
            p[0].set_grad(Some(g.clone())).unwrap();
            opt.step(&mut p).unwrap();
            prop_assert!(opt.second_moments()[0].iter().all(|&u| u >= 0.0));
        }
        prop_assert_eq!(opt.step_count(), steps as u64);
    }
}

#[test]
fn backward_rejects_non_scalar_losses() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::full(vec![3], 1.0f32).unwrap().with_requires_grad(true));
    let y = t.gelu(x).unwrap();
    assert!(t.backward(y).is_err());
}

#[test]
fn untracked_inputs_get_no_gradient() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap().with_requires_grad(true));
    let c = t.constant(Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap());
    let m = t.mul(x, c).unwrap();
    let loss = t.sum(m).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(t.grad(c).is_none());
}

#[test]
fn concat_rejects_mismatched_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]).unwrap());
    let b = t.constant(Tensor::zeros(vec![3, 1]).unwrap());
    assert!(t.concat(&[a, b], 1).is_err());
}

#[test]
fn linear_rejects_inner_dimension_mismatch() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(vec![2, 3]).unwrap());
    let w = t.constant(Tensor::zeros(vec![4, 5]).unwrap());
    assert!(t.linear(x, w, None).is_err());
}
