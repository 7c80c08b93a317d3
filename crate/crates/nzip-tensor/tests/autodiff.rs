use nzip_tensor::{no_grad, Tensor, TensorError};

#[test]
fn leaf_gradients_accumulate_across_backward_calls() {
    let x = Tensor::leaf(vec![3.0], &[1]).unwrap();
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);
    let loss2 = x.mul(&x).unwrap().sum();
    loss2.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![12.0], "second pass must add, not replace");
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn shared_subgraph_gradients_sum() {
    // loss = x² + x², both terms share the same interior node
    let x = Tensor::leaf(vec![3.0], &[1]).unwrap();
    let z = x.mul(&x).unwrap();
    let loss = z.add(&z).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![12.0]);
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.mul_scalar(2.0);
    match y.backward() {
        Err(TensorError::NonScalarLoss(shape)) => assert_eq!(shape, vec![2]),
        other => panic!("expected NonScalarLoss, got {other:?}"),
    }
}

#[test]
fn no_grad_suppresses_tracking() {
    let x = Tensor::leaf(vec![2.0], &[1]).unwrap();
    let loss = no_grad(|| x.mul(&x).unwrap().sum());
    assert!(!loss.requires_grad());
    loss.backward().unwrap();
    assert!(x.grad().is_none());
}

#[test]
fn detach_cuts_the_graph() {
    let x = Tensor::leaf(vec![2.0], &[1]).unwrap();
    let y = x.mul(&x).unwrap().detach();
    let loss = y.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    // only the direct factor contributes: d(4·x)/dx = 4
    assert_eq!(x.grad().unwrap(), vec![4.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
    let c = Tensor::constant(vec![3.0, 4.0], &[2]).unwrap();
    let loss = x.mul(&c).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
    assert!(c.grad().is_none());
}

#[test]
fn reshape_is_a_view_for_gradients() {
    let x = Tensor::leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let loss = x.reshape(&[4]).unwrap().mul_scalar(2.0).sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
}

#[test]
fn uniform_is_seed_deterministic_and_bounded() {
    use rand::SeedableRng;
    let mut a = rand::rngs::StdRng::seed_from_u64(7);
    let mut b = rand::rngs::StdRng::seed_from_u64(7);
    let ta = Tensor::uniform(&[64], -0.25, 0.5, &mut a);
    let tb = Tensor::uniform(&[64], -0.25, 0.5, &mut b);
    assert_eq!(ta.data(), tb.data());
    assert!(ta.data().iter().all(|&v| (-0.25..0.5).contains(&v)));
}

#[test]
fn deep_chain_does_not_overflow_stack() {
    // traversal is iterative, so thousands of nodes must be fine
    let x = Tensor::leaf(vec![1.0], &[1]).unwrap();
    let mut y = x.clone();
    for _ in 0..20_000 {
        y = y.add_scalar(1.0);
    }
    y.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0]);
}
