use proptest::prelude::*;
use semlink_tensor::checkpoint::{read_records, write_records};
use semlink_tensor::gradcheck::{grad_check, Differentiable, Precision};
use semlink_tensor::{CustomOp, Graph, Result, RngStream, Scalar, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed, 99).rng();
    let n = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| r.normal()).collect::<Vec<_>>()).unwrap()
}

/// Random values bounded away from zero so ReLU kinks stay outside the
/// finite-difference stencil.
fn random_off_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Weighted sum against a fixed random probe, making any tensor output scalar.
fn probe_sum<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&shape, seed).cast());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::eye(2));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.matmul(i, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);
    assert!(g.matmul(a, a).is_err());
}

struct MatMulFn;
impl Differentiable for MatMulFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = g.matmul(x[0], x[1])?;
        probe_sum(g, y, 5)
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let inputs = [random(&[5, 4], 1), random(&[4, 3], 2)];
    for p in [Precision::F32, Precision::F64] {
        let r = grad_check(&MatMulFn, &inputs, p).unwrap();
        assert!(r.passed(p.default_tolerance()), "{p:?} {}", r.max_rel_err);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[3], &[1000.0, 0.0, 0.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);

    let mut g32 = Graph::<f32>::new();
    let x = g32.constant(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
    let y = g32.softmax(x);
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, &v) in g32.value(y).data().iter().enumerate() {
        let expect = ((k + 1) as f64).exp() / z;
        assert!((v as f64 - expect).abs() <= 1e-6);
    }

    let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
    let y = g.softmax(x);
    assert!(g.value(y).data().iter().all(|v| v.is_nan()));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::ones([4]));
    let bias = g.constant(Tensor::zeros([4]));
    let x = g.constant(Tensor::full([4], 3.0));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gain = g.constant(Tensor::ones([2]));
    let bias = g.constant(Tensor::zeros([2]));
    let x = g.constant(t(&[2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
}

struct LayerNormFn;
impl Differentiable for LayerNormFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = g.layer_norm(x[0], x[1], x[2], T::of(1e-5))?;
        probe_sum(g, y, 6)
    }
}

#[test]
fn layer_norm_gradient() {
    for (k, shape) in [[3, 4], [2, 8], [5, 3]].iter().enumerate() {
        let c = shape[1];
        let inputs = [
            random(shape, 10 + k as u64),
            random(&[c], 20 + k as u64),
            random(&[c], 30 + k as u64),
        ];
        for p in [Precision::F32, Precision::F64] {
            let r = grad_check(&LayerNormFn, &inputs, p).unwrap();
            assert!(r.passed(p.default_tolerance()), "{shape:?} {p:?} {}", r.max_rel_err);
        }
    }
}

#[test]
fn activations() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).data(), &[0.5]);
}

struct ActFn(u8);
impl Differentiable for ActFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = match self.0 {
            0 => g.relu(x[0]),
            1 => g.sigmoid(x[0]),
            _ => g.gelu(x[0]),
        };
        probe_sum(g, y, 7)
    }
}

#[test]
fn activation_gradients() {
    for kind in 0..3 {
        let x = random_off_kink(&[4, 5], 40 + kind as u64);
        for p in [Precision::F32, Precision::F64] {
            let r = grad_check(&ActFn(kind), &[x.clone()], p).unwrap();
            assert!(r.passed(p.default_tolerance()), "act {kind} {p:?} {}", r.max_rel_err);
        }
    }
}

#[test]
fn mse_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2], &[0.5, 0.25]));
    let l = g.mse(a, a).unwrap();
    assert_eq!(g.value(l).data(), &[0.0]);
    let p = g.input(t(&[2], &[0.0, 0.0]));
    let q = g.constant(t(&[2], &[1.0, 3.0]));
    let l = g.mse(p, q).unwrap();
    assert_eq!(g.value(l).data(), &[5.0]);
    g.backward(l).unwrap();
    // 2 (pred - target) / N
    assert_eq!(g.grad(p).unwrap().data(), &[-1.0, -3.0]);
    let bad = g.constant(t(&[3], &[0.0; 3]));
    assert!(g.mse(p, bad).is_err());
}

struct MseFn;
impl Differentiable for MseFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        g.mse(x[0], x[1])
    }
}

#[test]
fn mse_gradient() {
    let inputs = [random(&[3, 4], 50), random(&[3, 4], 51)];
    for p in [Precision::F32, Precision::F64] {
        let r = grad_check(&MseFn, &inputs, p).unwrap();
        assert!(r.passed(p.default_tolerance()), "{}", r.max_rel_err);
    }
}

struct SumFn;
impl Differentiable for SumFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        Ok(g.sum(x[0]))
    }
}

#[test]
fn grad_check_sum_is_exact() {
    let r = grad_check(&SumFn, &[random(&[3, 3], 60)], Precision::F64).unwrap();
    assert!(r.analytic[0].data().iter().all(|&v| v == 1.0));
    assert!(r.max_rel_err < 1e-9);
}

struct Identity;
impl Differentiable for Identity {
    fn eval<T: Scalar>(&self, _g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        Ok(x[0])
    }
}

#[test]
fn grad_check_rejects_non_scalar() {
    assert!(grad_check(&Identity, &[random(&[2], 1)], Precision::F64).is_err());
}

/// Squares its input but reports a backward of `x` instead of `2x`.
struct WrongSquare;
impl<T: Scalar> CustomOp<T> for WrongSquare {
    fn name(&self) -> &str {
        "wrong_square"
    }
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(inputs[0].map(|v| v * v))
    }
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let d = inputs[0].data().iter().zip(g.data()).map(|(&x, &gv)| x * gv).collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), d).unwrap())]
    }
}

struct WrongFn;
impl Differentiable for WrongFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = g.custom(&[x[0]], Box::new(WrongSquare))?;
        Ok(g.sum(y))
    }
}

#[test]
fn grad_check_flags_wrong_backward() {
    let r = grad_check(&WrongFn, &[random(&[6], 70)], Precision::F64).unwrap();
    assert!(!r.passed(1e-4));
    assert!(r.max_rel_err > 0.1);
}

struct ElementwiseFn;
impl Differentiable for ElementwiseFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let a = g.add(x[0], x[1])?;
        let b = g.sub(a, x[1])?;
        let c = g.mul(b, x[1])?;
        let d = g.scale(c, T::of(0.7));
        let e = g.add_bias(d, x[2])?;
        let tr = g.transpose(e)?;
        let r = g.reshape(tr, [e_len(g, tr)])?;
        let r = g.reshape(r, [4, 3])?;
        let s = g.slice_cols(r, 1, 2)?;
        let cat = g.concat_cols(&[s, r])?;
        probe_sum(g, cat, 8)
    }
}

fn e_len<T: Scalar>(g: &Graph<T>, v: Var) -> usize {
    g.value(v).len()
}

#[test]
fn structural_op_gradients() {
    let inputs = [random(&[3, 4], 80), random(&[3, 4], 81), random(&[4], 82)];
    for p in [Precision::F32, Precision::F64] {
        let r = grad_check(&ElementwiseFn, &inputs, p).unwrap();
        assert!(r.passed(p.default_tolerance()), "{p:?} {}", r.max_rel_err);
    }
}

struct GatherFn;
impl Differentiable for GatherFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = g.gather(x[0], vec![0, 2, 2, 1, 0, 3], [2, 3])?;
        let y = g.softmax(y);
        probe_sum(g, y, 9)
    }
}

#[test]
fn gather_and_softmax_gradient() {
    for p in [Precision::F32, Precision::F64] {
        let r = grad_check(&GatherFn, &[random(&[4], 90)], p).unwrap();
        assert!(r.passed(p.default_tolerance()), "{}", r.max_rel_err);
    }
}

struct PowerFn;
impl Differentiable for PowerFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = g.power_normalize(x[0])?;
        let y = g.complex_scale(y, T::of(0.3), T::of(-1.1))?;
        probe_sum(g, y, 11)
    }
}

#[test]
fn power_normalize_and_complex_scale_gradient() {
    for p in [Precision::F32, Precision::F64] {
        let r = grad_check(&PowerFn, &[random(&[16], 100)], p).unwrap();
        assert!(r.passed(p.default_tolerance()), "{}", r.max_rel_err);
    }
}

#[test]
fn power_normalize_zero_input() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros([8]));
    let y = g.power_normalize(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_reaches_every_dependent_leaf() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::ones([2, 2]));
    let b = g.input(Tensor::ones([2, 2]));
    let c = g.constant(Tensor::ones([2, 2]));
    let unused = g.input(Tensor::ones([2]));
    let ab = g.matmul(a, b).unwrap();
    let abc = g.add(ab, c).unwrap();
    let s = g.sum(abc);
    g.backward(s).unwrap();
    assert!(g.grad(a).is_some() && g.grad(b).is_some());
    assert!(g.grad(c).is_none());
    assert!(g.grad(unused).is_none());
    assert_eq!(g.grad(a).unwrap().shape(), &[2, 2]);
    assert!(g.backward(ab).is_err());
}

#[test]
fn flop_counter_tracks_matmul() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::ones([3, 4]));
    let b = g.constant(Tensor::ones([4, 5]));
    g.matmul(a, b).unwrap();
    assert_eq!(g.flops(), 2 * 3 * 4 * 5);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64([3, 4], &vals).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        vals in proptest::collection::vec(any::<f32>(), 1..40),
        name in "[a-z./_0-9]{1,24}",
    ) {
        let t = Tensor::<f32>::new([vals.len()], vals.clone()).unwrap();
        let mut bytes = Vec::new();
        write_records(&mut bytes, &[(name.as_str(), &t)]).unwrap();
        let back = read_records::<_, f32>(&bytes[..]).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].0, &name);
        let a: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    use semlink_tensor::{checkpoint, ParamStore};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.semw");
    let mut p = ParamStore::<f32>::new();
    p.add("enc.0.kernel", random(&[3, 3, 2, 4], 1).cast());
    p.add("enc.0.bias", random(&[4], 2).cast());
    checkpoint::save(&path, &p).unwrap();
    let mut q = ParamStore::<f32>::new();
    q.add("enc.0.kernel", Tensor::zeros([3, 3, 2, 4]));
    q.add("enc.0.bias", Tensor::zeros([4]));
    checkpoint::load(&path, &mut q).unwrap();
    for (a, b) in p.iter().zip(q.iter()) {
        assert_eq!(a.value, b.value);
    }
}
