use semlink_tensor::gradcheck::{grad_check, Differentiable, Precision};
use semlink_tensor::{Graph, Result, RngStream, Scalar, Tensor, Var};

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut r = RngStream::new(seed, 17).rng();
    let n = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| scale * r.normal()).collect::<Vec<_>>()).unwrap()
}

fn probe_sum<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&shape, seed, 1.0).cast());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Direct seven-loop cross-correlation with explicit bounds checks.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (h, w, cin) = (x.shape()[0] as isize, x.shape()[1] as isize, x.shape()[2]);
    let (ks, cout) = (k.shape()[0] as isize, k.shape()[3]);
    let pad = ks / 2;
    let s = stride as isize;
    let ho = (h + 2 * pad - ks) / s + 1;
    let wo = (w + 2 * pad - ks) / s + 1;
    let mut out = vec![0.0; (ho * wo) as usize * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = oy * s + ky - pad;
                        let ix = ox * s + kx - pad;
                        if iy < 0 || ix < 0 || iy >= h || ix >= w {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[((iy * w + ix) as usize) * cin + ci];
                            let kv = k.data()[(((ky * ks + kx) as usize) * cin + ci) * cout + co];
                            acc += xv * kv;
                        }
                    }
                }
                out[((oy * wo + ox) as usize) * cout + co] = acc;
            }
        }
    }
    Tensor::new([ho as usize, wo as usize, cout], out).unwrap()
}

#[test]
fn conv2d_matches_naive_oracle() {
    let cases = [
        (5, 5, 2, 3, 3, 1),
        (6, 6, 3, 2, 3, 2),
        (8, 8, 2, 4, 5, 2),
        (7, 4, 1, 2, 5, 1),
        (4, 4, 2, 2, 1, 1),
    ];
    for (n, &(h, w, cin, cout, k, s)) in cases.iter().enumerate() {
        let x = random(&[h, w, cin], n as u64, 1.0);
        let ker = random(&[k, k, cin, cout], 100 + n as u64, 1.0);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(ker.clone());
        let y = g.conv2d(xv, kv, s).unwrap();
        let expect = naive_conv(&x, &ker, s);
        assert_eq!(g.value(y).shape(), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect).unwrap() < 1e-12, "case {n}");
        let (ho, wo) = (expect.shape()[0], expect.shape()[1]);
        assert_eq!(g.flops(), (2 * ho * wo * k * k * cin * cout) as u64);
    }
}

#[test]
fn conv2d_single_tap_is_identity() {
    let x = random(&[3, 3, 1], 9, 1.0);
    let mut k = Tensor::<f64>::zeros([3, 3, 1, 1]);
    k.data_mut()[4] = 1.0;
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k);
    let y = g.conv2d(xv, kv, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([4, 4, 2]));
    let k = g.constant(Tensor::zeros([3, 3, 3, 1]));
    assert!(g.conv2d(x, k, 1).is_err());
    let k = g.constant(Tensor::zeros([3, 3, 2, 1]));
    assert!(g.conv2d(x, k, 3).is_err());
}

struct ConvFn(usize);
impl Differentiable for ConvFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = g.conv2d(x[0], x[1], self.0)?;
        probe_sum(g, y, 3)
    }
}

#[test]
fn conv2d_gradient() {
    for stride in [1, 2] {
        let inputs = [random(&[5, 6, 2], 20, 1.0), random(&[3, 3, 2, 3], 21, 0.5)];
        for p in [Precision::F32, Precision::F64] {
            let r = grad_check(&ConvFn(stride), &inputs, p).unwrap();
            assert!(
                r.passed(p.default_tolerance()),
                "stride {stride} {p:?} {}",
                r.max_rel_err
            );
        }
    }
}

struct UpsampleFn;
impl Differentiable for UpsampleFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = g.upsample2(x[0])?;
        probe_sum(g, y, 4)
    }
}

#[test]
fn upsample_values_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([1, 2, 1], &[1.0, 2.0]).unwrap());
    let y = g.upsample2(x).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 1]);
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    let r = grad_check(&UpsampleFn, &[random(&[3, 2, 2], 30, 1.0)], Precision::F64).unwrap();
    assert!(r.passed(1e-7));
}

#[test]
fn gdn_with_zero_gamma_unit_beta_is_identity() {
    let x = random(&[4, 3], 40, 1.0);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let b = g.constant(Tensor::ones([3]));
    let gm = g.constant(Tensor::zeros([3, 3]));
    for inverse in [false, true] {
        let y = g.gdn(xv, b, gm, inverse).unwrap();
        assert!(g.value(y).max_abs_diff(&x).unwrap() < 1e-15);
    }
}

#[test]
fn gdn_hand_example() {
    // y = x / sqrt(1 + 0.5 * (x0^2 + x1^2)) per channel with full gamma 0.5
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::ones([2]));
    let gm = g.constant(Tensor::full([2, 2], 0.5));
    let y = g.gdn(x, b, gm, false).unwrap();
    let n = (1.0f64 + 0.5 * 5.0).sqrt();
    let d = g.value(y).data();
    assert!((d[0] - 1.0 / n).abs() < 1e-15 && (d[1] - 2.0 / n).abs() < 1e-15);
}

struct GdnFn(bool);
impl Differentiable for GdnFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = g.gdn(x[0], x[1], x[2], self.0)?;
        probe_sum(g, y, 5)
    }
}

#[test]
fn gdn_gradient() {
    for inverse in [false, true] {
        let x = random(&[2, 2, 3], 50, 1.0);
        let beta = random(&[3], 51, 0.2).map(|v| 1.0 + v.abs());
        let gamma = random(&[3, 3], 52, 0.2).map(|v| 0.1 + v.abs());
        let inputs = [x, beta, gamma];
        for p in [Precision::F32, Precision::F64] {
            let r = grad_check(&GdnFn(inverse), &inputs, p).unwrap();
            assert!(
                r.passed(p.default_tolerance()),
                "inverse {inverse} {p:?} {}",
                r.max_rel_err
            );
        }
    }
}

#[test]
fn gdn_clamped_parameters_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(random(&[2, 2], 60, 1.0));
    let b = g.input(Tensor::from_f64([2], &[-1.0, 1.0]).unwrap());
    let gm = g.input(Tensor::from_f64([2, 2], &[-0.5, 0.1, 0.1, 0.1]).unwrap());
    let y = g.gdn(x, b, gm, false).unwrap();
    assert!(g.value(y).is_finite());
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(b).unwrap().data()[0], 0.0);
    assert_eq!(g.grad(gm).unwrap().data()[0], 0.0);
    assert_ne!(g.grad(gm).unwrap().data()[1], 0.0);
}
