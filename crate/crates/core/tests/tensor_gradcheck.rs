//! Finite-difference checks for every differentiable tensor op.
//!
//! Each check packs the op's inputs into one flat vector, rebuilds the
//! graph from scratch per probe, and compares the tape gradient against
//! central differences (step 1e-5) at relative tolerance 1e-4.

use csnet_core::gradcheck::{finite_diff, max_rel_error};
use csnet_core::rng::Rng;
use csnet_core::tensor::{Graph, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;
const SEEDS: u64 = 20;

type Build = dyn Fn(&Graph, &[Var]) -> Var;

fn split(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut off = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::from_vec(s, flat[off..off + n].to_vec()).unwrap());
        off += n;
    }
    out
}

fn eval(flat: &[f64], shapes: &[Vec<usize>], build: &Build) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = split(flat, shapes).iter().map(|t| g.param(t)).collect();
    build(&g, &vars).item()
}

fn tape_grad(flat: &[f64], shapes: &[Vec<usize>], build: &Build) -> Vec<f64> {
    let g = Graph::new();
    let tensors = split(flat, shapes);
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t)).collect();
    build(&g, &vars).backward().unwrap();
    let mut out = Vec::new();
    for (v, t) in vars.iter().zip(&tensors) {
        match v.grad() {
            Some(gr) => out.extend_from_slice(gr.data()),
            None => out.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    out
}

/// Runs the check across seeds; `sample` draws the flat input vector.
fn check_op(
    name: &str,
    shapes: &[Vec<usize>],
    build: &Build,
    sample: &dyn Fn(&mut Rng, usize) -> f64,
) {
    let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    for seed in 0..SEEDS {
        let mut rng = Rng::substream(0xFD, seed);
        let flat: Vec<f64> = (0..n).map(|i| sample(&mut rng, i)).collect();
        let analytic = tape_grad(&flat, shapes, build);
        let numeric = finite_diff(|x| eval(x, shapes, build), &flat, STEP);
        let err = max_rel_error(&analytic, &numeric, ABS_FLOOR);
        assert!(err < TOL, "{name} seed {seed}: rel err {err}");
    }
}

fn uniform(rng: &mut Rng, _i: usize) -> f64 {
    rng.uniform(-2.0, 2.0)
}

/// Uniform in [-2,2] but kept away from zero, for kinked ops.
fn uniform_off_kink(rng: &mut Rng, _i: usize) -> f64 {
    let v = rng.uniform(0.05, 2.0);
    if rng.next_f64() < 0.5 {
        -v
    } else {
        v
    }
}

#[test]
fn elementwise_binary_ops() {
    let shapes = vec![vec![2, 3], vec![2, 3]];
    check_op(
        "add",
        &shapes,
        &|_, v| v[0].add(&v[1]).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "sub",
        &shapes,
        &|_, v| v[0].sub(&v[1]).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "mul",
        &shapes,
        &|_, v| v[0].mul(&v[1]).unwrap().sum(None).unwrap(),
        &uniform,
    );
    check_op(
        "div",
        &shapes,
        &|_, v| v[0].div(&v[1]).unwrap().sum(None).unwrap(),
        &uniform_off_kink, // keep denominators away from zero
    );
}

#[test]
fn elementwise_binary_broadcast() {
    let shapes = vec![vec![3, 4], vec![3, 1]];
    check_op(
        "add broadcast",
        &shapes,
        &|_, v| v[0].add(&v[1]).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "mul broadcast",
        &shapes,
        &|_, v| v[0].mul(&v[1]).unwrap().sum_squares().unwrap(),
        &uniform,
    );
}

#[test]
fn elementwise_unary_ops() {
    let shapes = vec![vec![7]];
    check_op(
        "neg",
        &shapes,
        &|_, v| v[0].neg().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "exp",
        &shapes,
        &|_, v| v[0].exp().sum(None).unwrap(),
        &uniform,
    );
    check_op(
        "log",
        &shapes,
        &|_, v| v[0].add_scalar(3.0).log().sum(None).unwrap(),
        &uniform, // inputs shifted into (1, 5)
    );
    check_op(
        "relu",
        &shapes,
        &|_, v| v[0].relu().sum_squares().unwrap(),
        &uniform_off_kink,
    );
    check_op(
        "softplus",
        &shapes,
        &|_, v| v[0].softplus().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "scalar ops",
        &shapes,
        &|_, v| v[0].mul_scalar(-1.7).add_scalar(0.3).sum_squares().unwrap(),
        &uniform,
    );
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let shapes = vec![vec![3, 4], vec![4, 2]];
    check_op(
        "matmul",
        &shapes,
        &|_, v| v[0].matmul(&v[1]).unwrap().sum(None).unwrap(),
        &uniform,
    );
    check_op(
        "matmul squared",
        &shapes,
        &|_, v| v[0].matmul(&v[1]).unwrap().sum_squares().unwrap(),
        &uniform,
    );
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    // random 2x6x6 input as stated in the op contract
    let shapes = vec![vec![2, 6, 6], vec![3, 2, 3, 3]];
    check_op(
        "conv2d s1 p0",
        &shapes,
        &|_, v| v[0].conv2d(&v[1], 1, 0).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "conv2d s1 p1",
        &shapes,
        &|_, v| v[0].conv2d(&v[1], 1, 1).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    let strided = vec![vec![2, 6, 6], vec![3, 2, 4, 4]];
    check_op(
        "conv2d s2 p1",
        &strided,
        &|_, v| v[0].conv2d(&v[1], 2, 1).unwrap().sum_squares().unwrap(),
        &uniform,
    );
}

#[test]
fn conv_transpose_gradient_matches_finite_differences() {
    let shapes = vec![vec![3, 3, 3], vec![3, 2, 4, 4]];
    check_op(
        "conv_transpose2d s2 p1",
        &shapes,
        &|_, v| {
            v[0].conv_transpose2d(&v[1], 2, 1)
                .unwrap()
                .sum_squares()
                .unwrap()
        },
        &uniform,
    );
}

#[test]
fn reduce_gradients_match_finite_differences() {
    let shapes = vec![vec![3, 4]];
    check_op(
        "sum axis0",
        &shapes,
        &|_, v| v[0].sum(Some(0)).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "mean axis1",
        &shapes,
        &|_, v| v[0].mean(Some(1)).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "logsumexp",
        &shapes,
        &|_, v| v[0].logsumexp(None).unwrap(),
        &uniform,
    );
    check_op(
        "logsumexp axis1",
        &shapes,
        &|_, v| v[0].logsumexp(Some(1)).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    // min/max: random draws never tie, gradient takes the achiever
    check_op("min", &shapes, &|_, v| v[0].min(None).unwrap(), &uniform);
    check_op(
        "max axis0",
        &shapes,
        &|_, v| v[0].max(Some(0)).unwrap().sum(None).unwrap(),
        &uniform,
    );
}

#[test]
fn shape_op_gradients_match_finite_differences() {
    let shapes = vec![vec![2, 6]];
    check_op(
        "reshape+narrow+concat",
        &shapes,
        &|_, v| {
            let r = v[0].reshape(&[3, 4]).unwrap();
            let a = r.narrow(1, 0, 2).unwrap();
            let b = r.narrow(1, 2, 2).unwrap();
            Var::concat(&[b, a], 1).unwrap().sum_squares().unwrap()
        },
        &uniform,
    );
    check_op(
        "replicate_spatial",
        &vec![vec![3]],
        &|_, v| v[0].replicate_spatial(2, 5).unwrap().sum_squares().unwrap(),
        &uniform,
    );
    check_op(
        "gather_at",
        &vec![vec![2, 4, 4]],
        &|_, v| {
            v[0].gather_at(&[(0, 0), (1, 3), (3, 2)])
                .unwrap()
                .sum_squares()
                .unwrap()
        },
        &uniform,
    );
}

#[test]
fn warp_gradients_match_finite_differences() {
    // Flows drawn off integer offsets so the probe never crosses a
    // bilinear cell boundary or the border clamp.
    let shapes = vec![vec![2, 5, 5], vec![2, 5, 5]];
    check_op(
        "bilinear_warp",
        &shapes,
        &|_, v| {
            let frame = v[0].clone();
            let flow = v[1].mul_scalar(0.45).add_scalar(0.27);
            frame.bilinear_warp(&flow).unwrap().sum_squares().unwrap()
        },
        &uniform_off_kink,
    );
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    // whole-network check: relu MLP with softplus head
    let shapes = vec![
        vec![4],
        vec![5, 4],
        vec![5],
        vec![3, 5],
        vec![3],
    ];
    check_op(
        "mlp",
        &shapes,
        &|_, v| {
            let x = v[0].reshape(&[4, 1]).unwrap();
            let h = v[1]
                .matmul(&x)
                .unwrap()
                .reshape(&[5])
                .unwrap()
                .add(&v[2])
                .unwrap()
                .relu();
            let o = v[3]
                .matmul(&h.reshape(&[5, 1]).unwrap())
                .unwrap()
                .reshape(&[3])
                .unwrap()
                .add(&v[4])
                .unwrap()
                .softplus();
            o.sum_squares().unwrap()
        },
        &uniform_off_kink,
    );
}

#[test]
fn conv_adjoint_identity() {
    // <conv2d(x,k), y> == <x, conv_transpose2d(y,k)> within 1e-10
    let mut rng = Rng::substream(0xAD, 1);
    for case in 0..30 {
        let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
        let k = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let pad = rng.below(k);
        // choose H so the output extent is integral
        let oh = 2 + rng.below(4);
        let h = (oh - 1) * stride + k;
        if h <= 2 * pad {
            continue;
        }
        let h = h - 2 * pad;

        let g = Graph::new();
        let x = g.input(Tensor::from_vec(
            &[ci, h, h],
            (0..ci * h * h).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        ).unwrap());
        let ker = g.input(Tensor::from_vec(
            &[co, ci, k, k],
            (0..co * ci * k * k).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        ).unwrap());
        let fwd = x.conv2d(&ker, stride, pad).unwrap();
        let ow = fwd.shape()[2];
        let y = g.input(Tensor::from_vec(
            &[co, oh, ow],
            (0..co * oh * ow).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        ).unwrap());
        let back = y.conv_transpose2d(&ker, stride, pad).unwrap();

        let lhs: f64 = fwd
            .value()
            .data()
            .iter()
            .zip(y.value().data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rhs: f64 = x
            .value()
            .data()
            .iter()
            .zip(back.value().data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(rel < 1e-10, "case {case}: <{lhs}> vs <{rhs}>");
    }
}
