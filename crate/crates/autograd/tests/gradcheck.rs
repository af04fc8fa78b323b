use humocon_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

type ScalarFn = for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>;

fn eval(f: ScalarFn, x: &Tensor) -> f64 {
    let tape = Tape::new();
    let v = tape.var(x.clone());
    f(&tape, v).item()
}

fn fd_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn cases() -> Vec<(&'static str, Vec<usize>, ScalarFn)> {
    vec![
        ("tanh-exp", vec![3, 4], |_, x| x.tanh().mul(x.exp()).sum()),
        ("div-sqrt", vec![2, 3], |_, x| x.square().offset(1.0).sqrt().div(x.offset(3.0)).sum()),
        ("log-softmax", vec![2, 5], |_, x| x.log_softmax().mul(x).sum()),
        ("matmul-batched", vec![2, 3, 3], |_, x| x.matmul(x.transpose()).tanh().sum()),
        ("matmul-flags", vec![3, 3], |_, x| x.matmul_t(x.exp(), true, true).square().sum()),
        ("broadcast-reduce", vec![4, 3], |t, x| {
            let b = t.constant(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]));
            x.mul(b).sum_axis(1).square().mean()
        }),
        ("permute-narrow-concat", vec![2, 3, 4], |_, x| {
            let p = x.permute(&[2, 0, 1]);
            let a = p.narrow(0, 1, 2);
            Var::concat(&[a, x.reshape(&[4, 2, 3]).narrow(0, 0, 1)], 0).tanh().square().sum()
        }),
        ("sigmoid-ln", vec![5], |_, x| x.sigmoid().ln().sum()),
    ]
}

#[test]
fn first_order_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shape, f) in cases() {
        let x = random(&shape, &mut rng);
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let g = tape.grad(f(&tape, v), &[v], false)[0].value();
        let fd = fd_gradient(|p| eval(f, p), &x, 1e-6);
        let err = rel_err(g.data(), &fd);
        assert!(err < 1e-7, "{name}: rel err {err}");
    }
}

#[test]
fn second_order_matches_differences_of_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, shape, f) in cases() {
        let x = random(&shape, &mut rng);
        let w = random(&shape, &mut rng);
        // h(x) = <w, grad f(x)>; compare its gradient to finite differences of h
        let h = |p: &Tensor| {
            let tape = Tape::new();
            let v = tape.var(p.clone());
            let g = tape.grad(f(&tape, v), &[v], false)[0].value();
            g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let g = tape.grad(f(&tape, v), &[v], true)[0];
        let hv = g.mul(tape.constant(w.clone())).sum();
        let hg = tape.grad(hv, &[v], false)[0].value();
        let fd = fd_gradient(h, &x, 1e-5);
        let err = rel_err(hg.data(), &fd);
        assert!(err < 1e-6, "{name}: rel err {err}");
    }
}
