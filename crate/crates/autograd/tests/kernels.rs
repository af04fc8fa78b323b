use humocon_autograd::Tensor;
use proptest::prelude::*;

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = i % shape[ax];
        i /= shape[ax];
    }
    idx
}

/// Index into `from` for an index into the broadcast shape.
fn source_index(idx: &[usize], from: &[usize]) -> Vec<usize> {
    let pad = idx.len() - from.len();
    from.iter().enumerate().map(|(i, &d)| if d == 1 { 0 } else { idx[i + pad] }).collect()
}

fn naive_broadcast(t: &Tensor, to: &[usize]) -> Vec<f64> {
    let n: usize = to.iter().product();
    (0..n).map(|i| t.at(&source_index(&unravel(i, to), t.shape()))).collect()
}

/// A target shape plus a source shape that broadcasts to it.
fn shapes() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..4, 1..5).prop_flat_map(|to| {
        let r = to.len();
        (Just(to), 0..=r, prop::collection::vec(any::<bool>(), r))
    })
    .prop_map(|(to, drop, ones)| {
        let from: Vec<usize> = to[drop..].iter().zip(&ones[drop..]).map(|(&d, &o)| if o { 1 } else { d }).collect();
        (to, from)
    })
}

fn filled(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.37).sin() + i as f64).collect())
}

proptest! {
    #[test]
    fn broadcast_matches_naive((to, from) in shapes()) {
        let t = filled(&from);
        let b = t.broadcast_to(&to).unwrap();
        prop_assert_eq!(b.data(), &naive_broadcast(&t, &to)[..]);
    }

    #[test]
    fn sum_to_is_adjoint_of_broadcast((to, from) in shapes()) {
        let g = filled(&to);
        let s = g.sum_to(&from).unwrap();
        let mut naive = Tensor::zeros(&from);
        let strides: Vec<usize> = (0..from.len()).map(|i| from[i + 1..].iter().product()).collect();
        for i in 0..g.numel() {
            let src = source_index(&unravel(i, &to), &from);
            let off: usize = src.iter().zip(&strides).map(|(a, b)| a * b).sum();
            naive.data_mut()[off] += g.data()[i];
        }
        prop_assert!(s.max_abs_diff(&naive) < 1e-9);
    }

    #[test]
    fn permute_matches_naive(shape in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
        let mut axes: Vec<usize> = (0..shape.len()).collect();
        let mut state = seed;
        for i in (1..axes.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            axes.swap(i, (state >> 33) as usize % (i + 1));
        }
        let t = filled(&shape);
        let p = t.permute(&axes).unwrap();
        for i in 0..p.numel() {
            let idx = unravel(i, p.shape());
            let mut src = vec![0; shape.len()];
            for (k, &a) in axes.iter().enumerate() {
                src[a] = idx[k];
            }
            prop_assert_eq!(p.data()[i], t.at(&src));
        }
    }
}

fn naive_matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Vec<f64> {
    let get = |t: &Tensor, i: usize, j: usize, tr: bool| if tr { t.at(&[j, i]) } else { t.at(&[i, j]) };
    let (m, k) = if ta { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
    let n = if tb { b.shape()[0] } else { b.shape()[1] };
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push((0..k).map(|p| get(a, i, p, ta) * get(b, p, j, tb)).sum());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_naive(m in 1usize..70, k in 1usize..70, n in 1usize..70, ta in any::<bool>(), tb in any::<bool>()) {
        let a = filled(&if ta { [k, m] } else { [m, k] });
        let b = filled(&if tb { [n, k] } else { [k, n] });
        let c = Tensor::matmul(&a, &b, ta, tb).unwrap();
        let want = naive_matmul(&a, &b, ta, tb);
        let scale = want.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        for (x, y) in c.data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * scale);
        }
    }
}
