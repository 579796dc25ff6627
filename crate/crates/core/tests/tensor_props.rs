use convbn::io::{self, TensorMap};
use convbn::tensor::{broadcast_to, reduce_to};
use convbn::{DType, Rng, Shape, Tensor};
use proptest::prelude::*;

/// A shape of rank 1..=4 and a right-aligned shape that broadcasts to it.
fn shape_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|big| {
        let r = big.len();
        (Just(big.clone()), 0..=r, prop::collection::vec(any::<bool>(), r)).prop_map(move |(big, k, keep)| {
            let small = (r - k..r).map(|i| if keep[i] { big[i] } else { 1 }).collect();
            (big, small)
        })
    })
}

fn tensor(seed: u64, dtype: DType, dims: &[usize]) -> Tensor {
    Rng::new(seed).normal_tensor(dtype, Shape::new(dims.to_vec()).unwrap(), 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn broadcast_and_reduce_are_adjoint((big, small) in shape_pair(), seed in any::<u64>()) {
        let v = tensor(seed, DType::F64, &small);
        let u = tensor(seed ^ 1, DType::F64, &big);
        let big = Shape::new(big).unwrap();
        let lhs = broadcast_to(&v, &big).unwrap().dot(&u).unwrap();
        let rhs = v.dot(&reduce_to(&u, v.shape()).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn reduce_after_broadcast_counts_replicas((big, small) in shape_pair(), seed in any::<u64>()) {
        let v = tensor(seed, DType::F64, &small);
        let big = Shape::new(big).unwrap();
        let back = reduce_to(&broadcast_to(&v, &big).unwrap(), v.shape()).unwrap();
        let k = (big.numel() / v.numel()) as f64;
        // Sums of k equal terms are exact for the small k here up to one
        // rounding per addition.
        prop_assert!(back.max_abs_diff(&v.scale(k)).unwrap() <= 1e-12 * k * v.max_abs());
    }

    #[test]
    fn cbnt_round_trip_is_bit_exact(
        entries in prop::collection::vec((prop::collection::vec(0usize..4, 0..=3), any::<bool>(), any::<u64>()), 0..6)
    ) {
        let mut map = TensorMap::new();
        for (i, (dims, f32, seed)) in entries.into_iter().enumerate() {
            let dtype = if f32 { DType::F32 } else { DType::F64 };
            let mut t = tensor(seed, dtype, &dims);
            if t.numel() > 0 {
                let mut d = t.data().to_vec();
                d[0] = [f64::NAN, -0.0, f64::INFINITY, 1e-310][i % 4];
                t = Tensor::new(dtype, t.shape().clone(), d).unwrap();
            }
            map.insert(format!("t{i}"), t);
        }
        let bytes = io::encode(&map).unwrap();
        let back = io::decode(&bytes).unwrap();
        prop_assert_eq!(io::encode(&back).unwrap(), bytes);
        for (k, t) in &map {
            let u = &back[k];
            prop_assert_eq!(t.dtype(), u.dtype());
            prop_assert_eq!(t.shape(), u.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(t), bits(u));
        }
    }
}

#[test]
fn equal_seeds_give_equal_first_ten_thousand_outputs() {
    let (mut a, mut b) = (Rng::new(123), Rng::new(123));
    for _ in 0..10_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
    let (mut a, mut b) = (Rng::derive(9, 4), Rng::derive(9, 4));
    for _ in 0..10_000 {
        assert_eq!(a.next_f64().to_bits(), b.next_f64().to_bits());
    }
}

#[test]
fn derived_streams_differ() {
    let mut a = Rng::derive(9, 0);
    let mut b = Rng::derive(9, 1);
    assert!((0..16).any(|_| a.next_u64() != b.next_u64()));
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.cbnt");
    let mut map = TensorMap::new();
    map.insert("w".into(), tensor(1, DType::F32, &[2, 3]));
    map.insert("s".into(), Tensor::scalar(DType::F64, 0.25));
    io::write(&p, &map).unwrap();
    assert_eq!(io::read(&p).unwrap(), map);
}
