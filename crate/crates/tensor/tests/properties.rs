use cae_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn shape_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..4, 1..4).prop_flat_map(|big| {
        let mask = prop::collection::vec(any::<bool>(), big.len());
        (Just(big), mask).prop_map(|(big, mask)| {
            let small = big.iter().zip(&mask).map(|(&d, &keep)| if keep { d } else { 1 }).collect();
            (big, small)
        })
    })
}

proptest! {
    // sum_to is the adjoint of broadcasting: <bcast(a), g> == <a, sum_to(g)>
    #[test]
    fn sum_to_is_broadcast_adjoint((big, small) in shape_pair(), seed in 0u64..1000) {
        let a = Tensor::<f64>::from_fn(small.clone(), |i| ((i as u64 * 7 + seed) % 13) as f64 - 6.0);
        let g = Tensor::<f64>::from_fn(big.clone(), |i| ((i as u64 * 5 + seed) % 11) as f64 - 5.0);
        let bcast = a.broadcast_zip(&Tensor::zeros(big.clone()), |x, _| x);
        let lhs: f64 = bcast.data().iter().zip(g.data()).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.data().iter().zip(g.sum_to(&small).data()).map(|(x, y)| x * y).sum();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn permute_inverse_restores(dims in prop::collection::vec(1usize..4, 1..5), rot in 0usize..5) {
        let r = dims.len();
        let perm: Vec<usize> = (0..r).map(|i| (i + rot) % r).collect();
        let mut inv = vec![0; r];
        for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
        let t = Tensor::<f32>::from_fn(dims, |i| i as f32);
        prop_assert_eq!(t.permute(&perm).permute(&inv), t);
    }

    #[test]
    fn add_gradient_is_ones((big, small) in shape_pair()) {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::ones(big.clone()));
        let b = tape.leaf(Tensor::<f64>::ones(small.clone()));
        let loss = a.add(&b).sum_all();
        let grads = tape.backward(&loss);
        let fan = (big.iter().product::<usize>() / small.iter().product::<usize>()) as f64;
        prop_assert!(grads.wrt(&a).unwrap().data().iter().all(|&v| v == 1.0));
        prop_assert!(grads.wrt(&b).unwrap().data().iter().all(|&v| v == fan));
    }
}
