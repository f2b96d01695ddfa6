//! Property tests over randomized inputs: quantizer-vs-brute-force
//! agreement, transport invariants, pipeline totality, and the raw
//! tensor serialization round trip.

use proptest::prelude::*;

use vqtext::data::{gen_sample, DatasetSpec};
use vqtext::nn::Param;
use vqtext::tensor::{read_tensor, write_tensor};
use vqtext::text::{granulate, EmbeddingProvider, Lexicon};
use vqtext::transport::{
    assignment_oracle, emd_exact, max_marginal_violation, sinkhorn, DenseMatrix,
    TransportInstance,
};
use vqtext::vq::{nearest_indices, quantize, Codebook};
use vqtext::{Tape, Tensor};

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quantizer_agrees_with_exhaustive_scan(
        k in 2usize..6,
        cells in 1usize..10,
        d in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<f64> = (0..k * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let cb = Codebook {
            entries: Param::new("cb", Tensor::new(vec![k, d], entries.clone()).unwrap()),
            k,
            d_z: d,
        };
        let grid_data: Vec<f64> = (0..cells * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let grid = Tensor::new(vec![cells, d], grid_data.clone()).unwrap();
        let got = nearest_indices(&grid, &cb).unwrap();
        for c in 0..cells {
            let cell = &grid_data[c * d..(c + 1) * d];
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for ki in 0..k {
                let e = &entries[ki * d..(ki + 1) * d];
                let dist: f64 = cell.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = ki;
                }
            }
            prop_assert_eq!(got[c], best);
        }
    }

    #[test]
    fn exact_transport_is_feasible_and_optimal_on_uniform(
        n in 2usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cost = DenseMatrix::from_flat(
            n, n, (0..n * n).map(|_| r.gen_range(0.0..3.0)).collect(),
        ).unwrap();
        let inst = TransportInstance::uniform(cost).unwrap();
        let exact = emd_exact(&inst).unwrap();
        prop_assert!(max_marginal_violation(&inst, &exact.plan) < 1e-9);
        prop_assert!(exact.plan.data().iter().all(|&f| f >= 0.0));
        let oracle = assignment_oracle(&inst.cost).unwrap();
        prop_assert!((exact.cost - oracle).abs() < 1e-9);
    }

    #[test]
    fn entropic_cost_never_undercuts_the_optimum(
        n in 2usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cost = DenseMatrix::from_flat(
            n, n, (0..n * n).map(|_| r.gen_range(0.0..1.0)).collect(),
        ).unwrap();
        let inst = TransportInstance::uniform(cost).unwrap();
        let eps = 0.05 * inst.cost.mean().max(1e-6);
        let approx = sinkhorn(&inst, eps, 1e-8, 50_000).unwrap();
        let exact = emd_exact(&inst).unwrap();
        prop_assert!(approx.cost >= exact.cost - 1e-9);
    }

    #[test]
    fn every_generated_caption_granulates(seed in any::<u64>(), sample in 0u64..64) {
        let spec = DatasetSpec::new(1, 32, seed);
        let (_, caption) = gen_sample(sample, &spec);
        let lex = Lexicon::builtin();
        let provider = EmbeddingProvider::hash(8);
        let g = granulate(&caption, &lex, &provider).unwrap();
        prop_assert!(g.sentences.len() >= 2);
        prop_assert!(!g.phrases.is_empty());
        prop_assert!(g.words.len() >= 3);
        prop_assert!(g.words.len() >= g.phrases.len());
    }

    #[test]
    fn straight_through_gradient_is_the_downstream_gradient(
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::new("cb", 4, 2, &mut r).unwrap();
        let pre = Tensor::new(vec![3, 2], (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![3, 2], (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();

        let tape = Tape::new();
        let p = Param::new("pre", pre);
        let q = quantize(&tape, &p.attach(&tape), &cb).unwrap();
        let loss = q.ste.mul(&w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        // For a linear downstream the straight-through gradient is the
        // weight tensor itself, bit for bit.
        let g = grads.get(p.id()).unwrap();
        for (a, b) in g.data().iter().zip(w.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tensor_serialization_round_trips(
        dims in proptest::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1e6..1e6)).collect();
        let t = Tensor::new(dims, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
    }
}
