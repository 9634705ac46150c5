use std::collections::HashSet;

use mqar::analysis::{find_ar_hits, flops, slice_perplexity, Accounting, Arch, Dims, FreqTable, HitOpts};
use mqar::datagen::{check_invariants, gen_mqar, GenConfig, Placement};
use mqar::numerics::{causal_conv_direct, causal_conv_fft, circular_conv_direct, circular_conv_fft, FilterBank, SeqTensor};
use mqar::oracle::{parallel_mqar, pbs_multiple_search, sequential_mqar, token_mqar, tokens_to_triples, verify_labels, Triple};
use proptest::prelude::*;

fn tensor(n: usize, d: usize) -> impl Strategy<Value = SeqTensor> {
    prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| SeqTensor::from_vec(n, d, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn oracles_agree_on_token_streams(tokens in prop::collection::vec(0u32..6, 0..300)) {
        let triples = tokens_to_triples(&tokens);
        let seq = sequential_mqar(&triples);
        prop_assert_eq!(&seq, &parallel_mqar(&triples));
        prop_assert_eq!(&seq, &token_mqar(&tokens));
    }

    #[test]
    fn oracles_agree_on_triples(raw in prop::collection::vec((0u32..5, any::<u32>(), 0u32..5), 0..200)) {
        let triples: Vec<Triple> = raw.into_iter().map(|(key, value, query)| Triple { key, value, query }).collect();
        let seq = sequential_mqar(&triples);
        prop_assert_eq!(&seq, &parallel_mqar(&triples));
        for (i, r) in seq.iter().enumerate() {
            if let Some(r) = r {
                prop_assert!(r.key_index < i);
                prop_assert_eq!(triples[r.key_index].key, triples[i].query);
            }
        }
    }

    #[test]
    fn multiple_search_matches_scan(mut a in prop::collection::vec(-20i32..20, 0..40), mut b in prop::collection::vec(-20i32..20, 0..40)) {
        a.sort_unstable();
        b.sort_unstable();
        let scan: Vec<usize> = a.iter().map(|x| b.iter().position(|y| x <= y).unwrap_or(b.len())).collect();
        prop_assert_eq!(pbs_multiple_search(&a, &b).unwrap(), scan);
    }

    #[test]
    fn generated_instances_are_valid(
        d in 1usize..8,
        extra in 0usize..40,
        half_vocab in 8usize..64,
        alpha in 0.05f64..2.0,
        seed in any::<u64>(),
        index in 0u64..1000,
        absolute in any::<bool>(),
    ) {
        let n = 4 * d + extra;
        let mut cfg = GenConfig::new(n, d, alpha, 2 * half_vocab, seed);
        if absolute {
            cfg.placement = Placement::Absolute;
        }
        let inst = gen_mqar(&cfg, index).unwrap();
        prop_assert!(check_invariants(&inst).is_ok());
        prop_assert!(verify_labels(&inst).is_ok());
        prop_assert_eq!(inst.labels.len(), d);
        prop_assert_eq!(inst, gen_mqar(&cfg, index).unwrap());
    }

    #[test]
    fn conv_paths_agree(n in 1usize..48, d in 1usize..4, seed in any::<u64>()) {
        let mut rng = mqar::rng::rng_from(seed);
        let u = SeqTensor::random_normal(n, d, 1.0, &mut rng);
        let h = FilterBank::from_tensor(SeqTensor::random_normal(n, d, 1.0, &mut rng));
        let causal = causal_conv_direct(&u, &h).unwrap();
        prop_assert!(causal.max_abs_diff(&causal_conv_fft(&u, &h).unwrap()) < 1e-9);
        let circ = circular_conv_direct(&u, &h).unwrap();
        prop_assert!(circ.max_abs_diff(&circular_conv_fft(&u, &h).unwrap()) < 1e-9);
    }

    #[test]
    fn conv_is_linear(u in tensor(12, 2), v in tensor(12, 2), h in tensor(12, 2)) {
        let h = FilterBank::from_tensor(h);
        let sum = causal_conv_direct(&u.add(&v).unwrap(), &h).unwrap();
        let parts = causal_conv_direct(&u, &h).unwrap().add(&causal_conv_direct(&v, &h).unwrap()).unwrap();
        prop_assert!(sum.max_abs_diff(&parts) < 1e-9);
    }

    #[test]
    fn hits_ignore_the_future(doc in prop::collection::vec(0u32..8, 0..120), cut in 0usize..120, threshold in 0u64..5) {
        let freq = FreqTable::count_from(std::slice::from_ref(&doc), 2);
        let opts = HitOpts { threshold, ..Default::default() };
        let all = find_ar_hits(&doc, &freq, &opts);
        let cut = cut.min(doc.len());
        let prefix = find_ar_hits(&doc[..cut], &freq, &opts);
        let expected: Vec<usize> = all.into_iter().filter(|&p| p < cut).collect();
        prop_assert_eq!(prefix, expected);
    }

    #[test]
    fn excluded_ids_never_hit(doc in prop::collection::vec(0u32..5, 0..100)) {
        let opts = HitOpts { threshold: u64::MAX, exclude: HashSet::from([0]), ..Default::default() };
        for p in find_ar_hits(&doc, &FreqTable::new(), &opts) {
            prop_assert!(doc[p] != 0 && doc[p - 1] != 0);
        }
    }

    #[test]
    fn slice_totals_are_exact(docs in prop::collection::vec(prop::collection::vec(0u32..6, 0..60), 1..5)) {
        let freq = FreqTable::new();
        let hits: Vec<Vec<usize>> = docs.iter().map(|d| find_ar_hits(d, &freq, &HitOpts::default())).collect();
        let lp: Vec<Vec<f64>> = docs.iter().map(|d| d.iter().enumerate().map(|(i, _)| -0.1 * (i % 7) as f64).collect()).collect();
        let r = slice_perplexity(&lp, &hits).unwrap();
        let total: usize = docs.iter().map(Vec::len).sum();
        prop_assert_eq!(r.ar.count + r.other.count, total);
        prop_assert_eq!(r.overall.count, total);
        if let (Some(m), Some(p)) = (r.overall.mean_nll, r.overall.perplexity) {
            prop_assert!((m.exp() - p).abs() < 1e-12 * p.max(1.0));
        }
    }

    #[test]
    fn flops_linear_in_batch(b in 1usize..64, n in 2usize..4096, d in 1usize..1024, layers in 1usize..24) {
        for arch in [Arch::Attention, Arch::Hyena, Arch::LongConv, Arch::BaseConv, Arch::Rwkv] {
            let dims = Dims { b: 1, n, d, heads: 1, layers, vocab: 1000, order: 16, window: None };
            let one = flops(arch, &dims, Accounting::Reported).unwrap();
            let many = flops(arch, &Dims { b, ..dims }, Accounting::Reported).unwrap();
            prop_assert!((many - b as f64 * one).abs() <= 1e-9 * many);
        }
    }
}
