use obft_core::model::{
    forward_plain, init_lora, init_params, LoraConfig, Mode, ModelConfig, TokenBatch,
};
use obft_core::numerics::{matmul, softmax_rows, Matrix};
use obft_core::obfmat::{condition_number, random_orthogonal, random_prescribed_kappa, KeySpec};
use obft_core::partition::{
    deobfuscate_lora_block, obfuscate_lora_block, partition_model, BlockKeyIds, KeyPolicy,
};
use obft_core::rng::{stream, SeededRng};
use obft_core::zones::wire::{decode_payload, encode_payload, Message, WireTensor};
use obft_core::zones::{serve_zones, DataOwner, ServeMode};
use proptest::prelude::*;

fn gaussian<T: obft_core::numerics::Scalar>(r: usize, c: usize, seed: u64) -> Matrix<T> {
    SeededRng::new(seed, stream::MISC).gaussian_matrix(r, c)
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 32,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn matmul_is_associative(m in 1usize..9, k in 1usize..9, l in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let a = gaussian::<f64>(m, k, seed);
        let b = gaussian::<f64>(k, l, seed ^ 1);
        let c = gaussian::<f64>(l, n, seed ^ 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-10 * left.max_abs().max(1.0));

        let (a, b, c) = (a.cast::<f32>(), b.cast::<f32>(), c.cast::<f32>());
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-5 * f64::from(left.max_abs()).max(1.0));
    }

    #[test]
    fn orthogonal_keys_are_isometries(n in 1usize..24, seed in any::<u64>()) {
        let key = random_orthogonal(n, seed).unwrap();
        prop_assert!(key.r_inv.bitwise_eq(&key.r.transpose()));
        prop_assert!((key.measured_kappa - 1.0).abs() <= 1e-6);
        let x = gaussian::<f64>(3, n, seed ^ 9);
        let y = matmul(&x, &key.r).unwrap();
        for i in 0..3 {
            let nx: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((nx - ny).abs() <= 1e-12 * nx.max(1.0));
        }
    }

    #[test]
    fn prescribed_kappa_is_hit(n in 2usize..24, target in 1.0f64..1e4, seed in any::<u64>()) {
        let key = random_prescribed_kappa(n, target, seed).unwrap();
        let measured = condition_number(&key.r).unwrap();
        prop_assert!((measured / target - 1.0).abs() <= 1e-2, "target {target}, measured {measured}");
        prop_assert!(key.inversion_error() <= 1e-9 * target);
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..12, scale in 1e-3f64..1e3, seed in any::<u64>()) {
        let x = gaussian::<f64>(r, c, seed).scale(scale);
        let p = softmax_rows(&x);
        for i in 0..r {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn lora_obfuscation_round_trips(kappa in 1.0f64..1e3, seed in any::<u64>()) {
        let cfg = ModelConfig::new(1, 2, 8, 16, 8);
        let mut lora = init_lora::<f64>(&cfg, LoraConfig { rank: 3, ..Default::default() }, seed).unwrap();
        lora.randomize_b(seed, 0.1);
        let keys: Vec<_> = (0..4)
            .map(|i| obft_core::obfmat::generate_key(KeySpec::Kappa(kappa), 8, seed, i).unwrap())
            .collect();
        let ids = BlockKeyIds { attn_in: 0, attn_out: 1, mlp_in: 2, mlp_out: 3 };
        let blk = &lora.set.blocks[0];
        let back = deobfuscate_lora_block(&obfuscate_lora_block(blk, &keys, ids).unwrap(), &keys, ids).unwrap();
        for (a, b) in back.pairs.iter().zip(&blk.pairs) {
            prop_assert!(a.a.max_abs_diff(&b.a) <= 1e-10 * kappa);
            prop_assert!(a.b.max_abs_diff(&b.b) <= 1e-10 * kappa);
        }
    }

    #[test]
    fn tensor_frames_round_trip(id in "[a-z.0-9]{0,12}", dims in proptest::collection::vec(1u32..5, 1..3), seed in any::<u64>()) {
        let n: u32 = dims.iter().product();
        let values: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
        let t = WireTensor::from_slice(id, dims, &values);
        let msg = Message::Tensor(t);
        let back = decode_payload(msg.kind(), &encode_payload(&msg)).unwrap();
        prop_assert_eq!(back, msg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn orthogonal_protection_preserves_logits(n_layer in 1usize..3, seq in 1usize..9, seed in any::<u64>()) {
        let cfg = ModelConfig::new(n_layer, 2, 8, 32, 8).with_precision(obft_core::numerics::Precision::F64);
        let params = init_params::<f64>(&cfg, seed).unwrap();
        let mut lora = init_lora::<f64>(&cfg, LoraConfig { rank: 2, ..Default::default() }, seed).unwrap();
        lora.randomize_b(seed, 0.05);
        let tokens: Vec<u32> = (0..seq as u64).map(|i| ((seed.wrapping_add(i * 7)) % 32) as u32).collect();
        let batch = TokenBatch::new(tokens);
        let (model, _) = partition_model(&params, Some(&lora), KeyPolicy::PerBlock, KeySpec::Orthogonal, seed).unwrap();
        let mut s = serve_zones(model, &ServeMode::InProcess).unwrap();
        let mut owner = DataOwner::new("p", b"k".to_vec());
        s.register_owner(owner.token());
        let env = owner.seal(&batch);
        let (logits, ledger) = s.forward_protected(&env, &owner.token().clone(), Mode::Eval).unwrap();
        let plain = forward_plain(&params, Some(&lora), &batch, Mode::Eval).unwrap();
        prop_assert!(logits.max_abs_diff(&plain) <= 1e-10);
        prop_assert_eq!(ledger.crossing_count(), 4 * n_layer);
    }
}
