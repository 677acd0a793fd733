//! Cross-module checks through the public API.

use dssa_core::attention::{self, AttnInputs};
use dssa_core::fixtures::{gaussian_tensor, integer_tensor, random_inputs};
use dssa_core::hybrid::LayerPlan;
use dssa_core::io::{read_tensor, write_tensor};
use dssa_core::moba::{self, MobaParams};
use dssa_core::perf::{self, CostModel};
use dssa_core::quant::{self, container, DEFAULT_CLIP_GRID};
use dssa_core::tensor::matmul;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn tensor_files_roundtrip_in_both_encodings() {
    let dir = tempfile::tempdir().unwrap();
    let t = gaussian_tensor(&mut rng(3), 5, 7, 2.0);
    for name in ["t.json", "t.bin"] {
        let path = dir.path().join(name);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        // binary stores f32
        assert!(back.max_abs_diff(&t).unwrap() < 1e-6, "{name}");
    }
}

#[test]
fn container_preserves_int8_matmul() {
    let x = gaussian_tensor(&mut rng(5), 3, 256, 1.0);
    let w = gaussian_tensor(&mut rng(6), 256, 128, 0.05);
    let qw = quant::quantize_weight_blocks(&w, &DEFAULT_CLIP_GRID).unwrap();
    let bytes = container::encode_container(&container::QuantizedContainer::Int8Blocks(qw.clone()));
    let container::QuantizedContainer::Int8Blocks(back) =
        container::decode_container(&bytes).unwrap()
    else {
        panic!("wrong container kind");
    };
    let train = quant::spike_encode(&quant::quantize_activation_groups(&x).unwrap());
    let a = quant::spike_matmul(&train, &qw).unwrap();
    let b = quant::spike_matmul(&train, &back).unwrap();
    assert_eq!(a.tile_sums, b.tile_sums);
}

#[test]
fn default_plan_cost_is_below_full_attention() {
    let model = CostModel::default();
    let plan = LayerPlan::default_plan();
    let full = LayerPlan::all_full(plan.num_layers());
    for n in [1usize << 17, 1 << 20] {
        let dssa = perf::stack_cost(&plan, n, &model).unwrap();
        let fa = perf::stack_cost(&full, n, &model).unwrap();
        assert!(dssa.prefill_flops < fa.prefill_flops);
        assert!(dssa.kv_bytes < fa.kv_bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spike_matmul_matches_dequantized_product(seed in any::<u64>(), rows in 1usize..4, tiles in 1usize..3) {
        let mut r = rng(seed);
        let x = gaussian_tensor(&mut r, rows, 128 * tiles, 1.0);
        let w = gaussian_tensor(&mut r, 128 * tiles, 64, 0.1);
        let qa = quant::quantize_activation_groups(&x).unwrap();
        let qw = quant::quantize_weight_blocks(&w, &DEFAULT_CLIP_GRID).unwrap();
        let out = quant::spike_matmul(&quant::spike_encode(&qa), &qw).unwrap();
        let reference = matmul(&qa.dequantize(), &qw.dequantize()).unwrap();
        let scale = reference.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(out.output.max_abs_diff(&reference).unwrap() <= 1e-9 * scale);
    }

    #[test]
    fn spike_code_recovers_int8_values(seed in any::<u64>()) {
        let x = integer_tensor(&mut rng(seed), 2, 128, 500);
        let qa = quant::quantize_activation_groups(&x).unwrap();
        prop_assert_eq!(quant::spike_decode(&quant::spike_encode(&qa)), qa.values);
    }

    #[test]
    fn moba_covering_all_blocks_is_full_attention(seed in any::<u64>(), blocks in 1usize..6, b in 1usize..5) {
        let inp = random_inputs(&mut rng(seed), blocks * b, 4);
        let out = moba::moba_forward(&inp, &MobaParams::new(b, blocks).unwrap()).unwrap();
        let full = attention::full_attention(&inp).unwrap();
        prop_assert!(out.output.max_abs_diff(&full).unwrap() < 1e-12);
    }

    #[test]
    fn swa_prefix_rows_are_independent_of_suffix(seed in any::<u64>(), n in 2usize..16, w in 1usize..8) {
        let inp = random_inputs(&mut rng(seed), n, 3);
        let keep = n / 2;
        let head = |t: &dssa_core::Tensor| dssa_core::Tensor::from_rows(
            &(0..keep).map(|i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let short = AttnInputs::new(head(&inp.q), head(&inp.k), head(&inp.v)).unwrap();
        let long_out = attention::swa(&inp, w).unwrap();
        let short_out = attention::swa(&short, w).unwrap();
        prop_assert!(head(&long_out).max_abs_diff(&short_out).unwrap() == 0.0);
    }

    #[test]
    fn stack_cost_grows_with_length(n in 1usize..100_000) {
        let model = CostModel::default();
        let plan = LayerPlan::default_plan();
        let a = perf::stack_cost(&plan, n, &model).unwrap();
        let b = perf::stack_cost(&plan, n + 1, &model).unwrap();
        prop_assert!(b.prefill_flops > a.prefill_flops);
        prop_assert!(b.kv_bytes >= a.kv_bytes);
    }

    #[test]
    fn fp8_encoding_is_monotone(a in -500.0f64..500.0, b in -500.0f64..500.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let dl = quant::fp8_decode(quant::fp8_encode(lo).unwrap());
        let dh = quant::fp8_decode(quant::fp8_encode(hi).unwrap());
        prop_assert!(dl <= dh);
    }
}
