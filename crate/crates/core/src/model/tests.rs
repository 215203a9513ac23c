use std::collections::BTreeMap;

use proptest::prelude::*;

use super::blocks::*;
use super::network::GATES;
use super::*;
use crate::autograd::{Graph, Var};
use crate::error::Error;
use crate::params::{Bound, ParamSpec, ParameterStore};
use crate::tensor::Tensor;

fn fill(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(7);
    Tensor::from_fn(shape.to_vec(), |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn store(specs: &[ParamSpec], seed: u64) -> ParameterStore<f64> {
    ParameterStore::initialize(specs, seed).unwrap()
}

/// Larger weights than the default init, so attention is far from uniform.
fn scaled_store(specs: &[ParamSpec], seed: u64, factor: f64) -> ParameterStore<f64> {
    let mut s = store(specs, seed);
    for (_, p) in s.iter_mut() {
        if p.trainable {
            p.tensor = p.tensor.map(|v| v * factor);
        }
    }
    s
}

fn zero(s: &mut ParameterStore<f64>, name: &str) {
    let t = s.tensor_mut(name).unwrap();
    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

/// Centered identity kernel `[k, k, c, c]`.
fn identity_kernel(k: usize, c: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![k, k, c, c]);
    let centre = (k / 2 * k + k / 2) * c * c;
    for i in 0..c {
        t.data_mut()[centre + i * c + i] = 1.0;
    }
    t
}

fn run(
    params: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    f: impl FnOnce(&mut Graph<f64>, &Bound, &[Var]) -> crate::Result<Var>,
) -> crate::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &p, &vars)?;
    Ok(g.value(out).clone())
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, rel: f64) {
    assert_eq!(a.shape(), b.shape());
    let scale = b.max_abs().max(1e-12);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= rel * scale, "index {i}: {x} vs {y}");
    }
}

fn t2(rows: &[&[f64]]) -> Tensor<f64> {
    let c = rows[0].len();
    Tensor::new(vec![rows.len(), c], rows.concat()).unwrap()
}

#[test]
fn attention_zero_query_averages_values() {
    let out = scaled_dot_attention(&t2(&[&[0.0]]), &t2(&[&[5.0], &[9.0]]), &t2(&[&[1.0], &[3.0]])).unwrap();
    assert_eq!(out.data(), &[2.0]);
}

#[test]
fn attention_identical_keys_average_values() {
    let k = t2(&[&[0.3, -1.0, 2.0, 0.5] as &[f64]; 3]);
    let v = t2(&[&[1.0, 0.0] as &[f64]; 3]);
    let out = scaled_dot_attention(&t2(&[&[4.0, 1.0, -2.0, 7.0]]), &k, &v).unwrap();
    assert!((out.data()[0] - 1.0).abs() < 1e-15 && out.data()[1] == 0.0);
}

#[test]
fn attention_matches_hand_evaluated_softmax() {
    let out = scaled_dot_attention(&t2(&[&[10.0]]), &t2(&[&[1.0], &[-1.0]]), &t2(&[&[1.0], &[0.0]])).unwrap();
    let (a, b) = (10.0f64.exp(), (-10.0f64).exp());
    let expected = a / (a + b);
    assert!((out.data()[0] - expected).abs() < 1e-15);
    assert!((expected - 1.0 / (1.0 + (-20.0f64).exp())).abs() < 1e-15);
}

#[test]
fn attention_errors_name_operand() {
    let q = t2(&[&[1.0, 2.0]]);
    let err = scaled_dot_attention(&q, &t2(&[&[1.0]]), &t2(&[&[1.0]])).unwrap_err();
    assert!(err.to_string().contains("keys"), "{err}");
    let err = scaled_dot_attention(&q, &t2(&[&[1.0, 0.0]]), &t2(&[&[1.0], &[2.0]])).unwrap_err();
    assert!(err.to_string().contains("values"), "{err}");
    let empty = Tensor::new(vec![1, 0], vec![]).unwrap();
    let err = scaled_dot_attention(&empty, &Tensor::new(vec![2, 0], vec![]).unwrap(), &t2(&[&[1.0], &[2.0]]));
    assert!(matches!(err, Err(Error::Config(_))));
}

fn tipb(channels: usize, heads: usize, len: usize) -> (Tipb, Vec<ParamSpec>) {
    let b = Tipb::new("tipb", channels, heads, len, 2);
    let mut specs = Vec::new();
    b.specs(&mut specs);
    (b, specs)
}

#[test]
fn tipb_preserves_shape() {
    let (b, specs) = tipb(4, 2, 6);
    let out = run(&store(&specs, 1), &[fill(&[1, 8, 8, 4], 2)], |g, p, v| b.forward(g, p, v[0])).unwrap();
    assert_eq!(out.shape(), &[1, 8, 8, 4]);
    assert!(out.all_finite());
}

#[test]
fn tipb_with_zero_value_and_ffn_output_is_residual_input() {
    let (b, specs) = tipb(4, 1, 4);
    let mut s = scaled_store(&specs, 3, 30.0);
    zero(&mut s, "tipb.v.w");
    zero(&mut s, "tipb.ffn.fc2.w");
    // Value path zero: summary is zero, the output projection sees zeros and
    // adds only its (zero) bias; the FFN contributes zero through fc2.
    let x = fill(&[2, 8, 6, 4], 4);
    let out = run(&s, std::slice::from_ref(&x), |g, p, v| b.forward(g, p, v[0])).unwrap();
    assert_eq!(out, x);
}

#[test]
fn tipb_constant_patch_gives_constant_output() {
    let (b, specs) = tipb(4, 2, 5);
    let s = scaled_store(&specs, 5, 20.0);
    // Each 4×4 patch of an 8×8 map holds one constant vector.
    let vals = fill(&[4, 4], 6);
    let x = Tensor::from_fn(vec![1, 8, 8, 4], |i| {
        let (y, xx, c) = (i / 32, (i / 4) % 8, i % 4);
        vals.data()[(y / 4 * 2 + xx / 4) * 4 + c]
    });
    let out = run(&s, &[x], |g, p, v| b.forward(g, p, v[0])).unwrap();
    for y in 0..8 {
        for xx in 0..8 {
            for c in 0..4 {
                let anchor = out.at4(0, y / 4 * 4, xx / 4 * 4, c);
                assert!((out.at4(0, y, xx, c) - anchor).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn tipb_rejects_odd_dims() {
    let (b, specs) = tipb(4, 1, 4);
    let err = run(&store(&specs, 1), &[fill(&[1, 7, 8, 4], 2)], |g, p, v| b.forward(g, p, v[0])).unwrap_err();
    assert!(err.to_string().contains("tipb"), "{err}");
}

#[test]
fn tipb_query_is_trainable() {
    let (_, specs) = tipb(4, 1, 4);
    let s = store(&specs, 1);
    let q = s.get("tipb.query").unwrap();
    assert!(q.trainable);
    assert_eq!(q.tensor.shape(), &[4, 4]);
}

fn default_net() -> Network {
    Network::new(NetworkConfig::default()).unwrap()
}

#[test]
fn encoder_stage_shapes_and_zero_propagation() {
    let net = default_net();
    let s: ParameterStore<f64> = net.init_parameters(1).unwrap();
    let out = run(&s, &[fill(&[1, 64, 64, 16], 1)], |g, p, v| net.encoder_stage_forward(g, p, v[0], 0)).unwrap();
    assert_eq!(out.shape(), &[1, 32, 32, 32]);
    let out = run(&s, &[fill(&[1, 32, 32, 32], 1)], |g, p, v| net.encoder_stage_forward(g, p, v[0], 1)).unwrap();
    assert_eq!(out.shape(), &[1, 16, 16, 64]);
    let out = run(&s, &[Tensor::zeros(vec![1, 32, 32, 32])], |g, p, v| net.encoder_stage_forward(g, p, v[0], 1)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    let err = run(&s, &[fill(&[1, 8, 8, 16], 1)], |g, p, v| net.encoder_stage_forward(g, p, v[0], 4)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn tqf(widths: [usize; 3], cq: usize) -> (TaskQueryFuse, Vec<ParamSpec>) {
    let b = TaskQueryFuse::new("tqf", widths, cq);
    let mut specs = Vec::new();
    b.specs(&mut specs);
    (b, specs)
}

#[test]
fn task_query_fuse_zero_in_zero_out_and_shape() {
    let (b, specs) = tqf([32, 64, 128], 16);
    let s = store(&specs, 2);
    let zeros = [
        Tensor::zeros(vec![2, 32, 32, 32]),
        Tensor::zeros(vec![2, 16, 16, 64]),
        Tensor::zeros(vec![2, 8, 8, 128]),
    ];
    let out = run(&s, &zeros, |g, p, v| b.forward(g, p, v)).unwrap();
    assert_eq!(out.shape(), &[2, 8, 8, 16]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn task_query_fuse_identity_kernels_return_third_stage() {
    let (b, specs) = tqf([4, 4, 4], 4);
    let mut s = store(&specs, 3);
    zero(&mut s, "tqf.c7.w");
    zero(&mut s, "tqf.c5.w");
    s.set("tqf.c3.w", identity_kernel(3, 4)).unwrap();
    s.set("tqf.out.w", identity_kernel(3, 4)).unwrap();
    let t3 = fill(&[1, 4, 4, 4], 9);
    let ins = [fill(&[1, 16, 16, 4], 7), fill(&[1, 8, 8, 4], 8), t3.clone()];
    let out = run(&s, &ins, |g, p, v| b.forward(g, p, v)).unwrap();
    assert_close(&out, &t3, 1e-14);
}

#[test]
fn task_query_fuse_needs_three_stages() {
    let (b, specs) = tqf([4, 4, 4], 4);
    let err = run(&store(&specs, 1), &[fill(&[1, 8, 8, 4], 1)], |g, p, v| b.forward(g, p, v)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn tsg(c: usize, cq: usize, heads: usize) -> (TaskSequenceGenerator, Vec<ParamSpec>) {
    let b = TaskSequenceGenerator::new("tsg", c, cq, heads, 8, 2);
    let mut specs = Vec::new();
    b.specs(&mut specs);
    (b, specs)
}

#[test]
fn tsg_shape_and_residual_identity() {
    let (b, specs) = tsg(32, 16, 2);
    let mut s = scaled_store(&specs, 4, 10.0);
    let ins = [fill(&[1, 8, 8, 32], 1), fill(&[1, 8, 8, 16], 2)];
    let out = run(&s, &ins, |g, p, v| b.forward(g, p, v[0], v[1])).unwrap();
    assert_eq!(out.shape(), &[1, 8, 8, 32]);
    zero(&mut s, "tsg.v.w");
    zero(&mut s, "tsg.ffn.fc2.w");
    let out = run(&s, &ins, |g, p, v| b.forward(g, p, v[0], v[1])).unwrap();
    assert_eq!(out, ins[0]);
}

#[test]
fn tsg_constant_features_ignore_task_query() {
    let (b, specs) = tsg(8, 4, 2);
    let s = scaled_store(&specs, 5, 10.0);
    let row = fill(&[8], 3);
    let x = Tensor::from_fn(vec![1, 16, 16, 8], |i| row.data()[i % 8]);
    let out = run(&s, &[x, fill(&[1, 4, 4, 4], 6)], |g, p, v| b.forward(g, p, v[0], v[1])).unwrap();
    for i in 0..out.len() {
        assert!((out.data()[i] - out.data()[i % 8]).abs() < 1e-12);
    }
}

#[test]
fn tsg_rejects_task_channel_mismatch() {
    let (b, specs) = tsg(8, 4, 2);
    let err = run(&store(&specs, 1), &[fill(&[1, 8, 8, 8], 1), fill(&[1, 8, 8, 5], 2)], |g, p, v| {
        b.forward(g, p, v[0], v[1])
    })
    .unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

fn spectral(c: usize) -> (SpectralTransform, ParameterStore<f64>) {
    let b = SpectralTransform::new("st", c);
    let mut specs = Vec::new();
    b.specs(&mut specs);
    let mut s = store(&specs, 1);
    s.set("st.conv.w", identity_kernel(1, 2 * c)).unwrap();
    (b, s)
}

fn spectral_eval(b: &SpectralTransform, s: &ParameterStore<f64>, x: &Tensor<f64>) -> crate::Result<Tensor<f64>> {
    let mut ctx = ForwardCtx::eval();
    ctx.spectral_relu = false;
    run(s, std::slice::from_ref(x), |g, p, v| b.forward(g, p, v[0], &mut ctx))
}

#[test]
fn spectral_identity_hook_round_trips() {
    for (h, w) in [(8, 8), (16, 16), (17, 16), (8, 9)] {
        let (b, s) = spectral(3);
        let x = fill(&[2, h, w, 3], (h * w) as u64);
        let out = spectral_eval(&b, &s, &x).unwrap();
        assert_close(&out, &x, 1e-5);
    }
}

#[test]
fn spectral_doubling_dc_doubles_constant() {
    let (b, mut s) = spectral(2);
    s.set("st.conv.w", identity_kernel(1, 4).map(|v| 2.0 * v)).unwrap();
    let x = Tensor::full(vec![1, 8, 8, 2], 0.37);
    let out = spectral_eval(&b, &s, &x).unwrap();
    let eps_gain = 1.0 / (1.0f64 + BN_EPS).sqrt();
    for &v in out.data() {
        assert!((v - 2.0 * 0.37 * eps_gain).abs() < 1e-12, "{v}");
    }
}

#[test]
fn spectral_shape_and_errors() {
    let (b, s) = spectral(8);
    let out = spectral_eval(&b, &s, &fill(&[1, 16, 16, 8], 1)).unwrap();
    assert_eq!(out.shape(), &[1, 16, 16, 8]);
    let mut bad = fill(&[1, 4, 4, 8], 2);
    bad.data_mut()[5] = f64::NAN;
    assert!(matches!(spectral_eval(&b, &s, &bad), Err(Error::Numeric(_))));
    assert!(matches!(spectral_eval(&b, &s, &fill(&[1, 1, 4, 8], 3)), Err(Error::Precondition(_))));
}

#[test]
fn spectral_training_mode_reports_batch_stats() {
    let (b, s) = spectral(2);
    let mut ctx = ForwardCtx::train();
    run(&s, &[fill(&[2, 8, 8, 2], 4)], |g, p, v| b.forward(g, p, v[0], &mut ctx)).unwrap();
    assert_eq!(ctx.bn_stats.len(), 1);
    assert_eq!(ctx.bn_stats[0].0, "st.bn");
    assert_eq!(ctx.bn_stats[0].1.mean.len(), 4);
}

fn ffc(c: usize, ratio: f64) -> (Ffc, ParameterStore<f64>) {
    let b = Ffc::new("ffc", c, ratio).unwrap();
    let mut specs = Vec::new();
    b.specs(&mut specs);
    let s = store(&specs, 2);
    (b, s)
}

#[test]
fn ffc_preserves_shape() {
    let (b, s) = ffc(8, 0.5);
    let mut ctx = ForwardCtx::train();
    let out = run(&s, &[fill(&[1, 16, 16, 8], 1)], |g, p, v| b.forward(g, p, v[0], &mut ctx)).unwrap();
    assert_eq!(out.shape(), &[1, 16, 16, 8]);
}

#[test]
fn ffc_ratio_zero_is_plain_conv() {
    let (b, s) = ffc(8, 0.0);
    assert_eq!(b.split(), (8, 0));
    let x = fill(&[1, 8, 8, 8], 3);
    let out = run(&s, std::slice::from_ref(&x), |g, p, v| b.forward(g, p, v[0], &mut ForwardCtx::eval())).unwrap();
    let expected = run(&s, &[x], |g, p, v| {
        g.conv2d(v[0], p.get("ffc.ll.w")?, Some(p.get("ffc.ll.b")?), 1, 1)
    })
    .unwrap();
    assert_eq!(out, expected);
}

#[test]
fn ffc_identity_branches_return_input() {
    let (b, mut s) = ffc(8, 0.5);
    s.set("ffc.ll.w", identity_kernel(3, 4)).unwrap();
    s.set("ffc.st.conv.w", identity_kernel(1, 8)).unwrap();
    zero(&mut s, "ffc.gl.w");
    zero(&mut s, "ffc.lg.w");
    let x = fill(&[1, 16, 16, 8], 4);
    let mut ctx = ForwardCtx::eval();
    ctx.spectral_relu = false;
    let out = run(&s, std::slice::from_ref(&x), |g, p, v| b.forward(g, p, v[0], &mut ctx)).unwrap();
    assert_close(&out, &x, 1e-5);
}

#[test]
fn ffc_rejects_degenerate_split() {
    assert!(matches!(Ffc::new("ffc", 8, 0.01), Err(Error::Config(_))));
}

#[test]
fn mixup_examples() {
    let a = fill(&[1, 2, 3, 4], 1);
    let b = fill(&[1, 2, 3, 4], 2);
    let m = adaptive_mixup(&a, &b, 0.0).unwrap();
    for ((&m, &x), &y) in m.data().iter().zip(a.data()).zip(b.data()) {
        assert_eq!(m, 0.5 * x + 0.5 * y);
    }
    let m = adaptive_mixup(&a, &b, 30.0).unwrap();
    assert_close(&m, &a, 1e-9);
    let m = adaptive_mixup(&a, &a, -3.7).unwrap();
    assert_close(&m, &a, 1e-15);
    assert!(adaptive_mixup(&a, &fill(&[1, 2, 3, 3], 3), 0.0).is_err());
}

proptest! {
    #[test]
    fn mixup_stays_in_convex_hull(
        theta in -40.0f64..40.0,
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..64),
    ) {
        let n = pairs.len();
        let a = Tensor::new(vec![n], pairs.iter().map(|p| p.0).collect()).unwrap();
        let b = Tensor::new(vec![n], pairs.iter().map(|p| p.1).collect()).unwrap();
        let m = adaptive_mixup(&a, &b, theta).unwrap();
        for ((&m, &x), &y) in m.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(m >= x.min(y) - 1e-12 && m <= x.max(y) + 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_normalized(seed in 0u64..1000, heads in 1usize..3) {
        let (b, specs) = tipb(4, heads, 3);
        let s = scaled_store(&specs, seed, 25.0);
        let (t, tspecs) = tsg(4, 2, heads);
        let ts = scaled_store(&tspecs, seed + 1, 25.0);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(fill(&[1, 8, 4, 4], seed));
        b.forward(&mut g, &p, x).unwrap();
        let p = ts.bind(&mut g);
        let q = g.constant(fill(&[1, 2, 2, 2], seed + 2));
        t.forward(&mut g, &p, x, q).unwrap();
        let mut rows = 0;
        for w in g.softmax_outputs() {
            let width = *w.shape().last().unwrap();
            for row in w.data().chunks(width) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                rows += 1;
            }
        }
        prop_assert!(rows > 0);
    }
}

#[test]
fn network_forward_shape_range_and_determinism() {
    let cfg = NetworkConfig::default();
    let params = init_parameters(&cfg, 11).unwrap();
    let x = fill(&[1, 64, 64, 3], 1).map(|v| 0.5 + 0.5 * v).cast::<f32>();
    let a = network_forward(&x, &params, &cfg).unwrap();
    assert_eq!(a.shape(), &[1, 64, 64, 3]);
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let again = init_parameters(&cfg, 11).unwrap();
    let b = network_forward(&x, &again, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn network_stage_outputs_follow_pyramid() {
    let net = default_net();
    let s: ParameterStore<f64> = net.init_parameters(1).unwrap();
    let mut g = Graph::new();
    let p = s.bind(&mut g);
    let x = g.constant(fill(&[1, 64, 32, 3], 2));
    let out = net.forward(&mut g, &p, x, &mut ForwardCtx::train()).unwrap();
    for (i, t) in out.stage_tokens.iter().enumerate() {
        let c = net.config().channels(i + 1);
        assert_eq!(g.shape(*t), &[1, 64 >> (i + 1), 32 >> (i + 1), c]);
    }
    assert_eq!(g.shape(out.task_query), &[1, 8, 4, 16]);
}

#[test]
fn network_requires_padded_input() {
    let cfg = NetworkConfig::default();
    let params = init_parameters(&cfg, 1).unwrap();
    let err = network_forward(&Tensor::zeros(vec![1, 60, 60, 3]), &params, &cfg).unwrap_err();
    assert!(matches!(err, Error::Precondition(ref m) if m.contains("pad")), "{err}");
}

#[test]
fn restore_handles_arbitrary_sizes() {
    let cfg = NetworkConfig::default();
    let params = init_parameters(&cfg, 2).unwrap();
    for (h, w) in [(8, 8), (60, 60), (33, 17)] {
        let x = fill(&[1, h, w, 3], (h + w) as u64).map(|v| 0.5 + 0.4 * v).cast::<f32>();
        let y = restore(&x, &params, &cfg).unwrap();
        assert_eq!(y.shape(), &[1, h, w, 3]);
    }
}

#[test]
fn zero_head_makes_network_identity() {
    let cfg = NetworkConfig::default();
    let mut params = init_parameters(&cfg, 2).unwrap();
    for name in ["head.w", "head.b"] {
        params.tensor_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = fill(&[1, 32, 32, 3], 5).map(|v| 0.5 + 0.5 * v).cast::<f32>();
    assert_eq!(network_forward(&x, &params, &cfg).unwrap(), x);
}

#[test]
fn init_is_seeded_and_gates_start_at_half() {
    let cfg = NetworkConfig::default();
    let a = init_parameters(&cfg, 3).unwrap();
    assert_eq!(a, init_parameters(&cfg, 3).unwrap());
    let theta = a.tensor(GATES).unwrap();
    assert_eq!(theta.shape(), &[cfg.mixup_count()]);
    assert!(theta.data().iter().all(|&t| crate::autograd::kernels::sigmoid(t) == 0.5));
    let bad = NetworkConfig {
        heads: 3,
        ..Default::default()
    };
    let err = init_parameters(&bad, 3).unwrap_err().to_string();
    assert!(err.contains("heads"), "{err}");
}

/// A tiny composite exercising the learnable query, a gate, the task
/// sequence generator and the spectral conv: x → TIPB → FFC → TSG → mix.
struct Tiny {
    tipb: Tipb,
    ffc: Ffc,
    tsg: TaskSequenceGenerator,
    specs: Vec<ParamSpec>,
}

impl Tiny {
    fn new() -> Self {
        let tipb = Tipb::new("tipb", 4, 1, 4, 2);
        let ffc = Ffc::new("ffc", 4, 0.5).unwrap();
        let tsg = TaskSequenceGenerator::new("tsg", 4, 4, 1, 4, 2);
        let mut specs = Vec::new();
        tipb.specs(&mut specs);
        ffc.specs(&mut specs);
        tsg.specs(&mut specs);
        specs.push(ParamSpec::bias(GATES, 1));
        Self { tipb, ffc, tsg, specs }
    }

    fn loss(&self, s: &ParameterStore<f64>, x: &Tensor<f64>, target: &Tensor<f64>) -> (f64, BTreeMap<String, Vec<f64>>) {
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let xv = g.constant(x.clone());
        let t = g.constant(target.clone());
        let mut ctx = ForwardCtx::train();
        let a = self.tipb.forward(&mut g, &p, xv).unwrap();
        let b = self.ffc.forward(&mut g, &p, a, &mut ctx).unwrap();
        let c = self.tsg.forward(&mut g, &p, b, a).unwrap();
        let m = g.mix(a, c, p.get(GATES).unwrap(), 0).unwrap();
        let l = g.charbonnier(m, t, 1e-3).unwrap();
        let value = g.value(l).data()[0];
        let grads = g.backward(l).unwrap();
        let by_name = p
            .iter()
            .filter_map(|(k, v)| grads.get(v).map(|d| (k.to_string(), d.to_vec())))
            .collect();
        (value, by_name)
    }
}

#[test]
fn gradient_audit_on_tiny_config() {
    let tiny = Tiny::new();
    let mut s = scaled_store(&tiny.specs, 8, 20.0);
    s.set(GATES, Tensor::new(vec![1], vec![0.3]).unwrap()).unwrap();
    let x = fill(&[1, 8, 8, 4], 1);
    let target = fill(&[1, 8, 8, 4], 2);
    let (_, grads) = tiny.loss(&s, &x, &target);
    let audited = ["tipb.query", GATES, "ffc.st.conv.w", "tsg.q.w", "tsg.k.w", "tsg.v.w", "tsg.o.w"];
    let h = 1e-4;
    let mut checked = 0;
    for name in audited {
        let analytic = &grads[name];
        for (j, &a) in analytic.iter().enumerate() {
            if a.abs() <= 1e-6 {
                continue;
            }
            let mut plus = s.clone();
            plus.tensor_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = s.clone();
            minus.tensor_mut(name).unwrap().data_mut()[j] -= h;
            let fd = (tiny.loss(&plus, &x, &target).0 - tiny.loss(&minus, &x, &target).0) / (2.0 * h);
            let rel = (fd - a).abs() / a.abs().max(fd.abs());
            assert!(rel < 1e-3, "{name}[{j}]: analytic {a} vs numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked > 50, "only {checked} coordinates audited");
}
