mod common;

use icaunet::data::{generate_phantom, normalize};
use icaunet::losses::{loss_total, LossWeights};
use icaunet::model::{
    decode, encode, mix, model_forward, read_checkpoint, write_checkpoint, Architecture, ModelConfig, ParamStore,
    Session,
};
use icaunet::{Error, Tensor};
use proptest::prelude::*;

fn config(n: usize, m: usize, u: usize, extents: [usize; 3]) -> ModelConfig {
    ModelConfig {
        n,
        m,
        u,
        extents,
        ..ModelConfig::default()
    }
}

fn frame(extents: [usize; 3], seed: u64) -> Tensor<f32> {
    icaunet::gradcheck::random_input(&extents, seed).cast()
}

fn check_shapes(c: &ModelConfig) {
    let arch = Architecture::new(c).unwrap();
    let store = ParamStore::<f32>::init(&arch, 1);
    let frames: Vec<Tensor<f32>> = (0..3).map(|i| frame(c.extents, i)).collect();
    let mut sess = Session::eval(&store);
    let out = model_forward(&mut sess, &arch, [&frames[0], &frames[1], &frames[2]]).unwrap();
    let g = &sess.graph;
    let [d, h, w] = c.extents;
    assert_eq!(g.shape(out.a_n), [1, c.m, d / 2, h / 4, w / 4]);
    assert_eq!(g.shape(out.x), [1, c.u * c.m, d, h / 16, w / 16]);
    assert_eq!(out.logits.len(), c.n);
    assert_eq!(out.backbone.levels.len(), c.n + 1);
    for k in 0..=c.n {
        let [ld, lh, lw] = c.level_extents(k);
        assert_eq!([ld, lh, lw], [d / 2, h / (4 << (c.n - k)), w / (4 << (c.n - k))]);
        assert_eq!(g.shape(out.backbone.levels[k]), [1, c.channels(k), ld, lh, lw]);
    }
    for k in 1..=c.n {
        let [ld, lh, lw] = c.level_extents(k);
        let (cp, cn) = out.backbone.correlations[k - 1];
        assert_eq!(g.shape(cp), [1, 49, ld, lh, lw]);
        assert_eq!(g.shape(cn), [1, 49, ld, lh, lw]);
        assert_eq!(g.shape(out.backbone.reduced[k - 1]), [1, c.m, ld, lh, lw]);
        let scale = 1 << (c.n - k);
        assert_eq!(g.shape(out.logits[k - 1]), [1, c.num_classes, d, h / scale, w / scale]);
    }
}

#[test]
fn shape_sweep_grid() {
    for n in [2, 3, 4] {
        for m in [4, 8] {
            for extents in [[2, 32, 32], [4, 64, 64]] {
                let c = config(n, m, 4, extents);
                if c.validate().is_err() {
                    // (2,32,32) is too small for four halvings
                    assert_eq!((n, extents), (4, [2, 32, 32]));
                    continue;
                }
                check_shapes(&c);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn shape_contract_holds(
        n in 2usize..=3,
        m in prop::sample::select(vec![2usize, 4, 8]),
        u in 1usize..=4,
        extents in prop::sample::select(vec![[2usize, 32, 32], [4, 64, 64], [2, 64, 32]]),
    ) {
        check_shapes(&config(n, m, u, extents));
    }
}

#[test]
fn default_shapes() {
    let c = config(3, 32, 4, [8, 64, 64]);
    let arch = Architecture::new(&c).unwrap();
    assert_eq!(arch.mixing.kernel, [8, 4, 4]);
    assert_eq!(arch.mixing.stride, [2, 4, 4]);
    assert_eq!(arch.mixing.padding, [3, 0, 0]);
    check_shapes(&c);
}

#[test]
fn encoder_on_small_volume() {
    // encoder layers do not depend on extents; only the mixing geometry does
    let arch = Architecture::new(&config(2, 4, 2, [2, 32, 32])).unwrap();
    let store = ParamStore::<f32>::init(&arch, 0);
    let mut sess = Session::eval(&store);
    let f = sess.input(frame([2, 16, 16], 3).reshape(vec![1, 1, 2, 16, 16]).unwrap());
    let (a, x) = encode(&mut sess, &arch, f).unwrap();
    assert_eq!(sess.graph.shape(a), [1, 4, 1, 4, 4]);
    assert_eq!(sess.graph.shape(x), [1, 8, 2, 1, 1]);
    assert!(matches!(
        Architecture::new(&config(2, 4, 2, [2, 16, 16])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn contracting_and_expanding_channels() {
    let c = config(3, 8, 4, [8, 64, 64]);
    let arch = Architecture::new(&c).unwrap();
    assert_eq!(c.channels(3), 8);
    assert_eq!(c.channels(2), 16);
    assert_eq!(c.level_extents(3), [4, 16, 16]);
    assert_eq!(c.level_extents(2), [4, 8, 8]);
    assert_eq!(c.level_extents(1), [4, 4, 4]);
    let fuse = &arch.fuse[1].spec;
    assert_eq!((fuse.in_channels, fuse.out_channels), (16 + 49 + 49, 16));
    let up = &arch.up[1].spec;
    assert_eq!((up.in_channels, up.out_channels), (16, 8));
    assert_eq!(up.transposed_output_extents([4, 8, 8]).unwrap(), [4, 16, 16]);
    for (down, _) in &arch.contracting {
        assert_eq!(down.spec.stride, [1, 2, 2]);
    }
}

#[test]
fn unhalvable_extent_is_rejected() {
    let arch = Architecture::new(&config(2, 4, 2, [2, 32, 32])).unwrap();
    let store = ParamStore::<f32>::init(&arch, 0);
    let mut sess = Session::eval(&store);
    let a = sess.input(Tensor::zeros(vec![1, 4, 1, 1, 1]));
    let (down, _) = &arch.contracting[1];
    assert!(matches!(sess.apply(down, a), Err(Error::Shape(_))));
}

#[test]
fn identical_frames_give_identical_correlations() {
    let c = config(3, 4, 2, [2, 32, 32]);
    let arch = Architecture::new(&c).unwrap();
    let store = ParamStore::<f32>::init(&arch, 5);
    let f = frame(c.extents, 9);
    let mut sess = Session::eval(&store);
    let out = model_forward(&mut sess, &arch, [&f, &f, &f]).unwrap();
    for &(cp, cn) in &out.backbone.correlations {
        assert_eq!(sess.graph.value(cp), sess.graph.value(cn));
    }
}

#[test]
fn mixing_impulse_stamps_the_basis() {
    let c = config(3, 3, 2, [8, 64, 64]);
    let arch = Architecture::new(&c).unwrap();
    let (m, u) = (c.m, c.u);
    let mut coeffs = Tensor::<f64>::zeros(vec![1, m, 4, 16, 16]);
    let (ci, z, y, x) = (1, 1, 2, 3);
    coeffs.data_mut()[((ci * 4 + z) * 16 + y) * 16 + x] = 1.0;
    let basis = icaunet::gradcheck::random_input(&[1, u * m, 8, 4, 4], 2);
    let mut g = icaunet::Graph::new();
    let cv = g.constant(coeffs);
    let bv = g.constant(basis.clone());
    let out = mix(&mut g, cv, bv, &arch.mixing, m, u).unwrap();
    let out = g.value(out);
    assert_eq!(out.shape(), [1, u, 8, 64, 64]);
    let mut expected = vec![0.0; out.numel()];
    for o in 0..u {
        for kd in 0..8usize {
            let od = (z * 2 + kd) as isize - 3;
            if !(0..8).contains(&od) {
                continue;
            }
            for kh in 0..4 {
                for kw in 0..4 {
                    let src = (((ci * u + o) * 8 + kd) * 4 + kh) * 4 + kw;
                    let dst = ((o * 8 + od as usize) * 64 + y * 4 + kh) * 64 + x * 4 + kw;
                    expected[dst] = basis.data()[src];
                }
            }
        }
    }
    assert_eq!(out.data(), &expected[..]);
}

#[test]
fn zero_basis_gives_bias_logits() {
    let c = config(2, 4, 2, [2, 32, 32]);
    let arch = Architecture::new(&c).unwrap();
    let mut store = ParamStore::<f32>::init(&arch, 0);
    let bias = [0.5f32, -1.0, 2.0, 0.25];
    store
        .param_mut("dec2.out.b")
        .unwrap()
        .data_mut()
        .copy_from_slice(&bias);
    let mut sess = Session::eval(&store);
    let coeffs = sess.input(frame([4, 8, 8], 1).reshape(vec![1, 4, 1, 8, 8]).unwrap());
    let x = sess.input(Tensor::zeros(vec![1, 8, 2, 2, 2]));
    let y = decode(&mut sess, &arch, coeffs, x, 2).unwrap();
    let y = sess.graph.value(y);
    assert_eq!(y.shape(), [1, 4, 2, 32, 32]);
    for (cls, b) in bias.iter().enumerate() {
        let vol = 2 * 32 * 32;
        assert!(y.data()[cls * vol..(cls + 1) * vol].iter().all(|v| v == b));
    }
}

#[test]
fn zero_input_stays_finite() {
    let c = config(3, 8, 4, [8, 64, 64]);
    let arch = Architecture::new(&c).unwrap();
    let store = ParamStore::<f32>::init(&arch, 4);
    let z = Tensor::zeros(vec![8, 64, 64]);
    for training in [false, true] {
        let mut sess = Session::with_mode(&store, training, false);
        let out = model_forward(&mut sess, &arch, [&z, &z, &z]).unwrap();
        for &v in out.logits.iter().chain([&out.a_n, &out.x]) {
            assert!(sess.graph.value(v).is_finite());
        }
    }
}

#[test]
fn frame_extent_mismatch_is_shape_error() {
    let c = config(2, 4, 2, [2, 32, 32]);
    let arch = Architecture::new(&c).unwrap();
    let store = ParamStore::<f32>::init(&arch, 0);
    let f = frame([2, 32, 32], 0);
    let bad = frame([2, 64, 32], 0);
    let mut sess = Session::eval(&store);
    assert!(matches!(
        model_forward(&mut sess, &arch, [&f, &bad, &f]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn forward_is_deterministic_and_weights_are_shared() {
    let c = config(2, 4, 2, [2, 32, 32]);
    let arch = Architecture::new(&c).unwrap();
    let store = ParamStore::<f32>::init(&arch, 11);
    assert_eq!(store, ParamStore::<f32>::init(&arch, 11));
    let frames: Vec<Tensor<f32>> = (0..4).map(|i| frame(c.extents, i)).collect();
    let run = |t: usize| {
        let mut sess = Session::train(&store);
        let out = model_forward(&mut sess, &arch, [&frames[t], &frames[t + 1], &frames[t + 2]]).unwrap();
        let logits = sess.graph.value(out.logits[1]).clone();
        (logits, sess.param_vars().count())
    };
    let (a, count_a) = run(0);
    let (b, _) = run(0);
    let (_, count_b) = run(1);
    assert_eq!(a, b);
    assert_eq!(count_a, count_b);
    assert_eq!(count_a, store.params().count());
}

#[test]
fn every_parameter_receives_gradient() {
    let c = config(2, 4, 2, [2, 32, 32]);
    let arch = Architecture::new(&c).unwrap();
    let store = ParamStore::<f64>::init(&arch, 3);
    let seq = generate_phantom(1, 3, [2, 32, 32], [10.0, 1.5, 1.5]).unwrap();
    let frames: Vec<Tensor<f64>> = seq.frames.iter().map(|f| normalize(f).cast()).collect();
    let mut sess = Session::train(&store);
    let out = model_forward(&mut sess, &arch, [&frames[0], &frames[1], &frames[2]]).unwrap();
    let target = sess.input(frames[1].clone().reshape(vec![1, 1, 2, 32, 32]).unwrap());
    let loss = loss_total(&mut sess.graph, &arch, &out, &seq.labels[1], target, &LossWeights::defaults(2)).unwrap();
    let vars: Vec<(String, _)> = sess.param_vars().map(|(n, v)| (n.to_string(), v)).collect();
    let grads = sess.graph.backward(loss.total).unwrap();
    assert_eq!(vars.len(), store.params().count());
    for (name, v) in vars {
        let g = grads.get(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.max_abs() > 0.0, "{name} has an all-zero gradient");
    }
}

#[test]
fn every_output_depends_on_the_basis() {
    let c = config(3, 4, 2, [2, 32, 32]);
    let arch = Architecture::new(&c).unwrap();
    let store = ParamStore::<f64>::init(&arch, 8);
    let frames: Vec<Tensor<f64>> = (0..3).map(|i| icaunet::gradcheck::random_input(&c.extents, i)).collect();
    let mut sess = Session::with_mode(&store, false, true);
    let out = model_forward(&mut sess, &arch, [&frames[0], &frames[1], &frames[2]]).unwrap();
    for &y in &out.logits {
        let s = sess.graph.sum(y).unwrap();
        let grads = sess.graph.backward_retaining(s, &[out.x]).unwrap();
        let gx = grads.get(out.x).expect("gradient reaches X");
        assert!(gx.max_abs() > 0.0);
        sess.graph.reset_backward();
    }
}

fn trained_store(c: &ModelConfig) -> ParamStore<f32> {
    let arch = Architecture::new(c).unwrap();
    let mut store = ParamStore::<f32>::init(&arch, 21);
    // make buffers non-trivial so the round trip covers them
    let frames: Vec<Tensor<f32>> = (0..3).map(|i| frame(c.extents, i)).collect();
    let stats = {
        let mut sess = Session::train(&store);
        model_forward(&mut sess, &arch, [&frames[0], &frames[1], &frames[2]]).unwrap();
        sess.take_stats()
    };
    Session::commit_stats(&stats, &mut store).unwrap();
    store
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = config(2, 4, 2, [2, 32, 32]);
    let store = trained_store(&c);
    let bytes = write_checkpoint(&c, &store).unwrap();
    assert_eq!(&bytes[..4], b"ICAC");
    let (c2, s2) = read_checkpoint(&bytes).unwrap();
    assert_eq!(c2, c);
    for ((n1, t1), (n2, t2)) in store.tensors().zip(s2.tensors()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2, "{n1}");
    }
    assert_eq!(write_checkpoint(&c2, &s2).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.icac");
    icaunet::model::save_checkpoint(&path, &c, &store).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(icaunet::model::load_checkpoint(&path).unwrap().1, store);
}

#[test]
fn corrupted_checkpoints_are_format_errors() {
    let c = config(2, 4, 2, [2, 32, 32]);
    let store = ParamStore::<f32>::init(&Architecture::new(&c).unwrap(), 0);
    let bytes = write_checkpoint(&c, &store).unwrap();
    let offset = |r: icaunet::Result<_>| match r {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {:?}", other.map(|_: (ModelConfig, ParamStore<f32>)| ())),
    };

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(offset(read_checkpoint(&bad)), 0);

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(offset(read_checkpoint(&bad)), 4);

    for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(offset(read_checkpoint(&bytes[..cut])) <= cut as u64);
    }

    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(offset(read_checkpoint(&long)), bytes.len() as u64);

    // a parameter missing from a checkpoint that otherwise parses
    let mut partial = ParamStore::<f32>::default();
    for (name, t) in store.tensors().filter(|(n, _)| *n != "dec1.out.b") {
        partial.insert(name.to_string(), t.clone());
    }
    let bytes = write_checkpoint(&c, &partial).unwrap();
    offset(read_checkpoint(&bytes));
}
