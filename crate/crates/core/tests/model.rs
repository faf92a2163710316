use advxfer_core::datagen::{catalog, generate_target_dataset, Dataset, SplitConfig};
use advxfer_core::model::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, MicroResNet, Mode,
    Provenance,
};
use advxfer_core::strategies::{train, Domain, PhaseInfo, PhaseName, TrainConfig};
use advxfer_core::tensor::{finite_diff_check, Graph, Tensor};
use advxfer_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WIDTHS: [usize; 4] = [16, 32, 64, 128];

fn images<T: advxfer_core::tensor::Scalar>(n: usize, size: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..n * 3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::<f64>::from_f64(&[n, 3, size, size], &v).unwrap().cast()
}

fn tiny_target() -> Dataset {
    let split = SplitConfig::builtin("s1", 6).unwrap();
    generate_target_dataset(&catalog(), &split, 3).unwrap().0
}

fn one_epoch(model: &mut MicroResNet<f32>, ds: &Dataset) {
    let cfg = TrainConfig::finetune(0).with_epochs(1);
    let info = PhaseInfo {
        phase: PhaseName::Finetune,
        domain: Domain::Target,
    };
    train(model, ds, &cfg, None, info).unwrap();
}

fn trained_model() -> MicroResNet<f32> {
    let mut m = MicroResNet::build(&WIDTHS, 4, 5).unwrap();
    m.freeze_prefix(2).unwrap();
    one_epoch(&mut m, &tiny_target());
    m
}

#[test]
fn same_seed_same_model() {
    let a = MicroResNet::<f32>::build(&WIDTHS, 4, 11).unwrap();
    let b = MicroResNet::<f32>::build(&WIDTHS, 4, 11).unwrap();
    let c = MicroResNet::<f32>::build(&WIDTHS, 4, 12).unwrap();
    assert!(a.state_bit_eq(&b));
    assert!(!a.state_bit_eq(&c));
}

#[test]
fn logits_shape() {
    let m = MicroResNet::<f32>::build(&WIDTHS, 4, 0).unwrap();
    let out = m.predict(&images(1, 64, 1)).unwrap();
    assert_eq!(out.dims(), &[1, 4]);
    assert!(out.is_finite());
}

#[test]
fn parameter_count_by_layer() {
    // stem conv3x3 + bn, then per block: conv3x3+bn, conv3x3+bn, 1x1 projection+bn; head.
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let [w1, w2, w3, w4] = WIDTHS;
    let expected = conv(3, w1, 3)
        + conv(w1, w1, 3) + conv(w1, w1, 3) + conv(w1, w1, 1)
        + conv(w1, w2, 3) + conv(w2, w2, 3) + conv(w1, w2, 1)
        + conv(w2, w3, 3) + conv(w3, w3, 3) + conv(w2, w3, 1)
        + conv(w3, w4, 3) + conv(w4, w4, 3) + conv(w3, w4, 1)
        + w4 * 10 + 10;
    let m = MicroResNet::<f32>::build(&WIDTHS, 10, 0).unwrap();
    assert_eq!(m.num_parameters(), expected);
    assert_eq!(advxfer_core::model::parameter_count(&WIDTHS, 10), expected);
    assert!(expected < 1_000_000);
}

#[test]
fn build_rejects_bad_config() {
    assert!(matches!(MicroResNet::<f32>::build(&[16, 0, 64, 128], 4, 0), Err(Error::Config(_))));
    assert!(matches!(MicroResNet::<f32>::build(&[16, 32, 64], 4, 0), Err(Error::Config(_))));
    assert!(matches!(MicroResNet::<f32>::build(&WIDTHS, 1, 0), Err(Error::Config(_))));
}

#[test]
fn freeze_flags() {
    let mut m = MicroResNet::<f32>::build(&WIDTHS, 4, 0).unwrap();
    m.freeze_prefix(0).unwrap();
    assert!(m.named_parameters_mut().iter().all(|(_, t)| t.requires_grad));
    m.freeze_prefix(4).unwrap();
    for (name, t) in m.named_parameters_mut() {
        assert_eq!(t.requires_grad, name.starts_with("head."), "{name}");
    }
    assert!(matches!(m.freeze_prefix(5), Err(Error::Config(_))));
}

fn changed_tensors(before: &MicroResNet<f32>, after: &MicroResNet<f32>) -> Vec<String> {
    before
        .named_tensors()
        .into_iter()
        .zip(after.named_tensors())
        .filter(|((_, a), (_, b))| !a.bit_eq(b))
        .map(|((n, _), _)| n)
        .collect()
}

#[test]
fn frozen_prefix_survives_training() {
    let ds = tiny_target();
    let base = MicroResNet::<f32>::build(&WIDTHS, 4, 7).unwrap();

    let mut all_frozen = base.clone();
    all_frozen.freeze_prefix(4).unwrap();
    one_epoch(&mut all_frozen, &ds);
    let changed = changed_tensors(&base, &all_frozen);
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| n.starts_with("head.")), "{changed:?}");

    let mut l1 = base.clone();
    l1.freeze_prefix(1).unwrap();
    one_epoch(&mut l1, &ds);
    let changed = changed_tensors(&base, &l1);
    assert!(changed.iter().all(|n| !n.starts_with("stem.") && !n.starts_with("blocks.0.")), "{changed:?}");
    assert!(changed.iter().any(|n| n.starts_with("blocks.1.")), "{changed:?}");
    assert!(changed.iter().any(|n| n.contains("running_mean")), "{changed:?}");
}

#[test]
fn head_replacement_keeps_backbone() {
    let source = MicroResNet::<f32>::build(&WIDTHS, 10, 3).unwrap();
    let x = images(2, 64, 4);
    assert_eq!(source.predict(&x).unwrap().dims(), &[2, 10]);

    let mut a = source.clone();
    a.replace_head(4, 99).unwrap();
    let mut b = source.clone();
    b.replace_head(4, 99).unwrap();
    let mut c = source.clone();
    c.replace_head(4, 100).unwrap();

    assert_eq!(a.predict(&x).unwrap().dims(), &[2, 4]);
    assert!(a.state_bit_eq(&b));
    assert!(!a.head.weight.bit_eq(&c.head.weight));
    for ((name, s), (_, t)) in source.named_tensors().into_iter().zip(a.named_tensors()) {
        if !name.starts_with("head.") {
            assert!(s.bit_eq(t), "{name}");
        }
    }
    assert!(matches!(a.replace_head(1, 0), Err(Error::Config(_))));
}

#[test]
fn checkpoint_roundtrip_is_identity() {
    let m = trained_model();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.mrv"), dir.path().join("b.mrv"));
    let prov = Provenance::new().with("strategy", "ST_FT").with("train.epsilon", 0.5);
    save_checkpoint(&m, &prov, &p1).unwrap();
    let (loaded, loaded_prov) = load_checkpoint::<f32>(&p1).unwrap();
    assert!(loaded.state_bit_eq(&m));
    assert_eq!(loaded.frozen_prefix(), 2);
    assert_eq!(loaded, m);
    assert_eq!(loaded_prov.get("train.epsilon"), Some("0.5"));
    save_checkpoint(&loaded, &loaded_prov, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

fn encoded() -> Vec<u8> {
    let m = MicroResNet::<f32>::build(&[4, 4, 4, 4], 3, 0).unwrap();
    encode_checkpoint(&m.to_checkpoint(&Provenance::new().with("k", "v")))
}

#[test]
fn corrupt_magic_is_format_error() {
    let mut bytes = encoded();
    bytes[0] = b'X';
    assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(CheckpointError::BadMagic(_))));
}

#[test]
fn version_mismatch_detected() {
    let mut bytes = encoded();
    bytes[4] = 9;
    assert_eq!(
        decode_checkpoint::<f32>(&bytes).unwrap_err(),
        CheckpointError::VersionMismatch { found: 9 }
    );
}

#[test]
fn flipped_payload_byte_fails_crc() {
    let mut bytes = encoded();
    let mid = bytes.len() - 40;
    bytes[mid] ^= 0x10;
    assert!(matches!(
        decode_checkpoint::<f32>(&bytes),
        Err(CheckpointError::ChecksumMismatch { .. })
    ));
}

#[test]
fn truncation_detected() {
    let bytes = encoded();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(decode_checkpoint::<f32>(&bytes[..cut]), Err(CheckpointError::Truncated(_))),
            "cut at {cut}"
        );
    }
}

#[test]
fn dtype_mismatch_detected() {
    let bytes = encoded();
    assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(CheckpointError::DtypeMismatch { .. })));
}

#[test]
fn failed_load_leaves_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mrv");
    let mut bytes = encoded();
    bytes[1] = 0;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));
}

#[test]
fn eval_is_batch_independent() {
    let m = trained_model();
    let x = images::<f32>(6, 64, 21);
    let batched = m.predict(&x).unwrap();
    for i in 0..6 {
        let single = m.predict(&x.slice_outer(i, 1).unwrap()).unwrap();
        let row = &batched.values()[i * 4..(i + 1) * 4];
        let scale = row.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        for (a, b) in single.values().iter().zip(row) {
            assert!((a - b).abs() <= 1e-5 * scale, "sample {i}: {a} vs {b}");
        }
    }
}

#[test]
fn eval_is_deterministic() {
    let m = trained_model();
    let x = images::<f32>(3, 64, 22);
    assert!(m.predict(&x).unwrap().bit_eq(&m.predict(&x).unwrap()));
}

fn small_model() -> MicroResNet<f64> {
    let mut m = MicroResNet::<f64>::build(&[3, 4, 4, 5], 3, 31).unwrap();
    // Non-trivial running statistics for the frozen stem.
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for v in m.stem.stats.mean.values_mut() {
        *v = rng.random_range(-0.2..0.2);
    }
    for v in m.stem.stats.var.values_mut() {
        *v = rng.random_range(0.5..1.5);
    }
    m.freeze_prefix(1).unwrap();
    m
}

fn train_loss(m: &MicroResNet<f64>, g: &mut Graph<f64>, x: advxfer_core::tensor::Var, labels: &[usize]) -> advxfer_core::tensor::Var {
    let pass = m.forward(g, x, Mode::Train, false).unwrap();
    g.softmax_cross_entropy(pass.logits, labels).unwrap()
}

#[test]
fn composed_model_input_gradient() {
    let m = small_model();
    let x = images::<f64>(3, 16, 33);
    let labels = [0, 2, 1];
    let check = finite_diff_check(|g, xv| Ok(train_loss(&m, g, xv, &labels)), &x, 1e-5).unwrap();
    assert!(check.coords_checked >= 50);
    assert!(check.max_rel_err < 1e-6, "{check:?}");
}

#[test]
fn composed_model_parameter_gradients() {
    let mut m = small_model();
    let x = images::<f64>(3, 16, 34);
    let labels = [1, 0, 2];
    let loss_of = |m: &MicroResNet<f64>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let l = train_loss(m, &mut g, xv, &labels);
        g.value(l).values()[0]
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let pass = m.forward(&mut g, xv, Mode::Train, true).unwrap();
    let loss = g.softmax_cross_entropy(pass.logits, &labels).unwrap();
    let mut grads = g.backward(loss).unwrap();
    m.collect_gradients(&pass, &mut grads);

    let names: Vec<String> = m.named_parameters_mut().into_iter().map(|(n, _)| n).collect();
    let step = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let (mut max_err, mut checked) = (0.0f64, 0);
    for (ti, name) in names.iter().enumerate() {
        let (numel, analytic, trainable) = {
            let params = m.named_parameters_mut();
            let t = &params[ti].1;
            (t.numel(), t.grad.clone(), t.requires_grad)
        };
        if !trainable {
            assert!(analytic.is_none(), "{name} is frozen but received a gradient");
            continue;
        }
        let analytic = analytic.unwrap_or_else(|| panic!("{name} has no gradient"));
        let coords: Vec<usize> = (0..numel.min(6)).map(|_| rng.random_range(0..numel)).collect();
        let scale = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        for &c in &coords {
            let set = |m: &mut MicroResNet<f64>, v: f64| {
                let mut params = m.named_parameters_mut();
                std::mem::replace(&mut params[ti].1.values_mut()[c], v)
            };
            let orig = set(&mut m, 0.0);
            set(&mut m, orig + step);
            let up = loss_of(&m);
            set(&mut m, orig - step);
            let down = loss_of(&m);
            set(&mut m, orig);
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max((numeric - analytic[c]).abs() / scale.max(numeric.abs()));
            checked += 1;
        }
    }
    assert!(checked >= 50, "only {checked} coordinates");
    assert!(max_err < 1e-6, "max relative error {max_err}");
}
