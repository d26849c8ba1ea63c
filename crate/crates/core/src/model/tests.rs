use super::*;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        classes: 5,
        ..ModelConfig::toy()
    }
    .with_variant(variant)
}

fn images(batch: usize, cfg: &ModelConfig) -> Vec<f32> {
    let len = batch * cfg.in_channels * cfg.image_size * cfg.image_size;
    (0..len)
        .map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
        .collect()
}

#[test]
fn zero_image_gives_finite_logits() {
    for v in Variant::LADDER {
        let cfg = small(v);
        let m = Model::<f32>::new(cfg.clone()).unwrap();
        let zeros = vec![0.0; 2 * 3 * 16 * 16];
        let logits = m.predict(&zeros, 2).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert!(logits.all_finite(), "{v:?}");
    }
    let t = Model::<f32>::new(small(Variant::Baseline).teacher()).unwrap();
    assert!(t.predict(&vec![0.0; 3 * 256], 1).unwrap().all_finite());
}

#[test]
fn toy_parameter_count_is_stable() {
    let a = Model::<f32>::new(ModelConfig::toy()).unwrap();
    let b = Model::<f32>::new(ModelConfig::toy()).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    // count by construction for c = 64, N = 16, hidden = 256, 10 classes
    let (c, n, h, p, k) = (64, 16, 256, 192, 10);
    let embed = c * p + c + n * c;
    let signs = 2;
    let hfsc = 4 * (c / 2 * c + signs);
    let block = 2 * 2 * c // two norms
        + hfsc
        + 2 * (c * c + signs) // v, o
        + 4 * signs // q, k, v sign and attention binarizer
        + 3 // alpha, beta, gamma
        + h * c + signs + c * h + signs // fc1, fc2
        + 3 * h + n; // activation
    let head = 2 * c + k * c + k;
    assert_eq!(a.parameter_count(), embed + 2 * block + head);
    // the frozen Ψ kernel is stored but not trainable
    assert_eq!(a.store.total_elements(), a.parameter_count() + 9);
}

#[test]
fn audit_passes_for_every_variant() {
    for v in Variant::LADDER {
        let cfg = small(v);
        let m = Model::<f32>::new(cfg.clone()).unwrap();
        let mut tape = Tape::new(BinarizeMode::Hard);
        let f = m.forward(&mut tape, &images(2, &cfg), 2).unwrap();
        let a = audit_tape(&tape, &m.store);
        assert!(a.is_clean(), "{v:?}: {:?}", a.violations);
        assert_eq!(a.float_linears, vec!["patch_embed.w", "head.w"]);
        assert_eq!(a.similarities, 2);
        assert_eq!(a.attention_applies, 2);
        let per_block = if cfg.use_hfsc { 8 } else { 6 };
        assert_eq!(a.binary_linears, 2 * per_block);
        assert_eq!(f.attention.len(), 2);
        // token count is the full grid at every block: no class token
        for att in &f.attention {
            assert_eq!(tape.value(*att).shape(), &[2 * 2 * 16, 16]);
        }
    }
}

#[test]
fn audit_flags_float_products_in_teacher() {
    let cfg = small(Variant::Baseline).teacher();
    let m = Model::<f32>::new(cfg.clone()).unwrap();
    let mut tape = Tape::new(BinarizeMode::Hard);
    m.forward(&mut tape, &images(1, &cfg), 1).unwrap();
    assert!(!audit_tape(&tape, &m.store).is_clean());
}

#[test]
fn distillation_loss_reductions() {
    let mut tape = Tape::<f64>::default();
    let logits = tape
        .input(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.2]).unwrap())
        .unwrap();
    let ce = tape.cross_entropy(logits, &[2, 1]).unwrap();
    let l0 = distillation_loss(&mut tape, logits, &[2, 1], None, 0.0).unwrap();
    assert_eq!(tape.value(l0).item(), tape.value(ce).item());

    let same = softmax_probs(tape.value(logits));
    let l1 = distillation_loss(&mut tape, logits, &[2, 1], Some(&same), 1.0).unwrap();
    assert!(tape.value(l1).item().abs() < 1e-15);

    let l9 = distillation_loss(&mut tape, logits, &[2, 1], Some(&same), 0.9).unwrap();
    assert!((tape.value(l9).item() - 0.1 * tape.value(ce).item()).abs() < 1e-12);

    assert!(matches!(
        distillation_loss(&mut tape, logits, &[2, 1], Some(&same), 1.5),
        Err(Error::Lambda(_))
    ));
    assert!(distillation_loss(&mut tape, logits, &[2, 1], None, 0.9).is_err());
    assert!(matches!(
        distillation_loss(&mut tape, logits, &[2, 3], None, 0.0),
        Err(Error::Label { label: 3, .. })
    ));
}

#[test]
fn beta_calibration_and_param_round_trip() {
    let cfg = small(Variant::Full);
    let mut m = Model::<f32>::new(cfg.clone()).unwrap();
    let betas = m.calibrate_beta(&images(4, &cfg), 4).unwrap();
    assert_eq!(betas.len(), 2);
    assert!(betas.iter().all(|&b| (10.0 - 16.0..=10.0).contains(&b)));

    let ckpt = Checkpoint {
        config: cfg.to_kv(),
        records: m.param_records(),
    };
    let mut buf = Vec::new();
    ckpt.write(&mut buf).unwrap();
    let back =
        Model::<f32>::from_checkpoint(&Checkpoint::read(&mut buf.as_slice()).unwrap()).unwrap();
    for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let x = images(2, &cfg);
    assert_eq!(m.predict(&x, 2).unwrap(), back.predict(&x, 2).unwrap());

    // a checkpoint for another architecture is rejected
    let mut other = Model::<f32>::new(small(Variant::Baseline)).unwrap();
    assert!(other.load_params(&ckpt).is_err());
}

#[test]
fn gradients_reach_every_trainable_parameter() {
    let cfg = small(Variant::Full);
    let mut m = Model::<f32>::new(cfg.clone()).unwrap();
    // open the attention window so every softmax output is on a live segment
    for l in 0..cfg.depth {
        let id = m.store.find(&format!("blocks.{l}.att.b")).unwrap();
        m.store.set_scalar(id, 0.0);
    }
    let mut tape = Tape::new(BinarizeMode::Relaxed);
    let f = m.forward(&mut tape, &images(2, &cfg), 2).unwrap();
    let loss = distillation_loss(&mut tape, f.logits, &[0, 3], None, 0.0).unwrap();
    let g = tape.backward(loss).unwrap();
    tape.accumulate_into(&mut m.store, &g).unwrap();
    let psi = m.store.find("psi").unwrap();
    assert!(m.store.get(psi).grad.data().iter().all(|&v| v == 0.0));
    let silent: Vec<_> = m
        .store
        .iter()
        .filter(|(_, p)| p.trainable && p.grad.data().iter().all(|&v| v == 0.0))
        .map(|(_, p)| p.name.clone())
        .collect();
    assert!(silent.is_empty(), "{silent:?}");
}
