use candle_core::{DType, Device, Tensor};

use dbfnet::labelgen::split_labels;
use dbfnet::losses::{total_loss, LabelBatch, LossWeights};
use dbfnet::network::{count_parameters, fuse, DbfNet, ModelConfig};
use dbfnet::train::{save_checkpoint, Adam, AdamConfig, Checkpoint, CheckpointMeta};
use dbfnet::{BinaryMask, Error};

fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let v: Vec<f32> = (0..b * 3 * h * w)
        .map(|i| (((i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 1000) as f32 / 1000.0)
        .collect();
    Tensor::from_vec(v, (b, 3, h, w), &Device::Cpu).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

fn labels(b: usize, h: usize, w: usize) -> LabelBatch {
    let m = BinaryMask::from_fn(h, w, |y, x| {
        (y as f64 - h as f64 / 2.0).powi(2) + (x as f64 - w as f64 / 3.0).powi(2) < (h * w) as f64 / 12.0
    })
    .unwrap();
    let ls = split_labels(&m, 1.0).unwrap();
    LabelBatch::from_labels(&vec![&ls; b], DType::F32).unwrap()
}

#[test]
fn encoder_ladder_at_64() {
    let net = DbfNet::new(&ModelConfig::default(), DType::F32, 0).unwrap();
    let feats = net.encode(&image(1, 64, 64, 0), false).unwrap();
    let dims: Vec<_> = feats.iter().map(|f| f.dims().to_vec()).collect();
    assert_eq!(
        dims,
        vec![vec![1, 32, 64, 64], vec![1, 64, 32, 32], vec![1, 128, 16, 16], vec![1, 256, 8, 8], vec![1, 256, 4, 4]]
    );
}

#[test]
fn output_shapes_per_block_count() {
    for count in 0..=2 {
        let mut cfg = ModelConfig::default().slimmed(8);
        cfg.ffs.count = count;
        let net = DbfNet::new(&cfg, DType::F32, 1).unwrap();
        let out = net.forward(&image(2, 48, 80, 1), false).unwrap();
        assert_eq!(out.final_logits.dims(), &[2, 1, 48, 80]);
        assert_eq!(out.supervision.len(), count);
        assert_eq!(out.lambda_values.len(), count);
        for s in &out.supervision {
            let scale = if s.level == 1 { 1 } else { 2 };
            for t in [&s.body_logits, &s.bound_logits] {
                assert_eq!(t.as_ref().unwrap().dims(), &[2, 1, 48 / scale, 80 / scale]);
            }
        }
    }
}

#[test]
fn indivisible_input_rejected() {
    let net = DbfNet::new(&ModelConfig::default().slimmed(8), DType::F32, 0).unwrap();
    assert!(matches!(net.forward(&image(1, 40, 40, 0), false), Err(Error::Shape(_))));
}

#[test]
fn zero_weight_fusion_is_boundary_stream() {
    let body = image(2, 8, 8, 3);
    let bound = image(2, 8, 8, 4);
    let zero = Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(bits(&fuse(&zero, &body, &bound).unwrap()), bits(&bound));
}

#[test]
fn parameter_budget_and_ablation_sizes() {
    let full = count_parameters(&ModelConfig::default()).unwrap();
    assert!((2_700_000..=3_700_000).contains(&full), "{full}");
    let mut no_ffm = ModelConfig::default();
    no_ffm.ffs.use_ffm = false;
    assert!(count_parameters(&no_ffm).unwrap() < full);
    let mut baseline = ModelConfig::default();
    baseline.ffs.count = 0;
    assert!(count_parameters(&baseline).unwrap() < count_parameters(&no_ffm).unwrap());
}

#[test]
fn same_seed_same_weights_and_outputs() {
    let cfg = ModelConfig::default().slimmed(8);
    let a = DbfNet::new(&cfg, DType::F32, 9).unwrap();
    let b = DbfNet::new(&cfg, DType::F32, 9).unwrap();
    let x = image(2, 32, 32, 5);
    for train in [true, false] {
        let ya = a.forward(&x, train).unwrap();
        let yb = b.forward(&x, train).unwrap();
        assert_eq!(bits(&ya.final_logits), bits(&yb.final_logits));
    }
    let c = DbfNet::new(&cfg, DType::F32, 10).unwrap();
    assert_ne!(bits(&a.forward(&x, false).unwrap().final_logits), bits(&c.forward(&x, false).unwrap().final_logits));
}

#[test]
fn every_parameter_receives_gradient() {
    let net = DbfNet::new(&ModelConfig::default().slimmed(8), DType::F32, 2).unwrap();
    let out = net.forward(&image(2, 32, 32, 6), true).unwrap();
    let loss = total_loss(&out, &labels(2, 32, 32), &LossWeights::default()).unwrap();
    let grads = loss.total.backward().unwrap();
    for (name, var) in net.store().params() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(norm.is_finite() && norm > 0.0, "{name}: {norm}");
    }
    assert_eq!(loss.terms.len(), 5);
}

#[test]
fn disabled_supervision_drops_head_gradients() {
    let net = DbfNet::new(&ModelConfig::default().slimmed(8), DType::F32, 2).unwrap();
    let out = net.forward(&image(2, 32, 32, 6), true).unwrap();
    let weights = LossWeights {
        enable_body: false,
        enable_bound: false,
        ..LossWeights::default()
    };
    let loss = total_loss(&out, &labels(2, 32, 32), &weights).unwrap();
    assert_eq!(loss.terms.len(), 1);
    let grads = loss.total.backward().unwrap();
    for (name, var) in net.store().params() {
        let head = name.contains("body_head") || name.contains("bound_head");
        assert_eq!(grads.get(var.as_tensor()).is_none(), head, "{name}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::default().slimmed(8);
    let a = DbfNet::new(&cfg, DType::F32, 3).unwrap();
    let x = image(2, 32, 32, 7);
    let mut adam = Adam::new(a.store().params(), AdamConfig::default()).unwrap();
    let grads = total_loss(&a.forward(&x, true).unwrap(), &labels(2, 32, 32), &LossWeights::default())
        .unwrap()
        .total
        .backward()
        .unwrap();
    adam.step(&grads, 1e-3).unwrap();

    let meta = CheckpointMeta {
        model: cfg.clone(),
        epoch: 1,
        step: 1,
        seed: 3,
        lambdas: a.lambda_values().unwrap(),
        adam_step: adam.step_count(),
        best_val_dsc: Some(42.0),
    };
    let path = dir.path().join("ckpt.safetensors");
    save_checkpoint(&path, &a, Some(&adam), &meta).unwrap();

    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.meta, meta);
    let b = ckpt.build_model(DType::F32).unwrap();
    assert_eq!(bits(&a.forward(&x, false).unwrap().final_logits), bits(&b.forward(&x, false).unwrap().final_logits));
    for (name, var) in a.store().params().iter().chain(a.store().buffers()) {
        let other = b.store().params().get(name).or_else(|| b.store().buffers().get(name)).unwrap();
        assert_eq!(bits(var.as_tensor()), bits(other.as_tensor()), "{name}");
    }
    let mut restored = Adam::new(b.store().params(), AdamConfig::default()).unwrap();
    ckpt.restore_optimizer(&mut restored).unwrap();
    assert_eq!(restored.step_count(), adam.step_count());

    let mut other_cfg = cfg.clone();
    other_cfg.ffs.count = 1;
    let c = DbfNet::new(&other_cfg, DType::F32, 3).unwrap();
    assert!(matches!(ckpt.apply(&c), Err(Error::Checkpoint(_))));
}
