use candle_core::{DType, Device, Tensor};
use deepjscc_wz::codec::{build_model, load_checkpoint, save_checkpoint, inspect_checkpoint, ModelConfig, VariantKind, VariantModel};
use deepjscc_wz::image_tensor::{ImageDims, ImageTensor};
use deepjscc_wz::Error;

const DIMS: ImageDims = ImageDims::new(3, 16, 32);

fn config(variant: VariantKind, rho: f64) -> ModelConfig {
    ModelConfig::new(variant, rho, 4, DIMS)
}

fn images(batch: usize, phase: f32) -> Tensor {
    let imgs: Vec<ImageTensor> = (0..batch)
        .map(|b| {
            ImageTensor::from_fn(DIMS, |c, y, x| {
                0.5 + 0.4 * ((x as f32 * 0.3 + y as f32 * 0.2 + c as f32 + b as f32 + phase).sin())
            })
            .unwrap()
        })
        .collect();
    ImageTensor::stack(&imgs, DType::F32).unwrap()
}

fn noise(model: &VariantModel, batch: usize) -> Tensor {
    Tensor::randn(0f32, 1.0, (batch, 2 * model.channel_uses()), &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn run(model: &VariantModel, x: &Tensor, side: &Tensor, sigma2: &[f64], n: &Tensor) -> Vec<f32> {
    let side = model.variant().uses_side_info().then_some(side);
    values(&model.transmit(x, side, sigma2, n).unwrap().x_hat)
}

#[test]
fn output_shape_and_range() {
    for v in VariantKind::ALL {
        let model = build_model(&config(v, 0.125)).unwrap();
        let (x, s) = (images(2, 0.0), images(2, 1.0));
        let out = model.transmit(&x, v.uses_side_info().then_some(&s), &[0.1, 1.0], &noise(&model, 2)).unwrap();
        assert_eq!(out.x_hat.dims(), x.dims(), "{v}");
        assert_eq!(out.z.dims(), &[2, 2 * model.channel_uses()]);
        assert!(values(&out.x_hat).iter().all(|p| (0.0..=1.0).contains(p)), "{v}");
    }
}

#[test]
fn point2point_ignores_side_information() {
    let model = build_model(&config(VariantKind::Point2Point, 0.125)).unwrap();
    let x = images(2, 0.0);
    let n = noise(&model, 2);
    let a = values(&model.transmit(&x, None, &[0.5, 0.5], &n).unwrap().x_hat);
    // transmit drops x_side for this variant, whatever it holds
    let b = values(&model.transmit(&x, Some(&images(2, 1.0)), &[0.5, 0.5], &n).unwrap().x_hat);
    let c = values(&model.transmit(&x, Some(&images(2, 2.5)), &[0.5, 0.5], &n).unwrap().x_hat);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn side_information_variants_respond_to_side_image() {
    for v in [VariantKind::Wz, VariantKind::WzSm, VariantKind::Cond] {
        let model = build_model(&config(v, 0.125)).unwrap();
        let x = images(1, 0.0);
        let n = noise(&model, 1);
        let a = run(&model, &x, &images(1, 1.0), &[0.5], &n);
        let b = run(&model, &x, &images(1, 2.5), &[0.5], &n);
        assert_ne!(a, b, "{v}");
    }
}

#[test]
fn output_depends_on_snr() {
    for v in VariantKind::ALL {
        let model = build_model(&config(v, 0.125)).unwrap();
        let (x, s) = (images(1, 0.0), images(1, 1.0));
        let n = Tensor::zeros((1, 2 * model.channel_uses()), DType::F32, &Device::Cpu).unwrap();
        // zero noise: any change comes through the SNR conditioning alone
        assert_ne!(run(&model, &x, &s, &[0.1], &n), run(&model, &x, &s, &[3.0], &n), "{v}");
    }
}

#[test]
fn wz_sm_role_flag_changes_encoding() {
    let model = build_model(&config(VariantKind::WzSm, 0.125)).unwrap();
    let x = images(1, 0.0);
    let (a, _) = model.encode(&x, None, &[1.0], false).unwrap();
    let (b, _) = model.encode(&x, None, &[1.0], true).unwrap();
    assert_ne!(values(&a), values(&b));
}

#[test]
fn wz_sm_reuses_encoder_storage() {
    let model = build_model(&config(VariantKind::WzSm, 0.125)).unwrap();
    let enc = model.encoder_parameters();
    let side = model.side_encoder_parameters().unwrap();
    assert_eq!(enc.len(), side.len());
    for ((n1, v1), (n2, v2)) in enc.iter().zip(&side) {
        assert_eq!(n1, n2);
        assert_eq!(v1.as_tensor().id(), v2.as_tensor().id(), "{n1}");
    }
    // separate storage under WZ
    let wz = build_model(&config(VariantKind::Wz, 0.125)).unwrap();
    let enc_ids: Vec<_> = wz.encoder_parameters().iter().map(|(_, v)| v.as_tensor().id()).collect();
    assert!(wz
        .side_encoder_parameters()
        .unwrap()
        .iter()
        .all(|(_, v)| !enc_ids.contains(&v.as_tensor().id())));
}

#[test]
fn parameter_count_ordering() {
    for rho in [1.0 / 16.0, 1.0 / 32.0] {
        let counts: Vec<usize> = [VariantKind::Point2Point, VariantKind::WzSm, VariantKind::Wz, VariantKind::Cond]
            .into_iter()
            .map(|v| build_model(&ModelConfig::new(v, rho, 8, DIMS)).unwrap().count_parameters())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "rho={rho}: {counts:?}");
    }
    let small = build_model(&config(VariantKind::Wz, 0.125)).unwrap().count_parameters();
    let large = build_model(&ModelConfig::new(VariantKind::Wz, 0.125, 8, DIMS)).unwrap().count_parameters();
    assert!(large > small);
}

#[test]
fn every_parameter_receives_gradient() {
    for v in VariantKind::ALL {
        let model = build_model(&config(v, 0.125)).unwrap();
        let (x, s) = (images(2, 0.0), images(2, 1.0));
        let out = model
            .transmit(&x, v.uses_side_info().then_some(&s), &[0.3, 2.0], &noise(&model, 2))
            .unwrap();
        let loss = (&out.x_hat - &x).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in model.named_parameters() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{v}: no gradient for {name}"));
            let norm: f32 = g.abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(norm > 0.0, "{v}: zero gradient for {name}");
        }
    }
}

#[test]
fn construction_is_deterministic() {
    let a = build_model(&config(VariantKind::Cond, 0.125)).unwrap();
    let b = build_model(&config(VariantKind::Cond, 0.125)).unwrap();
    let (x, s) = (images(1, 0.0), images(1, 1.0));
    let n = noise(&a, 1);
    assert_eq!(run(&a, &x, &s, &[1.0], &n), run(&b, &x, &s, &[1.0], &n));
    let mut cfg = config(VariantKind::Cond, 0.125);
    cfg.init_seed = 1;
    let c = build_model(&cfg).unwrap();
    assert_ne!(run(&a, &x, &s, &[1.0], &n), run(&c, &x, &s, &[1.0], &n));
}

#[test]
fn misuse_is_rejected() {
    let p2p = build_model(&config(VariantKind::Point2Point, 0.125)).unwrap();
    let cond = build_model(&config(VariantKind::Cond, 0.125)).unwrap();
    let x = images(1, 0.0);
    assert!(matches!(p2p.encode_side(&x, &[1.0]), Err(Error::UnsupportedVariant { .. })));
    assert!(matches!(cond.encode_side(&x, &[1.0]), Err(Error::UnsupportedVariant { .. })));
    assert!(cond.encode(&x, None, &[1.0], false).is_err());
    let wz = build_model(&config(VariantKind::Wz, 0.125)).unwrap();
    let y = noise(&wz, 1);
    assert!(wz.decode(&y, None, &[1.0]).is_err());
    assert!(wz.decode(&y.narrow(1, 0, 4).unwrap(), Some(&x), &[1.0]).is_err());
}

#[test]
fn single_image_symbol_interface_matches_batch_path() {
    let model = build_model(&config(VariantKind::Wz, 0.125)).unwrap();
    let x = ImageTensor::unstack(&images(1, 0.0)).unwrap().remove(0);
    let s = ImageTensor::unstack(&images(1, 1.0)).unwrap().remove(0);
    let z = model.encode_image(&x, None, 1.0, false).unwrap();
    assert_eq!(z.len(), model.channel_uses());
    let rec = model.decode_symbols(&z, Some(&s), 1.0).unwrap();
    assert_eq!(rec.dims(), DIMS);
    assert!(model.decode_symbols(&z[1..], Some(&s), 1.0).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let mut cfg = config(VariantKind::WzSm, 0.125);
    cfg.init_seed = 3;
    let model = build_model(&cfg).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let info = inspect_checkpoint(&path).unwrap();
    assert_eq!(info.config, cfg);
    assert_eq!(info.parameter_count(), model.count_parameters());
    let loaded = load_checkpoint(&path, Some(&cfg)).unwrap();
    let (x, s) = (images(1, 0.0), images(1, 1.0));
    let n = noise(&model, 1);
    assert_eq!(run(&model, &x, &s, &[1.0], &n), run(&loaded, &x, &s, &[1.0], &n));

    let other = cfg.with_variant(VariantKind::Wz);
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.safetensors"), None),
        Err(Error::AssetNotFound { .. })
    ));
    std::fs::write(dir.path().join("junk.safetensors"), b"not a checkpoint").unwrap();
    assert!(matches!(
        load_checkpoint(&dir.path().join("junk.safetensors"), None),
        Err(Error::Checkpoint(_))
    ));
}

fn assert_initialization_contained(smaller: VariantKind, larger: VariantKind) -> Vec<String> {
    let small = build_model(&config(smaller, 0.125)).unwrap();
    let large = build_model(&config(larger, 0.125)).unwrap();
    let mut large_params: std::collections::HashMap<String, _> = large.named_parameters().into_iter().collect();
    for (name, var) in small.named_parameters() {
        let other = large_params.remove(&name).unwrap_or_else(|| panic!("{larger} lacks {name}"));
        assert_eq!(values(var.as_tensor()), values(other.as_tensor()), "{name}");
    }
    large_params.into_keys().collect()
}

#[test]
fn side_free_parameters_share_point2point_initialization() {
    let extra = assert_initialization_contained(VariantKind::Point2Point, VariantKind::Wz);
    assert!(extra.iter().any(|n| n.starts_with("decoder.stage1.fuse_side.")));
}

#[test]
fn cond_extends_wz_initialization() {
    let extra = assert_initialization_contained(VariantKind::Wz, VariantKind::Cond);
    assert!(extra.iter().all(|n| n.starts_with("tx_side_encoder.") || n.contains("_side.")), "{extra:?}");
}
