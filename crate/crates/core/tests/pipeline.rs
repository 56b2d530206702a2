use causalfuse::confounder::{build_dictionary, DictionaryParams, Modality};
use causalfuse::fusionnet::{load_checkpoint, save_checkpoint, DictionaryRef, DictionaryRefs};
use causalfuse::metrics::evaluate;
use causalfuse::scenegen::{generate_balanced, generate_dataset};
use causalfuse::training::train;
use causalfuse::{BiasProfile, FusionModel, Image, ImagePair, LossConfig, ModelConfig, TrainConfig};

fn setup(seed: u64) -> (FusionModel, Vec<ImagePair>) {
    let data = generate_dataset(&BiasProfile::street_biased(), 24, 24, seed).unwrap();
    let vis: Vec<&Image> = data.iter().map(|p| &p.vis).collect();
    let ir: Vec<&Image> = data.iter().map(|p| &p.ir).collect();
    let p = DictionaryParams { n: 6, d: 8, seed };
    let model = FusionModel::new(
        ModelConfig::default(),
        build_dictionary(&vis, Modality::Visible, p).unwrap(),
        build_dictionary(&ir, Modality::Infrared, p).unwrap(),
        seed,
    )
    .unwrap();
    (model, data)
}

fn tcfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        crop: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let (mut a, data) = setup(3);
    let (mut b, _) = setup(3);
    let ha = train(&mut a, &data, &tcfg(), &LossConfig::default()).unwrap();
    let hb = train(&mut b, &data, &tcfg(), &LossConfig::default()).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params.to_json().unwrap(), b.params.to_json().unwrap());

    let (mut c, _) = setup(3);
    let other = TrainConfig { seed: 1, ..tcfg() };
    train(&mut c, &data, &other, &LossConfig::default()).unwrap();
    assert_ne!(a.params.to_json().unwrap(), c.params.to_json().unwrap());
}

#[test]
fn evaluation_report_contract() {
    let (model, _) = setup(5);
    let held = generate_balanced(3, 24, 99).unwrap();
    let r = evaluate(&model, &held).unwrap();
    assert_eq!(r.rows.len(), held.len());
    let mean = r.mean.clone().unwrap();
    let n = r.rows.len() as f64;
    assert!((mean.ssim - r.rows.iter().map(|x| x.ssim).sum::<f64>() / n).abs() < 1e-12);
    assert!((mean.mi - r.rows.iter().map(|x| x.mi).sum::<f64>() / n).abs() < 1e-12);
    assert!((mean.vif - r.rows.iter().map(|x| x.vif).sum::<f64>() / n).abs() < 1e-12);
    assert!((mean.qabf - r.rows.iter().map(|x| x.qabf).sum::<f64>() / n).abs() < 1e-12);
    for row in &r.rows {
        assert!((0.0..=1.0).contains(&row.qabf));
        assert!((-1.0..=1.0).contains(&row.ssim));
        assert!(row.mi >= 0.0 && row.vif >= 0.0);
    }
    let csv = r.to_csv().unwrap();
    assert_eq!(csv, evaluate(&model, &held).unwrap().to_csv().unwrap());
    assert_eq!(csv.lines().count(), held.len() + 2);
    assert!(csv.lines().last().unwrap().starts_with("MEAN,"));
    assert!(evaluate(&model, &[]).unwrap().mean.is_none());
}

#[test]
fn checkpoint_restores_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, data) = setup(8);
    train(&mut m, &data[..6], &TrainConfig { epochs: 1, ..tcfg() }, &LossConfig::default()).unwrap();
    let (vp, ip) = (dir.path().join("z_vis.json"), dir.path().join("z_ir.json"));
    m.z_vis.save(&vp).unwrap();
    m.z_ir.save(&ip).unwrap();
    let refs = DictionaryRefs {
        visible: DictionaryRef::for_file(&vp).unwrap(),
        infrared: DictionaryRef::for_file(&ip).unwrap(),
    };
    let ck = dir.path().join("checkpoint.json");
    save_checkpoint(&ck, &m, &refs).unwrap();
    let (back, _) = load_checkpoint(&ck).unwrap();
    let p = &data[0];
    assert_eq!(back.fuse(&p.ir, &p.vis).unwrap(), m.fuse(&p.ir, &p.vis).unwrap());
    assert_eq!(back.params.step(), m.params.step());
}
