use cir_core::data::{generate_synthetic, Split};
use cir_core::metrics::evaluate;
use cir_core::nn::{ParamGroup, ParamSet};
use cir_core::train::{train, TrainObserver};
use cir_core::{BackboneConfig, CausalModel, Checkpoint, ModelConfig, Result, SyntheticSpec, TrainConfig};

fn small() -> (cir_core::Dataset, ModelConfig) {
    let spec = SyntheticSpec {
        num_classes: 3,
        image_size: 16,
        n_train: 20,
        n_test: 10,
        fg_size: 6,
        speckle_looks: 64.0,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec, 1).unwrap();
    (ds, ModelConfig::new(BackboneConfig::vgg(1, 16, &[4, 8]), 3))
}

fn cfg(lambda: f64) -> TrainConfig {
    TrainConfig { lambda, epochs: 3, batch_size: 16, seed: 4, ..TrainConfig::default() }
}

#[derive(Default)]
struct Snapshots(Vec<ParamSet<f32>>);

impl TrainObserver for Snapshots {
    fn on_epoch(&mut self, _: usize, params: &ParamSet<f32>) -> Result<()> {
        self.0.push(params.clone());
        Ok(())
    }
}

#[test]
fn zero_lambda_freezes_activation_branch_and_matches_baseline() {
    let (ds, mc) = small();
    let tr = ds.split(Split::Train);
    let full = CausalModel::new(mc.clone()).unwrap();
    let base = CausalModel::new(mc.without_sam()).unwrap();
    let init: ParamSet<f32> = full.init_params(4).unwrap();
    let (mut a, mut b) = (Snapshots::default(), Snapshots::default());
    train(&full, &cfg(0.0), &tr, &mut a).unwrap();
    train(&base, &cfg(0.0), &tr, &mut b).unwrap();
    for (pa, pb) in a.0.iter().zip(&b.0) {
        for (name, t) in pa.group(ParamGroup::Sam) {
            assert_eq!(t, init.get(name).unwrap(), "{name} moved");
        }
        for (name, t) in pb.iter() {
            let other = pa.get(name).unwrap();
            for (x, y) in t.data().iter().zip(other.data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
                assert!(rel <= 1e-6, "{name}: {x} vs {y}");
            }
        }
    }
    assert_eq!(a.0.len(), 3);
}

#[test]
fn training_is_deterministic_and_selects_best_epoch() {
    let (ds, mc) = small();
    let tr = ds.split(Split::Train);
    let model = CausalModel::new(mc).unwrap();
    let r1 = train(&model, &cfg(0.1), &tr, &mut ()).unwrap();
    let r2 = train(&model, &cfg(0.1), &tr, &mut ()).unwrap();
    assert_eq!(r1.log, r2.log);
    assert_eq!(r1.params, r2.params);
    let epoch_accs: Vec<f64> = r1.log.iter().filter_map(|r| r.val_acc).collect();
    assert_eq!(epoch_accs.len(), 3);
    assert!(epoch_accs.iter().all(|&a| r1.best_val_acc >= a));
    let first_best = epoch_accs.iter().position(|&a| a == r1.best_val_acc).unwrap();
    assert_eq!(r1.best_epoch, first_best + 1);
    for row in &r1.log {
        assert!((row.l_total - (row.l_ce + 0.1 * row.l_cr_sum)).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_accuracy() {
    let (ds, mc) = small();
    let model = CausalModel::new(mc.clone()).unwrap();
    let out = train(&model, &cfg(0.1), &ds.split(Split::Train), &mut ()).unwrap();
    let ck = Checkpoint { model: mc, class_names: ds.class_names.clone(), predict_mode: out.predict_mode, params: out.params.clone() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let test = ds.split(Split::Test);
    let m2 = back.build_model().unwrap();
    let a = evaluate(&model, &out.params, &test, out.predict_mode).unwrap();
    let b = evaluate(&m2, &back.params, &test, back.predict_mode).unwrap();
    assert_eq!(a, b);
}
