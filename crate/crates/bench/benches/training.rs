use criterion::{black_box, criterion_group, criterion_main, Criterion};

use cir_core::data::{generate_synthetic, Split};
use cir_core::{total_loss, BackboneConfig, CausalModel, ModelConfig, ParamSet, SyntheticSpec, Tape};

fn forward_backward(c: &mut Criterion) {
    let spec = SyntheticSpec { n_train: 16, n_test: 1, ..SyntheticSpec::default() };
    let train = generate_synthetic(&spec, 0).unwrap().split(Split::Train);
    let idx: Vec<usize> = (0..64).collect();
    let images = train.batch_tensor(&idx).unwrap();
    let labels: Vec<usize> = idx.iter().map(|&i| train.samples[i].label).collect();

    let mut group = c.benchmark_group("train_step_b64");
    group.sample_size(10);
    for (name, widths) in [("widths_8_16_16", &[8, 16, 16][..]), ("default_backbone", &[32, 64, 64][..])] {
        let model = CausalModel::new(ModelConfig::new(BackboneConfig::vgg(1, 32, widths), 4)).unwrap();
        let params: ParamSet<f32> = model.init_params(0).unwrap();
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let vars = params.register(&mut tape, true);
                let x = tape.constant(images.clone());
                let out = model.forward(&mut tape, &vars, x).unwrap();
                let loss = total_loss(&mut tape, &out, &labels, 0.1).unwrap();
                black_box(tape.backward(loss.total).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
