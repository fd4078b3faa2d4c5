use attnlab::data::{generate_synthetic_dataset, DatasetSpec};
use attnlab::vit::{train_toy, TrainConfig, ViTConfig};
use std::time::Instant;

fn main() {
    let config = ViTConfig::toy_default();
    for noise in [0.15f64, 0.25] {
        let spec = DatasetSpec { num_classes: 4, channels: 3, image_size: 16, per_class: 32, noise };
        let ds = generate_synthetic_dataset(&spec, 11).unwrap();
        for (epochs, lr, batch) in [(20usize, 0.02f64, 8usize), (30, 0.02, 8), (30, 0.01, 8), (30, 0.05, 16), (40, 0.02, 16)] {
            let t = Instant::now();
            let train = TrainConfig { epochs, learning_rate: lr, batch_size: batch, seed: 11 };
            match train_toy(&config, &ds, &train) {
                Ok((_, r)) => println!("noise={noise} epochs={epochs} lr={lr} batch={batch}: acc={:.4} loss={:.4} in {:.1?}", r.train_accuracy, r.final_mean_loss, t.elapsed()),
                Err(e) => println!("noise={noise} epochs={epochs} lr={lr} batch={batch}: {e}"),
            }
        }
    }
}
