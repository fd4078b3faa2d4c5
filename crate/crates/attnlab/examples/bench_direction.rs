use attnlab::attack::{evaluate_robust_accuracy, AttackConfig};
use attnlab::data::{generate_synthetic_dataset, DatasetSpec};
use attnlab::loss::{LossConfig, LossTerm};
use attnlab::vit::{train_toy, TrainConfig, ViTConfig};
use std::time::Instant;

fn main() {
    let config = ViTConfig::toy_default();
    let noise: f64 = std::env::args().nth(1).map(|a| a.parse().unwrap()).unwrap_or(0.25);
    let spec = DatasetSpec { num_classes: 4, channels: 3, image_size: 16, per_class: 36, noise };
    let ds = generate_synthetic_dataset(&spec, 11).unwrap();
    let (train_set, test) = ds.split(128).unwrap();
    let train = TrainConfig { epochs: 25, learning_rate: 0.02, batch_size: 8, seed: 11 };
    let t = Instant::now();
    let (model, report) = train_toy(&config, &train_set, &train).unwrap();
    let test_acc = attnlab::vit::accuracy(&model, &test).unwrap();
    println!("train acc {:.4}, test acc {:.4} in {:.1?}", report.train_accuracy, test_acc, t.elapsed());
    let i_star = config.token_for_grid(0, 0);

    for (name, terms) in [("ce", vec![LossTerm::Ce]), ("ce+kq_star", vec![LossTerm::Ce, LossTerm::KqStar]), ("kq", vec![LossTerm::Kq])] {
        let mut loss = LossConfig::new(terms);
        loss.target_key = i_star;
        let mut attack = AttackConfig::defaults(loss, 5);
        attack.iterations = 100;
        let t = Instant::now();
        let rep = evaluate_robust_accuracy(&model, &test.images, &test.labels, (0, 0), (4, 4), &attack).unwrap();
        let mean_clean: f64 = rep.records.iter().map(|r| r.attn_to_target_clean).sum::<f64>() / rep.records.len() as f64;
        let mean_adv: f64 = rep.records.iter().map(|r| r.attn_to_target_attacked).sum::<f64>() / rep.records.len() as f64;
        println!("{name}: clean_acc={:.3} robust_acc={:.3} attn {:.4}->{:.4} in {:.1?}",
            rep.clean_accuracy, rep.robust_accuracy.unwrap(), mean_clean, mean_adv, t.elapsed());
    }
}
