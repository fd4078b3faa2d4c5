use attnlab::attack::{pgd_attack, AttackConfig};
use attnlab::loss::{LossConfig, LossTerm};
use attnlab::tensor::Tensor;
use attnlab::vit::{ViTConfig, ViTModel};
use std::time::Instant;

fn main() {
    let config = ViTConfig::toy_default();
    let model = ViTModel::init(&config, 7).unwrap();
    let mut rng = attnlab::rng::stream(7, "bench", 0);
    let image = Tensor::rand_uniform(vec![3, 16, 16], &mut rng);
    let mut loss = LossConfig::new([LossTerm::Ce, LossTerm::KqStar]);
    loss.target_key = config.token_for_grid(0, 0);
    let attack = AttackConfig::defaults(loss, 3);
    let start = Instant::now();
    let (_, history) = pgd_attack(&model, &image, 0, (0, 0), (4, 4), &attack, 0).unwrap();
    let elapsed = start.elapsed();
    println!("250-iteration attack: {:.2?} total, {:.2?} per iteration, final loss {:.4}",
             elapsed, elapsed / history.len() as u32, history.last().unwrap().total);
}
