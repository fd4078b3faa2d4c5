use attnlab::loss::cross_entropy;
use attnlab::tape::{finite_difference_gradient, Tape};
use attnlab::tensor::Tensor;
use attnlab::vit::{forward_trainable, ViTConfig, ViTModel};

fn main() {
    let c = ViTConfig { image_size: 8, channels: 1, patch_size: 4, d_model: 8, depth: 2, heads: 2, mlp_hidden: 16, num_classes: 3, layernorm_eps: 1e-5 };
    let model = ViTModel::init(&c, 3).unwrap();
    let mut rng = attnlab::rng::stream(3, "gc", 0);
    let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
    let label = 2usize;

    let mut tape = Tape::new();
    let img = tape.constant(image.clone());
    let (out, names) = forward_trainable(&mut tape, &model, img).unwrap();
    let loss = cross_entropy(&mut tape, out.logits, label).unwrap();
    let grads = tape.backward(loss).unwrap();

    for name in ["patch_embed.weight", "class_token", "pos_embedding", "layers.0.ln1.gamma", "layers.0.attn.heads.0.w_q", "layers.0.attn.w_o", "layers.1.mlp.w1", "layers.1.mlp.b1", "final_ln.gamma", "head.weight", "head.bias"] {
        let id = names[name];
        let analytic = grads.wrt(&tape, id);
        let base = tape.value(id).clone();
        let fd = finite_difference_gradient(|x| {
            let mut m2 = model.clone();
            m2.update_params(|n, v| { if n == name { *v = x.clone(); } });
            let mut t = Tape::new();
            let i = t.constant(image.clone());
            let (o, _) = forward_trainable(&mut t, &m2, i)?;
            let l = cross_entropy(&mut t, o.logits, label)?;
            t.value(l).item()
        }, &base, 1e-5).unwrap();
        let mut worst = 0.0f64;
        for (a, f) in analytic.values().iter().zip(fd.values()) {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-4);
            worst = worst.max(rel);
        }
        println!("{name}: worst rel err {worst:.2e}");
    }
}
