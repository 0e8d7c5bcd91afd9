//! Reverse-mode gradients against central finite differences, in f64.

use cooldown_lab::exec::Exec;
use cooldown_lab::model::{batch_loss, loss_and_gradients, Batch, ModelConfig, WeightVector};

pub fn config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        ffw_dim: 32,
        head_dim: 8,
        n_heads: 2,
        vocab_size: 23,
        seq_len: 8,
    }
}

pub fn batch() -> Batch {
    let toks = (0..2 * 9).map(|i| ((i * 7 + 3) % 19) as u32).collect();
    Batch::new(2, 8, toks).unwrap()
}

/// Init with jittered norm gains and larger embeddings. RMSNorm makes the
/// loss scale-invariant in each embedding row, so with the default 0.02
/// std a 1e-3 probe step is a large relative move.
pub fn weights(cfg: &ModelConfig, embed_scale: f64) -> WeightVector<f64> {
    let mut w = WeightVector::<f64>::init(cfg, 17);
    let noise = WeightVector::<f64>::init(cfg, 18);
    let names: Vec<String> = w.layout().segments().iter().map(|s| s.name.clone()).collect();
    for name in names {
        let n = noise.segment(&name).unwrap().to_vec();
        let seg = w.segment_mut(&name).unwrap();
        if name.ends_with("norm") {
            for (g, x) in seg.iter_mut().zip(n) {
                *g = 1.0 + x;
            }
        } else if name == "tok_embed" {
            seg.iter_mut().for_each(|x| *x *= embed_scale);
        }
    }
    w
}

/// Largest per-segment relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_relative_error(w: &WeightVector<f64>, eps: f64) -> (f64, String) {
    let cfg = config();
    let b = batch();
    let (_, grad) = loss_and_gradients(Exec::Sequential, w, &cfg, &b, 1.0).unwrap();
    let mut worst = (0.0f64, String::new());
    for seg in w.layout().segments() {
        for i in seg.offset..seg.offset + seg.len {
            let mut plus = w.clone();
            plus.values_mut()[i] += eps;
            let mut minus = w.clone();
            minus.values_mut()[i] -= eps;
            let fd = (batch_loss(Exec::Sequential, &plus, &cfg, &b).unwrap()
                - batch_loss(Exec::Sequential, &minus, &cfg, &b).unwrap())
                / (2.0 * eps);
            let an = grad.values()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, seg.name.clone());
            }
        }
    }
    worst
}
