// scratch: how much class signal do GAP features carry at random init?
// trains multinomial logistic regression on mean-pooled probe activations
use cavlab_core::cnn::MicroCnn;
use cavlab_core::corpus::generate_class_corpus;
use cavlab_core::tensor::PoolMode;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let corpus = generate_class_corpus(n, 42).unwrap();
    let model = MicroCnn::init(42, 8);

    let feats: Vec<Vec<f64>> = corpus
        .images
        .iter()
        .map(|x| {
            let z = model.forward_features(x).unwrap();
            z.pool(PoolMode::Mean)
                .unwrap()
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = corpus.manifest.samples.iter().map(|s| s.class_label).collect();

    // standardize features
    let d = feats[0].len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for f in &feats {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n as f64;
        }
    }
    for f in &feats {
        for j in 0..d {
            var[j] += (f[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let feats: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| {
            (0..d)
                .map(|j| (f[j] - mean[j]) / var[j].sqrt().max(1e-9))
                .collect()
        })
        .collect();

    // full-batch multinomial logistic regression, lr 0.5, 3000 iters
    let k = 8usize;
    let mut w = vec![0.0f64; k * (d + 1)];
    for it in 0..3000 {
        let mut grad = vec![0.0f64; k * (d + 1)];
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (f, &y) in feats.iter().zip(&labels) {
            let mut logits = vec![0.0f64; k];
            for j in 0..k {
                logits[j] = w[j * (d + 1) + d];
                for c in 0..d {
                    logits[j] += w[j * (d + 1) + c] * f[c];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
            loss -= probs[y].max(1e-300).ln();
            let argmax = (0..k).max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap()).unwrap();
            if argmax == y {
                correct += 1;
            }
            for j in 0..k {
                let dl = probs[j] - if j == y { 1.0 } else { 0.0 };
                grad[j * (d + 1) + d] += dl;
                for c in 0..d {
                    grad[j * (d + 1) + c] += dl * f[c];
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 / n as f64 * gi;
        }
        if it % 500 == 0 || it == 2999 {
            println!(
                "iter {it}: loss {:.4} acc {:.3}",
                loss / n as f64,
                correct as f64 / n as f64
            );
        }
    }
}
