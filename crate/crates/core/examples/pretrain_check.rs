// scratch harness for tuning the pretraining recipe
use cavlab_core::cnn::{pretrain, PretrainTask};
use cavlab_core::corpus::generate_class_corpus;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);

    let t0 = Instant::now();
    let corpus = generate_class_corpus(n, 42).unwrap();
    println!("corpus: {} images in {:.1?}", corpus.len(), t0.elapsed());

    let labels: Vec<usize> = corpus.manifest.samples.iter().map(|s| s.class_label).collect();
    let task = PretrainTask {
        num_classes: 8,
        epochs,
        learning_rate: lr,
        batch_size: 32,
        seed: 42,
    };
    let t1 = Instant::now();
    match pretrain(&task, &corpus.images, &labels) {
        Ok((_, stats)) => println!(
            "pretrain: acc={:.4} loss={:.4} epochs={} in {:.1?}",
            stats.train_accuracy, stats.final_loss, stats.epochs_run, t1.elapsed()
        ),
        Err(e) => println!("pretrain failed after {:.1?}: {e}", t1.elapsed()),
    }
}
