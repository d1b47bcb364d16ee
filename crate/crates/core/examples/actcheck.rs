// scratch: activation liveness at init
use cavlab_core::cnn::MicroCnn;
use cavlab_core::corpus::generate_class_corpus;

fn main() {
    let corpus = generate_class_corpus(32, 42).unwrap();
    let model = MicroCnn::init(42, 8);
    let mut zero_frac = 0.0f64;
    let mut mean_abs = 0.0f64;
    for x in &corpus.images {
        let z = model.forward_features(x).unwrap();
        let zeros = z.data().iter().filter(|&&v| v == 0.0).count();
        zero_frac += zeros as f64 / z.len() as f64;
        mean_abs += z.data().iter().map(|&v| v.abs() as f64).sum::<f64>() / z.len() as f64;
    }
    println!("probe-layer: zero fraction {:.3}, mean |z| {:.5}",
        zero_frac / 32.0, mean_abs / 32.0);
}
