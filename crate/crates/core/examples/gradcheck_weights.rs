// scratch: finite-difference check of conv weight/bias gradients
use cavlab_core::cnn::Conv3x3;
use cavlab_core::rng::SplitMix64;
use cavlab_core::tensor::{random_uniform, Tensor};

fn main() {
    let mut rng = SplitMix64::new(3);
    let input = random_uniform(&[4, 10, 10], -1.0, 1.0, &mut rng);
    let upstream = random_uniform(&[6, 10, 10], -1.0, 1.0, &mut rng);
    let conv = Conv3x3 {
        weights: random_uniform(&[6, 4, 3, 3], -0.3, 0.3, &mut rng),
        bias: random_uniform(&[6], -0.1, 0.1, &mut rng),
    };

    // objective: dot(conv(input), upstream) — linear in the weights
    let objective = |c: &Conv3x3| -> f64 { c.forward(&input).dot(&upstream).unwrap() };

    let (gw, gb) = conv.backward_params(&input, &upstream);
    let h = 1e-3f32;
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let i = rng.range_usize(gw.len());
        let mut cp = conv.clone();
        cp.weights.data_mut()[i] += h;
        let mut cm = conv.clone();
        cm.weights.data_mut()[i] -= h;
        let fd = (objective(&cp) - objective(&cm)) / (2.0 * h as f64);
        let an = gw[i];
        let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
        if rel > 1e-3 {
            println!("W[{i}]: analytic {an:+.6e} fd {fd:+.6e} rel {rel:.2e} BAD");
        }
    }
    for i in 0..6 {
        let mut cp = conv.clone();
        cp.bias.data_mut()[i] += h;
        let mut cm = conv.clone();
        cm.bias.data_mut()[i] -= h;
        let fd = (objective(&cp) - objective(&cm)) / (2.0 * h as f64);
        let an = gb[i];
        let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
        if rel > 1e-3 {
            println!("b[{i}]: analytic {an:+.6e} fd {fd:+.6e} rel {rel:.2e} BAD");
        }
    }
    println!("worst relative error: {worst:.3e}");
}
