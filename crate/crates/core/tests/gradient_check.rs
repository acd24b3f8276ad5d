//! Generator → classifier → targeted cross-entropy, checked against central differences.

use condattack::generator::{Generator, GeneratorConfig, Phase, SmoothingMode};
use condattack::loss::cross_entropy;
use condattack::zoo::{Arch, Network};
use condattack::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_generator(mode: SmoothingMode, rng: &mut ChaCha8Rng) -> Generator<f64> {
    let cfg = GeneratorConfig {
        latent_dim: 4,
        base_channels: 3,
        residual_blocks: 1,
        num_classes: 5,
        mapping_hidden: 6,
        smoothing_mode: mode,
        ..GeneratorConfig::default()
    };
    let mut g = Generator::<f32>::new(cfg, rng).unwrap().cast::<f64>();
    // the output conv starts at zero; give every parameter a generic value
    for p in g.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    g
}

fn pipeline_loss(g: &Generator<f64>, net: &Network<f64>, x: &Tensor<f64>, t: &[usize]) -> f64 {
    let out = g.generate(x, t, Phase::Train).unwrap();
    let (logits, _) = net.forward(&out.adversarial).unwrap();
    cross_entropy(&logits, t).unwrap().0
}

fn check(mode: SmoothingMode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = tiny_generator(mode, &mut rng);
    let net = Network::<f32>::new(Arch::Wide, [3, 8, 8], 5, false, seed).cast::<f64>();
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.3..0.7));
    let t = [1, 4];

    let (out, tape) = g.forward(&x, &t, Phase::Train).unwrap();
    let (logits, net_tape) = net.forward(&out.adversarial).unwrap();
    let (_, dlogits) = cross_entropy(&logits, &t).unwrap();
    let d_adv = net.input_grad(&net_tape, &dlogits);
    let mut grads = g.zero_grads();
    g.backward(&tape, &d_adv, &mut grads);

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let count = g.params().len();
    for p in 0..count {
        let len = g.params()[p].len();
        let picks: Vec<usize> = if len <= 24 {
            (0..len).collect()
        } else {
            (0..24).map(|_| rng.random_range(0..len)).collect()
        };
        for i in picks {
            let orig = g.params()[p].data()[i];
            g.params_mut()[p].data_mut()[i] = orig + h;
            let up = pipeline_loss(&g, &net, &x, &t);
            g.params_mut()[p].data_mut()[i] = orig - h;
            let down = pipeline_loss(&g, &net, &x, &t);
            g.params_mut()[p].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[p].data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            worst = worst.max(rel);
            checked += 1;
            assert!(rel < 1e-4, "{mode:?} param {p}[{i}]: analytic {an:e} vs numeric {fd:e}");
        }
    }
    assert!(checked > 100);
    eprintln!("{mode:?}: {checked} coordinates, worst relative error {worst:.2e}");
}

#[test]
fn adaptive_pipeline_gradient_matches_central_differences() {
    check(SmoothingMode::Adaptive, 11);
}

#[test]
fn plain_tanh_pipeline_gradient_matches_central_differences() {
    check(SmoothingMode::None, 12);
}
