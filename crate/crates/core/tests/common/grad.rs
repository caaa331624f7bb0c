//! Analytic gradients against central finite differences (step 1e-3, f64).
//! Coordinates whose perturbation flips a ReLU/LeakyReLU kink are skipped.
//! Every case panics on a mismatch.

use blocksynth::conditioning::{raw_window, ConditioningBatch, ConditioningSpec, FrameAnnotations};
use blocksynth::config::{ReconNorm, TrainingConfig};
use blocksynth::model::{Architecture, Critic, Generator};
use blocksynth::nn::{Activation, ConvLayerSpec, NetworkParams, Tape, Tensor, Var};
use blocksynth::training::reconstruction_on_tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const MAX_REL: f64 = 1e-4;
/// Below this magnitude both gradients count as zero.
const FLOOR: f64 = 1e-8;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Loss = sum(output * fixed random weights), so every output element matters.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let w = rand_tensor(&mut rng, &shape, 1.0);
    let wv = tape.constant(&w);
    let prod = tape.mul(out, wv).unwrap();
    tape.sum(prod)
}

struct Report {
    checked: usize,
    worst: f64,
}

/// `build` maps leaf vars (one per input tensor) to a scalar loss.
/// Checks `coords` sampled `(input, index)` positions.
fn check<F>(inputs: &[Tensor], coords: &[(usize, usize)], build: F) -> Report
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| -> (f64, Vec<bool>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars);
        (tape.scalar(loss), tape.kink_signature())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();
    let base_kinks = tape.kink_signature();

    let mut report = Report {
        checked: 0,
        worst: 0.0,
    };
    for &(i, j) in coords {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= STEP;
        let (lp, kp) = eval(&plus);
        let (lm, km) = eval(&minus);
        if kp != base_kinks || km != base_kinks {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        let analytic = grads[i][j];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < FLOOR { 0.0 } else { (analytic - numeric).abs() / scale };
        assert!(
            rel < MAX_REL,
            "input {i} index {j}: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})"
        );
        report.checked += 1;
        report.worst = report.worst.max(rel);
    }
    report
}

fn sample_coords(rng: &mut ChaCha8Rng, inputs: &[Tensor], per_input: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..per_input.min(t.len()) {
            out.push((i, rng.gen_range(0..t.len())));
        }
    }
    out
}

fn conv_case(seed: u64, stride: usize, kernel: usize, activation: Activation) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
    let t = rng.gen_range(3..12);
    let spec = ConvLayerSpec {
        in_channels: cin,
        out_channels: cout,
        kernel_size: kernel,
        stride,
        activation,
    };
    let inputs = vec![
        rand_tensor(&mut rng, &[b, cin, t], 1.0),
        rand_tensor(&mut rng, &[cout, cin, kernel], 0.8),
        rand_tensor(&mut rng, &[cout], 0.3),
    ];
    let coords = sample_coords(&mut rng, &inputs, 8);
    check(&inputs, &coords, |tape, v| {
        let out = tape.conv1d(v[0], v[1], v[2], &spec).unwrap();
        weighted_sum(tape, out, seed)
    })
}

fn assert_mostly_checked(r: &Report, what: &str) -> f64 {
    assert!(r.checked > 0, "{what}: every coordinate crossed a kink");
    assert!(r.worst < MAX_REL, "{what}: worst relative error {}", r.worst);
    r.worst
}

/// Returns the worst relative error seen.
pub fn conv_stride_one_all_activations() -> f64 {
    let mut worst = 0.0f64;
    let acts = [
        Activation::Identity,
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Tanh,
    ];
    for seed in 0..20 {
        for act in acts {
            let r = conv_case(seed, 1, 3, act);
            worst = worst.max(assert_mostly_checked(&r, &format!("stride 1 {act:?} seed {seed}")));
        }
    }
    worst
}

/// Returns the worst relative error seen.
pub fn conv_stride_two_all_activations() -> f64 {
    let mut worst = 0.0f64;
    let acts = [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Tanh];
    for seed in 0..20 {
        for act in acts {
            let r = conv_case(100 + seed, 2, 3, act);
            worst = worst.max(assert_mostly_checked(&r, &format!("stride 2 {act:?} seed {seed}")));
        }
    }
    worst
}

/// Returns the worst relative error seen.
pub fn one_by_one_projection() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let r = conv_case(200 + seed, 1, 1, Activation::Identity);
        worst = worst.max(assert_mostly_checked(&r, &format!("1x1 seed {seed}")));
    }
    worst
}

/// Returns the worst relative error seen.
pub fn upsample_then_conv_with_skip_concat() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (b, c, skip_c, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let t = rng.gen_range(2..7);
        let spec = ConvLayerSpec {
            in_channels: c + skip_c,
            out_channels: cout,
            kernel_size: 3,
            stride: 1,
            activation: Activation::Relu,
        };
        let inputs = vec![
            rand_tensor(&mut rng, &[b, c, t], 1.0),
            rand_tensor(&mut rng, &[b, skip_c, 2 * t], 1.0),
            rand_tensor(&mut rng, &[cout, c + skip_c, 3], 0.8),
            rand_tensor(&mut rng, &[cout], 0.3),
        ];
        let coords = sample_coords(&mut rng, &inputs, 8);
        let r = check(&inputs, &coords, |tape, v| {
            let up = tape.upsample(v[0], 2).unwrap();
            let cat = tape.concat_channels(&[up, v[1]]).unwrap();
            let out = tape.conv1d(cat, v[2], v[3], &spec).unwrap();
            weighted_sum(tape, out, 300 + seed)
        });
        worst = worst.max(assert_mostly_checked(&r, &format!("upsample+conv seed {seed}")));
    }
    worst
}

/// Returns the worst relative error seen.
pub fn linear_head_and_reshape() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (b, c, t, o) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..3));
        let inputs = vec![
            rand_tensor(&mut rng, &[b, c, t], 1.0),
            rand_tensor(&mut rng, &[o, c * t], 1.0),
            rand_tensor(&mut rng, &[o], 1.0),
        ];
        let coords = sample_coords(&mut rng, &inputs, 8);
        let r = check(&inputs, &coords, |tape, v| {
            let flat = tape.reshape(v[0], &[b, c * t]).unwrap();
            let out = tape.linear(flat, v[1], v[2]).unwrap();
            let sq = tape.square(out);
            tape.mean(sq)
        });
        worst = worst.max(assert_mostly_checked(&r, &format!("linear seed {seed}")));
    }
    worst
}

fn small_arch(seed: u64) -> Architecture {
    let mut cfg = TrainingConfig::default();
    cfg.width_multiplier = 0.125;
    cfg.block_size = 64;
    cfg.seed = seed;
    Architecture::new(
        cfg,
        ConditioningSpec {
            phonemes: 5,
            singers: 2,
            f0_min: 60.0,
            f0_max: 700.0,
        },
    )
    .unwrap()
}

fn batch(arch: &Architecture, rng: &mut ChaCha8Rng, b: usize) -> ConditioningBatch {
    let n = arch.block_size();
    let windows: Vec<_> = (0..b)
        .map(|_| {
            let ann = FrameAnnotations {
                phoneme_ids: (0..n).map(|_| rng.gen_range(0..5)).collect(),
                f0_hz: (0..n)
                    .map(|_| if rng.gen_bool(0.8) { rng.gen_range(80.0..500.0) } else { 0.0 })
                    .collect(),
                singer_id: rng.gen_range(0..2),
                frame_hop_ms: 5.0,
            };
            raw_window(&ann, &arch.conditioning, 0, n, arch.config.noise_channels, Some(rng.gen())).unwrap()
        })
        .collect();
    ConditioningBatch::from_windows(&windows, true).unwrap()
}

/// Samples coordinates spread over every layer of a network.
fn network_coords(rng: &mut ChaCha8Rng, params: &NetworkParams, per_tensor: usize) -> Vec<(usize, usize)> {
    let tensors: Vec<Tensor> = params.tensors().cloned().collect();
    sample_coords(rng, &tensors, per_tensor)
}

/// Returns the worst relative error seen.
pub fn full_generator_with_reconstruction_loss() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let arch = small_arch(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let g = Generator::new(arch.clone(), &mut rng);
        let cond = batch(&arch, &mut rng, 2);
        let target = rand_tensor(&mut rng, &[2, 64, 64], 0.9);
        let tensors: Vec<Tensor> = g.params.tensors().cloned().collect();
        let coords = network_coords(&mut rng, &g.params, 1);
        let r = check(&tensors, &coords, |tape, vars| {
            let binding = blocksynth::nn::ParamBinding {
                vars: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
            };
            let out = g.forward_on_tape(tape, &binding, &cond).unwrap();
            let y = tape.constant(&target);
            let recon = reconstruction_on_tape(tape, out, y, ReconNorm::L2).unwrap();
            let adv = weighted_sum(tape, out, seed);
            let scaled = tape.scale(recon, 0.01);
            tape.add(adv, scaled).unwrap()
        });
        worst = worst.max(assert_mostly_checked(&r, &format!("generator seed {seed}")));
    }
    worst
}

/// Returns the worst relative error seen.
pub fn full_critic_parameters_and_inputs() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let arch = small_arch(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let d = Critic::new(arch.clone(), &mut rng);
        let cond = batch(&arch, &mut rng, 2);
        let features = rand_tensor(&mut rng, &[2, 64, 64], 1.0);
        let mut tensors: Vec<Tensor> = d.params.tensors().cloned().collect();
        let mut coords = network_coords(&mut rng, &d.params, 1);
        tensors.push(features);
        let fi = tensors.len() - 1;
        for _ in 0..4 {
            coords.push((fi, rng.gen_range(0..tensors[fi].len())));
        }
        let r = check(&tensors, &coords, |tape, vars| {
            let binding = blocksynth::nn::ParamBinding {
                vars: vars[..fi].chunks(2).map(|c| (c[0], c[1])).collect(),
            };
            let ann = tape.constant(&cond.annotations);
            let scores = d.forward_on_tape(tape, &binding, vars[fi], ann).unwrap();
            let sq = tape.square(scores);
            let m = tape.mean(sq);
            let lin = tape.sum(scores);
            tape.add(m, lin).unwrap()
        });
        worst = worst.max(assert_mostly_checked(&r, &format!("critic seed {seed}")));
    }
    worst
}
