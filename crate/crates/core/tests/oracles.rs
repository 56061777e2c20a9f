mod common;

use std::collections::BTreeMap;

use common::*;
use maskunet::analysis::{alignment_score, frechet_gaussian};
use maskunet::denoiser::{timestep_embeddings, DenoiserConfig, DenoiserModel};
use maskunet::diffusion::{self, add_noise, ddim_step, predict_x0};
use maskunet::freeopt::{evaluate_reward, RewardKind, RewardSpec};
use maskunet::mask::{self, MaskGeneratorConfig, MaskMap, MaskTensor};
use maskunet::rng::{self, Rng};
use maskunet::{Mixture, MixtureSpec, NoiseSchedule, SampleSet, Tape, Tensor};
use rand::Rng as _;

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = rng::seeded(1);
    let a = uniform(&[7, 5], -2.0, 2.0, &mut rng);
    let b = uniform(&[5, 3], -2.0, 2.0, &mut rng);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    assert!(max_abs(&out.value(), &matmul_loop(&a, &b)) <= 1e-12);
}

fn random_case(rng: &mut Rng) -> (Tensor, Tensor, Tensor, Tensor) {
    let b = rng.random_range(1..=8);
    let n = rng.random_range(1..=16);
    let ci = rng.random_range(1..=16);
    let co = rng.random_range(1..=16);
    (
        uniform(&[b, n, ci], -2.0, 2.0, rng),
        uniform(&[co, ci], -2.0, 2.0, rng),
        binary(&[b, co, ci], 0.7, rng),
        uniform(&[co], -1.0, 1.0, rng),
    )
}

#[test]
fn batched_kernels_match_per_sample_loops() {
    for case in 0..100 {
        let mut rng = rng::keyed(3, &[case]);
        let (h, w, m, bias) = random_case(&mut rng);
        let tape = Tape::new();
        let w_hat = mask::apply_mask(tape.constant(w.clone()), tape.constant(m.clone())).unwrap();
        assert!(max_abs(&w_hat.value(), &apply_mask_loop(&w, &m)) <= 1e-12);

        let dense = uniform(m.shape(), -2.0, 2.0, &mut rng);
        let out = tape.constant(h.clone()).bmm(tape.constant(dense.clone())).unwrap();
        assert!(max_abs(&out.value(), &bmm_loop(&h, &dense)) <= 1e-12);

        let lin = mask::masked_linear(tape.constant(h.clone()), w_hat, tape.constant(bias.clone())).unwrap();
        assert!(max_abs(&lin.value(), &masked_linear_loop(&h, &w, &m, &bias)) <= 1e-12);
    }
}

#[test]
fn broadcast_weight_gradient_sums_over_batch() {
    let mut rng = rng::seeded(4);
    let (b, co, ci) = (5, 3, 4);
    let w = uniform(&[co, ci], -1.0, 1.0, &mut rng);
    let m = uniform(&[b, co, ci], -1.0, 1.0, &mut rng);
    let up = uniform(&[b, co, ci], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let wv = tape.param(w);
    let out = tape.constant(m.clone()).mul(wv).unwrap();
    let loss = out.mul(tape.constant(up.clone())).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    let mut expect = vec![0.0; co * ci];
    for bi in 0..b {
        for k in 0..co * ci {
            expect[k] += m.data()[bi * co * ci + k] * up.data()[bi * co * ci + k];
        }
    }
    let expect = Tensor::new(&[co, ci], expect).unwrap();
    assert!(max_abs(&tape.grad(wv).unwrap(), &expect) <= 1e-12);
}

#[test]
fn mse_matches_loop() {
    let mut rng = rng::seeded(5);
    let a = uniform(&[6, 3], -2.0, 2.0, &mut rng);
    let b = uniform(&[6, 3], -2.0, 2.0, &mut rng);
    let tape = Tape::new();
    let got = tape.constant(a.clone()).mse(tape.constant(b.clone())).unwrap().value().item().unwrap();
    let mut s = 0.0;
    for i in 0..18 {
        s += (a.data()[i] - b.data()[i]).powi(2);
    }
    assert!((got - s / 18.0).abs() <= 1e-12);
}

fn linear_loop(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| b.data()[o] + (0..inp).map(|i| w.data()[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

#[test]
fn mask_logits_match_loop_mlp() {
    let model = DenoiserConfig::default();
    let cfg = MaskGeneratorConfig {
        init_output_scale: 1.0,
        init_logit: 0.3,
        ..MaskGeneratorConfig::for_layer(&model, "hidden1").unwrap()
    };
    let gen = mask::MaskGenerator::new(cfg, 8).unwrap();
    let mut rng = rng::seeded(9);
    let fused = uniform(&[4, gen.config.in_channels], -2.0, 2.0, &mut rng);
    let tape = Tape::new();
    let p = gen.params.bind(&tape, false);
    let got = gen.mask_logits(&p, tape.constant(fused.clone())).unwrap().value();
    let prm = |n: &str| gen.params.get(n).unwrap();
    let c = gen.config.in_channels;
    for r in 0..4 {
        let x = &fused.data()[r * c..(r + 1) * c];
        let h = relu(linear_loop(x, prm("mlp0.weight"), prm("mlp0.bias")));
        let h = relu(linear_loop(&h, prm("mlp1.weight"), prm("mlp1.bias")));
        let h = linear_loop(&h, prm("mlp2.weight"), prm("mlp2.bias"));
        let out = linear_loop(&h, prm("mlp3.weight"), prm("mlp3.bias"));
        let c2 = out.len();
        for (k, v) in out.iter().enumerate() {
            assert!((got.data()[r * c2 + k] - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn masked_forward_matches_zeroed_weight_copies() {
    let cfg = DenoiserConfig::default();
    let model = DenoiserModel::new(cfg.clone(), 13).unwrap();
    let mut rng = rng::seeded(14);
    let b = 4;
    let z = rng::normal_tensor(&[b, 2], &mut rng);
    let ts = [3, 500, 999, 120];
    let classes = [0, 7, 8, 2];
    let bits: BTreeMap<String, Tensor> = cfg
        .maskable_layers
        .iter()
        .map(|id| {
            let (o, i) = cfg.layer_shape(id).unwrap();
            (id.clone(), binary(&[b, o, i], 0.8, &mut rng))
        })
        .collect();

    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let masks: MaskMap<'_> = bits
        .iter()
        .map(|(k, v)| (k.clone(), MaskTensor::hard(tape.constant(v.clone()))))
        .collect();
    let got = model
        .forward(&p, tape.constant(z.clone()), &ts, &classes, &masks)
        .unwrap()
        .value();

    for s in 0..b {
        let mut copy = model.clone();
        for (id, m) in &bits {
            let w = copy.params.get_mut(&format!("{id}.weight")).unwrap();
            let n = w.numel();
            for (k, v) in w.data_mut().iter_mut().enumerate() {
                if m.data()[s * n + k] == 0.0 {
                    *v = 0.0;
                }
            }
        }
        let row = z.slice_rows(s, s + 1).unwrap();
        let want = copy.predict(&row, &ts[s..s + 1], &classes[s..s + 1]).unwrap();
        for d in 0..2 {
            assert!((got.data()[s * 2 + d] - want.data()[d]).abs() <= 1e-12);
        }
    }
}

#[test]
fn timestep_embedding_matches_formula() {
    let e = timestep_embeddings(&[1], 4).unwrap();
    let want = [1f64.sin(), 1e-4f64.sin(), 1f64.cos(), 1e-4f64.cos()];
    for (g, w) in e.data().iter().zip(want) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn forward_process_formulas_match_scalar_loops() {
    let s = sched();
    let mut rng = rng::seeded(15);
    let z0 = uniform(&[5, 2], -2.0, 2.0, &mut rng);
    let eps = rng::normal_tensor(&[5, 2], &mut rng);
    let tape = Tape::new();
    for t in [0, 17, 500, 999] {
        let ab: f64 = s.alphas[..=t].iter().product();
        let zt = add_noise(tape.constant(z0.clone()), tape.constant(eps.clone()), t, &s).unwrap();
        let x0 = predict_x0(zt, tape.constant(eps.clone()), Some(t), &s).unwrap();
        for i in 0..10 {
            let want = ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            assert!((zt.value().data()[i] - want).abs() <= 1e-12);
            let inv = (want - (1.0 - ab).sqrt() * eps.data()[i]) / ab.sqrt();
            assert!((x0.value().data()[i] - inv).abs() <= 1e-12);
            assert!((x0.value().data()[i] - z0.data()[i]).abs() <= 1e-10);
        }
    }
}

#[test]
fn stochastic_ddim_step_matches_scalar_formula() {
    let s = sched();
    let mut rng = rng::seeded(16);
    let z = rng::normal_tensor(&[4, 2], &mut rng);
    let eps = rng::normal_tensor(&[4, 2], &mut rng);
    let xi = rng::normal_tensor(&[4, 2], &mut rng);
    let tape = Tape::new();
    for (t, tp) in [(999, Some(979)), (500, Some(480)), (19, None)] {
        let out = ddim_step(tape.constant(z.clone()), tape.constant(eps.clone()), t, tp, 1.0, Some(&xi), &s)
            .unwrap()
            .value();
        let ab_t: f64 = s.alphas[..=t].iter().product();
        let ab_p: f64 = tp.map_or(1.0, |p| s.alphas[..=p].iter().product());
        let sigma = ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
        for i in 0..8 {
            let x0 = (z.data()[i] - (1.0 - ab_t).sqrt() * eps.data()[i]) / ab_t.sqrt();
            let want = ab_p.sqrt() * x0
                + (1.0 - ab_p - sigma * sigma).max(0.0).sqrt() * eps.data()[i]
                + sigma * xi.data()[i];
            assert!((out.data()[i] - want).abs() <= 1e-12, "t={t} i={i}");
        }
    }
}

#[test]
fn diffusion_loss_matches_per_example_loop() {
    let s = sched();
    let mut rng = rng::seeded(17);
    let z0 = uniform(&[6, 2], -2.0, 2.0, &mut rng);
    let tape = Tape::new();
    let mut draw = rng::seeded(18);
    let loss = diffusion::diffusion_loss(&tape, &z0, &s, &mut draw, |z_t, _| z_t.scale(0.3))
        .unwrap()
        .value()
        .item()
        .unwrap();

    let mut oracle = rng::seeded(18);
    let ts: Vec<usize> = (0..6).map(|_| oracle.random_range(0..1000)).collect();
    let mut total = 0.0;
    let eps: Vec<f64> = (0..12).map(|_| rng::normal(&mut oracle)).collect();
    for (r, &t) in ts.iter().enumerate() {
        let ab: f64 = s.alphas[..=t].iter().product();
        for d in 0..2 {
            let i = r * 2 + d;
            let zt = ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps[i];
            total += (0.3 * zt - eps[i]).powi(2);
        }
    }
    assert!((loss - total / 12.0).abs() <= 1e-12);
}

fn ring() -> Mixture {
    Mixture::from_spec(&MixtureSpec::default()).unwrap()
}

fn density_loop(m: &Mixture, x: [f64; 2]) -> f64 {
    let var = m.std * m.std;
    let mut p = 0.0;
    for mu in &m.means {
        let d2 = (x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2);
        p += (-d2 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var);
    }
    (p / m.means.len() as f64).ln()
}

#[test]
fn mixture_loglik_matches_direct_density() {
    let m = ring();
    let spec = RewardSpec {
        kind: RewardKind::MixtureLoglik,
        weight: 1.0,
    };
    let mut rng = rng::seeded(19);
    for _ in 0..50 {
        let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let got = evaluate_reward(x, 0, &spec, &m).unwrap();
        assert!((got - density_loop(&m, x)).abs() <= 1e-12);
    }
}

#[test]
fn alignment_matches_bayes_loop() {
    let m = ring();
    let mut rng = rng::seeded(20);
    let pts = uniform(&[40, 2], -1.5, 1.5, &mut rng);
    let labels: Vec<usize> = (0..40).map(|i| i % 8).collect();
    let var = m.std * m.std;
    let lik = |x: &[f64], mu: [f64; 2]| (-((x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2)) / (2.0 * var)).exp();
    let mut total = 0.0;
    for (r, &c) in labels.iter().enumerate() {
        let x = &pts.data()[r * 2..r * 2 + 2];
        let den: f64 = m.means.iter().map(|mu| lik(x, *mu)).sum();
        total += lik(x, m.means[c]) / den;
    }
    let set = SampleSet::new(pts, Some(labels), "oracle").unwrap();
    assert!((alignment_score(&set, &m).unwrap() - total / 40.0).abs() <= 1e-12);
}

/// Sample mean and unbiased covariance of an `M×2` set by plain loops.
fn moments2(p: &Tensor) -> ([f64; 2], [[f64; 2]; 2]) {
    let m = p.shape()[0];
    let mut mu = [0.0; 2];
    for r in 0..m {
        for d in 0..2 {
            mu[d] += p.data()[r * 2 + d] / m as f64;
        }
    }
    let mut c = [[0.0; 2]; 2];
    for r in 0..m {
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += (p.data()[r * 2 + i] - mu[i]) * (p.data()[r * 2 + j] - mu[j]) / (m as f64 - 1.0);
            }
        }
    }
    (mu, c)
}

#[test]
fn frechet_matches_two_by_two_closed_form() {
    for seed in 0..10 {
        let mut rng = rng::keyed(21, &[seed]);
        let mut set = |shift: f64| {
            let a = uniform(&[2, 2], -1.0, 1.0, &mut rng);
            let mut data = Vec::with_capacity(400);
            for _ in 0..200 {
                let (g0, g1) = (rng::normal(&mut rng), rng::normal(&mut rng));
                data.push(shift + (a.data()[0] + 1.0) * g0 + a.data()[1] * g1);
                data.push(-shift + a.data()[2] * g0 + (a.data()[3] + 1.0) * g1);
            }
            Tensor::new(&[200, 2], data).unwrap()
        };
        let (pa, pb) = (set(0.0), set(0.7));
        let (ma, ca) = moments2(&pa);
        let (mb, cb) = moments2(&pb);
        let prod = [
            [ca[0][0] * cb[0][0] + ca[0][1] * cb[1][0], ca[0][0] * cb[0][1] + ca[0][1] * cb[1][1]],
            [ca[1][0] * cb[0][0] + ca[1][1] * cb[1][0], ca[1][0] * cb[0][1] + ca[1][1] * cb[1][1]],
        ];
        let det = |c: [[f64; 2]; 2]| c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let tr_sqrt = (prod[0][0] + prod[1][1] + 2.0 * (det(ca) * det(cb)).sqrt()).sqrt();
        let want = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1]
            - 2.0 * tr_sqrt;
        let got = frechet_gaussian(&pa, &pb).unwrap();
        assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    }
}
