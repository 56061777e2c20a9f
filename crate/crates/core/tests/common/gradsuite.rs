use super::*;
use maskunet::denoiser::{DenoiserConfig, DenoiserModel};
use maskunet::mask::{self, MaskGeneratorConfig};
use maskunet::rng::{self, Rng};
use maskunet::{diffusion, GeneratorSet, NoiseSchedule, Result, Tape, Tensor, Var};
use rand::Rng as _;

pub const PROBES: u64 = 100;

pub type Build = fn(&mut Rng) -> Vec<Tensor>;
pub type Op = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

const RELU_GAP: f64 = 1e-2;

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4))
}

fn pair(rng: &mut Rng) -> Vec<Tensor> {
    let (a, b, _) = dims(rng);
    vec![uniform(&[a, b], -1.5, 1.5, rng), uniform(&[a, b], -1.5, 1.5, rng)]
}

fn single(rng: &mut Rng) -> Vec<Tensor> {
    let (a, b, _) = dims(rng);
    vec![uniform(&[a, b], -1.5, 1.5, rng)]
}

pub fn cases() -> Vec<(&'static str, Build, Op)> {
    vec![
        ("add", pair, |_, v| project(v[0].add(v[1])?, 1)),
        ("sub", pair, |_, v| project(v[0].sub(v[1])?, 2)),
        ("mul", pair, |_, v| project(v[0].mul(v[1])?, 3)),
        (
            "mul_batch_broadcast",
            |rng| {
                let (b, o, i) = dims(rng);
                vec![uniform(&[b, o, i], -1.5, 1.5, rng), uniform(&[o, i], -1.5, 1.5, rng)]
            },
            |_, v| project(v[0].mul(v[1])?, 4),
        ),
        (
            "add_bias_broadcast",
            |rng| {
                let (b, o, _) = dims(rng);
                vec![uniform(&[b, o], -1.5, 1.5, rng), uniform(&[o], -1.5, 1.5, rng)]
            },
            |_, v| project(v[0].add(v[1])?, 5),
        ),
        (
            "mul_scalar_broadcast",
            |rng| {
                let (a, b, _) = dims(rng);
                vec![uniform(&[a, b], -1.5, 1.5, rng), uniform(&[1], -1.5, 1.5, rng)]
            },
            |_, v| project(v[0].mul(v[1])?, 6),
        ),
        ("scale", single, |_, v| project(v[0].scale(-2.5)?, 7)),
        ("add_scalar", single, |_, v| project(v[0].add_scalar(0.75)?, 8)),
        (
            "relu",
            |rng| vec![away_from_zero(&[3, 4], RELU_GAP, rng)],
            |_, v| project(v[0].relu()?, 9),
        ),
        ("sigmoid", single, |_, v| project(v[0].sigmoid()?, 10)),
        ("exp", single, |_, v| project(v[0].exp()?, 11)),
        (
            "log",
            |rng| vec![uniform(&[3, 3], 0.5, 2.0, rng)],
            |_, v| project(v[0].log()?, 12),
        ),
        (
            "matmul",
            |rng| {
                let (m, k, n) = dims(rng);
                vec![uniform(&[m, k], -1.5, 1.5, rng), uniform(&[k, n], -1.5, 1.5, rng)]
            },
            |_, v| project(v[0].matmul(v[1])?, 13),
        ),
        (
            "matmul_nt",
            |rng| {
                let (m, k, n) = dims(rng);
                vec![uniform(&[m, k], -1.5, 1.5, rng), uniform(&[n, k], -1.5, 1.5, rng)]
            },
            |_, v| project(v[0].matmul_nt(v[1])?, 14),
        ),
        (
            "bmm",
            |rng| {
                let (b, n, ci) = dims(rng);
                let co = rng.random_range(1..4);
                vec![uniform(&[b, n, ci], -1.5, 1.5, rng), uniform(&[b, co, ci], -1.5, 1.5, rng)]
            },
            |_, v| project(v[0].bmm(v[1])?, 15),
        ),
        ("sum", single, |_, v| v[0].sum()?.scale(0.5)),
        ("mean", single, |_, v| v[0].mean()),
        ("sum_last", single, |_, v| project(v[0].sum_last()?, 16)),
        ("logsumexp_last", single, |_, v| project(v[0].logsumexp_last()?, 17)),
        ("mse", pair, |_, v| v[0].mse(v[1])),
        ("reshape", single, |_, v| {
            let n = v[0].value().numel();
            project(v[0].reshape(&[n])?, 18)
        }),
        (
            "gather_rows",
            |rng| vec![uniform(&[4, 3], -1.5, 1.5, rng)],
            |_, v| project(v[0].gather_rows(&[2, 0, 2, 3])?, 19),
        ),
        (
            "gap_image",
            |rng| vec![uniform(&[2, 3, 2, 2], -1.5, 1.5, rng)],
            |_, v| project(mask::gap(v[0])?, 20),
        ),
        (
            "apply_mask",
            |rng| {
                let (b, o, i) = dims(rng);
                vec![uniform(&[o, i], -1.5, 1.5, rng), uniform(&[b, o, i], 0.05, 0.95, rng)]
            },
            |_, v| project(mask::apply_mask(v[0], v[1])?, 21),
        ),
        (
            "masked_linear",
            |rng| {
                let (b, n, ci) = dims(rng);
                let co = rng.random_range(1..4);
                vec![
                    uniform(&[b, n, ci], -1.5, 1.5, rng),
                    uniform(&[b, co, ci], -1.5, 1.5, rng),
                    uniform(&[co], -1.5, 1.5, rng),
                ]
            },
            |_, v| project(mask::masked_linear(v[0], v[1], v[2])?, 22),
        ),
        (
            "gumbel_sigmoid_soft",
            |rng| vec![uniform(&[2, 3, 2], -2.0, 2.0, rng)],
            |_, v| {
                let mut noise = rng::seeded(99);
                let m = mask::gumbel_sigmoid(v[0], 0.7, 0.5, false, Some(&mut noise))?;
                project(m.values, 23)
            },
        ),
    ]
}

/// Worst relative error of one op over all probes.
pub fn op_error(build: Build, op: Op) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for probe in 0..PROBES {
        let mut rng = rng::keyed(2024, &[probe]);
        let inputs = build(&mut rng);
        worst = worst.max(check_gradients(&inputs, Stencil::FourthOrder, op)?);
    }
    Ok(worst)
}

/// `mean(exp(sigmoid(xw) ⊙ xw))` against the two-point stencil.
pub fn composite_error() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for probe in 0..PROBES {
        let mut rng = rng::keyed(77, &[probe]);
        let inputs = vec![uniform(&[3, 4], -1.0, 1.0, &mut rng), uniform(&[4, 2], -1.0, 1.0, &mut rng)];
        let err = check_gradients(&inputs, Stencil::TwoPoint, |_, v| {
            let h = v[0].matmul(v[1])?;
            h.sigmoid()?.mul(h)?.exp()?.mean()
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn small_model() -> (DenoiserModel, GeneratorSet) {
    let cfg = DenoiserConfig {
        data_dim: 2,
        hidden_dim: 6,
        temb_dim: 4,
        num_classes: 3,
        maskable_layers: vec!["hidden1".into(), "hidden2".into()],
    };
    let model = DenoiserModel::new(cfg.clone(), 3).unwrap();
    let gens: Vec<MaskGeneratorConfig> = ["hidden1", "hidden2"]
        .iter()
        .map(|id| MaskGeneratorConfig {
            mlp_hidden: 5,
            init_logit: 0.5,
            init_output_scale: 1.0,
            ..MaskGeneratorConfig::for_layer(&cfg, id).unwrap()
        })
        .collect();
    (model, GeneratorSet::new(&gens, 4).unwrap())
}

fn e2e_loss<'t>(
    tape: &'t Tape,
    model: &DenoiserModel,
    gens: &GeneratorSet,
    trainable: bool,
) -> Result<(Var<'t>, maskunet::params::Bound<'t>, maskunet::mask::BoundGenerators<'t>)> {
    let sched = NoiseSchedule::linear(50, 1e-3, 0.2)?;
    let mut rng = rng::seeded(11);
    let z0 = rng::normal_tensor(&[16, 2], &mut rng);
    let classes: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let p = model.bind(tape, trainable);
    let gb = gens.bind(tape, trainable);
    let mut noise = rng::seeded(12);
    let loss = diffusion::diffusion_loss(tape, &z0, &sched, &mut rng, |z_t, ts| {
        let masks = gens.generate_masks(&gb, ts, z_t, false, Some(&mut noise))?;
        model.forward(&p, z_t, ts, &classes, &masks)
    })?;
    Ok((loss, p, gb))
}

/// Diffusion loss through soft generator masks, probed at random
/// denoiser and generator coordinates.
pub fn end_to_end_error() -> Result<f64> {
    let (model, gens) = small_model();
    let tape = Tape::new();
    let (loss, p, gb) = e2e_loss(&tape, &model, &gens, true)?;
    tape.backward(loss)?;
    let dgrads = p.grads();
    let ggrads = gb.grads();

    let eval = |m: &DenoiserModel, g: &GeneratorSet| {
        let tape = Tape::new();
        let (l, _, _) = e2e_loss(&tape, m, g, false).unwrap();
        l.value().item().unwrap()
    };
    let mut coords: Vec<(Option<String>, String, usize)> = Vec::new();
    for (name, t) in model.params.iter() {
        coords.extend((0..t.numel()).map(|i| (None, name.clone(), i)));
    }
    for (layer, g) in &gens.generators {
        for (name, t) in g.params.iter() {
            coords.extend((0..t.numel()).map(|i| (Some(layer.clone()), name.clone(), i)));
        }
    }
    let mut rng = rng::seeded(21);
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let (layer, name, i) = &coords[rng.random_range(0..coords.len())];
        let shifted = |delta: f64| {
            let (mut m, mut g) = (model.clone(), gens.clone());
            let store = match layer {
                None => &mut m.params,
                Some(l) => &mut g.generators.get_mut(l).unwrap().params,
            };
            store.get_mut(name).unwrap().data_mut()[*i] += delta;
            eval(&m, &g)
        };
        let numeric = central_difference(Stencil::FourthOrder, |d| Ok(shifted(d)))?;
        let analytic = match layer {
            None => dgrads[name].data()[*i],
            Some(l) => ggrads[l][name].data()[*i],
        };
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(worst)
}
