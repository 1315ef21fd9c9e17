#![allow(dead_code)]

pub mod oracle;

use rand::Rng;
use vesselgrade::autodiff::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
/// Minimum distance of generated relu inputs from the kink.
pub const KINK: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor. Central differences at `STEP` carry about 1e-10 of
/// round-off, which would swamp the relative error of gradients that are
/// exactly zero (conv bias ahead of batch norm).
pub const FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradReport {
    pub fn merge(self, o: GradReport) -> GradReport {
        GradReport {
            max_rel: self.max_rel.max(o.max_rel),
            checked: self.checked + o.checked,
            skipped: self.skipped + o.skipped,
        }
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel < TOLERANCE
    }
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> (f64, u64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.detached().with_grad())).collect();
    let loss = f(&mut tape, &vars);
    (tape.value(loss).item(), tape.branch_signature())
}

/// Reverse-mode gradients against central differences for every input
/// coordinate (or `limit` random ones per tensor). Coordinates whose
/// `±STEP` perturbation changes a relu sign or pooling choice straddle a
/// kink and are skipped.
pub fn grad_check(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    limit: Option<usize>,
    rng: &mut impl Rng,
) -> GradReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.detached().with_grad())).collect();
    let loss = f(&mut tape, &vars);
    let base = tape.branch_signature();
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    compare(inputs, &|t| eval(t, f), &analytic, base, limit, rng)
}

/// Checks `analytic` against central differences of `eval`, which returns
/// the loss and branch signature at the given inputs.
pub fn compare(
    inputs: &[Tensor],
    eval: &dyn Fn(&[Tensor]) -> (f64, u64),
    analytic: &[Vec<f64>],
    base: u64,
    limit: Option<usize>,
    rng: &mut impl Rng,
) -> GradReport {
    let mut report = GradReport::default();
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = match limit {
            Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let at = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += delta;
                eval(&moved)
            };
            let (lp, sp) = at(STEP);
            let (lm, sm) = at(-STEP);
            if sp != base || sm != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if std::env::var("GC_DEBUG").is_ok() && rel > 1e-5 {
                eprintln!("tensor {k} coord {i}: analytic {a:e} numeric {numeric:e} rel {rel:e}");
            }
            report.max_rel = report.max_rel.max(rel);
            report.checked += 1;
        }
    }
    report
}

/// Uniform values in [-2, 2] at least `KINK` away from zero.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let x: f64 = rng.gen_range(-2.0..2.0);
        if x.abs() >= KINK {
            break x;
        }
    })
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn mse_to(tape: &mut Tape, x: Var, target: &Tensor) -> Var {
    let t = tape.constant(target.clone());
    tape.mse_loss(x, t).expect("shapes agree")
}

/// Finite-difference checks of every layer on fresh random inputs.
pub fn layer_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    use rand::SeedableRng;
    use vesselgrade::autodiff::{Mode, RunningStats};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let tgt = uniform(r, &[1, 3, 5, 5], -1.0, 1.0);
    let inputs = [
        uniform(r, &[1, 2, 5, 5], -2.0, 2.0),
        uniform(r, &[3, 2, 3, 3], -2.0, 2.0),
        uniform(r, &[3], -2.0, 2.0),
    ];
    let f = move |t: &mut Tape, v: &[Var]| {
        let y = t.conv2d(v[0], v[1], v[2]).unwrap();
        mse_to(t, y, &tgt)
    };
    out.push(("conv2d", grad_check(&inputs, &f, None, r)));

    for mode in [Mode::Train, Mode::Eval] {
        let tgt = uniform(r, &[3, 2, 4, 4], -1.0, 1.0);
        let inputs = [
            uniform(r, &[3, 2, 4, 4], -2.0, 2.0),
            uniform(r, &[2], 0.5, 2.0),
            uniform(r, &[2], -2.0, 2.0),
        ];
        let mut stats = RunningStats::new(2, 0.9, 1e-5);
        stats.mean = vec![0.3, -0.2];
        stats.var = vec![1.5, 0.7];
        let f = move |t: &mut Tape, v: &[Var]| {
            let mut s = stats.clone();
            let y = t.batch_norm(v[0], v[1], v[2], &mut s, mode).unwrap();
            mse_to(t, y, &tgt)
        };
        let name = if mode == Mode::Train {
            "batch_norm/train"
        } else {
            "batch_norm/eval"
        };
        out.push((name, grad_check(&inputs, &f, None, r)));
    }

    let tgt = uniform(r, &[2, 3, 4], -1.0, 1.0);
    let inputs = [away_from_zero(r, &[2, 3, 4])];
    let f = move |t: &mut Tape, v: &[Var]| {
        let y = t.relu(v[0]);
        mse_to(t, y, &tgt)
    };
    out.push(("relu", grad_check(&inputs, &f, None, r)));

    let tgt = uniform(r, &[2, 2, 2, 3], -1.0, 1.0);
    let inputs = [uniform(r, &[2, 2, 4, 6], -2.0, 2.0)];
    let f = move |t: &mut Tape, v: &[Var]| {
        let y = t.max_pool2d(v[0]).unwrap();
        mse_to(t, y, &tgt)
    };
    out.push(("max_pool2d", grad_check(&inputs, &f, None, r)));

    let tgt = uniform(r, &[2, 3], -1.0, 1.0);
    let inputs = [uniform(r, &[2, 3, 4, 4], -2.0, 2.0)];
    let f = move |t: &mut Tape, v: &[Var]| {
        let y = t.global_max_pool_spatial(v[0]).unwrap();
        mse_to(t, y, &tgt)
    };
    out.push(("global_max_pool_spatial", grad_check(&inputs, &f, None, r)));

    let tgt = uniform(r, &[2, 5], -1.0, 1.0);
    let inputs = [uniform(r, &[2, 11, 5], -2.0, 2.0)];
    let f = move |t: &mut Tape, v: &[Var]| {
        let (y, _) = t.max_over_middle_axis(v[0]).unwrap();
        mse_to(t, y, &tgt)
    };
    out.push(("max_over_segments", grad_check(&inputs, &f, None, r)));

    let tgt = uniform(r, &[4], -1.0, 1.0);
    let inputs = [
        uniform(r, &[6], -2.0, 2.0),
        uniform(r, &[4, 6], -2.0, 2.0),
        uniform(r, &[4], -2.0, 2.0),
    ];
    let f = move |t: &mut Tape, v: &[Var]| {
        let y = t.fully_connected(v[0], v[1], v[2]).unwrap();
        mse_to(t, y, &tgt)
    };
    out.push(("fully_connected", grad_check(&inputs, &f, None, r)));

    let tgt = uniform(r, &[3, 4], -1.0, 1.0);
    let inputs = [
        uniform(r, &[3, 6], -2.0, 2.0),
        uniform(r, &[4, 6], -2.0, 2.0),
        uniform(r, &[4], -2.0, 2.0),
    ];
    let f = move |t: &mut Tape, v: &[Var]| {
        let y = t.fully_connected(v[0], v[1], v[2]).unwrap();
        mse_to(t, y, &tgt)
    };
    out.push(("fully_connected/batched", grad_check(&inputs, &f, None, r)));

    let inputs = [uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)];
    let f = |t: &mut Tape, v: &[Var]| t.mse_loss(v[0], v[1]).unwrap();
    out.push(("mse_loss", grad_check(&inputs, &f, None, r)));

    let inputs = [uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[6], -2.0, 2.0)];
    let f = |t: &mut Tape, v: &[Var]| {
        let a = t.reshape(v[0], &[6]).unwrap();
        let b = t.scale(v[1], -1.5);
        let s = t.add(a, b).unwrap();
        let tgt = t.constant(Tensor::zeros(&[6]));
        let l = t.mse_loss(s, tgt).unwrap();
        let m = t.sum(v[1]);
        t.add(l, m).unwrap()
    };
    out.push(("reshape/scale/add/sum", grad_check(&inputs, &f, None, r)));

    let tgt = uniform(r, &[2, 4], -1.0, 1.0);
    let inputs = [
        uniform(r, &[2, 2, 6, 6], -2.0, 2.0),
        uniform(r, &[3, 2, 3, 3], -2.0, 2.0),
        uniform(r, &[3], -2.0, 2.0),
        uniform(r, &[4, 108], -0.5, 0.5),
        uniform(r, &[4], -2.0, 2.0),
    ];
    let f = move |t: &mut Tape, v: &[Var]| {
        let c = t.conv2d(v[0], v[1], v[2]).unwrap();
        let a = t.relu(c);
        let flat = t.reshape(a, &[2, 108]).unwrap();
        let y = t.fully_connected(flat, v[3], v[4]).unwrap();
        mse_to(t, y, &tgt)
    };
    out.push(("conv→relu→fc→mse", grad_check(&inputs, &f, None, r)));
    out
}

pub fn downsized_model_config() -> vesselgrade::model::ModelConfig {
    vesselgrade::model::ModelConfig {
        input_planes: 2,
        input_height: 16,
        input_width: 8,
        conv_channels: vec![4, 8],
        feature_dim: 8,
        head_hidden: 4,
        ..Default::default()
    }
}

/// Random output layers, so gradients reach the extractor.
pub fn randomize_outputs(params: &mut vesselgrade::model::ModelParams, rng: &mut impl Rng) {
    for h in [
        &mut params.stenosis_head,
        &mut params.cadrads_head,
        &mut params.calc_head,
    ] {
        let n = h.out.weight.numel();
        h.out.weight = uniform(rng, &[1, n], -1.0, 1.0).with_grad();
        h.out.bias = uniform(rng, &[1], -1.0, 1.0).with_grad();
    }
}

/// Multi-task loss of the downsized network on two random patients,
/// differentiated with respect to every parameter.
pub fn model_check(seed: u64, limit: Option<usize>) -> GradReport {
    use rand::SeedableRng;
    use vesselgrade::autodiff::Mode;
    use vesselgrade::model::{forward_graph, multitask_loss, LossWeights, ModelParams, ParamGroup, ParamVars, Targets};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let config = downsized_model_config();
    let mut params = ModelParams::init(&config, seed).unwrap();
    randomize_outputs(&mut params, &mut rng);
    let input = uniform(&mut rng, &[22, 2, 16, 8], -2.0, 2.0);
    let targets = Targets {
        cadrads: Tensor::from_fn(&[2, 1], |_| rng.gen_range(0..6) as f64),
        stenosis: Tensor::from_fn(&[2, 11], |_| rng.gen_range(0..6) as f64),
        calc: Tensor::from_fn(&[2, 1], |_| rng.gen_range(0..5) as f64),
    };
    let run = |p: &ModelParams| {
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, p);
        let mut stats = p.running_stats();
        let x = tape.constant(input.clone());
        let g = forward_graph(&mut tape, &vars, &mut stats, x, Mode::Train).unwrap();
        let loss = multitask_loss(&mut tape, &g, &targets, &LossWeights::FULL).unwrap();
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = run(&params);
    let base = tape.branch_signature();
    tape.backward(loss).unwrap();
    let mut with_grads = params.clone();
    vars.collect_grads(&tape, &mut with_grads).unwrap();
    let tensors: Vec<Tensor> = params.tensors(&ParamGroup::ALL).into_iter().cloned().collect();
    let analytic: Vec<Vec<f64>> = with_grads
        .tensors(&ParamGroup::ALL)
        .into_iter()
        .map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let eval = |ts: &[Tensor]| {
        let mut p = params.clone();
        for (slot, t) in p.tensors_mut(&ParamGroup::ALL).into_iter().zip(ts) {
            *slot = t.clone();
        }
        let (tape, _, loss) = run(&p);
        (tape.value(loss).item(), tape.branch_signature())
    };
    compare(&tensors, &eval, &analytic, base, limit, &mut rng)
}

/// Backpropagates the patient losses of random eval-mode passes to the input.
/// Returns the number of segments with no pooled feature that still got
/// gradient, and the number of segments that got any.
pub fn isolation_trials(seed: u64, trials: u64) -> (usize, usize) {
    use rand::SeedableRng;
    use vesselgrade::autodiff::Mode;
    use vesselgrade::model::{
        explain, forward_graph, multitask_loss, outputs, LossWeights, ModelParams, ParamVars, Targets,
    };
    let config = downsized_model_config();
    let weights = LossWeights {
        cadrads: 1.0,
        stenosis: 0.0,
        calc: 1.0,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut leaked, mut reached) = (0, 0);
    for trial in 0..trials {
        let mut params = ModelParams::init(&config, seed.wrapping_add(trial)).unwrap();
        randomize_outputs(&mut params, &mut rng);
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params);
        let x = tape.leaf(uniform(&mut rng, &[22, 2, 16, 8], 0.0, 1.0).with_grad());
        let mut stats = params.running_stats();
        let g = forward_graph(&mut tape, &vars, &mut stats, x, Mode::Eval).unwrap();
        let targets = Targets {
            cadrads: Tensor::from_fn(&[2, 1], |_| rng.gen_range(0..6) as f64),
            stenosis: Tensor::zeros(&[2, 11]),
            calc: Tensor::from_fn(&[2, 1], |_| rng.gen_range(0..5) as f64),
        };
        let loss = multitask_loss(&mut tape, &g, &targets, &weights).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(x).unwrap();
        let per = 2 * 16 * 8;
        for (b, o) in outputs(&tape, &g).iter().enumerate() {
            let counts = explain(o);
            for (s, &c) in counts.iter().enumerate() {
                let seg = &grad[(b * 11 + s) * per..(b * 11 + s + 1) * per];
                let silent = seg.iter().all(|&v| v == 0.0);
                if c == 0 && !silent {
                    leaked += 1;
                }
                if !silent {
                    reached += 1;
                }
            }
        }
    }
    (leaked, reached)
}
