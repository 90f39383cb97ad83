//! Analytic gradients against central finite differences, double precision,
//! toy models of at most 1k parameters.

use atop_core::attacks::{objective_gradient, stadv_objective, GradientEstimatorConfig, Objective};
use atop_core::models::{
    purify_with_draw, Bound, Classifier, ClassifierArch, ClassifierNet, Critic, DiscriminatorArch, DiscriminatorNet,
    Params, Pipeline, Purifier, PurifierArch, PurifierGrad, PurifierNet, PurifierVariant,
};
use atop_core::training::loss_atop;
use atop_core::transforms::{TransformConfig, TransformDraw, TransformKind};
use atop_core::SeededRng;
use atop_tensor::numeric::{central_difference, relative_error};
use atop_tensor::{Gradients, Graph, Tensor, Var};
use rand::Rng;

use crate::{ensure, Check, Checklist};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const MAX_PARAMS: usize = 1000;

pub fn run() -> Check {
    let mut list = Checklist::default();
    let t = Toy::new();
    list.check("toy sizes", t.sizes());
    list.check("classifier", classifier(&t));
    list.check("purifier GAN", purifier(&t.g_gan));
    list.check("purifier AE", purifier(&t.g_ae));
    list.check("discriminator", discriminator(&t));
    list.check("loss_atop wrt purifier", loss_atop_params(&t));
    list.check("attack objectives", attack_objectives(&t));
    list.check("StAdv flow", stadv_flow(&t));
    list.finish()
}

struct Toy {
    f: ClassifierNet<f64>,
    g_gan: PurifierNet<f64>,
    g_ae: PurifierNet<f64>,
    d: DiscriminatorNet<f64>,
}

/// Fresh nets have zero biases, which parks whole regions on the ReLU kink.
fn randomize_biases(p: &mut Params<f64>, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let names = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
}

impl Toy {
    fn new() -> Self {
        let mut f = ClassifierNet::new(ClassifierArch::toy(3, 16, 10), &mut SeededRng::new(11)).unwrap();
        let mut g_gan =
            PurifierNet::new(PurifierArch::toy(PurifierVariant::Gan, 3, 16), &mut SeededRng::new(12)).unwrap();
        let mut g_ae =
            PurifierNet::new(PurifierArch::toy(PurifierVariant::Ae, 3, 16), &mut SeededRng::new(13)).unwrap();
        let mut d = DiscriminatorNet::new(DiscriminatorArch::toy(3, 16), &mut SeededRng::new(14)).unwrap();
        randomize_biases(&mut f.params, 21);
        randomize_biases(&mut g_gan.params, 22);
        randomize_biases(&mut g_ae.params, 23);
        randomize_biases(&mut d.params, 24);
        Toy { f, g_gan, g_ae, d }
    }

    fn sizes(&self) -> Result<(), String> {
        let counts = [
            self.f.params.count(),
            self.g_gan.params.count(),
            self.g_ae.params.count(),
            self.d.params.count(),
        ];
        ensure(counts.iter().all(|&n| n <= MAX_PARAMS), || {
            format!("parameter counts {counts:?}")
        })
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.05..0.95))
}

fn flatten(p: &Params<f64>) -> Tensor<f64> {
    let d: Vec<f64> = p.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![d.len()], d)
}

fn unflatten(template: &Params<f64>, flat: &Tensor<f64>) -> Params<f64> {
    let mut out = template.clone();
    let mut off = 0;
    for t in out.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
        off += n;
    }
    out
}

fn concat_grads(g: &Gradients<f64>, vars: &[Var], params: &Params<f64>) -> Tensor<f64> {
    let d: Vec<f64> = vars
        .iter()
        .zip(params.tensors())
        .flat_map(|(v, t)| {
            g.get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
                .into_data()
        })
        .collect();
    Tensor::new(vec![d.len()], d)
}

/// A fixed non-uniform linear functional, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Var {
    let w = Tensor::from_fn(g.value(v).shape().to_vec(), |i| ((i * 7 % 13) as f64 - 6.0) / 5.0);
    let p = g.mul_const(v, w);
    g.sum(p)
}

fn compare(what: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<(), String> {
    let err = relative_error(analytic, numeric, 1e-10);
    ensure(err <= TOL, || format!("{what}: relative error {err:e}"))
}

/// Checks input and parameter gradients of `head(net(x))`; `rebuild` turns a
/// parameter set back into a net.
fn input_and_params<N>(
    net: &N,
    params: &Params<f64>,
    x0: &Tensor<f64>,
    rebuild: impl Fn(Params<f64>) -> N,
    head: impl Fn(&mut Graph<f64>, &Bound<'_, N>, Var) -> Var,
) -> Result<(), String> {
    let run = |g: &mut Graph<f64>, n: &N, p: &Params<f64>, x: Var, trainable: bool| {
        let vars = p.bind(g, trainable);
        let bound = Bound {
            net: n,
            vars: vars.clone(),
        };
        (head(g, &bound, x), vars)
    };
    let mut g = Graph::new();
    let xv = g.variable(x0.clone());
    let (l, vars) = run(&mut g, net, params, xv, true);
    let grads = g.backward(l);
    let dx = grads.get(xv).cloned().ok_or("no input gradient")?;
    let dp = concat_grads(&grads, &vars, params);
    let num_x = central_difference(
        |x| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (l, _) = run(&mut g, net, params, xv, false);
            g.value(l).item()
        },
        x0,
        H,
    );
    let num_p = central_difference(
        |flat| {
            let p = unflatten(params, flat);
            let n = rebuild(p.clone());
            let mut g = Graph::new();
            let xv = g.constant(x0.clone());
            let (l, _) = run(&mut g, &n, &p, xv, false);
            g.value(l).item()
        },
        &flatten(params),
        H,
    );
    compare("input", &dx, &num_x)?;
    compare("parameters", &dp, &num_p)
}

fn classifier(t: &Toy) -> Result<(), String> {
    let x0 = uniform(&[2, 3, 16, 16], 1);
    let labels = [3, 7];
    input_and_params(
        &t.f,
        &t.f.params,
        &x0,
        |p| ClassifierNet::from_params(t.f.arch.clone(), p).unwrap(),
        |g, b, x| {
            let z = b.logits(g, x).unwrap();
            g.cross_entropy(z, &labels)
        },
    )
}

fn purifier(net: &PurifierNet<f64>) -> Result<(), String> {
    let x0 = uniform(&[1, 3, 16, 16], 2);
    let mut rng = SeededRng::new(3);
    let mask = Tensor::from_fn(vec![1, 1, 16, 16], |_| if rng.gen_bool(0.75) { 1.0 } else { 0.0 });
    let needs_mask = net.arch.variant == PurifierVariant::Gan;
    input_and_params(
        net,
        &net.params,
        &x0,
        |p| PurifierNet::from_params(net.arch.clone(), p).unwrap(),
        |g, b, x| {
            let m = needs_mask.then(|| g.constant(mask.clone()));
            let out = b.purify(g, x, m).unwrap();
            weighted_sum(g, out)
        },
    )
}

fn discriminator(t: &Toy) -> Result<(), String> {
    let x0 = uniform(&[2, 3, 16, 16], 4);
    input_and_params(
        &t.d,
        &t.d.params,
        &x0,
        |p| DiscriminatorNet::from_params(t.d.arch.clone(), p).unwrap(),
        |g, b, x| {
            let s = b.score(g, x).unwrap();
            weighted_sum(g, s)
        },
    )
}

fn draw(kind: TransformKind, n: usize, seed: u64) -> TransformDraw {
    let cfg = TransformConfig::new(kind).with_patch(4).with_masks(4);
    TransformDraw::sample(&cfg, [n, 3, 16, 16], &mut SeededRng::new(seed)).unwrap()
}

fn loss_atop_params(t: &Toy) -> Result<(), String> {
    // pixels kept away from the purifier's output range so the l1 term is smooth
    let x = uniform(&[2, 3, 16, 16], 5).map(|v| if v < 0.5 { 0.4 * v } else { 0.6 + 0.4 * v });
    let y = [0, 5];
    let cases: [(&PurifierNet<f64>, Option<&DiscriminatorNet<f64>>, TransformKind); 4] = [
        (&t.g_gan, Some(&t.d), TransformKind::Rt1),
        (&t.g_gan, Some(&t.d), TransformKind::Rt2),
        (&t.g_gan, Some(&t.d), TransformKind::Rt3),
        (&t.g_ae, None, TransformKind::Rt2),
    ];
    for (net, critic, kind) in cases {
        let dr = draw(kind, 2, 6);
        let purified = purify_with_draw(&x, Some(&dr), net).map_err(|e| e.to_string())?;
        let gap = purified.zip_map(&x, |a, b| (a - b).abs()).min();
        ensure(gap > 1e-3, || {
            format!("{kind}: purified pixel within {gap} of its target")
        })?;
        let value = |p: &Params<f64>| {
            let n = PurifierNet::from_params(net.arch.clone(), p.clone()).unwrap();
            let mut g = Graph::new();
            let b = n.bind(&mut g, true);
            let out = loss_atop(&mut g, &x, &y, Some(&dr), &b, critic, Some(&t.f), 0.1).unwrap();
            let grads = g.backward(out.total);
            (g.value(out.total).item(), concat_grads(&grads, &b.vars, &n.params))
        };
        let analytic = value(&net.params).1;
        let numeric = central_difference(|v| value(&unflatten(&net.params, v)).0, &flatten(&net.params), H);
        compare(&format!("{kind}"), &analytic, &numeric)?;
    }
    Ok(())
}

fn fixed_draw_objective(pipe: &Pipeline<'_, f64>, x: &Tensor<f64>, y: &[usize], obj: Objective, seed: u64) -> f64 {
    objective_gradient(
        pipe,
        x,
        y,
        obj,
        &GradientEstimatorConfig::exact(),
        &mut SeededRng::new(seed),
    )
    .unwrap()
    .objective
}

fn attack_objectives(t: &Toy) -> Result<(), String> {
    let x = uniform(&[2, 3, 16, 16], 7);
    let y = [6, 2];
    let transforms = [
        None,
        Some(TransformKind::Rt1),
        Some(TransformKind::Rt2),
        Some(TransformKind::Rt3),
    ];
    // CE drives FGSM and PGD; the margin drives CW
    for kind in transforms {
        let cfg = kind.map(|k| TransformConfig::new(k).with_patch(4).with_masks(4));
        let pipe = Pipeline::new(cfg, &t.g_ae, &t.f);
        for obj in [Objective::CrossEntropy, Objective::NegMargin { kappa: 0.0 }] {
            let analytic = objective_gradient(
                &pipe,
                &x,
                &y,
                obj,
                &GradientEstimatorConfig::exact(),
                &mut SeededRng::new(8),
            )
            .map_err(|e| e.to_string())?
            .grad;
            let numeric = central_difference(|v| fixed_draw_objective(&pipe, v, &y, obj, 8), &x, H);
            compare(&format!("{kind:?} {obj:?}"), &analytic, &numeric)?;
        }
    }
    Ok(())
}

fn stadv_flow(t: &Toy) -> Result<(), String> {
    let x = uniform(&[1, 3, 16, 16], 9);
    let flow0 = uniform(&[1, 2, 16, 16], 10).map(|v| 1.2 * v - 0.55);
    for kind in [None, Some(TransformKind::Rt2)] {
        let cfg = kind.map(|k| TransformConfig::new(k).with_patch(4));
        let pipe = Pipeline::new(cfg, &t.g_ae, &t.f);
        let dr = pipe
            .sample_draw([1, 3, 16, 16], &mut SeededRng::new(11))
            .map_err(|e| e.to_string())?;
        let run = |flow: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let fv = g.variable(flow.clone());
            let o = stadv_objective(&mut g, &pipe, xv, fv, &[4], 0.05, dr.as_ref(), PurifierGrad::Exact).unwrap();
            (g.value(o).item(), g.backward(o).get(fv).cloned())
        };
        let analytic = run(&flow0).1.ok_or("no flow gradient")?;
        let numeric = central_difference(|f| run(f).0, &flow0, H);
        compare(&format!("{kind:?}"), &analytic, &numeric)?;
    }
    Ok(())
}
