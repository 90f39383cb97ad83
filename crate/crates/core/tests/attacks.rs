use atop_core::attacks::{
    attack_suite, cross_entropy, cw_margin, fgsm, input_gradient, objective_gradient, pgd, pgd_iterates, project,
    stadv, stadv_objective, AttackConfig, GradientEstimatorConfig, Norm, Objective,
};
use atop_core::data::{load_image_dataset, make_synthetic_dataset, SyntheticSpec};
use atop_core::models::{
    Classifier, ClassifierArch, ClassifierNet, IdentityPurifier, Params, Pipeline, PurifierArch, PurifierGrad,
    PurifierNet, PurifierVariant,
};
use atop_core::transforms::{TransformConfig, TransformKind};
use atop_core::{Error, Result, SeededRng};
use atop_tensor::numeric::{central_difference, relative_error};
use atop_tensor::{Graph, Tensor, Var};
use rand::Rng;

/// `z = W x + b` on flattened images.
struct Linear {
    w: Tensor<f64>,
    b: Tensor<f64>,
}

impl Classifier<f64> for Linear {
    fn logits(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        let n = g.value(x).shape()[0];
        let d = self.w.shape()[1];
        let flat = g.reshape(x, &[n, d]);
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        Ok(g.linear(flat, w, Some(b)))
    }
    fn num_classes(&self) -> usize {
        self.w.shape()[0]
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.05..0.95))
}

fn randomize_biases(p: &mut Params<f64>, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let names = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
}

fn toy_nets() -> (ClassifierNet<f64>, PurifierNet<f64>) {
    let mut f = ClassifierNet::new(ClassifierArch::toy(3, 16, 10), &mut SeededRng::new(1)).unwrap();
    let mut p = PurifierNet::new(PurifierArch::toy(PurifierVariant::Ae, 3, 16), &mut SeededRng::new(2)).unwrap();
    randomize_biases(&mut f.params, 10);
    randomize_biases(&mut p.params, 20);
    (f, p)
}

fn rt(kind: TransformKind) -> TransformConfig {
    match kind {
        TransformKind::Rt3 => TransformConfig::new(kind).with_patch(4).with_masks(4),
        _ => TransformConfig::new(kind).with_patch(4),
    }
}

#[test]
fn cross_entropy_reference_values() {
    let uniform = Tensor::<f64>::zeros(vec![1, 10]);
    assert!((cross_entropy(&uniform, &[4]).unwrap() - 10f64.ln()).abs() < 1e-12);
    let mut confident = Tensor::<f64>::zeros(vec![1, 10]);
    confident.data_mut()[2] = 100.0;
    assert!(cross_entropy(&confident, &[2]).unwrap() < 1e-40);
    let z = Tensor::new(vec![1, 3], vec![2.0f64, 1.0, 0.0]);
    assert!((cross_entropy(&z, &[0]).unwrap() - 0.40761).abs() < 1e-5);
    assert!(matches!(
        cross_entropy(&z, &[3]).unwrap_err(),
        Error::LabelRange { label: 3, classes: 3 }
    ));
}

#[test]
fn cw_margin_reference_value() {
    let z = Tensor::new(vec![1, 2], vec![3.0f64, 1.0]);
    assert_eq!(cw_margin(&z, &[0], 0.0).unwrap(), 2.0);
    assert_eq!(cw_margin(&z, &[1], 0.5).unwrap(), -0.5);
}

#[test]
fn fgsm_on_logistic_toy() {
    // two-class logistic with logit difference w.x, w = (2, -3)
    let f = Linear {
        w: Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, -3.0]),
        b: Tensor::zeros(vec![2]),
    };
    let pipe = Pipeline::new(None, &IdentityPurifier, &f);
    let x = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]);
    let adv = fgsm(
        &pipe,
        &x,
        &[1],
        0.1,
        &GradientEstimatorConfig::exact(),
        &mut SeededRng::new(0),
    )
    .unwrap();
    let delta: Vec<f64> = adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    assert!(
        (delta[0] + 0.1).abs() < 1e-12 && (delta[1] - 0.1).abs() < 1e-12,
        "{delta:?}"
    );
}

#[test]
fn projection_shrinks_to_the_ball() {
    let x = Tensor::<f64>::full(vec![2, 3, 4, 4], 0.5);
    let eps = 0.1;
    let far = Tensor::from_fn(vec![2, 3, 4, 4], |i| 0.5 + if i % 3 == 0 { 0.3 } else { -0.05 });
    let p = project(&far, &x, Norm::Linf, eps).unwrap();
    for (a, b) in p.data().iter().zip(x.data()) {
        assert!((a - b).abs() <= eps + 1e-15);
    }

    // l_2: each image sits at radius 2 eps in a fixed direction
    let dir = Tensor::from_fn(vec![2, 3, 4, 4], |i| ((i * 5 % 7) as f64 - 3.0) + 0.5);
    let mut cand = x.clone();
    let per = x.sample_len();
    for (row, d) in cand.data_mut().chunks_mut(per).zip(dir.data().chunks(per)) {
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (c, v) in row.iter_mut().zip(d) {
            *c += 2.0 * eps * v / n;
        }
    }
    let p = project(&cand, &x, Norm::L2, eps).unwrap();
    for (row, o) in p.data().chunks(per).zip(x.data().chunks(per)) {
        let r = row.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((r - eps).abs() < 1e-12, "{r}");
    }
    assert!(project(&cand, &x, Norm::NonLp, eps).is_err());
}

#[test]
fn single_step_pgd_is_fgsm() {
    let (f, p) = toy_nets();
    let x = uniform(&[3, 3, 16, 16], 3);
    let y = [1, 4, 7];
    for t in [None, Some(rt(TransformKind::Rt1)), Some(rt(TransformKind::Rt3))] {
        let pipe = Pipeline::new(t, &p, &f);
        let cfg = AttackConfig::pgd(0.03125, 1)
            .with_step(0.03125)
            .with_random_start(false)
            .with_eot(2);
        let a = pgd(&pipe, &x, &y, &cfg, &mut SeededRng::new(9)).unwrap();
        let b = fgsm(&pipe, &x, &y, 0.03125, &cfg.estimator(), &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn pgd_iterates_stay_in_the_ball() {
    let (f, p) = toy_nets();
    let x = uniform(&[2, 3, 16, 16], 4);
    let pipe = Pipeline::new(Some(rt(TransformKind::Rt2)), &p, &f);
    for (cfg, norm) in [
        (AttackConfig::pgd(8.0 / 255.0, 5), Norm::Linf),
        (AttackConfig::pgd_l2(0.5, 5).with_step(0.2), Norm::L2),
    ] {
        let cfg = cfg.with_eot(1);
        let its = pgd_iterates(
            &pipe,
            &x,
            &[0, 9],
            &cfg,
            Objective::CrossEntropy,
            &mut SeededRng::new(5),
        )
        .unwrap();
        assert_eq!(its.len(), 5);
        let per = x.sample_len();
        for it in &its {
            assert!(it.min() >= 0.0 && it.max() <= 1.0);
            for (row, o) in it.data().chunks(per).zip(x.data().chunks(per)) {
                let d: Vec<f64> = row.iter().zip(o).map(|(a, b)| a - b).collect();
                let size = match norm {
                    Norm::Linf => d.iter().fold(0f64, |m, v| m.max(v.abs())),
                    _ => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
                };
                assert!(size <= cfg.eps as f64 + 1e-9, "{size}");
            }
        }
    }
}

#[test]
fn pgd_raises_the_loss() {
    let (f, p) = toy_nets();
    let x = uniform(&[4, 3, 16, 16], 6);
    let y = [0, 1, 2, 3];
    let pipe = Pipeline::new(None, &p, &f);
    let est = |x: &Tensor<f64>| {
        objective_gradient(
            &pipe,
            x,
            &y,
            Objective::CrossEntropy,
            &GradientEstimatorConfig::exact(),
            &mut SeededRng::new(0),
        )
        .unwrap()
        .objective
    };
    let adv = pgd(
        &pipe,
        &x,
        &y,
        &AttackConfig::pgd(0.05, 10).with_eot(1),
        &mut SeededRng::new(1),
    )
    .unwrap();
    assert!(est(&adv) > est(&x));
}

#[test]
fn eot_matches_two_outcome_expectation() {
    // one of two pixels is masked, each with probability 1/2
    let f = Linear {
        w: Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 1.5, -1.0, 0.25]),
        b: Tensor::new(vec![3], vec![0.1, -0.2, 0.0]),
    };
    let t = TransformConfig::new(TransformKind::Rt1)
        .with_patch(1)
        .with_rate(0.5)
        .with_sigma(0.0);
    let pipe = Pipeline::new(Some(t), &IdentityPurifier, &f);
    let x = Tensor::new(vec![1, 1, 1, 2], vec![0.3, 0.8]);
    let y = 2;

    let grad_for = |keep: [f64; 2]| -> [f64; 2] {
        let xm = [keep[0] * 0.3, keep[1] * 0.8];
        let z: Vec<f64> = (0..3)
            .map(|k| f.w.data()[2 * k] * xm[0] + f.w.data()[2 * k + 1] * xm[1] + f.b.data()[k])
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let r: Vec<f64> = (0..3).map(|k| e[k] / s - if k == y { 1.0 } else { 0.0 }).collect();
        let mut g = [0.0; 2];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = keep[j] * (0..3).map(|k| f.w.data()[2 * k + j] * r[k]).sum::<f64>();
        }
        g
    };
    let (ga, gb) = (grad_for([0.0, 1.0]), grad_for([1.0, 0.0]));
    let expected = [(ga[0] + gb[0]) / 2.0, (ga[1] + gb[1]) / 2.0];

    let k = 4000;
    let cfg = GradientEstimatorConfig { bpda: false, eot_k: k };
    let est = input_gradient(&pipe, &x, &[y], &cfg, &mut SeededRng::new(21)).unwrap();
    for j in 0..2 {
        let sd = 0.5 * (ga[j] - gb[j]).abs() / (k as f64).sqrt();
        assert!(
            (est.data()[j] - expected[j]).abs() <= 4.0 * sd,
            "pixel {j}: {} vs {}",
            est.data()[j],
            expected[j]
        );
    }
    // a single draw gives one of the two outcomes exactly
    let one = input_gradient(
        &pipe,
        &x,
        &[y],
        &GradientEstimatorConfig::exact(),
        &mut SeededRng::new(3),
    )
    .unwrap();
    let d = one.data();
    assert!((d[0] - ga[0]).abs() + (d[1] - ga[1]).abs() < 1e-12 || (d[0] - gb[0]).abs() + (d[1] - gb[1]).abs() < 1e-12);
}

#[test]
fn bpda_equals_exact_through_an_identity_purifier() {
    let f = ClassifierNet::<f64>::new(ClassifierArch::toy(3, 16, 10), &mut SeededRng::new(7)).unwrap();
    let x = uniform(&[2, 3, 16, 16], 8);
    for t in [None, Some(rt(TransformKind::Rt1)), Some(rt(TransformKind::Rt2))] {
        let pipe = Pipeline::new(t, &IdentityPurifier, &f);
        let a = input_gradient(
            &pipe,
            &x,
            &[3, 5],
            &GradientEstimatorConfig { bpda: true, eot_k: 3 },
            &mut SeededRng::new(1),
        )
        .unwrap();
        let b = input_gradient(
            &pipe,
            &x,
            &[3, 5],
            &GradientEstimatorConfig { bpda: false, eot_k: 3 },
            &mut SeededRng::new(1),
        )
        .unwrap();
        assert!(relative_error(&a, &b, 1e-12) < 1e-12);
    }
}

#[test]
fn bpda_reaches_the_input_for_every_transform() {
    let (f, p) = toy_nets();
    let x = uniform(&[1, 3, 16, 16], 9);
    for kind in TransformKind::ALL {
        let pipe = Pipeline::new(Some(rt(kind)), &p, &f);
        let g = input_gradient(
            &pipe,
            &x,
            &[2],
            &GradientEstimatorConfig { bpda: true, eot_k: 1 },
            &mut SeededRng::new(0),
        )
        .unwrap();
        assert!(g.norm_l2() > 0.0, "{kind}");
    }
}

/// Objective of the pipeline on `x` for the draw fixed by `seed`.
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

#[test]
fn attack_losses_match_finite_differences() {
    let (f, p) = toy_nets();
    let x = uniform(&[2, 3, 16, 16], 11);
    let y = [6, 2];
    for kind in TransformKind::ALL {
        let pipe = Pipeline::new(Some(rt(kind)), &p, &f);
        for obj in [Objective::CrossEntropy, Objective::NegMargin { kappa: 0.0 }] {
            let analytic = objective_gradient(
                &pipe,
                &x,
                &y,
                obj,
                &GradientEstimatorConfig::exact(),
                &mut SeededRng::new(13),
            )
            .unwrap()
            .grad;
            let numeric = central_difference(|t| fixed_draw_objective(&pipe, t, &y, obj, 13), &x, 1e-6);
            let err = relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "{kind} {obj:?}: {err:e}");
        }
    }
}

#[test]
fn stadv_objective_matches_finite_differences() {
    let (f, p) = toy_nets();
    let x = uniform(&[1, 3, 16, 16], 12);
    let pipe = Pipeline::new(None, &p, &f);
    let flow0 = uniform(&[1, 2, 16, 16], 13).map(|v| 1.2 * v - 0.55);
    let run = |flow: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fv = g.variable(flow.clone());
        let o = stadv_objective(&mut g, &pipe, xv, fv, &[4], 0.05, None, PurifierGrad::Exact).unwrap();
        let v = g.value(o).item();
        (v, g.backward(o).get(fv).cloned())
    };
    let analytic = run(&flow0).1.unwrap();
    let numeric = central_difference(|t| run(t).0, &flow0, 1e-6);
    let err = relative_error(&analytic, &numeric, 1e-8);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn stadv_respects_the_flow_cap() {
    let (f, p) = toy_nets();
    let x = uniform(&[2, 3, 16, 16], 14);
    let pipe = Pipeline::new(Some(rt(TransformKind::Rt1)), &p, &f);
    let cfg = AttackConfig::stadv(0.0625, 1).with_step(0.0625).with_eot(1);
    let (adv, flow) = stadv(&pipe, &x, &[1, 2], &cfg, &mut SeededRng::new(3)).unwrap();
    let cap = 0.0625 * 16.0;
    for v in flow.0.data() {
        assert!([0.0, cap, -cap].iter().any(|c| (v - c).abs() < 1e-12), "{v}");
    }
    assert!(adv.min() >= 0.0 && adv.max() <= 1.0);

    let cfg = AttackConfig::stadv(0.0625, 6).with_eot(1);
    let (_, flow) = stadv(&pipe, &x, &[1, 2], &cfg, &mut SeededRng::new(3)).unwrap();
    assert!(flow.0.max_abs() <= cap + 1e-12);

    let (same, _) = stadv(&pipe, &x, &[1, 2], &AttackConfig::stadv(0.0, 3), &mut SeededRng::new(3)).unwrap();
    assert_eq!(same, x);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = AttackConfig::stadv(0.05, 3);
    cfg.norm = Norm::Linf;
    assert!(cfg.validate().is_err());
    assert!(AttackConfig::pgd(0.03, 0).validate().is_err());
    assert!(AttackConfig::pgd(-0.1, 3).validate().is_err());
    assert!(AttackConfig::pgd(0.03, 3).with_eot(0).validate().is_err());
    let mut cw = AttackConfig::cw(0.03, 3);
    cw.norm = Norm::L2;
    assert!(cw.validate().is_err());
    let json = r#"{"kind":"PGD","norm":"l_inf","eps":0.03,"steps":3,"bogus":1}"#;
    assert!(serde_json::from_str::<AttackConfig>(json).is_err());
    let ok: AttackConfig = serde_json::from_str(r#"{"kind":"CW","norm":"l_inf","eps":0.03,"steps":3}"#).unwrap();
    assert_eq!((ok.eot_k, ok.bpda, ok.id()), (20, true, "CW-3".to_string()));
}

#[test]
fn suite_writes_datasets_and_sidecars() {
    let f = ClassifierNet::<f32>::new(ClassifierArch::toy(3, 16, 4), &mut SeededRng::new(1)).unwrap();
    let p = PurifierNet::<f32>::new(PurifierArch::toy(PurifierVariant::Ae, 3, 16), &mut SeededRng::new(2)).unwrap();
    let ds = make_synthetic_dataset(&mut SeededRng::new(3), &SyntheticSpec::new(4, 16, 16, 2)).unwrap();
    let pipe = Pipeline::new(Some(TransformConfig::new(TransformKind::Rt2)), &p, &f);
    let eps = 8.0 / 255.0;
    let configs = [
        AttackConfig::pgd(eps, 2).with_eot(2),
        AttackConfig::cw(eps, 2).with_eot(1),
        AttackConfig::stadv(0.05, 2).with_eot(1),
    ];
    let a = attack_suite(&pipe, &ds, &configs, 3, &SeededRng::new(5)).unwrap();
    let b = attack_suite(&pipe, &ds, &configs[..1], 3, &SeededRng::new(5)).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a["PGD-2"].dataset, b["PGD-2"].dataset);
    for id in ["PGD-2", "CW-2"] {
        assert!(a[id].norms.iter().all(|n| n.linf <= eps + 1e-6));
    }

    let dir = tempfile::tempdir().unwrap();
    let set = &a["CW-2"];
    set.save(dir.path()).unwrap();
    let back = load_image_dataset(dir.path(), None).unwrap();
    assert_eq!(back.labels(), ds.labels());
    for (q, v) in back.images().data().iter().zip(ds.images().data()) {
        assert!((q - v).abs() <= eps + 0.5 / 255.0 + 1e-6);
    }
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("attack.json")).unwrap()).unwrap();
    assert_eq!(side["attack_id"], "CW-2");
    assert_eq!(side["norms"].as_array().unwrap().len(), ds.len());
}

#[test]
fn empty_suite_is_empty() {
    let f = ClassifierNet::<f32>::new(ClassifierArch::toy(3, 16, 4), &mut SeededRng::new(1)).unwrap();
    let ds = make_synthetic_dataset(&mut SeededRng::new(3), &SyntheticSpec::new(4, 16, 16, 1)).unwrap();
    let pipe = Pipeline::new(None, &IdentityPurifier, &f);
    assert!(attack_suite(&pipe, &ds, &[], 4, &SeededRng::new(0)).unwrap().is_empty());
}

#[test]
fn eot_is_the_plain_gradient_on_deterministic_pipelines() {
    let (f, p) = toy_nets();
    let x = uniform(&[2, 3, 16, 16], 15);
    let pipe = Pipeline::new(None, &p, &f);
    let one = input_gradient(
        &pipe,
        &x,
        &[1, 2],
        &GradientEstimatorConfig::exact(),
        &mut SeededRng::new(0),
    )
    .unwrap();
    let many = input_gradient(
        &pipe,
        &x,
        &[1, 2],
        &GradientEstimatorConfig { bpda: false, eot_k: 7 },
        &mut SeededRng::new(1),
    )
    .unwrap();
    assert!(relative_error(&many, &one, 1e-12) < 1e-12);
}

#[test]
fn more_pgd_steps_do_not_lower_the_loss() {
    let (f, p) = toy_nets();
    let x = uniform(&[8, 3, 16, 16], 16);
    let y = [0, 1, 2, 3, 4, 5, 6, 7];
    let pipe = Pipeline::new(None, &p, &f);
    let loss = |x: &Tensor<f64>| {
        objective_gradient(
            &pipe,
            x,
            &y,
            Objective::CrossEntropy,
            &GradientEstimatorConfig::exact(),
            &mut SeededRng::new(0),
        )
        .unwrap()
        .objective
    };
    let mut prev = loss(&x);
    for k in [1, 5, 20] {
        let cfg = AttackConfig::pgd(8.0 / 255.0, k).with_eot(1);
        let now = loss(&pgd(&pipe, &x, &y, &cfg, &mut SeededRng::new(2)).unwrap());
        assert!(now >= prev, "PGD-{k}: {now} < {prev}");
        prev = now;
    }
}
