//! Exact invariants on randomized small cases.

use atop_core::attacks::{input_gradient, pgd_iterates, stadv, AttackConfig, GradientEstimatorConfig, Norm, Objective};
use atop_core::data::{make_synthetic_dataset, SyntheticSpec};
use atop_core::models::{
    ClassifierArch, ClassifierNet, DiscriminatorArch, DiscriminatorNet, IdentityPurifier, Params, Pipeline,
    PurifierArch, PurifierNet, PurifierVariant,
};
use atop_core::training::{finetune_atop, loss_atop, AtopConfig, OptimizerConfig};
use atop_core::transforms::{
    aggregate_rt3, apply_transform, sample_partition_masks, sample_patch_mask, TransformConfig, TransformDraw,
    TransformKind,
};
use atop_core::SeededRng;
use atop_tensor::numeric::relative_error;
use atop_tensor::{Graph, Tensor};
use rand::Rng;

use crate::{ensure, Check, Checklist};

const CASES: u64 = 64;

pub fn run() -> Check {
    let mut list = Checklist::default();
    list.check("mask exact count", mask_exact_count());
    list.check("partition tiles once", partition_tiles_once());
    list.check("RT2(sigma=0) == RT1", rt2_without_noise_is_rt1());
    list.check("identity RT3 rebuilds the noisy image", identity_rt3_rebuilds_noisy());
    list.check("ball containment", ball_containment());
    list.check("BPDA == exact through identity", bpda_matches_exact());
    list.check("EOT == plain gradient when deterministic", eot_on_deterministic());
    list.check("loss additivity", loss_additivity());
    list.check("classifier bitwise frozen", classifier_frozen());
    list.finish()
}

fn uniform<T: atop_tensor::Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.gen_range(0.05..0.95)))
}

fn mask_exact_count() -> Result<(), String> {
    let mut pick = SeededRng::new(100);
    for case in 0..CASES {
        let (gh, gw, p) = (pick.gen_range(1..9), pick.gen_range(1..9), pick.gen_range(1..5));
        let np = gh * gw;
        let k = pick.gen_range(0..=np);
        let rate = k as f64 / np as f64;
        let m = sample_patch_mask(&mut SeededRng::new(case), (gh * p, gw * p), p, rate).map_err(|e| e.to_string())?;
        ensure(
            m.missing_patches().len() == k && m.missing_pixels() == k * p * p,
            || {
                format!(
                    "{gh}x{gw} patches of {p}, rate {rate}: {} missing",
                    m.missing_patches().len()
                )
            },
        )?;
        let w = gw * p;
        for (i, &v) in m.values().iter().enumerate() {
            let (r, c) = (i / w, i % w);
            ensure(v == m.values()[(r / p * p) * w + c / p * p], || {
                format!("mask not patch-constant at {i}")
            })?;
        }
    }
    Ok(())
}

fn partition_tiles_once() -> Result<(), String> {
    let mut pick = SeededRng::new(101);
    for case in 0..CASES {
        let (gh, gw, p) = (pick.gen_range(1..7), pick.gen_range(1..7), pick.gen_range(1..4));
        let np = gh * gw;
        let divisors: Vec<usize> = (1..=np).filter(|d| np % d == 0).collect();
        let n = divisors[pick.gen_range(0..divisors.len())];
        let set =
            sample_partition_masks(&mut SeededRng::new(case), (gh * p, gw * p), p, n).map_err(|e| e.to_string())?;
        ensure(set.len() == n, || format!("{} masks, wanted {n}", set.len()))?;
        for px in 0..np * p * p {
            let missing: u32 = set.masks.iter().map(|m| 1 - u32::from(m.values()[px])).sum();
            ensure(missing == 1, || format!("pixel {px} missing in {missing} masks"))?;
        }
        for m in &set.masks {
            ensure(m.missing_patches().len() == np / n, || "unequal partition".into())?;
        }
    }
    Ok(())
}

fn rt2_without_noise_is_rt1() -> Result<(), String> {
    for case in 0..CASES {
        let x: Tensor<f32> = uniform(&[2, 3, 16, 16], case);
        let rate = [0.0, 0.25, 0.5, 0.75][case as usize % 4];
        let rt1 = TransformConfig::new(TransformKind::Rt1).with_rate(rate);
        let rt2 = TransformConfig::new(TransformKind::Rt2).with_rate(rate).with_sigma(0.0);
        let (a, _) = apply_transform(&x, &rt1, &mut SeededRng::new(case)).map_err(|e| e.to_string())?;
        let (b, _) = apply_transform(&x, &rt2, &mut SeededRng::new(case)).map_err(|e| e.to_string())?;
        ensure(a.views == b.views, || format!("case {case}: views differ"))?;
    }
    Ok(())
}

fn identity_rt3_rebuilds_noisy() -> Result<(), String> {
    for case in 0..CASES {
        let n_masks = [1, 2, 4, 8, 16][case as usize % 5];
        let cfg = TransformConfig::new(TransformKind::Rt3)
            .with_patch(4)
            .with_masks(n_masks);
        let x: Tensor<f32> = uniform(&[2, 3, 16, 16], case);
        let draw = TransformDraw::sample(&cfg, [2, 3, 16, 16], &mut SeededRng::new(case)).map_err(|e| e.to_string())?;
        let out = draw.apply(&x).map_err(|e| e.to_string())?;
        let passes = vec![out.noisy.clone(); draw.num_views()];
        let keep: Vec<Tensor<f32>> = (0..draw.num_views()).map(|v| draw.mask_tensor(v, 3)).collect();
        let rebuilt = aggregate_rt3(&passes, &keep).map_err(|e| e.to_string())?;
        ensure(rebuilt == out.noisy, || format!("case {case}: reconstruction differs"))?;
    }
    Ok(())
}

fn toy_nets(seed: u64) -> (ClassifierNet<f64>, PurifierNet<f64>) {
    let f = ClassifierNet::new(ClassifierArch::toy(3, 16, 10), &mut SeededRng::new(seed)).unwrap();
    let p = PurifierNet::new(
        PurifierArch::toy(PurifierVariant::Ae, 3, 16),
        &mut SeededRng::new(seed + 1),
    )
    .unwrap();
    (f, p)
}

fn norm_of(d: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => d.iter().fold(0f64, |m, v| m.max(v.abs())),
        _ => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

fn ball_containment() -> Result<(), String> {
    let (f, p) = toy_nets(1);
    let y = [3, 7];
    for case in 0..8u64 {
        let x: Tensor<f64> = uniform(&[2, 3, 16, 16], 200 + case);
        let kind = TransformKind::ALL[case as usize % 3];
        let t = TransformConfig::new(kind).with_patch(4).with_masks(4);
        let pipe = Pipeline::new(Some(t), &p, &f);
        let configs = [
            (AttackConfig::pgd(8.0 / 255.0, 4).with_eot(1), Norm::Linf, f64::EPSILON),
            (AttackConfig::cw(8.0 / 255.0, 3).with_eot(1), Norm::Linf, f64::EPSILON),
            (AttackConfig::pgd_l2(0.5, 4).with_step(0.25).with_eot(1), Norm::L2, 1e-6),
        ];
        for (cfg, norm, tol) in configs {
            let obj = if cfg.kind == atop_core::attacks::AttackKind::Cw {
                Objective::NegMargin { kappa: 0.0 }
            } else {
                Objective::CrossEntropy
            };
            let its = pgd_iterates(&pipe, &x, &y, &cfg, obj, &mut SeededRng::new(case)).map_err(|e| e.to_string())?;
            let per = x.sample_len();
            for it in &its {
                ensure(it.min() >= 0.0 && it.max() <= 1.0, || {
                    format!("{}: left [0,1]", cfg.id())
                })?;
                for (row, o) in it.data().chunks(per).zip(x.data().chunks(per)) {
                    let d: Vec<f64> = row.iter().zip(o).map(|(a, b)| a - b).collect();
                    let size = norm_of(&d, norm);
                    ensure(size <= cfg.eps as f64 + tol, || {
                        format!("{}: |delta| {size} > {}", cfg.id(), cfg.eps)
                    })?;
                }
            }
        }
        let cfg = AttackConfig::stadv(0.05, 3).with_eot(1);
        let (adv, _) = stadv(&pipe, &x, &y, &cfg, &mut SeededRng::new(case)).map_err(|e| e.to_string())?;
        ensure(adv.min() >= 0.0 && adv.max() <= 1.0, || "StAdv left [0,1]".into())?;
    }
    Ok(())
}

fn bpda_matches_exact() -> Result<(), String> {
    let (f, _) = toy_nets(2);
    for case in 0..8u64 {
        let x: Tensor<f64> = uniform(&[2, 3, 16, 16], 300 + case);
        let transforms = [
            None,
            Some(TransformConfig::new(TransformKind::Rt1).with_patch(4)),
            Some(TransformConfig::new(TransformKind::Rt2).with_patch(4)),
        ];
        for t in transforms {
            let pipe = Pipeline::new(t.clone(), &IdentityPurifier, &f);
            let grad = |bpda: bool| {
                let est = GradientEstimatorConfig { bpda, eot_k: 3 };
                input_gradient(&pipe, &x, &[1, 8], &est, &mut SeededRng::new(case))
            };
            let (a, b) = (
                grad(true).map_err(|e| e.to_string())?,
                grad(false).map_err(|e| e.to_string())?,
            );
            let err = relative_error(&a, &b, 1e-12);
            ensure(err < 1e-12, || format!("{t:?}: relative error {err:e}"))?;
        }
    }
    Ok(())
}

fn eot_on_deterministic() -> Result<(), String> {
    let (f, p) = toy_nets(3);
    for case in 0..8u64 {
        let x: Tensor<f64> = uniform(&[2, 3, 16, 16], 400 + case);
        let pipe = Pipeline::new(None, &p, &f);
        let one = input_gradient(
            &pipe,
            &x,
            &[0, 5],
            &GradientEstimatorConfig::exact(),
            &mut SeededRng::new(case),
        )
        .map_err(|e| e.to_string())?;
        let est = GradientEstimatorConfig {
            bpda: false,
            eot_k: 2 + case as usize,
        };
        let many =
            input_gradient(&pipe, &x, &[0, 5], &est, &mut SeededRng::new(case + 50)).map_err(|e| e.to_string())?;
        let err = relative_error(&many, &one, 1e-12);
        ensure(err < 1e-12, || format!("eot {}: relative error {err:e}", est.eot_k))?;
    }
    Ok(())
}

fn loss_additivity() -> Result<(), String> {
    let f = ClassifierNet::<f64>::new(ClassifierArch::toy(3, 16, 10), &mut SeededRng::new(4)).unwrap();
    let g = PurifierNet::<f64>::new(PurifierArch::toy(PurifierVariant::Gan, 3, 16), &mut SeededRng::new(5)).unwrap();
    let d = DiscriminatorNet::<f64>::new(DiscriminatorArch::toy(3, 16), &mut SeededRng::new(6)).unwrap();
    let mut pick = SeededRng::new(102);
    for case in 0..CASES {
        let x: Tensor<f64> = uniform(&[2, 3, 16, 16], 500 + case);
        let y = [pick.gen_range(0..10), pick.gen_range(0..10)];
        let lambda = [0.0, 0.1, 0.5, 2.0][case as usize % 4];
        let kind = TransformKind::ALL[case as usize % 3];
        let cfg = TransformConfig::new(kind).with_patch(4).with_masks(4);
        let draw = TransformDraw::sample(&cfg, [2, 3, 16, 16], &mut SeededRng::new(case)).map_err(|e| e.to_string())?;
        let mut graph = Graph::new();
        let b = g.bind(&mut graph, true);
        let out =
            loss_atop(&mut graph, &x, &y, Some(&draw), &b, Some(&d), Some(&f), lambda).map_err(|e| e.to_string())?;
        let l = out.breakdown;
        let gap = (l.total - (l.l_org + lambda * l.l_cls)).abs();
        ensure(gap <= 1e-6, || format!("lambda {lambda}: total off by {gap:e}"))?;
    }

    // every logged fine-tuning step; training runs in f32 where l_org is a
    // per-image l1 sum of order 10-100, so the 1e-6 scales with |total|
    let (f, g, d, data) = small_setup();
    let cfg = small_atop();
    let out =
        finetune_atop(&cfg, g, Some(d), &f, &data, &mut SeededRng::new(7), |_| Ok(())).map_err(|e| e.to_string())?;
    for r in &out.log {
        let gap = (r.total - (r.l_org + cfg.lambda * r.l_cls)).abs();
        let tol = 1e-6 * r.total.abs().max(1.0);
        ensure(gap <= tol, || {
            format!("step {}: total {} off by {gap:e}", r.step, r.total)
        })?;
    }
    Ok(())
}

type Setup = (
    ClassifierNet<f32>,
    PurifierNet<f32>,
    DiscriminatorNet<f32>,
    atop_core::data::LabeledDataset,
);

fn small_setup() -> Setup {
    let mut rng = SeededRng::new(8);
    let f = ClassifierNet::new(ClassifierArch::toy(3, 16, 4), &mut rng).unwrap();
    let g = PurifierNet::new(PurifierArch::toy(PurifierVariant::Gan, 3, 16), &mut rng).unwrap();
    let d = DiscriminatorNet::new(DiscriminatorArch::toy(3, 16), &mut rng).unwrap();
    let data = make_synthetic_dataset(&mut rng, &SyntheticSpec::new(4, 16, 16, 4)).unwrap();
    (f, g, d, data)
}

fn small_atop() -> AtopConfig {
    AtopConfig {
        epochs: 2,
        batch_size: 4,
        optimizer: OptimizerConfig::adam(3e-3),
        ..AtopConfig::default()
    }
}

fn bits(p: &Params<f32>) -> Vec<u32> {
    p.tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn classifier_frozen() -> Result<(), String> {
    let (f, g, d, data) = small_setup();
    let before = (bits(&f.params), f.params.checksum());
    let out = finetune_atop(
        &small_atop(),
        g.clone(),
        Some(d),
        &f,
        &data,
        &mut SeededRng::new(9),
        |_| Ok(()),
    )
    .map_err(|e| e.to_string())?;
    ensure(bits(&f.params) == before.0, || "classifier parameters changed".into())?;
    ensure(out.classifier_checksum == before.1, || {
        "classifier checksum changed".into()
    })?;
    ensure(out.purifier.params != g.params, || "purifier did not move".into())
}
