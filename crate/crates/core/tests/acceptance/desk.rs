//! Desk-scale experiment behind criteria 3-7: synthetic 10-class 3x16x16
//! data, master seed 0, the same stream derivations as the `atop` CLI.
//!
//! Trained models are built once per process and shared by the criteria.
//! Setting `ATOP_ACCEPTANCE_CACHE` to a directory keeps the checkpoints
//! there between runs; delete it after changing any training code.

use std::collections::HashMap;
use std::path::PathBuf;

use atop_core::attacks::{AttackConfig, EPS_8};
use atop_core::data::{make_synthetic_dataset, sample_eval_subset, LabeledDataset, SyntheticSpec, EVAL_SUBSET};
use atop_core::evaluation::{robust_accuracy, standard_accuracy, AccuracyEstimate};
use atop_core::models::{
    load_checkpoint, save_checkpoint, Checkpoint, ClassifierArch, ClassifierNet, DiscriminatorArch, DiscriminatorNet,
    IdentityPurifier, Pipeline, Purifier, PurifierArch, PurifierNet, PurifierVariant,
};
use atop_core::training::{
    finetune_atop, pretrain_purifier, train_classifier, AtopConfig, ClassifierTrainConfig, PretrainConfig, TrainWith,
};
use atop_core::transforms::{TransformConfig, TransformKind};
use atop_core::SeededRng;

use crate::Check;

const SEED: u64 = 0;
const CLASSES: usize = 10;
const SIDE: usize = 16;
const TRAIN_PER_CLASS: usize = 200;
const TEST_PER_CLASS: usize = 100;
const REPEATS: usize = 2;

/// Which purifier sits in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Stage {
    Pretrained,
    AdversarialFt,
    CleanFt,
}

impl Stage {
    fn label(self) -> &'static str {
        match self {
            Stage::Pretrained => "base",
            Stage::AdversarialFt => "atop",
            Stage::CleanFt => "clean-ft",
        }
    }
}

pub struct Desk {
    master: SeededRng,
    cache: Option<PathBuf>,
    data: Option<(LabeledDataset, LabeledDataset)>,
    classifier: Option<ClassifierNet<f32>>,
    purifiers: HashMap<Stage, PurifierNet<f32>>,
    critic: Option<DiscriminatorNet<f32>>,
    results: HashMap<String, AccuracyEstimate>,
}

fn pgd10() -> AttackConfig {
    AttackConfig::pgd(EPS_8, 10).with_eot(20)
}

fn stadv10() -> AttackConfig {
    AttackConfig::stadv(0.05, 10).with_eot(20)
}

impl Desk {
    pub fn new() -> Self {
        let cache = std::env::var_os("ATOP_ACCEPTANCE_CACHE").map(PathBuf::from);
        if let Some(dir) = &cache {
            std::fs::create_dir_all(dir).expect("cache directory");
        }
        Desk {
            master: SeededRng::new(SEED),
            cache,
            data: None,
            classifier: None,
            purifiers: HashMap::new(),
            critic: None,
            results: HashMap::new(),
        }
    }

    fn data(&mut self) -> &(LabeledDataset, LabeledDataset) {
        let master = self.master.clone();
        self.data.get_or_insert_with(|| {
            let spec = SyntheticSpec::new(CLASSES, SIDE, SIDE, TRAIN_PER_CLASS);
            let test_spec = SyntheticSpec::new(CLASSES, SIDE, SIDE, TEST_PER_CLASS);
            let train = make_synthetic_dataset(&mut master.derive("data/train"), &spec).unwrap();
            let test = make_synthetic_dataset(&mut master.derive("data/test"), &test_spec).unwrap();
            (train, test)
        })
    }

    fn subset(&mut self) -> LabeledDataset {
        let master = self.master.clone();
        let test = &self.data().1;
        sample_eval_subset(test, EVAL_SUBSET.min(test.len()), &mut master.derive("subset")).unwrap()
    }

    fn cached(&self, name: &str) -> Option<Checkpoint> {
        let path = self.cache.as_ref()?.join(name);
        path.exists()
            .then(|| load_checkpoint(&path).expect("readable cached checkpoint"))
    }

    fn store(&self, name: &str, ck: Checkpoint) {
        if let Some(dir) = &self.cache {
            save_checkpoint(&ck, &dir.join(name)).expect("writable cache");
        }
    }

    fn classifier(&mut self) -> ClassifierNet<f32> {
        if let Some(f) = &self.classifier {
            return f.clone();
        }
        let net = match self.cached("classifier.ckpt") {
            Some(ck) => ck.into_classifier(None).unwrap(),
            None => {
                let master = self.master.clone();
                let train = &self.data().0;
                let cfg = ClassifierTrainConfig::default();
                let arch = ClassifierArch::new(3, SIDE, CLASSES);
                let (net, _) = train_classifier(arch, &cfg, train, &mut master.derive("classifier")).unwrap();
                self.store(
                    "classifier.ckpt",
                    Checkpoint::classifier(&net, serde_json::json!({}), SEED),
                );
                net
            }
        };
        self.classifier = Some(net.clone());
        net
    }

    fn pretrained(&mut self) -> (PurifierNet<f32>, DiscriminatorNet<f32>) {
        if let (Some(g), Some(d)) = (self.purifiers.get(&Stage::Pretrained), &self.critic) {
            return (g.clone(), d.clone());
        }
        let (g, d) = match (self.cached("purifier.ckpt"), self.cached("critic.ckpt")) {
            (Some(g), Some(d)) => (g.into_purifier(None).unwrap(), d.into_discriminator(None).unwrap()),
            _ => {
                let mut rng = self.master.derive("purifier");
                let g = PurifierNet::new(PurifierArch::new(PurifierVariant::Gan, 3, SIDE), &mut rng).unwrap();
                let d = DiscriminatorNet::new(DiscriminatorArch::new(3, SIDE), &mut rng).unwrap();
                let train = &self.data().0;
                let out =
                    pretrain_purifier(&PretrainConfig::default(), g, Some(d), train, &mut rng, |_| Ok(())).unwrap();
                let d = out.critic.expect("GAN critic");
                self.store(
                    "purifier.ckpt",
                    Checkpoint::purifier(&out.purifier, serde_json::json!({}), SEED),
                );
                self.store(
                    "critic.ckpt",
                    Checkpoint::discriminator(&d, serde_json::json!({}), SEED),
                );
                (out.purifier, d)
            }
        };
        self.purifiers.insert(Stage::Pretrained, g.clone());
        self.critic = Some(d.clone());
        (g, d)
    }

    fn purifier(&mut self, stage: Stage) -> PurifierNet<f32> {
        if let Some(p) = self.purifiers.get(&stage) {
            return p.clone();
        }
        let (g, d) = self.pretrained();
        let name = format!("{}-purifier.ckpt", stage.label());
        let net = match self.cached(&name) {
            Some(ck) => ck.into_purifier(None).unwrap(),
            None => {
                let cfg = AtopConfig {
                    train_with: if stage == Stage::CleanFt {
                        TrainWith::Clean
                    } else {
                        TrainWith::Adversarial
                    },
                    ..AtopConfig::default()
                };
                let f = self.classifier();
                let master = self.master.clone();
                let train = &self.data().0;
                // both fine-tunings start from the same state and stream
                let out = finetune_atop(&cfg, g, Some(d), &f, train, &mut master.derive("atop"), |_| Ok(())).unwrap();
                self.store(&name, Checkpoint::purifier(&out.purifier, serde_json::json!({}), SEED));
                out.purifier
            }
        };
        self.purifiers.insert(stage, net.clone());
        net
    }

    /// Accuracy of one cell of the benchmark matrix, drawn from the same
    /// streams as the CLI's `evaluate`. `attack = None` is standard accuracy.
    fn accuracy(&mut self, kind: TransformKind, stage: Stage, attack: Option<&AttackConfig>) -> AccuracyEstimate {
        let key = format!(
            "{} {} {}",
            kind.name(),
            stage.label(),
            attack.map_or("none".into(), |a| a.id())
        );
        if let Some(r) = self.results.get(&key) {
            return r.clone();
        }
        let f = self.classifier();
        let g = match stage {
            Stage::Pretrained => self.pretrained().0,
            s => self.purifier(s),
        };
        let subset = self.subset();
        let pipe = Pipeline::new(Some(TransformConfig::new(kind)), &g as &dyn Purifier<f32>, &f);
        let atop = stage != Stage::Pretrained;
        // clean and adversarial fine-tuning share streams: matched seeds
        let cell = self.master.derive(&format!("cell/{}/{atop}", kind.name()));
        let r = match attack {
            None => standard_accuracy(&pipe, &subset, &cell, REPEATS),
            Some(a) => robust_accuracy(&pipe, a, &subset, &cell.derive(&a.id()), REPEATS),
        }
        .unwrap();
        eprintln!("  {key}: {:.2} +- {:.2}", r.mean, r.stderr);
        self.results.insert(key, r.clone());
        r
    }
}

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn undefended_baseline(desk: &mut Desk) -> Check {
    let f = desk.classifier();
    let subset = desk.subset();
    let pipe = Pipeline::new(None, &IdentityPurifier, &f);
    let cell = desk.master.derive("cell/none/false");
    let clean = standard_accuracy(&pipe, &subset, &cell, 1).unwrap().mean;
    let attack = AttackConfig::pgd(EPS_8, 20).with_eot(1);
    let robust = robust_accuracy(&pipe, &attack, &subset, &cell.derive(&attack.id()), 1)
        .unwrap()
        .mean;
    verdict(
        clean >= 85.0 && robust <= 5.0,
        format!("clean {clean:.2} (>= 85), PGD-20 robust {robust:.2} (<= 5)"),
    )
}

pub fn atop_trend(desk: &mut Desk) -> Check {
    let rt2 = TransformKind::Rt2;
    let (base_std, atop_std) = (
        desk.accuracy(rt2, Stage::Pretrained, None).mean,
        desk.accuracy(rt2, Stage::AdversarialFt, None).mean,
    );
    let (base_rob, atop_rob) = (
        desk.accuracy(rt2, Stage::Pretrained, Some(&pgd10())).mean,
        desk.accuracy(rt2, Stage::AdversarialFt, Some(&pgd10())).mean,
    );
    let gain = atop_rob - base_rob;
    let drop = base_std - atop_std;
    verdict(
        gain >= 5.0 && drop <= 1.0,
        format!(
            "RT2 PGD-10 robust {base_rob:.2} -> {atop_rob:.2} (gain {gain:+.2}, need >= +5), \
             standard {base_std:.2} -> {atop_std:.2} (drop {drop:.2}, need <= 1)"
        ),
    )
}

pub fn strength_ordering(desk: &mut Desk) -> Check {
    let [r1, r2, r3] = TransformKind::ALL.map(|k| desk.accuracy(k, Stage::Pretrained, None).mean);
    let rob1 = desk
        .accuracy(TransformKind::Rt1, Stage::Pretrained, Some(&pgd10()))
        .mean;
    verdict(
        r1 - r2 >= 1.0 && r2 - r3 >= 1.0 && rob1 <= 10.0,
        format!("standard RT1 {r1:.2} > RT2 {r2:.2} > RT3 {r3:.2} (gaps >= 1), RT1 PGD-10 robust {rob1:.2} (<= 10)"),
    )
}

pub fn unseen_attack(desk: &mut Desk) -> Check {
    let rt2 = TransformKind::Rt2;
    let base = desk.accuracy(rt2, Stage::Pretrained, Some(&stadv10())).mean;
    let atop = desk.accuracy(rt2, Stage::AdversarialFt, Some(&stadv10())).mean;
    verdict(
        atop > base,
        format!("RT2 StAdv robust base {base:.2} -> FGSM fine-tuned {atop:.2} (need strictly higher)"),
    )
}

pub fn clean_vs_adversarial(desk: &mut Desk) -> Check {
    let rt2 = TransformKind::Rt2;
    let clean_std = desk.accuracy(rt2, Stage::CleanFt, None).mean;
    let adv_std = desk.accuracy(rt2, Stage::AdversarialFt, None).mean;
    let clean_rob = desk.accuracy(rt2, Stage::CleanFt, Some(&pgd10())).mean;
    let adv_rob = desk.accuracy(rt2, Stage::AdversarialFt, Some(&pgd10())).mean;
    verdict(
        clean_std >= adv_std - 0.5 && adv_rob >= clean_rob - 0.5,
        format!(
            "standard clean-FT {clean_std:.2} vs adv-FT {adv_std:.2}, \
             PGD-10 robust adv-FT {adv_rob:.2} vs clean-FT {clean_rob:.2} (ties within 0.5)"
        ),
    )
}
