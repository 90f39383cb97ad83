//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. `ATOP_ACCEPTANCE_ONLY=1,2` restricts the run to the
//! listed criteria.

mod desk;
mod gradients;
mod properties;

use std::time::Instant;

pub type Check = Result<String, String>;

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ATOP_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut desk = desk::Desk::new();

    let criteria: Vec<(u32, &str, Box<dyn FnMut(&mut desk::Desk) -> Check>)> = vec![
        (1, "property suite", Box::new(|_| properties::run())),
        (2, "gradient oracles", Box::new(|_| gradients::run())),
        (3, "undefended baseline", Box::new(desk::undefended_baseline)),
        (4, "fine-tuning improves RT2 robustness", Box::new(desk::atop_trend)),
        (5, "transform strength ordering", Box::new(desk::strength_ordering)),
        (6, "unseen-attack generalization", Box::new(desk::unseen_attack)),
        (
            7,
            "clean vs adversarial fine-tuning",
            Box::new(desk::clean_vs_adversarial),
        ),
    ];
    let mut failed = Vec::new();
    for (n, name, mut check) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = check(&mut desk);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS  {detail}  [{secs:.0}s]"),
            Err(detail) => {
                println!("criterion {n} ({name}): FAIL  {detail}  [{secs:.0}s]");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

/// Collects named sub-checks; the criterion fails if any of them fails.
#[derive(Default)]
pub struct Checklist {
    passed: Vec<String>,
    failed: Vec<String>,
}

impl Checklist {
    pub fn check(&mut self, name: &str, outcome: Result<(), String>) {
        match outcome {
            Ok(()) => self.passed.push(name.to_string()),
            Err(e) => self.failed.push(format!("{name}: {e}")),
        }
    }

    pub fn finish(self) -> Check {
        if self.failed.is_empty() {
            Ok(format!("{} checks", self.passed.len()))
        } else {
            Err(self.failed.join("; "))
        }
    }
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
