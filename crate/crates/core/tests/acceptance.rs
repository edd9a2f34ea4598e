//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Exits non-zero when any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::benchmark::{median, run_seed, PRETRAIN_EPOCHS, TILES};
use common::criteria::{self, Outcome};

fn report(n: usize, name: &str, o: &Outcome) -> bool {
    println!("criterion {n:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn benchmark() -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in 0..3 {
        match run_seed(seed) {
            Ok(s) => {
                println!(
                    "  seed {}: scratch {:.4}, pretrained {:.4}, unimodal [{}] ({:.0} s)",
                    s.seed,
                    s.scratch,
                    s.pretrained,
                    s.unimodal.iter().map(|(n, f)| format!("{n} {f:.4}")).collect::<Vec<_>>().join(", "),
                    s.secs
                );
                runs.push(s);
            }
            Err(e) => {
                let fail = Outcome { pass: false, detail: format!("seed {seed} failed: {e}") };
                return (fail, Outcome { pass: false, detail: "benchmark did not complete".into() });
            }
        }
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let gain = median(runs.iter().map(|s| 100.0 * (s.pretrained - s.scratch)).collect());
    let multi = median(runs.iter().map(|s| s.pretrained).collect());
    let best_uni = median(runs.iter().map(|s| s.best_unimodal()).collect());
    let c9 = Outcome {
        pass: gain >= 3.0 && mins <= 45.0,
        detail: format!(
            "{TILES} tiles, {PRETRAIN_EPOCHS} pretrain epochs, median weighted-F1 gain {gain:+.2} points (need >= 3), {mins:.1} min (limit 45)"
        ),
    };
    let multi_ge = runs.iter().map(|s| s.pretrained - s.best_unimodal()).collect();
    let c10 = Outcome {
        pass: median(multi_ge) >= 0.0,
        detail: format!("median weighted F1 all modalities {multi:.4} vs best single modality {best_uni:.4}"),
    };
    (c9, c10)
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut ok = true;
    ok &= report(1, "match matrix vs brute force", &criteria::match_matrix_oracle());
    ok &= report(2, "contrastive closed forms", &criteria::contrastive_closed_form());
    ok &= report(3, "loss oracles", &criteria::loss_oracles());
    ok &= report(4, "gradient checks", &criteria::gradient_checks());
    ok &= report(5, "unpool placement", &criteria::unpool_placement());
    ok &= report(6, "date filter", &criteria::date_filter_sweep());
    ok &= report(7, "fusion invariants", &criteria::fusion_invariants());
    ok &= report(8, "determinism", &criteria::determinism(&dir.path().join("determinism")));
    let (c9, c10) = benchmark();
    ok &= report(9, "pretraining benefit", &c9);
    ok &= report(10, "multimodal vs unimodal", &c10);
    ok &= report(11, "scheduler, optimizer, resume", &criteria::scheduler_optimizer(&dir.path().join("resume")));
    ok &= report(12, "F1 conventions", &criteria::f1_conventions());
    println!("acceptance: {}", if ok { "all criteria passed" } else { "some criteria FAILED" });
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
