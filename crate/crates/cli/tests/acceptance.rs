//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_CRITERIA=1,2,9` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use discrete_grad::analysis::schedule_table;
use discrete_grad::config::{ExperimentConfig, Preset};
use discrete_grad::csv::{read_csv, CsvRow, SeedField};
use discrete_grad::estimators::Schedule;
use discrete_grad::experiments::{run_cell, Cell};
use discrete_grad::oracle::spearman;
use discrete_grad::selftest::{
    collapse_suite, exact_gradient_fd_suite, gumbel_max_suite, monte_carlo_suite, op_gradient_suite, CheckOutcome,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot hold at desk scale; see the README.
const EXPECTED_RED: &[u8] = &[5, 7];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn workers() -> String {
    std::thread::available_parallelism().map_or(1, |n| n.get()).to_string()
}

fn cli(args: &[&str], data_dir: &Path) -> (Output, f64) {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_discrete-grad"))
        .args(args)
        .env("DISCRETE_GRAD_DATA_DIR", data_dir)
        .current_dir(workspace())
        .output()
        .expect("spawn discrete-grad");
    (out, started.elapsed().as_secs_f64())
}

fn cli_ok(args: &[&str], data_dir: &Path) -> Result<f64, String> {
    let (out, secs) = cli(args, data_dir);
    if out.status.success() {
        Ok(secs)
    } else {
        Err(format!("`{}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

fn summarize(checks: &[CheckOutcome]) -> (bool, String) {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let cases: usize = checks.iter().map(|c| c.cases).sum();
    if failed.is_empty() {
        (true, format!("{} checks, {cases} cases", checks.len()))
    } else {
        (false, failed.join("; "))
    }
}

fn criterion_1() -> Verdict {
    let checks = op_gradient_suite(100, 0);
    let secs: f64 = checks.iter().map(|c| c.seconds).sum();
    let (ok, detail) = summarize(&checks);
    let enough = checks.iter().all(|c| c.cases >= 100);
    verdict(ok && enough && secs < 60.0, format!("{detail}, {secs:.2}s"))
}

fn criterion_2() -> Verdict {
    let c = collapse_suite(50, 0);
    verdict(c.passed && c.cases == 50, c.detail)
}

fn criterion_3() -> Verdict {
    let c = gumbel_max_suite(200_000, 0);
    verdict(c.passed, c.detail)
}

fn criterion_4() -> Verdict {
    let (ok, detail) = summarize(&[exact_gradient_fd_suite(256, 0), monte_carlo_suite(100_000, 0)]);
    verdict(ok, detail)
}

fn agg(rows: &[CsvRow], metric: &str) -> Vec<(f64, f64, f64)> {
    rows.iter()
        .filter(|r| r.seed == SeedField::Agg && r.metric == metric)
        .map(|r| (r.tau_f, r.tau_b, r.value))
        .collect()
}

fn per_pair(rows: &[CsvRow], metric: &str) -> Vec<(f64, f64, f64)> {
    rows.iter()
        .filter(|r| r.metric == metric)
        .map(|r| (r.tau_f, r.tau_b, r.value))
        .collect()
}

fn trend(values: &[(f64, f64, f64)], keep: impl Fn(f64, f64) -> bool, axis: impl Fn(f64, f64) -> f64) -> Option<f64> {
    let mut picked: Vec<(f64, f64)> = values.iter().filter(|v| keep(v.0, v.1)).map(|v| (axis(v.0, v.1), v.2)).collect();
    picked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x, y): (Vec<f64>, Vec<f64>) = picked.into_iter().unzip();
    (x.len() == 4).then(|| spearman(&x, &y)).flatten()
}

fn criterion_5(tmp: &Path, data: &Path) -> Verdict {
    let out = tmp.join("bias-variance");
    let secs = match cli_ok(&["bias-variance", "--out", out.to_str().unwrap(), "--workers", &workers()], data) {
        Ok(s) => s,
        Err(e) => return verdict(false, e),
    };
    let rows = read_csv(&out.join("results.csv")).unwrap();
    let mut rhos = Vec::new();
    let mut ok = secs < 1800.0;
    for metric in ["relative_bias", "relative_std"] {
        let v = per_pair(&rows, metric);
        let tb_sweep = trend(&v, |f, _| f == 1.6, |_, b| b);
        let tf_sweep = trend(&v, |_, b| b == 1.3, |f, _| f);
        ok &= tb_sweep.is_some_and(|r| r <= 0.0) && tf_sweep.is_some_and(|r| r >= 0.0);
        rhos.push(format!(
            "{metric}: rho(tau_b) {:+.2}, rho(tau_f) {:+.2}",
            tb_sweep.unwrap_or(f64::NAN),
            tf_sweep.unwrap_or(f64::NAN)
        ));
    }
    verdict(ok, format!("{}, {secs:.0}s", rhos.join("; ")))
}

fn criterion_6(tmp: &Path, data: &Path) -> Verdict {
    let out = tmp.join("gradient-gap");
    if let Err(e) = cli_ok(&["gradient-gap", "--out", out.to_str().unwrap(), "--workers", &workers()], data) {
        return verdict(false, e);
    }
    let rows = read_csv(&out.join("results.csv")).unwrap();
    let seeds: BTreeSet<String> = rows
        .iter()
        .filter(|r| r.metric == "gap")
        .map(|r| r.seed.to_string())
        .collect();
    let mut means: Vec<(f64, f64)> = agg(&rows, "gap_mean")
        .into_iter()
        .filter(|r| r.0 == 0.3)
        .map(|r| (r.1, r.2))
        .collect();
    means.sort_by(|a, b| a.0.total_cmp(&b.0));
    let taus: Vec<f64> = means.iter().map(|m| m.0).collect();
    let monotone = means.windows(2).all(|w| w[1].1 <= w[0].1);
    let listed = means.iter().map(|(t, g)| format!("{t}: {g:.3e}")).collect::<Vec<_>>().join(", ");
    verdict(
        monotone && taus == [0.3, 1.0, 3.0, 6.0] && seeds.len() >= 5,
        format!("{} seeds, mean gap by tau_b {listed}", seeds.len()),
    )
}

struct GridRun {
    rows: Vec<CsvRow>,
    seconds: f64,
}

fn grid(tmp: &Path, data: &Path, preset: &str) -> Result<GridRun, String> {
    let out = tmp.join(format!("grid-{preset}"));
    let seconds = cli_ok(
        &["grid", "--preset", preset, "--out", out.to_str().unwrap(), "--workers", &workers()],
        data,
    )?;
    Ok(GridRun {
        rows: read_csv(&out.join("results.csv")).map_err(|e| e.to_string())?,
        seconds,
    })
}

fn best(cells: &[(f64, f64, f64)], keep: impl Fn(f64, f64) -> bool) -> Option<(f64, f64, f64)> {
    cells
        .iter()
        .copied()
        .filter(|c| keep(c.0, c.1))
        .min_by(|a, b| a.2.total_cmp(&b.2))
}

fn criterion_7(ae: &Result<GridRun, String>, vae: &Result<GridRun, String>) -> Verdict {
    let (ae, vae) = match (ae, vae) {
        (Ok(a), Ok(v)) => (a, v),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e.clone()),
    };
    let mut ok = ae.seconds + vae.seconds < 7200.0;
    let mut parts = Vec::new();
    for (name, run, cells_expected) in [("ae", ae, 30), ("vae", vae, 25)] {
        let cells = agg(&run.rows, "final_val_loss_mean");
        let failed = run.rows.iter().filter(|r| r.metric == "failed").count();
        let full = best(&cells, |_, _| true);
        let diag = best(&cells, |f, b| f == b);
        let (Some(full), Some(diag)) = (full, diag) else {
            return verdict(false, format!("{name}: no aggregate cells"));
        };
        ok &= full.2 < diag.2 && cells.len() == cells_expected;
        if name == "ae" {
            ok &= full.1 > full.0;
        }
        let total = agg(&run.rows, "final_val_total_mean")
            .into_iter()
            .find(|c| c.0 == full.0 && c.1 == full.1)
            .map_or(f64::NAN, |c| c.2);
        parts.push(format!(
            "{name}: best ({}, {}) {:.6} [total {:.6}] vs diagonal ({}, {}) {:.6}, {} cells, {failed} failed, {:.0}s",
            full.0, full.1, full.2, total, diag.0, diag.1, diag.2, cells.len(), run.seconds
        ));
    }
    verdict(ok, parts.join("; "))
}

fn criterion_8(tmp: &Path, data: &Path, ae: &Result<GridRun, String>, vae: &Result<GridRun, String>) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for (preset, run, tf, tb, seed) in [(Preset::BinaryAe, ae, 0.3, 3.0, 0u64), (Preset::Vae8x4, vae, 1.0, 2.0, 1)] {
        let Ok(run) = run else {
            return verdict(false, "grid did not run");
        };
        let cfg = ExperimentConfig::preset(preset);
        let dataset = cfg.run.dataset.load(data).unwrap();
        let again = run_cell(&cfg.grid(), &Cell { tau_forward: tf, tau_backward: tb, seed }, &dataset, false);
        let recorded = run
            .rows
            .iter()
            .find(|r| r.tau_f == tf && r.tau_b == tb && r.seed == SeedField::Seed(seed) && r.metric == "final_val_loss")
            .map(|r| r.value.to_bits());
        let same = recorded.is_some() && recorded == again.final_val_loss.map(f64::to_bits);
        ok &= same;
        notes.push(format!("{preset:?} cell ({tf}, {tb}, seed {seed}) {}", if same { "bitwise equal" } else { "differs" }));
    }
    let config = write_config(tmp, "det.json", r#"{"run": {"epochs": 2}}"#);
    let mut results = Vec::new();
    for i in 0..2 {
        let out = tmp.join(format!("det-{i}"));
        if let Err(e) = cli_ok(
            &["train", "--config", &config, "--dataset", "synthetic", "--subset", "300", "--seed", "4", "--out", out.to_str().unwrap()],
            data,
        ) {
            return verdict(false, e);
        }
        let rows: Vec<CsvRow> = read_csv(&out.join("results.csv"))
            .unwrap()
            .into_iter()
            .filter(|r| r.metric != "runtime_seconds")
            .collect();
        let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
        results.push((rows, curve));
    }
    let cli_same = results[0].1 == results[1].1
        && results[0].0.len() == results[1].0.len()
        && results[0].0.iter().zip(&results[1].0).all(|(a, b)| a.bitwise_eq(b));
    ok &= cli_same;
    notes.push(format!("repeated CLI train {}", if cli_same { "bitwise equal" } else { "differs" }));
    verdict(ok, notes.join("; "))
}

fn criterion_9(tmp: &Path, data: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (s, e) = (rng.random_range(0.01..6.0), rng.random_range(0.01..6.0));
        let total = 2 * rng.random_range(1..500);
        let lin = Schedule::linear(s, e, total).unwrap();
        let geo = Schedule::geometric(s, e, total).unwrap();
        let checks = [
            (lin.value(0), s),
            (lin.value(total / 2), 0.5 * (s + e)),
            (lin.value(total), e),
            (lin.value(total + 7), e),
            (geo.value(0), s),
            (geo.value(total / 2), (s * e).sqrt()),
            (geo.value(total), e),
            (geo.value(total + 7), e),
        ];
        for (got, want) in checks {
            worst = worst.max((got - want).abs());
        }
    }
    let config = write_config(tmp, "sched.json", r#"{"run": {"epochs": 2}, "schedule_grid": {"seeds": [0]}}"#);
    let out = tmp.join("schedule-grid");
    if let Err(e) = cli_ok(
        &["schedule-grid", "--config", &config, "--dataset", "synthetic", "--subset", "300", "--out", out.to_str().unwrap()],
        data,
    ) {
        return verdict(false, e);
    }
    let text = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut seen = BTreeSet::new();
    let mut failed = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let key: Vec<u64> = f[..4].iter().map(|v| v.parse::<f64>().unwrap().to_bits()).collect();
        match f[5] {
            "final_val_loss" if f[6].parse::<f64>().unwrap().is_finite() => {
                seen.insert(key);
            }
            "failed" => failed += 1,
            _ => {}
        }
    }
    let table: BTreeSet<Vec<u64>> = schedule_table()
        .iter()
        .map(|p| [p.forward.start, p.forward.end, p.backward.start, p.backward.end].iter().map(|v| v.to_bits()).collect())
        .collect();
    verdict(
        worst <= 1e-12 && failed == 0 && seen == table,
        format!("closed-form max error {worst:.1e}; {} of {} schedule pairs ran, {failed} failed", seen.len(), table.len()),
    )
}

fn criterion_10(tmp: &Path) -> Verdict {
    let empty = tmp.join("no-data");
    std::fs::create_dir_all(&empty).unwrap();
    let out = tmp.join("selftest");
    let (res, secs) = cli(&["selftest", "--out", out.to_str().unwrap()], &empty);
    let stdout = String::from_utf8_lossy(&res.stdout);
    let passes = stdout.lines().filter(|l| l.starts_with("PASS ")).count();
    let fails = stdout.lines().filter(|l| l.starts_with("FAIL ")).count();
    verdict(
        res.status.success() && fails == 0 && passes > 0 && secs < 300.0,
        format!("exit {:?}, {passes} PASS, {fails} FAIL, {secs:.1}s", res.status.code()),
    )
}

fn main() {
    let selected: Option<BTreeSet<u8>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: u8| selected.as_ref().is_none_or(|s| s.contains(&id));
    let tmp = tempfile::tempdir().unwrap();
    let data = workspace().join("data");

    let mut unexpected = 0;
    let mut emit = |id: u8, v: Verdict| {
        let expected_red = EXPECTED_RED.contains(&id);
        let tag = match (v.passed, expected_red) {
            (true, _) => "PASS",
            (false, true) => "FAIL (expected at desk scale)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2}: {tag} | {}", v.detail);
        if !v.passed && !expected_red {
            unexpected += 1;
        }
    };

    let cheap: [(u8, &dyn Fn() -> Verdict); 4] =
        [(1, &criterion_1), (2, &criterion_2), (3, &criterion_3), (4, &criterion_4)];
    for (id, f) in cheap {
        if wanted(id) {
            emit(id, f());
        }
    }
    if wanted(9) {
        emit(9, criterion_9(tmp.path(), &data));
    }
    if wanted(10) {
        emit(10, criterion_10(tmp.path()));
    }
    if wanted(5) {
        emit(5, criterion_5(tmp.path(), &data));
    }
    if wanted(6) {
        emit(6, criterion_6(tmp.path(), &data));
    }
    if wanted(7) || wanted(8) {
        let ae = grid(tmp.path(), &data, "binary_ae");
        let vae = grid(tmp.path(), &data, "vae_8x4");
        if wanted(7) {
            emit(7, criterion_7(&ae, &vae));
        }
        if wanted(8) {
            emit(8, criterion_8(tmp.path(), &data, &ae, &vae));
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
