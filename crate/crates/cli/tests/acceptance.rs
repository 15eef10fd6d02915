//! One PASS/FAIL line per acceptance criterion, written straight to stderr so the
//! lines appear even when test output is captured.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use shuffleunet::data::{load_series, Volume};
use shuffleunet::metrics::MetricReport;

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn check(name: &'static str, budget_s: f64, f: impl FnOnce() -> Result<String, String>) -> Line {
    let start = Instant::now();
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
    let seconds = start.elapsed().as_secs_f64();
    let (mut pass, mut detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if seconds > budget_s {
        pass = false;
        detail = format!("{detail}; over the {budget_s:.0} s budget");
    }
    let line = Line { name, pass, detail, seconds };
    let _ = writeln!(
        std::io::stderr(),
        "{} {:<22} {:>7.1}s  {}",
        if line.pass { "PASS" } else { "FAIL" },
        line.name,
        line.seconds,
        line.detail
    );
    line
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn shuffle_round_trip() -> Result<String, String> {
    common::shuffle_round_trips(500, 2024)?;
    Ok("500 cases, r in {2,3}: bitwise identity, multiset preserved".into())
}

fn shape_contract() -> Result<String, String> {
    let bad = common::shape_contract_violations(4);
    ensure(
        bad.is_empty(),
        if bad.is_empty() {
            "(4,1,96,96,48) -> (4,1,96,96,48); 64/128/256/512, latent 1024, 5*F_l concats (shape tracer)".into()
        } else {
            bad.join("; ")
        },
    )
}

fn gradient_check() -> Result<String, String> {
    let r = common::gradient_check(common::gradcheck_config(), 8, common::Coverage::Sampled(8), 5);
    ensure(
        r.max_rel_error < 1e-3 && r.directional_checks == r.tensors && r.kink_skips == 0,
        format!(
            "max rel err {:.2e} < 1e-3 over {} tensors, {} slice and {} element probes ({})",
            r.max_rel_error, r.tensors, r.slice_checks, r.element_checks, r.worst
        ),
    )
}

fn overfit() -> Result<String, String> {
    let l = common::overfit_losses(200, 1e-3);
    let best = l.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(
        best < 0.1 * l[0],
        format!("L1 {:.4} -> {best:.4} ({:.1}% of initial, < 10%)", l[0], 100.0 * best / l[0]),
    )
}

fn desk_scale() -> Result<String, String> {
    let r = common::desk_scale(&common::DeskScale::default());
    ensure(
        r.shuffleunet.0 > r.trilinear.0 && r.shuffleunet.1 < r.trilinear.1,
        format!(
            "SSIM/RMSE shuffleunet {:.4}/{:.4} vs trilinear {:.4}/{:.4} (aligned trilinear {:.4}/{:.4}, sinc {:.4}/{:.4})",
            r.shuffleunet.0,
            r.shuffleunet.1,
            r.trilinear.0,
            r.trilinear.1,
            r.trilinear_aligned.0,
            r.trilinear_aligned.1,
            r.sinc.0,
            r.sinc.1
        ),
    )
}

fn metric_oracles() -> Result<String, String> {
    use shuffleunet::metrics::evaluate_pair;
    let w = common::metric_oracle_deviation(20, 7);
    let a = common::random_volume([16; 3], 99);
    let s = evaluate_pair(a.view(), a.view(), None).map_err(|e| e.to_string())?;
    ensure(
        w.iter().all(|d| *d < 1e-6) && (s.ssim, s.uqi, s.rmse) == (1.0, 1.0, 0.0),
        format!(
            "max |lib - brute| ssim {:.1e}, uqi {:.1e}, rmse {:.1e} (< 1e-6); identical -> ({}, {}, {})",
            w[0], w[1], w[2], s.ssim, s.uqi, s.rmse
        ),
    )
}

fn dti_round_trip() -> Result<String, String> {
    let r = common::dti_round_trip(50, 4);
    ensure(
        r.coefficient_error < 1e-9 && r.eigenvalue_error < 1e-9 && r.scalar_error < 1e-9 && r.rotation_error < 1e-8 && r.invariance_error < 1e-8,
        format!(
            "coef err {:.1e}, eigen err {:.1e}, FA/MD/AD err {:.1e} (< 1e-9); rotation {:.1e}, invariance {:.1e} (< 1e-8); cond {:.0}",
            r.coefficient_error, r.eigenvalue_error, r.scalar_error, r.rotation_error, r.invariance_error, r.condition_number
        ),
    )
}

fn ttest() -> Result<String, String> {
    use shuffleunet::stats::{ttest_independent, SampleSet, VarianceModel};
    common::ttest_properties(11)?;
    let r = ttest_independent(
        &SampleSet::new("a", "uqi", vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        &SampleSet::new("b", "uqi", vec![2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        VarianceModel::Pooled,
    );
    Ok(format!(
        "t = {}, df = {}, p = {:.4} (0.3466 +/- 1e-3); antisymmetry, shift, scale, p<0.05 flag hold",
        r.t, r.df, r.p
    ))
}

fn run(bin: &str, args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`shuffleunet {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ))
    }
}

fn nifti_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    v.retain(|p| p.to_string_lossy().ends_with(".nii.gz"));
    v.sort();
    v
}

fn cli_smoke() -> Result<String, String> {
    let bin = env!("CARGO_BIN_EXE_shuffleunet");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--output-dir", &p("raw"), "--subjects", "5", "--dims", "32", "--directions", "6", "--seed", "1"],
        vec!["prepare", "--input-dir", &p("raw"), "--output-dir", &p("data"), "--split", "0.4,0.2,0.4"],
        vec![
            "train", "--data", &p("data"), "--output", &p("ck"), "--epochs", "2", "--levels", "2", "--base-filters", "8",
            "--patch-size", "16", "--patches-per-volume", "2", "--batch-size", "2", "--learning-rate", "1e-3",
        ],
        vec![
            "infer", "--checkpoint", &p("ck/best.ckpt"), "--input", &p("data/sinc"), "--output", &p("pred/shuffleunet"),
            "--method", "shuffleunet", "--patch-size", "16", "--overlap", "4", "--manifest", &p("data/split.txt"), "--subset", "test",
        ],
        vec![
            "infer", "--input", &p("data/lr"), "--output", &p("pred/trilinear"), "--method", "trilinear",
            "--manifest", &p("data/split.txt"), "--subset", "test",
        ],
        vec!["evaluate", "--pred-dir", &p("pred/shuffleunet"), "--gt-dir", &p("data/hr"), "--output", &p("metrics.csv")],
        vec!["evaluate", "--pred-dir", &p("pred/trilinear"), "--gt-dir", &p("data/hr"), "--output", &p("metrics.csv"), "--append"],
        vec![
            "derive", "--dwi-dir", &p("pred/shuffleunet"), "--output", &p("maps"), "--reference-dir", &p("data/hr"),
            "--report", &p("derived.csv"), "--method", "shuffleunet",
        ],
        vec![
            "stats", "--report-a", &p("metrics.csv"), "--method-a", "shuffleunet", "--method-b", "trilinear",
            "--metric", "uqi", "--output", &p("stats.csv"),
        ],
        vec!["report", "--csv", &p("metrics.csv"), "--out", &p("report")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        run(bin, &args)?;
    }

    let metrics = MetricReport::load(Path::new(&p("metrics.csv"))).map_err(|e| e.to_string())?;
    if metrics.methods() != ["shuffleunet", "trilinear"] || metrics.values("trilinear", "ssim").len() != 2 {
        return Err(format!("unexpected metrics.csv: {:?}", metrics.methods()));
    }
    let derived = MetricReport::load(Path::new(&p("derived.csv"))).map_err(|e| e.to_string())?;
    if derived.values("shuffleunet", "fa.uqi").len() != 2 {
        return Err("derived.csv lacks fa.uqi rows for both test subjects".into());
    }
    let stats = std::fs::read_to_string(p("stats.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = stats.lines().collect();
    if lines.len() != 2 || lines[0] != "metric,method_a,method_b,t,df,p,significant" || !lines[1].starts_with("uqi,shuffleunet,trilinear,") {
        return Err(format!("malformed stats.csv: {stats:?}"));
    }
    for m in ["ssim", "rmse", "uqi"] {
        let img = image::open(p(&format!("report/{m}.png"))).map_err(|e| format!("{m}.png: {e}"))?;
        if img.width() < 100 || img.height() < 100 {
            return Err(format!("{m}.png is {}x{}", img.width(), img.height()));
        }
    }
    let preds = nifti_files(Path::new(&p("pred/shuffleunet")));
    if preds.len() != 2 {
        return Err(format!("expected 2 predictions, found {}", preds.len()));
    }
    for f in &preds {
        let frames = load_series(f).map_err(|e| e.to_string())?;
        if frames.len() != 7 || frames[0].dims() != [32; 3] || frames.iter().any(|v| v.voxels.iter().any(|x| !x.is_finite())) {
            return Err(format!("{}: malformed prediction", f.display()));
        }
    }
    let maps: Vec<std::path::PathBuf> = std::fs::read_dir(p("maps"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path().join("fa.nii.gz")))
        .filter(|f| f.is_file())
        .collect();
    if maps.len() != 2 {
        return Err(format!("expected FA maps for 2 subjects, found {}", maps.len()));
    }
    for f in &maps {
        let fa = Volume::load(f).map_err(|e| e.to_string())?;
        if fa.dims() != [32; 3] || fa.voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("{}: malformed FA map", f.display()));
        }
    }
    Ok(format!(
        "10 commands exit 0; metrics/derived/stats CSV, 3 PNG charts, {} NIfTI predictions and {} FA maps well-formed",
        preds.len(),
        maps.len()
    ))
}

#[test]
fn acceptance_criteria() {
    let lines = vec![
        check("shuffle round trip", 30.0, shuffle_round_trip),
        check("shape contract", 60.0, shape_contract),
        check("gradient check", 300.0, gradient_check),
        check("overfit sanity", 300.0, overfit),
        check("desk-scale ordering", 1800.0, desk_scale),
        check("metric oracles", 60.0, metric_oracles),
        check("DTI round trip", 60.0, dti_round_trip),
        check("t-test oracle", 60.0, ttest),
        check("CLI smoke", 1200.0, cli_smoke),
    ];
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.name).collect();
    let _ = writeln!(std::io::stderr(), "{}/{} acceptance criteria passed", lines.len() - failed.len(), lines.len());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
