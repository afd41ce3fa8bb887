//! Acceptance checks, one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rca_core::analysis::{
    audit_flooring_bound, gen_synthetic_attention, sharpness_sweep, SweepSpec, SyntheticFamilyConfig, SLACK_TOL,
};
use rca_core::attn::{apply_rca, reweight, RcaConfig, Scheme};
use rca_core::detparse::{parse_response, RawResponse};
use rca_core::dumpio::{AttentionDump, DumpError};
use rca_core::fitap::{fitap, mean_ap, Detection, GroundTruthBox, ThresholdLadder};
use rca_core::naive;
use rca_core::stats::{correlation_p_value, percent_change};
use rca_core::NormalizedBox;

use common::{fixture, path_str, rca, snapshot};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn flooring_audit() -> Check {
    let start = Instant::now();
    let report = audit_flooring_bound(10_000, 2024).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(report.instances == 10_000, || format!("ran {} instances", report.instances))?;
    ensure(report.violations == 0, || format!("{} violations", report.violations))?;
    ensure(report.min_slack >= -SLACK_TOL, || format!("min slack {:e}", report.min_slack))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "10000 instances, 0 violations, min slack {:.3e}, {elapsed:.2?}",
        report.min_slack
    ))
}

fn row_stochasticity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for k in 0..1_000u64 {
        let cfg = SyntheticFamilyConfig {
            tokens: rng.random_range(1..=128),
            heads: rng.random_range(1..=16),
            dims: 1,
            tau: 10f64.powf(rng.random_range(-2.0..1.0)),
            seed: 17,
            stream: k,
        };
        let (stack, _) = gen_synthetic_attention(&cfg).map_err(|e| e.to_string())?;
        let scheme = if rng.random_bool(0.5) {
            Scheme::Gaussian
        } else {
            Scheme::InverseDistance
        };
        let mut rca_cfg = RcaConfig::new(scheme, 0.0).with_gamma(10f64.powf(rng.random_range(-1.0..2.0)));
        if rng.random_bool(0.25) {
            rca_cfg = rca_cfg.with_central_value(rng.random_range(0.0..1.0));
        }
        let attn = apply_rca(&stack, &rca_cfg).map_err(|e| format!("stack {k}: {e}"))?;
        for row in attn.weights().rows() {
            worst = worst.max((row.sum() - 1.0).abs());
            ensure(row.iter().all(|&w| w >= 0.0), || format!("stack {k}: negative weight"))?;
        }
    }
    ensure(worst <= 1e-9, || format!("worst row-sum error {worst:e}"))?;
    Ok(format!("1000 stacks, worst |row sum - 1| = {worst:.2e}"))
}

/// Multiples of 2^-20 in `[lo, hi]`, so sums and differences stay exact.
fn dyadic(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let scale = (1u64 << 20) as f64;
    f64::from(rng.random_range((lo * scale) as u32..=(hi * scale) as u32)) / scale
}

fn peak_and_symmetry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100_000 {
        let scheme = if case % 2 == 0 {
            Scheme::Gaussian
        } else {
            Scheme::InverseDistance
        };
        let m = dyadic(&mut rng, 0.0, 1.0);
        let gamma = dyadic(&mut rng, 1.0 / 64.0, 128.0);
        let alpha = dyadic(&mut rng, 0.0, 1.0);
        let peak = reweight(m, m, gamma, scheme);
        ensure(peak == 1.0, || format!("case {case}: weight at m is {peak}"))?;
        let w = reweight(alpha, m, gamma, scheme);
        ensure(alpha == m || w < 1.0, || {
            format!("case {case}: alpha={alpha} m={m} gamma={gamma} gives {w} >= 1")
        })?;
        // farther from m never weighs more
        let beta = dyadic(&mut rng, 0.0, 1.0);
        let wb = reweight(beta, m, gamma, scheme);
        if (beta - m).abs() >= (alpha - m).abs() {
            ensure(wb <= w, || format!("case {case}: not monotone in distance"))?;
        }
        if scheme == Scheme::Gaussian {
            let delta = dyadic(&mut rng, 0.0, 1.0);
            let (up, down) = (reweight(m + delta, m, gamma, scheme), reweight(m - delta, m, gamma, scheme));
            ensure(up == down, || format!("case {case}: asymmetric {up} vs {down}"))?;
        }
    }
    Ok("100000 scalar cases exact".into())
}

fn sharpness_sweep_sign() -> Check {
    let spec = SweepSpec::full_scale(0);
    let start = Instant::now();
    let result = sharpness_sweep(&spec).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(spec.tau_grid.len() == 20 && spec.seeds_per_tau == 50, || "grid is not 20 x 50".into())?;
    let trend = result.trend.ok_or("spearman undefined")?;
    ensure(trend.r < 0.0 && trend.p < 0.01, || {
        format!("spearman r = {:.4}, p = {:.3e}", trend.r, trend.p)
    })?;
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "spearman r = {:.4}, p = {:.2e}, {} instances, {elapsed:.2?}",
        trend.r,
        trend.p,
        result.points.len()
    ))
}

fn pearson_p_value() -> Check {
    let p = correlation_p_value(-0.09, 2064);
    ensure((2e-5..=6e-5).contains(&p), || format!("p = {p:e}"))?;
    Ok(format!("p = {p:.3e}"))
}

fn giraffe_fitap() -> Check {
    let aps = [0.78, 0.74, 0.73, 0.69, 0.64, 0.57, 0.48, 0.37, 0.22, 0.07];
    let f = mean_ap(&aps);
    ensure((f - 0.529).abs() <= 1e-3, || format!("FitAP = {f}"))?;
    Ok(format!("FitAP = {f:.4}"))
}

/// Formats `change` with as many decimals as `printed` shows.
fn at_printed_precision(change: f64, printed: &str) -> String {
    let decimals = printed.split_once('.').map_or(0, |(_, frac)| frac.len());
    format!("{change:+.decimals$}")
}

fn percent_changes() -> Check {
    let rows = [
        (37.0005, 46.8535, "+26.6"),
        (3.38530, 3.99586, "+18.0"),
        (47.0039, 47.0819, "+0.17"),
    ];
    let mut got = Vec::new();
    for (pre, post, printed) in rows {
        let change = percent_change(pre, post).map_err(|e| e.to_string())?;
        let shown = at_printed_precision(change, printed);
        ensure(shown == printed, || format!("({pre}, {post}) -> {shown}, expected {printed}"))?;
        got.push(shown);
    }
    Ok(got.join(", "))
}

struct MicroDataset {
    dets: Vec<Detection>,
    gts: Vec<GroundTruthBox>,
}

fn random_box(rng: &mut ChaCha8Rng) -> NormalizedBox {
    loop {
        // coarse grid so exact ties and boundary IoUs show up
        let mut c = [0.0; 4];
        for v in &mut c {
            *v = f64::from(rng.random_range(0..=20u32)) / 20.0;
        }
        if let Some(b) = NormalizedBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3])) {
            return b;
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, b: &NormalizedBox) -> NormalizedBox {
    let mut d = || f64::from(rng.random_range(-2i32..=2)) / 40.0;
    let c = b.coords();
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    NormalizedBox::new(clamp(c[0] + d()), clamp(c[1] + d()), clamp(c[2] + d()), clamp(c[3] + d()))
        .unwrap_or(*b)
}

fn micro_dataset(rng: &mut ChaCha8Rng) -> MicroDataset {
    let cats = ["cat", "dog"];
    let images = rng.random_range(1..=2u64);
    let gts: Vec<GroundTruthBox> = (0..rng.random_range(1..=4))
        .map(|_| GroundTruthBox {
            image_id: rng.random_range(1..=images),
            category: cats[rng.random_range(0..2)].to_owned(),
            bbox: random_box(rng),
        })
        .collect();
    let dets = (0..rng.random_range(0..=8))
        .map(|_| {
            let (image_id, category, bbox) = if rng.random_bool(0.6) {
                let g = &gts[rng.random_range(0..gts.len())];
                (g.image_id, g.category.clone(), jitter(rng, &g.bbox))
            } else {
                (
                    rng.random_range(1..=images),
                    cats[rng.random_range(0..2)].to_owned(),
                    random_box(rng),
                )
            };
            Detection::scored(image_id, &category, bbox, &gts)
        })
        .collect();
    MicroDataset { dets, gts }
}

fn micro_datasets() -> Vec<MicroDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..100).map(|_| micro_dataset(&mut rng)).collect()
}

fn oracle_equivalence() -> Check {
    let ladder = ThresholdLadder::default();
    let mut nontrivial = 0;
    for (k, data) in micro_datasets().iter().enumerate() {
        let report = fitap(&data.dets, &data.gts, &ladder).map_err(|e| format!("dataset {k}: {e}"))?;
        let expected = naive::fitap(&data.dets, &data.gts, ladder.thresholds());
        ensure(report.fitap == expected, || {
            format!("dataset {k}: pipeline {} vs oracle {expected}", report.fitap)
        })?;
        nontrivial += usize::from(report.fitap > 0.0 && report.fitap < 1.0);
    }
    Ok(format!("100 datasets equal bit for bit ({nontrivial} strictly between 0 and 1)"))
}

fn monotone_thresholds() -> Check {
    let ladder = ThresholdLadder::default();
    for (k, data) in micro_datasets().iter().enumerate() {
        let report = fitap(&data.dets, &data.gts, &ladder).map_err(|e| e.to_string())?;
        let mut series: Vec<(String, Vec<f64>)> = report
            .per_category
            .iter()
            .map(|(c, r)| (c.clone(), r.aps.clone()))
            .collect();
        series.push(("all".into(), report.per_threshold.iter().map(|t| t.ap).collect()));
        for (name, aps) in series {
            ensure(aps.windows(2).all(|w| w[0] >= w[1]), || {
                format!("dataset {k} / {name}: {aps:?}")
            })?;
        }
    }
    Ok("100 datasets, per-category and pooled AP non-increasing in threshold".into())
}

fn parser_corpus() -> Check {
    let third = 1.0 / 3.0;
    let corpus: Vec<(&str, f64, f64, Vec<[f64; 4]>)> = vec![
        ("[0.1, 0.2, 0.3, 0.4]", 100.0, 100.0, vec![[0.1, 0.2, 0.3, 0.4]]),
        ("[120, 50, 400, 300]", 800.0, 600.0, vec![[0.15, 0.08333, 0.5, 0.5]]),
        (
            "Boxes: [0.1,0.1,0.5,0.5] and [0.6,0.6,0.9,0.9]",
            640.0,
            480.0,
            vec![[0.1, 0.1, 0.5, 0.5], [0.6, 0.6, 0.9, 0.9]],
        ),
        ("No objects found.", 640.0, 480.0, vec![]),
        ("", 640.0, 480.0, vec![]),
        ("[0.1, 0.2, 0.3]", 640.0, 480.0, vec![]),
        ("[0.5, 0.5, 0.2, 0.2]", 640.0, 480.0, vec![]),
        ("[0.3, 0.3, 0.3, 0.6]", 640.0, 480.0, vec![]),
        ("[-0.1, 0.2, 0.5, 1.2]", 640.0, 480.0, vec![[0.0, 0.2, 0.5, 1.0]]),
        ("[0, 0, 1000, 500]", 500.0, 500.0, vec![[0.0, 0.0, 1.0, 1.0]]),
        ("[1.4, 0.2, 1.5, 0.6]", 640.0, 480.0, vec![]),
        ("[10, 20, 30, 40]", 100.0, 200.0, vec![[0.1, 0.1, 0.3, 0.2]]),
        ("```json\n[[0.1, 0.1, 0.2, 0.2]]\n```", 640.0, 480.0, vec![[0.1, 0.1, 0.2, 0.2]]),
        ("[ 0.25 ,0.25, 0.75 , 0.75 ]", 640.0, 480.0, vec![[0.25, 0.25, 0.75, 0.75]]),
        ("[.5, .5, .75, .75]", 640.0, 480.0, vec![[0.5, 0.5, 0.75, 0.75]]),
        ("[1e-1, 2e-1, 5e-1, 6e-1]", 640.0, 480.0, vec![[0.1, 0.2, 0.5, 0.6]]),
        ("[a, b, c, d]", 640.0, 480.0, vec![]),
        ("(0.1, 0.2, 0.3, 0.4)", 640.0, 480.0, vec![]),
        ("[0.1, 0.2, 0.3, 0.4, 0.5]", 640.0, 480.0, vec![]),
        (
            "giraffe [100, 100, 300, 400] zebra [0.5, 0.5, 0.9, 0.9]",
            400.0,
            400.0,
            vec![[0.25, 0.25, 0.75, 1.0], [0.5, 0.5, 0.9, 0.9]],
        ),
        ("[+0.1, 0.1, 0.4, 0.4]", 640.0, 480.0, vec![[0.1, 0.1, 0.4, 0.4]]),
        (
            "[0.2, 0.2, 0.6, 0.6] [0.2, 0.2, 0.6, 0.6]",
            640.0,
            480.0,
            vec![[0.2, 0.2, 0.6, 0.6], [0.2, 0.2, 0.6, 0.6]],
        ),
        ("[0, 0, 100, 100] in a 300 x 300 image", 300.0, 300.0, vec![[0.0, 0.0, third, third]]),
        ("Here:\n[0.05,\n0.1,\n0.95,\n0.9]", 640.0, 480.0, vec![[0.05, 0.1, 0.95, 0.9]]),
    ];
    for (k, (text, width, height, expected)) in corpus.iter().enumerate() {
        let resp = RawResponse {
            image_id: k as u64,
            category: "obj".into(),
            width: *width,
            height: *height,
            response_text: (*text).to_owned(),
        };
        let got: Vec<[f64; 4]> = parse_response(&resp).iter().map(NormalizedBox::coords).collect();
        let close = got.len() == expected.len()
            && got
                .iter()
                .zip(expected)
                .all(|(g, e)| g.iter().zip(e).all(|(a, b)| (a - b).abs() <= 5e-6));
        ensure(close, || format!("{text:?}: got {got:?}, expected {expected:?}"))?;
    }
    Ok(format!("{} strings parsed as expected", corpus.len()))
}

fn random_dump(rng: &mut ChaCha8Rng, k: u64) -> Result<AttentionDump, String> {
    let cfg = SyntheticFamilyConfig {
        tokens: rng.random_range(1..=128),
        heads: rng.random_range(1..=16),
        dims: rng.random_range(1..=512),
        tau: 10f64.powf(rng.random_range(-1.5..0.5)),
        seed: 1234,
        stream: k,
    };
    let (stack, values) = gen_synthetic_attention(&cfg).map_err(|e| e.to_string())?;
    let with_values = rng.random_bool(0.7);
    let hidden = if rng.random_bool(0.5) {
        let rca_cfg = RcaConfig::new(Scheme::Gaussian, -1.0);
        let attn = apply_rca(&stack, &rca_cfg).map_err(|e| e.to_string())?;
        Some(rca_core::attn::aggregate(&attn, &values).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let mut dump = AttentionDump::from_arrays(
        rng.random(),
        format!("category-{k}"),
        &stack,
        with_values.then_some(&values),
        hidden.as_ref(),
    );
    if rng.random_bool(0.5) {
        dump = dump.with_theta_hint(rng.random_range(-3.0..0.0));
    }
    if rng.random_bool(0.5) {
        dump = dump.with_metadata("model", "synthetic").with_metadata("note", "ünïcödé");
    }
    Ok(dump)
}

fn rcad_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for k in 0..60 {
        let dump = random_dump(&mut rng, k)?;
        let path = tmp.path().join(format!("{k}.rcad"));
        rca_core::write_dump(&dump, &path).map_err(|e| e.to_string())?;
        let back = rca_core::read_dump(&path).map_err(|e| format!("dump {k}: {e}"))?;
        ensure(back == dump, || format!("dump {k} changed on round trip"))?;
    }

    let bytes = random_dump(&mut rng, 1000)?.to_bytes().map_err(|e| e.to_string())?;
    let reject = |name: &str, data: &[u8], ok: fn(&DumpError) -> bool| -> Result<(), String> {
        match AttentionDump::from_bytes(data) {
            Err(e) if ok(&e) => Ok(()),
            Err(e) => Err(format!("{name}: wrong error {e}")),
            Ok(_) => Err(format!("{name}: accepted")),
        }
    };
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"RCAX");
    reject("bad magic", &bad, |e| matches!(e, DumpError::BadMagic(_)))?;
    for cut in [0, 3, 10, 24, bytes.len() / 2, bytes.len() - 1] {
        reject("truncation", &bytes[..cut], |e| matches!(e, DumpError::LengthMismatch { .. }))?;
    }
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 4]);
    reject("trailing bytes", &long, |e| matches!(e, DumpError::LengthMismatch { .. }))?;
    let mut bad = bytes.clone();
    bad[12] = bad[12].wrapping_add(1);
    reject("header length", &bad, |e| matches!(e, DumpError::LengthMismatch { .. }))?;
    let mut bad = bytes.clone();
    bad[4] = 2;
    reject("version", &bad, |e| matches!(e, DumpError::UnsupportedVersion(2)))?;
    let mut bad = bytes.clone();
    let last = bad.len() - 2;
    bad[last] ^= 0x01;
    reject("payload flip", &bad, |e| matches!(e, DumpError::ChecksumMismatch { .. }))?;
    match rca_core::read_dump(tmp.path().join("missing.rcad")) {
        Err(DumpError::NotFound(_)) => {}
        other => return Err(format!("missing file: {other:?}")),
    }
    Ok("60 random dumps round-trip; magic, truncation, length, version, checksum rejected".into())
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<_, String> {
        let base = tmp.path().join(tag);
        let sweep = base.join("sweep");
        let invocations: Vec<Vec<String>> = vec![
            vec![
                "analyze", "sweep", "--out", path_str(&sweep), "--tokens", "24", "--dims", "48", "--tau-points",
                "5", "--seeds", "4", "--seed", "3", "--emit-dumps",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            ["analyze", "audit", "--instances", "300", "--seed", "9", "--out", path_str(&base.join("audit"))]
                .map(String::from)
                .to_vec(),
            [
                "evaluate", "--gt", path_str(&fixture("gt.json")), "--responses",
                path_str(&fixture("responses_mixed.jsonl")), "--out", path_str(&base.join("eval")),
            ]
            .map(String::from)
            .to_vec(),
            [
                "transform", "--dump", path_str(&sweep.join("dumps/000003.rcad")), "--scheme", "gaussian",
                "--gamma", "50", "--out", path_str(&base.join("transform")),
            ]
            .map(String::from)
            .to_vec(),
            [
                "analyze", "correlate", "--manifest", path_str(&sweep.join("dumps/manifest.json")), "--out",
                path_str(&base.join("correlate")),
            ]
            .map(String::from)
            .to_vec(),
        ];
        for args in &invocations {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = rca(&args);
            ensure(out.status.success(), || {
                format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
            })?;
        }
        Ok(snapshot(&base))
    };
    let (a, b) = (run("a")?, run("b")?);
    ensure(a == b, || {
        let differing: Vec<_> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        format!("outputs differ: {differing:?}")
    })?;
    let text_files = a
        .keys()
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")))
        .count();
    let _ = fs::remove_dir_all(tmp.path());
    Ok(format!("{} files identical across runs ({text_files} CSV/JSON)", a.len()))
}

fn main() {
    let checks: [Criterion; 12] = [
        ("flooring-bound audit", flooring_audit),
        ("row-stochasticity", row_stochasticity),
        ("peak-at-m and gaussian symmetry", peak_and_symmetry),
        ("sharpness sweep sign", sharpness_sweep_sign),
        ("pearson p-value", pearson_p_value),
        ("giraffe FitAP averaging", giraffe_fitap),
        ("percent-change rows", percent_changes),
        ("end-to-end oracle equivalence", oracle_equivalence),
        ("monotone thresholds", monotone_thresholds),
        ("parser fixture corpus", parser_corpus),
        ("RCAD round-trip and corruption", rcad_round_trip),
        ("CLI determinism", cli_determinism),
    ];
    let mut failures = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail}", k + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL [{:>2}] {name}: {why}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", checks.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
