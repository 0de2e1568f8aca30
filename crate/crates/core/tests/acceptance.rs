//! Prints one PASS/FAIL line per acceptance criterion. Exits nonzero when the
//! set of failing criteria differs from `KNOWN_FAILURES`.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use edanet_core::analyzer::{count_multiply_adds, count_params, effective_kernel, receptive_field, trace_shapes};
use edanet_core::imageio::{read_ppm, write_pgm, write_ppm, RgbImage};
use edanet_core::netdef::{build_variant, ConvLayer, Variant};
use edanet_core::ops::ConvGeometry;
use edanet_core::runtime::{infer_image, init_weights, load_weights, save_weights, SplitMix64};
use edanet_core::schedmetrics::{class_weights, mean_iou, poly_lr, BASE_LEARNING_RATE, CLASS_WEIGHT_K, POLY_POWER};
use edanet_core::selftest::{
    dilation_trial, fold_trial, separability_trial, FOLD_TOLERANCE, REFERENCE_MACS,
    REFERENCE_PARAMS, SEPARABILITY_TOLERANCE,
};
use edanet_core::tensor::LabelMap;
use edanet_core::{parse_netspec, serialize_netspec, LayerKind, LayerSpec, NetworkSpec, Result, Shape, Tensor};

const KNOWN_FAILURES: [u32; 1] = [6];
const SEED: u64 = 7;
const ERFDEC_PARAMS: u64 = 906_628;
const ASPP_MACS: u64 = 30_511_630_758;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn within(value: f64, reference: f64, tol: f64) -> bool {
    (value - reference).abs() <= tol * reference.abs()
}

fn input() -> Shape {
    Shape::chw(3, 512, 1024)
}

fn param_counts() -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (v, millions, tol) in REFERENCE_PARAMS {
        let m = count_params(&build_variant(v, 19)?)?.total as f64 / 1e6;
        ok &= within(m, millions, tol);
        parts.push(format!("{v} {m:.3}M/{millions}M"));
    }
    let erf = count_params(&build_variant(Variant::Erfdec, 19)?)?.total;
    ok &= erf == ERFDEC_PARAMS;
    parts.push(format!("erfdec {erf} pinned"));
    Ok(outcome(ok, parts.join(", ")))
}

fn multiply_adds() -> Result<Outcome> {
    let macs = |v| -> Result<u64> { Ok(count_multiply_adds(&build_variant(v, 19)?, input())?.total) };
    let mut ok = true;
    let mut parts = Vec::new();
    for (v, billions, tol) in REFERENCE_MACS {
        let b = macs(v)? as f64 / 1e9;
        ok &= within(b, billions, tol);
        parts.push(format!("{v} {b:.2}B/{billions}B"));
    }
    let ratio = macs(Variant::NonAsym)? as f64 / macs(Variant::Edanet)? as f64;
    ok &= (1.22..=1.30).contains(&ratio);
    parts.push(format!("non_asym/edanet {ratio:.4}"));
    let aspp = macs(Variant::Aspp)?;
    ok &= aspp == ASPP_MACS;
    parts.push(format!("aspp {aspp} pinned"));
    Ok(outcome(ok, parts.join(", ")))
}

type Row = (String, usize, (usize, usize));
type Check = fn() -> Result<Outcome>;

fn golden_rows(v: Variant) -> Vec<Row> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("tests/golden/{v}.txt"));
    fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let (h, w) = f[2].split_once('x').unwrap();
            (f[0].to_string(), f[1].parse().unwrap(), (h.parse().unwrap(), w.parse().unwrap()))
        })
        .collect()
}

fn generated_rows(v: Variant) -> Result<Vec<Row>> {
    let net = build_variant(v, 19)?;
    let shapes = trace_shapes(&net, input())?;
    let mut rows: Vec<Row> = net
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, s)| (l.name.clone(), s.c, (s.h, s.w)))
        .collect();
    let last = shapes[shapes.len() - 1];
    let u = net.inference_upscale;
    rows.push(("inference".into(), last.c, (last.h * u, last.w * u)));
    Ok(rows)
}

fn golden_shapes() -> Result<Outcome> {
    let mut rows = 0;
    let mut mismatched = Vec::new();
    for v in Variant::ALL {
        let expected = golden_rows(v);
        rows += expected.len();
        if generated_rows(v)? != expected {
            mismatched.push(v.to_string());
        }
    }
    Ok(if mismatched.is_empty() {
        outcome(true, format!("{rows} rows across 7 variants match"))
    } else {
        outcome(false, format!("mismatch in {}", mismatched.join(", ")))
    })
}

fn separability() -> Result<Outcome> {
    let mut rng = SplitMix64::new(SEED);
    let mut worst = 0.0f32;
    for t in 0..100 {
        worst = worst.max(separability_trial(&mut rng, if t % 2 == 0 { 3 } else { 5 })?);
    }
    Ok(outcome(
        worst <= SEPARABILITY_TOLERANCE,
        format!("100 kernels, worst relative error {worst:.2e} (tol {SEPARABILITY_TOLERANCE:.0e})"),
    ))
}

fn dilation() -> Result<Outcome> {
    let mut rng = SplitMix64::new(SEED);
    let mut ok = true;
    let mut parts = Vec::new();
    for r in [2, 4, 8, 16] {
        let same = dilation_trial(&mut rng, 3, r)?;
        ok &= same;
        parts.push(format!("r={r} k={} {}", effective_kernel(3, r), if same { "exact" } else { "differs" }));
    }
    Ok(outcome(ok, parts.join(", ")))
}

fn fold() -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let o = fold_trial(v, SEED, Shape::chw(3, 64, 128))?;
        let pass = o.max_abs_diff <= FOLD_TOLERANCE && o.labels_equal;
        ok &= pass;
        let mut part = format!("{v} {:.1e}", o.max_abs_diff);
        if !pass {
            part += &format!(
                " [over; |logit| up to {:.0}, relative {:.1e}, labels {}]",
                o.max_abs_logit,
                o.max_abs_diff / o.max_abs_logit,
                if o.labels_equal { "identical" } else { "differ" }
            );
        }
        parts.push(part);
    }
    Ok(outcome(ok, format!("tol {FOLD_TOLERANCE:.0e}: {}", parts.join(", "))))
}

fn conv_layer(name: &str, cin: usize, cout: usize, kh: usize, kw: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv(ConvLayer {
            in_channels: cin,
            out_channels: cout,
            kh,
            kw,
            geom: ConvGeometry::new(1, 1, kh / 2, kw / 2),
            bias: false,
            batch_norm: false,
            relu: false,
        }),
    )
}

fn net_of(layers: Vec<LayerSpec>, classes: usize) -> NetworkSpec {
    NetworkSpec { name: "probe".into(), classes, layers, train_size: (32, 32), inference_upscale: 1 }
}

fn receptive_fields() -> Result<Outcome> {
    let stack = net_of((0..3).map(|i| conv_layer(&format!("c{i}"), 4, 4, 3, 3)).collect(), 4);
    let two = receptive_field(&stack, 1)?;
    let three = receptive_field(&stack, 2)?;
    let (k2, k16) = (effective_kernel(3, 2), effective_kernel(3, 16));
    let ok = (two.h, two.w, three.h, three.w, k2, k16) == (5, 5, 7, 7, 5, 33);
    Ok(outcome(
        ok,
        format!(
            "two 3x3 -> {}x{}, three 3x3 -> {}x{}, effective_kernel(3,2)={k2}, effective_kernel(3,16)={k16}",
            two.h, two.w, three.h, three.w
        ),
    ))
}

fn asymmetric_saving() -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in [40, 130, 450] {
        let pair = count_params(&net_of(vec![conv_layer("v", c, c, 3, 1), conv_layer("h", c, c, 1, 3)], c))?.total;
        let full = count_params(&net_of(vec![conv_layer("f", c, c, 3, 3)], c))?.total;
        ok &= 3 * pair == 2 * full;
        parts.push(format!("c={c}: {pair}/{full}"));
    }
    Ok(outcome(ok, format!("pair/3x3 = 2/3 exactly ({})", parts.join(", "))))
}

fn determinism() -> Result<Outcome> {
    let net = build_variant(Variant::Edanet, 19)?;
    let weights = init_weights(&net, SEED)?;
    let mut rng = SplitMix64::new(SEED);
    let shape = Shape::chw(3, 64, 128);
    let image = Tensor::new(shape, (0..shape.numel()).map(|_| rng.next_unit() as f32).collect())?;
    let run = || -> Result<Vec<u8>> { write_pgm(&infer_image(&net, &weights, &image, false)?) };
    let first = run()?;
    let mut ok = true;
    for _ in 0..2 {
        ok &= run()? == first;
    }
    for threads in [1, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        ok &= pool.install(run)? == first;
    }
    Ok(outcome(ok, format!("{} label bytes identical over 3 runs and 1/4 threads", first.len())))
}

fn relative_gap(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        value.abs()
    } else {
        (value - reference).abs() / reference.abs()
    }
}

fn formulas() -> Result<Outcome> {
    let w0 = class_weights(&[0.0], CLASS_WEIGHT_K)?[0];
    let lr0 = poly_lr(BASE_LEARNING_RATE, 0, 1000, POLY_POWER)?;
    let lr_end = poly_lr(BASE_LEARNING_RATE, 1000, 1000, POLY_POWER)?;
    let pred = LabelMap::new(2, 2, vec![0, 0, 1, 1])?;
    let gt = LabelMap::new(2, 2, vec![0, 1, 1, 1])?;
    let miou = mean_iou(&pred, &gt, 2, None)?.mean.unwrap_or(f64::NAN);
    let gaps = [
        relative_gap(w0, 1.0 / 1.12f64.ln()),
        relative_gap(lr0, 5e-4),
        relative_gap(lr_end, 0.0),
        relative_gap(miou, 7.0 / 12.0),
    ];
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    Ok(outcome(
        worst <= 1e-9,
        format!("class_weights(0)={w0:.10}, poly_lr {lr0:e}..{lr_end:e}, mIoU={miou:.10}, worst gap {worst:.1e}"),
    ))
}

fn round_trips() -> Result<Outcome> {
    let mut ok = true;
    for v in Variant::ALL {
        let net = build_variant(v, 19)?;
        let text = serialize_netspec(&net);
        let parsed = parse_netspec(&text)?;
        ok &= parsed == net && serialize_netspec(&parsed) == text;
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("w.edaw");
    let net = build_variant(Variant::Edanet, 19)?;
    save_weights(&init_weights(&net, SEED)?, &path)?;
    let bytes = fs::read(&path)?;
    save_weights(&load_weights(&path)?, &path)?;
    ok &= fs::read(&path)? == bytes;

    let mut rng = SplitMix64::new(SEED);
    let (h, w) = (17, 23);
    let pixels = (0..h * w * 3).map(|_| (rng.next_u64() >> 56) as u8).collect();
    let ppm = RgbImage { height: h, width: w, pixels }.to_ppm();
    ok &= write_ppm(&read_ppm(&ppm)?)? == ppm;

    Ok(outcome(ok, format!("7 netspecs, {} weight bytes, {h}x{w} P6", bytes.len())))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Check); 11] = [
        (1, "parameter counts", param_counts),
        (2, "multiply-adds", multiply_adds),
        (3, "layer shapes", golden_shapes),
        (4, "separability", separability),
        (5, "dilation", dilation),
        (6, "normalization folding", fold),
        (7, "receptive field", receptive_fields),
        (8, "asymmetric saving", asymmetric_saving),
        (9, "determinism", determinism),
        (10, "formulas", formulas),
        (11, "round-trips", round_trips),
    ];
    let mut failed = BTreeSet::new();
    for (id, name, check) in criteria {
        let result = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        if !result.passed {
            failed.insert(id);
        }
        println!(
            "{} {id:>2} {name}: {}",
            if result.passed { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    let known: BTreeSet<u32> = KNOWN_FAILURES.into_iter().collect();
    for id in failed.difference(&known) {
        println!("unexpected failure: criterion {id}");
    }
    for id in known.difference(&failed) {
        println!("known failure now passes: criterion {id}; update KNOWN_FAILURES");
    }
    if failed == known {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
