//! Acceptance suite. Each test covers one release criterion and prints a
//! single PASS line with the measured evidence; run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coips::manifest::load_manifest;
use coips::metrics;
use coips::qa::{self, QaTrainConfig};
use coips::report::faz_area;
use coips::seg::{self, FazMask, SegTrainConfig};
use coips::split::{apportion, kfold, HOLDOUT_PROPORTIONS};
use coips::synthgen::{self, SynthSpec};
use coips::tensor::net::UNetConfig;
use coips::tensor::tape::{Tape, Var};
use coips::tensor::{checkpoint, Tensor};

// ---------------------------------------------------------------------------
// Gradient suite: every differentiable op and both losses pass central
// finite-difference checks at relative error < 1e-4 on >= 20 random shapes
// each, in under 60 seconds.
// ---------------------------------------------------------------------------

const FD_H: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const SHAPES_PER_OP: usize = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Checks reverse-mode gradients of a scalar-valued graph against central
/// finite differences over every element of every leaf.
fn check_gradient<B>(leaves: &[Tensor<f64>], build: B, label: &str)
where
    B: Fn(&mut Tape<f64>, &[Var]) -> coips::Result<Var>,
{
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.data.len()])
        })
        .collect();

    for (li, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.data.len() {
            let eval = |delta: f64| -> f64 {
                let mut shifted = leaves.to_vec();
                shifted[li].data[j] += delta;
                let mut tape: Tape<f64> = Tape::new();
                let vars: Vec<Var> = shifted
                    .iter()
                    .map(|t| tape.leaf(t.clone(), false).unwrap())
                    .collect();
                let loss = build(&mut tape, &vars).unwrap();
                tape.data(loss)[0]
            };
            let fd = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
            let g = grads[li][j];
            let denom = g.abs().max(fd.abs()).max(1e-3);
            assert!(
                (g - fd).abs() / denom < FD_REL_TOL,
                "{label}: leaf {li} element {j}: analytic {g} vs finite-difference {fd}"
            );
        }
    }
}

/// Projects a non-scalar op output to a scalar with a fixed random tensor so
/// every output element contributes to the checked gradient.
fn project_sum(tape: &mut Tape<f64>, out: Var, proj: &Tensor<f64>) -> coips::Result<Var> {
    let p = tape.leaf(proj.clone(), false)?;
    let prod = tape.mul(out, p)?;
    tape.sum(prod)
}

#[test]
fn gradient_suite_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240811);

    // conv2d with bias over random channel counts, strides and paddings
    for i in 0..SHAPES_PER_OP {
        let (ci, co) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
        let k = [1, 3][i % 2];
        let stride = rng.gen_range(1..3usize);
        // derive the raster from the output size so the geometry is integral
        let (oh, ow) = (rng.gen_range(2..4usize), rng.gen_range(2..4usize));
        let padding = if (oh - 1) * stride + k > 2 && (ow - 1) * stride + k > 2 {
            rng.gen_range(0..2usize)
        } else {
            0
        };
        let h = (oh - 1) * stride + k - 2 * padding;
        let w = (ow - 1) * stride + k - 2 * padding;
        let x = rand_tensor(&mut rng, vec![ci, h, w]);
        let wt = rand_tensor(&mut rng, vec![co, ci, k, k]);
        let b = rand_tensor(&mut rng, vec![co]);
        let proj = rand_tensor(&mut rng, vec![co, oh, ow]);
        let with_bias = i % 3 != 0;
        check_gradient(
            &[x, wt, b],
            |t, v| {
                let bias = if with_bias { Some(v[2]) } else { None };
                let y = t.conv2d(v[0], v[1], bias, stride, padding)?;
                project_sum(t, y, &proj)
            },
            "conv2d",
        );
    }

    // maxpool2d (small rasters keep finite differences away from tie kinks)
    for _ in 0..SHAPES_PER_OP {
        let c = rng.gen_range(1..3usize);
        let h = rng.gen_range(3..7usize) * 2;
        let w = rng.gen_range(3..7usize) * 2;
        let x = rand_tensor(&mut rng, vec![c, h, w]);
        let proj = rand_tensor(&mut rng, vec![c, h / 2, w / 2]);
        check_gradient(
            &[x],
            |t, v| {
                let y = t.maxpool2d(v[0], 2, 2)?;
                project_sum(t, y, &proj)
            },
            "maxpool2d",
        );
    }

    // upsample2x
    for _ in 0..SHAPES_PER_OP {
        let c = rng.gen_range(1..4usize);
        let h = rng.gen_range(2..6usize);
        let w = rng.gen_range(2..6usize);
        let x = rand_tensor(&mut rng, vec![c, h, w]);
        let proj = rand_tensor(&mut rng, vec![c, 2 * h, 2 * w]);
        check_gradient(
            &[x],
            |t, v| {
                let y = t.upsample2x(v[0])?;
                project_sum(t, y, &proj)
            },
            "upsample2x",
        );
    }

    // relu and leaky_relu
    for i in 0..SHAPES_PER_OP {
        let n = rng.gen_range(4..40usize);
        let x = rand_tensor(&mut rng, vec![n]);
        let proj = rand_tensor(&mut rng, vec![n]);
        let slope = 0.01 + (i as f64) * 0.005;
        check_gradient(
            &[x.clone()],
            |t, v| {
                let y = t.relu(v[0])?;
                project_sum(t, y, &proj)
            },
            "relu",
        );
        check_gradient(
            &[x],
            |t, v| {
                let y = t.leaky_relu(v[0], slope)?;
                project_sum(t, y, &proj)
            },
            "leaky_relu",
        );
    }

    // instance_norm
    for _ in 0..SHAPES_PER_OP {
        let c = rng.gen_range(1..3usize);
        let h = rng.gen_range(2..6usize);
        let w = rng.gen_range(2..6usize);
        let x = rand_tensor(&mut rng, vec![c, h, w]);
        let proj = rand_tensor(&mut rng, vec![c, h, w]);
        check_gradient(
            &[x],
            |t, v| {
                let y = t.instance_norm(v[0], 1e-5)?;
                project_sum(t, y, &proj)
            },
            "instance_norm",
        );
    }

    // linear
    for _ in 0..SHAPES_PER_OP {
        let (fan_in, fan_out) = (rng.gen_range(2..8usize), rng.gen_range(2..6usize));
        let x = rand_tensor(&mut rng, vec![fan_in]);
        let w = rand_tensor(&mut rng, vec![fan_out, fan_in]);
        let b = rand_tensor(&mut rng, vec![fan_out]);
        let proj = rand_tensor(&mut rng, vec![fan_out]);
        check_gradient(
            &[x, w, b],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project_sum(t, y, &proj)
            },
            "linear",
        );
    }

    // reshape
    for _ in 0..SHAPES_PER_OP {
        let (a, b) = (rng.gen_range(2..5usize), rng.gen_range(2..5usize));
        let x = rand_tensor(&mut rng, vec![a, b]);
        let proj = rand_tensor(&mut rng, vec![a * b]);
        check_gradient(
            &[x],
            |t, v| {
                let y = t.reshape(v[0], vec![a * b])?;
                project_sum(t, y, &proj)
            },
            "reshape",
        );
    }

    // concat_channels
    for _ in 0..SHAPES_PER_OP {
        let (ca, cb) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
        let h = rng.gen_range(2..5usize);
        let w = rng.gen_range(2..5usize);
        let a = rand_tensor(&mut rng, vec![ca, h, w]);
        let b = rand_tensor(&mut rng, vec![cb, h, w]);
        let proj = rand_tensor(&mut rng, vec![ca + cb, h, w]);
        check_gradient(
            &[a, b],
            |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                project_sum(t, y, &proj)
            },
            "concat_channels",
        );
    }

    // stack_rows
    for _ in 0..SHAPES_PER_OP {
        let rows = rng.gen_range(2..4usize);
        let k = rng.gen_range(2..6usize);
        let leaves: Vec<Tensor<f64>> =
            (0..rows).map(|_| rand_tensor(&mut rng, vec![k])).collect();
        let proj = rand_tensor(&mut rng, vec![rows, k]);
        check_gradient(
            &leaves,
            |t, v| {
                let y = t.stack_rows(v)?;
                project_sum(t, y, &proj)
            },
            "stack_rows",
        );
    }

    // softmax
    for _ in 0..SHAPES_PER_OP {
        let n = rng.gen_range(1..4usize);
        let k = rng.gen_range(2..6usize);
        let x = rand_tensor(&mut rng, vec![n, k]);
        let proj = rand_tensor(&mut rng, vec![n, k]);
        check_gradient(
            &[x],
            |t, v| {
                let y = t.softmax(v[0])?;
                project_sum(t, y, &proj)
            },
            "softmax",
        );
    }

    // add, mul, sum, mean_scalars
    for _ in 0..SHAPES_PER_OP {
        let n = rng.gen_range(2..20usize);
        let a = rand_tensor(&mut rng, vec![n]);
        let b = rand_tensor(&mut rng, vec![n]);
        let proj = rand_tensor(&mut rng, vec![n]);
        check_gradient(
            &[a.clone(), b.clone()],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                project_sum(t, y, &proj)
            },
            "add",
        );
        check_gradient(
            &[a.clone(), b],
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                project_sum(t, y, &proj)
            },
            "mul",
        );
        check_gradient(&[a], |t, v| t.sum(v[0]), "sum");
        let scalars: Vec<Tensor<f64>> = (0..rng.gen_range(2..5usize))
            .map(|_| rand_tensor(&mut rng, vec![1]))
            .collect();
        check_gradient(&scalars, |t, v| t.mean_scalars(v), "mean_scalars");
    }

    // weighted cross-entropy loss
    for _ in 0..SHAPES_PER_OP {
        let n = rng.gen_range(1..5usize);
        let k = rng.gen_range(2..5usize);
        let logits = rand_tensor(&mut rng, vec![n, k]);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
        let norm: f64 = weights.iter().sum();
        check_gradient(
            &[logits],
            |t, v| t.weighted_ce(v[0], &labels, &weights, norm),
            "weighted_ce",
        );
    }

    // combined segmentation loss
    for _ in 0..SHAPES_PER_OP {
        let h = rng.gen_range(2..6usize);
        let w = rng.gen_range(2..6usize);
        let logits = rand_tensor(&mut rng, vec![2, h, w]);
        let gt: Vec<f64> = (0..h * w)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let lambda = rng.gen_range(0.1..0.9);
        check_gradient(
            &[logits],
            |t, v| t.seg_combined_loss(v[0], &gt, lambda),
            "seg_combined_loss",
        );
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradient suite took {elapsed:?}, budget is 60 s"
    );
    println!(
        "PASS gradient suite: 13 ops + 2 losses x {SHAPES_PER_OP} random shapes, \
         rel err < {FD_REL_TOL}, in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Formula fixtures.
// ---------------------------------------------------------------------------

#[test]
fn formula_fixtures() {
    // class weights for counts (70, 20, 10), exact to 5 decimals
    let w = qa::class_weights(&[70, 20, 10]).unwrap();
    for (got, want) in w.weights.iter().zip([0.47619, 1.66667, 3.33333]) {
        assert!((got - want).abs() < 5e-6, "weight {got} vs {want}");
    }

    // smoothed Dice fixtures: perfect overlap, both empty, disjoint 3 vs 4
    assert_eq!(seg::dice_coefficient(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
    assert_eq!(seg::dice_coefficient(&[0, 0], &[0, 0]).unwrap(), 1.0);
    let sr = [1, 1, 1, 0, 0, 0, 0, 0];
    let gt = [0, 0, 0, 1, 1, 1, 1, 0];
    assert_eq!(seg::dice_coefficient(&sr, &gt).unwrap(), 0.125);

    // area fixtures: 9 mm^2, 0.09 mm^2, 0
    let full = FazMask::new(vec![1; 100], 10, 10, "a".into()).unwrap();
    assert_eq!(faz_area(&full, 3.0).unwrap(), 9.0);
    let mut one = vec![0u8; 100];
    one[0] = 1;
    let one = FazMask::new(one, 10, 10, "b".into()).unwrap();
    assert!((faz_area(&one, 3.0).unwrap() - 0.09).abs() < 1e-15);
    let empty = FazMask::new(vec![0; 100], 10, 10, "c".into()).unwrap();
    assert_eq!(faz_area(&empty, 3.0).unwrap(), 0.0);

    // weighted-CE fixture: batch of 2, weights (0.5, 2.0), p_true (0.8, 0.5)
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape
        .leaf(
            Tensor::new(
                vec![2, 2],
                vec![(0.8f64 / 0.2).ln(), 0.0, 0.0, 0.0],
            )
            .unwrap(),
            false,
        )
        .unwrap();
    let loss = tape
        .weighted_ce(logits, &[0, 0], &[0.5, 2.0], 2.5)
        .unwrap();
    let got = tape.data(loss)[0];
    assert!((got - 0.59915).abs() < 1e-5, "weighted CE {got}");

    println!("PASS formula fixtures: class weights, smoothed Dice, FAZ area, weighted CE");
}

// ---------------------------------------------------------------------------
// Metric oracle equivalence on 1,000 random instances each.
// ---------------------------------------------------------------------------

fn brute_force_auc(scores: &[f64], y_true: &[usize], class: usize) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if y_true[i] != class {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if y_true[j] == class {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn metric_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // rank-based AUC vs brute-force pairwise counting
    for case in 0..1000 {
        let n = rng.gen_range(2..=200usize);
        // quantized scores force ties through the midrank path
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0)
            .collect();
        let mut y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2usize)).collect();
        y[0] = 0;
        if n > 1 {
            y[1] = 1;
        }
        let rows: Vec<Vec<f64>> = scores.iter().map(|&s| vec![s]).collect();
        let fast = metrics::roc_auc(&rows, &y, 0).unwrap();
        let brute = brute_force_auc(&scores, &y, 0);
        assert!(
            (fast - brute).abs() < 1e-12,
            "case {case}: rank AUC {fast} vs pairwise {brute}"
        );
    }

    // classification_report vs brute-force counting
    for case in 0..1000 {
        let n = rng.gen_range(1..=200usize);
        let k = 3;
        let yt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let yp: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let cm = metrics::confusion_matrix(&yt, &yp, k).unwrap();
        let rep = metrics::classification_report(&cm).unwrap();
        let correct = yt.iter().zip(&yp).filter(|(t, p)| t == p).count();
        assert_eq!(rep.accuracy, correct as f64 / n as f64, "case {case}");
        for c in 0..k {
            let tp = yt
                .iter()
                .zip(&yp)
                .filter(|(&t, &p)| t == c && p == c)
                .count() as f64;
            let predicted = yp.iter().filter(|&&p| p == c).count() as f64;
            let actual = yt.iter().filter(|&&t| t == c).count() as f64;
            let precision = if predicted == 0.0 { 0.0 } else { tp / predicted };
            let recall = if actual == 0.0 { 0.0 } else { tp / actual };
            assert_eq!(rep.per_class[c].precision, precision, "case {case} class {c}");
            assert_eq!(rep.per_class[c].recall, recall, "case {case} class {c}");
            assert_eq!(rep.per_class[c].support, actual as u64);
        }
    }

    // Jaccard = Dice / (2 - Dice) on random mask pairs
    for case in 0..1000 {
        let n = rng.gen_range(1..=256usize);
        let sr: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let mut gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        if sr.iter().all(|&v| v == 0) && gt.iter().all(|&v| v == 0) {
            gt[0] = 1;
        }
        let d = metrics::dice_unsmoothed(&sr, &gt).unwrap();
        let j = metrics::jaccard(&sr, &gt).unwrap();
        assert!(
            (j - d / (2.0 - d)).abs() < 1e-12,
            "case {case}: J {j} vs D/(2-D) {}",
            d / (2.0 - d)
        );
    }

    println!("PASS metric oracles: AUC, classification report and J=D/(2-D) on 1000 instances each");
}

// ---------------------------------------------------------------------------
// Shared small fixture: a compact corpus with quickly trained checkpoints,
// built once for the pipeline, determinism and checkpoint tests.
// ---------------------------------------------------------------------------

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    classifier: PathBuf,
    segmenter: PathBuf,
    qa_log: String,
    small_seg: SegTrainConfig,
    small_qa: QaTrainConfig,
}

fn small_qa_config() -> QaTrainConfig {
    QaTrainConfig {
        max_epochs: 3,
        patience: 3,
        ..Default::default()
    }
}

fn small_seg_config() -> SegTrainConfig {
    SegTrainConfig {
        net: UNetConfig {
            patch_h: 32,
            patch_w: 32,
            poolings: 3,
            ..Default::default()
        },
        folds: 2,
        max_epochs: 1,
        ..Default::default()
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let spec = SynthSpec {
            count_ungradable: 30,
            count_gradable: 30,
            count_outstanding: 30,
            image_size: 32,
            ..Default::default()
        };
        synthgen::generate_corpus(&spec, &corpus).unwrap();
        let manifest = load_manifest(&corpus.join("manifest.csv")).unwrap();

        let qa_cfg = small_qa_config();
        let (classifier_net, qa_logs) = qa::train_classifier(&manifest, &qa_cfg).unwrap();
        let classifier = dir.path().join("qa.ckpt");
        checkpoint::save(&classifier_net, &classifier).unwrap();

        let seg_cfg = small_seg_config();
        let outcome = seg::train_segmenter(&manifest, &seg_cfg).unwrap();
        let segmenter = dir.path().join("seg.ckpt");
        checkpoint::save(&outcome.network, &segmenter).unwrap();

        Fixture {
            corpus,
            classifier,
            segmenter,
            qa_log: qa::qa_log_csv(&qa_logs),
            small_seg: seg_cfg,
            small_qa: qa_cfg,
            _dir: dir,
        }
    })
}

fn coips_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coips"))
}

fn run_pipeline_with_threads(fx: &Fixture, out_dir: &Path, threads: &str) {
    let status = coips_bin()
        .env("COIPS_THREADS", threads)
        .args([
            "pipeline",
            "--classifier",
            fx.classifier.to_str().unwrap(),
            "--segmenter",
            fx.segmenter.to_str().unwrap(),
            "--input-dir",
            fx.corpus.join("images").to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success(), "pipeline exited with {status:?}");
}

// ---------------------------------------------------------------------------
// Pipeline gate: no Ungradable image receives a mask, row count equals input
// count, and serial / parallel runs emit byte-identical reports.
// ---------------------------------------------------------------------------

#[test]
fn pipeline_gate_and_parallel_equivalence() {
    let fx = fixture();
    let out = tempfile::tempdir().unwrap();
    let serial = out.path().join("serial");
    let parallel = out.path().join("parallel");
    run_pipeline_with_threads(fx, &serial, "1");
    run_pipeline_with_threads(fx, &parallel, "4");

    let csv = std::fs::read_to_string(serial.join("report.csv")).unwrap();
    let records = coips::report::parse_report_csv(&csv).unwrap();
    let inputs = std::fs::read_dir(fx.corpus.join("images")).unwrap().count();
    assert_eq!(records.len(), inputs, "one report row per input image");

    let mut gated = 0usize;
    for r in &records {
        let mask_path = serial.join("masks").join(format!("{}.png", r.source_id));
        if r.category == coips::qa::QualityClass::Ungradable {
            gated += 1;
            assert!(!r.segmented);
            assert!(r.faz_area_mm2.is_none());
            assert!(!mask_path.exists(), "ungradable {} got a mask", r.source_id);
        } else {
            assert!(r.segmented);
            assert!(mask_path.exists(), "missing mask for {}", r.source_id);
        }
    }
    assert!(gated > 0, "batch should contain ungradable predictions");

    for file in ["report.csv", "report.json", "summary.json"] {
        let a = std::fs::read(serial.join(file)).unwrap();
        let b = std::fs::read(parallel.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between serial and parallel runs");
    }
    println!(
        "PASS pipeline gate: {inputs} rows for {inputs} inputs, {gated} gated without masks, \
         serial == parallel bytes"
    );
}

// ---------------------------------------------------------------------------
// Determinism: repeating training and pipeline runs with identical seeds
// reproduces logs and reports byte-identically.
// ---------------------------------------------------------------------------

#[test]
fn training_and_pipeline_determinism() {
    let fx = fixture();
    let manifest = load_manifest(&fx.corpus.join("manifest.csv")).unwrap();

    let (_, qa_logs) = qa::train_classifier(&manifest, &fx.small_qa).unwrap();
    assert_eq!(
        qa::qa_log_csv(&qa_logs),
        fx.qa_log,
        "retraining the classifier changed the log"
    );

    let a = seg::train_segmenter(&manifest, &fx.small_seg).unwrap();
    let b = seg::train_segmenter(&manifest, &fx.small_seg).unwrap();
    assert_eq!(seg::seg_log_csv(&a.logs), seg::seg_log_csv(&b.logs));
    assert_eq!(a.best_fold, b.best_fold);

    let out = tempfile::tempdir().unwrap();
    let first = out.path().join("first");
    let second = out.path().join("second");
    run_pipeline_with_threads(fx, &first, "2");
    run_pipeline_with_threads(fx, &second, "2");
    for file in ["report.csv", "report.json", "summary.json"] {
        let x = std::fs::read(first.join(file)).unwrap();
        let y = std::fs::read(second.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical reruns");
    }
    println!("PASS determinism: training logs and pipeline reports byte-identical across reruns");
}

// ---------------------------------------------------------------------------
// Checkpoint round-trip: save -> load -> re-evaluate reproduces the
// validation loss bit-exactly.
// ---------------------------------------------------------------------------

#[test]
fn checkpoint_round_trip_reproduces_validation_loss() {
    let fx = fixture();
    let manifest = load_manifest(&fx.corpus.join("manifest.csv")).unwrap();
    let net = checkpoint::load(&fx.classifier).unwrap();

    let mut counts = [0u64; qa::NUM_CLASSES];
    for r in manifest
        .iter()
        .filter(|r| r.split == coips::split::Split::Train)
    {
        counts[r.class.index()] += 1;
    }
    let weights = qa::class_weights(&counts).unwrap();
    let val: Vec<_> = manifest
        .iter()
        .filter(|r| r.split == coips::split::Split::Test)
        .map(|r| {
            let bytes = std::fs::read(&r.image_path).unwrap();
            let img = coips::imaging::decode_image(&bytes, r.field_mm, &r.source_id).unwrap();
            (
                qa::preprocess_for_qa(&img, 64).unwrap(),
                r.class.index(),
            )
        })
        .collect();

    let (loss_a, acc_a) = qa::evaluate_classifier(&net, &val, &weights).unwrap();
    let reread = checkpoint::load(&fx.classifier).unwrap();
    let (loss_b, acc_b) = qa::evaluate_classifier(&reread, &val, &weights).unwrap();
    assert_eq!(loss_a.to_bits(), loss_b.to_bits(), "validation loss drifted");
    assert_eq!(acc_a.to_bits(), acc_b.to_bits());

    // and the serialized bytes themselves are a fixed point
    let mut once = Vec::new();
    checkpoint::write_bytes(&net, &mut once).unwrap();
    let mut twice = Vec::new();
    checkpoint::write_bytes(&checkpoint::read_bytes(&once).unwrap(), &mut twice).unwrap();
    assert_eq!(once, twice);

    println!("PASS checkpoint round-trip: validation loss bit-exact ({loss_a})");
}

// ---------------------------------------------------------------------------
// Split tooling: reference proportions over 100 ids give (66, 28, 3, 3);
// 5-fold splits are exact partitions.
// ---------------------------------------------------------------------------

#[test]
fn split_tooling() {
    let weights: Vec<u64> = HOLDOUT_PROPORTIONS.iter().map(|&(_, w)| w).collect();
    assert_eq!(apportion(100, &weights).unwrap(), vec![66, 28, 3, 3]);

    let ids: Vec<String> = (0..103).map(|i| format!("s{i:04}")).collect();
    let folds = kfold(&ids, 5, 42).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen: Vec<&String> = folds.iter().flatten().collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), ids.len(), "folds overlap or drop ids");
    for f in &folds {
        assert!((20..=21).contains(&f.len()));
    }
    println!("PASS split tooling: (66, 28, 3, 3) hold-out and exact 5-fold partition");
}

// ---------------------------------------------------------------------------
// Synthetic end-to-end training at the default desk configuration:
// validation accuracy >= 0.85, best-fold Dice >= 0.90, under 30 minutes.
// ---------------------------------------------------------------------------

#[test]
fn synthetic_end_to_end_training() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let spec = SynthSpec::default();
    assert_eq!(spec.total(), 900);
    synthgen::generate_corpus(&spec, &corpus).unwrap();
    let manifest = load_manifest(&corpus.join("manifest.csv")).unwrap();

    let start = Instant::now();
    let (_, qa_logs) = qa::train_classifier(&manifest, &QaTrainConfig::default()).unwrap();
    let best_acc = qa_logs
        .iter()
        .map(|l| l.val_acc)
        .fold(f64::NEG_INFINITY, f64::max);

    let outcome = seg::train_segmenter(&manifest, &SegTrainConfig::default()).unwrap();
    let elapsed = start.elapsed();

    assert!(
        best_acc >= 0.85,
        "classifier validation accuracy {best_acc} below 0.85"
    );
    assert!(
        outcome.best_dice >= 0.90,
        "best-fold validation Dice {} below 0.90",
        outcome.best_dice
    );
    assert!(
        elapsed.as_secs() < 30 * 60,
        "training took {elapsed:?}, budget is 30 minutes"
    );
    println!(
        "PASS end-to-end training: val acc {best_acc:.4}, best-fold Dice {:.4} (fold {}), \
         wall clock {elapsed:?}",
        outcome.best_dice, outcome.best_fold
    );
}
