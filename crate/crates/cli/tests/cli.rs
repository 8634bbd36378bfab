use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steganoforge::imagery::{from_tensor, load_image, save_image, to_tensor, RgbImage};
use steganoforge::networks::{
    batch_bits, batch_images, load_weights, logits_to_bits, unbatch_images, Mode,
};
use steganoforge::payload::{block_symbol_error_rates, choose_code, random_bits, CODE_MARGIN};
use steganoforge::steganalysis::lsb_embed;
use steganoforge::synthetic::{synth_corpus, write_dataset};
use tempfile::TempDir;

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steganoforge"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn smoke_dataset(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    write_dataset(&root, 8, 2, 32, 5).unwrap();
    root
}

fn train_smoke(data: &Path, out: &Path) -> Output {
    run(&[
        &"train",
        &"--data",
        &data,
        &"--out",
        &out,
        &"--epochs",
        &"1",
        &"--crop",
        &"32",
        &"--seed",
        &"3",
    ])
}

/// A model trained long enough to carry messages, shared by the tests that
/// need working encode/decode.
struct Trained {
    _dir: TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn trained() -> &'static Trained {
    static MODEL: OnceLock<Trained> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_dataset(&data, 48, 8, 64, 11).unwrap();
        let model = dir.path().join("model.sfg");
        let out = run(&[
            &"train",
            &"--data",
            &data,
            &"--out",
            &model,
            &"--epochs",
            &"20",
            &"--crop",
            &"64",
            &"--seed",
            &"3",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Trained {
            _dir: dir,
            data,
            model,
        }
    })
}

#[test]
fn smoke_train_writes_loadable_container_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = smoke_dataset(dir.path());
    let model = dir.path().join("m.sfg");
    let out = train_smoke(&data, &model);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let w = load_weights(&model).unwrap();
    assert_eq!(w.data_depth(), 1);
    assert!(w.measured.is_some());
    let log = fs::read_to_string(dir.path().join("m.sfg.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let info = run(&[&"info", &"--model", &model]);
    assert_eq!(code(&info), 0);
    let meta: serde_json::Value = serde_json::from_str(&stdout(&info)).unwrap();
    assert_eq!(meta["variant"], "dense");
    assert_eq!(meta["data_depth"], 1);
    assert_eq!(meta["format_version"], 1);
    assert!(meta["measured"]["accuracy"].is_f64());
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = smoke_dataset(dir.path());
    let (a, b) = (dir.path().join("a.sfg"), dir.path().join("b.sfg"));
    assert_eq!(code(&train_smoke(&data, &a)), 0);
    assert_eq!(code(&train_smoke(&data, &b)), 0);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn bad_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = train_smoke(&missing, &dir.path().join("m.sfg"));
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
    let out = run(&[
        &"train", &"--data", &missing, &"--out", &"x", &"--depth", &"9",
    ]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&run(&[&"info", &"--model", &missing])), 2);
    assert_eq!(code(&run(&[&"frobnicate"])), 2);
}

#[test]
fn oversize_message_exits_4_and_stego_keeps_size() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let cover = t.data.join("test/00000.png");
    let msg = dir.path().join("msg.bin");
    fs::write(&msg, vec![7u8; 5000]).unwrap();
    let stego = dir.path().join("s.png");
    let out = run(&[
        &"encode",
        &"--model",
        &t.model,
        &"--cover",
        &cover,
        &"--message",
        &msg,
        &"--out",
        &stego,
    ]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at most"));
    assert!(!stego.exists());

    fs::write(&msg, b"fits").unwrap();
    let out = run(&[
        &"encode",
        &"--model",
        &t.model,
        &"--cover",
        &cover,
        &"--message",
        &msg,
        &"--out",
        &stego,
    ]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("capacity:"));
    let (c, s) = (load_image(&cover).unwrap(), load_image(&stego).unwrap());
    assert_eq!((c.width(), c.height()), (s.width(), s.height()));
}

fn encode_decode(t: &Trained, dir: &Path, cover: &Path, message: &[u8], seed: u64) -> Vec<u8> {
    let msg = dir.join("m.bin");
    let stego = dir.join("s.png");
    let back = dir.join("back.bin");
    fs::write(&msg, message).unwrap();
    let seed = seed.to_string();
    let out = run(&[
        &"encode",
        &"--model",
        &t.model,
        &"--cover",
        &cover,
        &"--message",
        &msg,
        &"--out",
        &stego,
        &"--seed",
        &seed,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        &"decode", &"--model", &t.model, &"--stego", &stego, &"--out", &back,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::read(back).unwrap()
}

#[test]
fn encode_then_decode_is_identity_on_random_messages() {
    let t = trained();
    let w = load_weights(&t.model).unwrap();
    let measured = w.measured.unwrap();
    assert!(
        measured.symbol_error_rate * 1.5 <= w.rs_code.correctable() as f64 / w.rs_code.n as f64,
        "code {:?} does not cover measured rate {}",
        w.rs_code,
        measured.symbol_error_rate
    );
    let dir = tempfile::tempdir().unwrap();
    let covers: Vec<PathBuf> = (0..8)
        .map(|i| t.data.join(format!("test/{i:05}.png")))
        .collect();
    let max = steganoforge::channel::capacity(&w, 64, 64, w.rs_code);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..100 {
        let len = rng.gen_range(0..=max);
        let message: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let back = encode_decode(t, dir.path(), &covers[i % covers.len()], &message, i as u64);
        assert_eq!(back, message, "message {i} of {len} bytes");
    }
}

#[test]
fn decoding_a_plain_cover_exits_5() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    for i in 0..4 {
        let cover = t.data.join(format!("test/{i:05}.png"));
        let out = run(&[
            &"decode",
            &"--model",
            &t.model,
            &"--stego",
            &cover,
            &"--out",
            &dir.path().join("x"),
        ]);
        assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    }
}

fn corrupt(img: &RgbImage, fraction: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = img.clone();
    let n = img.width() * img.height();
    for _ in 0..(n as f64 * fraction).round() as usize {
        let p = rng.gen_range(0..n);
        for c in 0..3 {
            out.pixels_mut()[3 * p + c] = rng.gen();
        }
    }
    out
}

/// Worst per-block symbol error rate seen when 0.5% of the stego pixels are
/// replaced by noise.
fn corrupted_symbol_rate(t: &Trained, trials: u64) -> f64 {
    let w = load_weights(&t.model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..trials {
        let cover = to_tensor(&load_image(t.data.join(format!("test/{:05}.png", i % 8))).unwrap());
        let bits = random_bits(1, 64, 64, 1000 + i).unwrap();
        let stego = w
            .encoder
            .forward(
                &batch_images(&[&cover]).unwrap(),
                &batch_bits(&[&bits]).unwrap(),
                Mode::Eval,
            )
            .unwrap()
            .0;
        let stego = from_tensor(&unbatch_images(&stego).unwrap()[0]).unwrap();
        let noisy = to_tensor(&corrupt(&stego, 0.005, &mut rng));
        let logits = w
            .decoder
            .forward(&batch_images(&[&noisy]).unwrap(), Mode::Eval)
            .unwrap()
            .0;
        let decoded = logits_to_bits(&logits, 0).unwrap();
        for r in block_symbol_error_rates(&decoded, &bits, 255).unwrap() {
            worst = worst.max(r);
        }
    }
    worst
}

#[test]
fn pixel_corruption_is_corrected_by_a_code_sized_for_it() {
    let t = trained();
    let p = corrupted_symbol_rate(t, 40);
    let rs = choose_code(p, CODE_MARGIN).expect("corrupted error rate within reach of a code");
    let (n, k) = (rs.n.to_string(), rs.k.to_string());
    let dir = tempfile::tempdir().unwrap();
    let msg = dir.path().join("m.bin");
    let message: Vec<u8> = (0..40u8).collect();
    fs::write(&msg, &message).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..20 {
        let cover = t.data.join(format!("test/{:05}.png", trial % 8));
        let stego = dir.path().join("s.png");
        let out = run(&[
            &"encode",
            &"--model",
            &t.model,
            &"--cover",
            &cover,
            &"--message",
            &msg,
            &"--out",
            &stego,
            &"--rs-n",
            &n,
            &"--rs-k",
            &k,
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let noisy = corrupt(&load_image(&stego).unwrap(), 0.005, &mut rng);
        save_image(&noisy, &stego).unwrap();
        let back = dir.path().join("back.bin");
        let out = run(&[
            &"decode", &"--model", &t.model, &"--stego", &stego, &"--out", &back, &"--rs-n", &n,
            &"--rs-k", &k,
        ]);
        assert_eq!(
            code(&out),
            0,
            "trial {trial}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(fs::read(&back).unwrap(), message);
    }
}

fn evaluate(t: &Trained) -> serde_json::Value {
    let out = run(&[&"evaluate", &"--model", &t.model, &"--data", &t.data]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(&stdout(&out)).unwrap()
}

#[test]
fn evaluate_reports_consistent_finite_metrics() {
    let t = trained();
    let r = evaluate(t);
    for key in ["accuracy", "rs_bpp", "psnr", "ssim"] {
        assert!(r[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(r["n_images"], 8);
    let acc = r["accuracy"].as_f64().unwrap();
    assert!((r["rs_bpp"].as_f64().unwrap() - (2.0 * acc - 1.0)).abs() < 1e-9);
    assert_eq!(r, evaluate(t));

    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("test")).unwrap();
    let out = run(&[&"evaluate", &"--model", &t.model, &"--data", &dir.path()]);
    assert_eq!(code(&out), 2);
}

fn write_pngs(dir: &Path, imgs: &[RgbImage]) {
    fs::create_dir_all(dir).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        save_image(img, dir.join(format!("{i:04}.png"))).unwrap();
    }
}

fn detect(dir: &Path, covers: &Path, stegos: &Path) -> f64 {
    let prefix = dir.join("report");
    let out = run(&[
        &"detect",
        &"--covers",
        &covers,
        &"--stegos",
        &stegos,
        &"--out",
        &prefix,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(prefix.with_extension("csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("threshold,fpr,tpr"));
    let points: Vec<(f64, f64)> = rows
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    assert!(points
        .windows(2)
        .all(|p| p[0].0 <= p[1].0 && p[0].1 <= p[1].1));
    assert_eq!(points.last(), Some(&(1.0, 1.0)));
    let lines = fs::read_to_string(prefix.with_extension("jsonl")).unwrap();
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!((0.0..=1.0).contains(&v["fused"].as_f64().unwrap()));
    }
    stdout(&out)
        .trim()
        .strip_prefix("auroc ")
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn detect_separates_lsb_and_not_covers() {
    let dir = tempfile::tempdir().unwrap();
    let covers = synth_corpus(40, 96, 96, 1).unwrap();
    let more = synth_corpus(40, 96, 96, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stegos: Vec<_> = covers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let bits: Vec<u8> = (0..c.pixels().len()).map(|_| rng.gen_range(0..2)).collect();
            lsb_embed(c, &bits, i as u64).unwrap()
        })
        .collect();
    let (cd, sd, md) = (
        dir.path().join("c"),
        dir.path().join("s"),
        dir.path().join("m"),
    );
    write_pngs(&cd, &covers);
    write_pngs(&sd, &stegos);
    write_pngs(&md, &more);
    assert!(detect(dir.path(), &cd, &sd) >= 0.95);
    let null = detect(dir.path(), &cd, &md);
    assert!((0.3..=0.7).contains(&null), "{null}");

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        &"detect",
        &"--covers",
        &cd,
        &"--stegos",
        &empty,
        &"--out",
        &dir.path().join("r"),
    ]);
    assert_eq!(code(&out), 2);
}
