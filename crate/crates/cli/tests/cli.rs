use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use interactive_core::image::{decode_image, write_image, RasterImage};
use interactive_core::model_io::{generate_named, save_model};
use interactive_core::LayerKind;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interactive"))
        .args(args)
        .env_remove("INTERACTIVE_LOG")
        .output()
        .expect("binary runs")
}

fn noise_image(width: usize, height: usize, channels: usize, seed: u32) -> RasterImage {
    let mut state = seed.wrapping_mul(2654435761).max(1);
    let pixels = (0..width * height * channels)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            (state >> 24) as u8
        })
        .collect();
    RasterImage::new(width, height, channels, pixels).unwrap()
}

fn fixture_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    save_model(&generate_named("tiny-3conv", 7).unwrap(), dir.path().join("m.bin")).unwrap();
    write_image(&noise_image(37, 23, 3, 1), dir.path().join("rgb.ppm")).unwrap();
    write_image(&noise_image(12, 16, 1, 2), dir.path().join("gray.pgm")).unwrap();
    dir
}

#[test]
fn exit_codes_match_golden_file() {
    let dir = fixture_dir();
    let golden = include_str!("golden/exit_codes.txt");
    let mut mismatches = Vec::new();
    for line in golden.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let (code, rest) = line.split_once(char::is_whitespace).unwrap();
        let expected: i32 = code.parse().unwrap();
        let rest = rest.replace("{dir}", dir.path().to_str().unwrap());
        let args: Vec<&str> = rest.split_whitespace().collect();
        let out = run(&args);
        let got = out.status.code().unwrap_or(-1);
        if got != expected {
            mismatches.push(format!(
                "{line}\n  expected {expected}, got {got}\n  stderr: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n"));
}

#[test]
fn bad_template_lists_available_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-model",
        "--arch",
        "vgg19",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["tiny-2conv", "tiny-3conv", "tiny-fc", "toy-vgg"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(!dir.path().join("x").exists());
}

#[test]
fn pooling_successor_is_explained() {
    let dir = fixture_dir();
    let d = dir.path();
    let out = run(&[
        "activeness",
        "--model",
        d.join("m.bin").to_str().unwrap(),
        "--image",
        d.join("rgb.ppm").to_str().unwrap(),
        "--layer",
        "conv-1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pooling"));
}

#[test]
fn heatmap_has_original_image_size() {
    let dir = fixture_dir();
    let d = dir.path();
    for resize in ["model", "area"] {
        let heat = d.join(format!("h-{resize}.pgm"));
        let feat = d.join(format!("f-{resize}.bin"));
        let out = run(&[
            "activeness",
            "--model",
            d.join("m.bin").to_str().unwrap(),
            "--image",
            d.join("rgb.ppm").to_str().unwrap(),
            "--layer",
            "pool-1",
            "--resize",
            resize,
            "--heatmap",
            heat.to_str().unwrap(),
            "--features",
            feat.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let img = decode_image(&fs::read(&heat).unwrap()).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (37, 23, 1));
        assert_eq!(img.pixels().iter().min(), Some(&0));
        assert_eq!(img.pixels().iter().max(), Some(&255));
        let bytes = fs::read(&feat).unwrap();
        assert_eq!(&bytes[..8], b"IAFEAT01");
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(dim, 4);
        assert_eq!(bytes.len(), 16 + 4 * dim);
    }
}

#[test]
fn zero_image_on_bias_free_model_gives_flat_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut spec = generate_named("tiny-2conv", 5).unwrap();
    for (i, layer) in spec.clone().layers().iter().enumerate() {
        if let LayerKind::Conv(c) = &layer.kind {
            spec = spec.with_conv(i, c.map_bias(|_| 0.0).unwrap()).unwrap();
        }
    }
    save_model(&spec, d.join("m.bin")).unwrap();
    write_image(&RasterImage::new(20, 10, 3, vec![0; 600]).unwrap(), d.join("z.ppm")).unwrap();
    for (layer, config, p) in [("input", "next", "1"), ("pool-1", "last", "2"), ("input", "last", "1")] {
        let heat = d.join("h.pgm");
        let out = run(&[
            "activeness",
            "--model",
            d.join("m.bin").to_str().unwrap(),
            "--image",
            d.join("z.ppm").to_str().unwrap(),
            "--layer",
            layer,
            "--config",
            config,
            "--p",
            p,
            "--heatmap",
            heat.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let img = decode_image(&fs::read(&heat).unwrap()).unwrap();
        assert_eq!((img.width(), img.height()), (20, 10));
        assert!(img.pixels().iter().all(|&v| v == 128), "{layer} {config} p={p}");
    }
}

#[test]
fn inputs_are_not_modified() {
    let dir = fixture_dir();
    let d = dir.path();
    let snapshot = |p: &Path| fs::read(p).unwrap();
    let (m0, i0) = (snapshot(&d.join("m.bin")), snapshot(&d.join("rgb.ppm")));
    let out = run(&[
        "activeness",
        "--model",
        d.join("m.bin").to_str().unwrap(),
        "--image",
        d.join("rgb.ppm").to_str().unwrap(),
        "--layer",
        "input",
        "--heatmap",
        d.join("h.pgm").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(snapshot(&d.join("m.bin")), m0);
    assert_eq!(snapshot(&d.join("rgb.ppm")), i0);
}

#[test]
fn gradcheck_reports_error_within_tolerance() {
    let dir = fixture_dir();
    let out = run(&[
        "gradcheck",
        "--model",
        dir.path().join("m.bin").to_str().unwrap(),
        "--samples",
        "200",
        "--seed",
        "7",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.starts_with("max relative error")).unwrap();
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value <= 1e-4, "{line}");
}
