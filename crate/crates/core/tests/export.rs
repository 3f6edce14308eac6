use std::fs;
use std::path::Path;
use std::process::Command;

use acdnet_core::model::{infer, Params};
use acdnet_core::net::{build_acdnet, count_filters, count_params, micro_acdnet, LayerKind, NetworkSpec};
use acdnet_core::quant::{
    dequantized_params, emit_c_source, folded_infer, int8_infer, int8_logits, load_model, model_size_bytes, parse_test_vectors,
    plan_memory, quantize_input, quantize_int8, save_model, Container, MemoryMode, QuantizedModel,
};
use acdnet_core::tensor::Tensor;
use acdnet_core::train::argmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sums of random tones at audio-like levels, as `[n, 1, 1, len]`.
fn tone_windows(n: usize, len: usize, sr: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * len);
    for _ in 0..n {
        let f: f64 = rng.random_range(40.0..0.4 * sr as f64);
        let amp: f64 = rng.random_range(0.05..0.6);
        data.extend((0..len).map(|i| (amp * (std::f64::consts::TAU * f * i as f64 / sr as f64).sin()) as f32));
    }
    Tensor::new(&[n, 1, 1, len], data).unwrap()
}

fn quantized(spec: &NetworkSpec, seed: u64) -> (Params, QuantizedModel) {
    let params = Params::<f32>::init(spec, seed).unwrap();
    let calib = [tone_windows(4, spec.i_len, spec.sr, seed + 100)];
    let q = quantize_int8(spec, &params, &calib).unwrap();
    (params, q)
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let len = t.shape()[3];
    t.data().chunks(len).map(<[f32]>::to_vec).collect()
}

#[test]
fn micro_container_sizes() {
    let spec = micro_acdnet();
    let (params, q) = quantized(&spec, 1);
    let float = Container::from_folded(&spec, &params).unwrap();
    let mib = model_size_bytes(&float) as f64 / (1u64 << 20) as f64;
    assert!((mib - 0.50).abs() <= 0.01, "float size {mib} MiB");
    // batch-norm gamma and beta fold away
    assert_eq!(float.blob_bytes(), 4 * (count_params(&spec).unwrap() - 2 * count_filters(&spec)));
    let int8 = Container::from_quantized(&q);
    let bytes = model_size_bytes(&int8);
    assert!(bytes <= 160_000, "int8 size {bytes}");
    let weights: usize = q.tensors.iter().filter(|(n, _)| n.ends_with(".weight")).map(|(_, t)| t.data.len()).sum();
    let biases: usize = q.tensors.iter().filter(|(n, _)| n.ends_with(".bias")).map(|(_, t)| t.data.len()).sum();
    assert_eq!(int8.blob_bytes(), weights + 4 * biases);
    assert_eq!(bytes, int8.blob_bytes() + int8.metadata_bytes());
}

#[test]
fn quantized_container_round_trip() {
    let spec = build_acdnet(2000, 2000, 4, 1).unwrap();
    let (_, q) = quantized(&spec, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.acdf");
    let c = Container::from_quantized(&q);
    save_model(&c, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.to_quantized().unwrap(), q);
    assert_eq!(back.encode(), fs::read(&path).unwrap());
    assert_eq!(Container::from_quantized(&quantized(&spec, 2).1).encode(), c.encode());
}

#[test]
fn zero_input_is_deterministic() {
    let spec = build_acdnet(2000, 2000, 4, 1).unwrap();
    let (_, q) = quantized(&spec, 3);
    let x = Tensor::<f32>::zeros(&[2, 1, 1, 2000]);
    let a = int8_infer(&q, &x).unwrap();
    let b = int8_infer(&q, &x).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data()[..4], a.data()[4..]);
    let sum: f32 = a.data()[..4].iter().sum();
    assert!((sum - 1.0).abs() < 1e-5);
}

#[test]
fn int8_tracks_dequantized_float() {
    let spec = build_acdnet(2000, 2000, 4, 1).unwrap();
    let (params, q) = quantized(&spec, 4);
    let x = tone_windows(40, 2000, 2000, 9);
    let float = infer(&spec, &params, &x).unwrap();
    let deq = folded_infer(&spec, &dequantized_params(&q), &x, |_, _| {}).unwrap();
    let int = int8_infer(&q, &x).unwrap();
    let f_soft = acdnet_core::ops::softmax(&float).unwrap();
    let d_soft = acdnet_core::ops::softmax(&deq).unwrap();
    let mut gap = 0.0f32;
    for ((a, b), c) in f_soft.data().iter().zip(d_soft.data()).zip(int.data()) {
        gap = gap.max((a - c).abs()).max((b - c).abs());
    }
    assert!(gap < 0.1, "probability gap {gap}");
}

#[test]
fn memory_plans_cover_the_family() {
    let mut specs = vec![micro_acdnet()];
    for x in 1..=4 {
        specs.push(build_acdnet(30_225, 20_000, 50, x).unwrap());
        specs.push(build_acdnet(2000, 2000, 4, x).unwrap());
    }
    for spec in &specs {
        let naive = plan_memory(spec, MemoryMode::Naive, 1).unwrap();
        let fused = plan_memory(spec, MemoryMode::Fused, 1).unwrap();
        assert!(fused.peak_bytes <= naive.peak_bytes, "x={}", spec.x);
    }
}

fn compiler() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(str::to_string)
}

const HARNESS: &str = r#"#include <stdio.h>
#include "acdnet_model.h"

static int8_t input[ACDNET_INPUT_LEN];
static char line[2 * ACDNET_INPUT_LEN + 64];

static int hexval(char c)
{
    return c <= '9' ? c - '0' : c - 'a' + 10;
}

int main(int argc, char **argv)
{
    int8_t logits[ACDNET_N_CLASSES];
    FILE *f;
    int i;
    if (argc != 2 || !(f = fopen(argv[1], "r"))) {
        return 2;
    }
    while (fgets(line, sizeof line, f)) {
        for (i = 0; i < ACDNET_INPUT_LEN; i++) {
            input[i] = (int8_t)(hexval(line[2 * i]) * 16 + hexval(line[2 * i + 1]));
        }
        acdnet_logits(input, logits);
        printf("%d", acdnet_classify(input));
        for (i = 0; i < ACDNET_N_CLASSES; i++) {
            printf(" %d", logits[i]);
        }
        printf("\n");
    }
    fclose(f);
    return 0;
}
"#;

/// Compiles the emitted files with a harness; `None` without a compiler.
fn build_harness(dir: &Path) -> Option<std::path::PathBuf> {
    let cc = compiler()?;
    fs::write(dir.join("main.c"), HARNESS).unwrap();
    let exe = dir.join("parity");
    let base = ["-std=c99", "-O1", "-Wall", "-Wextra", "-Werror", "-pedantic"];
    let files = ["main.c", "acdnet_model.c", "acdnet_runtime.c"].map(|f| dir.join(f));
    for extra in [&["-fsanitize=undefined", "-fno-sanitize-recover=all"][..], &[][..]] {
        let out = Command::new(&cc).args(base).args(extra).args(&files).arg("-o").arg(&exe).output().unwrap();
        if out.status.success() {
            return Some(exe);
        }
        if extra.is_empty() {
            panic!("emitted source failed to compile:\n{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    None
}

fn check_emission(spec: &NetworkSpec, seed: u64) {
    let (_, q) = quantized(spec, seed);
    let container = Container::from_quantized(&q);
    let dir = tempfile::tempdir().unwrap();
    let windows = rows(&tone_windows(6, spec.i_len, spec.sr, seed + 7));
    let files = emit_c_source(&container, dir.path(), &windows).unwrap();

    let dropout = spec.layers.iter().filter(|l| matches!(l.kind, LayerKind::Dropout { .. })).count();
    assert_eq!(files.schedule_len, spec.layers.len() - dropout);
    assert_eq!(files.const_data_bytes, model_size_bytes(&container) - container.metadata_bytes());

    let vectors = parse_test_vectors(&fs::read_to_string(&files.test_vectors).unwrap()).unwrap();
    assert_eq!(vectors.len(), 10);
    assert_eq!(vectors, files.vectors);
    for (v, w) in vectors.iter().zip(&windows) {
        assert_eq!(v.input, quantize_input(&q, w).unwrap());
    }

    let plan = plan_memory(spec, MemoryMode::Fused, 1).unwrap();
    // the caller owns the input buffer
    assert!(files.arena_bytes <= plan.peak_bytes, "{} > {}", files.arena_bytes, plan.peak_bytes);

    // emitting from a reloaded container gives identical files
    let path = dir.path().join("m.acdf");
    save_model(&container, &path).unwrap();
    let again = tempfile::tempdir().unwrap();
    emit_c_source(&load_model(&path).unwrap(), again.path(), &windows).unwrap();
    for f in ["acdnet_model.h", "acdnet_model.c", "acdnet_runtime.c", "test_vectors.txt"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }

    let Some(exe) = build_harness(dir.path()) else {
        eprintln!("no C compiler; skipping compiled parity");
        return;
    };
    let out = Command::new(exe).arg(&files.test_vectors).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    for (line, v) in lines.iter().zip(&vectors) {
        let nums: Vec<i32> = line.split_whitespace().map(|s| s.parse().unwrap()).collect();
        let logits = int8_logits(&q, &v.input).unwrap();
        assert_eq!(nums[0] as usize, v.class);
        assert_eq!(nums[0] as usize, argmax(&logits));
        assert_eq!(nums[1..], logits.iter().map(|&l| i32::from(l)).collect::<Vec<_>>()[..]);
    }
}

#[test]
fn emitted_c_matches_interpreter_on_toy() {
    check_emission(&build_acdnet(2000, 2000, 4, 1).unwrap(), 5);
}

#[test]
fn emitted_c_matches_interpreter_on_micro() {
    check_emission(&micro_acdnet(), 6);
}
