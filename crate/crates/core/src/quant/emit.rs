//! C source emission: a header with the layer schedule and quantization
//! constants, a source file with the weight arrays, the fixed integer
//! runtime and a test-vector file produced by the int8 interpreter.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::container::{write_atomic, Container, ContainerError, ContainerMode};
use super::int8::{int8_logits, layer_requant, quantize_input};
use super::schedule::{schedule, Op};
use super::{QuantError, QuantizedModel};
use crate::net::{propagate_shapes, LayerKind, NetError, PoolStage, Shape};
use crate::train::argmax;

/// Input/output pairs written alongside the source.
pub const TEST_VECTORS: usize = 10;

pub const HEADER_FILE: &str = "acdnet_model.h";
pub const MODEL_FILE: &str = "acdnet_model.c";
pub const RUNTIME_FILE: &str = "acdnet_runtime.c";
pub const VECTORS_FILE: &str = "test_vectors.txt";

const RUNTIME: &str = include_str!("acdnet_runtime.c");

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("model is not quantized")]
    NotQuantized,
    #[error("bad test vector on line {line}: {reason}")]
    BadVector { line: usize, reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestVector {
    pub input: Vec<i8>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedFiles {
    pub header: PathBuf,
    pub model: PathBuf,
    pub runtime: PathBuf,
    pub test_vectors: PathBuf,
    /// Entries in the emitted schedule table.
    pub schedule_len: usize,
    /// Bytes of weight and bias arrays.
    pub const_data_bytes: usize,
    /// Static activation arena; the input buffer is supplied by the caller.
    pub arena_bytes: usize,
    pub vectors: Vec<TestVector>,
}

struct Row {
    name: String,
    op: &'static str,
    relu: bool,
    input: Shape,
    mid: Shape,
    out: Shape,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    pool: (usize, usize),
    in_off: i64,
    out_off: usize,
    seg_off: usize,
    zp_in: i32,
    zp_out: i32,
    mult: i32,
    shift: u32,
    params: bool,
}

/// Lays out the schedule over one arena. Each output goes at offset 0 when
/// it fits below the live input, else right after it; a fused segment
/// follows its output.
fn rows(model: &QuantizedModel) -> Result<(Vec<Row>, usize), EmitError> {
    let spec = &model.spec;
    let trace = propagate_shapes(spec)?;
    let sched = schedule(spec);
    let mut out = Vec::with_capacity(sched.len());
    let (mut cur_off, mut cur_bytes, mut cur_shape) = (-1i64, 0usize, trace.input);
    let mut arena = 0usize;
    let mut i = 0;
    while i < sched.len() {
        let e = &sched[i];
        i += 1;
        let shape = trace.get(&e.name).expect("traced layer");
        let zp_in = model.activation(&e.input_act)?.zero_point;
        let zp_out = model.activation(&e.act)?.zero_point;
        let mut row = Row {
            name: e.name.clone(),
            op: "ACD_NOP",
            relu: false,
            input: cur_shape,
            mid: shape,
            out: shape,
            kernel: (0, 0),
            stride: (0, 0),
            padding: (0, 0),
            pool: (0, 0),
            in_off: cur_off,
            out_off: cur_off.max(0) as usize,
            seg_off: 0,
            zp_in,
            zp_out,
            mult: 0,
            shift: 1,
            params: false,
        };
        let mut seg = 0;
        let mut fused_pool = None;
        match e.op {
            Op::Folded | Op::Flatten | Op::Softmax => {
                row.input = cur_shape;
                row.out = if e.op == Op::Flatten { shape } else { cur_shape };
                row.mid = row.out;
                cur_shape = row.out;
                out.push(row);
                continue;
            }
            Op::Conv { stride, padding, relu } => {
                let w = model.tensor(&format!("{}.weight", e.name))?;
                row.op = "ACD_CONV";
                row.relu = relu;
                row.kernel = (w.shape[2], w.shape[3]);
                row.stride = stride;
                row.padding = padding;
                row.params = true;
                let r = layer_requant(model, &e.name, &e.input_act, &e.act)?;
                (row.mult, row.shift) = (r.multiplier, r.shift);
                // the SFEB max-pool after this block streams its input
                let next = sched[i..].iter().position(|n| n.op != Op::Folded).map(|k| i + k);
                if let Some(j) = next {
                    if let Some(LayerKind::MaxPool {
                        kernel,
                        stage: PoolStage::Sfeb,
                    }) = spec.layer(&sched[j].name).map(|l| &l.kind)
                    {
                        row.op = "ACD_CONV_MAXPOOL";
                        row.pool = *kernel;
                        row.out = trace.get(&sched[j].name).expect("traced layer");
                        seg = shape.c * shape.h * kernel.1;
                        fused_pool = Some(j);
                    }
                }
            }
            Op::MaxPool { kernel } | Op::AvgPool { kernel } => {
                row.op = if matches!(e.op, Op::MaxPool { .. }) { "ACD_MAXPOOL" } else { "ACD_AVGPOOL" };
                row.pool = kernel;
            }
            Op::SwapAxes => row.op = "ACD_SWAP",
            Op::Dense => {
                row.op = "ACD_DENSE";
                row.params = true;
                let r = layer_requant(model, &e.name, &e.input_act, &e.act)?;
                (row.mult, row.shift) = (r.multiplier, r.shift);
            }
        }
        let need = row.out.numel() + seg;
        let off = if cur_off >= need as i64 || cur_off < 0 {
            0
        } else {
            cur_off as usize + cur_bytes
        };
        row.out_off = off;
        row.seg_off = off + row.out.numel();
        arena = arena.max(off + need);
        cur_off = off as i64;
        cur_bytes = row.out.numel();
        cur_shape = row.out;
        let done = fused_pool.map(|j| (j, row.out_off));
        out.push(row);
        // folded entries between the conv and the pool, then the pool itself
        if let Some((j, off)) = done {
            while i <= j {
                let p = &sched[i];
                out.push(Row {
                    name: p.name.clone(),
                    op: "ACD_NOP",
                    relu: false,
                    input: cur_shape,
                    mid: cur_shape,
                    out: cur_shape,
                    kernel: (0, 0),
                    stride: (0, 0),
                    padding: (0, 0),
                    pool: (0, 0),
                    in_off: off as i64,
                    out_off: off,
                    seg_off: 0,
                    zp_in: model.activation(&p.input_act)?.zero_point,
                    zp_out: model.activation(&p.act)?.zero_point,
                    mult: 0,
                    shift: 1,
                    params: false,
                });
                i += 1;
            }
        }
    }
    Ok((out, arena))
}

fn c_ident(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn write_array<T: std::fmt::Display>(s: &mut String, ty: &str, name: &str, values: &[T]) {
    let _ = writeln!(s, "static const {ty} {name}[{}] = {{", values.len());
    for chunk in values.chunks(16) {
        let line: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "    {},", line.join(", "));
    }
    s.push_str("};\n\n");
}

fn header_text(model: &QuantizedModel, n_rows: usize, arena: usize) -> Result<String, EmitError> {
    let input = model.activation("input")?;
    let mut h = String::new();
    h.push_str("/* Generated model header. Do not edit. */\n");
    h.push_str("#ifndef ACDNET_MODEL_H\n#define ACDNET_MODEL_H\n\n#include <stdint.h>\n\n");
    h.push_str(
        "/* Requantization of a 32-bit accumulator acc (bias included):\n \
         *   q = zp_out + round_half_away_from_zero(acc * mult / 2^shift)\n \
         * with the product taken in 64 bits and q clamped to [lo, 127], where\n \
         * lo = zp_out after a fused ReLU and -128 otherwise. Average pooling\n \
         * rounds its integer mean half away from zero as well. */\n\n",
    );
    let _ = writeln!(h, "#define ACDNET_INPUT_LEN {}", model.spec.i_len);
    let _ = writeln!(h, "#define ACDNET_N_CLASSES {}", model.spec.n_cls);
    let _ = writeln!(h, "#define ACDNET_N_LAYERS {n_rows}");
    let _ = writeln!(h, "#define ACDNET_ARENA_BYTES {arena}");
    let _ = writeln!(h, "/* input code = round(x / {:e}) + ACDNET_INPUT_ZP, x in [-1, 1) */", input.scale);
    let _ = writeln!(h, "#define ACDNET_INPUT_ZP {}\n", input.zero_point);
    h.push_str(
        "enum {\n    ACD_NOP,\n    ACD_CONV,\n    ACD_CONV_MAXPOOL,\n    ACD_MAXPOOL,\n    ACD_AVGPOOL,\n    ACD_SWAP,\n    ACD_DENSE\n};\n\n",
    );
    h.push_str(
        "typedef struct {\n\
         \x20   uint8_t op;\n\
         \x20   uint8_t relu;\n\
         \x20   uint32_t in_c, in_h, in_w;\n\
         \x20   uint32_t mid_c, mid_h, mid_w;\n\
         \x20   uint32_t out_c, out_h, out_w;\n\
         \x20   uint32_t kh, kw, sh, sw, ph, pw;\n\
         \x20   uint32_t pkh, pkw;\n\
         \x20   int32_t in_off, out_off, seg_off;\n\
         \x20   int32_t zp_in, zp_out;\n\
         \x20   int32_t mult, shift;\n\
         \x20   const int8_t *w;\n\
         \x20   const int32_t *b;\n\
         } acd_layer;\n\n",
    );
    h.push_str("extern const acd_layer acdnet_schedule[ACDNET_N_LAYERS];\n\n");
    h.push_str("/* Logit codes of one window of ACDNET_INPUT_LEN input codes. */\n");
    h.push_str("void acdnet_logits(const int8_t *input, int8_t *logits);\n");
    h.push_str("/* Index of the largest logit, first on ties. */\n");
    h.push_str("int acdnet_classify(const int8_t *input);\n\n#endif\n");
    Ok(h)
}

fn model_text(model: &QuantizedModel, rows: &[Row]) -> Result<(String, usize), EmitError> {
    let mut s = String::from("/* Generated model constants. Do not edit. */\n#include \"acdnet_model.h\"\n\n");
    let mut bytes = 0;
    for r in rows.iter().filter(|r| r.params) {
        let id = c_ident(&r.name);
        let w = model.weight_codes(&r.name)?;
        let b = model.bias_codes(&r.name)?;
        write_array(&mut s, "int8_t", &format!("{id}_w"), w);
        write_array(&mut s, "int32_t", &format!("{id}_b"), b);
        bytes += w.len() + 4 * b.len();
    }
    s.push_str("const acd_layer acdnet_schedule[ACDNET_N_LAYERS] = {\n");
    for r in rows {
        let (w, b) = if r.params {
            let id = c_ident(&r.name);
            (format!("{id}_w"), format!("{id}_b"))
        } else {
            ("0".into(), "0".into())
        };
        let _ = writeln!(
            s,
            "    /* {} */ {{{}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}}},",
            r.name,
            r.op,
            u8::from(r.relu),
            r.input.c,
            r.input.h,
            r.input.w,
            r.mid.c,
            r.mid.h,
            r.mid.w,
            r.out.c,
            r.out.h,
            r.out.w,
            r.kernel.0,
            r.kernel.1,
            r.stride.0,
            r.stride.1,
            r.padding.0,
            r.padding.1,
            r.pool.0,
            r.pool.1,
            r.in_off,
            r.out_off,
            r.seg_off,
            r.zp_in,
            r.zp_out,
            r.mult,
            r.shift,
            w,
            b
        );
    }
    s.push_str("};\n");
    Ok((s, bytes))
}

/// Deterministic stand-in windows used when the caller supplies fewer than
/// [`TEST_VECTORS`].
fn filler_windows(len: usize, count: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57);
    let noise = Normal::new(0.0f32, 0.1).expect("valid sigma");
    (0..count).map(|_| (0..len).map(|_| noise.sample(&mut rng).clamp(-1.0, 1.0)).collect()).collect()
}

pub fn test_vector_line(v: &TestVector) -> String {
    let mut s = String::with_capacity(2 * v.input.len() + 8);
    for &b in &v.input {
        let _ = write!(s, "{:02x}", b as u8);
    }
    let _ = write!(s, " {}", v.class);
    s
}

/// One `hex-codes class` pair per line.
pub fn parse_test_vectors(text: &str) -> Result<Vec<TestVector>, EmitError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |reason: &str| EmitError::BadVector {
            line: n + 1,
            reason: reason.to_string(),
        };
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let hex = parts.next().ok_or_else(|| bad("missing input"))?;
        let class = parts
            .next()
            .ok_or_else(|| bad("missing class"))?
            .parse()
            .map_err(|_| bad("class is not an integer"))?;
        if parts.next().is_some() {
            return Err(bad("extra fields"));
        }
        if hex.len() % 2 != 0 {
            return Err(bad("odd hex length"));
        }
        let input = (0..hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).map(|b| b as i8))
            .collect::<Result<_, _>>()
            .map_err(|_| bad("invalid hex"))?;
        out.push(TestVector { input, class });
    }
    Ok(out)
}

/// Writes the header, model source, runtime and test vectors into
/// `out_dir`. Test inputs are the first [`TEST_VECTORS`] of `windows`
/// (float samples in `[-1, 1)`), padded with seeded noise.
pub fn emit_c_source(container: &Container, out_dir: &Path, windows: &[Vec<f32>]) -> Result<EmittedFiles, EmitError> {
    if container.mode != ContainerMode::Int8 {
        return Err(EmitError::NotQuantized);
    }
    let model = container.to_quantized()?;
    let (rows, arena) = rows(&model)?;
    let header = header_text(&model, rows.len(), arena)?;
    let (source, const_data_bytes) = model_text(&model, &rows)?;

    let t = model.spec.i_len;
    let mut inputs: Vec<Vec<f32>> = windows.iter().take(TEST_VECTORS).cloned().collect();
    inputs.extend(filler_windows(t, TEST_VECTORS - inputs.len()));
    let mut vectors = Vec::with_capacity(TEST_VECTORS);
    for w in &inputs {
        let input = quantize_input(&model, w)?;
        let logits = int8_logits(&model, &input)?;
        vectors.push(TestVector {
            class: argmax(&logits),
            input,
        });
    }
    let vectors_text: String = vectors.iter().map(|v| test_vector_line(v) + "\n").collect();

    fs::create_dir_all(out_dir)?;
    let files = EmittedFiles {
        header: out_dir.join(HEADER_FILE),
        model: out_dir.join(MODEL_FILE),
        runtime: out_dir.join(RUNTIME_FILE),
        test_vectors: out_dir.join(VECTORS_FILE),
        schedule_len: rows.len(),
        const_data_bytes,
        arena_bytes: arena,
        vectors,
    };
    write_atomic(&files.header, header.as_bytes())?;
    write_atomic(&files.model, source.as_bytes())?;
    write_atomic(&files.runtime, RUNTIME.as_bytes())?;
    write_atomic(&files.test_vectors, vectors_text.as_bytes())?;
    Ok(files)
}
