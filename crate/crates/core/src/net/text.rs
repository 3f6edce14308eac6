//! Line-oriented text form of a [`NetworkSpec`].
//!
//! ```text
//! acdnet i_len=2000 sr=2000 n_cls=4 x=2
//! conv1 conv filters=2 kernel=1x9 stride=1x2 padding=0x0
//! bn1 batchnorm
//! maxpool1 maxpool kernel=1x5 stage=sfeb
//! ```

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{LayerKind, LayerSpec, NetError, NetworkSpec, PoolStage};

fn pair(p: (usize, usize)) -> String {
    format!("{}x{}", p.0, p.1)
}

fn stage(s: PoolStage) -> String {
    match s {
        PoolStage::Sfeb => "sfeb".into(),
        PoolStage::Tfeb(i) => i.to_string(),
    }
}

pub(super) fn write_spec(spec: &NetworkSpec) -> String {
    let mut out = format!("acdnet i_len={} sr={} n_cls={} x={}\n", spec.i_len, spec.sr, spec.n_cls, spec.x);
    for l in &spec.layers {
        let body = match &l.kind {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => format!(
                "conv filters={filters} kernel={} stride={} padding={}",
                pair(*kernel),
                pair(*stride),
                pair(*padding)
            ),
            LayerKind::BatchNorm => "batchnorm".into(),
            LayerKind::Relu => "relu".into(),
            LayerKind::MaxPool { kernel, stage: s } => format!("maxpool kernel={} stage={}", pair(*kernel), stage(*s)),
            LayerKind::AvgPool { kernel, stage: s } => format!("avgpool kernel={} stage={}", pair(*kernel), stage(*s)),
            LayerKind::SwapAxes => "swapaxes".into(),
            LayerKind::Dropout { rate } => format!("dropout rate={rate}"),
            LayerKind::Flatten => "flatten".into(),
            LayerKind::Dense { units } => format!("dense units={units}"),
            LayerKind::Softmax => "softmax".into(),
        };
        let _ = writeln!(out, "{} {}", l.name, body);
    }
    out
}

struct Fields<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn parse(line: usize, tokens: &[&'a str]) -> Result<Self, NetError> {
        let mut map = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok.split_once('=').ok_or_else(|| NetError::Parse {
                line,
                reason: format!("expected key=value, got `{tok}`"),
            })?;
            if map.insert(k, v).is_some() {
                return Err(NetError::Parse {
                    line,
                    reason: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self { line, map })
    }

    fn err(&self, reason: String) -> NetError {
        NetError::Parse { line: self.line, reason }
    }

    fn raw(&mut self, key: &str) -> Result<&'a str, NetError> {
        self.map.remove(key).ok_or_else(|| self.err(format!("missing `{key}`")))
    }

    fn usize(&mut self, key: &str) -> Result<usize, NetError> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| self.err(format!("`{key}` is not an integer: `{v}`")))
    }

    fn pair(&mut self, key: &str) -> Result<(usize, usize), NetError> {
        let v = self.raw(key)?;
        let bad = || self.err(format!("`{key}` must look like AxB, got `{v}`"));
        let (a, b) = v.split_once('x').ok_or_else(bad)?;
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    }

    fn stage(&mut self) -> Result<PoolStage, NetError> {
        let v = self.raw("stage")?;
        if v == "sfeb" {
            return Ok(PoolStage::Sfeb);
        }
        v.parse()
            .map(PoolStage::Tfeb)
            .map_err(|_| self.err(format!("bad pool stage `{v}`")))
    }

    fn finish(self) -> Result<(), NetError> {
        match self.map.keys().next() {
            Some(k) => Err(self.err(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub fn parse_spec(text: &str) -> Result<NetworkSpec, NetError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or(NetError::Parse {
        line: 0,
        reason: "empty spec".into(),
    })?;
    let htok: Vec<&str> = header.split_whitespace().collect();
    if htok.first() != Some(&"acdnet") {
        return Err(NetError::Parse {
            line: hline,
            reason: "header must start with `acdnet`".into(),
        });
    }
    let mut h = Fields::parse(hline, &htok[1..])?;
    let (i_len, sr, n_cls, x) = (h.usize("i_len")?, h.usize("sr")?, h.usize("n_cls")?, h.usize("x")?);
    h.finish()?;

    let mut layers = Vec::new();
    for (line, body) in lines {
        let tok: Vec<&str> = body.split_whitespace().collect();
        if tok.len() < 2 {
            return Err(NetError::Parse {
                line,
                reason: "expected `<name> <kind> [key=value ...]`".into(),
            });
        }
        let mut f = Fields::parse(line, &tok[2..])?;
        let kind = match tok[1] {
            "conv" => LayerKind::Conv {
                filters: f.usize("filters")?,
                kernel: f.pair("kernel")?,
                stride: f.pair("stride")?,
                padding: f.pair("padding")?,
            },
            "batchnorm" => LayerKind::BatchNorm,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool {
                kernel: f.pair("kernel")?,
                stage: f.stage()?,
            },
            "avgpool" => LayerKind::AvgPool {
                kernel: f.pair("kernel")?,
                stage: f.stage()?,
            },
            "swapaxes" => LayerKind::SwapAxes,
            "dropout" => {
                let v = f.raw("rate")?;
                let rate: f64 = v.parse().map_err(|_| f.err(format!("bad dropout rate `{v}`")))?;
                if !(0.0..1.0).contains(&rate) {
                    return Err(f.err(format!("dropout rate {rate} outside [0, 1)")));
                }
                LayerKind::Dropout { rate }
            }
            "flatten" => LayerKind::Flatten,
            "dense" => LayerKind::Dense { units: f.usize("units")? },
            "softmax" => LayerKind::Softmax,
            other => return Err(f.err(format!("unknown layer kind `{other}`"))),
        };
        f.finish()?;
        layers.push(LayerSpec::new(tok[0], kind));
    }
    Ok(NetworkSpec {
        i_len,
        sr,
        n_cls,
        x,
        layers,
    })
}
