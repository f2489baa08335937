//! Versioned binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! "LPLAB" <version byte '1'>
//! u64 LE byte length, UTF-8 header (`key = value` lines)
//! per layer, in header order:
//!     dense:   W, [bias], mask
//!     adapted: W0, A, B, [bias], mask
//! ```
//!
//! Every float array is a u64 LE byte length followed by row-major LE f64
//! values. Every mask is a u64 LE byte length followed by the keep bits
//! packed LSB-first, row-major; a set bit means the weight is kept. Shapes
//! come from the header, so the stored lengths are checked, never trusted.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::lora::{AdapterMode, DenseWeight, LoraModule, Mask};
use crate::model::{Activation, Arch, LayerKind, LayerWeight, Linear, Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"LPLAB";
pub const VERSION: u8 = b'1';

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = header_text(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for layer in &model.layers {
        match &layer.weight {
            LayerWeight::Dense(d) => put_floats(&mut out, &d.w),
            LayerWeight::Lora(m) => {
                put_floats(&mut out, m.base());
                put_floats(&mut out, &m.a);
                put_floats(&mut out, &m.b);
            }
        }
        if let Some(b) = &layer.bias {
            put_floats(&mut out, b);
        }
        put_mask(&mut out, layer.weight.mask());
    }
    out
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

fn header_text(model: &Model) -> String {
    let spec = &model.spec;
    let mut h = String::new();
    match &spec.arch {
        Arch::Mlp { hidden, activation } => {
            let hidden: Vec<String> = hidden.iter().map(usize::to_string).collect();
            writeln!(h, "arch = mlp").unwrap();
            writeln!(h, "hidden = {}", hidden.join(",")).unwrap();
            writeln!(h, "activation = {activation}").unwrap();
        }
        Arch::Transformer { tokens, width, ffn, activation } => {
            writeln!(h, "arch = transformer").unwrap();
            writeln!(h, "tokens = {tokens}").unwrap();
            writeln!(h, "width = {width}").unwrap();
            writeln!(h, "ffn = {ffn}").unwrap();
            writeln!(h, "activation = {activation}").unwrap();
        }
    }
    writeln!(h, "input_dim = {}", spec.input_dim).unwrap();
    writeln!(h, "classes = {}", spec.classes).unwrap();
    writeln!(h, "seed = {}", spec.seed).unwrap();
    for l in &model.layers {
        let (d, k) = l.weight.shape();
        let (mode, rank, trainable) = match &l.weight {
            LayerWeight::Dense(dw) => ("dense".to_string(), 0, dw.w.requires_grad),
            LayerWeight::Lora(m) => (m.mode().to_string(), m.rank(), true),
        };
        let bias = match &l.bias {
            None => "none",
            Some(b) if b.requires_grad => "trainable",
            Some(_) => "frozen",
        };
        writeln!(
            h,
            "layer = {} {} {d} {k} {mode} {rank} {} {} {bias}",
            l.name,
            l.kind,
            u8::from(trainable),
            u8::from(l.prunable)
        )
        .unwrap();
    }
    h
}

fn put_floats(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&((t.len() * 8) as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_mask(out: &mut Vec<u8>, m: &Mask) {
    let mut bytes = vec![0u8; m.len().div_ceil(8)];
    for (i, &k) in m.keep().iter().enumerate() {
        if k {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> LabError {
        LabError::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.buf.len() - self.pos;
        if n > rest {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {rest} left")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn len_prefix(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let n = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(n).map_err(|_| self.err(format!("{what} length {n} does not fit in memory")))
    }

    fn floats(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor> {
        let start = self.pos;
        let n = self.len_prefix(what)?;
        if n != rows * cols * 8 {
            return Err(LabError::Format {
                offset: start,
                msg: format!("{what}: length {n} bytes, expected {} for {rows}x{cols}", rows * cols * 8),
            });
        }
        let data_at = self.pos;
        let raw = self.take(n, what)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_vec(rows, cols, data).map_err(|e| LabError::Format {
            offset: data_at,
            msg: format!("{what}: {e}"),
        })
    }

    fn mask(&mut self, rows: usize, cols: usize, what: &str) -> Result<Mask> {
        let start = self.pos;
        let n = self.len_prefix(what)?;
        let bits = rows * cols;
        if n != bits.div_ceil(8) {
            return Err(LabError::Format {
                offset: start,
                msg: format!("{what}: length {n} bytes, expected {} for {bits} bits", bits.div_ceil(8)),
            });
        }
        let raw = self.take(n, what)?;
        let keep = (0..bits).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
        Mask::from_keep(rows, cols, keep)
    }
}

struct LayerHeader {
    name: String,
    kind: LayerKind,
    d: usize,
    k: usize,
    mode: Option<AdapterMode>,
    rank: usize,
    trainable: bool,
    prunable: bool,
    bias: Option<bool>,
}

fn parse_layer(v: &str) -> std::result::Result<LayerHeader, String> {
    let f: Vec<&str> = v.split_whitespace().collect();
    if f.len() != 9 {
        return Err(format!("layer line has {} fields, expected 9", f.len()));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad number `{s}`"));
    let flag = |s: &str| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("bad flag `{s}`")),
    };
    Ok(LayerHeader {
        name: f[0].to_string(),
        kind: f[1].parse().map_err(|e: LabError| e.to_string())?,
        d: num(f[2])?,
        k: num(f[3])?,
        mode: match f[4] {
            "dense" => None,
            m => Some(m.parse().map_err(|e: LabError| e.to_string())?),
        },
        rank: num(f[5])?,
        trainable: flag(f[6])?,
        prunable: flag(f[7])?,
        bias: match f[8] {
            "none" => None,
            "trainable" => Some(true),
            "frozen" => Some(false),
            other => return Err(format!("bad bias state `{other}`")),
        },
    })
}

fn parse_header(text: &str) -> std::result::Result<(ModelSpec, Vec<LayerHeader>), String> {
    let mut kv = std::collections::BTreeMap::new();
    let mut layers = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("header line {}: expected `key = value`", no + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "layer" {
            layers.push(parse_layer(v).map_err(|e| format!("header line {}: {e}", no + 1))?);
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| format!("header misses `{k}`"));
    let num = |k: &str| -> std::result::Result<usize, String> {
        get(k)?.parse().map_err(|_| format!("header `{k}` is not a number"))
    };
    let activation: Activation = get("activation")?.parse().map_err(|e: LabError| e.to_string())?;
    let arch = match get("arch")? {
        "mlp" => {
            let h = get("hidden")?;
            let hidden = if h.is_empty() {
                Vec::new()
            } else {
                h.split(',')
                    .map(|s| s.trim().parse().map_err(|_| format!("bad hidden width `{s}`")))
                    .collect::<std::result::Result<_, _>>()?
            };
            Arch::Mlp { hidden, activation }
        }
        "transformer" => Arch::Transformer {
            tokens: num("tokens")?,
            width: num("width")?,
            ffn: num("ffn")?,
            activation,
        },
        other => return Err(format!("unknown arch `{other}`")),
    };
    let seed = get("seed")?.parse().map_err(|_| "header `seed` is not a number".to_string())?;
    let spec = ModelSpec {
        arch,
        input_dim: num("input_dim")?,
        classes: num("classes")?,
        seed,
    };
    Ok((spec, layers))
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(LabError::Format {
            offset: 0,
            msg: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(LabError::Format {
            offset: MAGIC.len(),
            msg: format!(
                "unsupported checkpoint version `{}` (this build reads version {})",
                version.escape_ascii(),
                VERSION as char
            ),
        });
    }
    let hlen = r.len_prefix("header")?;
    let header_at = r.pos;
    let text = std::str::from_utf8(r.take(hlen, "header")?).map_err(|e| LabError::Format {
        offset: header_at + e.valid_up_to(),
        msg: "header is not UTF-8".into(),
    })?;
    let fail = |msg: String| LabError::Format { offset: header_at, msg };
    let (spec, headers) = parse_header(text).map_err(fail)?;
    spec.validate().map_err(|e| fail(e.to_string()))?;
    let layout = spec.layer_layout();
    if layout.len() != headers.len() {
        return Err(fail(format!("{} layers in header, architecture has {}", headers.len(), layout.len())));
    }
    let mut layers = Vec::with_capacity(headers.len());
    for (h, (name, kind, d, k, has_bias)) in headers.into_iter().zip(layout) {
        if h.name != name || h.kind != kind || (h.d, h.k) != (d, k) || h.bias.is_some() != has_bias {
            return Err(fail(format!("layer `{}` does not match the architecture", h.name)));
        }
        let at = r.pos;
        let parts = match h.mode {
            None => {
                let w = r.floats(d, k, &format!("{name}.W"))?;
                Parts::Dense(if h.trainable { w.trainable() } else { w })
            }
            Some(mode) => {
                let a_cols = if mode == AdapterMode::Parallel { k } else { d };
                let w0 = r.floats(d, k, &format!("{name}.W0"))?;
                let a = r.floats(h.rank, a_cols, &format!("{name}.A"))?;
                let b = r.floats(d, h.rank, &format!("{name}.B"))?;
                Parts::Lora(w0, a, b, mode)
            }
        };
        let bias = match h.bias {
            None => None,
            Some(trainable) => {
                let b = r.floats(1, k, &format!("{name}.bias"))?;
                Some(if trainable { b.trainable() } else { b })
            }
        };
        let mask = r.mask(d, k, &format!("{name}.mask"))?;
        let weight = match parts {
            Parts::Dense(w) => LayerWeight::Dense(DenseWeight::with_mask(w, mask)?),
            Parts::Lora(w0, a, b, mode) => LayerWeight::Lora(
                LoraModule::from_parts(w0, a, b, mask, mode).map_err(|e| LabError::Format {
                    offset: at,
                    msg: e.to_string(),
                })?,
            ),
        };
        layers.push(Linear {
            name,
            kind,
            weight,
            bias,
            prunable: h.prunable,
        });
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Model { spec, layers })
}

enum Parts {
    Dense(Tensor),
    Lora(Tensor, Tensor, Tensor, AdapterMode),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TargetSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn adapted(seed: u64, mode: AdapterMode) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::init(ModelSpec::mlp(6, &[5, 4], 3, seed), &mut rng).unwrap();
        m.attach_lora(2, mode, TargetSet::All, &mut rng).unwrap();
        for l in &mut m.layers {
            if let LayerWeight::Lora(x) = &mut l.weight {
                x.b = Tensor::randn(x.b.rows(), x.b.cols(), 0.1, &mut rng).trainable();
            }
            let (d, k) = l.weight.shape();
            let keep = (0..d * k).map(|_| rng.random::<f64>() > 0.4).collect();
            l.weight.apply_mask(Mask::from_keep(d, k, keep).unwrap()).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_is_exact() {
        for mode in [AdapterMode::Parallel, AdapterMode::Sequential] {
            let m = adapted(3, mode);
            let back = from_bytes(&to_bytes(&m)).unwrap();
            assert_eq!(back, m);
            assert_eq!(to_bytes(&back), to_bytes(&m));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ModelSpec {
            arch: Arch::Transformer { tokens: 2, width: 4, ffn: 6, activation: Activation::Gelu },
            input_dim: 8,
            classes: 3,
            seed: 1,
        };
        let t = Model::init(spec, &mut rng).unwrap();
        assert_eq!(from_bytes(&to_bytes(&t)).unwrap(), t);
    }

    #[test]
    fn merged_reload_evaluates_identically() {
        let m = adapted(4, AdapterMode::Sequential);
        let merged = m.merged();
        let back = from_bytes(&to_bytes(&merged)).unwrap();
        let x = Tensor::randn(7, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn version_and_magic_errors() {
        let mut bytes = to_bytes(&adapted(0, AdapterMode::Parallel));
        bytes[5] = b'2';
        let e = from_bytes(&bytes).unwrap_err();
        assert!(matches!(e, LabError::Format { offset: 5, .. }));
        assert!(e.to_string().contains("version `2`"));
        bytes[0] = b'X';
        assert!(e.to_string() != from_bytes(&bytes).unwrap_err().to_string());
        assert!(matches!(from_bytes(&bytes), Err(LabError::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = to_bytes(&adapted(0, AdapterMode::Parallel));
        for cut in [0, 3, 6, 10, 40, bytes.len() - 1] {
            match from_bytes(&bytes[..cut]) {
                Err(LabError::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(LabError::Format { offset, .. }) if offset == bytes.len()));
    }

    #[test]
    fn corrupted_length_rejected() {
        let m = adapted(0, AdapterMode::Parallel);
        let mut bytes = to_bytes(&m);
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let first = 14 + hlen;
        bytes[first] ^= 8;
        assert!(matches!(from_bytes(&bytes), Err(LabError::Format { offset, .. }) if offset == first));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.lpl");
        let m = adapted(9, AdapterMode::Parallel);
        save(&p, &m).unwrap();
        assert_eq!(load(&p).unwrap(), m);
        assert!(matches!(load(&dir.path().join("missing")), Err(LabError::Io(_))));
    }
}
