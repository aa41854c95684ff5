//! Checkpoint container: a line-oriented text header terminated by `end`,
//! followed by the raw little-endian arrays it describes, in order.
//!
//! ```text
//! EMSTDP-CKPT 1
//! kind engine
//! structure 28x28x1-100d-10d
//! ...
//! array layer2 i8 1000
//! end
//! <bytes>
//! ```

use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::net::{parse_structure, BuiltNetwork, FeedbackMode, ForwardProjection, NetOptions, NetworkSpec};
use crate::oracle::{FpFeedback, FpLayer, FpNetwork, FpWeights};
use crate::plasticity::{Dyadic, LearningParams};

pub const MAGIC: &str = "EMSTDP-CKPT 1";

fn ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    I8,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::I8 => "i8",
            Dtype::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::I8 => 1,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    I8(Vec<i16>),
    F64(Vec<f64>),
}

struct Array {
    name: String,
    extra: String,
    payload: Payload,
}

struct Writer {
    header: String,
    arrays: Vec<Array>,
}

impl Writer {
    fn new(kind: &str) -> Self {
        Writer {
            header: format!("{MAGIC}\nkind {kind}\n"),
            arrays: Vec::new(),
        }
    }

    fn line(&mut self, key: &str, value: impl std::fmt::Display) {
        self.header.push_str(&format!("{key} {value}\n"));
    }

    fn array(&mut self, name: String, extra: String, payload: Payload) {
        self.arrays.push(Array { name, extra, payload });
    }

    fn finish(self, mut w: impl Write) -> Result<()> {
        let mut out = self.header.into_bytes();
        for a in &self.arrays {
            let (dtype, len) = match &a.payload {
                Payload::I8(v) => (Dtype::I8, v.len()),
                Payload::F64(v) => (Dtype::F64, v.len()),
            };
            let extra = if a.extra.is_empty() {
                String::new()
            } else {
                format!(" {}", a.extra)
            };
            out.extend_from_slice(format!("array {} {} {len}{extra}\n", a.name, dtype.name()).as_bytes());
        }
        out.extend_from_slice(b"end\n");
        for a in &self.arrays {
            match &a.payload {
                Payload::I8(v) => out.extend(v.iter().map(|&x| x as i8 as u8)),
                Payload::F64(v) => {
                    let mut buf = vec![0u8; 8 * v.len()];
                    LittleEndian::write_f64_into(v, &mut buf);
                    out.extend_from_slice(&buf);
                }
            }
        }
        w.write_all(&out).map_err(|e| ckpt(format!("write failed: {e}")))
    }
}

struct Parsed {
    fields: Vec<(String, String)>,
    arrays: Vec<Array>,
}

impl Parsed {
    fn read(mut r: impl Read, kind: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| ckpt(format!("read failed: {e}")))?;
        let end = find_end(&bytes).ok_or_else(|| ckpt("header has no end line"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| ckpt("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(ckpt(format!("missing {MAGIC:?} magic line")));
        }
        let mut fields = Vec::new();
        let mut descs = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            if key == "array" {
                let parts: Vec<&str> = rest.splitn(4, ' ').collect();
                if parts.len() < 3 {
                    return Err(ckpt(format!("malformed array line {line:?}")));
                }
                let dtype = match parts[1] {
                    "i8" => Dtype::I8,
                    "f64" => Dtype::F64,
                    d => return Err(ckpt(format!("unknown dtype {d:?}"))),
                };
                let len: usize = parts[2]
                    .parse()
                    .map_err(|_| ckpt(format!("bad array length in {line:?}")))?;
                descs.push((
                    parts[0].to_string(),
                    dtype,
                    len,
                    parts.get(3).unwrap_or(&"").to_string(),
                ));
            } else {
                fields.push((key.to_string(), rest.to_string()));
            }
        }
        let mut offset = end + "end\n".len();
        let mut arrays = Vec::new();
        for (name, dtype, len, extra) in descs {
            let size = len
                .checked_mul(dtype.width())
                .ok_or_else(|| ckpt(format!("array {name} too large")))?;
            if bytes.len() < offset + size {
                return Err(ckpt(format!(
                    "array {name} truncated at byte offset {} (need {})",
                    bytes.len(),
                    offset + size
                )));
            }
            let raw = &bytes[offset..offset + size];
            let payload = match dtype {
                Dtype::I8 => Payload::I8(raw.iter().map(|&b| b as i8 as i16).collect()),
                Dtype::F64 => {
                    let mut v = vec![0.0; len];
                    LittleEndian::read_f64_into(raw, &mut v);
                    Payload::F64(v)
                }
            };
            offset += size;
            arrays.push(Array { name, extra, payload });
        }
        if offset != bytes.len() {
            return Err(ckpt(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let p = Parsed { fields, arrays };
        let found = p.get("kind")?;
        if found != kind {
            return Err(ckpt(format!("expected a {kind} checkpoint, found {found}")));
        }
        Ok(p)
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| ckpt(format!("missing header field {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| ckpt(format!("bad value {v:?} for {key}")))
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> {
        self.fields
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn take(&mut self, name: &str) -> Result<Array> {
        let i = self
            .arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| ckpt(format!("missing array {name}")))?;
        Ok(self.arrays.remove(i))
    }
}

fn find_end(bytes: &[u8]) -> Option<usize> {
    if bytes.starts_with(b"end\n") {
        return Some(0);
    }
    bytes.windows(5).position(|w| w == b"\nend\n").map(|p| p + 1)
}

fn mask_string(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn parse_mask(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(ckpt(format!("bad mask {s:?}"))),
        })
        .collect()
}

fn expect_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!(
            "array {name} has {got} entries, network expects {want}"
        )));
    }
    Ok(())
}

fn i8_payload(a: Array) -> Result<Vec<i16>> {
    match a.payload {
        Payload::I8(v) => Ok(v),
        Payload::F64(_) => Err(ckpt(format!("array {} should be i8", a.name))),
    }
}

fn f64_payload(a: Array) -> Result<Vec<f64>> {
    match a.payload {
        Payload::F64(v) => Ok(v),
        Payload::I8(_) => Err(ckpt(format!("array {} should be f64", a.name))),
    }
}

fn spec_lines(w: &mut Writer, spec: &NetworkSpec) {
    w.line("structure", spec.structure());
    w.line("feedback", spec.feedback);
    w.line("t", spec.t);
    w.line("theta", spec.theta);
    w.line("trainable", mask_string(&spec.trainable));
    for (k, v) in spec.options.to_pairs() {
        w.line("option", format!("{k} {v}"));
    }
}

fn read_spec(p: &Parsed) -> Result<NetworkSpec> {
    let feedback: FeedbackMode = p.get("feedback")?.parse()?;
    let mut spec = NetworkSpec::new(p.get("structure")?, feedback, p.parse("t")?, p.parse("theta")?)?;
    spec.trainable = parse_mask(p.get("trainable")?)?;
    let mut options = NetOptions::default();
    for line in p.all("option") {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| ckpt(format!("malformed option {line:?}")))?;
        options.set(k, v)?;
    }
    spec.options = options;
    spec.validate()?;
    Ok(spec)
}

/// Serializes the integer network: topology, options, learning state,
/// 8-bit forward weights and feedback matrices.
pub fn write_engine(net: &BuiltNetwork, w: impl Write) -> Result<()> {
    let mut out = Writer::new("engine");
    spec_lines(&mut out, &net.spec);
    out.line("seed", net.seed);
    out.line("samples_seen", net.samples_seen);
    let lp = &net.learning;
    out.line("eta", format!("{} {}", lp.eta.num, lp.eta.shift));
    out.line("weight_range", format!("{} {}", lp.weight_min, lp.weight_max));
    out.line("rounding", lp.rounding);
    out.line("enabled_outputs", mask_string(&net.enabled_outputs()));
    for (l, layer) in net.layers.iter().enumerate().skip(1) {
        out.line("threshold", format!("{l} {}", layer.threshold()));
        let weights = match &layer.incoming {
            Some(ForwardProjection::Dense(d)) => d.weights.clone(),
            Some(ForwardProjection::Conv(c)) => c.weights.clone(),
            None => continue,
        };
        out.array(format!("layer{l}"), String::new(), Payload::I8(weights));
    }
    for (k, fb) in net.feedback.iter().enumerate() {
        out.array(
            format!("feedback{k}"),
            format!("multiplier {}", fb.matrix.multiplier),
            Payload::I8(fb.matrix.weights.clone()),
        );
    }
    out.finish(w)
}

pub fn read_engine(r: impl Read) -> Result<BuiltNetwork> {
    let mut p = Parsed::read(r, "engine")?;
    let spec = read_spec(&p)?;
    let mut net = BuiltNetwork::build(&spec, p.parse("seed")?)?;
    net.samples_seen = p.parse("samples_seen")?;
    let eta: Vec<&str> = p.get("eta")?.split(' ').collect();
    let range: Vec<&str> = p.get("weight_range")?.split(' ').collect();
    let num = |s: &str| s.parse::<i64>().map_err(|_| ckpt(format!("bad number {s:?}")));
    if eta.len() != 2 || range.len() != 2 {
        return Err(ckpt("malformed learning parameters"));
    }
    net.learning = LearningParams {
        eta: Dyadic::new(num(eta[0])?, num(eta[1])? as u32),
        weight_min: num(range[0])? as i32,
        weight_max: num(range[1])? as i32,
        rounding: p.get("rounding")?.parse()?,
    };
    net.learning.validate()?;
    let mask = parse_mask(p.get("enabled_outputs")?)?;
    expect_len("enabled_outputs", mask.len(), net.num_classes())?;
    net.output_layer_mut().learn_mask = mask;
    for line in p.all("threshold") {
        let (l, th) = line
            .split_once(' ')
            .ok_or_else(|| ckpt("malformed threshold line"))?;
        let (l, th) = (num(l)? as usize, num(th)?);
        let built = net.layers.get(l).map(|x| x.threshold());
        if built != Some(th) {
            return Err(ckpt(format!(
                "layer {l} threshold {th} differs from rebuilt {built:?}"
            )));
        }
    }
    for l in 1..net.layers.len() {
        let name = format!("layer{l}");
        let w = i8_payload(p.take(&name)?)?;
        let dst = match net.layers[l].incoming.as_mut() {
            Some(ForwardProjection::Dense(d)) => &mut d.weights,
            Some(ForwardProjection::Conv(c)) => &mut c.weights,
            None => continue,
        };
        expect_len(&name, w.len(), dst.len())?;
        *dst = w;
    }
    for k in 0..net.feedback.len() {
        let name = format!("feedback{k}");
        let a = p.take(&name)?;
        let mult = a
            .extra
            .strip_prefix("multiplier ")
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| ckpt(format!("array {name} lacks a multiplier")))?;
        let w = i8_payload(a)?;
        let m = &mut net.feedback[k].matrix;
        expect_len(&name, w.len(), m.weights.len())?;
        m.weights = w;
        m.multiplier = mult;
    }
    if let Some(a) = p.arrays.first() {
        return Err(ckpt(format!("unexpected array {}", a.name)));
    }
    Ok(net)
}

pub fn save_engine(net: &BuiltNetwork, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_engine(net, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_engine(path: &Path) -> Result<BuiltNetwork> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_engine(std::io::BufReader::new(f))
}

/// Copies the convolution weights of `source` into every matching conv
/// layer of `net`. Returns how many layers were copied.
pub fn copy_conv_weights(net: &mut BuiltNetwork, source: &BuiltNetwork) -> Result<usize> {
    let mut copied = 0;
    for (dst, src) in net.layers.iter_mut().zip(&source.layers) {
        if let (Some(ForwardProjection::Conv(d)), Some(ForwardProjection::Conv(s))) =
            (dst.incoming.as_mut(), src.incoming.as_ref())
        {
            if (d.input, d.output, d.kernel, d.stride) != (s.input, s.output, s.kernel, s.stride) {
                return Err(Error::Shape(format!(
                    "conv layer {} does not match the source checkpoint",
                    dst.desc.token()
                )));
            }
            d.weights.clone_from(&s.weights);
            copied += 1;
        }
    }
    Ok(copied)
}

/// Serializes the real-valued reference model.
pub fn write_oracle(fp: &FpNetwork, w: impl Write) -> Result<()> {
    let mut out = Writer::new("oracle");
    let descs: Vec<_> = fp.layers.iter().map(|l| l.desc).collect();
    out.line("structure", crate::net::structure_string(&descs));
    out.line("feedback", fp.feedback_mode);
    out.line("t", fp.t);
    out.line("activation", fp.activation);
    out.line("target_rate", fp.target_rate);
    out.line("floor_rate", fp.floor_rate);
    out.line("injection_divisor", fp.injection_divisor);
    for (l, layer) in fp.layers.iter().enumerate() {
        out.line(
            "layer",
            format!("{l} {} {} {}", layer.threshold, layer.bias, layer.trainable as u8),
        );
        let w = match &layer.weights {
            FpWeights::Dense(w) | FpWeights::Conv(w) => w.clone(),
        };
        if l > 0 {
            out.array(format!("layer{l}"), String::new(), Payload::F64(w));
        }
    }
    for (k, fb) in fp.feedback.iter().enumerate() {
        out.array(
            format!("feedback{k}"),
            format!("{} {} {} {}", fb.from_layer, fb.to_layer, fb.n_src, fb.n_dst),
            Payload::F64(fb.b.clone()),
        );
    }
    out.finish(w)
}

pub fn read_oracle(r: impl Read) -> Result<FpNetwork> {
    let mut p = Parsed::read(r, "oracle")?;
    let descs = parse_structure(p.get("structure")?)?;
    let mut layers = Vec::with_capacity(descs.len());
    let layer_lines: Vec<String> = p.all("layer").map(str::to_string).collect();
    if layer_lines.len() != descs.len() {
        return Err(ckpt("layer lines do not match the structure"));
    }
    for (l, desc) in descs.iter().enumerate() {
        let f: Vec<&str> = layer_lines[l].split(' ').collect();
        let bad = || ckpt(format!("malformed layer line {:?}", layer_lines[l]));
        if f.len() != 4 || f[0].parse::<usize>().ok() != Some(l) {
            return Err(bad());
        }
        let threshold: f64 = f[1].parse().map_err(|_| bad())?;
        let bias: f64 = f[2].parse().map_err(|_| bad())?;
        let weights = if l == 0 {
            FpWeights::Dense(Vec::new())
        } else {
            let name = format!("layer{l}");
            let w = f64_payload(p.take(&name)?)?;
            match desc.kind {
                crate::net::LayerKind::Conv { kernel, filters, .. } => {
                    expect_len(&name, w.len(), filters * kernel * kernel * desc.input.channels)?;
                    FpWeights::Conv(w)
                }
                _ => {
                    expect_len(&name, w.len(), desc.input.size() * desc.size())?;
                    FpWeights::Dense(w)
                }
            }
        };
        layers.push(FpLayer {
            desc: *desc,
            threshold,
            bias,
            trainable: f[3] == "1",
            weights,
        });
    }
    let mut feedback = Vec::new();
    while let Ok(a) = p.take(&format!("feedback{}", feedback.len())) {
        let dims: Vec<usize> = a.extra.split(' ').filter_map(|x| x.parse().ok()).collect();
        if dims.len() != 4 {
            return Err(ckpt(format!("array {} lacks its shape", a.name)));
        }
        let name = a.name.clone();
        let b = f64_payload(a)?;
        expect_len(&name, b.len(), dims[2] * dims[3])?;
        feedback.push(FpFeedback {
            from_layer: dims[0],
            to_layer: dims[1],
            n_src: dims[2],
            n_dst: dims[3],
            b,
        });
    }
    if let Some(a) = p.arrays.first() {
        return Err(ckpt(format!("unexpected array {}", a.name)));
    }
    Ok(FpNetwork {
        layers,
        feedback_mode: p.get("feedback")?.parse()?,
        feedback,
        t: p.parse("t")?,
        activation: p.get("activation")?.parse()?,
        target_rate: p.parse("target_rate")?,
        floor_rate: p.parse("floor_rate")?,
        injection_divisor: p.parse("injection_divisor")?,
    })
}

pub fn save_oracle(fp: &FpNetwork, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_oracle(fp, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_oracle(path: &Path) -> Result<FpNetwork> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_oracle(std::io::BufReader::new(f))
}

/// The `kind` line of a checkpoint file, read from the header alone.
pub fn peek_kind(path: &Path) -> Result<String> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(f).lines();
    let mut next = || -> Result<String> {
        match lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(path, e)),
            None => Err(ckpt("truncated header")),
        }
    };
    if next()? != MAGIC {
        return Err(ckpt(format!("{}: not a checkpoint", path.display())));
    }
    next()?
        .strip_prefix("kind ")
        .map(str::to_string)
        .ok_or_else(|| ckpt("missing kind line"))
}
