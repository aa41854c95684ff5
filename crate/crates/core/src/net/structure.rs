//! Layer-structure strings such as `28x28x1-5x5k16c2s-3x3k8c2s-100d-10d`.
//!
//! Tokens are separated by `-`:
//! * `WxHxC` – input of width `W`, height `H`, `C` channels (first token only)
//! * `KxKkFcSs` – convolution with a `K`×`K` kernel, `F` filters, stride `S`
//! * `Nd` – fully connected layer of `N` units
//!
//! Convolutions use valid (no) padding.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Shape {
            width,
            height,
            channels,
        }
    }

    pub fn flat(n: usize) -> Self {
        Shape::new(1, 1, n)
    }

    pub fn size(&self) -> usize {
        self.width * self.height * self.channels
    }

    /// Flat index in height-width-channel order.
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv {
        kernel: usize,
        filters: usize,
        stride: usize,
    },
    Dense {
        units: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDesc {
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
}

impl LayerDesc {
    pub fn size(&self) -> usize {
        self.output.size()
    }

    /// Synapses arriving at each output neuron (0 for the input layer).
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Input => 0,
            LayerKind::Conv { kernel, .. } => kernel * kernel * self.input.channels,
            LayerKind::Dense { .. } => self.input.size(),
        }
    }

    pub fn token(&self) -> String {
        match self.kind {
            LayerKind::Input => self.output.to_string(),
            LayerKind::Conv {
                kernel,
                filters,
                stride,
            } => format!("{kernel}x{kernel}k{filters}c{stride}s"),
            LayerKind::Dense { units } => format!("{units}d"),
        }
    }
}

fn num(tok: &str, s: &str) -> Result<usize> {
    let n: usize = s
        .parse()
        .map_err(|_| Error::Structure(format!("bad number {s:?} in token {tok:?}")))?;
    if n == 0 {
        return Err(Error::Structure(format!("zero size in token {tok:?}")));
    }
    Ok(n)
}

fn parse_input(tok: &str) -> Result<Shape> {
    let parts: Vec<&str> = tok.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Structure(format!(
            "first token must be an input WxHxC, got {tok:?}"
        )));
    }
    Ok(Shape::new(
        num(tok, parts[0])?,
        num(tok, parts[1])?,
        num(tok, parts[2])?,
    ))
}

fn parse_conv(tok: &str) -> Result<(usize, usize, usize)> {
    // KxKkFcSs
    let body = tok
        .strip_suffix('s')
        .ok_or_else(|| Error::Structure(format!("malformed token {tok:?}")))?;
    let (kk, rest) = body
        .split_once('k')
        .ok_or_else(|| Error::Structure(format!("malformed token {tok:?}")))?;
    let (f, s) = rest
        .split_once('c')
        .ok_or_else(|| Error::Structure(format!("malformed token {tok:?}")))?;
    let (k1, k2) = kk
        .split_once('x')
        .ok_or_else(|| Error::Structure(format!("malformed kernel in {tok:?}")))?;
    let (k1, k2) = (num(tok, k1)?, num(tok, k2)?);
    if k1 != k2 {
        return Err(Error::Structure(format!("non-square kernel in {tok:?}")));
    }
    Ok((k1, num(tok, f)?, num(tok, s)?))
}

pub fn parse_structure(spec: &str) -> Result<Vec<LayerDesc>> {
    let tokens: Vec<&str> = spec.trim().split('-').map(str::trim).collect();
    if tokens.len() < 2 {
        return Err(Error::Structure(format!(
            "need an input and at least one layer, got {spec:?}"
        )));
    }
    let input = parse_input(tokens[0])?;
    let mut layers = vec![LayerDesc {
        kind: LayerKind::Input,
        input,
        output: input,
    }];
    let mut cur = input;
    let mut seen_dense = false;
    for &tok in &tokens[1..] {
        let desc = if let Some(units) = tok.strip_suffix('d') {
            seen_dense = true;
            let units = num(tok, units)?;
            LayerDesc {
                kind: LayerKind::Dense { units },
                input: cur,
                output: Shape::flat(units),
            }
        } else if tok.ends_with('s') {
            if seen_dense {
                return Err(Error::Structure(format!(
                    "convolution {tok:?} cannot follow a dense layer"
                )));
            }
            let (kernel, filters, stride) = parse_conv(tok)?;
            if kernel > cur.width || kernel > cur.height {
                return Err(Error::Structure(format!(
                    "kernel {kernel} larger than input {cur} at {tok:?}"
                )));
            }
            let out = Shape::new(
                (cur.width - kernel) / stride + 1,
                (cur.height - kernel) / stride + 1,
                filters,
            );
            LayerDesc {
                kind: LayerKind::Conv {
                    kernel,
                    filters,
                    stride,
                },
                input: cur,
                output: out,
            }
        } else {
            return Err(Error::Structure(format!("malformed token {tok:?}")));
        };
        cur = desc.output;
        layers.push(desc);
    }
    Ok(layers)
}

pub fn structure_string(layers: &[LayerDesc]) -> String {
    layers.iter().map(LayerDesc::token).collect::<Vec<_>>().join("-")
}
