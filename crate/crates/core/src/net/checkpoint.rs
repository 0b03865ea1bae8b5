//! Checkpoint container: a plaintext manifest followed by a little-endian
//! `f32` blob.
//!
//! ```text
//! dvqa-mini-checkpoint 1
//! patch 1 16 16
//! layer conv1 conv 2 32 k=3 s=1 p=1 act=leaky down=1
//! layer score dense 64 1 act=none down=0
//! meta epoch 12
//! tensor conv1.weight conv 32,2,3,3 0
//! tensor conv1.bias conv 32 2304
//! ...
//! checksum sha256 <hex of everything above this line plus the blob>
//! data <blob bytes>
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{hex, Activation, LayerKind, LayerParams, LayerSpec, NetworkSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::tensor::Tensor;

const MAGIC: &str = "dvqa-mini-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParameterSet<f32>,
    /// Free-form provenance such as the epoch counter (`epoch`) or role.
    pub meta: BTreeMap<String, String>,
    /// Non-parameter tensors, e.g. optimizer moments.
    pub extra: Vec<(String, Tensor<f32>)>,
}

fn layer_line(l: &LayerSpec) -> String {
    match l.kind {
        LayerKind::Conv2d {
            kernel,
            stride,
            padding,
        } => format!(
            "layer {} conv {} {} k={kernel} s={stride} p={padding} act={} down={}",
            l.name,
            l.in_channels,
            l.out_channels,
            l.activation.name(),
            u8::from(l.downsample)
        ),
        LayerKind::Dense => format!(
            "layer {} dense {} {} act={} down={}",
            l.name,
            l.in_channels,
            l.out_channels,
            l.activation.name(),
            u8::from(l.downsample)
        ),
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::data(format!("checkpoint: {}", msg.into()))
}

fn parse_num<N: std::str::FromStr>(s: &str, what: &str) -> Result<N> {
    s.parse()
        .map_err(|_| bad(format!("bad {what} value {s:?}")))
}

fn keyed<'a>(token: &'a str, key: &str) -> Result<&'a str> {
    token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| bad(format!("expected {key}=..., found {token:?}")))
}

fn parse_layer(tokens: &[&str]) -> Result<LayerSpec> {
    if tokens.len() < 4 {
        return Err(bad("short layer line"));
    }
    let name = tokens[0].to_string();
    let in_channels = parse_num(tokens[2], "in_channels")?;
    let out_channels = parse_num(tokens[3], "out_channels")?;
    let (kind, rest) = match tokens[1] {
        "conv" => {
            if tokens.len() != 9 {
                return Err(bad(format!("conv layer {name} needs 9 fields")));
            }
            (
                LayerKind::Conv2d {
                    kernel: parse_num(keyed(tokens[4], "k")?, "kernel")?,
                    stride: parse_num(keyed(tokens[5], "s")?, "stride")?,
                    padding: parse_num(keyed(tokens[6], "p")?, "padding")?,
                },
                &tokens[7..],
            )
        }
        "dense" => {
            if tokens.len() != 6 {
                return Err(bad(format!("dense layer {name} needs 6 fields")));
            }
            (LayerKind::Dense, &tokens[4..])
        }
        other => return Err(bad(format!("unknown layer kind {other:?}"))),
    };
    Ok(LayerSpec {
        name,
        kind,
        in_channels,
        out_channels,
        activation: Activation::parse(keyed(rest[0], "act")?)?,
        downsample: keyed(rest[1], "down")? == "1",
    })
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: ParameterSet<f32>) -> Self {
        Checkpoint {
            spec,
            params,
            meta: BTreeMap::new(),
            extra: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let problems = self.params.check_against(&self.spec);
        if !problems.is_empty() {
            return Err(Error::Structure(problems.join("; ")));
        }
        let mut head = format!("{MAGIC} {VERSION}\n");
        let g = self.spec.patch;
        head += &format!("patch {} {} {}\n", g.channels, g.height, g.width);
        for l in &self.spec.layers {
            head += &layer_line(l);
            head.push('\n');
        }
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("meta entry {k:?} cannot be serialized")));
            }
            head += &format!("meta {k} {v}\n");
        }
        let mut blob = Vec::new();
        let mut push = |head: &mut String, name: &str, kind: &str, t: &Tensor<f32>| {
            let shape = t
                .shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            *head += &format!("tensor {name} {kind} {shape} {}\n", blob.len());
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (l, p) in self.spec.layers.iter().zip(self.params.layers()) {
            let kind = if l.is_conv() { "conv" } else { "dense" };
            push(&mut head, &format!("{}.weight", l.name), kind, &p.weight);
            push(&mut head, &format!("{}.bias", l.name), kind, &p.bias);
        }
        for (name, t) in &self.extra {
            if name.contains(char::is_whitespace) {
                return Err(bad(format!("extra tensor name {name:?} has whitespace")));
            }
            push(&mut head, name, "extra", t);
        }
        let mut h = Sha256::new();
        h.update(head.as_bytes());
        h.update(&blob);
        head += &format!("checksum sha256 {}\n", hex(&h.finalize()));
        head += &format!("data {}\n", blob.len());
        let mut out = head.into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = Vec::new();
        let mut pos = 0;
        let blob_len = loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("manifest is not utf-8"))?;
            let line_start = pos;
            pos += end + 1;
            if let Some(n) = line.strip_prefix("data ") {
                break (parse_num::<usize>(n, "data length")?, line_start);
            }
            lines.push((line, line_start));
            if lines.len() > 100_000 {
                return Err(bad("manifest too long"));
            }
        };
        let (blob_len, data_line_start) = blob_len;
        let blob = &bytes[pos..];
        if blob.len() < blob_len {
            return Err(bad(format!(
                "truncated blob: {} of {blob_len} bytes",
                blob.len()
            )));
        }
        if blob.len() > blob_len {
            return Err(bad("trailing bytes after blob"));
        }

        let (first, _) = lines.first().ok_or_else(|| bad("empty manifest"))?;
        match first.split_once(' ') {
            Some((MAGIC, v)) if v == VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(bad(format!("unsupported version {v}"))),
            _ => return Err(bad("not a checkpoint file")),
        }
        let (checksum_line, checksum_start) = lines
            .pop()
            .filter(|(l, _)| l.starts_with("checksum "))
            .ok_or_else(|| bad("missing checksum line"))?;
        debug_assert!(checksum_start < data_line_start);
        let expected = checksum_line
            .strip_prefix("checksum sha256 ")
            .ok_or_else(|| bad("unsupported checksum"))?;
        let mut h = Sha256::new();
        h.update(&bytes[..checksum_start]);
        h.update(blob);
        if hex(&h.finalize()) != expected {
            return Err(bad("checksum mismatch"));
        }

        let mut patch = None;
        let mut layers = Vec::new();
        let mut meta = BTreeMap::new();
        let mut tensors: Vec<(String, Vec<usize>, usize)> = Vec::new();
        for (line, _) in &lines[1..] {
            let tokens: Vec<&str> = line.split(' ').collect();
            match tokens[0] {
                "patch" if tokens.len() == 4 => {
                    patch = Some(Geometry::new(
                        parse_num(tokens[1], "channels")?,
                        parse_num(tokens[2], "height")?,
                        parse_num(tokens[3], "width")?,
                    ));
                }
                "layer" => layers.push(parse_layer(&tokens[1..])?),
                "meta" if tokens.len() >= 2 => {
                    let value = line
                        .splitn(3, ' ')
                        .nth(2)
                        .unwrap_or_default()
                        .to_string();
                    meta.insert(tokens[1].to_string(), value);
                }
                "tensor" if tokens.len() == 5 => {
                    let shape = tokens[3]
                        .split(',')
                        .map(|s| parse_num(s, "extent"))
                        .collect::<Result<Vec<usize>>>()?;
                    tensors.push((tokens[1].to_string(), shape, parse_num(tokens[4], "offset")?));
                }
                _ => return Err(bad(format!("unrecognized manifest line {line:?}"))),
            }
        }
        let patch = patch.ok_or_else(|| bad("missing patch line"))?;
        let spec = NetworkSpec { patch, layers };

        let read = |shape: &[usize], offset: usize| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(n * 4)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| bad("tensor extends past the blob"))?;
            let data = blob[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut by_name: BTreeMap<&str, (&[usize], usize)> = BTreeMap::new();
        for (name, shape, offset) in &tensors {
            if by_name.insert(name, (shape, *offset)).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        let mut param_layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let get = |suffix: &str| -> Result<Tensor<f32>> {
                let key = format!("{}.{suffix}", l.name);
                let (shape, offset) = by_name
                    .get(key.as_str())
                    .ok_or_else(|| bad(format!("missing tensor {key}")))?;
                read(shape, *offset)
            };
            param_layers.push(LayerParams {
                name: l.name.clone(),
                weight: get("weight")?,
                bias: get("bias")?,
            });
        }
        let params = ParameterSet::new(param_layers);
        let problems = params.check_against(&spec);
        if !problems.is_empty() {
            return Err(Error::Structure(problems.join("; ")));
        }
        let param_names: Vec<String> = spec
            .layers
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect();
        let extra = tensors
            .iter()
            .filter(|(name, _, _)| !param_names.contains(name))
            .map(|(name, shape, offset)| Ok((name.clone(), read(shape, *offset)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            spec,
            params,
            meta,
            extra,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<f32>> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
