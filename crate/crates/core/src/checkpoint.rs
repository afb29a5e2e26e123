//! Model checkpoints.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "TNET"  u32 version
//! u32 in_channels  u32 n_layers
//!   n_layers × { u32 out_channels  u32 in_channels  u32 kernel_size
//!                u8 padding (0 same, 1 valid)  u8 relu  u8 pool_after }
//! u32 n_heads  u32 num_classes  u32 feature_dim
//!   n_heads × { u16 name_len  name bytes (UTF-8 transform name) }
//! u8 head_combine (0 logits, 1 probabilities)
//! f64 payload: per layer kernels then bias, per head weight then bias
//! ```
//!
//! The JSON export carries the same descriptor with base64 payloads.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dihedral::{DihedralElement, TransformationSet};
use crate::error::{format_err, Result};
use crate::model::{ConvLayer, Head, HeadCombine, ModelParams, TransNetModel};
use crate::tensor::{Padding, Tensor};

pub const MAGIC: &[u8; 4] = b"TNET";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &TransNetModel) -> Vec<u8> {
    let p = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.in_channels() as u32).to_le_bytes());
    out.extend_from_slice(&(p.conv_layers().len() as u32).to_le_bytes());
    for l in p.conv_layers() {
        for v in [l.out_channels(), l.in_channels(), l.kernel_size()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(match l.padding {
            Padding::Same => 0,
            Padding::Valid => 1,
        });
        out.push(l.relu as u8);
        out.push(l.pool_after as u8);
    }
    for v in [p.num_heads(), p.num_classes(), p.feature_dim()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in model.transforms().elements() {
        let name = t.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
    }
    out.push(match model.combine {
        HeadCombine::Logits => 0,
        HeadCombine::Probabilities => 1,
    });
    for t in p.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err!("checkpoint truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format_err!("bad flag byte {}", v)),
        }
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| format_err!("tensor too large"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| format_err!("{}", e))
    }
}

const MAX_EXTENT: usize = 1 << 20;

fn extent(v: usize, what: &str) -> Result<usize> {
    if v == 0 || v > MAX_EXTENT {
        return Err(format_err!("implausible {} {}", what, v));
    }
    Ok(v)
}

pub fn from_bytes(buf: &[u8]) -> Result<TransNetModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err!("not a TNET checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format_err!("unsupported checkpoint version {}", version));
    }
    let in_channels = extent(r.u32()?, "input channels")?;
    let n_layers = extent(r.u32()?, "layer count")?;
    let mut descs = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let out_c = extent(r.u32()?, "channel count")?;
        let in_c = extent(r.u32()?, "channel count")?;
        let k = extent(r.u32()?, "kernel size")?;
        let padding = match r.u8()? {
            0 => Padding::Same,
            1 => Padding::Valid,
            v => return Err(format_err!("bad padding code {}", v)),
        };
        descs.push((out_c, in_c, k, padding, r.flag()?, r.flag()?));
    }
    if descs[0].1 != in_channels {
        return Err(format_err!("first layer input channels disagree with header"));
    }
    let n_heads = extent(r.u32()?, "head count")?;
    let classes = extent(r.u32()?, "class count")?;
    let feat = extent(r.u32()?, "feature dim")?;
    let mut transforms = Vec::with_capacity(n_heads.min(1024));
    for _ in 0..n_heads {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| format_err!("transform name is not UTF-8"))?;
        transforms.push(name.parse::<DihedralElement>().map_err(|e| format_err!("{}", e))?);
    }
    let combine = match r.u8()? {
        0 => HeadCombine::Logits,
        1 => HeadCombine::Probabilities,
        v => return Err(format_err!("bad head combine code {}", v)),
    };
    let mut layers = Vec::with_capacity(descs.len());
    for (out_c, in_c, k, padding, relu, pool_after) in descs {
        let kernels = r.tensor(vec![out_c, in_c, k, k])?;
        let bias = r.tensor(vec![out_c])?;
        layers.push(ConvLayer {
            kernels,
            bias,
            padding,
            relu,
            pool_after,
        });
    }
    let mut heads = Vec::with_capacity(n_heads.min(1024));
    for _ in 0..n_heads {
        let weight = r.tensor(vec![classes, feat])?;
        let bias = r.tensor(vec![classes])?;
        heads.push(Head { weight, bias });
    }
    if r.pos != buf.len() {
        return Err(format_err!("{} trailing bytes after payload", buf.len() - r.pos));
    }
    let params = ModelParams::new(layers, heads).map_err(|e| format_err!("{}", e))?;
    let ts = TransformationSet::new(transforms).map_err(|e| format_err!("{}", e))?;
    let mut model = TransNetModel::new(params, ts).map_err(|e| format_err!("{}", e))?;
    model.combine = combine;
    Ok(model)
}

pub fn save(model: &TransNetModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

/// Loads a binary checkpoint, or a JSON export when the file starts with `{`.
pub fn load(path: &Path) -> Result<TransNetModel> {
    let buf = fs::read(path)?;
    if buf.first() == Some(&b'{') {
        let s = std::str::from_utf8(&buf).map_err(|_| format_err!("JSON checkpoint is not UTF-8"))?;
        from_json(s)
    } else {
        from_bytes(&buf)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonTensor {
    shape: Vec<usize>,
    /// base64 of little-endian f64 values
    data: String,
}

#[derive(Serialize, Deserialize)]
struct JsonLayer {
    padding: String,
    relu: bool,
    pool_after: bool,
    kernels: JsonTensor,
    bias: JsonTensor,
}

#[derive(Serialize, Deserialize)]
struct JsonHead {
    transform: DihedralElement,
    weight: JsonTensor,
    bias: JsonTensor,
}

#[derive(Serialize, Deserialize)]
struct JsonModel {
    format: String,
    version: u32,
    head_combine: String,
    layers: Vec<JsonLayer>,
    heads: Vec<JsonHead>,
}

fn enc(t: &Tensor) -> JsonTensor {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    JsonTensor {
        shape: t.shape().to_vec(),
        data: B64.encode(bytes),
    }
}

fn dec(t: &JsonTensor) -> Result<Tensor> {
    let bytes = B64.decode(&t.data).map_err(|e| format_err!("bad base64 payload: {}", e))?;
    if bytes.len() % 8 != 0 {
        return Err(format_err!("payload length {} is not a multiple of 8", bytes.len()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(t.shape.clone(), data).map_err(|e| format_err!("{}", e))
}

pub fn to_json(model: &TransNetModel) -> Result<String> {
    let p = model.params();
    let jm = JsonModel {
        format: "tnet-json".into(),
        version: VERSION,
        head_combine: match model.combine {
            HeadCombine::Logits => "logits".into(),
            HeadCombine::Probabilities => "probabilities".into(),
        },
        layers: p
            .conv_layers()
            .iter()
            .map(|l| JsonLayer {
                padding: match l.padding {
                    Padding::Same => "same".into(),
                    Padding::Valid => "valid".into(),
                },
                relu: l.relu,
                pool_after: l.pool_after,
                kernels: enc(&l.kernels),
                bias: enc(&l.bias),
            })
            .collect(),
        heads: p
            .heads()
            .iter()
            .zip(model.transforms().elements())
            .map(|(h, &t)| JsonHead {
                transform: t,
                weight: enc(&h.weight),
                bias: enc(&h.bias),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&jm)?)
}

pub fn from_json(s: &str) -> Result<TransNetModel> {
    let jm: JsonModel = serde_json::from_str(s).map_err(|e| format_err!("bad JSON checkpoint: {}", e))?;
    if jm.format != "tnet-json" || jm.version != VERSION {
        return Err(format_err!("unsupported JSON checkpoint {} v{}", jm.format, jm.version));
    }
    let layers = jm
        .layers
        .iter()
        .map(|l| {
            Ok(ConvLayer {
                kernels: dec(&l.kernels)?,
                bias: dec(&l.bias)?,
                padding: match l.padding.as_str() {
                    "same" => Padding::Same,
                    "valid" => Padding::Valid,
                    other => return Err(format_err!("bad padding {:?}", other)),
                },
                relu: l.relu,
                pool_after: l.pool_after,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let heads = jm
        .heads
        .iter()
        .map(|h| {
            Ok(Head {
                weight: dec(&h.weight)?,
                bias: dec(&h.bias)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let transforms = jm.heads.iter().map(|h| h.transform).collect();
    let params = ModelParams::new(layers, heads).map_err(|e| format_err!("{}", e))?;
    let mut model = TransNetModel::new(params, TransformationSet::new(transforms)?)
        .map_err(|e| format_err!("{}", e))?;
    model.combine = jm.head_combine.parse().map_err(|e| format_err!("{}", e))?;
    Ok(model)
}

pub fn save_json(model: &TransNetModel, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> TransNetModel {
        let arch = Architecture {
            in_channels: 3,
            input_size: 8,
            layers: vec![
                LayerSpec::same(4, 3, true),
                LayerSpec {
                    out_channels: 5,
                    kernel_size: 1,
                    padding: Padding::Valid,
                    relu: false,
                    pool_after: false,
                },
            ],
            num_classes: 3,
        };
        let p = arch.init_params(2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ts = TransformationSet::parse_list("r0,mr3").unwrap();
        let mut m = TransNetModel::new(p, ts).unwrap();
        m.combine = HeadCombine::Probabilities;
        m
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let m = sample_model();
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..4], b"TNET");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = sample_model();
        assert_eq!(from_json(&to_json(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = to_bytes(&sample_model());
        for bad in [
            &bytes[..bytes.len() - 1],
            &bytes[..10],
            b"NOPE\x01\x00\x00\x00".as_slice(),
        ] {
            assert!(matches!(from_bytes(bad), Err(crate::Error::Format(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(crate::Error::Format(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(crate::Error::Format(_))));
        assert!(from_json("{\"format\": 1}").is_err());
    }

    #[test]
    fn file_load_detects_json() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_model();
        save(&m, &dir.path().join("a.tnet")).unwrap();
        save_json(&m, &dir.path().join("a.json")).unwrap();
        assert_eq!(load(&dir.path().join("a.tnet")).unwrap(), m);
        assert_eq!(load(&dir.path().join("a.json")).unwrap(), m);
    }
}
