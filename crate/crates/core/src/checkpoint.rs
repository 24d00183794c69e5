//! Binary model checkpoints.
//!
//! Layout (little-endian): `"PSDM"`, `u32` version, then one record per named
//! parameter until end of file: `u32` name length, UTF-8 name, `u32` rank,
//! `rank × u64` dims, `f64` payload. The tap index travels as the rank-0
//! record `meta.tap_index`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{PsdError, Result};
use crate::model::{ConvBlock, CrmHead, EmbeddingNet, HeadNet, ModelBundle};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSDM";
pub const VERSION: u32 = 1;
const TAP_KEY: &str = "meta.tap_index";

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode(bundle: &ModelBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    for (name, t) in bundle.named_params() {
        put_record(&mut out, &name, t);
    }
    put_record(&mut out, TAP_KEY, &Tensor::scalar(bundle.embedding.tap_index as f64));
    out
}

pub fn save(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(bundle))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
    decode(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PsdError::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(PsdError::format(0, format!("bad magic {magic:?}, expected \"PSDM\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(PsdError::format(4, format!("unsupported checkpoint version {version}")));
    }
    let mut params = BTreeMap::new();
    while r.pos < buf.len() {
        let start = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| PsdError::format(start + 4, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| PsdError::format(start, format!("dims {dims:?} of `{name}` overflow")))?;
        let payload = r.take(numel * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data)?;
        if params.insert(name.clone(), t).is_some() {
            return Err(PsdError::format(start, format!("duplicate parameter `{name}`")));
        }
    }
    assemble(params, buf.len() as u64)
}

fn assemble(mut params: BTreeMap<String, Tensor>, end: u64) -> Result<ModelBundle> {
    let mut grab = |name: &str| {
        params
            .remove(name)
            .map(Tensor::with_grad)
            .ok_or_else(|| PsdError::format(end, format!("missing parameter `{name}`")))
    };
    let tap = grab(TAP_KEY)?.item();
    let mut blocks = Vec::new();
    while let Ok(weight) = grab(&format!("embed.{}.weight", blocks.len())) {
        let bias = grab(&format!("embed.{}.bias", blocks.len()))?;
        blocks.push(ConvBlock { weight, bias });
    }
    let teacher = HeadNet {
        weight: grab("teacher.weight")?,
        bias: grab("teacher.bias")?,
    };
    let student = match grab("student.weight") {
        Ok(weight) => Some(HeadNet {
            weight,
            bias: grab("student.bias")?,
        }),
        Err(_) => None,
    };
    let crm = CrmHead {
        theta: grab("crm.theta")?,
    };
    if let Some(extra) = params.keys().next() {
        return Err(PsdError::format(end, format!("unexpected parameter `{extra}`")));
    }
    if tap.fract() != 0.0 || tap < 1.0 || tap as usize > blocks.len() {
        return Err(PsdError::format(end, format!("invalid tap index {tap}")));
    }
    let bundle = ModelBundle {
        embedding: EmbeddingNet {
            blocks,
            tap_index: tap as usize,
        },
        teacher,
        student,
        crm,
    };
    check_shapes(&bundle).map_err(|e| PsdError::format(end, e.to_string()))?;
    Ok(bundle)
}

fn check_shapes(b: &ModelBundle) -> Result<()> {
    let mut in_c = crate::model::IN_CHANNELS;
    for (i, blk) in b.embedding.blocks.iter().enumerate() {
        let s = blk.weight.shape();
        if s.len() != 4 || s[1] != in_c || blk.bias.shape() != [s[0]] {
            return Err(PsdError::shape(format!("block {i} has inconsistent shapes")));
        }
        in_c = s[0];
    }
    let c = b.teacher.weight.shape().get(1).copied().unwrap_or(0);
    for h in [Some(&b.teacher), b.student.as_ref()].into_iter().flatten() {
        if h.weight.shape() != [in_c, c] || h.bias.shape() != [c] {
            return Err(PsdError::shape("head shapes do not match the embedding"));
        }
    }
    if b.crm.theta.shape() != [b.embedding.tap_channels(), c] {
        return Err(PsdError::shape("Θ shape does not match the tapped block"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_bitwise() {
        for share in [false, true] {
            let cfg = ModelConfig {
                share_heads: share,
                tap_index: 2,
                ..ModelConfig::default()
            };
            let b = ModelBundle::init(&cfg, 11).unwrap();
            let back = decode(&encode(&b)).unwrap();
            assert_eq!(back, b);
            assert_eq!(encode(&back), encode(&b));
        }
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let b = ModelBundle::init(&ModelConfig::default(), 1).unwrap();
        let bytes = encode(&b);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        match decode(&bad) {
            Err(PsdError::Format { offset: 0, message }) => assert!(message.contains("PSDM")),
            other => panic!("unexpected {other:?}"),
        }

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(PsdError::Format { offset: 4, .. })));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut), Err(PsdError::Format { .. })));
        assert!(matches!(decode(&bytes[..2]), Err(PsdError::Format { offset: 0, .. })));
    }
}
