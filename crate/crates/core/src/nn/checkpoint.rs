//! Self-describing binary checkpoint.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "DSTLCKPT" | version u32
//! metadata:  count u32, then (key str, value str)*
//! vectors:   count u32, then (name str, len u64, f64*)*
//! networks:  count u32, then (name str, spec, n u64, f64*n, has_opt u8, [optimizer])*
//! spec:      input u32, n_hidden u32, widths u32*, output u32, activation u8,
//!            output kind u8, [lo f64*output, hi f64*output when bounded]
//! optimizer: lr, beta1, beta2, eps f64, step u64, skipped u64, m f64*n, v f64*n
//! str:       len u32 then UTF-8 bytes
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Activation, Mlp, NetworkSpec, OptimizerState, OutputActivation};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSTLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NetEntry {
    pub name: String,
    pub net: Mlp,
    pub optimizer: Option<OptimizerState>,
}

/// Named networks plus free-form metadata and auxiliary vectors
/// (normalization statistics and the like).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub nets: Vec<NetEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn push_net(&mut self, name: &str, net: Mlp, optimizer: Option<OptimizerState>) {
        self.nets.push(NetEntry {
            name: name.to_string(),
            net,
            optimizer,
        });
    }

    pub fn net(&self, name: &str) -> Result<&NetEntry> {
        self.nets
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::format("networks", format!("no network named `{name}`")))
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        self.vectors
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::format("vectors", format!("no vector named `{name}`")))
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("metadata", format!("no key `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.vectors.len() as u32);
        for (k, v) in &self.vectors {
            put_str(&mut out, k);
            out.write_u64::<LE>(v.len() as u64).unwrap();
            put_f64s(&mut out, v);
        }
        put_u32(&mut out, self.nets.len() as u32);
        for entry in &self.nets {
            put_str(&mut out, &entry.name);
            put_spec(&mut out, entry.net.spec());
            out.write_u64::<LE>(entry.net.params().len() as u64).unwrap();
            put_f64s(&mut out, entry.net.params());
            match &entry.optimizer {
                None => out.push(0),
                Some(opt) => {
                    out.push(1);
                    put_f64s(&mut out, &[opt.lr, opt.beta1, opt.beta2, opt.eps]);
                    out.write_u64::<LE>(opt.step).unwrap();
                    out.write_u64::<LE>(opt.skipped).unwrap();
                    put_f64s(&mut out, &opt.m);
                    put_f64s(&mut out, &opt.v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::format("magic", "file too short"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not a checkpoint file"));
        }
        let version = get_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..get_u32(&mut r, "metadata.count")? {
            let k = get_str(&mut r, "metadata.key")?;
            let v = get_str(&mut r, "metadata.value")?;
            ck.meta.insert(k, v);
        }
        for _ in 0..get_u32(&mut r, "vectors.count")? {
            let k = get_str(&mut r, "vectors.name")?;
            let n = get_len(&mut r, "vectors.len")?;
            ck.vectors.insert(k, get_f64s(&mut r, n, "vectors.values")?);
        }
        for _ in 0..get_u32(&mut r, "networks.count")? {
            let name = get_str(&mut r, "network.name")?;
            let spec = get_spec(&mut r)?;
            let n = get_len(&mut r, "network.param_count")?;
            if n != spec.param_count() {
                return Err(Error::format(
                    "network.param_count",
                    format!("{n} parameters for a spec needing {}", spec.param_count()),
                ));
            }
            let params = get_f64s(&mut r, n, "network.params")?;
            let net = Mlp::from_params(spec, params).map_err(|e| Error::format("network.params", e.to_string()))?;
            let optimizer = match r.read_u8().map_err(|_| truncated("network.has_optimizer"))? {
                0 => None,
                1 => {
                    let h = get_f64s(&mut r, 4, "optimizer.hyper")?;
                    let step = r.read_u64::<LE>().map_err(|_| truncated("optimizer.step"))?;
                    let skipped = r.read_u64::<LE>().map_err(|_| truncated("optimizer.skipped"))?;
                    let m = get_f64s(&mut r, n, "optimizer.m")?;
                    let v = get_f64s(&mut r, n, "optimizer.v")?;
                    Some(OptimizerState {
                        lr: h[0],
                        beta1: h[1],
                        beta2: h[2],
                        eps: h[3],
                        step,
                        skipped,
                        m,
                        v,
                    })
                }
                other => return Err(Error::format("network.has_optimizer", format!("bad flag {other}"))),
            };
            ck.nets.push(NetEntry { name, net, optimizer });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::format("trailer", "unexpected bytes after last network"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    what: "checkpoint".into(),
                    path: path.to_path_buf(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

fn truncated(field: &str) -> Error {
    Error::format(field, "truncated file")
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.write_u32::<LE>(v).unwrap();
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.write_f64::<LE>(*v).unwrap();
    }
}

fn put_spec(out: &mut Vec<u8>, spec: &NetworkSpec) {
    put_u32(out, spec.input_dim() as u32);
    put_u32(out, spec.hidden().len() as u32);
    for w in spec.hidden() {
        put_u32(out, *w as u32);
    }
    put_u32(out, spec.output_dim() as u32);
    out.push(match spec.activation() {
        Activation::Tanh => 0,
    });
    match spec.output() {
        OutputActivation::Identity => out.push(0),
        OutputActivation::Bounded { lo, hi } => {
            out.push(1);
            put_f64s(out, lo);
            put_f64s(out, hi);
        }
    }
}

fn get_u32(r: &mut Cursor<&[u8]>, field: &str) -> Result<u32> {
    r.read_u32::<LE>().map_err(|_| truncated(field))
}

fn get_len(r: &mut Cursor<&[u8]>, field: &str) -> Result<usize> {
    let n = r.read_u64::<LE>().map_err(|_| truncated(field))?;
    usize::try_from(n).map_err(|_| Error::format(field, format!("length {n} too large")))
}

fn get_str(r: &mut Cursor<&[u8]>, field: &str) -> Result<String> {
    let n = get_u32(r, field)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(truncated(field));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| truncated(field))?;
    String::from_utf8(buf).map_err(|_| Error::format(field, "invalid UTF-8"))
}

fn get_f64s(r: &mut Cursor<&[u8]>, n: usize, field: &str) -> Result<Vec<f64>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining / 8 {
        return Err(truncated(field));
    }
    (0..n).map(|_| r.read_f64::<LE>().map_err(|_| truncated(field))).collect()
}

fn get_spec(r: &mut Cursor<&[u8]>) -> Result<NetworkSpec> {
    let input = get_u32(r, "spec.input_dim")? as usize;
    let n_hidden = get_u32(r, "spec.hidden_count")? as usize;
    if n_hidden > 64 {
        return Err(Error::format("spec.hidden_count", format!("{n_hidden} hidden layers")));
    }
    let hidden = (0..n_hidden)
        .map(|_| get_u32(r, "spec.hidden").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let output = get_u32(r, "spec.output_dim")? as usize;
    match r.read_u8().map_err(|_| truncated("spec.activation"))? {
        0 => {}
        other => return Err(Error::format("spec.activation", format!("unknown activation {other}"))),
    }
    let out_act = match r.read_u8().map_err(|_| truncated("spec.output_activation"))? {
        0 => OutputActivation::Identity,
        1 => OutputActivation::Bounded {
            lo: get_f64s(r, output, "spec.bounds")?,
            hi: get_f64s(r, output, "spec.bounds")?,
        },
        other => return Err(Error::format("spec.output_activation", format!("unknown kind {other}"))),
    };
    NetworkSpec::new(input, &hidden, output, out_act).map_err(|e| Error::format("spec", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Direction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = NetworkSpec::new(4, &[7, 5], 3, OutputActivation::Identity).unwrap();
        let a = Mlp::init(spec, &mut rng, false);
        let bounded = NetworkSpec::new(
            2,
            &[3],
            2,
            OutputActivation::Bounded {
                lo: vec![-1.0, -0.1],
                hi: vec![2.5, 0.3],
            },
        )
        .unwrap();
        let b = Mlp::init(bounded, &mut rng, true);
        let mut opt = OptimizerState::new(a.params().len(), 3e-4);
        let mut pa = a.params().to_vec();
        let g: Vec<f64> = (0..pa.len()).map(|i| (i as f64).sin() * 1e-3).collect();
        opt.step(&mut pa, &g, Direction::Minimize).unwrap();
        let mut ck = Checkpoint::new().with_meta("kind", "test").with_meta("config_hash", "abc");
        ck.vectors.insert("mean".into(), vec![0.1, f64::MIN_POSITIVE, -1e300]);
        ck.push_net("a", Mlp::from_params(a.spec().clone(), pa).unwrap(), Some(opt));
        ck.push_net("b", b, None);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        for (x, y) in back.nets[0].net.params().iter().zip(ck.nets[0].net.params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let missing = Checkpoint::load(&dir.path().join("nope.ckpt")).unwrap_err();
        assert_eq!(missing.code(), "E_MISSING_ARTIFACT");
    }

    #[test]
    fn diagnoses_corruption() {
        let bytes = sample().to_bytes();
        let field = |b: &[u8]| match Checkpoint::from_bytes(b) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert_eq!(field(&bad_magic), "magic");
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert_eq!(field(&bad_version), "version");
        assert_eq!(field(&bytes[..bytes.len() - 1]), "network.has_optimizer");
        assert_eq!(field(&bytes[..bytes.len() - 12]), "network.params");
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(field(&extra), "trailer");
    }
}
