//! Model checkpoints.
//!
//! ```text
//! "TVQA" u16 version
//! u32 len, config as key=value text
//! u32 count, count * (u32 len, token bytes)        vocabulary
//! u32 count, count * tensor
//! tensor := u32 name_len, name, u32 ndim, ndim * u32 dim, f64 payload
//! ```
//!
//! Tensors are the parameter blocks by name, `bn.running_mean`,
//! `bn.running_var`, and optionally `adam.step`, `adam.m.<block>` and
//! `adam.v.<block>`.

use std::collections::HashMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

const MAGIC: &[u8; 4] = b"TVQA";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend_from_slice(b);
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_bytes(out, name.as_bytes())?;
    put_u32(out, t.ndim())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(model: &Model, adam: Option<&AdamState>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor)> = model.params.blocks().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let running = &model.params.bn_running;
    tensors.push(("bn.running_mean".into(), Tensor::vector(running.mean.clone())));
    tensors.push(("bn.running_var".into(), Tensor::vector(running.var.clone())));
    if let Some(a) = adam {
        tensors.push(("adam.step".into(), Tensor::scalar(a.step as f64)));
        let names: Vec<String> = model.params.blocks().into_iter().map(|(n, _)| n).collect();
        if a.first_moment.len() != names.len() {
            return Err(Error::Shape(
                "optimizer state does not match the parameter blocks".into(),
            ));
        }
        for (n, m) in names.iter().zip(&a.first_moment) {
            tensors.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&a.second_moment) {
            tensors.push((format!("adam.v.{n}"), v.clone()));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, model.config.to_kv().as_bytes())?;
    put_u32(&mut out, model.vocab.tokens().len())?;
    for t in model.vocab.tokens() {
        put_bytes(&mut out, t.as_bytes())?;
    }
    put_u32(&mut out, tensors.len())?;
    for (n, t) in &tensors {
        put_tensor(&mut out, n, t)?;
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, adam: Option<&AdamState>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, adam)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.text()?;
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok((
            name.clone(),
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?,
        ))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = RunConfig::parse(&r.text()?)?;
    let n_tokens = r.u32()?;
    let tokens = (0..n_tokens).map(|_| r.text()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| Error::Format(e.to_string()))?;
    let n_tensors = r.u32()?;
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(n_tensors.min(1 << 12));
    for _ in 0..n_tensors {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - r.pos
        )));
    }

    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
    };
    let vision = take("vision.weight")?;
    let raw_dim = vision.shape()[0];
    let mut params = ModelParams::zeros(&config, vocab.rows(), raw_dim);
    for (name, slot) in params.blocks_mut() {
        let t = if name == "vision.weight" {
            vision.clone()
        } else {
            take(&name)?
        };
        if t.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name} is {:?}, configuration implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    let h = config.hidden;
    for (name, dst) in [
        ("bn.running_mean", &mut params.bn_running.mean),
        ("bn.running_var", &mut params.bn_running.var),
    ] {
        let t = take(name)?;
        if t.shape() != [h] {
            return Err(Error::Shape(format!("{name} is {:?}, expected [{h}]", t.shape())));
        }
        *dst = t.into_data();
    }
    let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
    let adam = match take("adam.step") {
        Ok(step) => {
            let mut a = AdamState::new(
                params.blocks().into_iter().map(|(_, t)| t),
                config.beta1,
                config.beta2,
                config.adam_eps,
            );
            a.step = step.item() as u64;
            for (i, n) in names.iter().enumerate() {
                a.first_moment[i] = take(&format!("adam.m.{n}"))?;
                a.second_moment[i] = take(&format!("adam.v.{n}"))?;
            }
            Some(a)
        }
        Err(_) => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(Checkpoint {
        model: Model::new(config, vocab, params)?,
        adam,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn model() -> Model {
        let cfg = RunConfig {
            d_word: 3,
            d_img: 2,
            hidden: 4,
            l_max: 2,
            data: Some("x.jsonl".into()),
            ..RunConfig::synthetic()
        };
        let vocab = Vocabulary::from_tokens(["a", "b", "ü"]).unwrap();
        let mut p = ModelParams::init(&cfg, vocab.rows(), 5, None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        p.bn_running.mean = vec![0.1, 0.2, -0.3, 1.0 / 3.0];
        Model::new(cfg, vocab, p).unwrap()
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let m = model();
        let mut adam = AdamState::new(m.params.blocks().into_iter().map(|(_, t)| t), 0.9, 0.99, 1e-8);
        adam.step = 17;
        adam.first_moment[3] = adam.first_moment[3].map(|_| 0.25);
        adam.second_moment[0] = adam.second_moment[0].map(|_| std::f64::consts::E);
        let ck = decode_checkpoint(&encode_checkpoint(&m, Some(&adam)).unwrap()).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.adam.as_ref(), Some(&adam));
        assert_eq!(
            encode_checkpoint(&ck.model, ck.adam.as_ref()).unwrap(),
            encode_checkpoint(&m, Some(&adam)).unwrap()
        );
    }

    #[test]
    fn round_trip_without_optimizer_state() {
        let m = model();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(f.path(), &m, None).unwrap();
        let ck = load_checkpoint(f.path()).unwrap();
        assert_eq!(ck.model, m);
        assert!(ck.adam.is_none());
    }

    #[test]
    fn damage_is_detected() {
        let bytes = encode_checkpoint(&model(), None).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint(&longer).is_err());
    }
}
