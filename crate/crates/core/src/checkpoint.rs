//! Binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GLWN" | version u8 | float width u8 | header length u32 | header (TOML)
//! params:   count u32, then per tensor: ndim u8, dims u32 x ndim, values
//! buffers:  same encoding (1x1 conv permutations and signs)
//! actnorm:  count u32, one byte per layer (initialized flag)
//! adam:     step u64, first moments, second moments (tensor lists)
//! step u64 | rng state (56 bytes)
//! ```
//!
//! Values are stored at the build's float width so that resuming continues
//! the exact trajectory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{FlowConfig, Glow};
use crate::objective::FactorSpec;
use crate::optim::Adam;
use crate::rng::{Rng, RNG_STATE_BYTES};
use crate::tensor::{Float, Tensor, FLOAT_BYTES};
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"GLWN";
pub const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    flow: FlowConfig,
    factors: FactorSpec,
    train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub spec: FactorSpec,
    pub model: Glow,
    pub adam: Adam,
    pub step: u64,
    pub rng: Rng,
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[&Tensor]) {
    out.extend((tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let ndim = self.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| self.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
            let raw = self.take(
                len.checked_mul(FLOAT_BYTES)
                    .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?,
            )?;
            let data = raw
                .chunks_exact(FLOAT_BYTES)
                .map(|c| Float::from_le_bytes(c.try_into().expect("chunk width")))
                .collect();
            out.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        Ok(out)
    }
}

fn assign(dst: Vec<&mut Tensor>, src: Vec<Tensor>, what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "{} {what} tensors stored, configuration needs {}",
            src.len(),
            dst.len()
        )));
    }
    for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.shape() != s.shape() {
            return Err(Error::Checkpoint(format!(
                "{what} tensor {i}: stored shape {:?}, configuration needs {:?}",
                s.shape(),
                d.shape()
            )));
        }
        *d = s;
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            train: t.config().clone(),
            spec: t.spec().clone(),
            model: t.model().clone(),
            adam: t.adam().clone(),
            step: t.step(),
            rng: t.rng().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = toml::to_string(&Header {
            flow: self.model.config().clone(),
            factors: self.spec.clone(),
            train: self.train.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.push(VERSION);
        out.push(FLOAT_BYTES as u8);
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header.as_bytes());
        put_tensors(&mut out, &self.model.params());
        put_tensors(&mut out, &self.model.buffers());
        let flags = self.model.actnorm_flags();
        out.extend((flags.len() as u32).to_le_bytes());
        out.extend(flags.iter().map(|&f| f as u8));
        let (m, v) = self.adam.moments();
        out.extend(self.adam.steps_taken().to_le_bytes());
        put_tensors(&mut out, &m.iter().collect::<Vec<_>>());
        put_tensors(&mut out, &v.iter().collect::<Vec<_>>());
        out.extend(self.step.to_le_bytes());
        out.extend(self.rng.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {VERSION}"
            )));
        }
        let width = r.u8()? as usize;
        if width != FLOAT_BYTES {
            return Err(Error::Checkpoint(format!(
                "stored with {}-bit floats, this build uses {}-bit",
                width * 8,
                FLOAT_BYTES * 8
            )));
        }
        let header_len = r.u32()? as usize;
        let header =
            std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: Header =
            toml::from_str(header).map_err(|e| Error::Checkpoint(format!("header: {}", e.message())))?;
        header
            .factors
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.factors.channels() != header.flow.final_latent_shape()[0] {
            return Err(Error::Checkpoint(
                "factor widths do not match the flow configuration".into(),
            ));
        }

        let mut model = Glow::new(header.flow, &mut Rng::new(0)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        assign(model.params_mut(), r.tensors()?, "parameter")?;
        assign(model.buffers_mut(), r.tensors()?, "buffer")?;
        let n_flags = r.u32()? as usize;
        let flags = r.take(n_flags)?.iter().map(|&b| b != 0).collect::<Vec<_>>();
        model
            .set_actnorm_flags(&flags)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut adam = Adam::for_params(header.train.learning_rate as Float, &model.params());
        let adam_step = r.u64()?;
        let m = r.tensors()?;
        let v = r.tensors()?;
        adam.restore(adam_step, m, v)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step = r.u64()?;
        let rng = Rng::from_bytes(r.take(RNG_STATE_BYTES)?)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            train: header.train,
            spec: header.factors,
            model,
            adam,
            step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Continue training. `config`, if given, must agree with the stored
    /// configuration except for stopping criteria and checkpoint cadence.
    pub fn into_trainer(self, corpus: Corpus, config: Option<TrainConfig>) -> Result<Trainer> {
        let config = match config {
            Some(c) if !self.train.resumable_as(&c) => {
                return Err(Error::Config(
                    "configuration differs from the checkpoint's beyond epochs/max_steps/checkpoint_every".into(),
                ))
            }
            Some(c) => c,
            None => self.train,
        };
        Trainer::assemble(config, corpus, self.model, self.adam, self.rng, self.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, to_model_input, SynthParams};

    fn config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 3,
            levels: 2,
            steps: 1,
            hidden_width: 4,
            factor_widths: vec![3, 4, 1],
            max_steps: 4,
            holdout_fraction: 0.2,
            slice_bins: 3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn trained() -> (Trainer, Corpus) {
        let corpus = generate_corpus(2, 40, &SynthParams::default()).unwrap();
        let mut t = Trainer::new(config(), corpus.clone()).unwrap();
        t.train_step().unwrap();
        t.train_step().unwrap();
        (t, corpus)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (t, _) = trained();
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
        assert_eq!(bytes, again);
    }

    #[test]
    fn loaded_model_encodes_identically() {
        let (t, corpus) = trained();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_trainer(&t).to_bytes()).unwrap();
        let x = to_model_input(&corpus.samples[0].image, 6).unwrap();
        assert_eq!(ck.model.encode(&x).unwrap(), t.model().encode(&x).unwrap());
    }

    #[test]
    fn resume_reproduces_next_step() {
        let (mut t, corpus) = trained();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_trainer(&t).to_bytes()).unwrap();
        let mut resumed = ck.into_trainer(corpus, None).unwrap();
        let a = t.train_step().unwrap();
        let b = resumed.train_step().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let (t, _) = trained();
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let (t, corpus) = trained();
        let ck = Checkpoint::from_trainer(&t);
        let mut other = config();
        other.hidden_width = 8;
        assert!(matches!(
            ck.clone().into_trainer(corpus.clone(), Some(other)),
            Err(Error::Config(_))
        ));
        let mut longer = config();
        longer.max_steps = 10;
        assert!(ck.into_trainer(corpus, Some(longer)).is_ok());
    }

    #[test]
    fn file_round_trip() {
        let (t, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        Checkpoint::from_trainer(&t).save(&p).unwrap();
        let ck = Checkpoint::load(&p).unwrap();
        assert_eq!(ck.step, 2);
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
