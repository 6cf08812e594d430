//! Little-endian binary checkpoints.
//!
//! Layout: magic `VINOCKPT`, u32 version, then length-prefixed config text
//! (dotted form) and config hash, u64 step, u64 data seed, student and
//! teacher parameter stores, distillation state and optimiser moments.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::config::ExperimentConfig;
use crate::distill::{AdamW, DistillState, LossWeights, TrainState};
use crate::encoder::{Mat, Param, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VINOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Dotted config text the run was started with.
    pub config_text: String,
    pub config_hash: String,
    pub step: u64,
    /// Seed of the per-step data streams.
    pub data_seed: u64,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub distill: DistillState,
    pub optim: AdamW,
}

fn corrupt(offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as usize,
        message: message.into(),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.write_u64::<LE>(s.len() as u64).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn put_mat(out: &mut Vec<u8>, m: &Mat) {
    out.write_u64::<LE>(m.nrows() as u64).unwrap();
    out.write_u64::<LE>(m.ncols() as u64).unwrap();
    for v in m.iter() {
        out.write_f64::<LE>(*v).unwrap();
    }
}

fn put_store(out: &mut Vec<u8>, s: &ParamStore) {
    out.write_u64::<LE>(s.len() as u64).unwrap();
    for p in &s.params {
        put_str(out, &p.name);
        out.write_u8(p.decay as u8).unwrap();
        put_mat(out, &p.value);
    }
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    out.write_u64::<LE>(v.len() as u64).unwrap();
    for x in v {
        out.write_f64::<LE>(*x).unwrap();
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn eof(&self) -> Error {
        corrupt(self.cur.position(), "unexpected end of checkpoint")
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.eof())
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(|_| self.eof())
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(|_| self.eof())
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(|_| self.eof())
    }

    fn len(&mut self) -> Result<usize> {
        let at = self.cur.position();
        let n = self.u64()?;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if n > remaining {
            return Err(corrupt(at, format!("length {n} exceeds remaining {remaining} bytes")));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let at = self.cur.position();
        let n = self.len()?;
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.eof())?;
        String::from_utf8(buf).map_err(|_| corrupt(at, "invalid utf-8"))
    }

    fn mat(&mut self) -> Result<Mat> {
        let at = self.cur.position();
        let r = self.u64()? as usize;
        let c = self.u64()? as usize;
        let n = r.checked_mul(c).ok_or_else(|| corrupt(at, "matrix size overflows"))?;
        if n.saturating_mul(8) as u64 > self.cur.get_ref().len() as u64 - self.cur.position() {
            return Err(corrupt(at, format!("{r}x{c} matrix exceeds file")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_shape_vec((r, c), data).expect("shape matches length"))
    }

    fn store(&mut self) -> Result<ParamStore> {
        let n = self.len()?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = self.string()?;
            let decay = self.u8()? != 0;
            let value = self.mat()?;
            params.push(Param { name, value, decay });
        }
        Ok(ParamStore { params })
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn from_state(config: &ExperimentConfig, state: &TrainState) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_text: config.to_dotted(),
            config_hash: config.hash(),
            step: state.step as u64,
            data_seed: config.run.seed,
            student: state.student.clone(),
            teacher: state.teacher.clone(),
            distill: state.distill.clone(),
            optim: state.optim.clone(),
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config_text)
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            student: self.student,
            teacher: self.teacher,
            distill: self.distill,
            optim: self.optim,
            step: self.step as usize,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(self.version).unwrap();
        put_str(&mut out, &self.config_text);
        put_str(&mut out, &self.config_hash);
        out.write_u64::<LE>(self.step).unwrap();
        out.write_u64::<LE>(self.data_seed).unwrap();
        put_store(&mut out, &self.student);
        put_store(&mut out, &self.teacher);
        let d = &self.distill;
        put_vec(&mut out, &d.center);
        for v in [
            d.tau_student,
            d.tau_teacher,
            d.momentum,
            d.weights.local,
            d.weights.mask,
            d.weights.temp,
            d.center_rate,
        ] {
            out.write_f64::<LE>(v).unwrap();
        }
        out.write_u64::<LE>(self.optim.step).unwrap();
        out.write_u64::<LE>(self.optim.m.len() as u64).unwrap();
        for (m, v) in self.optim.m.iter().zip(&self.optim.v) {
            put_mat(&mut out, m);
            put_mat(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            cur: Cursor::new(bytes),
        };
        let mut magic = [0u8; 8];
        r.cur.read_exact(&mut magic).map_err(|_| r.eof())?;
        if &magic != MAGIC {
            return Err(corrupt(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(8, format!("unsupported checkpoint version {version}")));
        }
        let config_text = r.string()?;
        let config_hash = r.string()?;
        let step = r.u64()?;
        let data_seed = r.u64()?;
        let student = r.store()?;
        let teacher = r.store()?;
        let center = r.vec()?;
        let mut f = [0f64; 7];
        for v in f.iter_mut() {
            *v = r.f64()?;
        }
        let distill = DistillState {
            center,
            tau_student: f[0],
            tau_teacher: f[1],
            momentum: f[2],
            weights: LossWeights {
                local: f[3],
                mask: f[4],
                temp: f[5],
            },
            center_rate: f[6],
        };
        let opt_step = r.u64()?;
        let n = r.len()?;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            m.push(r.mat()?);
            v.push(r.mat()?);
        }
        if r.cur.position() != bytes.len() as u64 {
            return Err(corrupt(r.cur.position(), "trailing bytes"));
        }
        student.check_congruent(&teacher)?;
        Ok(Checkpoint {
            version,
            config_text,
            config_hash,
            step,
            data_seed,
            student,
            teacher,
            distill,
            optim: AdamW { m, v, step: opt_step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::{initial_state, trainer_for};

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.embed_dim = 16;
        cfg.encoder.depth = 1;
        cfg.encoder.num_heads = 2;
        cfg.encoder.head_hidden_dim = 16;
        cfg.encoder.head_bottleneck_dim = 8;
        cfg.encoder.head_output_dim = 16;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let tr = trainer_for(&cfg).unwrap();
        let mut st = initial_state(&cfg, &tr);
        st.step = 17;
        st.distill.center[3] = f64::MIN_POSITIVE;
        st.optim.m[0][[0, 0]] = -0.0;
        st.optim.step = 5;
        let ck = Checkpoint::from_state(&cfg, &st);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config().unwrap(), cfg);
        assert_eq!(back.into_state(), st);
    }

    #[test]
    fn corruption_is_reported() {
        let cfg = small();
        let tr = trainer_for(&cfg).unwrap();
        let bytes = Checkpoint::from_state(&cfg, &initial_state(&cfg, &tr)).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(Error::Parse { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Parse { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
