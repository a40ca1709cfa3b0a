//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `SMIMCKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every tensor as raw
//! little-endian `f64` in header order. The header carries the run
//! configuration and its hash, the step, the RNG state, the optimizer step
//! count, a SHA-256 of the payload, and the tensor index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::distill::TeacherState;
use crate::error::{Error, Result};
use crate::model::SemMimModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"SMIMCKPT";
pub const FORMAT_VERSION: u32 = 1;

const STUDENT: &str = "student/";
const TEACHER: &str = "teacher/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";
const CENTER: &str = "teacher_center";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    step: u64,
    seed: u64,
    rng: ChaCha8Rng,
    adam_steps: u64,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

/// Metadata readable without loading the tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub config: RunConfig,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
}

/// Writes `state` to `path`, replacing any existing file atomically.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut add = |name: String, t: &ArrayD<f64>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
        });
        for &v in t.iter() {
            payload.write_f64::<LittleEndian>(v).expect("write to memory");
        }
    };
    for (prefix, store) in [
        (STUDENT, &state.model.params),
        (TEACHER, &state.teacher.params),
        (ADAM_M, &state.optim.m),
        (ADAM_V, &state.optim.v),
    ] {
        for (k, v) in store.iter() {
            add(format!("{prefix}{k}"), v);
        }
    }
    add(CENTER.to_string(), &state.teacher.center.clone().into_dyn());

    let header = Header {
        config: state.run.clone(),
        config_hash: state.config_hash(),
        step: state.step,
        seed: state.seed,
        rng: state.rng.clone(),
        adam_steps: state.optim.t,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        w.write_all(&payload)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for a checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice(&buf)?)
}

/// Reads only the header.
pub fn inspect(path: &Path) -> Result<CheckpointInfo> {
    let h = read_header(&mut BufReader::new(File::open(path)?))?;
    Ok(CheckpointInfo {
        config: h.config,
        config_hash: h.config_hash,
        step: h.step,
        seed: h.seed,
    })
}

/// Loads a checkpoint. The embedded hash must match the embedded
/// configuration and, when `expected` is given, that configuration too;
/// `force` skips both checks and, with `expected`, runs under it instead.
pub fn load(path: &Path, expected: Option<&RunConfig>, force: bool) -> Result<TrainState> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if hex::encode(Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch; file is corrupt".into()));
    }

    let stored_hash = header.config.hash();
    let mut run = header.config.clone();
    if !force {
        if stored_hash != header.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match the stored configuration ({stored_hash}); use --force to load anyway",
                header.config_hash
            )));
        }
        if let Some(exp) = expected {
            if exp.hash() != header.config_hash {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was written for config {}, not {}; use --force to load anyway",
                    header.config_hash,
                    exp.hash()
                )));
            }
        }
    } else if let Some(exp) = expected {
        if exp.hash() != header.config_hash {
            log::warn!("loading checkpoint under a different configuration (forced)");
        }
        run = exp.clone();
    }

    let mut cursor = &payload[..];
    let mut stores: [ParamStore; 4] = Default::default();
    let mut center = None;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = vec![0.0; n];
        cursor
            .read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| Error::Checkpoint(format!("payload ends inside `{}`", e.name)))?;
        let t = ArrayD::from_shape_vec(IxDyn(&e.shape), data).expect("length matches shape");
        let slot = [STUDENT, TEACHER, ADAM_M, ADAM_V]
            .iter()
            .position(|p| e.name.starts_with(p));
        match slot {
            Some(i) => {
                let prefix = [STUDENT, TEACHER, ADAM_M, ADAM_V][i];
                stores[i].insert(&e.name[prefix.len()..], t);
            }
            None if e.name == CENTER => center = Some(t),
            None => return Err(Error::Checkpoint(format!("unknown tensor `{}`", e.name))),
        }
    }
    if !cursor.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    let [student, teacher, m, v] = stores;
    let center = center
        .ok_or_else(|| Error::Checkpoint("teacher center missing".into()))?
        .into_dimensionality()
        .map_err(|_| Error::Checkpoint("teacher center is not a vector".into()))?;

    run.model.validate()?;
    let reference = crate::model::init_params(&run.model, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    reference.check_same_structure(&student)?;
    student.check_same_structure(&m)?;
    student.check_same_structure(&v)?;
    let teacher_ref = student.subset(&crate::model::TEACHER_PREFIXES);
    teacher_ref.check_same_structure(&teacher)?;

    Ok(TrainState {
        step: header.step,
        seed: header.seed,
        model: SemMimModel {
            cfg: run.model.clone(),
            params: student,
        },
        teacher: TeacherState { params: teacher, center },
        optim: AdamW {
            cfg: AdamWConfig::from(&run.train),
            m,
            v,
            t: header.adam_steps,
        },
        rng: header.rng,
        run,
    })
}
