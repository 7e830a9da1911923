//! Binary checkpoints of a [`TrainState`].
//!
//! Layout, all little-endian: `MMNC`, `u32` version, `u64` entry count, then
//! per entry a `u16` name length, the name, a `u8` rank, `u32` dims and the
//! `f32` payload. A state blob follows (iteration, batch size, per-group Adam
//! step counts, RNG seed/stream/position) and finally a CRC-32 of everything
//! before it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::TrainState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: magic bytes {found:?}, expected \"MMNC\"")]
    Magic { found: Vec<u8> },
    #[error("checkpoint version {found} unsupported, this build reads version {CHECKPOINT_VERSION}")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {offset}: tensor {missing} is missing")]
    Truncated { offset: usize, missing: String },
    #[error("checkpoint truncated at byte {offset} inside the state blob")]
    TruncatedState { offset: usize },
    #[error("checkpoint has no tensor {0}")]
    Missing(String),
    #[error("checkpoint tensor {0} does not belong to this model")]
    Unknown(String),
    #[error("tensor {name}: checkpoint has {found:?} values, model expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint state does not match the model: {0}")]
    State(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Tensor entries in file order: name, dims, values.
fn entries(state: &TrainState) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let store = &state.nets.store;
    let mut out = Vec::new();
    for p in store.params() {
        out.push((format!("param:{}", p.name), p.value.shape().0.to_vec(), p.value.data().to_vec()));
    }
    for b in store.buffers() {
        out.push((format!("stat:{}.mean", b.name), vec![b.mean.len()], b.mean.clone()));
        out.push((format!("stat:{}.var", b.name), vec![b.var.len()], b.var.clone()));
    }
    let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
    for p in store.params() {
        let i = slot.entry(p.group.as_str()).or_insert(0);
        let adam = &state.adam[&p.group];
        let dims = p.value.shape().0.to_vec();
        out.push((format!("adam.m:{}", p.name), dims.clone(), adam.m[*i].clone()));
        out.push((format!("adam.v:{}", p.name), dims, adam.v[*i].clone()));
        *i += 1;
    }
    out
}

fn state_blob(state: &TrainState) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&state.iteration.to_le_bytes());
    b.extend_from_slice(&(state.batch as u32).to_le_bytes());
    b.extend_from_slice(&(state.adam.len() as u32).to_le_bytes());
    for (g, a) in &state.adam {
        b.extend_from_slice(&(g.len() as u16).to_le_bytes());
        b.extend_from_slice(g.as_bytes());
        b.extend_from_slice(&a.t.to_le_bytes());
    }
    b.extend_from_slice(&state.rng.get_seed());
    b.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    b.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    b
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let ents = entries(state);
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(ents.len() as u64).to_le_bytes());
    for (name, dims, data) in &ents {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(dims.len() as u8);
        for &d in dims {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b.extend_from_slice(&state_blob(state));
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

/// Writes through a temporary file so a crash never leaves half a checkpoint.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(state)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Option<u128> {
        self.take(16).map(|b| u128::from_le_bytes(b.try_into().expect("16 bytes")))
    }
}

/// Overwrites `state` with a checkpoint written for the same model.
pub fn decode_checkpoint(bytes: &[u8], state: &mut TrainState) -> Result<()> {
    let magic = bytes.get(..4).unwrap_or(bytes);
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic { found: magic.to_vec() });
    }
    let mut r = Reader { bytes, pos: 4 };
    let expected = entries(state);
    let first_missing = |loaded: &BTreeMap<String, Vec<f32>>, offset: usize| CheckpointError::Truncated {
        offset,
        missing: expected
            .iter()
            .find(|(n, _, _)| !loaded.contains_key(n))
            .map_or_else(|| "(none)".into(), |(n, _, _)| n.clone()),
    };
    let mut loaded: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let version = r.u32().ok_or_else(|| first_missing(&loaded, r.pos))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.u64().ok_or_else(|| first_missing(&loaded, r.pos))?;
    let shapes: BTreeMap<&str, &Vec<usize>> = expected.iter().map(|(n, d, _)| (n.as_str(), d)).collect();
    for _ in 0..count {
        let start = r.pos;
        let entry = (|| {
            let len = r.u16()? as usize;
            let name = String::from_utf8_lossy(r.take(len)?).into_owned();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
            Some((name, dims))
        })();
        let Some((name, dims)) = entry else {
            return Err(first_missing(&loaded, start));
        };
        let want = shapes.get(name.as_str()).ok_or_else(|| CheckpointError::Unknown(name.clone()))?;
        if **want != dims {
            return Err(CheckpointError::Shape {
                name,
                found: dims,
                expected: want.to_vec(),
            });
        }
        let n: usize = dims.iter().product();
        let Some(raw) = r.take(4 * n) else {
            return Err(CheckpointError::Truncated {
                offset: r.pos,
                missing: name,
            });
        };
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        loaded.insert(name, data);
    }
    if let Some((n, _, _)) = expected.iter().find(|(n, _, _)| !loaded.contains_key(n)) {
        return Err(CheckpointError::Missing(n.clone()));
    }

    let blob_err = |r: &Reader| CheckpointError::TruncatedState { offset: r.pos };
    let iteration = r.u64().ok_or_else(|| blob_err(&r))?;
    let batch = r.u32().ok_or_else(|| blob_err(&r))? as usize;
    let groups = r.u32().ok_or_else(|| blob_err(&r))? as usize;
    let mut steps = BTreeMap::new();
    for _ in 0..groups {
        let len = r.u16().ok_or_else(|| blob_err(&r))? as usize;
        let g = String::from_utf8_lossy(r.take(len).ok_or_else(|| blob_err(&r))?).into_owned();
        let t = r.u64().ok_or_else(|| blob_err(&r))?;
        steps.insert(g, t);
    }
    let seed: [u8; 32] = r
        .take(32)
        .ok_or_else(|| blob_err(&r))?
        .try_into()
        .expect("32 bytes");
    let stream = r.u64().ok_or_else(|| blob_err(&r))?;
    let word_pos = r.u128().ok_or_else(|| blob_err(&r))?;
    let body_end = r.pos;
    let stored = r.u32().ok_or_else(|| blob_err(&r))?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::State(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if steps.keys().ne(state.adam.keys()) {
        return Err(CheckpointError::State("optimizer groups differ".into()));
    }

    // Everything validated; now overwrite.
    let store = &mut state.nets.store;
    let mut slot: BTreeMap<String, usize> = BTreeMap::new();
    let mut take = |name: String| loaded.remove(&name).expect("validated above");
    let mut adam_moments = Vec::new();
    for p in store.params_mut() {
        p.value.data_mut().copy_from_slice(&take(format!("param:{}", p.name)));
        let i = slot.entry(p.group.clone()).or_insert(0);
        adam_moments.push((
            p.group.clone(),
            *i,
            take(format!("adam.m:{}", p.name)),
            take(format!("adam.v:{}", p.name)),
        ));
        *i += 1;
    }
    for b in store.buffers_mut() {
        b.mean = take(format!("stat:{}.mean", b.name));
        b.var = take(format!("stat:{}.var", b.name));
    }
    for (g, i, m, v) in adam_moments {
        let a = state.adam.get_mut(&g).expect("group checked");
        a.m[i] = m;
        a.v[i] = v;
    }
    for (g, t) in steps {
        state.adam.get_mut(&g).expect("group checked").t = t;
    }
    state.iteration = iteration;
    state.batch = batch;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(())
}

pub fn load_checkpoint(path: &Path, state: &mut TrainState) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, state)
}
