//! Binary checkpoints: parameters, optimizer moments, counters, RNG states,
//! and a TOML snapshot of the config that produced them.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Optimizer, OptimizerKind, ParamStore, Scalar};
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"TQMX";
const VERSION: u32 = 1;

/// Borrowed view of everything a resumable checkpoint must capture.
pub struct CheckpointState<'a, S: Scalar> {
    pub store: &'a ParamStore<S>,
    pub optimizer: &'a Optimizer<S>,
    pub env_steps: u64,
    pub episodes: u64,
    pub train_steps: u64,
    /// Env, action, buffer, eval stream states, in that order.
    pub rngs: [RngState; 4],
}

/// Fully parsed checkpoint, still detached from any model.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub cfg: ExperimentConfig,
    pub env_steps: u64,
    pub episodes: u64,
    pub train_steps: u64,
    pub rngs: [RngState; 4],
    /// (name, rows, cols, row-major values) in registration order.
    pub tensors: Vec<(String, usize, usize, Vec<f32>)>,
    pub optimizer_kind: OptimizerKind,
    pub optimizer_step: u64,
    pub moments_m: Vec<Vec<f32>>,
    pub moments_v: Vec<Vec<f32>>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Serializes and atomically replaces `path` (write temp, then rename).
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    cfg: &ExperimentConfig,
    state: CheckpointState<'_, S>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let cfg_text = cfg.to_toml_string();
    write_bytes(&mut buf, cfg_text.as_bytes());

    buf.extend_from_slice(&state.env_steps.to_le_bytes());
    buf.extend_from_slice(&state.episodes.to_le_bytes());
    buf.extend_from_slice(&state.train_steps.to_le_bytes());

    for rng in &state.rngs {
        buf.extend_from_slice(&rng.seed);
        buf.extend_from_slice(&rng.stream.to_le_bytes());
        buf.extend_from_slice(&rng.word_pos.to_le_bytes());
    }

    let tensors: Vec<_> = state.store.iter().collect();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, name, value) in &tensors {
        write_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for v in value.to_f32_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let kind_code: u32 = match state.optimizer.cfg.kind {
        OptimizerKind::Adam => 0,
        OptimizerKind::RmsProp => 1,
    };
    buf.extend_from_slice(&kind_code.to_le_bytes());
    buf.extend_from_slice(&state.optimizer.step_count().to_le_bytes());
    let (m, v) = state.optimizer.moments();
    if m.len() != tensors.len() || v.len() != tensors.len() {
        return Err(ckpt_err(path, "optimizer moments do not match parameter count"));
    }
    for mat in m.iter().chain(v.iter()) {
        for x in mat.to_f32_vec() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| ckpt_err(path, format!("create dir: {e}")))?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &buf).map_err(|e| ckpt_err(path, format!("write temp file: {e}")))?;
    std::fs::rename(&tmp, path).map_err(|e| ckpt_err(path, format!("rename into place: {e}")))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let buf = std::fs::read(path).map_err(|e| ckpt_err(path, format!("read: {e}")))?;
    let mut r = Reader { buf: &buf, pos: 0, path };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(ckpt_err(path, "bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}, expected {VERSION}")));
    }

    let cfg_bytes = r.bytes()?;
    let cfg_text = std::str::from_utf8(&cfg_bytes)
        .map_err(|_| ckpt_err(path, "config snapshot is not UTF-8"))?;
    let cfg = ExperimentConfig::from_toml_str(cfg_text)
        .map_err(|e| ckpt_err(path, format!("config snapshot: {e}")))?;

    let env_steps = r.u64()?;
    let episodes = r.u64()?;
    let train_steps = r.u64()?;

    let mut rngs = Vec::with_capacity(4);
    for _ in 0..4 {
        let seed_bytes = r.take(32)?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(seed_bytes);
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        rngs.push(RngState { seed, stream, word_pos });
    }
    let rngs: [RngState; 4] = rngs.try_into().expect("collected exactly four states");

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_bytes = r.bytes()?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ckpt_err(path, "tensor name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f32s(rows * cols)?;
        tensors.push((name, rows, cols, data));
    }

    let optimizer_kind = match r.u32()? {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::RmsProp,
        other => return Err(ckpt_err(path, format!("unknown optimizer code {other}"))),
    };
    let optimizer_step = r.u64()?;
    let mut moments_m = Vec::with_capacity(count);
    for (_, rows, cols, _) in &tensors {
        moments_m.push(r.f32s(rows * cols)?);
    }
    let mut moments_v = Vec::with_capacity(count);
    for (_, rows, cols, _) in &tensors {
        moments_v.push(r.f32s(rows * cols)?);
    }
    if r.pos != buf.len() {
        return Err(ckpt_err(path, format!("{} trailing bytes", buf.len() - r.pos)));
    }

    Ok(LoadedCheckpoint {
        cfg,
        env_steps,
        episodes,
        train_steps,
        rngs,
        tensors,
        optimizer_kind,
        optimizer_step,
        moments_m,
        moments_v,
    })
}

impl LoadedCheckpoint {
    /// Copies saved tensors into `store` by name. Every name and shape must
    /// match exactly; a width mismatch (different observation layout, wrong
    /// team size for a flat model) is reported as incompatible.
    pub fn apply_to_store<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors but the model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, rows, cols, data) in &self.tensors {
            let id = store.id_of(name).ok_or_else(|| {
                Error::Incompatible(format!("checkpoint tensor `{name}` has no matching parameter"))
            })?;
            let value = store.value_mut(id);
            if value.rows() != *rows || value.cols() != *cols {
                return Err(Error::Incompatible(format!(
                    "tensor `{name}` is {rows}x{cols} in the checkpoint but {}x{} in the model; \
                     the vertex feature space must match",
                    value.rows(),
                    value.cols()
                )));
            }
            *value = Matrix::from_f32_slice(*rows, *cols, data);
        }
        Ok(())
    }

    /// Restores moment buffers and step count into an optimizer built over
    /// the same store the tensors were applied to.
    pub fn apply_to_optimizer<S: Scalar>(&self, optimizer: &mut Optimizer<S>) -> Result<()> {
        if optimizer.cfg.kind != self.optimizer_kind {
            return Err(Error::Incompatible(format!(
                "checkpoint optimizer is {:?} but the run is configured for {:?}",
                self.optimizer_kind, optimizer.cfg.kind
            )));
        }
        let m: Vec<Matrix<S>> = self
            .tensors
            .iter()
            .zip(&self.moments_m)
            .map(|((_, rows, cols, _), data)| Matrix::from_f32_slice(*rows, *cols, data))
            .collect();
        let v: Vec<Matrix<S>> = self
            .tensors
            .iter()
            .zip(&self.moments_v)
            .map(|((_, rows, cols, _), data)| Matrix::from_f32_slice(*rows, *cols, data))
            .collect();
        optimizer.restore_moments(self.optimizer_step, m, v);
        Ok(())
    }
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ckpt_err(
                self.path,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let len = self.u64()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
