//! Versioned binary persistence for models, detectors and gradient logs.
//!
//! All three formats share the same numeric conventions: an 8-byte ASCII
//! magic, a little-endian `u32` version, little-endian `u64` shape fields
//! and little-endian `f64` blocks in the model's fixed dense order (user
//! table row-major, item table row-major, predictor tail). Writers go
//! through a temp-file-plus-rename so a crash never leaves a partial file
//! at the target path.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::dataset::Role;
use crate::detection::DetectorModel;
use crate::error::{Error, Result};
use crate::fedcore::GradientLogEntry;
use crate::model::{init_params, ModelParams, ParamsMeta, PredictorKind, SparseGradient};

const MODEL_MAGIC: &[u8; 8] = b"FRMODEL\0";
const DETECTOR_MAGIC: &[u8; 8] = b"FRDETEC\0";
const GRADLOG_MAGIC: &[u8; 8] = b"FRGRADS\0";
const FORMAT_VERSION: u32 = 1;

/// Upper bound on any count read from a file header; a corrupt length
/// field fails fast instead of attempting a huge allocation.
const MAX_COUNT: u64 = 1 << 33;

// ---------------------------------------------------------------------
// Primitive readers/writers
// ---------------------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for &v in vs {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint("file is truncated".into())
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(r)?))
}

fn read_count(r: &mut impl Read, what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    if v > MAX_COUNT {
        return Err(Error::Checkpoint(format!(
            "{what} count {v} is implausibly large; file is corrupt"
        )));
    }
    Ok(v as usize)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_bytes(r)?))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

fn check_magic(r: &mut impl Read, expected: &[u8; 8], kind: &str) -> Result<()> {
    let got: [u8; 8] = read_bytes(r)?;
    if &got != expected {
        return Err(Error::Checkpoint(format!(
            "not a {kind} checkpoint (magic mismatch)"
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported {kind} checkpoint version {version}; this build reads version {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

/// Runs `write` against a temp file next to `path`, then renames it over
/// `path`, so the target is always either absent, old, or complete.
fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let stem = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("invalid target path {}", path.display())))?;
    let mut tmp_name = stem.to_os_string();
    tmp_name.push(".tmp");
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => tmp_name.into(),
    };
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn kind_to_u8(kind: PredictorKind) -> u8 {
    match kind {
        PredictorKind::DotProduct => 0,
        PredictorKind::Mlp => 1,
    }
}

fn kind_from_u8(v: u8) -> Result<PredictorKind> {
    match v {
        0 => Ok(PredictorKind::DotProduct),
        1 => Ok(PredictorKind::Mlp),
        other => Err(Error::Checkpoint(format!(
            "unknown predictor kind tag {other}"
        ))),
    }
}

fn role_to_u8(role: Role) -> u8 {
    match role {
        Role::Benign => 0,
        Role::Byzantine => 1,
    }
}

fn role_from_u8(v: u8) -> Result<Role> {
    match v {
        0 => Ok(Role::Benign),
        1 => Ok(Role::Byzantine),
        other => Err(Error::Checkpoint(format!("unknown role tag {other}"))),
    }
}

// ---------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------

/// Saves a model: shape header then the full dense parameter block.
pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let meta = params.meta();
    let dense = params.to_dense();
    atomic_write(path, |w| {
        w.write_all(MODEL_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        write_u64(w, meta.num_users as u64)?;
        write_u64(w, meta.num_items as u64)?;
        write_u64(w, meta.dim as u64)?;
        w.write_all(&[kind_to_u8(meta.predictor_kind)])?;
        write_f64s(w, &dense)?;
        Ok(())
    })
}

/// Loads a model checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MODEL_MAGIC, "model")?;
    let num_users = read_count(&mut r, "user")?;
    let num_items = read_count(&mut r, "item")?;
    let dim = read_count(&mut r, "dimension")?;
    let kind = kind_from_u8(read_bytes::<1>(&mut r)?[0])?;
    if num_users == 0 || num_items == 0 || dim == 0 {
        return Err(Error::Checkpoint(format!(
            "degenerate model shape {num_users} x {num_items} x {dim}"
        )));
    }
    let mut params = init_params(num_users, num_items, dim, kind, 0)?;
    let dense = read_f64s(&mut r, params.meta().dense_len())?;
    expect_eof(&mut r, "model")?;
    params.assign_dense(&dense)?;
    Ok(params)
}

// ---------------------------------------------------------------------
// Detector checkpoints
// ---------------------------------------------------------------------

/// Saves a trained detector: layer shapes, weights, then the decision
/// threshold.
pub fn save_detector(model: &DetectorModel, path: &Path) -> Result<()> {
    let (hidden, feature_len) = model.w1.dim();
    atomic_write(path, |w| {
        w.write_all(DETECTOR_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        write_u64(w, hidden as u64)?;
        write_u64(w, feature_len as u64)?;
        write_f64s(w, model.w1.as_slice().expect("standard layout"))?;
        write_f64s(w, &model.b1)?;
        write_f64s(w, &model.w2)?;
        write_f64(w, model.b2)?;
        write_f64(w, model.threshold)?;
        Ok(())
    })
}

/// Loads a detector checkpoint written by [`save_detector`].
pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, DETECTOR_MAGIC, "detector")?;
    let hidden = read_count(&mut r, "hidden unit")?;
    let feature_len = read_count(&mut r, "feature")?;
    if hidden == 0 || feature_len == 0 {
        return Err(Error::Checkpoint(format!(
            "degenerate detector shape {hidden} x {feature_len}"
        )));
    }
    let w1 = Array2::from_shape_vec((hidden, feature_len), read_f64s(&mut r, hidden * feature_len)?)
        .map_err(|e| Error::Checkpoint(format!("detector weight block malformed: {e}")))?;
    let b1 = read_f64s(&mut r, hidden)?;
    let w2 = read_f64s(&mut r, hidden)?;
    let b2 = read_f64(&mut r)?;
    let threshold = read_f64(&mut r)?;
    expect_eof(&mut r, "detector")?;
    Ok(DetectorModel {
        w1,
        b1,
        w2,
        b2,
        threshold,
    })
}

// ---------------------------------------------------------------------
// Gradient logs
// ---------------------------------------------------------------------

/// Saves a labeled gradient log: the model shape header, a record count,
/// then one sparse record per (round, client) with its ground-truth role.
///
/// The role labels exist only for offline detector training; nothing in
/// the live aggregation path reads this file.
pub fn save_gradient_log(entries: &[GradientLogEntry], meta: &ParamsMeta, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(GRADLOG_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        write_u64(w, meta.num_users as u64)?;
        write_u64(w, meta.num_items as u64)?;
        write_u64(w, meta.dim as u64)?;
        w.write_all(&[kind_to_u8(meta.predictor_kind)])?;
        write_u64(w, meta.predictor_len as u64)?;
        write_u64(w, entries.len() as u64)?;
        for entry in entries {
            if entry.grad.predictor.len() != meta.predictor_len {
                return Err(Error::ShapeMismatch {
                    expected: meta.predictor_len,
                    actual: entry.grad.predictor.len(),
                });
            }
            write_u64(w, entry.epoch as u64)?;
            write_u64(w, entry.round as u64)?;
            write_u64(w, entry.client_id as u64)?;
            w.write_all(&[role_to_u8(entry.role)])?;
            write_u64(w, entry.grad.user_rows.len() as u64)?;
            for (&row, vals) in &entry.grad.user_rows {
                write_u64(w, row as u64)?;
                write_f64s(w, vals)?;
            }
            write_u64(w, entry.grad.item_rows.len() as u64)?;
            for (&row, vals) in &entry.grad.item_rows {
                write_u64(w, row as u64)?;
                write_f64s(w, vals)?;
            }
            write_f64s(w, &entry.grad.predictor)?;
            write_u64(w, entry.grad.sample_count as u64)?;
        }
        Ok(())
    })
}

/// Loads a gradient log written by [`save_gradient_log`], returning the
/// model shape it was recorded against and the labeled records.
pub fn load_gradient_log(path: &Path) -> Result<(ParamsMeta, Vec<GradientLogEntry>)> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, GRADLOG_MAGIC, "gradient log")?;
    let num_users = read_count(&mut r, "user")?;
    let num_items = read_count(&mut r, "item")?;
    let dim = read_count(&mut r, "dimension")?;
    let predictor_kind = kind_from_u8(read_bytes::<1>(&mut r)?[0])?;
    let predictor_len = read_count(&mut r, "predictor parameter")?;
    let meta = ParamsMeta {
        num_users,
        num_items,
        dim,
        predictor_kind,
        predictor_len,
    };
    let n_records = read_count(&mut r, "record")?;
    let mut entries = Vec::with_capacity(n_records.min(1 << 20));
    for _ in 0..n_records {
        let epoch = read_count(&mut r, "epoch")?;
        let round = read_count(&mut r, "round")?;
        let client_id = read_count(&mut r, "client")?;
        let role = role_from_u8(read_bytes::<1>(&mut r)?[0])?;
        let mut grad = SparseGradient::empty(predictor_len);
        let n_user = read_count(&mut r, "user row")?;
        for _ in 0..n_user {
            let row = read_count(&mut r, "user row index")?;
            if row >= num_users {
                return Err(Error::Checkpoint(format!(
                    "user row {row} outside table of {num_users}"
                )));
            }
            grad.user_rows.insert(row, read_f64s(&mut r, dim)?);
        }
        let n_item = read_count(&mut r, "item row")?;
        for _ in 0..n_item {
            let row = read_count(&mut r, "item row index")?;
            if row >= num_items {
                return Err(Error::Checkpoint(format!(
                    "item row {row} outside table of {num_items}"
                )));
            }
            grad.item_rows.insert(row, read_f64s(&mut r, dim)?);
        }
        grad.predictor = read_f64s(&mut r, predictor_len)?;
        grad.sample_count = read_count(&mut r, "sample")?;
        entries.push(GradientLogEntry {
            epoch,
            round,
            client_id,
            role,
            grad,
        });
    }
    expect_eof(&mut r, "gradient log")?;
    Ok((meta, entries))
}

fn expect_eof(r: &mut impl Read, kind: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::Checkpoint(format!(
            "{kind} checkpoint has trailing bytes"
        ))),
        Err(e) => Err(Error::Io(e)),
    }
}
