//! Versioned JSON checkpoints and JSON-lines training metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::StudentModel;
use super::train::EpochMetrics;
use crate::error::{Error, ParseErrorKind, Result};

pub const CHECKPOINT_FORMAT: &str = "skd-student";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    version: u32,
    model: M,
}

/// Serializes architecture, seed, freeze flags and every parameter. Floats
/// are written in shortest round-trip form, so loading is exact.
pub fn write_checkpoint<W: Write>(model: &StudentModel, w: W) -> Result<()> {
    let env = Envelope {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        model,
    };
    serde_json::to_writer(w, &env).map_err(|e| Error::Invalid(format!("checkpoint encode: {e}")))
}

fn decode_error(e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    let kind = match e.classify() {
        Category::Io => return Error::Invalid(format!("checkpoint read: {e}")),
        Category::Eof => ParseErrorKind::UnexpectedEof,
        Category::Syntax => ParseErrorKind::BadToken(e.to_string()),
        Category::Data => ParseErrorKind::Structure(e.to_string()),
    };
    Error::parse(e.line(), kind)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<StudentModel> {
    let env: Envelope<StudentModel> = serde_json::from_reader(r).map_err(decode_error)?;
    if env.format != CHECKPOINT_FORMAT || env.version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            1,
            ParseErrorKind::Header(format!("unsupported checkpoint {} v{}", env.format, env.version)),
        ));
    }
    let model = env.model;
    model.architecture().validate()?;
    let shapes_ok = model
        .layers()
        .all(|l| l.weights.len() == l.fan_in * l.fan_out && l.bias.len() == l.fan_out);
    if !shapes_ok {
        return Err(Error::Invalid("checkpoint parameter shapes disagree with the architecture".into()));
    }
    if model.flat_params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &StudentModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StudentModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

/// One `{"epoch":k,"cls":…,"reg":…,"total":…}` object per line.
pub fn write_metrics<W: Write>(history: &[EpochMetrics], w: &mut W) -> std::io::Result<()> {
    for m in history {
        serde_json::to_writer(&mut *w, m)?;
        writeln!(w)?;
    }
    Ok(())
}
