//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "TCFC" version config_len config_toml[config_len] entry_count
//! entry_count x { name_len name[name_len] rows cols f32[rows*cols] }
//! ```
//!
//! Values are stored as 32-bit floats in row-major order; the model
//! configuration travels alongside as TOML so a checkpoint is
//! self-describing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"TCFC";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(writer: &mut impl Write, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let config = toml::to_string(cfg).map_err(|e| Error::Format(format!("serializing config: {e}")))?;
    writer.write_all(MAGIC)?;
    writer.write_u32::<LittleEndian>(VERSION)?;
    write_len(writer, config.len())?;
    writer.write_all(config.as_bytes())?;
    write_len(writer, store.len())?;
    for e in store.entries() {
        write_len(writer, e.name.len())?;
        writer.write_all(e.name.as_bytes())?;
        write_len(writer, e.shape.0)?;
        write_len(writer, e.shape.1)?;
        for &v in e.value.iter() {
            writer.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

fn write_len(writer: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit the container")))?;
    writer.write_u32::<LittleEndian>(n)?;
    Ok(())
}

/// Reads a checkpoint, rebuilding the model and filling its parameters.
pub fn read_checkpoint(reader: &mut impl Read) -> Result<(Model, ParamStore)> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = reader.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = read_string(reader)?;
    let cfg: ModelConfig = toml::from_str(&config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut store = ParamStore::new(0);
    let model = Model::new(&mut store, cfg)?;
    let count = reader.read_u32::<LittleEndian>()? as usize;
    if count != store.len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, model declares {}", store.len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name = read_string(reader)?;
        let id = store.find(&name).ok_or_else(|| Error::Format(format!("unknown tensor '{name}'")))?;
        let rows = reader.read_u32::<LittleEndian>()? as usize;
        let cols = reader.read_u32::<LittleEndian>()? as usize;
        let value = store.value_mut(id);
        if value.dim() != (rows, cols) {
            return Err(Error::Format(format!("tensor '{name}' is {rows}x{cols}, model expects {:?}", value.dim())));
        }
        for v in value.iter_mut() {
            *v = reader.read_f32::<LittleEndian>()? as f64;
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Format(format!("tensor '{name}' appears twice")));
        }
    }
    Ok((model, store))
}

fn read_string(reader: &mut impl Read) -> Result<String> {
    let n = reader.read_u32::<LittleEndian>()? as usize;
    if n > 1 << 24 {
        return Err(Error::Format(format!("implausible string length {n}")));
    }
    let mut buf = vec![0u8; n];
    reader.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}

pub fn save(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, cfg, store)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint; a missing file is reported as [`Error::Missing`].
pub fn load(path: &Path) -> Result<(Model, ParamStore)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!("checkpoint {} not found", path.display())),
        _ => Error::Io(e),
    })?;
    read_checkpoint(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_config_and_f32_values() {
        let cfg = ModelConfig::mini();
        let mut store = ParamStore::new(9);
        Model::new(&mut store, cfg.clone()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &store).unwrap();
        let (model, loaded) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(model.cfg, cfg);
        for (a, b) in store.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| (*x as f32) as f64 == *y));
        }
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        assert!(matches!(read_checkpoint(&mut &b"NOPE"[..]), Err(Error::Format(_))));
        let cfg = ModelConfig::mini();
        let mut store = ParamStore::new(9);
        Model::new(&mut store, cfg.clone()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &store).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn missing_file_is_missing() {
        let err = load(Path::new("/nonexistent/dir/model.tcf")).unwrap_err();
        assert!(matches!(err, Error::Missing(_)));
    }
}
