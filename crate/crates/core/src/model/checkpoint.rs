//! Model checkpoints: a text header with the configuration followed by the
//! binary parameter container.
//!
//! ```text
//! scratch-st checkpoint
//! format_version=1
//! n_enc=4
//! ...
//! end
//! <parameter container bytes>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig};
use crate::autodiff::{ParamStore, TensorError};
use crate::config::{self, ConfigError, KeyValue};

pub const CHECKPOINT_MAGIC: &str = "scratch-st checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const HEADER_END: &str = "end";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (missing header line)")]
    Magic,
    #[error("checkpoint format version {found} is not supported (expected {CHECKPOINT_FORMAT_VERSION})")]
    Version { found: String },
    #[error("checkpoint header: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint parameters: {0}")]
    Params(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Model {
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "format_version={CHECKPOINT_FORMAT_VERSION}")?;
        w.write_all(config::render(&self.cfg).as_bytes())?;
        writeln!(w, "{HEADER_END}")?;
        self.params.write_to(&mut w)?;
        Ok(())
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut header = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CheckpointError::Magic);
            }
            if line.trim_end() == HEADER_END {
                break;
            }
            header.push_str(&line);
        }
        let mut cfg = ModelConfig::desk(4);
        let mut version = None;
        for (k, v) in config::parse_text(&header)? {
            if k == "format_version" {
                version = Some(v);
            } else if !cfg.set_key(&k, &v)? {
                return Err(ConfigError::UnknownKey(k).into());
            }
        }
        match version {
            Some(v) if v == CHECKPOINT_FORMAT_VERSION.to_string() => {}
            other => return Err(CheckpointError::Version { found: other.unwrap_or_else(|| "<missing>".into()) }),
        }
        let params = ParamStore::read_from(&mut r)?;
        let mut model = Model::new(cfg, 0)?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}
