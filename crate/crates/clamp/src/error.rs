use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Input(String),
    #[error("configuration: {0}")]
    Config(String),
    /// A checkpoint does not fit the requested model or dataset.
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("self-check failed: {0}")]
    SelfCheck(String),
    #[error(transparent)]
    Core(#[from] clamp_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 bad input, 3 configuration or checkpoint
    /// mismatch, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use clamp_core::Error as C;
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Input(_) => 2,
            Error::Config(_) | Error::Mismatch(_) => 3,
            Error::SelfCheck(_) => 1,
            Error::Core(e) => match e {
                C::Schema(_)
                | C::KeypointArity { .. }
                | C::Record { .. }
                | C::EmptyDataset
                | C::UnknownFamily(_)
                | C::OverlappingFamilies(_)
                | C::DegenerateBox { .. }
                | C::Untokenizable { .. }
                | C::UnknownInstance(_)
                | C::NoLabeledKeypoints(_) => 2,
                C::Config(_) | C::UnknownParam(_) | C::Shape { .. } => 3,
                _ => 1,
            },
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file so readers never see a partial
/// file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
