use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid array: {0}")]
    InvalidArray(String),

    #[error("no recorded computation on tape")]
    EmptyTape,

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("t = {t} outside path domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("input error: {0}")]
    Input(String),

    #[error("channel {channel} has {observed} observations, need at least 2")]
    SparseChannel { channel: usize, observed: usize },

    #[error("non-finite dynamics at t = {t}")]
    NonFinite { t: f64 },

    #[error("max_steps exceeded at t = {t}")]
    MaxSteps { t: f64 },

    #[error("step size underflow at t = {t} (h = {h:e}); problem may be stiff")]
    Stiff { t: f64, h: f64 },

    #[error("field spec error in layer {layer}: {msg}")]
    FieldSpec { layer: usize, msg: String },

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("config error: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
