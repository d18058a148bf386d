use thiserror::Error;

#[derive(Debug, Error)]
pub enum CqmError {
    #[error("maze parse error at line {line}, column {column}: unexpected character {ch:?}")]
    MazeParse { line: usize, column: usize, ch: char },

    #[error("invalid maze: {0}")]
    MazeInvalid(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: &'static str, detail: String },

    #[error("unknown landmark id {0}")]
    UnknownVertex(usize),

    #[error("cannot select {requested} landmarks out of {available} candidates")]
    TooFewCandidates { requested: usize, available: usize },

    #[error("no landmark is reachable from the initial-state landmark")]
    NoReachableLandmark,

    #[error("visit counts are for graph generation {counts} but the graph is at generation {graph}")]
    GenerationMismatch { counts: u64, graph: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("config mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("episode {episode}, stage {stage}: {source}")]
    Stage {
        episode: usize,
        stage: &'static str,
        #[source]
        source: Box<CqmError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CqmError {
    pub fn at(self, episode: usize, stage: &'static str) -> Self {
        CqmError::Stage { episode, stage, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, CqmError>;
