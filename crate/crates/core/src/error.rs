use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("self-loop on node `{0}` is not allowed")]
    SelfLoop(String),
    #[error("node `{id}` has invalid population: {reason}")]
    InvalidPopulation { id: String, reason: String },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("node `{node}` has no unit for level `{level}`")]
    MissingUnit { node: String, level: String },
    #[error("levels are not nested: unit `{unit}` of level `{fine}` straddles units of level `{coarse}`")]
    NotNested {
        unit: String,
        fine: String,
        coarse: String,
    },
    #[error("administrative unit `{unit}` (level `{level}`) is disconnected within the region")]
    DisconnectedUnit { unit: String, level: String },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible population bounds at stage {stage}: lower {lower:.3} > upper {upper:.3}")]
    InfeasibleBounds { stage: usize, lower: f64, upper: f64 },
    #[error("stage {stage} starved: {rejections} consecutive rejections with {accepted} of {needed} particles accepted")]
    StageStarved {
        stage: usize,
        rejections: u64,
        accepted: usize,
        needed: usize,
    },
    #[error("all particle weights are zero at stage {0}")]
    DegenerateWeights(usize),
    #[error("enumeration cap of {0} plans exceeded; use a smaller instance or raise the cap")]
    CapExceeded(u64),
    #[error("enumeration supports at most 128 nodes (got {0})")]
    TooManyNodes(usize),
    #[error("empty support: {0}")]
    EmptySupport(String),
    #[error("unknown {kind} `{name}`; registered: {available}")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
