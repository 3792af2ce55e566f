use crate::Rank;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unsupported configuration: rank count {0} is not a power of two >= 2")]
    UnsupportedRankCount(u32),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("rank {rank} out of range for {p} ranks")]
    RankOutOfRange { rank: Rank, p: u32 },
    #[error("step {step} out of range for a {steps}-step pattern")]
    StepOutOfRange { step: u32, steps: u32 },
    #[error("negabinary code width {width} does not match rank count {p}")]
    WidthMismatch { width: u32, p: u32 },
    #[error("invalid negabinary code: {0}")]
    InvalidCode(String),
    #[error("value {value} is not representable with {width} negabinary digits")]
    NotRepresentable { value: i64, width: u32 },
    #[error("rank {0} is the root and has no parent")]
    RootHasNoParent(Rank),
    #[error("vector of {n} bytes cannot be split into {blocks} blocks")]
    VectorTooSmall { n: u64, blocks: u32 },
    #[error("schedule defect at step {step}, transfer {transfer}: {reason}")]
    ScheduleDefect {
        step: usize,
        transfer: usize,
        reason: String,
    },
    #[error("rank count mismatch: schedule has {schedule} ranks, group map has {groups}")]
    RankCountMismatch { schedule: u32, groups: u32 },
    #[error("schedules are not comparable: {0}")]
    NotComparable(String),
    #[error("invalid group map: {0}")]
    InvalidGroupMap(String),
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
