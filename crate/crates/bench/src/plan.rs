use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// The operation a load step exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Validator,
    Registration,
    Mapping,
    Publish,
    Consume,
}

impl Target {
    pub const ALL: [Target; 5] =
        [Target::Validator, Target::Registration, Target::Mapping, Target::Publish, Target::Consume];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Validator => "validator",
            Target::Registration => "registration",
            Target::Mapping => "mapping",
            Target::Publish => "publish",
            Target::Consume => "consume",
        }
    }

    /// 1,000..10,000 step 1,000 for message targets, 100..1,000 step 100 for
    /// registration and mapping.
    pub fn default_steps(self) -> Vec<u64> {
        match self {
            Target::Registration | Target::Mapping => (1..=10).map(|i| i * 100).collect(),
            _ => (1..=10).map(|i| i * 1000).collect(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s {
            "validator" => Ok(Target::Validator),
            "registration" => Ok(Target::Registration),
            "mapping" | "queue-mapping" => Ok(Target::Mapping),
            "publish" => Ok(Target::Publish),
            "consume" => Ok(Target::Consume),
            other => Err(PlanError::UnknownTarget(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("bad step range `{0}`; expected `start..end:step` with 0 < start <= end and step > 0")]
    BadSteps(String),
}

/// Parses `start..end:step` (end inclusive), e.g. `1000..10000:1000`. A bare
/// number is a single step.
pub fn parse_steps(spec: &str) -> Result<Vec<u64>, PlanError> {
    let bad = || PlanError::BadSteps(spec.to_owned());
    if let Ok(single) = spec.trim().parse::<u64>() {
        return if single > 0 { Ok(vec![single]) } else { Err(bad()) };
    }
    let (range, step) = spec.trim().split_once(':').ok_or_else(bad)?;
    let (start, end) = range.split_once("..").ok_or_else(bad)?;
    let start: u64 = start.parse().map_err(|_| bad())?;
    let end: u64 = end.parse().map_err(|_| bad())?;
    let step: u64 = step.parse().map_err(|_| bad())?;
    if start == 0 || end < start || step == 0 {
        return Err(bad());
    }
    Ok((start..=end).step_by(step as usize).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchPlan {
    pub target: Target,
    pub steps: Vec<u64>,
    pub repeats: u32,
    pub base_url: String,
    /// Parallel client workers within a step; 1 means sequential.
    pub concurrency: usize,
    /// Messages fetched per consume request.
    pub consume_batch: usize,
}

impl BenchPlan {
    pub const DEFAULT_REPEATS: u32 = 10;
    pub const DEFAULT_CONSUME_BATCH: usize = 100;

    pub fn new(target: Target, base_url: impl Into<String>) -> Self {
        Self {
            target,
            steps: target.default_steps(),
            repeats: Self::DEFAULT_REPEATS,
            base_url: base_url.into(),
            concurrency: 1,
            consume_batch: Self::DEFAULT_CONSUME_BATCH,
        }
    }

    /// CSV label: the target name, suffixed `@k` when run with k workers.
    pub fn label(&self) -> String {
        if self.concurrency > 1 {
            format!("{}@{}", self.target, self.concurrency)
        } else {
            self.target.to_string()
        }
    }
}
