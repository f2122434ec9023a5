use std::fmt;

use hemgs::codec::CodecError;
use hemgs::context::ContextError;
use hemgs::hemgs::HemgsError;
use hemgs::nn::NnError;
use hemgs::scene::SceneError;
use hemgs::trainer::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Internal,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Internal => "internal",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Internal => 3,
        }
    }
}

/// Bad arguments or option combinations.
#[derive(Debug)]
pub struct Usage(pub String);

/// A broken library invariant.
#[derive(Debug)]
pub struct Internal(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Internal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for Internal {}

/// Picks the exit class from the innermost recognized error. Anything
/// unrecognized (plain i/o, parse failures of input files) is a data error.
pub fn classify(e: &anyhow::Error) -> Kind {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return Kind::Usage;
        }
        if cause.is::<Internal>() {
            return Kind::Internal;
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::Config(_) => Kind::Usage,
                TrainError::Model(h) => hemgs_kind(h),
                _ => Kind::Data,
            };
        }
        if let Some(h) = cause.downcast_ref::<HemgsError>() {
            return hemgs_kind(h);
        }
        if let Some(c) = cause.downcast_ref::<CodecError>() {
            return match c {
                CodecError::Model(h) => hemgs_kind(h),
                _ => Kind::Data,
            };
        }
        if cause.is::<SceneError>() || cause.is::<NnError>() || cause.is::<ContextError>() {
            return Kind::Data;
        }
    }
    Kind::Data
}

fn hemgs_kind(h: &HemgsError) -> Kind {
    match h {
        HemgsError::Lambda(_) => Kind::Usage,
        HemgsError::Causality { .. } => Kind::Internal,
        _ => Kind::Data,
    }
}
