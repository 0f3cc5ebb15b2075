//! Command line tools and HTTP front end for trained checkpoints.

pub mod assess;
pub mod cli;
pub mod http;

pub use assess::{AssessError, AssessRequest, AssessResponse, Assessor, FieldError, WhatIfPoint, WhatIfRequest};
