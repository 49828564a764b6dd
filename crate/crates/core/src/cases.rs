//! Built-in test cases.

use crate::grid::{parse_case, Network};

const IEEE39: &str = include_str!("../data/ieee39.json");

/// The IEEE 39-bus (New England) system, per-unit on 100 MVA. Bus `k` here
/// is bus `k + 1` of the usual numbering; bus 31 is the slack.
pub fn ieee39() -> Network {
    parse_case(IEEE39).expect("embedded IEEE 39-bus case is valid")
}

/// Resolves `name` to a built-in case.
pub fn builtin(name: &str) -> Option<Network> {
    match name {
        "ieee39" | "case39" => Some(ieee39()),
        _ => None,
    }
}
