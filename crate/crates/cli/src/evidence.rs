//! Parsing of evidence strings such as `X0=1,X2=0`.

use sobn_core::{Error, Observation, Result, Structure};

fn at(pos: usize, msg: String) -> Error {
    Error::Argument(format!("evidence: {msg} at position {pos}"))
}

/// Positions in messages are 1-based character columns.
pub fn parse(structure: &Structure, text: &str) -> Result<Observation> {
    let mut evidence = Observation::empty(structure.len());
    if text.trim().is_empty() {
        return Ok(evidence);
    }
    let mut start = 0;
    for pair in text.split(',') {
        let col = text[..start].chars().count() + 1;
        start += pair.len() + 1;
        let lead = pair.len() - pair.trim_start().len();
        let pos = col + pair[..lead].chars().count();
        let Some((id, value)) = pair.split_once('=') else {
            return Err(at(pos, format!("expected NODE=VALUE, got {:?}", pair.trim())));
        };
        let value_pos = col + pair[..id.len() + 1].chars().count();
        let (id, value) = (id.trim(), value.trim());
        if id.is_empty() {
            return Err(at(pos, "missing node id".into()));
        }
        let node = structure.node_index(id).ok_or_else(|| at(pos, format!("unknown node {id:?}")))?;
        if value.is_empty() {
            return Err(at(value_pos, format!("missing value for {id}")));
        }
        let v: usize = value.parse().map_err(|_| at(value_pos, format!("invalid value {value:?}")))?;
        let card = structure.cardinality(node);
        if v >= card {
            return Err(at(value_pos, format!("value {v} out of range for {id} (cardinality {card})")));
        }
        if evidence.0[node].replace(v).is_some() {
            return Err(at(pos, format!("{id} given twice")));
        }
    }
    Ok(evidence)
}
