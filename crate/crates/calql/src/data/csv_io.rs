use super::{mc_from_rewards, Composition, DataError, OfflineDataset, Transition};
use crate::env::{Action, State};
use std::collections::BTreeMap;
use std::path::Path;

pub const DATASET_HEADER: [&str; 9] = ["s", "a", "r", "s_next", "done", "truncated", "mc_return", "traj_id", "step_idx"];

const MC_TOL: f64 = 1e-6;

fn join_floats(v: &[f64]) -> String {
    // Debug formatting keeps a decimal point, so a 1-vector never reads back as an id.
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

fn state_field(s: &State) -> String {
    match s {
        State::Id(i) => i.to_string(),
        State::Features(v) => join_floats(v),
    }
}

fn action_field(a: &Action) -> String {
    match a {
        Action::Id(i) => i.to_string(),
        Action::Vector(v) => join_floats(v),
    }
}

fn parse_floats(field: &str) -> Result<Vec<f64>, DataError> {
    field
        .split(';')
        .map(|x| x.trim().parse::<f64>().map_err(|e| DataError::Csv(format!("bad number {x:?}: {e}"))))
        .collect()
}

fn parse_state(field: &str) -> Result<State, DataError> {
    match field.trim().parse::<usize>() {
        Ok(i) => Ok(State::Id(i)),
        Err(_) => parse_floats(field).map(State::Features),
    }
}

fn parse_action(field: &str) -> Result<Action, DataError> {
    match field.trim().parse::<usize>() {
        Ok(i) => Ok(Action::Id(i)),
        Err(_) => parse_floats(field).map(Action::Vector),
    }
}

fn parse_flag(field: &str) -> Result<bool, DataError> {
    match field.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(DataError::Csv(format!("bad flag {other:?}"))),
    }
}

pub fn save_dataset_csv(ds: &OfflineDataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
    w.write_record(DATASET_HEADER).map_err(|e| DataError::Csv(e.to_string()))?;
    for t in &ds.transitions {
        w.write_record([
            state_field(&t.s),
            action_field(&t.a),
            format!("{:?}", t.r),
            state_field(&t.s_next),
            (t.done as u8).to_string(),
            (t.truncated as u8).to_string(),
            format!("{:?}", t.mc_return),
            t.traj_id.to_string(),
            t.step_idx.to_string(),
        ])
        .map_err(|e| DataError::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads and validates a dataset: per-trajectory chaining, terminal placement,
/// and stored return-to-go against a recomputation with `gamma`.
pub fn load_dataset_csv(path: &Path, gamma: f64, composition: Composition) -> Result<OfflineDataset, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
    let header = r.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != DATASET_HEADER {
        return Err(DataError::Csv(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut transitions = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|e| DataError::Csv(format!("column {}: {e}", DATASET_HEADER[i])));
        let int = |i: usize| rec[i].trim().parse::<usize>().map_err(|e| DataError::Csv(format!("column {}: {e}", DATASET_HEADER[i])));
        transitions.push(Transition {
            s: parse_state(&rec[0])?,
            a: parse_action(&rec[1])?,
            r: num(2)?,
            s_next: parse_state(&rec[3])?,
            done: parse_flag(&rec[4])?,
            truncated: parse_flag(&rec[5])?,
            mc_return: num(6)?,
            mc_unreliable: false,
            traj_id: int(7)?,
            step_idx: int(8)?,
        });
    }
    if transitions.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in transitions.iter().enumerate() {
        groups.entry(t.traj_id).or_default().push(i);
    }
    for (&traj_id, idx) in &mut groups {
        idx.sort_by_key(|&i| transitions[i].step_idx);
        for (k, w) in idx.windows(2).enumerate() {
            let (a, b) = (&transitions[w[0]], &transitions[w[1]]);
            if b.step_idx != a.step_idx + 1 {
                return Err(DataError::BadTrajectory { traj_id, msg: format!("step_idx gap after position {k}") });
            }
            if a.s_next != b.s {
                return Err(DataError::BadTrajectory { traj_id, msg: format!("step {} does not chain into the next", a.step_idx) });
            }
            if a.done {
                return Err(DataError::BadTrajectory { traj_id, msg: "done flag before the final step".into() });
            }
        }
        let rewards: Vec<f64> = idx.iter().map(|&i| transitions[i].r).collect();
        let expected = mc_from_rewards(&rewards, gamma);
        let unreliable = !transitions[*idx.last().unwrap()].done;
        for (&i, g) in idx.iter().zip(expected) {
            let t = &mut transitions[i];
            if (t.mc_return - g).abs() > MC_TOL {
                return Err(DataError::McMismatch { traj_id, step_idx: t.step_idx, stored: t.mc_return, expected: g });
            }
            t.mc_unreliable = unreliable;
        }
    }
    Ok(OfflineDataset { transitions, composition, gamma_used: gamma })
}
