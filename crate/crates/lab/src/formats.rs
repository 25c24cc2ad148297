//! Line-oriented text formats for environment flows and event logs.
//!
//! Numbers are written in Rust's shortest round-trip decimal form, so
//! `parse(write(x)) == x` bit for bit. Blank lines and lines starting with
//! `#` are ignored.
//!
//! Environment flow:
//!
//! ```text
//! horizon,1
//! dim,1
//! 0,-0.5,0.25,1,0.75
//! 0.5,2,1
//! ```
//!
//! where every record is a breakpoint followed by `(point..., weight)`
//! atoms. Event log:
//!
//! ```text
//! horizon,1
//! channels,2
//! 0.125,0,0,1
//! ```
//!
//! with records `time,channel,cell,mark`.

use fbsde_core::measures::{EmpiricalMeasure, EnvironmentPath};
use fbsde_core::pointproc::{EventLog, MarkedEvent};

use crate::error::LabError;

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split(',').map(str::trim).collect()))
    })
}

fn bad(line: usize, message: impl Into<String>) -> LabError {
    LabError::Format { line, message: message.into() }
}

fn num(line: usize, s: &str) -> Result<f64, LabError> {
    s.parse::<f64>().map_err(|_| bad(line, format!("not a number: {s:?}")))
}

fn int(line: usize, s: &str) -> Result<usize, LabError> {
    s.parse::<usize>().map_err(|_| bad(line, format!("not a non-negative integer: {s:?}")))
}

/// Reads a `key,value` header record.
fn header<'a>(it: &mut impl Iterator<Item = (usize, Vec<&'a str>)>, key: &str) -> Result<(usize, &'a str), LabError> {
    match it.next() {
        Some((line, f)) if f.len() == 2 && f[0] == key => Ok((line, f[1])),
        Some((line, _)) => Err(bad(line, format!("expected `{key},<value>`"))),
        None => Err(bad(0, format!("missing `{key}` header"))),
    }
}

pub fn write_environment(env: &EnvironmentPath) -> String {
    let mut s = format!("horizon,{}\ndim,{}\n", env.horizon(), env.dim());
    for (t, nu) in env.breakpoints().iter().zip(env.values()) {
        s.push_str(&t.to_string());
        for (point, w) in nu.atoms() {
            for x in point {
                s.push_str(&format!(",{x}"));
            }
            s.push_str(&format!(",{w}"));
        }
        s.push('\n');
    }
    s
}

pub fn parse_environment(text: &str) -> Result<EnvironmentPath, LabError> {
    let mut it = records(text);
    let (line, h) = header(&mut it, "horizon")?;
    let horizon = num(line, h)?;
    let (line, d) = header(&mut it, "dim")?;
    let dim = int(line, d)?;
    if dim == 0 {
        return Err(bad(line, "dimension must be positive"));
    }
    let (mut times, mut values) = (Vec::new(), Vec::new());
    for (line, f) in it {
        let rest = &f[1..];
        if rest.is_empty() || rest.len() % (dim + 1) != 0 {
            return Err(bad(line, format!("expected a time and groups of {} numbers", dim + 1)));
        }
        times.push(num(line, f[0])?);
        let (mut points, mut weights) = (Vec::new(), Vec::new());
        for atom in rest.chunks(dim + 1) {
            for x in &atom[..dim] {
                points.push(num(line, x)?);
            }
            weights.push(num(line, atom[dim])?);
        }
        values.push(EmpiricalMeasure::new(dim, points, weights).map_err(|e| bad(line, e.to_string()))?);
    }
    EnvironmentPath::new(horizon, times, values).map_err(|e| bad(0, e.to_string()))
}

pub fn write_event_log(log: &EventLog) -> String {
    let mut s = format!("horizon,{}\nchannels,{}\n", log.horizon(), log.channels());
    for e in log.events() {
        s.push_str(&format!("{},{},{},{}\n", e.time, e.channel, e.cell, e.mark));
    }
    s
}

pub fn parse_event_log(text: &str) -> Result<EventLog, LabError> {
    let mut it = records(text);
    let (line, h) = header(&mut it, "horizon")?;
    let horizon = num(line, h)?;
    let (line, c) = header(&mut it, "channels")?;
    let channels = int(line, c)?;
    let mut events = Vec::new();
    for (line, f) in it {
        if f.len() != 4 {
            return Err(bad(line, "expected `time,channel,cell,mark`"));
        }
        events.push(MarkedEvent { time: num(line, f[0])?, channel: int(line, f[1])?, cell: int(line, f[2])?, mark: num(line, f[3])? });
    }
    EventLog::new(horizon, channels, events).map_err(|e| bad(0, e.to_string()))
}
