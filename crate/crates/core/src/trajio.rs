//! Plain-text trajectory files.
//!
//! ```text
//! # i2rl-trajectories v1
//! trajectory 0 3
//! 1 4 0
//! 2 HIDDEN
//! 3 6 1
//! ```
//!
//! After the version line, each trajectory starts with
//! `trajectory <index> <length>` followed by one line per step: the 1-based
//! time step and either `<state> <action>` or `HIDDEN`. Blank lines and
//! further `#` comments are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{IrlError, Result};
use crate::latent::{ObservedTrajectory, Step};

pub const HEADER: &str = "# i2rl-trajectories v1";

pub fn to_string(ys: &[ObservedTrajectory]) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for (i, y) in ys.iter().enumerate() {
        let _ = writeln!(out, "trajectory {i} {}", y.len());
        for (t, step) in y.steps().iter().enumerate() {
            let _ = match step {
                Step::Observed(s, a) => writeln!(out, "{} {s} {a}", t + 1),
                Step::Hidden => writeln!(out, "{} HIDDEN", t + 1),
            };
        }
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<ObservedTrajectory>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == HEADER => {}
        _ => return Err(parse_error(1, &format!("expected header '{HEADER}'"))),
    }
    let mut out = Vec::new();
    let mut current: Option<(usize, Vec<Step>)> = None;
    let finish = |cur: Option<(usize, Vec<Step>)>,
                  out: &mut Vec<ObservedTrajectory>,
                  line: usize|
     -> Result<()> {
        if let Some((len, steps)) = cur {
            if steps.len() != len {
                return Err(parse_error(
                    line,
                    &format!("trajectory declared {len} steps, found {}", steps.len()),
                ));
            }
            out.push(ObservedTrajectory::new(steps)?);
        }
        Ok(())
    };
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "trajectory" {
            finish(current.take(), &mut out, line_no)?;
            let [_, idx, len] = fields[..] else {
                return Err(parse_error(
                    line_no,
                    "expected 'trajectory <index> <length>'",
                ));
            };
            let idx: usize = number(idx, line_no)?;
            if idx != out.len() {
                return Err(parse_error(
                    line_no,
                    &format!("expected trajectory {}, got {idx}", out.len()),
                ));
            }
            current = Some((number(len, line_no)?, Vec::new()));
            continue;
        }
        let Some((_, steps)) = current.as_mut() else {
            return Err(parse_error(line_no, "step before any trajectory header"));
        };
        let t: usize = number(fields[0], line_no)?;
        if t != steps.len() + 1 {
            return Err(parse_error(
                line_no,
                &format!("expected step {}, got {t}", steps.len() + 1),
            ));
        }
        let step = match fields[1..] {
            ["HIDDEN"] => Step::Hidden,
            [s, a] => Step::Observed(number(s, line_no)?, number(a, line_no)?),
            _ => {
                return Err(parse_error(
                    line_no,
                    "expected '<t> <state> <action>' or '<t> HIDDEN'",
                ))
            }
        };
        steps.push(step);
    }
    let end = text.lines().count();
    finish(current, &mut out, end)?;
    Ok(out)
}

fn number(field: &str, line: usize) -> Result<usize> {
    field
        .parse()
        .map_err(|_| parse_error(line, &format!("'{field}' is not a non-negative integer")))
}

fn parse_error(line: usize, msg: &str) -> IrlError {
    IrlError::InvalidTrajectory(format!("line {line}: {msg}"))
}

pub fn save(path: &Path, ys: &[ObservedTrajectory]) -> Result<()> {
    std::fs::write(path, to_string(ys))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<ObservedTrajectory>> {
    parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<ObservedTrajectory> {
        vec![
            ObservedTrajectory::new(vec![
                Step::Observed(4, 0),
                Step::Hidden,
                Step::Observed(6, 1),
            ])
            .unwrap(),
            ObservedTrajectory::new(vec![Step::Hidden]).unwrap(),
        ]
    }

    #[test]
    fn round_trip_preserves_hidden_markers() {
        let ys = sample();
        let text = to_string(&ys);
        assert_eq!(parse(&text).unwrap(), ys);
        assert_eq!(text.lines().count(), 1 + 2 + 4);
        assert!(text.contains("2 HIDDEN"));
    }

    #[test]
    fn malformed_input_names_the_line() {
        let bad = format!("{HEADER}\ntrajectory 0 2\n1 3 0\n3 4 1\n");
        let err = parse(&bad).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        assert!(parse("trajectory 0 1\n1 0 0\n").is_err());
        let short = format!("{HEADER}\ntrajectory 0 3\n1 3 0\n");
        assert!(parse(&short).is_err());
    }
}
