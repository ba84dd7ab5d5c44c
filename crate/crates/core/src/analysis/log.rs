//! Trial logs: one comma-separated record per played trial, behind a
//! schema line.

use std::io::{BufRead, BufReader, Read, Write};

use crate::agent::TrialResult;
use crate::environment::{Action, Location, Outcome, N_PATCHES, N_STEPS};
use crate::error::{Error, Result};

/// First line of every trial log.
pub const TRIAL_LOG_SCHEMA: &str = "# vstb trial-log v1";

/// One played trial as stored in a log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub seed: u64,
    pub cue_pos: Location,
    pub validity: f64,
    pub change_trial: bool,
    pub change_pos: Option<Location>,
    pub delta: f64,
    pub end_t: usize,
    pub actions: Vec<Action>,
    pub reward: u8,
    pub outcome: Outcome,
    /// Column sums α at every step.
    pub alpha: [[f64; N_PATCHES]; N_STEPS],
    /// `V(H_t)` per step, when the agent has a critic.
    pub values: Option<[f64; N_STEPS]>,
    /// TD errors up to the end of the trial, when the agent has a critic.
    pub td: Option<Vec<f64>>,
}

impl TrialRecord {
    pub fn from_result(trial_id: usize, r: &TrialResult) -> Self {
        let mut alpha = [[0.0; N_PATCHES]; N_STEPS];
        for (dst, a) in alpha.iter_mut().zip(r.alpha()) {
            *dst = a;
        }
        let values = (r.values.len() == N_STEPS).then(|| {
            let mut v = [0.0; N_STEPS];
            v.copy_from_slice(&r.values);
            v
        });
        Self {
            trial_id,
            seed: r.spec.seed,
            cue_pos: r.spec.cue_position,
            validity: r.spec.cue_validity.value(),
            change_trial: r.spec.is_change_trial,
            change_pos: r.spec.change_position,
            delta: r.spec.delta,
            end_t: r.end_t,
            actions: r.actions.clone(),
            reward: r.reward,
            outcome: r.outcome,
            alpha,
            values,
            td: values.map(|_| r.td.clone()),
        }
    }

    /// Whether the agent declared a change (on its last action).
    pub fn declared(&self) -> bool {
        self.actions.last() == Some(&Action::Declare)
    }
}

/// Column names in their fixed order.
pub fn trial_log_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "trial_id",
        "seed",
        "cue_pos",
        "validity",
        "change_trial",
        "change_pos",
        "delta",
        "end_t",
        "actions",
        "reward",
        "outcome",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for t in 0..N_STEPS {
        for j in 0..N_PATCHES {
            h.push(format!("alpha_t{t}_s{}", j + 1));
        }
    }
    h.extend((0..N_STEPS).map(|t| format!("v_t{t}")));
    h.extend((0..N_STEPS).map(|t| format!("td_t{t}")));
    h
}

fn action_code(a: Action) -> char {
    match a {
        Action::Wait => 'W',
        Action::Declare => 'D',
    }
}

/// Serialized writer for trial logs.
pub struct TrialLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TrialLogWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{TRIAL_LOG_SCHEMA}")?;
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(trial_log_header()).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &TrialRecord) -> Result<()> {
        let mut row = vec![
            r.trial_id.to_string(),
            r.seed.to_string(),
            r.cue_pos.to_string(),
            r.validity.to_string(),
            u8::from(r.change_trial).to_string(),
            r.change_pos.map(|l| l.to_string()).unwrap_or_default(),
            r.delta.to_string(),
            r.end_t.to_string(),
            r.actions.iter().map(|&a| action_code(a)).collect(),
            r.reward.to_string(),
            r.outcome.code().to_string(),
        ];
        row.extend(r.alpha.iter().flatten().map(f64::to_string));
        match &r.values {
            Some(v) => row.extend(v.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), N_STEPS)),
        }
        let td = r.td.as_deref().unwrap_or(&[]);
        row.extend((0..N_STEPS).map(|t| td.get(t).map(f64::to_string).unwrap_or_default()));
        self.inner.write_record(&row).map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_trial_log<W: Write>(out: W, records: &[TrialRecord]) -> Result<()> {
    let mut w = TrialLogWriter::new(out)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, line: usize) -> Result<&'a str> {
    rec.get(i).ok_or_else(|| Error::Format(format!("trial log record {line}: missing field {i}")))
}

fn parse<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("trial log record {line}: bad {name} {s:?}")))
}

pub fn read_trial_log<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let first = first.trim_end();
    if first != TRIAL_LOG_SCHEMA {
        return Err(Error::SchemaVersion {
            expected: TRIAL_LOG_SCHEMA.into(),
            found: first.into(),
        });
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != trial_log_header() {
        return Err(Error::Format("trial log header does not match the schema".into()));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let f = |i| field(&rec, i, line);
        let change_pos = match f(5)? {
            "" => None,
            s => Some(parse::<Location>(s, "change_pos", line)?),
        };
        let actions = f(8)?
            .chars()
            .map(|c| match c {
                'W' => Ok(Action::Wait),
                'D' => Ok(Action::Declare),
                other => Err(Error::Format(format!("trial log record {line}: action {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut alpha = [[0.0; N_PATCHES]; N_STEPS];
        for t in 0..N_STEPS {
            for j in 0..N_PATCHES {
                alpha[t][j] = parse(f(11 + t * N_PATCHES + j)?, "alpha", line)?;
            }
        }
        let vbase = 11 + N_STEPS * N_PATCHES;
        let values = if f(vbase)?.is_empty() {
            None
        } else {
            let mut v = [0.0; N_STEPS];
            for (t, x) in v.iter_mut().enumerate() {
                *x = parse(f(vbase + t)?, "value", line)?;
            }
            Some(v)
        };
        let tdbase = vbase + N_STEPS;
        let td: Vec<f64> = (0..N_STEPS)
            .map(|t| f(tdbase + t))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|s| !s.is_empty())
            .map(|s| parse(s, "td", line))
            .collect::<Result<_>>()?;
        out.push(TrialRecord {
            trial_id: parse(f(0)?, "trial_id", line)?,
            seed: parse(f(1)?, "seed", line)?,
            cue_pos: parse(f(2)?, "cue_pos", line)?,
            validity: parse(f(3)?, "validity", line)?,
            change_trial: parse::<u8>(f(4)?, "change_trial", line)? == 1,
            change_pos,
            delta: parse(f(6)?, "delta", line)?,
            end_t: parse(f(7)?, "end_t", line)?,
            actions,
            reward: parse(f(9)?, "reward", line)?,
            outcome: parse(f(10)?, "outcome", line)?,
            alpha,
            values,
            td: values.map(|_| td),
        });
    }
    Ok(out)
}
