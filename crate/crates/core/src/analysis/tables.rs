//! CSV summaries: psychometric points and fits, SDT estimates, confusion
//! matrices, attention and value timecourses.

use std::io::{Read, Write};

use super::{BehaviorRow, ProbeDataset, PsychometricFit, PsychometricPoint, SdtEstimate, TrialRecord};
use crate::agent::TrainLogEntry;
use crate::environment::{N_PATCHES, N_STEPS};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn write_rows<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// A parsed CSV table: header plus string cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column {name:?}")))
    }

    /// Column `name` parsed as numbers; empty cells become NaN.
    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|r| match r[c].as_str() {
                "" => Ok(f64::NAN),
                s => s.parse().map_err(|_| Error::Format(format!("bad number {s:?} in {name}"))),
            })
            .collect()
    }
}

pub fn read_table<R: Read>(input: R) -> Result<CsvTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(csv_err))
        .collect::<Result<_>>()?;
    Ok(CsvTable { header, rows })
}

pub fn write_psychometric_points<W: Write>(out: W, points: &[PsychometricPoint]) -> Result<()> {
    write_rows(
        out,
        &["delta", "rate", "lo", "hi", "n"],
        points.iter().map(|p| {
            vec![p.delta.to_string(), p.rate.to_string(), p.lo.to_string(), p.hi.to_string(), p.n.to_string()]
        }),
    )
}

pub fn write_psychometric_fit<W: Write>(out: W, fit: &PsychometricFit) -> Result<()> {
    write_rows(
        out,
        &["param", "value", "se"],
        ["A", "B", "C", "D"]
            .iter()
            .enumerate()
            .map(|(i, n)| vec![n.to_string(), fit.params[i].to_string(), fit.se[i].to_string()])
            .chain(std::iter::once(vec!["residual".into(), fit.residual.to_string(), String::new()])),
    )
}

/// One labeled SDT row.
#[derive(Debug, Clone, PartialEq)]
pub struct SdtRow {
    pub label: String,
    pub estimate: SdtEstimate,
}

pub fn write_sdt<W: Write>(out: W, rows: &[SdtRow]) -> Result<()> {
    write_rows(
        out,
        &["condition", "n_change", "n_no_change", "hit_rate", "fa_rate", "c", "se_c", "d_prime", "se_d_prime", "clamped"],
        rows.iter().map(|r| {
            let e = &r.estimate;
            vec![
                r.label.clone(),
                e.n_ct.to_string(),
                e.n_nt.to_string(),
                e.theta_h.to_string(),
                e.theta_fa.to_string(),
                e.c.to_string(),
                e.var_c.sqrt().to_string(),
                e.d_prime.to_string(),
                e.var_d.sqrt().to_string(),
                u8::from(e.clamped_h || e.clamped_fa).to_string(),
            ]
        }),
    )
}

/// Behavior counts per condition.
pub fn write_behavior<W: Write>(out: W, rows: &[BehaviorRow]) -> Result<()> {
    write_rows(
        out,
        &["cue_pos", "validity", "change_pos", "delta", "n", "n_declare", "mean_rt", "hit", "miss", "fa", "cr"],
        rows.iter().map(|r| {
            let c = &r.condition;
            vec![
                c.cue_pos.to_string(),
                c.validity.to_string(),
                c.change_pos.map(|l| l.to_string()).unwrap_or_default(),
                c.delta.to_string(),
                r.n_trials.to_string(),
                r.n_declare.to_string(),
                (r.rt_sum as f64 / r.n_trials.max(1) as f64).to_string(),
                r.n_hit.to_string(),
                r.n_miss.to_string(),
                r.n_fa.to_string(),
                r.n_cr.to_string(),
            ]
        }),
    )
}

/// Confusion matrix with `true` labels down the rows.
pub fn write_confusion<W: Write>(out: W, m: &[Vec<f64>]) -> Result<()> {
    let k = m.len();
    let mut header = vec!["true".to_string()];
    header.extend((0..k).map(|c| format!("pred_{c}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        out,
        &header_refs,
        m.iter().enumerate().map(|(i, row)| {
            let mut r = vec![i.to_string()];
            r.extend(row.iter().map(f64::to_string));
            r
        }),
    )
}

/// Mean column sums per step, `[t][patch]`.
pub fn attention_timecourse(records: &[TrialRecord]) -> Result<[[f64; N_PATCHES]; N_STEPS]> {
    if records.is_empty() {
        return Err(Error::MissingData("attention timecourse of no trials".into()));
    }
    let mut m = [[0.0; N_PATCHES]; N_STEPS];
    for r in records {
        for (dst, src) in m.iter_mut().zip(&r.alpha) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let n = records.len() as f64;
    m.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(m)
}

pub fn write_attention<W: Write>(out: W, m: &[[f64; N_PATCHES]; N_STEPS]) -> Result<()> {
    write_rows(
        out,
        &["t", "alpha_s1", "alpha_s2", "alpha_s3", "alpha_s4"],
        m.iter().enumerate().map(|(t, row)| {
            let mut r = vec![t.to_string()];
            r.extend(row.iter().map(f64::to_string));
            r
        }),
    )
}

/// Per step: trials reaching it, mean value, mean TD error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRow {
    pub t: usize,
    pub n: usize,
    pub mean_v: f64,
    pub mean_td: f64,
}

/// Averages over trials still running at each step; steps no trial
/// reached are omitted.
pub fn value_timecourse(records: &[TrialRecord]) -> Result<Vec<ValueRow>> {
    let with: Vec<_> = records.iter().filter_map(|r| Some((r.values?, r.td.as_deref()?, r.end_t))).collect();
    if with.is_empty() {
        return Err(Error::MissingData("no trials with critic values".into()));
    }
    Ok((0..N_STEPS)
        .filter_map(|t| {
            let live: Vec<_> = with.iter().filter(|w| t <= w.2).collect();
            if live.is_empty() {
                return None;
            }
            let n = live.len() as f64;
            let mean_v = live.iter().map(|w| w.0[t]).sum::<f64>() / n;
            let tds: Vec<f64> = live.iter().filter_map(|w| w.1.get(t).copied()).collect();
            let mean_td = if tds.is_empty() { f64::NAN } else { tds.iter().sum::<f64>() / tds.len() as f64 };
            Some(ValueRow { t, n: live.len(), mean_v, mean_td })
        })
        .collect())
}

pub fn write_values<W: Write>(out: W, rows: &[ValueRow]) -> Result<()> {
    write_rows(
        out,
        &["t", "n", "mean_v", "mean_td"],
        rows.iter()
            .map(|r| vec![r.t.to_string(), r.n.to_string(), r.mean_v.to_string(), r.mean_td.to_string()]),
    )
}

/// Per-episode training log.
pub fn write_train_log<W: Write>(out: W, log: &[TrainLogEntry]) -> Result<()> {
    write_rows(
        out,
        &["episode", "seed", "delta", "k", "reward", "outcome", "end_t", "loss_actor", "loss_critic", "loss_total"],
        log.iter().map(|e| {
            vec![
                e.episode.to_string(),
                e.seed.to_string(),
                e.delta.to_string(),
                e.k.to_string(),
                e.reward.to_string(),
                e.outcome.code().to_string(),
                e.end_t.to_string(),
                e.loss_actor.to_string(),
                e.loss_critic.to_string(),
                e.loss_total.to_string(),
            ]
        }),
    )
}

/// Probe dataset as `label, x0, x1, …`; the class count is recorded in
/// the header of the label column (`label/5`).
pub fn write_probe_dataset<T: Scalar, W: Write>(out: W, ds: &ProbeDataset<T>) -> Result<()> {
    let d = ds.x.cols();
    let mut header = vec![format!("label/{}", ds.n_classes)];
    header.extend((0..d).map(|i| format!("x{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        out,
        &header_refs,
        ds.y.iter().enumerate().map(|(r, y)| {
            let mut row = vec![y.to_string()];
            row.extend(ds.x.row(r).iter().map(|v| v.to_f64_lossy().to_string()));
            row
        }),
    )
}

pub fn read_probe_dataset<T: Scalar, R: Read>(input: R) -> Result<ProbeDataset<T>> {
    let t = read_table(input)?;
    let n_classes = t
        .header
        .first()
        .and_then(|h| h.strip_prefix("label/"))
        .and_then(|k| k.parse().ok())
        .ok_or_else(|| Error::Format("probe dataset must start with a label/<classes> column".into()))?;
    let d = t.header.len() - 1;
    let mut y = Vec::with_capacity(t.rows.len());
    let mut data = Vec::with_capacity(t.rows.len() * d);
    for (i, row) in t.rows.iter().enumerate() {
        let bad = |s: &str| Error::Format(format!("probe dataset row {i}: bad value {s:?}"));
        y.push(row[0].parse().map_err(|_| bad(&row[0]))?);
        for v in &row[1..] {
            data.push(sc::<T>(v.parse::<f64>().map_err(|_| bad(v))?));
        }
    }
    ProbeDataset::new(Tensor::new(&[y.len(), d], data)?, y, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip() {
        let pts = vec![
            PsychometricPoint::new(10.0, 3, 10).unwrap(),
            PsychometricPoint::new(20.0, 9, 10).unwrap(),
        ];
        let mut buf = Vec::new();
        write_psychometric_points(&mut buf, &pts).unwrap();
        let t = read_table(buf.as_slice()).unwrap();
        assert_eq!(t.f64_column("delta").unwrap(), vec![10.0, 20.0]);
        assert_eq!(t.f64_column("rate").unwrap(), vec![0.3, 0.9]);
        assert_eq!(t.f64_column("lo").unwrap()[1], pts[1].lo);
    }

    #[test]
    fn probe_dataset_round_trip() {
        let x = Tensor::<f32>::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.25, 1e-3]).unwrap();
        let ds = ProbeDataset::new(x, vec![4, 1], 5).unwrap();
        let mut buf = Vec::new();
        write_probe_dataset(&mut buf, &ds).unwrap();
        assert_eq!(read_probe_dataset::<f32, _>(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn confusion_layout() {
        let mut buf = Vec::new();
        write_confusion(&mut buf, &[vec![1.0, 0.0], vec![0.25, 0.75]]).unwrap();
        let t = read_table(buf.as_slice()).unwrap();
        assert_eq!(t.header, vec!["true", "pred_0", "pred_1"]);
        assert_eq!(t.f64_column("pred_1").unwrap(), vec![0.0, 0.75]);
    }
}
