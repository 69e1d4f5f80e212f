//! CSV and JSON serialization of PMFs, trajectories and reports.
//!
//! Floating-point cells use `{:.16e}` (17 significant digits, enough to
//! round-trip any `f64`); integer cells are written as integers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::abm::{AbmRecord, MeanAbmRecord};
use crate::equilibrium::{EquilibriumSpec, LaplaceParams};
use crate::error::{Error, Result};
use crate::meanfield::MeanFieldRecord;
use crate::pmf::{Lattice, WealthPmf, NORMALIZATION_TOLERANCE};

pub const PMF_HEADER: [&str; 2] = ["n", "p"];
pub const ABM_HEADER: [&str; 6] = [
    "event",
    "time",
    "bank_cash",
    "bank_debt",
    "total_agent_debt",
    "gini",
];
pub const MEANFIELD_HEADER: [&str; 7] = ["t", "phase", "mass", "mean", "debt", "dkl_to_eq", "gini"];

pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_pmf_csv<W: Write>(out: W, p: &WealthPmf) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PMF_HEADER)?;
    for (n, v) in p.iter() {
        w.write_record([n.to_string(), format_f64(v)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_pmf_csv(path: &Path, p: &WealthPmf) -> Result<()> {
    write_pmf_csv(create(path)?, p)
}

/// Reads a PMF CSV. Rows must ascend strictly in `n`; gaps are filled with
/// zeros and the total mass must be 1 within the normalization tolerance.
pub fn read_pmf_csv<R: Read>(input: R) -> Result<WealthPmf> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(PMF_HEADER) {
        return Err(Error::InsufficientData(format!(
            "PMF header must be `n,p`, got `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut pairs: Vec<(i64, f64)> = Vec::new();
    for row in r.records() {
        let row = row?;
        let parse_err = |what: &str| Error::InsufficientData(format!("bad {what} in PMF row {row:?}"));
        let n: i64 = row[0].trim().parse().map_err(|_| parse_err("n"))?;
        let v: f64 = row[1].trim().parse().map_err(|_| parse_err("p"))?;
        if let Some(&(last, _)) = pairs.last() {
            if n <= last {
                return Err(Error::InsufficientData(format!(
                    "PMF rows must ascend in n, found {n} after {last}"
                )));
            }
        }
        pairs.push((n, v));
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientData("PMF file has no rows".into()));
    }
    WealthPmf::from_pairs(&pairs)
}

pub fn load_pmf_csv(path: &Path) -> Result<WealthPmf> {
    read_pmf_csv(File::open(path)?)
}

pub fn write_abm_trajectory_csv<W: Write>(out: W, rows: &[AbmRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABM_HEADER)?;
    for r in rows {
        w.write_record([
            r.event.to_string(),
            format_f64(r.time),
            r.bank_cash.to_string(),
            r.bank_debt.to_string(),
            r.total_agent_debt.to_string(),
            format_f64(r.gini),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Replica-averaged trajectory; the bank columns are means, hence floats.
pub fn write_mean_abm_trajectory_csv<W: Write>(out: W, rows: &[MeanAbmRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABM_HEADER)?;
    for r in rows {
        w.write_record([
            r.event.to_string(),
            format_f64(r.time),
            format_f64(r.bank_cash),
            format_f64(r.bank_debt),
            format_f64(r.total_agent_debt),
            format_f64(r.gini),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_meanfield_csv<W: Write>(out: W, rows: &[MeanFieldRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MEANFIELD_HEADER)?;
    for r in rows {
        w.write_record([
            format_f64(r.t),
            r.phase.label().to_string(),
            format_f64(r.mass),
            format_f64(r.mean),
            format_f64(r.debt),
            format_f64(r.dkl_to_eq),
            format_f64(r.gini),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON followed by a newline.
pub fn write_json<W: Write, T: Serialize + ?Sized>(mut out: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_json(create(path)?, value)
}

pub fn save_csv_with<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(BufWriter<File>) -> Result<()>,
{
    write(create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumReport {
    pub mu: f64,
    pub nu: f64,
    pub p0_star: f64,
    pub r_star: f64,
    pub d_star: f64,
    pub ratio_right: f64,
    pub ratio_left: f64,
    /// Absent for ν = 0, where the left rate diverges.
    pub laplace: Option<LaplaceParams>,
}

impl EquilibriumReport {
    pub fn new(spec: &EquilibriumSpec, laplace: Option<LaplaceParams>) -> Self {
        Self {
            mu: spec.mu,
            nu: spec.nu,
            p0_star: spec.p0_star,
            r_star: spec.r_star,
            d_star: spec.d_star,
            ratio_right: spec.ratio_right,
            ratio_left: spec.ratio_left,
            laplace,
        }
    }
}

/// Whether a PMF file's mass is within tolerance of one.
pub fn is_normalized(p: &WealthPmf) -> bool {
    (crate::pmf::mass(p) - 1.0).abs() <= NORMALIZATION_TOLERANCE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::Phase;

    #[test]
    fn pmf_round_trip() {
        let p = WealthPmf::from_pairs(&[(-2, 0.1), (0, 0.2), (3, 0.7)]).unwrap();
        let mut buf = Vec::new();
        write_pmf_csv(&mut buf, &p).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("n,p\n-2,1.0000000000000001e-1\n-1,0.0000000000000000e0\n"));
        let back = read_pmf_csv(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        assert!(is_normalized(&back));
    }

    #[test]
    fn pmf_reader_rejects_bad_files() {
        assert!(read_pmf_csv("n,q\n0,1\n".as_bytes()).is_err());
        assert!(read_pmf_csv("n,p\n1,0.5\n0,0.5\n".as_bytes()).is_err());
        assert!(read_pmf_csv("n,p\n0,0.5\n1,0.4\n".as_bytes()).is_err());
        assert!(read_pmf_csv("n,p\n".as_bytes()).is_err());
    }

    #[test]
    fn trajectory_headers() {
        let mut buf = Vec::new();
        write_abm_trajectory_csv(
            &mut buf,
            &[AbmRecord {
                event: 0,
                time: 0.0,
                bank_cash: 40,
                bank_debt: 0,
                total_agent_debt: 0,
                gini: 0.0,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "event,time,bank_cash,bank_debt,total_agent_debt,gini\n0,0.0000000000000000e0,40,0,0,0.0000000000000000e0\n"
        );

        let mut buf = Vec::new();
        write_meanfield_csv(
            &mut buf,
            &[MeanFieldRecord {
                t: 1.5,
                phase: Phase::PhaseII,
                mass: 1.0,
                mean: 10.0,
                debt: 4.0,
                dkl_to_eq: 0.25,
                gini: 0.5,
            }],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,phase,mass,mean,debt,dkl_to_eq,gini"));
        assert_eq!(
            lines.next(),
            Some("1.5000000000000000e0,II,1.0000000000000000e0,1.0000000000000000e1,4.0000000000000000e0,2.5000000000000000e-1,5.0000000000000000e-1")
        );
    }

    #[test]
    fn formatted_numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 6.02e23, -2.5] {
            assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
