//! Cumulative accuracy per turn, CSV output and leakage summaries.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::EpisodeRecord;
use crate::leakage::LeakFlag;
use crate::store::episode_id;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no episode records")]
    NoRecords,
    #[error("max_turns must be at least 1")]
    ZeroTurns,
    #[error("no curves to write")]
    NoCurves,
    #[error("curve is not monotone at turn {0}")]
    NotMonotone(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `values[t-1]` is the fraction of episodes solved at or before student
/// turn `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeAccuracyCurve {
    pub values: Vec<f64>,
    pub denominator: usize,
}

impl CumulativeAccuracyCurve {
    /// Builds the curve from each episode's solving turn (`None` = never).
    pub fn from_solve_turns<I>(solve_turns: I, max_turns: usize) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = Option<usize>>,
    {
        if max_turns == 0 {
            return Err(MetricsError::ZeroTurns);
        }
        let mut solved_at = vec![0usize; max_turns];
        let mut n = 0usize;
        for turn in solve_turns {
            n += 1;
            if let Some(t) = turn.filter(|t| (1..=max_turns).contains(t)) {
                solved_at[t - 1] += 1;
            }
        }
        if n == 0 {
            return Err(MetricsError::NoRecords);
        }
        let mut running = 0usize;
        let values: Vec<f64> = solved_at
            .iter()
            .map(|c| {
                running += c;
                running as f64 / n as f64
            })
            .collect();
        let curve = Self {
            values,
            denominator: n,
        };
        curve.check_monotone()?;
        Ok(curve)
    }

    pub fn check_monotone(&self) -> Result<(), MetricsError> {
        match self.values.windows(2).position(|w| w[1] < w[0]) {
            Some(i) => Err(MetricsError::NotMonotone(i + 2)),
            None => Ok(()),
        }
    }

    /// Accuracy at 1-based turn `t`.
    pub fn at(&self, t: usize) -> f64 {
        self.values[t - 1]
    }

    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("curve has at least one turn")
    }
}

/// Backend-error episodes count in the denominator only.
pub fn cumulative_accuracy(
    records: &[EpisodeRecord],
    max_turns: usize,
) -> Result<CumulativeAccuracyCurve, MetricsError> {
    CumulativeAccuracyCurve::from_solve_turns(
        records
            .iter()
            .map(|r| r.termination.solved_at().map(|t| t as usize)),
        max_turns,
    )
}

pub fn write_csv<W: Write>(
    curves: &[(String, CumulativeAccuracyCurve)],
    out: W,
) -> Result<(), MetricsError> {
    if curves.is_empty() {
        return Err(MetricsError::NoCurves);
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["turn".to_string()];
    header.extend(curves.iter().map(|(name, _)| name.clone()));
    w.write_record(&header)?;
    let rows = curves
        .iter()
        .map(|(_, c)| c.values.len())
        .max()
        .unwrap_or(0);
    for t in 0..rows {
        let mut row = vec![(t + 1).to_string()];
        row.extend(curves.iter().map(|(_, c)| {
            c.values
                .get(t)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default()
        }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `turn,<name>...`, one row per turn, six decimals.
pub fn emit_csv(
    curves: &[(String, CumulativeAccuracyCurve)],
    path: &Path,
) -> Result<(), MetricsError> {
    if curves.is_empty() {
        return Err(MetricsError::NoCurves);
    }
    write_csv(curves, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub rate: f64,
    pub teacher_turns: usize,
    pub flagged_turns: usize,
    pub flagged_episode_ids: Vec<String>,
}

/// Aggregates stored flags over all feedback turns.
pub fn leakage_report(records: &[EpisodeRecord]) -> LeakageReport {
    let flags: Vec<&LeakFlag> = records.iter().flat_map(|r| &r.leak_flags).collect();
    let flagged_turns = flags.iter().filter(|f| f.flagged).count();
    let rate = if flags.is_empty() {
        0.0
    } else {
        flagged_turns as f64 / flags.len() as f64
    };
    let flagged_episode_ids = records
        .iter()
        .filter(|r| r.leak_flags.iter().any(|f| f.flagged))
        .map(episode_id)
        .collect();
    LeakageReport {
        rate,
        teacher_turns: flags.len(),
        flagged_turns,
        flagged_episode_ids,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n: usize,
    pub curve: Vec<f64>,
    pub leak_rate: f64,
}

pub fn summarize(
    records: &[EpisodeRecord],
    max_turns: usize,
) -> Result<ReportSummary, MetricsError> {
    let curve = cumulative_accuracy(records, max_turns)?;
    Ok(ReportSummary {
        n: records.len(),
        curve: curve.values,
        leak_rate: leakage_report(records).rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{EpisodeConfig, PrivilegedInfo, Role};
    use crate::leakage::{LeakFlag, LeakStage};
    use crate::verify::{Verdict, VerdictMethod};

    fn curve(turns: &[Option<usize>], max: usize) -> CumulativeAccuracyCurve {
        CumulativeAccuracyCurve::from_solve_turns(turns.iter().copied(), max).unwrap()
    }

    #[test]
    fn all_solved_first_turn() {
        assert_eq!(curve(&[Some(1); 4], 3).values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn none_solved() {
        assert_eq!(curve(&[None; 4], 3).values, vec![0.0; 3]);
    }

    #[test]
    fn mixed_solve_turns_match_direct_count() {
        let turns = [
            Some(1),
            Some(1),
            Some(2),
            Some(3),
            None,
            None,
            None,
            None,
            None,
            None,
        ];
        let c = curve(&turns, 5);
        // direct counting: |{s <= t}| / 10
        let oracle: Vec<f64> = (1..=5)
            .map(|t| turns.iter().filter(|s| s.is_some_and(|s| s <= t)).count() as f64 / 10.0)
            .collect();
        assert_eq!(oracle, vec![0.2, 0.3, 0.4, 0.4, 0.4]);
        assert_eq!(c.values, oracle);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(
            cumulative_accuracy(&[], 3),
            Err(MetricsError::NoRecords)
        ));
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let c = CumulativeAccuracyCurve {
            values: vec![0.5, 0.75],
            denominator: 4,
        };
        let mut buf = Vec::new();
        write_csv(&[("didactic".into(), c.clone())], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "turn,didactic\n1,0.500000\n2,0.750000\n");
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let parsed: Vec<f64> = rdr
            .records()
            .map(|r| r.unwrap()[1].parse().unwrap())
            .collect();
        for (a, b) in parsed.iter().zip(&c.values) {
            assert!((a - b).abs() <= 5e-7);
        }
        assert!(matches!(
            write_csv(&[], Vec::new()),
            Err(MetricsError::NoCurves)
        ));
    }

    fn record_with_flags(id: &str, flags: &[bool]) -> EpisodeRecord {
        let cfg = EpisodeConfig::new(flags.len() as u32 + 1, 0);
        let mut rec =
            EpisodeRecord::new(id, "Q", PrivilegedInfo::GroundTruthAnswer("1".into()), &cfg)
                .unwrap();
        for &f in flags {
            rec.append_turn(Role::Student, "0").unwrap();
            rec.record_verdict(Verdict {
                correct: false,
                method: VerdictMethod::ExactString,
                detail: String::new(),
            })
            .unwrap();
            rec.append_turn(Role::Teacher, "hint").unwrap();
            rec.record_leak_flag(if f {
                LeakFlag {
                    flagged: true,
                    stage: LeakStage::StringMatch,
                    evidence: "1".into(),
                }
            } else {
                LeakFlag::clean()
            });
        }
        rec
    }

    #[test]
    fn leakage_report_cases() {
        let none = leakage_report(&[record_with_flags("a", &[])]);
        assert_eq!((none.rate, none.teacher_turns), (0.0, 0));

        let mut records: Vec<EpisodeRecord> = (0..100)
            .map(|i| record_with_flags(&format!("p{i}"), &[false, false]))
            .collect();
        records[17] = record_with_flags("p17", &[false, true]);
        let report = leakage_report(&records);
        assert_eq!(report.teacher_turns, 200);
        assert_eq!(report.rate, 0.005);
        assert_eq!(report.flagged_episode_ids, vec![episode_id(&records[17])]);
    }
}
