//! Assembly of evaluation reports into comparison tables (regimes as
//! columns, N-way K-shot cells as rows, best/second-best highlighting) and
//! shot-vs-accuracy curve data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub mean: f64,
    pub half_width: Option<f64>,
}

/// Rows keyed by (N, K), columns keyed by regime name (order of first
/// appearance). Every (row, column) slot is either filled or absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: BTreeMap<(usize, usize), BTreeMap<String, TableCell>>,
}

/// Per-row ranking: `1` best, `2` second best, ties broken toward the
/// earlier column and annotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRank {
    pub rank: Option<u8>,
    pub tied: bool,
}

impl ComparisonTable {
    /// Build from evaluation reports; a duplicate (regime, N, K) is an error.
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("no reports".into()));
        }
        let mut columns: Vec<String> = Vec::new();
        let mut rows: BTreeMap<(usize, usize), BTreeMap<String, TableCell>> = BTreeMap::new();
        for rep in reports {
            let regime = rep.regime.clone().unwrap_or_else(|| "unnamed".into());
            if !columns.contains(&regime) {
                columns.push(regime.clone());
            }
            let key = (rep.spec.n_way, rep.spec.k_shot);
            let row = rows.entry(key).or_default();
            if row.contains_key(&regime) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate report for regime {regime}, cell {}w{}s",
                    key.0, key.1
                )));
            }
            row.insert(
                regime,
                TableCell {
                    mean: rep.acc_mean,
                    half_width: rep.acc_half_width,
                },
            );
        }
        Ok(Self { columns, rows })
    }

    /// Rank one row's columns by mean, ties toward the earlier column.
    pub fn rank_row(&self, key: &(usize, usize)) -> Vec<(String, CellRank)> {
        let row = match self.rows.get(key) {
            Some(r) => r,
            None => return Vec::new(),
        };
        let mut order: Vec<usize> = (0..self.columns.len())
            .filter(|&i| row.contains_key(&self.columns[i]))
            .collect();
        order.sort_by(|&a, &b| {
            let ma = row[&self.columns[a]].mean;
            let mb = row[&self.columns[b]].mean;
            mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
        });
        let mut out = Vec::new();
        for col_idx in 0..self.columns.len() {
            let col = &self.columns[col_idx];
            let rank = match row.get(col) {
                None => CellRank {
                    rank: None,
                    tied: false,
                },
                Some(cell) => {
                    let pos = order.iter().position(|&i| i == col_idx).unwrap();
                    let tied = order
                        .iter()
                        .any(|&i| i != col_idx && row[&self.columns[i]].mean == cell.mean);
                    CellRank {
                        rank: match pos {
                            0 => Some(1),
                            1 => Some(2),
                            _ => None,
                        },
                        tied,
                    }
                }
            };
            out.push((col.clone(), rank));
        }
        out
    }

    /// Markdown rendering: percentages with 2 decimals, best bold, second
    /// best underlined, ties annotated, absent cells as an em dash.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Cell |");
        for col in &self.columns {
            out.push_str(&format!(" {col} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.columns.len()));
        out.push('\n');
        for (key, row) in &self.rows {
            out.push_str(&format!("| {}w{}s |", key.0, key.1));
            let ranks = self.rank_row(key);
            for (col, rank) in &ranks {
                let text = match row.get(col) {
                    None => "—".to_string(),
                    Some(cell) => {
                        let mut s = format!("{:.2}", cell.mean * 100.0);
                        if let Some(hw) = cell.half_width {
                            s.push_str(&format!(" ± {:.2}", hw * 100.0));
                        }
                        let mut s = match rank.rank {
                            Some(1) => format!("**{s}**"),
                            Some(2) => format!("<u>{s}</u>"),
                            _ => s,
                        };
                        if rank.tied {
                            s.push_str(" (tie)");
                        }
                        s
                    }
                };
                out.push_str(&format!(" {text} |"));
            }
            out.push('\n');
        }
        out
    }

    /// Long-format CSV with a `rank` column (`1` best, `2` second, empty
    /// otherwise; ties suffixed `=`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,K,regime,acc_mean,acc_hw,rank\n");
        for (key, row) in &self.rows {
            for (col, rank) in self.rank_row(key) {
                let cell = match row.get(&col) {
                    Some(c) => c,
                    None => continue,
                };
                let hw = cell.half_width.map_or(String::new(), |h| format!("{h}"));
                let rank_s = match (rank.rank, rank.tied) {
                    (Some(r), false) => format!("{r}"),
                    (Some(r), true) => format!("{r}="),
                    (None, true) => "=".into(),
                    (None, false) => String::new(),
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    key.0, key.1, col, cell.mean, hw, rank_s
                ));
            }
        }
        out
    }
}

/// Shot-vs-accuracy curve data: one line per (regime, N, K), sorted.
pub fn curves_csv(reports: &[EvalReport]) -> Result<String> {
    let mut rows: Vec<(String, usize, usize, f64, Option<f64>)> = reports
        .iter()
        .map(|r| {
            (
                r.regime.clone().unwrap_or_else(|| "unnamed".into()),
                r.spec.n_way,
                r.spec.k_shot,
                r.acc_mean,
                r.acc_half_width,
            )
        })
        .collect();
    rows.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
    for w in rows.windows(2) {
        if (&w[0].0, w[0].1, w[0].2) == (&w[1].0, w[1].1, w[1].2) {
            return Err(Error::InvalidArgument(format!(
                "duplicate report for regime {}, cell {}w{}s",
                w[0].0, w[0].1, w[0].2
            )));
        }
    }
    let mut out = String::from("regime,N,K,acc_mean,acc_hw\n");
    for (regime, n, k, mean, hw) in rows {
        let hw = hw.map_or(String::new(), |h| format!("{h}"));
        out.push_str(&format!("{regime},{n},{k},{mean},{hw}\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{EpisodeSpec, QueryMode};
    use crate::protonet::DistanceKind;

    fn report(regime: &str, n: usize, k: usize, mean: f64) -> EvalReport {
        EvalReport {
            spec: EpisodeSpec {
                n_way: n,
                k_shot: k,
                m_query: 5,
                episodes: 10,
                master_seed: 1,
                query_mode: QueryMode::PerClass,
                distance_kind: DistanceKind::SquaredEuclidean,
            },
            regime: Some(regime.into()),
            backbone: None,
            config_hash: None,
            per_episode_acc: vec![mean; 10],
            acc_mean: mean,
            acc_half_width: Some(0.01),
            per_episode_f1: vec![mean; 10],
            f1_mean: mean,
            f1_half_width: Some(0.01),
            wall_clock_ms: None,
        }
    }

    #[test]
    fn single_column_is_best_everywhere() {
        let table =
            ComparisonTable::from_reports(&[report("FEL", 5, 1, 0.5), report("FEL", 5, 5, 0.7)])
                .unwrap();
        for key in table.rows.keys() {
            let ranks = table.rank_row(key);
            assert_eq!(ranks[0].1.rank, Some(1));
            assert!(!ranks[0].1.tied);
        }
    }

    #[test]
    fn ordering_best_and_second() {
        // row means {0.91, 0.88, 0.93} → best = third, second = first
        let table = ComparisonTable::from_reports(&[
            report("A", 5, 5, 0.91),
            report("B", 5, 5, 0.88),
            report("C", 5, 5, 0.93),
        ])
        .unwrap();
        let ranks = table.rank_row(&(5, 5));
        assert_eq!(ranks[0], ("A".into(), CellRank { rank: Some(2), tied: false }));
        assert_eq!(ranks[1], ("B".into(), CellRank { rank: None, tied: false }));
        assert_eq!(ranks[2], ("C".into(), CellRank { rank: Some(1), tied: false }));
    }

    #[test]
    fn ties_resolve_to_earlier_column_with_annotation() {
        let table = ComparisonTable::from_reports(&[
            report("A", 2, 1, 0.9),
            report("B", 2, 1, 0.9),
        ])
        .unwrap();
        let ranks = table.rank_row(&(2, 1));
        assert_eq!(ranks[0].1, CellRank { rank: Some(1), tied: true });
        assert_eq!(ranks[1].1, CellRank { rank: Some(2), tied: true });
        let md = table.to_markdown();
        assert!(md.contains("(tie)"));
        let csv = table.to_csv();
        assert!(csv.contains("1="));
        assert!(csv.contains("2="));
    }

    #[test]
    fn duplicate_cell_errors() {
        let err = ComparisonTable::from_reports(&[
            report("A", 2, 1, 0.9),
            report("A", 2, 1, 0.8),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn markdown_fixture() {
        let table = ComparisonTable::from_reports(&[
            report("FEL", 5, 5, 0.913),
            report("FETL", 5, 5, 0.956),
        ])
        .unwrap();
        let md = table.to_markdown();
        assert!(md.contains("| 5w5s |"), "{md}");
        assert!(md.contains("<u>91.30 ± 1.00</u>"), "{md}");
        assert!(md.contains("**95.60 ± 1.00**"), "{md}");
    }

    #[test]
    fn absent_cells_render_as_dash() {
        let table = ComparisonTable::from_reports(&[
            report("A", 2, 1, 0.9),
            report("B", 2, 5, 0.8),
        ])
        .unwrap();
        let md = table.to_markdown();
        assert!(md.contains("—"));
    }

    #[test]
    fn curves_sorted_and_unique() {
        let csv = curves_csv(&[
            report("B", 5, 5, 0.8),
            report("A", 5, 1, 0.6),
            report("A", 2, 1, 0.7),
        ])
        .unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "regime,N,K,acc_mean,acc_hw");
        assert!(lines[1].starts_with("A,2,1"));
        assert!(lines[2].starts_with("A,5,1"));
        assert!(lines[3].starts_with("B,5,5"));

        let err = curves_csv(&[report("A", 2, 1, 0.9), report("A", 2, 1, 0.9)]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }
}
